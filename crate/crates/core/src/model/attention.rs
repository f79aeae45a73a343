//! Multi-head attention restricted to token groups.
//!
//! A [`Groups`] value lists which query tokens attend to which key tokens.
//! Factorised attention is expressed as block groupings (same frame, same
//! spatial index, same time step); full attention is a single group.

use super::layers::Linear;
use super::params::{Gradients, ModelParams, ParamRegistry};
use super::tensor::{axpy, dot};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Groups(pub Vec<Group>);

impl Groups {
    /// Every query attends to every key.
    pub fn full(n_queries: usize, n_keys: usize) -> Self {
        Groups(vec![Group {
            queries: (0..n_queries).collect(),
            keys: (0..n_keys).collect(),
        }])
    }

    /// Tokens laid out `[frames, per_frame]`; attention within each frame.
    pub fn within_frame(frames: usize, per_frame: usize) -> Self {
        Groups(
            (0..frames)
                .map(|t| {
                    let idx: Vec<usize> = (0..per_frame).map(|j| t * per_frame + j).collect();
                    Group {
                        queries: idx.clone(),
                        keys: idx,
                    }
                })
                .collect(),
        )
    }

    /// Tokens laid out `[frames, per_frame]`; attention along time at each slot.
    pub fn along_time(frames: usize, per_frame: usize) -> Self {
        Groups(
            (0..per_frame)
                .map(|j| {
                    let idx: Vec<usize> = (0..frames).map(|t| t * per_frame + j).collect();
                    Group {
                        queries: idx.clone(),
                        keys: idx,
                    }
                })
                .collect(),
        )
    }

    /// Queries `[frames, q_per_frame]` attend to keys `[frames, k_per_frame]`
    /// of the same frame only.
    pub fn same_frame_cross(frames: usize, q_per_frame: usize, k_per_frame: usize) -> Self {
        Groups(
            (0..frames)
                .map(|t| Group {
                    queries: (0..q_per_frame).map(|j| t * q_per_frame + j).collect(),
                    keys: (0..k_per_frame).map(|p| t * k_per_frame + p).collect(),
                })
                .collect(),
        )
    }

    /// Dense boolean mask `[n_queries, n_keys]` equivalent to this grouping.
    pub fn to_mask(&self, n_queries: usize, n_keys: usize) -> Vec<bool> {
        let mut mask = vec![false; n_queries * n_keys];
        for g in &self.0 {
            for &q in &g.queries {
                for &k in &g.keys {
                    mask[q * n_keys + k] = true;
                }
            }
        }
        mask
    }
}

/// Softmax probabilities of one attention step, per (group, head).
#[derive(Debug, Clone, Default)]
pub(crate) struct StepCache {
    probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct AttnCache {
    xq: Vec<f64>,
    xkv: Option<Vec<f64>>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Output of every step; step `s > 0` uses step `s - 1`'s output as values.
    outs: Vec<Vec<f64>>,
    steps: Vec<StepCache>,
    nq: usize,
    nk: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

fn attend(q: &[f64], k: &[f64], vin: &[f64], nq: usize, d: usize, heads: usize, groups: &Groups) -> (Vec<f64>, StepCache) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * d];
    let mut probs = Vec::with_capacity(groups.0.len() * heads);
    let mut scores = Vec::new();
    for g in &groups.0 {
        let nkg = g.keys.len();
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = vec![0.0; g.queries.len() * nkg];
            for (a, &qi) in g.queries.iter().enumerate() {
                let qrow = &q[qi * d + cols.start..qi * d + cols.end];
                scores.clear();
                scores.extend(g.keys.iter().map(|&ki| scale * dot(qrow, &k[ki * d + cols.start..ki * d + cols.end])));
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = &mut p[a * nkg..(a + 1) * nkg];
                let orow = &mut out[qi * d + cols.start..qi * d + cols.end];
                for (b, &ki) in g.keys.iter().enumerate() {
                    prow[b] = scores[b] / z;
                    axpy(prow[b], &vin[ki * d + cols.start..ki * d + cols.end], orow);
                }
            }
            probs.push(p);
        }
    }
    (out, StepCache { probs })
}

/// Multi-head attention of already-projected `q` (`nq` rows), `k` and `v`
/// (rows indexed by the group keys), width `d`, restricted to `groups`.
pub fn grouped_attention(q: &[f64], k: &[f64], v: &[f64], nq: usize, d: usize, heads: usize, groups: &Groups) -> Vec<f64> {
    attend(q, k, v, nq, d, heads, groups).0
}

#[allow(clippy::too_many_arguments)]
fn attend_backward(
    q: &[f64],
    k: &[f64],
    vin: &[f64],
    d: usize,
    heads: usize,
    groups: &Groups,
    cache: &StepCache,
    dout: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dvin: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = Vec::new();
    let mut idx = 0;
    for g in &groups.0 {
        let nkg = g.keys.len();
        for h in 0..heads {
            let p = &cache.probs[idx];
            idx += 1;
            let c0 = h * dh;
            for (a, &qi) in g.queries.iter().enumerate() {
                let prow = &p[a * nkg..(a + 1) * nkg];
                let drow = &dout[qi * d + c0..qi * d + c0 + dh];
                dp.clear();
                let mut weighted = 0.0;
                for (b, &ki) in g.keys.iter().enumerate() {
                    let v = dot(drow, &vin[ki * d + c0..ki * d + c0 + dh]);
                    weighted += prow[b] * v;
                    dp.push(v);
                    axpy(prow[b], drow, &mut dvin[ki * d + c0..ki * d + c0 + dh]);
                }
                for (b, &ki) in g.keys.iter().enumerate() {
                    let ds = scale * prow[b] * (dp[b] - weighted);
                    if ds != 0.0 {
                        axpy(ds, &k[ki * d + c0..ki * d + c0 + dh], &mut dq[qi * d + c0..qi * d + c0 + dh]);
                        axpy(ds, &q[qi * d + c0..qi * d + c0 + dh], &mut dk[ki * d + c0..ki * d + c0 + dh]);
                    }
                }
            }
        }
    }
}

impl Attention {
    pub fn new(reg: &mut ParamRegistry, name: &str, d: usize, d_kv: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(reg, &format!("{name}.q"), d, d),
            k: Linear::new(reg, &format!("{name}.k"), d_kv, d),
            v: Linear::new(reg, &format!("{name}.v"), d_kv, d),
            o: Linear::new(reg, &format!("{name}.o"), d, d),
            heads,
            d,
        }
    }

    /// Self-attention; the projections are computed once and every grouping in
    /// `steps` is applied in turn, each step attending over the previous step's
    /// output.
    pub fn forward_self(&self, p: &ModelParams, x: &[f64], n: usize, steps: &[&Groups]) -> (Vec<f64>, AttnCache) {
        self.run(p, x, n, None, n, steps)
    }

    pub fn forward_cross(
        &self,
        p: &ModelParams,
        xq: &[f64],
        nq: usize,
        mem: &[f64],
        nk: usize,
        groups: &Groups,
    ) -> (Vec<f64>, AttnCache) {
        self.run(p, xq, nq, Some(mem), nk, &[groups])
    }

    fn run(
        &self,
        p: &ModelParams,
        xq: &[f64],
        nq: usize,
        mem: Option<&[f64]>,
        nk: usize,
        steps: &[&Groups],
    ) -> (Vec<f64>, AttnCache) {
        let kv_in = mem.unwrap_or(xq);
        let q = self.q.forward(p, xq, nq);
        let k = self.k.forward(p, kv_in, nk);
        let v = self.v.forward(p, kv_in, nk);
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(steps.len());
        let mut caches = Vec::with_capacity(steps.len());
        for (s, groups) in steps.iter().enumerate() {
            let vin = if s == 0 { &v } else { &outs[s - 1] };
            let (o, c) = attend(&q, &k, vin, nq, self.d, self.heads, groups);
            outs.push(o);
            caches.push(c);
        }
        let y = self.o.forward(p, outs.last().expect("at least one step"), nq);
        let cache = AttnCache {
            xq: xq.to_vec(),
            xkv: mem.map(|m| m.to_vec()),
            q,
            k,
            v,
            outs,
            steps: caches,
            nq,
            nk,
        };
        (y, cache)
    }

    /// Returns `(d_xq, d_mem)`; `d_mem` is empty for self-attention, whose key
    /// and value gradients are folded into `d_xq`.
    pub fn backward(
        &self,
        p: &ModelParams,
        g: &mut Gradients,
        cache: &AttnCache,
        steps: &[&Groups],
        dy: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let (nq, nk, d) = (cache.nq, cache.nk, self.d);
        let last = cache.outs.last().expect("at least one step");
        let mut dcur = self.o.backward_new(p, g, last, nq, dy);
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        for s in (0..steps.len()).rev() {
            let vin = if s == 0 { &cache.v } else { &cache.outs[s - 1] };
            let mut dvin = vec![0.0; vin.len()];
            attend_backward(
                &cache.q,
                &cache.k,
                vin,
                d,
                self.heads,
                steps[s],
                &cache.steps[s],
                &dcur,
                &mut dq,
                &mut dk,
                &mut dvin,
            );
            dcur = dvin;
        }
        let dv = dcur;
        let mut dxq = self.q.backward_new(p, g, &cache.xq, nq, &dq);
        match &cache.xkv {
            Some(mem) => {
                let mut dmem = self.k.backward_new(p, g, mem, nk, &dk);
                self.v.backward(p, g, mem, nk, &dv, Some(&mut dmem));
                (dxq, dmem)
            }
            None => {
                self.k.backward(p, g, &cache.xq, nk, &dk, Some(&mut dxq));
                self.v.backward(p, g, &cache.xq, nk, &dv, Some(&mut dxq));
                (dxq, Vec::new())
            }
        }
    }
}
