//! Tubelet decoder: factorised queries, self/cross-attention layers and the
//! box and class heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{AttnCache, Attention, Groups};
use super::config::{AttentionMode, ModelConfig, QueryBinding, QueryMode};
use super::encoder::FeatureMap;
use super::layers::{dropout_mask, gelu, gelu_grad, sigmoid, LayerNorm, Linear, LnCache, Mlp, MlpCache};
use super::output::TubeletSet;
use super::params::{Gradients, Init, ModelParams, ParamId, ParamRegistry};
use super::tensor::add_into;
use crate::error::{Error, Result};

/// Decoder queries for a clip, `[frames, slots, dim]` once materialised.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub frames: usize,
    pub slots: usize,
    pub dim: usize,
    /// `[slots, dim]`, shared by every frame.
    pub q_s: Vec<f64>,
    /// `[frames, dim]`, shared by every slot.
    pub q_t: Vec<f64>,
    /// Free `[frames, slots, dim]` embeddings; replaces the factorised sum when set.
    pub independent: Option<Vec<f64>>,
}

impl QuerySet {
    pub fn factorised(frames: usize, slots: usize, dim: usize, q_s: Vec<f64>, q_t: Vec<f64>) -> Result<Self> {
        if q_s.len() != slots * dim || q_t.len() != frames * dim {
            return Err(Error::Shape(format!(
                "query set [{frames}, {slots}, {dim}] got {} spatial and {} temporal values",
                q_s.len(),
                q_t.len()
            )));
        }
        Ok(Self {
            frames,
            slots,
            dim,
            q_s,
            q_t,
            independent: None,
        })
    }

    pub fn independent(frames: usize, slots: usize, dim: usize, q: Vec<f64>) -> Result<Self> {
        if q.len() != frames * slots * dim {
            return Err(Error::Shape(format!(
                "query set [{frames}, {slots}, {dim}] got {} values",
                q.len()
            )));
        }
        Ok(Self {
            frames,
            slots,
            dim,
            q_s: Vec::new(),
            q_t: Vec::new(),
            independent: Some(q),
        })
    }

    /// `q[t, j] = q_t[t] + q_s[j]`.
    pub fn materialise(&self) -> Vec<f64> {
        if let Some(q) = &self.independent {
            return q.clone();
        }
        let d = self.dim;
        let mut out = Vec::with_capacity(self.frames * self.slots * d);
        for t in 0..self.frames {
            for j in 0..self.slots {
                out.extend(
                    self.q_t[t * d..(t + 1) * d]
                        .iter()
                        .zip(&self.q_s[j * d..(j + 1) * d])
                        .map(|(a, b)| a + b),
                );
            }
        }
        out
    }
}

/// Intermediate activations of every decoder layer, each `[frames, slots, d_dec]`.
#[derive(Debug, Clone, Default)]
pub struct DecoderTrace {
    /// After self-attention and its residual.
    pub u: Vec<Vec<f64>>,
    /// After cross-attention and its residual.
    pub v: Vec<Vec<f64>>,
    /// After the MLP and its residual.
    pub z: Vec<Vec<f64>>,
    pub(crate) cache: Option<DecoderCache>,
}

impl DecoderTrace {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

#[derive(Debug, Clone)]
enum QueryParams {
    Factorised { q_s: ParamId, q_t: ParamId },
    Independent { q: ParamId },
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    sa: Attention,
    ln2: LayerNorm,
    ca: Attention,
    ln3: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    ln1: LnCache,
    sa: AttnCache,
    ln2: LnCache,
    ca: AttnCache,
    ln3: LnCache,
    h3: Vec<f64>,
    mlp: MlpCache,
    masks: Option<[Vec<f64>; 3]>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct DecoderCache {
    features: Vec<f64>,
    layers: Vec<LayerCache>,
    ln: LnCache,
    h: Vec<f64>,
    box_pre: [Vec<f64>; 2],
    box_act: [Vec<f64>; 2],
    class_in: Vec<f64>,
    /// Sigmoid outputs of the class head, one row per class-head input.
    class_probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    mem_proj: Linear,
    mem_pos: ParamId,
    queries: Option<QueryParams>,
    layers: Vec<DecoderLayer>,
    ln: LayerNorm,
    box_head: [Linear; 3],
    class_head: Linear,
    sa_steps: Vec<Groups>,
    ca_groups: Groups,
    frames: usize,
    slots: usize,
    cells: usize,
    d_enc: usize,
    d: usize,
    classes: usize,
    binding: QueryBinding,
    dropout: f64,
}

fn scaled(x: &[f64], mask: Option<&Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => x.to_vec(),
    }
}

impl Decoder {
    pub fn new(reg: &mut ParamRegistry, cfg: &ModelConfig) -> Self {
        let d = cfg.d_dec;
        let (frames, slots, cells) = (cfg.frames, cfg.slots(), cfg.grid_cells());
        let mem_proj = Linear::new(reg, "decoder.mem_proj", cfg.encoder.d_enc, d);
        let mem_pos = reg.add("decoder.mem_pos", &[cells, d], Init::Normal { std: cfg.pos_init_std });
        let queries = (cfg.layers > 0).then(|| {
            let init = Init::Normal { std: cfg.query_init_std };
            match cfg.query_mode {
                QueryMode::Factorised => QueryParams::Factorised {
                    q_s: reg.add("decoder.query_spatial", &[slots, d], init),
                    q_t: reg.add("decoder.query_temporal", &[frames, d], init),
                },
                QueryMode::Independent => QueryParams::Independent {
                    q: reg.add("decoder.query", &[frames, slots, d], init),
                },
            }
        });
        let layers = (0..cfg.layers)
            .map(|i| {
                let n = format!("decoder.layer{i}");
                DecoderLayer {
                    ln1: LayerNorm::new(reg, &format!("{n}.ln1"), d),
                    sa: Attention::new(reg, &format!("{n}.self_attn"), d, d, cfg.heads),
                    ln2: LayerNorm::new(reg, &format!("{n}.ln2"), d),
                    ca: Attention::new(reg, &format!("{n}.cross_attn"), d, d, cfg.heads),
                    ln3: LayerNorm::new(reg, &format!("{n}.ln3"), d),
                    mlp: Mlp::new(reg, &format!("{n}.mlp"), d, cfg.d_mlp),
                }
            })
            .collect();
        let ln = LayerNorm::new(reg, "decoder.ln", d);
        let box_head = [
            Linear::new(reg, "head.box0", d, d),
            Linear::new(reg, "head.box1", d, d),
            Linear::new(reg, "head.box2", d, 4),
        ];
        let class_head = Linear::new(reg, "head.class", d, cfg.classes + 1);
        let (sa_steps, ca_groups) = match cfg.attention {
            AttentionMode::Full => (
                vec![Groups::full(frames * slots, frames * slots)],
                Groups::full(frames * slots, frames * cells),
            ),
            AttentionMode::Factorised => (
                vec![Groups::within_frame(frames, slots), Groups::along_time(frames, slots)],
                Groups::same_frame_cross(frames, slots, cells),
            ),
        };
        Self {
            mem_proj,
            mem_pos,
            queries,
            layers,
            ln,
            box_head,
            class_head,
            sa_steps,
            ca_groups,
            frames,
            slots,
            cells,
            d_enc: cfg.encoder.d_enc,
            d,
            classes: cfg.classes,
            binding: cfg.binding,
            dropout: cfg.dropout,
        }
    }

    /// The stored query embeddings, or `None` when there are no decoder layers.
    pub fn queries(&self, p: &ModelParams) -> Option<QuerySet> {
        let (t, s, d) = (self.frames, self.slots, self.d);
        self.queries.as_ref().map(|q| match q {
            QueryParams::Factorised { q_s, q_t } => QuerySet {
                frames: t,
                slots: s,
                dim: d,
                q_s: p.value(*q_s).to_vec(),
                q_t: p.value(*q_t).to_vec(),
                independent: None,
            },
            QueryParams::Independent { q } => QuerySet {
                frames: t,
                slots: s,
                dim: d,
                q_s: Vec::new(),
                q_t: Vec::new(),
                independent: Some(p.value(*q).to_vec()),
            },
        })
    }

    fn steps(&self) -> Vec<&Groups> {
        self.sa_steps.iter().collect()
    }

    pub fn forward(
        &self,
        p: &ModelParams,
        x: &FeatureMap,
        q: Option<&QuerySet>,
        dropout_seed: Option<u64>,
        retain: bool,
    ) -> Result<(TubeletSet, DecoderTrace)> {
        if x.frames != self.frames || x.cells() != self.cells || x.dim != self.d_enc {
            return Err(Error::Shape(format!(
                "feature map [{}, {}x{}, {}] does not match decoder [{}, {} cells, {}]",
                x.frames, x.h, x.w, x.dim, self.frames, self.cells, self.d_enc
            )));
        }
        let d = self.d;
        let (t_n, s_n, c_n) = (self.frames, self.slots, self.cells);
        let nk = t_n * c_n;
        let mut mem = self.mem_proj.forward(p, &x.data, nk);
        let pos = p.value(self.mem_pos);
        for row in 0..nk {
            let c = row % c_n;
            add_into(&mut mem[row * d..(row + 1) * d], &pos[c * d..(c + 1) * d]);
        }

        let mut trace = DecoderTrace::default();
        let mut layer_caches = Vec::new();
        let n = t_n * s_n;
        let tokens = if self.layers.is_empty() {
            mem.clone()
        } else {
            let q = q.ok_or_else(|| Error::InvalidInput("decoder layers need a query set".into()))?;
            if q.frames != t_n || q.slots != s_n || q.dim != d {
                return Err(Error::Shape(format!(
                    "query set [{}, {}, {}] does not match decoder [{t_n}, {s_n}, {d}]",
                    q.frames, q.slots, q.dim
                )));
            }
            let mut rng = dropout_seed
                .filter(|_| self.dropout > 0.0)
                .map(ChaCha8Rng::seed_from_u64);
            let steps = self.steps();
            let mut cur = q.materialise();
            for layer in &self.layers {
                let masks = rng.as_mut().map(|r| {
                    [
                        dropout_mask(r, n * d, self.dropout),
                        dropout_mask(r, n * d, self.dropout),
                        dropout_mask(r, n * d, self.dropout),
                    ]
                });
                let (h1, ln1) = layer.ln1.forward(p, &cur);
                let (a, sa) = layer.sa.forward_self(p, &h1, n, &steps);
                let mut u = cur;
                add_into(&mut u, &scaled(&a, masks.as_ref().map(|m| &m[0])));
                let (h2, ln2) = layer.ln2.forward(p, &u);
                let (c, ca) = layer.ca.forward_cross(p, &h2, n, &mem, nk, &self.ca_groups);
                let mut v = u.clone();
                add_into(&mut v, &scaled(&c, masks.as_ref().map(|m| &m[1])));
                let (h3, ln3) = layer.ln3.forward(p, &v);
                let (m, mlp) = layer.mlp.forward(p, &h3, n);
                let mut z = v.clone();
                add_into(&mut z, &scaled(&m, masks.as_ref().map(|m| &m[2])));
                trace.u.push(u);
                trace.v.push(v);
                trace.z.push(z.clone());
                if retain {
                    layer_caches.push(LayerCache {
                        ln1,
                        sa,
                        ln2,
                        ca,
                        ln3,
                        h3,
                        mlp,
                        masks,
                    });
                }
                cur = z;
            }
            cur
        };

        let (h, ln) = self.ln.forward(p, &tokens);
        let pre0 = self.box_head[0].forward(p, &h, n);
        let act0: Vec<f64> = pre0.iter().map(|&v| gelu(v)).collect();
        let pre1 = self.box_head[1].forward(p, &act0, n);
        let act1: Vec<f64> = pre1.iter().map(|&v| gelu(v)).collect();
        let boxes: Vec<f64> = self.box_head[2].forward(p, &act1, n).into_iter().map(sigmoid).collect();

        let ch = self.classes + 1;
        let class_in = match self.binding {
            QueryBinding::Person => h.clone(),
            QueryBinding::Action => {
                let mut pooled = vec![0.0; s_n * d];
                for t in 0..t_n {
                    add_into(&mut pooled, &h[t * s_n * d..(t + 1) * s_n * d]);
                }
                pooled.iter_mut().for_each(|v| *v /= t_n as f64);
                pooled
            }
        };
        let rows = class_in.len() / d;
        let class_probs: Vec<f64> = self
            .class_head
            .forward(p, &class_in, rows)
            .into_iter()
            .map(sigmoid)
            .collect();
        let probs = match self.binding {
            QueryBinding::Person => class_probs.clone(),
            QueryBinding::Action => {
                let mut out = Vec::with_capacity(n * ch);
                for _ in 0..t_n {
                    out.extend_from_slice(&class_probs);
                }
                out
            }
        };
        let out = TubeletSet::new(t_n, s_n, self.classes, boxes, probs)?;
        if retain {
            trace.cache = Some(DecoderCache {
                features: x.data.clone(),
                layers: layer_caches,
                ln,
                h,
                box_pre: [pre0, pre1],
                box_act: [act0, act1],
                class_in,
                class_probs,
            });
        }
        Ok((out, trace))
    }

    /// Accumulates parameter gradients (including the stored queries) and
    /// returns the gradient with respect to the feature map.
    pub fn backward(
        &self,
        p: &ModelParams,
        g: &mut Gradients,
        trace: &DecoderTrace,
        out: &TubeletSet,
        d_boxes: &[f64],
        d_probs: &[f64],
    ) -> Result<Vec<f64>> {
        let cache = trace
            .cache
            .as_ref()
            .ok_or(Error::MissingTrace)?;
        if d_boxes.len() != out.boxes.len() || d_probs.len() != out.probs.len() {
            return Err(Error::Shape("upstream gradients do not match the tubelet set".into()));
        }
        let d = self.d;
        let (t_n, s_n, c_n) = (self.frames, self.slots, self.cells);
        let n = t_n * s_n;
        let nk = t_n * c_n;
        let ch = self.classes + 1;

        // box head
        let dpre2: Vec<f64> = d_boxes
            .iter()
            .zip(&out.boxes)
            .map(|(dy, s)| dy * s * (1.0 - s))
            .collect();
        let mut dact1 = self.box_head[2].backward_new(p, g, &cache.box_act[1], n, &dpre2);
        for (dv, &v) in dact1.iter_mut().zip(&cache.box_pre[1]) {
            *dv *= gelu_grad(v);
        }
        let mut dact0 = self.box_head[1].backward_new(p, g, &cache.box_act[0], n, &dact1);
        for (dv, &v) in dact0.iter_mut().zip(&cache.box_pre[0]) {
            *dv *= gelu_grad(v);
        }
        let mut dh = self.box_head[0].backward_new(p, g, &cache.h, n, &dact0);

        // class head
        let rows = cache.class_in.len() / d;
        let mut dlogit = vec![0.0; rows * ch];
        for (i, dp) in d_probs.chunks_exact(ch).enumerate() {
            let r = i % rows;
            for k in 0..ch {
                let s = cache.class_probs[r * ch + k];
                dlogit[r * ch + k] += dp[k] * s * (1.0 - s);
            }
        }
        let dclass_in = self.class_head.backward_new(p, g, &cache.class_in, rows, &dlogit);
        match self.binding {
            QueryBinding::Person => add_into(&mut dh, &dclass_in),
            QueryBinding::Action => {
                let inv = 1.0 / t_n as f64;
                for t in 0..t_n {
                    for (o, v) in dh[t * s_n * d..(t + 1) * s_n * d].iter_mut().zip(&dclass_in) {
                        *o += v * inv;
                    }
                }
            }
        }
        let mut dcur = self.ln.backward(p, g, &cache.ln, &dh);

        let mut dmem = vec![0.0; nk * d];
        if self.layers.is_empty() {
            add_into(&mut dmem, &dcur);
        } else {
            let steps = self.steps();
            for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
                let mask = |k: usize, x: &[f64]| scaled(x, lc.masks.as_ref().map(|m| &m[k]));
                // z = v + MLP(LN(v))
                let dm = mask(2, &dcur);
                let dh3 = layer.mlp.backward(p, g, &lc.h3, n, &lc.mlp, &dm);
                add_into(&mut dcur, &layer.ln3.backward(p, g, &lc.ln3, &dh3));
                // v = u + CA(LN(u), mem)
                let dc = mask(1, &dcur);
                let (dh2, dm_ca) = layer.ca.backward(p, g, &lc.ca, &[&self.ca_groups], &dc);
                add_into(&mut dmem, &dm_ca);
                add_into(&mut dcur, &layer.ln2.backward(p, g, &lc.ln2, &dh2));
                // u = q + SA(LN(q))
                let da = mask(0, &dcur);
                let (dh1, _) = layer.sa.backward(p, g, &lc.sa, &steps, &da);
                add_into(&mut dcur, &layer.ln1.backward(p, g, &lc.ln1, &dh1));
            }
            match self.queries.as_ref().expect("layers imply queries") {
                QueryParams::Factorised { q_s, q_t } => {
                    {
                        let gs = g.get_mut(*q_s);
                        for t in 0..t_n {
                            add_into(gs, &dcur[t * s_n * d..(t + 1) * s_n * d]);
                        }
                    }
                    let gt = g.get_mut(*q_t);
                    for t in 0..t_n {
                        for j in 0..s_n {
                            let o = (t * s_n + j) * d;
                            add_into(&mut gt[t * d..(t + 1) * d], &dcur[o..o + d]);
                        }
                    }
                }
                QueryParams::Independent { q } => add_into(g.get_mut(*q), &dcur),
            }
        }
        {
            let gp = g.get_mut(self.mem_pos);
            for row in 0..nk {
                let c = row % c_n;
                add_into(&mut gp[c * d..(c + 1) * d], &dmem[row * d..(row + 1) * d]);
            }
        }
        let mut dx = vec![0.0; cache.features.len()];
        self.mem_proj.backward(p, g, &cache.features, nk, &dmem, Some(&mut dx));
        Ok(dx)
    }
}
