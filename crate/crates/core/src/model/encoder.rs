//! Factorised video encoder: tubelet patch embedding, per-frame spatial blocks,
//! per-location temporal blocks, and linear temporal upsampling back to the
//! input frame rate.

use super::attention::{AttnCache, Attention, Groups};
use super::config::ModelConfig;
use super::layers::{LayerNorm, Linear, LnCache, Mlp, MlpCache};
use super::params::{Gradients, Init, ModelParams, ParamId, ParamRegistry};
use super::tensor::{add_into, axpy, Tensor};
use crate::error::{Error, Result};

/// Encoder output `[frames, h, w, dim]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn at(&self, t: usize, y: usize, x: usize) -> &[f64] {
        let o = ((t * self.h + y) * self.w + x) * self.dim;
        &self.data[o..o + self.dim]
    }
}

/// Pre-norm transformer block over a token grouping.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct BlockCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    h2: Vec<f64>,
    mlp: MlpCache,
}

impl Block {
    pub fn new(reg: &mut ParamRegistry, name: &str, d: usize, hidden: usize, heads: usize) -> Self {
        Self {
            ln1: LayerNorm::new(reg, &format!("{name}.ln1"), d),
            attn: Attention::new(reg, &format!("{name}.attn"), d, d, heads),
            ln2: LayerNorm::new(reg, &format!("{name}.ln2"), d),
            mlp: Mlp::new(reg, &format!("{name}.mlp"), d, hidden),
        }
    }

    pub fn forward(&self, p: &ModelParams, x: &[f64], n: usize, groups: &Groups) -> (Vec<f64>, BlockCache) {
        let (h1, ln1) = self.ln1.forward(p, x);
        let (a, attn) = self.attn.forward_self(p, &h1, n, &[groups]);
        let mut mid = x.to_vec();
        add_into(&mut mid, &a);
        let (h2, ln2) = self.ln2.forward(p, &mid);
        let (m, mlp) = self.mlp.forward(p, &h2, n);
        add_into(&mut mid, &m);
        (
            mid,
            BlockCache {
                ln1,
                attn,
                ln2,
                h2,
                mlp,
            },
        )
    }

    pub fn backward(
        &self,
        p: &ModelParams,
        g: &mut Gradients,
        cache: &BlockCache,
        n: usize,
        groups: &Groups,
        dy: &[f64],
    ) -> Vec<f64> {
        let dh2 = self.mlp.backward(p, g, &cache.h2, n, &cache.mlp, dy);
        let mut dmid = dy.to_vec();
        add_into(&mut dmid, &self.ln2.backward(p, g, &cache.ln2, &dh2));
        let (dh1, _) = self.attn.backward(p, g, &cache.attn, &[groups], &dmid);
        let mut dx = dmid;
        add_into(&mut dx, &self.ln1.backward(p, g, &cache.ln1, &dh1));
        dx
    }
}

/// Linear interpolation weights mapping `src` frames onto `dst` frames with
/// half-frame alignment and clamped endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalUpsample {
    pub taps: Vec<(usize, usize, f64)>,
}

impl TemporalUpsample {
    pub fn new(src: usize, dst: usize) -> Self {
        let ratio = src as f64 / dst as f64;
        let taps = (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect();
        Self { taps }
    }

    /// `x` is `[src, row]`; returns `[dst, row]`.
    pub fn apply(&self, x: &[f64], row: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.taps.len() * row];
        for (i, &(i0, i1, w)) in self.taps.iter().enumerate() {
            let o = &mut out[i * row..(i + 1) * row];
            axpy(1.0 - w, &x[i0 * row..(i0 + 1) * row], o);
            if w != 0.0 {
                axpy(w, &x[i1 * row..(i1 + 1) * row], o);
            }
        }
        out
    }

    pub fn backward(&self, dy: &[f64], src: usize, row: usize) -> Vec<f64> {
        let mut dx = vec![0.0; src * row];
        for (i, &(i0, i1, w)) in self.taps.iter().enumerate() {
            let d = &dy[i * row..(i + 1) * row];
            axpy(1.0 - w, d, &mut dx[i0 * row..(i0 + 1) * row]);
            if w != 0.0 {
                axpy(w, d, &mut dx[i1 * row..(i1 + 1) * row]);
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    embed: Linear,
    pos_space: ParamId,
    pos_time: ParamId,
    spatial: Vec<Block>,
    temporal: Vec<Block>,
    ln: LayerNorm,
    spatial_groups: Groups,
    temporal_groups: Groups,
    upsample: TemporalUpsample,
    frames: usize,
    token_frames: usize,
    grid: (usize, usize),
    patch_t: usize,
    patch_hw: usize,
    channels: usize,
    height: usize,
    width: usize,
    d: usize,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct EncoderCache {
    patches: Vec<f64>,
    spatial: Vec<BlockCache>,
    temporal: Vec<BlockCache>,
    ln: LnCache,
}

impl Encoder {
    pub fn new(reg: &mut ParamRegistry, cfg: &ModelConfig) -> Self {
        let e = &cfg.encoder;
        let d = e.d_enc;
        let cells = cfg.grid_cells();
        let tf = cfg.token_frames();
        let embed = Linear::new(reg, "encoder.embed", cfg.patch_dim(), d);
        let pos_space = reg.add("encoder.pos_space", &[cells, d], Init::Normal { std: cfg.pos_init_std });
        let pos_time = reg.add("encoder.pos_time", &[tf, d], Init::Normal { std: cfg.pos_init_std });
        let spatial = (0..e.layers_spatial)
            .map(|i| Block::new(reg, &format!("encoder.spatial{i}"), d, e.d_mlp, e.heads))
            .collect();
        let temporal = (0..e.layers_temporal)
            .map(|i| Block::new(reg, &format!("encoder.temporal{i}"), d, e.d_mlp, e.heads))
            .collect();
        let ln = LayerNorm::new(reg, "encoder.ln", d);
        Self {
            embed,
            pos_space,
            pos_time,
            spatial,
            temporal,
            ln,
            spatial_groups: Groups::within_frame(tf, cells),
            temporal_groups: Groups::along_time(tf, cells),
            upsample: TemporalUpsample::new(tf, cfg.frames),
            frames: cfg.frames,
            token_frames: tf,
            grid: cfg.grid(),
            patch_t: e.patch_t,
            patch_hw: e.patch_hw,
            channels: cfg.channels,
            height: cfg.height,
            width: cfg.width,
            d,
        }
    }

    /// `[T, H, W, C]` clip into `[t·h·w, patch_t·p·p·C]` tubelet patches.
    fn patchify(&self, clip: &Tensor) -> Result<Vec<f64>> {
        let expect = [self.frames, self.height, self.width, self.channels];
        if clip.shape != expect {
            return Err(Error::Config(format!(
                "clip shape {:?} does not match configured {:?}",
                clip.shape, expect
            )));
        }
        let (gh, gw) = self.grid;
        let (pt, ps, c) = (self.patch_t, self.patch_hw, self.channels);
        let pdim = pt * ps * ps * c;
        let mut out = vec![0.0; self.token_frames * gh * gw * pdim];
        for tau in 0..self.token_frames {
            for gy in 0..gh {
                for gx in 0..gw {
                    let token = (tau * gh + gy) * gw + gx;
                    let dst = &mut out[token * pdim..(token + 1) * pdim];
                    let mut k = 0;
                    for dt in 0..pt {
                        let t = tau * pt + dt;
                        for dy in 0..ps {
                            let y = gy * ps + dy;
                            let src = ((t * self.height + y) * self.width + gx * ps) * c;
                            dst[k..k + ps * c].copy_from_slice(&clip.data[src..src + ps * c]);
                            k += ps * c;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&self, p: &ModelParams, clip: &Tensor, retain: bool) -> Result<(FeatureMap, Option<EncoderCache>)> {
        let patches = self.patchify(clip)?;
        let cells = self.grid.0 * self.grid.1;
        let n = self.token_frames * cells;
        let d = self.d;
        let mut x = self.embed.forward(p, &patches, n);
        let (ps, pt) = (p.value(self.pos_space), p.value(self.pos_time));
        for tau in 0..self.token_frames {
            for c in 0..cells {
                let row = &mut x[(tau * cells + c) * d..(tau * cells + c + 1) * d];
                add_into(row, &ps[c * d..(c + 1) * d]);
                add_into(row, &pt[tau * d..(tau + 1) * d]);
            }
        }
        let mut spatial = Vec::new();
        for b in &self.spatial {
            let (y, c) = b.forward(p, &x, n, &self.spatial_groups);
            x = y;
            if retain {
                spatial.push(c);
            }
        }
        let mut temporal = Vec::new();
        for b in &self.temporal {
            let (y, c) = b.forward(p, &x, n, &self.temporal_groups);
            x = y;
            if retain {
                temporal.push(c);
            }
        }
        let (e, ln) = self.ln.forward(p, &x);
        let data = self.upsample.apply(&e, cells * d);
        let fm = FeatureMap {
            frames: self.frames,
            h: self.grid.0,
            w: self.grid.1,
            dim: d,
            data,
        };
        let cache = retain.then(|| EncoderCache {
            patches,
            spatial,
            temporal,
            ln,
        });
        Ok((fm, cache))
    }

    /// Backpropagates the gradient of the upsampled feature map into the encoder parameters.
    pub fn backward(&self, p: &ModelParams, g: &mut Gradients, cache: &EncoderCache, d_features: &[f64]) {
        let cells = self.grid.0 * self.grid.1;
        let n = self.token_frames * cells;
        let d = self.d;
        let de = self.upsample.backward(d_features, self.token_frames, cells * d);
        let mut dx = self.ln.backward(p, g, &cache.ln, &de);
        for (b, c) in self.temporal.iter().zip(&cache.temporal).rev() {
            dx = b.backward(p, g, c, n, &self.temporal_groups, &dx);
        }
        for (b, c) in self.spatial.iter().zip(&cache.spatial).rev() {
            dx = b.backward(p, g, c, n, &self.spatial_groups, &dx);
        }
        {
            let dps = g.get_mut(self.pos_space);
            for tau in 0..self.token_frames {
                for c in 0..cells {
                    add_into(&mut dps[c * d..(c + 1) * d], &dx[(tau * cells + c) * d..(tau * cells + c + 1) * d]);
                }
            }
        }
        {
            let dpt = g.get_mut(self.pos_time);
            for tau in 0..self.token_frames {
                for c in 0..cells {
                    add_into(&mut dpt[tau * d..(tau + 1) * d], &dx[(tau * cells + c) * d..(tau * cells + c + 1) * d]);
                }
            }
        }
        self.embed.backward(p, g, &cache.patches, n, &dx, None);
    }
}
