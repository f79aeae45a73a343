//! Analytic operation count for one decoder layer.
//!
//! Every matrix product `[m, k] x [k, n]` costs `2·m·n·k`. Softmax, layer
//! norm, biases and activations are not counted. An attention group whose
//! queries see a single key is an identity mixing and costs nothing.

use super::attention::Groups;
use super::config::{AttentionMode, ModelConfig};

/// Per-term operation counts (in FLOPs, not GFLOPs) for one decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlopBreakdown {
    /// Self-attention Q, K, V and output projections.
    pub sa_proj: f64,
    /// Self-attention scores and weighted sums.
    pub sa_attn: f64,
    /// Cross-attention query and output projections.
    pub ca_query_proj: f64,
    /// Cross-attention key/value projections of the memory.
    pub ca_kv_proj: f64,
    /// Cross-attention scores and weighted sums.
    pub ca_attn: f64,
    pub mlp: f64,
}

impl FlopBreakdown {
    pub fn total(&self) -> f64 {
        self.sa_proj + self.sa_attn + self.ca_query_proj + self.ca_kv_proj + self.ca_attn + self.mlp
    }

    pub fn gflops(&self) -> f64 {
        self.total() / 1e9
    }
}

fn attention_cost(groups: &Groups, d: f64) -> f64 {
    groups
        .0
        .iter()
        .filter(|g| g.keys.len() > 1)
        .map(|g| 2.0 * 2.0 * g.queries.len() as f64 * g.keys.len() as f64 * d)
        .sum()
}

/// Closed-form count, used as the reference for [`flop_breakdown`].
pub fn flop_breakdown(cfg: &ModelConfig, mode: AttentionMode) -> FlopBreakdown {
    let (t, s, hw) = (cfg.frames as f64, cfg.queries as f64, cfg.grid_cells() as f64);
    let (d, f) = (cfg.d_dec as f64, cfg.d_mlp as f64);
    let n = t * s;
    let m = t * hw;
    let pair = |queries: f64, keys: f64, groups: f64| {
        if keys > 1.0 {
            2.0 * 2.0 * groups * queries * keys * d
        } else {
            0.0
        }
    };
    let (sa_attn, ca_attn) = match mode {
        AttentionMode::Full => (pair(n, n, 1.0), pair(n, m, 1.0)),
        AttentionMode::Factorised => (pair(s, s, t) + pair(t, t, s), pair(s, hw, t)),
    };
    FlopBreakdown {
        sa_proj: 4.0 * 2.0 * n * d * d,
        sa_attn,
        ca_query_proj: 2.0 * 2.0 * n * d * d,
        ca_kv_proj: 2.0 * 2.0 * m * d * d,
        ca_attn,
        mlp: 2.0 * 2.0 * n * d * f,
    }
}

/// GFLOPs of one decoder layer (self-attention, cross-attention and MLP).
pub fn flop_count(cfg: &ModelConfig, mode: AttentionMode) -> f64 {
    flop_breakdown(cfg, mode).gflops()
}

/// Counts the attention terms by walking the groupings the decoder actually
/// uses; agrees with [`flop_breakdown`].
pub fn flop_breakdown_from_groups(cfg: &ModelConfig, mode: AttentionMode) -> FlopBreakdown {
    let (t, s, hw) = (cfg.frames, cfg.queries, cfg.grid_cells());
    let d = cfg.d_dec as f64;
    let (sa, ca) = match mode {
        AttentionMode::Full => (vec![Groups::full(t * s, t * s)], Groups::full(t * s, t * hw)),
        AttentionMode::Factorised => (
            vec![Groups::within_frame(t, s), Groups::along_time(t, s)],
            Groups::same_frame_cross(t, s, hw),
        ),
    };
    FlopBreakdown {
        sa_attn: sa.iter().map(|g| attention_cost(g, d)).sum(),
        ca_attn: attention_cost(&ca, d),
        ..flop_breakdown(cfg, mode)
    }
}
