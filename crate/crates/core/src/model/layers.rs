//! Linear, layer-norm and MLP blocks with explicit backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, Init, ModelParams, ParamId, ParamRegistry};
use super::tensor::{add_into, matmul_acc, matmul_at_acc, matmul_bt_acc};

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(reg: &mut ParamRegistry, name: &str, din: usize, dout: usize) -> Self {
        Self::with_std(reg, name, din, dout, 1.0 / (din as f64).sqrt())
    }

    pub fn with_std(reg: &mut ParamRegistry, name: &str, din: usize, dout: usize, std: f64) -> Self {
        let w = reg.add(format!("{name}.w"), &[din, dout], Init::Normal { std });
        let b = reg.add(format!("{name}.b"), &[dout], Init::Zeros);
        Self { w, b, din, dout }
    }

    pub fn forward(&self, p: &ModelParams, x: &[f64], n: usize) -> Vec<f64> {
        let bias = p.value(self.b);
        let mut out = Vec::with_capacity(n * self.dout);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        matmul_acc(x, n, self.din, p.value(self.w), self.dout, &mut out);
        out
    }

    /// Accumulates parameter gradients; adds the input gradient into `dx` when given.
    pub fn backward(
        &self,
        p: &ModelParams,
        g: &mut Gradients,
        x: &[f64],
        n: usize,
        dy: &[f64],
        dx: Option<&mut [f64]>,
    ) {
        matmul_at_acc(x, n, self.din, dy, self.dout, g.get_mut(self.w));
        let db = g.get_mut(self.b);
        for row in dy.chunks_exact(self.dout) {
            add_into(db, row);
        }
        if let Some(dx) = dx {
            matmul_bt_acc(dy, n, self.dout, p.value(self.w), self.din, dx);
        }
    }

    pub fn backward_new(&self, p: &ModelParams, g: &mut Gradients, x: &[f64], n: usize, dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; n * self.din];
        self.backward(p, g, x, n, dy, Some(&mut dx));
        dx
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub d: usize,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Per-row standardisation without scale/shift.
pub fn standardise_rows(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for (o, v) in xhat[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
    }
    (xhat, rstd)
}

impl LayerNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, d: usize) -> Self {
        let gamma = reg.add(format!("{name}.gamma"), &[d], Init::Ones);
        let beta = reg.add(format!("{name}.beta"), &[d], Init::Zeros);
        Self { gamma, beta, d }
    }

    pub fn forward(&self, p: &ModelParams, x: &[f64]) -> (Vec<f64>, LnCache) {
        let d = self.d;
        let (xhat, rstd) = standardise_rows(x, d);
        let (gamma, beta) = (p.value(self.gamma), p.value(self.beta));
        let mut y = xhat.clone();
        for row in y.chunks_exact_mut(d) {
            for k in 0..d {
                row[k] = row[k] * gamma[k] + beta[k];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, p: &ModelParams, g: &mut Gradients, cache: &LnCache, dy: &[f64]) -> Vec<f64> {
        let d = self.d;
        let gamma = p.value(self.gamma);
        {
            let dg = g.get_mut(self.gamma);
            for (row_dy, row_x) in dy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
                for k in 0..d {
                    dg[k] += row_dy[k] * row_x[k];
                }
            }
        }
        {
            let db = g.get_mut(self.beta);
            for row in dy.chunks_exact(d) {
                add_into(db, row);
            }
        }
        let mut dx = vec![0.0; dy.len()];
        for (i, (row_dy, row_x)) in dy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)).enumerate() {
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for k in 0..d {
                let dxh = row_dy[k] * gamma[k];
                mean_d += dxh;
                mean_dx += dxh * row_x[k];
            }
            mean_d /= d as f64;
            mean_dx /= d as f64;
            let r = cache.rstd[i];
            for k in 0..d {
                let dxh = row_dy[k] * gamma[k];
                dx[i * d + k] = r * (dxh - mean_d - row_x[k] * mean_dx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct MlpCache {
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
}

impl Mlp {
    pub fn new(reg: &mut ParamRegistry, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(reg, &format!("{name}.fc1"), d, hidden),
            fc2: Linear::new(reg, &format!("{name}.fc2"), hidden, d),
        }
    }

    pub fn forward(&self, p: &ModelParams, x: &[f64], n: usize) -> (Vec<f64>, MlpCache) {
        let pre = self.fc1.forward(p, x, n);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let y = self.fc2.forward(p, &act, n);
        (y, MlpCache { pre, act })
    }

    pub fn backward(
        &self,
        p: &ModelParams,
        g: &mut Gradients,
        x: &[f64],
        n: usize,
        cache: &MlpCache,
        dy: &[f64],
    ) -> Vec<f64> {
        let mut dact = self.fc2.backward_new(p, g, &cache.act, n, dy);
        for (d, &v) in dact.iter_mut().zip(&cache.pre) {
            *d *= gelu_grad(v);
        }
        self.fc1.backward_new(p, g, x, n, &dact)
    }
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - rate)`.
pub(crate) fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}
