//! Dense row-major `f64` tensors and the handful of matrix kernels the model needs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        add_into(&mut self.data, &other.data);
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

pub(crate) fn add_into(acc: &mut [f64], x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for o in chunks * 4..a.len() {
        s += a[o] * b[o];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `out[n, m] += x[n, k] · w[k, m]`
pub(crate) fn matmul_acc(x: &[f64], n: usize, k: usize, w: &[f64], m: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let xrow = &x[i * k..(i + 1) * k];
        for (p, &a) in xrow.iter().enumerate() {
            if a != 0.0 {
                axpy(a, &w[p * m..(p + 1) * m], orow);
            }
        }
    }
}

/// `dx[n, k] += dy[n, m] · w[k, m]ᵀ`
pub(crate) fn matmul_bt_acc(dy: &[f64], n: usize, m: usize, w: &[f64], k: usize, dx: &mut [f64]) {
    debug_assert_eq!(dy.len(), n * m);
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(dx.len(), n * k);
    for i in 0..n {
        let dyrow = &dy[i * m..(i + 1) * m];
        let dxrow = &mut dx[i * k..(i + 1) * k];
        for (p, d) in dxrow.iter_mut().enumerate() {
            *d += dot(dyrow, &w[p * m..(p + 1) * m]);
        }
    }
}

/// `dw[k, m] += x[n, k]ᵀ · dy[n, m]`
pub(crate) fn matmul_at_acc(x: &[f64], n: usize, k: usize, dy: &[f64], m: usize, dw: &mut [f64]) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(dy.len(), n * m);
    debug_assert_eq!(dw.len(), k * m);
    for i in 0..n {
        let dyrow = &dy[i * m..(i + 1) * m];
        for (p, &a) in x[i * k..(i + 1) * k].iter().enumerate() {
            if a != 0.0 {
                axpy(a, dyrow, &mut dw[p * m..(p + 1) * m]);
            }
        }
    }
}
