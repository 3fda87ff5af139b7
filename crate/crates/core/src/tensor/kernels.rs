//! Slice-level numeric kernels shared by the tape and the inference paths.

use alloc::vec;
use alloc::vec::Vec;

use crate::cost::OpCounter;
use crate::math;

/// `out = a · b` for row-major `a: m×k`, `b: k×p`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, counter: &mut OpCounter) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    counter.matmul(m, k, p);
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `out += a · bᵀ` for `a: m×k`, `b: p×k`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            out[i * p + j] += dot(arow, brow);
        }
    }
}

/// `out += aᵀ · b` for `a: m×k`, `b: m×p`, `out: k×p`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * p..(i + 1) * p];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        softmax_into(&x[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
    }
    out
}

pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = math::exp(v - max);
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in x {
        sum += math::exp(v - max);
    }
    let lse = max + math::ln(sum);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer norm over the last axis; returns `(out, xhat, inv_std)`.
pub fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, xhat, inv_std)
}

/// Geometry of a 2-D convolution over `[c, h, w]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride_w + 1
    }

    /// im2col matrix of shape `[out_h·out_w, c_in·k·k]`.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let cols = self.c_in * k * k;
        let mut m = vec![0.0; oh * ow * cols];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut m[(oy * ow + ox) * cols..(oy * ow + ox + 1) * cols];
                for c in 0..self.c_in {
                    for ky in 0..k {
                        let iy = (oy * self.stride_h + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride_w + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            row[(c * k + ky) * k + kx] = x[(c * self.h + iy as usize) * self.w + ix as usize];
                        }
                    }
                }
            }
        }
        m
    }

    /// Scatter-add an im2col-shaped gradient back onto the input layout.
    pub fn col2im_acc(&self, cols_grad: &[f64], out: &mut [f64]) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let cols = self.c_in * k * k;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cols_grad[(oy * ow + ox) * cols..(oy * ow + ox + 1) * cols];
                for c in 0..self.c_in {
                    for ky in 0..k {
                        let iy = (oy * self.stride_h + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride_w + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            out[(c * self.h + iy as usize) * self.w + ix as usize] += row[(c * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Transpose a row-major `rows×cols` buffer.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
