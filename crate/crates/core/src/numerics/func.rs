//! Pure forward kernels. The gradient tape records these same
//! computations; tests call them directly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const DIST_TOL: f64 = 1e-6;

pub(crate) fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let out = Tensor::from_vec(a.shape().to_vec(), data)?;
    out.check_finite("add")?;
    Ok(out)
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "sub")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    let out = Tensor::from_vec(a.shape().to_vec(), data)?;
    out.check_finite("sub")?;
    Ok(out)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let out = Tensor::from_vec(a.shape().to_vec(), data)?;
    out.check_finite("mul")?;
    Ok(out)
}

pub fn scale<T: Real>(a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
    let out = a.map(|x| x * c);
    out.check_finite("scale")?;
    Ok(out)
}

/// Adds a row vector `b` of length n to every row of `a` ([m, n]).
pub(crate) fn add_row<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2()?;
    if b.shape() != [n] {
        return Err(Error::shape(format!(
            "add_row: bias {:?} does not match row width {n}",
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            data.push(a.at2(i, j) + b.at(j));
        }
    }
    let out = Tensor::from_vec(vec![m, n], data)?;
    out.check_finite("add_row")?;
    Ok(out)
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: inner dims {k} vs {k2} (shapes {:?} x {:?})",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::ZERO; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aik * bv;
            }
        }
    }
    let out = Tensor::from_vec(vec![m, n], out)?;
    out.check_finite("matmul")?;
    Ok(out)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2()?;
    let mut data = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.at2(i, j);
        }
    }
    Tensor::from_vec(vec![n, m], data)
}

/// Iterates lanes along `axis`: calls `f` with the strided index list
/// of each one-dimensional slice.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut idx = vec![0usize; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            for (k, slot) in idx.iter_mut().enumerate() {
                *slot = base + k * inner;
            }
            f(&idx);
        }
    }
}

/// Softmax along `axis`, computed with max-subtraction so any finite
/// input yields a valid distribution.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape(format!(
            "softmax: axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if !x.all_finite() {
        return Err(Error::invalid("softmax: non-finite input"));
    }
    let mut out = vec![T::ZERO; x.len()];
    let d = x.data();
    for_each_lane(x.shape(), axis, |lane| {
        let mut m = d[lane[0]];
        for &i in lane {
            m = m.max(d[i]);
        }
        // 64-bit denominator keeps the sum-to-1 contract tight for
        // 32-bit tensors with wide lanes
        let mut denom = 0.0f64;
        for &i in lane {
            let e = (d[i] - m).exp();
            out[i] = e;
            denom += e.to_f64();
        }
        for &i in lane {
            out[i] = T::from_f64(out[i].to_f64() / denom);
        }
    });
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Fused log-softmax along `axis` (max-subtraction + log-sum-exp).
pub fn log_softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape(format!(
            "log_softmax: axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if !x.all_finite() {
        return Err(Error::invalid("log_softmax: non-finite input"));
    }
    let mut out = vec![T::ZERO; x.len()];
    let d = x.data();
    for_each_lane(x.shape(), axis, |lane| {
        let mut m = d[lane[0]];
        for &i in lane {
            m = m.max(d[i]);
        }
        let mut denom = 0.0f64;
        for &i in lane {
            denom += (d[i] - m).exp().to_f64();
        }
        let lse = m + T::from_f64(libm::log(denom));
        for &i in lane {
            out[i] = d[i] - lse;
        }
    });
    Tensor::from_vec(x.shape().to_vec(), out)
}

fn check_distribution<T: Real>(q: &Tensor<T>, what: &str) -> Result<()> {
    let mut sum = 0.0f64;
    for &v in q.data() {
        let v = v.to_f64();
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::invalid(format!("{what}: entries must be in [0, 1]")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > DIST_TOL {
        return Err(Error::invalid(format!(
            "{what}: entries sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Cross-entropy −Σ qᵢ·log_pᵢ of a distribution `q` against given log
/// probabilities. Terms with qᵢ = 0 contribute zero.
pub fn cross_entropy<T: Real>(q: &Tensor<T>, log_p: &Tensor<T>) -> Result<T> {
    check_same_shape(q, log_p, "cross_entropy")?;
    check_distribution(q, "cross_entropy: q")?;
    let mut acc = T::ZERO;
    for (&qi, &lp) in q.data().iter().zip(log_p.data()) {
        if qi > T::ZERO {
            acc += qi * lp;
        }
    }
    let out = -acc;
    if !out.is_finite() {
        return Err(Error::numerical("cross_entropy", "non-finite result"));
    }
    Ok(out)
}

/// Shannon entropy −Σ qᵢ·ln qᵢ (0·ln 0 = 0).
pub fn entropy<T: Real>(q: &Tensor<T>) -> Result<T> {
    check_distribution(q, "entropy: q")?;
    let mut acc = T::ZERO;
    for &qi in q.data() {
        if qi > T::ZERO {
            acc += qi * qi.ln();
        }
    }
    Ok(-acc)
}

/// Layer normalization over the last axis with affine gain/bias.
/// Zero-variance rows come out as the bias alone.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if x.rank() == 0 {
        return Err(Error::shape("layer_norm: rank-0 input"));
    }
    let n = x.shape()[x.rank() - 1];
    if gain.shape() != [n] || bias.shape() != [n] {
        return Err(Error::shape(format!(
            "layer_norm: gain {:?} / bias {:?} do not match last axis {n}",
            gain.shape(),
            bias.shape()
        )));
    }
    if eps <= T::ZERO {
        return Err(Error::config("layer_norm: eps must be positive"));
    }
    let rows = x.len() / n;
    let mut out = vec![T::ZERO; x.len()];
    let d = x.data();
    let inv_n = T::ONE / T::from_f64(n as f64);
    for r in 0..rows {
        let row = &d[r * n..(r + 1) * n];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_n;
        let inv_std = T::ONE / (var + eps).sqrt();
        for j in 0..n {
            let xhat = (row[j] - mean) * inv_std;
            out[r * n + j] = xhat * gain.at(j) + bias.at(j);
        }
    }
    let out = Tensor::from_vec(x.shape().to_vec(), out)?;
    out.check_finite("layer_norm")?;
    Ok(out)
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    let out = x.map(|v| v * half * (T::ONE + (v * inv_sqrt2).erf()));
    out.check_finite("gelu")?;
    Ok(out)
}

/// Scaled dot-product attention for a single head:
/// weights = softmax(QKᵀ/√d_k) (row-wise), output = weights·V.
/// Returns (output, weights); the weights feed attention-map export.
pub fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_tq, dq) = q.dims2()?;
    let (tk, dk) = k.dims2()?;
    let (tv, _dv) = v.dims2()?;
    if dq != dk {
        return Err(Error::shape(format!(
            "attention: query width {dq} vs key width {dk}"
        )));
    }
    if tk != tv {
        return Err(Error::shape(format!(
            "attention: {tk} keys vs {tv} values"
        )));
    }
    let scores = scale(&matmul(q, &transpose(k)?)?, T::ONE / T::from_f64(dk as f64).sqrt())?;
    let weights = softmax(&scores, 1)?;
    let out = matmul(&weights, v)?;
    Ok((out, weights))
}
