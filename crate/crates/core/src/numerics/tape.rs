//! Reverse-mode gradient tape.
//!
//! Operations append nodes during the forward pass; `backward` walks
//! the tape once in reverse (append order is a topological order) and
//! accumulates vector-Jacobian products into per-node gradients. A
//! node the loss never touches keeps a `None` slot, which reads back
//! as an exact zero tensor.
//!
//! One tape records one forward/backward pass; it is single-writer by
//! construction (every op takes `&mut self`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::func;
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Gather {
        src: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        src: Var,
        start: usize,
        len: usize,
    },
    SliceCols {
        src: Var,
        start: usize,
        len: usize,
    },
    L2NormRows {
        x: Var,
        inv_norm: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients keyed by tape variable; unreachable variables read as zero.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; exact zeros if `v` never reached
    /// the differentiated output.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Whether any gradient actually flowed into `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn rows_cols<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.rank() {
        1 => Ok((1, t.len())),
        2 => t.dims2(),
        r => Err(Error::shape(format!("expected rank 1 or 2, got rank {r}"))),
    }
}

const L2_EPS: f64 = 1e-12;

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a length-1 variable.
    pub fn scalar_value(&self, v: Var) -> Result<T> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::shape(format!(
                "expected a scalar, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.at(0))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = func::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = func::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = func::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = func::scale(self.value(a), c)?;
        Ok(self.push(v, Op::Scale(a, c)))
    }

    /// Adds a row vector to every row of a matrix (bias add).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = func::add_row(self.value(a), self.value(bias))?;
        Ok(self.push(v, Op::AddRow(a, bias)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = func::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = func::transpose(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    /// Softmax along the last axis of a rank-1/2 tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let axis = t.rank() - 1;
        let v = func::softmax(t, axis)?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let axis = t.rank() - 1;
        let v = func::log_softmax(t, axis)?;
        Ok(self.push(v, Op::LogSoftmaxRows(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let v = func::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        // Recompute and save per-row normalized values and 1/std for
        // the backward pass.
        let xt = self.value(x);
        let (rows, n) = rows_cols(xt)?;
        let mut xhat = vec![T::ZERO; xt.len()];
        let mut inv_std = vec![T::ZERO; rows];
        let inv_n = T::ONE / T::from_f64(n as f64);
        for r in 0..rows {
            let row = &xt.data()[r * n..(r + 1) * n];
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
            let istd = T::ONE / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..n {
                xhat[r * n + j] = (row[j] - mean) * istd;
            }
        }
        let xhat = Tensor::from_vec(xt.shape().to_vec(), xhat)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = func::gelu(self.value(a))?;
        Ok(self.push(v, Op::Gelu(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = T::ZERO;
        for &x in self.value(a).data() {
            acc += x;
        }
        if !acc.is_finite() {
            return Err(Error::numerical("sum", "non-finite result"));
        }
        Ok(self.push(Tensor::scalar(acc), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let mut acc = T::ZERO;
        for &x in self.value(a).data() {
            acc += x;
        }
        let m = acc / T::from_f64(n as f64);
        if !m.is_finite() {
            return Err(Error::numerical("mean", "non-finite result"));
        }
        Ok(self.push(Tensor::scalar(m), Op::Mean(a)))
    }

    /// Flat gather: `out[i] = src[indices[i]]`, reshaped to `out_shape`.
    pub fn gather(&mut self, src: Var, indices: Vec<usize>, out_shape: Vec<usize>) -> Result<Var> {
        let s = self.value(src);
        let n: usize = out_shape.iter().product();
        if n != indices.len() {
            return Err(Error::shape(format!(
                "gather: {} indices vs output shape {:?}",
                indices.len(),
                out_shape
            )));
        }
        let mut data = Vec::with_capacity(indices.len());
        for &i in &indices {
            if i >= s.len() {
                return Err(Error::shape(format!(
                    "gather: index {i} out of range for source of {}",
                    s.len()
                )));
            }
            data.push(s.data()[i]);
        }
        let v = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(v, Op::Gather { src, indices }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: no parts"));
        }
        let (_, n) = self.value(parts[0]).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2()?;
            if c != n {
                return Err(Error::shape(format!(
                    "concat_rows: width {c} vs {n}"
                )));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(vec![rows, n], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no parts"));
        }
        let (m, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(Error::shape(format!("concat_cols: rows {r} vs {m}")));
            }
            widths.push(c);
            total += c;
        }
        let mut data = vec![T::ZERO; m * total];
        for i in 0..m {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let row = self.value(p).row(i);
                data[i * total + off..i * total + off + w].copy_from_slice(row);
                off += w;
            }
        }
        let v = Tensor::from_vec(vec![m, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(src).dims2()?;
        if start + len > m {
            return Err(Error::shape(format!(
                "slice_rows: rows {start}..{} of {m}",
                start + len
            )));
        }
        let data = self.value(src).data()[start * n..(start + len) * n].to_vec();
        let v = Tensor::from_vec(vec![len, n], data)?;
        Ok(self.push(v, Op::SliceRows { src, start, len }))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(src).dims2()?;
        if start + len > n {
            return Err(Error::shape(format!(
                "slice_cols: cols {start}..{} of {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            let row = self.value(src).row(i);
            data.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::from_vec(vec![m, len], data)?;
        Ok(self.push(v, Op::SliceCols { src, start, len }))
    }

    /// Rows scaled to unit Euclidean norm (epsilon-guarded).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, n) = rows_cols(t)?;
        let eps = T::from_f64(L2_EPS);
        let mut out = vec![T::ZERO; t.len()];
        let mut inv_norm = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &t.data()[r * n..(r + 1) * n];
            let mut ss = T::ZERO;
            for &v in row {
                ss += v * v;
            }
            let inv = T::ONE / (ss + eps).sqrt();
            inv_norm[r] = inv;
            for j in 0..n {
                out[r * n + j] = row[j] * inv;
            }
        }
        let v = Tensor::from_vec(t.shape().to_vec(), out)?;
        v.check_finite("l2_normalize_rows")?;
        Ok(self.push(v, Op::L2NormRows { x, inv_norm }))
    }

    /// Reverse pass from a scalar output. Each recorded node is
    /// visited exactly once, in reverse append (topological) order.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        let out_t = self.value(out);
        if out_t.len() != 1 {
            return Err(Error::shape(format!(
                "backward: output must be scalar, got {:?}",
                out_t.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(T::ONE));

        for i in (0..=out.0).rev() {
            let g = match &grads[i] {
                None => continue,
                Some(g) => g.clone(),
            };
            self.apply_vjp(i, &g, &mut grads)?;
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) -> Result<()> {
        match &mut grads[v.0] {
            Some(existing) => {
                *existing = func::add(existing, &delta)?;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    #[allow(clippy::too_many_lines)]
    fn apply_vjp(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                let ga = func::mul(g, self.value(*b))?;
                let gb = func::mul(g, self.value(*a))?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, func::scale(g, *c)?)?;
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone())?;
                let (m, n) = g.dims2()?;
                let mut col = vec![T::ZERO; n];
                for r in 0..m {
                    for (j, c) in col.iter_mut().enumerate() {
                        *c += g.at2(r, j);
                    }
                }
                self.accumulate(grads, *bias, Tensor::vector(col))?;
            }
            Op::Matmul(a, b) => {
                // C = A·B  =>  dA = dC·Bᵀ, dB = Aᵀ·dC
                let ga = func::matmul(g, &func::transpose(self.value(*b))?)?;
                let gb = func::matmul(&func::transpose(self.value(*a))?, g)?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, func::transpose(g)?)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (rows, n) = rows_cols(y)?;
                let mut gx = vec![T::ZERO; y.len()];
                for r in 0..rows {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let mut dot = T::ZERO;
                    for j in 0..n {
                        dot += yr[j] * gr[j];
                    }
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(y.shape().to_vec(), gx)?)?;
            }
            Op::LogSoftmaxRows(a) => {
                let logp = &self.nodes[i].value;
                let (rows, n) = rows_cols(logp)?;
                let mut gx = vec![T::ZERO; logp.len()];
                for r in 0..rows {
                    let lr = &logp.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let mut gsum = T::ZERO;
                    for &gv in gr {
                        gsum += gv;
                    }
                    for j in 0..n {
                        gx[r * n + j] = gr[j] - lr[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(logp.shape().to_vec(), gx)?)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, n) = rows_cols(xhat)?;
                let gain_t = self.value(*gain);
                let inv_n = T::ONE / T::from_f64(n as f64);
                let mut gx = vec![T::ZERO; xhat.len()];
                let mut ggain = vec![T::ZERO; n];
                let mut gbias = vec![T::ZERO; n];
                for r in 0..rows {
                    let xh = &xhat.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let mut mean_h = T::ZERO;
                    let mut mean_hx = T::ZERO;
                    for j in 0..n {
                        let h = gr[j] * gain_t.at(j);
                        mean_h += h;
                        mean_hx += h * xh[j];
                        ggain[j] += gr[j] * xh[j];
                        gbias[j] += gr[j];
                    }
                    mean_h *= inv_n;
                    mean_hx *= inv_n;
                    for j in 0..n {
                        let h = gr[j] * gain_t.at(j);
                        gx[r * n + j] = inv_std[r] * (h - mean_h - xh[j] * mean_hx);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xhat.shape().to_vec(), gx)?)?;
                self.accumulate(grads, *gain, Tensor::vector(ggain))?;
                self.accumulate(grads, *bias, Tensor::vector(gbias))?;
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let inv_sqrt2 = T::from_f64(core::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * core::f64::consts::PI).sqrt());
                let half = T::from_f64(0.5);
                let mut gx = Vec::with_capacity(x.len());
                for (&xv, &gv) in x.data().iter().zip(g.data()) {
                    let phi_cdf = half * (T::ONE + (xv * inv_sqrt2).erf());
                    let pdf = (-(xv * xv) * half).exp() * inv_sqrt_2pi;
                    gx.push(gv * (phi_cdf + xv * pdf));
                }
                self.accumulate(grads, *a, Tensor::from_vec(x.shape().to_vec(), gx)?)?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g.at(0)))?;
            }
            Op::Mean(a) => {
                let src = self.value(*a);
                let c = g.at(0) / T::from_f64(src.len() as f64);
                self.accumulate(grads, *a, Tensor::full(src.shape().to_vec(), c))?;
            }
            Op::Gather { src, indices } => {
                let s = self.value(*src);
                let mut gx = vec![T::ZERO; s.len()];
                for (o, &i) in indices.iter().enumerate() {
                    gx[i] += g.data()[o];
                }
                self.accumulate(grads, *src, Tensor::from_vec(s.shape().to_vec(), gx)?)?;
            }
            Op::ConcatRows(parts) => {
                let (_, n) = g.dims2()?;
                let mut start = 0;
                for &p in parts {
                    let (r, _) = self.value(p).dims2()?;
                    let sub = g.data()[start * n..(start + r) * n].to_vec();
                    self.accumulate(grads, p, Tensor::from_vec(vec![r, n], sub)?)?;
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, _) = g.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    let mut sub = Vec::with_capacity(m * w);
                    for r in 0..m {
                        sub.extend_from_slice(&g.row(r)[off..off + w]);
                    }
                    self.accumulate(grads, p, Tensor::from_vec(vec![m, w], sub)?)?;
                    off += w;
                }
            }
            Op::SliceRows { src, start, len } => {
                let (m, n) = self.value(*src).dims2()?;
                let mut gx = vec![T::ZERO; m * n];
                gx[start * n..(start + len) * n].copy_from_slice(g.data());
                self.accumulate(grads, *src, Tensor::from_vec(vec![m, n], gx)?)?;
            }
            Op::SliceCols { src, start, len } => {
                let (m, n) = self.value(*src).dims2()?;
                let mut gx = vec![T::ZERO; m * n];
                for r in 0..m {
                    for j in 0..*len {
                        gx[r * n + start + j] = g.at2(r, j);
                    }
                }
                self.accumulate(grads, *src, Tensor::from_vec(vec![m, n], gx)?)?;
            }
            Op::L2NormRows { x, inv_norm } => {
                let xt = self.value(*x);
                let (rows, n) = rows_cols(xt)?;
                let mut gx = vec![T::ZERO; xt.len()];
                for r in 0..rows {
                    let xr = &xt.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let inv = inv_norm[r];
                    let mut dot = T::ZERO;
                    for j in 0..n {
                        dot += gr[j] * xr[j];
                    }
                    let inv3 = inv * inv * inv;
                    for j in 0..n {
                        gx[r * n + j] = gr[j] * inv - xr[j] * inv3 * dot;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape().to_vec(), gx)?)?;
            }
        }
        Ok(())
    }
}

impl<T: Real> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn diamond_reuse_accumulates() {
        // f = sum(x) + sum(x) => grad 2 everywhere
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0f64, 2.0, 3.0]));
        let s1 = tape.sum(x).unwrap();
        let s2 = tape.sum(x).unwrap();
        let out = tape.add(s1, s2).unwrap();
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unreachable_var_has_exact_zero_gradient() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0f64, 2.0]));
        let unused = tape.leaf(Tensor::vector(vec![5.0f64, 6.0]));
        let out = tape.sum(x).unwrap();
        let grads = tape.backward(out).unwrap();
        assert!(!grads.reached(unused));
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn matmul_backward_matches_transpose_rule_oracle() {
        // Scripted oracle: with upstream gradient G, dA = G·Bᵀ and
        // dB = Aᵀ·G, written out longhand on 3x3 randoms.
        let mut rng = Rng::seed(21);
        for _ in 0..10 {
            let a: Tensor<f64> = Tensor::randn(vec![3, 3], 1.0, &mut rng);
            let b: Tensor<f64> = Tensor::randn(vec![3, 3], 1.0, &mut rng);
            let w: Tensor<f64> = Tensor::randn(vec![3, 3], 1.0, &mut rng);

            let mut tape = GradTape::new();
            let va = tape.leaf(a.clone());
            let vb = tape.leaf(b.clone());
            let vw = tape.leaf(w.clone());
            let c = tape.matmul(va, vb).unwrap();
            let weighted = tape.mul(c, vw).unwrap();
            let out = tape.sum(weighted).unwrap();
            let grads = tape.backward(out).unwrap();

            // upstream gradient of C is exactly w
            let mut da = [[0.0f64; 3]; 3];
            let mut db = [[0.0f64; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        da[i][k] += w.at2(i, j) * b.at2(k, j);
                        db[k][j] += a.at2(i, k) * w.at2(i, j);
                    }
                }
            }
            let ga = grads.wrt(va);
            let gb = grads.wrt(vb);
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(ga.at2(i, j), da[i][j]);
                    assert_eq!(gb.at2(i, j), db[i][j]);
                }
            }
        }
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0f64, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gather_scatter_roundtrip_gradient() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0f64, 2.0, 3.0, 4.0]));
        // duplicate index 1 -> its gradient doubles
        let y = tape.gather(x, vec![1, 1, 3], vec![3]).unwrap();
        let out = tape.sum(y).unwrap();
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_and_slice_gradients_partition_upstream() {
        let mut tape = GradTape::new();
        let a = tape.leaf(Tensor::matrix(1, 2, vec![1.0f64, 2.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![3.0f64, 4.0, 5.0, 6.0]).unwrap());
        let cat = tape.concat_rows(&[a, b]).unwrap();
        let sl = tape.slice_rows(cat, 1, 2).unwrap();
        let out = tape.sum(sl).unwrap();
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.wrt(a).data(), &[0.0, 0.0]);
        assert_eq!(grads.wrt(b).data(), &[1.0, 1.0, 1.0, 1.0]);
    }
}
