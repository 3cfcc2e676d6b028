//! The differentiable primitive suite: matmul, broadcast add/mul, softmax,
//! GELU, SiLU, softplus, exp, RMS-normalization, depthwise causal 1-D
//! convolution, embedding lookup, concatenation, slicing, reductions, and
//! the masked cross-entropy loss.
//!
//! Every primitive validates shapes up front and names itself in the error.

use super::kernels;
use super::scalar::Scalar;
use super::tape::{OpBackward, Tape, ValueId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn dims2<F: Scalar>(t: &Tensor<F>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::shape(op, format!("expected rank-2 tensor, got shape {other:?}"))),
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

fn gelu_tanh<F: Scalar>(x: F) -> (F, F) {
    // 0.5 x (1 + tanh(c (x + 0.044715 x^3))), c = sqrt(2/pi)
    let c = F::from_f64(0.797_884_560_802_865_4);
    let a = F::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = F::from_f64(0.5) * x * (F::ONE + t);
    let sech2 = F::ONE - t * t;
    let du = c * (F::ONE + F::from_f64(3.0) * a * x * x);
    let dy = F::from_f64(0.5) * (F::ONE + t) + F::from_f64(0.5) * x * sech2 * du;
    (y, dy)
}

// ---------------------------------------------------------------- elementwise

struct AddBack;
impl<F: Scalar> OpBackward<F> for AddBack {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(
        &self,
        _p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| g.clone()),
        ]
    }
}

struct SubBack;
impl<F: Scalar> OpBackward<F> for SubBack {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(
        &self,
        _p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| g.map(|v| -v)),
        ]
    }
}

struct MulBack;
impl<F: Scalar> OpBackward<F> for MulBack {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(
        &self,
        p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let prod = |other: &Tensor<F>| {
            let data = g.data().iter().zip(other.data()).map(|(&gv, &ov)| gv * ov).collect();
            Tensor::new(g.shape().to_vec(), data).unwrap()
        };
        vec![needs[0].then(|| prod(p[1])), needs[1].then(|| prod(p[0]))]
    }
}

struct ScaleBack<F> {
    factor: F,
}
impl<F: Scalar> OpBackward<F> for ScaleBack<F> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(
        &self,
        _p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        vec![needs[0].then(|| g.map(|v| v * self.factor))]
    }
}

/// Unary elementwise op defined by value and local derivative.
struct UnaryBack<F> {
    op: &'static str,
    /// derivative per element, precomputed during the forward pass
    dydx: Vec<F>,
}
impl<F: Scalar> OpBackward<F> for UnaryBack<F> {
    fn name(&self) -> &'static str {
        self.op
    }
    fn backward(
        &self,
        p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        vec![needs[0].then(|| {
            let data = g.data().iter().zip(self.dydx.iter()).map(|(&gv, &d)| gv * d).collect();
            Tensor::new(p[0].shape().to_vec(), data).unwrap()
        })]
    }
}

struct AddBiasBack;
impl<F: Scalar> OpBackward<F> for AddBiasBack {
    fn name(&self) -> &'static str {
        "add_bias"
    }
    fn backward(
        &self,
        p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let ga = needs[0].then(|| g.clone());
        let gb = needs[1].then(|| {
            let n = p[1].len();
            let mut acc = vec![F::ZERO; n];
            for row in g.data().chunks(n) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::new(vec![n], acc).unwrap()
        });
        vec![ga, gb]
    }
}

// ---------------------------------------------------------------- matmul

struct MatMulBack {
    m: usize,
    k: usize,
    n: usize,
}
impl<F: Scalar> OpBackward<F> for MatMulBack {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(
        &self,
        p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let ga = needs[0].then(|| {
            // dA = dY @ B^T
            let mut bt = vec![F::ZERO; k * n];
            kernels::transpose(p[1].data(), k, n, &mut bt);
            let mut out = vec![F::ZERO; m * k];
            kernels::matmul(g.data(), &bt, m, n, k, &mut out);
            Tensor::new(vec![m, k], out).unwrap()
        });
        let gb = needs[1].then(|| {
            // dB = A^T @ dY
            let mut at = vec![F::ZERO; m * k];
            kernels::transpose(p[0].data(), m, k, &mut at);
            let mut out = vec![F::ZERO; k * n];
            kernels::matmul(&at, g.data(), k, m, n, &mut out);
            Tensor::new(vec![k, n], out).unwrap()
        });
        vec![ga, gb]
    }
}

struct TransposeBack {
    m: usize,
    n: usize,
}
impl<F: Scalar> OpBackward<F> for TransposeBack {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(
        &self,
        _p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        vec![needs[0].then(|| {
            let mut out = vec![F::ZERO; self.m * self.n];
            kernels::transpose(g.data(), self.n, self.m, &mut out);
            Tensor::new(vec![self.m, self.n], out).unwrap()
        })]
    }
}

// ---------------------------------------------------------------- softmax / rmsnorm

struct SoftmaxRowsBack;
impl<F: Scalar> OpBackward<F> for SoftmaxRowsBack {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(
        &self,
        _p: &[&Tensor<F>],
        out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        vec![needs[0].then(|| {
            let n = out.cols();
            let mut data = vec![F::ZERO; out.len()];
            for ((drow, grow), yrow) in
                data.chunks_mut(n).zip(g.data().chunks(n)).zip(out.data().chunks(n))
            {
                let mut dot = F::ZERO;
                for (gv, yv) in grow.iter().zip(yrow) {
                    dot += *gv * *yv;
                }
                for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d = yv * (gv - dot);
                }
            }
            Tensor::new(out.shape().to_vec(), data).unwrap()
        })]
    }
}

struct RmsNormBack<F> {
    eps: F,
}
impl<F: Scalar> OpBackward<F> for RmsNormBack<F> {
    fn name(&self) -> &'static str {
        "rms_norm"
    }
    fn backward(
        &self,
        p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let x = p[0];
        let gain = p[1].data();
        let n = x.cols();
        let n_f = F::from_f64(n as f64);
        let mut gx = needs[0].then(|| vec![F::ZERO; x.len()]);
        let mut ggain = needs[1].then(|| vec![F::ZERO; n]);
        for (i, (xrow, grow)) in x.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
            let mut ms = F::ZERO;
            for &v in xrow {
                ms += v * v;
            }
            let inv = F::ONE / (ms / n_f + self.eps).sqrt();
            // s = sum_j g_j * gain_j * xhat_j
            let mut s = F::ZERO;
            for ((&gv, &w), &xv) in grow.iter().zip(gain).zip(xrow) {
                s += gv * w * xv * inv;
            }
            if let Some(gx) = gx.as_mut() {
                let row = &mut gx[i * n..(i + 1) * n];
                for ((d, (&gv, &w)), &xv) in row.iter_mut().zip(grow.iter().zip(gain)).zip(xrow) {
                    *d = inv * (gv * w - xv * inv * s / n_f);
                }
            }
            if let Some(gg) = ggain.as_mut() {
                for ((a, &gv), &xv) in gg.iter_mut().zip(grow).zip(xrow) {
                    *a += gv * xv * inv;
                }
            }
        }
        vec![
            gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
            ggain.map(|d| Tensor::new(vec![n], d).unwrap()),
        ]
    }
}

// ---------------------------------------------------------------- conv

struct Conv1dBack {
    t_len: usize,
    channels: usize,
    kernel: usize,
}
impl<F: Scalar> OpBackward<F> for Conv1dBack {
    fn name(&self) -> &'static str {
        "conv1d_causal"
    }
    fn backward(
        &self,
        p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let (t_len, ch, k) = (self.t_len, self.channels, self.kernel);
        let x = p[0].data();
        let w = p[1].data();
        let gd = g.data();
        let gx = needs[0].then(|| {
            let mut gx = vec![F::ZERO; t_len * ch];
            for t in 0..t_len {
                for c in 0..ch {
                    let gv = gd[t * ch + c];
                    for j in 0..k {
                        let src = t as isize - (k as isize - 1) + j as isize;
                        if src >= 0 {
                            gx[src as usize * ch + c] += w[j * ch + c] * gv;
                        }
                    }
                }
            }
            Tensor::new(vec![t_len, ch], gx).unwrap()
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![F::ZERO; k * ch];
            for t in 0..t_len {
                for c in 0..ch {
                    let gv = gd[t * ch + c];
                    for j in 0..k {
                        let src = t as isize - (k as isize - 1) + j as isize;
                        if src >= 0 {
                            gw[j * ch + c] += x[src as usize * ch + c] * gv;
                        }
                    }
                }
            }
            Tensor::new(vec![k, ch], gw).unwrap()
        });
        vec![gx, gw]
    }
}

// ---------------------------------------------------------------- lookup / layout

struct EmbeddingBack {
    ids: Vec<u32>,
    vocab: usize,
    width: usize,
}
impl<F: Scalar> OpBackward<F> for EmbeddingBack {
    fn name(&self) -> &'static str {
        "embedding"
    }
    fn backward(
        &self,
        _p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        vec![needs[0].then(|| {
            let mut gt = vec![F::ZERO; self.vocab * self.width];
            for (t, &id) in self.ids.iter().enumerate() {
                let dst = &mut gt[id as usize * self.width..(id as usize + 1) * self.width];
                let src = &g.data()[t * self.width..(t + 1) * self.width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            Tensor::new(vec![self.vocab, self.width], gt).unwrap()
        })]
    }
}

struct GatherRowsBack {
    idx: Vec<usize>,
    src_rows: usize,
}
impl<F: Scalar> OpBackward<F> for GatherRowsBack {
    fn name(&self) -> &'static str {
        "gather_rows"
    }
    fn backward(
        &self,
        p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        vec![needs[0].then(|| {
            let n = p[0].cols();
            let mut gx = vec![F::ZERO; self.src_rows * n];
            for (i, &r) in self.idx.iter().enumerate() {
                let dst = &mut gx[r * n..(r + 1) * n];
                let src = &g.data()[i * n..(i + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            Tensor::new(vec![self.src_rows, n], gx).unwrap()
        })]
    }
}

struct SliceRowsBack {
    start: usize,
    src_rows: usize,
}
impl<F: Scalar> OpBackward<F> for SliceRowsBack {
    fn name(&self) -> &'static str {
        "slice_rows"
    }
    fn backward(
        &self,
        p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        vec![needs[0].then(|| {
            let n = p[0].cols();
            let mut gx = vec![F::ZERO; self.src_rows * n];
            gx[self.start * n..self.start * n + g.len()].copy_from_slice(g.data());
            Tensor::new(vec![self.src_rows, n], gx).unwrap()
        })]
    }
}

struct SliceColsBack {
    start: usize,
    src_cols: usize,
}
impl<F: Scalar> OpBackward<F> for SliceColsBack {
    fn name(&self) -> &'static str {
        "slice_cols"
    }
    fn backward(
        &self,
        p: &[&Tensor<F>],
        out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        vec![needs[0].then(|| {
            let rows = p[0].rows();
            let width = out.cols();
            let mut gx = vec![F::ZERO; rows * self.src_cols];
            for r in 0..rows {
                let dst = &mut gx[r * self.src_cols + self.start..r * self.src_cols + self.start + width];
                dst.copy_from_slice(&g.data()[r * width..(r + 1) * width]);
            }
            Tensor::new(vec![rows, self.src_cols], gx).unwrap()
        })]
    }
}

struct ConcatRowsBack {
    row_counts: Vec<usize>,
    cols: usize,
}
impl<F: Scalar> OpBackward<F> for ConcatRowsBack {
    fn name(&self) -> &'static str {
        "concat_rows"
    }
    fn backward(
        &self,
        _p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let mut offset = 0;
        self.row_counts
            .iter()
            .zip(needs)
            .map(|(&rc, &need)| {
                let piece = need.then(|| {
                    let data = g.data()[offset * self.cols..(offset + rc) * self.cols].to_vec();
                    Tensor::new(vec![rc, self.cols], data).unwrap()
                });
                offset += rc;
                piece
            })
            .collect()
    }
}

struct ConcatColsBack {
    col_counts: Vec<usize>,
    rows: usize,
}
impl<F: Scalar> OpBackward<F> for ConcatColsBack {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn backward(
        &self,
        _p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let total: usize = self.col_counts.iter().sum();
        let mut offset = 0;
        self.col_counts
            .iter()
            .zip(needs)
            .map(|(&cc, &need)| {
                let piece = need.then(|| {
                    let mut data = Vec::with_capacity(self.rows * cc);
                    for r in 0..self.rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + cc]);
                    }
                    Tensor::new(vec![self.rows, cc], data).unwrap()
                });
                offset += cc;
                piece
            })
            .collect()
    }
}

// ---------------------------------------------------------------- reductions

struct SumBack;
impl<F: Scalar> OpBackward<F> for SumBack {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(
        &self,
        p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        vec![needs[0].then(|| Tensor::filled(p[0].shape(), g.item()))]
    }
}

struct MeanBack;
impl<F: Scalar> OpBackward<F> for MeanBack {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(
        &self,
        p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        vec![needs[0].then(|| Tensor::filled(p[0].shape(), g.item() / F::from_f64(p[0].len() as f64)))]
    }
}

struct MaskedCrossEntropyBack<F> {
    probs: Vec<F>, // softmax rows, saved for masked positions only (zeros elsewhere)
    targets: Vec<u32>,
    mask: Vec<bool>,
    count: usize,
}
impl<F: Scalar> OpBackward<F> for MaskedCrossEntropyBack<F> {
    fn name(&self) -> &'static str {
        "masked_cross_entropy"
    }
    fn backward(
        &self,
        p: &[&Tensor<F>],
        _out: &Tensor<F>,
        g: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        vec![needs[0].then(|| {
            let v = p[0].cols();
            let scale = g.item() / F::from_f64(self.count as f64);
            let mut gl = vec![F::ZERO; p[0].len()];
            for (t, &m) in self.mask.iter().enumerate() {
                if !m {
                    continue;
                }
                let row = &self.probs[t * v..(t + 1) * v];
                let dst = &mut gl[t * v..(t + 1) * v];
                for (d, &pv) in dst.iter_mut().zip(row) {
                    *d = pv * scale;
                }
                dst[self.targets[t] as usize] += -scale;
            }
            Tensor::new(p[0].shape().to_vec(), gl).unwrap()
        })]
    }
}

// ---------------------------------------------------------------- forward methods

impl<F: Scalar> Tape<F> {
    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(F, F) -> F,
        back: Box<dyn OpBackward<F>>,
    ) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        Ok(self.push_op(out, vec![a, b], back))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Box::new(AddBack))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Box::new(SubBack))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Box::new(MulBack))
    }

    pub fn scale(&mut self, a: ValueId, factor: F) -> ValueId {
        let out = self.value(a).map(|v| v * factor);
        self.push_op(out, vec![a], Box::new(ScaleBack { factor }))
    }

    /// Broadcast add of a rank-1 bias over every row of a matrix.
    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (m, n) = dims2(self.value(a), "add_bias")?;
        if self.value(bias).shape() != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("matrix [{m},{n}] vs bias {:?}", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push_op(out, vec![a, bias], Box::new(AddBiasBack)))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] @ [{k2},{n}]")));
        }
        let mut out = vec![F::ZERO; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let out = Tensor::new(vec![m, n], out).unwrap();
        Ok(self.push_op(out, vec![a, b], Box::new(MatMulBack { m, k, n })))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        let (m, n) = dims2(self.value(a), "transpose")?;
        let mut out = vec![F::ZERO; m * n];
        kernels::transpose(self.value(a).data(), m, n, &mut out);
        let out = Tensor::new(vec![n, m], out).unwrap();
        Ok(self.push_op(out, vec![a], Box::new(TransposeBack { m, n })))
    }

    pub fn softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let (m, n) = dims2(self.value(a), "softmax")?;
        let mut out = vec![F::ZERO; m * n];
        kernels::softmax_rows(self.value(a).data(), m, n, &mut out);
        let out = Tensor::new(vec![m, n], out).unwrap();
        Ok(self.push_op(out, vec![a], Box::new(SoftmaxRowsBack)))
    }

    fn unary(&mut self, op: &'static str, a: ValueId, f: impl Fn(F) -> (F, F)) -> ValueId {
        let src = self.value(a);
        let mut data = Vec::with_capacity(src.len());
        let mut dydx = Vec::with_capacity(src.len());
        for &v in src.data() {
            let (y, d) = f(v);
            data.push(y);
            dydx.push(d);
        }
        let out = Tensor::new(src.shape().to_vec(), data).unwrap();
        self.push_op(out, vec![a], Box::new(UnaryBack { op, dydx }))
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        self.unary("gelu", a, gelu_tanh)
    }

    pub fn silu(&mut self, a: ValueId) -> ValueId {
        self.unary("silu", a, |x| {
            let s = sigmoid(x);
            (x * s, s * (F::ONE + x * (F::ONE - s)))
        })
    }

    pub fn softplus(&mut self, a: ValueId) -> ValueId {
        self.unary("softplus", a, |x| {
            let y = x.max(F::ZERO) + (-x.abs()).exp().ln_1p();
            (y, sigmoid(x))
        })
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        self.unary("exp", a, |x| {
            let e = x.exp();
            (e, e)
        })
    }

    /// RMS normalization over rows with a learned gain: y = gain * x / rms(x).
    pub fn rms_norm(&mut self, x: ValueId, gain: ValueId) -> Result<ValueId> {
        let eps = F::from_f64(1e-6);
        let (m, n) = dims2(self.value(x), "rms_norm")?;
        if self.value(gain).shape() != [n] {
            return Err(Error::shape(
                "rms_norm",
                format!("input [{m},{n}] vs gain {:?}", self.value(gain).shape()),
            ));
        }
        let n_f = F::from_f64(n as f64);
        let g = self.value(gain).data().to_vec();
        let src = self.value(x);
        let mut data = vec![F::ZERO; src.len()];
        for (orow, xrow) in data.chunks_mut(n).zip(src.data().chunks(n)) {
            let mut ms = F::ZERO;
            for &v in xrow {
                ms += v * v;
            }
            let inv = F::ONE / (ms / n_f + eps).sqrt();
            for ((o, &xv), &gv) in orow.iter_mut().zip(xrow).zip(&g) {
                *o = gv * xv * inv;
            }
        }
        let out = Tensor::new(vec![m, n], data).unwrap();
        Ok(self.push_op(out, vec![x, gain], Box::new(RmsNormBack { eps })))
    }

    /// Depthwise causal 1-D convolution; w is [kernel, channels].
    pub fn conv1d_causal(&mut self, x: ValueId, w: ValueId) -> Result<ValueId> {
        let (t_len, channels) = dims2(self.value(x), "conv1d_causal")?;
        let (kernel, ch2) = dims2(self.value(w), "conv1d_causal")?;
        if channels != ch2 {
            return Err(Error::shape(
                "conv1d_causal",
                format!("input [{t_len},{channels}] vs kernel [{kernel},{ch2}]"),
            ));
        }
        let mut out = vec![F::ZERO; t_len * channels];
        kernels::conv1d_causal(self.value(x).data(), self.value(w).data(), t_len, channels, kernel, &mut out);
        let out = Tensor::new(vec![t_len, channels], out).unwrap();
        Ok(self.push_op(out, vec![x, w], Box::new(Conv1dBack { t_len, channels, kernel })))
    }

    /// Embedding lookup: rows of `table` selected by token id.
    pub fn embedding(&mut self, table: ValueId, ids: &[u32]) -> Result<ValueId> {
        let (vocab, width) = dims2(self.value(table), "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::shape("embedding", format!("id {bad} out of vocab {vocab}")));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            data.extend_from_slice(src.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), width], data).unwrap();
        Ok(self.push_op(
            out,
            vec![table],
            Box::new(EmbeddingBack { ids: ids.to_vec(), vocab, width }),
        ))
    }

    pub fn gather_rows(&mut self, x: ValueId, idx: &[usize]) -> Result<ValueId> {
        let (rows, n) = dims2(self.value(x), "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {rows}")));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::new(vec![idx.len(), n], data).unwrap();
        Ok(self.push_op(out, vec![x], Box::new(GatherRowsBack { idx: idx.to_vec(), src_rows: rows })))
    }

    pub fn slice_rows(&mut self, x: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let (rows, n) = dims2(self.value(x), "slice_rows")?;
        if start > end || end > rows {
            return Err(Error::shape("slice_rows", format!("range {start}..{end} of {rows} rows")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let out = Tensor::new(vec![end - start, n], data).unwrap();
        Ok(self.push_op(out, vec![x], Box::new(SliceRowsBack { start, src_rows: rows })))
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let (rows, n) = dims2(self.value(x), "slice_cols")?;
        if start > end || end > n {
            return Err(Error::shape("slice_cols", format!("range {start}..{end} of {n} cols")));
        }
        let src = self.value(x);
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src.data()[r * n + start..r * n + end]);
        }
        let out = Tensor::new(vec![rows, width], data).unwrap();
        Ok(self.push_op(out, vec![x], Box::new(SliceColsBack { start, src_cols: n })))
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows", "no parts"));
        }
        let cols = self.value(parts[0]).cols();
        let mut row_counts = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = dims2(t, "concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("widths {cols} vs {c}")));
            }
            row_counts.push(r);
            data.extend_from_slice(t.data());
        }
        let total: usize = row_counts.iter().sum();
        let out = Tensor::new(vec![total, cols], data).unwrap();
        Ok(self.push_op(out, parts.to_vec(), Box::new(ConcatRowsBack { row_counts, cols })))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols", "no parts"));
        }
        let rows = self.value(parts[0]).rows();
        let mut col_counts = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("row counts {rows} vs {r}")));
            }
            col_counts.push(c);
        }
        let total: usize = col_counts.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::new(vec![rows, total], data).unwrap();
        Ok(self.push_op(out, parts.to_vec(), Box::new(ConcatColsBack { col_counts, rows })))
    }

    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let s = kernels::sum(self.value(a).data());
        self.push_op(Tensor::scalar(s), vec![a], Box::new(SumBack))
    }

    pub fn mean(&mut self, a: ValueId) -> ValueId {
        let n = self.value(a).len();
        let s = kernels::sum(self.value(a).data()) / F::from_f64(n as f64);
        self.push_op(Tensor::scalar(s), vec![a], Box::new(MeanBack))
    }

    /// Mean token cross-entropy over mask-true positions.
    pub fn masked_cross_entropy(
        &mut self,
        logits: ValueId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<ValueId> {
        let (t_len, vocab) = dims2(self.value(logits), "masked_cross_entropy")?;
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::shape(
                "masked_cross_entropy",
                format!("logits rows {t_len} vs targets {} / mask {}", targets.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateLoss("no loss-mask-true positions".into()));
        }
        if let Some(t) = mask.iter().zip(targets).find_map(|(&m, &tg)| (m && tg as usize >= vocab).then_some(tg))
        {
            return Err(Error::shape("masked_cross_entropy", format!("target {t} out of vocab {vocab}")));
        }
        let src = self.value(logits);
        let mut probs = vec![F::ZERO; t_len * vocab];
        let mut total = F::ZERO;
        for (t, row) in src.data().chunks(vocab).enumerate() {
            if !mask[t] {
                continue;
            }
            let mut mx = row[0];
            for &v in &row[1..] {
                mx = mx.max(v);
            }
            let mut se = F::ZERO;
            for &v in row {
                se += (v - mx).exp();
            }
            let lse = mx + se.ln();
            let prow = &mut probs[t * vocab..(t + 1) * vocab];
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            total += lse - row[targets[t] as usize];
        }
        let loss = total / F::from_f64(count as f64);
        Ok(self.push_op(
            Tensor::scalar(loss),
            vec![logits],
            Box::new(MaskedCrossEntropyBack {
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            }),
        ))
    }

    /// Record an externally computed op (used by fused primitives such as the
    /// selective scan, which keep their backward next to their forward).
    pub fn custom_op(
        &mut self,
        value: Tensor<F>,
        parents: Vec<ValueId>,
        back: Box<dyn OpBackward<F>>,
    ) -> ValueId {
        self.push_op(value, parents, back)
    }
}
