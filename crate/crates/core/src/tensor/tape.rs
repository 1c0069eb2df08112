use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::response;
use crate::scalar::Scalar;
use crate::training::taylor_link;

use super::kernels::{self, gelu, gelu_grad, sigmoid, softplus};
use super::{Gradients, ParamId, ParamStore, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Gelu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MaskedSoftmax(Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRow {
        x: Var,
        row: usize,
    },
    MaskedMeanRows {
        x: Var,
        mask: Vec<bool>,
    },
    PairwiseTanh {
        a: Var,
        b: Var,
        bias: Var,
        w: Var,
    },
    MonotoneResponse {
        base: Var,
        scale: Var,
        slopes: Var,
        discounts: Vec<T>,
        width: T,
    },
    TaylorLoss {
        pred: Var,
        target: Vec<T>,
        weight: Vec<T>,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation so it can be replayed backwards.
///
/// A tape is built per forward pass and thrown away after `backward`.
/// Parameters are copied onto the tape once per pass via [`Tape::param`].
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    dropout: Option<(T, ChaCha8Rng)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
            dropout: None,
        }
    }

    /// Enables inverted dropout with the given rate and seed. A rate of zero
    /// records no dropout nodes at all.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some((T::lit(rate), ChaCha8Rng::seed_from_u64(seed)));
        }
        self
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient unless `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter (once per tape); frozen parameters are recorded
    /// without gradient tracking so their whole upstream branch is skipped.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        if sb.len() != 2 || sb[0] != k {
            return Err(dim_err("matmul", sa, sb));
        }
        let n = sb[1];
        let mut out = vec![T::zero(); m * n];
        kernels::mm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = (va.rows(), va.cols(), vb.rows());
        if vb.cols() != k {
            return Err(dim_err("matmul_bt", va.shape(), vb.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        // out = a · bᵀ is the `g · bᵀ` kernel with b laid out [n×k]
        kernels::mm_a_bt(va.data(), vb.data(), &mut out, m, n, k);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(dim_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(value, Op::Softplus(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        if d < 2 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(dim_err("layer_norm", vx.shape(), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.rows();
        let mut xhat = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(d) {
            let (mean, is) = kernels::moments(row);
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Row-wise softmax; `mask` is per column or per element, `true` = keep.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let value = super::masked_softmax(self.value(x), mask)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::MaskedSoftmax(x), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data()[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        if start + len > c || len == 0 {
            return Err(dim_err("slice_cols", vx.shape(), &[start, len]));
        }
        let data = vx
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            let shapes: Vec<usize> = parts.iter().map(|&p| self.value(p).rows()).collect();
            return Err(dim_err("concat_cols", &[rows], &shapes));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            let shapes: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
            return Err(dim_err("concat_rows", &[cols], &shapes));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    /// One row of a matrix as a `[1×c]` tensor (embedding lookup).
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let vx = self.value(x);
        if row >= vx.rows() {
            return Err(dim_err("select_row", vx.shape(), &[row]));
        }
        let value = Tensor::new(vec![1, vx.cols()], vx.row(row).to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SelectRow { x, row }, ng))
    }

    /// Mean over rows where `mask` is true, as a `[1×c]` tensor.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        if mask.len() != r {
            return Err(dim_err("masked_mean_rows", vx.shape(), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::FullyMasked { row: 0 });
        }
        let inv = T::from_usize_lossy(count).recip();
        let mut out = vec![T::zero(); c];
        for (row, _) in vx.data().chunks(c).zip(mask).filter(|(_, &m)| m) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![1, c], out)?,
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// `out[i, j] = Σ_k w_k · tanh(a[i, k] + b[j, k] + bias_k)`.
    ///
    /// Scores every (query row, key row) pair through a one-hidden-layer
    /// network whose first layer has already been applied to each side.
    pub fn pairwise_tanh(&mut self, a: Var, b: Var, bias: Var, w: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let m = va.cols();
        if vb.cols() != m || self.value(bias).len() != m || self.value(w).len() != m {
            return Err(dim_err("pairwise_tanh", va.shape(), vb.shape()));
        }
        let (ra, rb) = (va.rows(), vb.rows());
        let (bb, ww) = (self.value(bias).data(), self.value(w).data());
        let mut out = vec![T::zero(); ra * rb];
        for i in 0..ra {
            let arow = va.row(i);
            for j in 0..rb {
                let brow = vb.row(j);
                let mut acc = T::zero();
                for k in 0..m {
                    acc += ww[k] * (arow[k] + brow[k] + bb[k]).tanh();
                }
                out[i * rb + j] = acc;
            }
        }
        let ng = self.ng(a) || self.ng(b) || self.ng(bias) || self.ng(w);
        Ok(self.push(
            Tensor::new(vec![ra, rb], out)?,
            Op::PairwiseTanh { a, b, bias, w },
            ng,
        ))
    }

    /// Piecewise-linear monotone demand response.
    ///
    /// `base` and `scale` are `[weeks×markets]`, `slopes` is
    /// `[markets×segments]`, `discounts` matches `base`.
    pub fn monotone_response(
        &mut self,
        base: Var,
        scale: Var,
        slopes: Var,
        discounts: &[T],
        width: T,
    ) -> Result<Var> {
        let (vb, vs, vd) = (self.value(base), self.value(scale), self.value(slopes));
        let markets = vb.cols();
        if vs.shape() != vb.shape() || discounts.len() != vb.len() || vd.rows() != markets {
            return Err(dim_err("monotone_response", vb.shape(), vd.shape()));
        }
        let mut out = Vec::with_capacity(vb.len());
        for (idx, &d) in discounts.iter().enumerate() {
            let j = idx % markets;
            out.push(response::evaluate(d, vb.data()[idx], vs.data()[idx], vd.row(j), width)?);
        }
        let value = Tensor::new(vb.shape().to_vec(), out)?;
        let ng = self.ng(base) || self.ng(scale) || self.ng(slopes);
        Ok(self.push(
            value,
            Op::MonotoneResponse {
                base,
                scale,
                slopes,
                discounts: discounts.to_vec(),
                width,
            },
            ng,
        ))
    }

    /// `Σ w · (v(pred) − v(target))²` with the cubic Taylor link `v`.
    pub fn taylor_loss(&mut self, pred: Var, target: &[T], weight: &[T]) -> Result<Var> {
        let vp = self.value(pred);
        if target.len() != vp.len() || weight.len() != vp.len() {
            return Err(dim_err("taylor_loss", vp.shape(), &[target.len(), weight.len()]));
        }
        if target.iter().chain(weight).any(|v| v.is_nan()) || vp.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("loss inputs".into()));
        }
        let mut total = T::zero();
        for ((&p, &t), &w) in vp.data().iter().zip(target).zip(weight) {
            if w != T::zero() {
                let e = taylor_link(p) - taylor_link(t);
                total += w * e * e;
            }
        }
        let ng = self.ng(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::TaylorLoss {
                pred,
                target: target.to_vec(),
                weight: weight.to_vec(),
            },
            ng,
        ))
    }

    /// Inverted dropout; identity when the tape has no dropout configured.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let rate = *rate;
        let keep_scale = (T::one() - rate).recip();
        let n = self.nodes[x.0].value.len();
        let keep: Vec<T> = (0..n)
            .map(|_| {
                if T::lit(rng.random::<f64>()) < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(value, Op::Dropout { x, keep }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Backward<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Backward { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        // zero-initialised accumulator for an input
        fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], v: Var, n: usize) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }

        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if want(*a) {
                    let ga = slot(grads, *a, va.len());
                    kernels::mm_a_bt(g, vb.data(), ga, m, k, n);
                }
                if want(*b) {
                    let gb = slot(grads, *b, vb.len());
                    kernels::mm_at_b(va.data(), g, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                // out[m×n] = a[m×k] · b[n×k]ᵀ
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if want(*a) {
                    let ga = slot(grads, *a, va.len());
                    kernels::mm(g, vb.data(), ga, m, n, k);
                }
                if want(*b) {
                    let gb = slot(grads, *b, vb.len());
                    // gb[n×k] += gᵀ[n×m] · a[m×k]
                    kernels::mm_at_b(g, va.data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        slot(grads, v, g.len()).iter_mut().zip(g).for_each(|(s, &x)| *s += x);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if want(*x) {
                    slot(grads, *x, g.len()).iter_mut().zip(g).for_each(|(s, &v)| *s += v);
                }
                if want(*b) {
                    let c = val(*b).len();
                    let gb = slot(grads, *b, c);
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let vb = val(*b).data();
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if want(*b) {
                    let va = val(*a).data();
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                slot(grads, *a, g.len()).iter_mut().zip(g).for_each(|(s, &v)| *s += v * *f);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (T::one() - y[i] * y[i]);
                }
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad(x[i]);
                }
            }
            Op::Softplus(a) => {
                let x = val(*a).data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * sigmoid(x[i]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*gain).len();
                let gn = val(*gain).data();
                if want(*gain) {
                    let gg = slot(grads, *gain, d);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if want(*bias) {
                    let gb = slot(grads, *bias, d);
                    for grow in g.chunks(d) {
                        gb.iter_mut().zip(grow).for_each(|(s, &v)| *s += v);
                    }
                }
                if want(*x) {
                    let nd = T::from_usize_lossy(d);
                    let gx = slot(grads, *x, g.len());
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = grow[j] * gn[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                        }
                        let k = inv_std[r] / nd;
                        for j in 0..d {
                            let dh = grow[j] * gn[j];
                            gx[r * d + j] += k * (nd * dh - s1 - hrow[j] * s2);
                        }
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let gx = slot(grads, *x, g.len());
                for (r, (grow, yrow)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::Transpose(a) => {
                let va = val(*a);
                let (r, c) = (va.rows(), va.cols());
                let ga = slot(grads, *a, g.len());
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(a) => {
                slot(grads, *a, g.len()).iter_mut().zip(g).for_each(|(s, &v)| *s += v);
            }
            Op::SliceCols { x, start } => {
                let vx = val(*x);
                let c = vx.cols();
                let len = node.value.cols();
                let gx = slot(grads, *x, vx.len());
                for (r, grow) in g.chunks(len).enumerate() {
                    for j in 0..len {
                        gx[r * c + start + j] += grow[j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if want(p) {
                        let gp = slot(grads, p, val(p).len());
                        for (r, grow) in g.chunks(total).enumerate() {
                            for j in 0..c {
                                gp[r * c + j] += grow[offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if want(p) {
                        let gp = slot(grads, p, n);
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(s, &v)| *s += v);
                    }
                    offset += n;
                }
            }
            Op::SelectRow { x, row } => {
                let vx = val(*x);
                let c = vx.cols();
                let gx = slot(grads, *x, vx.len());
                for j in 0..c {
                    gx[row * c + j] += g[j];
                }
            }
            Op::MaskedMeanRows { x, mask } => {
                let vx = val(*x);
                let c = vx.cols();
                let count = mask.iter().filter(|&&m| m).count();
                let inv = T::from_usize_lossy(count).recip();
                let gx = slot(grads, *x, vx.len());
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for j in 0..c {
                            gx[r * c + j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::PairwiseTanh { a, b, bias, w } => {
                let (va, vb) = (val(*a), val(*b));
                let (bb, ww) = (val(*bias).data(), val(*w).data());
                let m = va.cols();
                let (ra, rb) = (va.rows(), vb.rows());
                let mut ga = vec![T::zero(); va.len()];
                let mut gb = vec![T::zero(); vb.len()];
                let mut gbias = vec![T::zero(); m];
                let mut gw = vec![T::zero(); m];
                for i in 0..ra {
                    let arow = va.row(i);
                    for j in 0..rb {
                        let go = g[i * rb + j];
                        if go == T::zero() {
                            continue;
                        }
                        let brow = vb.row(j);
                        for k in 0..m {
                            let t = (arow[k] + brow[k] + bb[k]).tanh();
                            gw[k] += go * t;
                            let dz = go * ww[k] * (T::one() - t * t);
                            ga[i * m + k] += dz;
                            gb[j * m + k] += dz;
                            gbias[k] += dz;
                        }
                    }
                }
                for (v, gv) in [(*a, ga), (*b, gb), (*bias, gbias), (*w, gw)] {
                    if want(v) {
                        let s = slot(grads, v, gv.len());
                        s.iter_mut().zip(&gv).for_each(|(s, &x)| *s += x);
                    }
                }
            }
            Op::MonotoneResponse {
                base,
                scale,
                slopes,
                discounts,
                width,
            } => {
                let (vs, vd) = (val(*scale), val(*slopes));
                let markets = val(*base).cols();
                let segs = vd.cols();
                let mut gscale = vec![T::zero(); vs.len()];
                let mut gslopes = vec![T::zero(); vd.len()];
                for (idx, &d) in discounts.iter().enumerate() {
                    let j = idx % markets;
                    let (m, frac) = response::segment(d, *width, segs);
                    let row = vd.row(j);
                    let cum = row[..m].iter().copied().sum::<T>() + frac * row[m];
                    gscale[idx] += g[idx] * cum;
                    let sg = g[idx] * vs.data()[idx];
                    for n in 0..m {
                        gslopes[j * segs + n] += sg;
                    }
                    gslopes[j * segs + m] += sg * frac;
                }
                if want(*base) {
                    slot(grads, *base, g.len()).iter_mut().zip(g).for_each(|(s, &v)| *s += v);
                }
                for (v, gv) in [(*scale, gscale), (*slopes, gslopes)] {
                    if want(v) {
                        let s = slot(grads, v, gv.len());
                        s.iter_mut().zip(&gv).for_each(|(s, &x)| *s += x);
                    }
                }
            }
            Op::TaylorLoss {
                pred,
                target,
                weight,
            } => {
                let p = val(*pred).data();
                let gp = slot(grads, *pred, p.len());
                let two = T::lit(2.0);
                for i in 0..p.len() {
                    if weight[i] == T::zero() {
                        continue;
                    }
                    let e = taylor_link(p[i]) - taylor_link(target[i]);
                    let dv = T::one() + p[i] + p[i] * p[i] * T::lit(0.5);
                    gp[i] += g[0] * two * weight[i] * e * dv;
                }
            }
            Op::Dropout { x, keep } => {
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * keep[i];
                }
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                slot(grads, *a, n).iter_mut().for_each(|s| *s += g[0]);
            }
        }
    }

    /// Collects gradients of every parameter registered on this tape.
    pub fn param_grads(&self, back: &Backward<T>, n_params: usize) -> Gradients<T> {
        let mut out = Gradients::empty(n_params);
        let mut entries: Vec<_> = self.params.iter().collect();
        entries.sort_by_key(|(id, _)| **id);
        for (&id, &v) in entries {
            if let Some(g) = back.grad(v) {
                out.accumulate(id, g);
            }
        }
        out
    }
}

/// Result of a backward sweep: one optional gradient per tape node.
#[derive(Debug)]
pub struct Backward<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Backward<T> {
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
