//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Graph`] as they execute. Calling
//! [`Graph::backward`] walks the tape in exact reverse order and returns one
//! gradient tensor per registered parameter slot. The primitive set is the
//! one the rally model needs: embedding lookup, same-padded 1-D convolution,
//! a fused GRU cell, dense layers, elementwise activations, softmax,
//! concatenation, and attention-weighted sums.
//!
//! Parameters are borrowed, not copied, so a graph is cheap to build per
//! example. Every forward value is checked for NaN/Inf as it is produced.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lower/upper clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Row-major dense tensor of rank 0, 1 or 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "from_rows",
                expected: vec![cols],
                got: vec![bad.len()],
            });
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension (1 for scalars).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Trailing extent: the row width for matrices, the length for vectors.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gate activations cached by a GRU step for the backward pass.
#[derive(Debug, Clone)]
struct GruCache {
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    rh: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    Lookup { table: Var, indices: Vec<usize> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows { x: Var, s: Var },
    Concat(Vec<Var>),
    Conv1d { x: Var, kernel: Var, bias: Var },
    Dense { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Row { x: Var, index: usize },
    StackRows(Vec<Var>),
    Gru { h: Var, x: Var, w_x: Var, w_h: Var, b: Var, cache: Box<GruCache> },
    AlternateMerge(Var, Var),
    Softmax { e: Var },
    Normalize(Var),
    WeightedSum { alpha: Var, m: Var },
    Bce { p: Var, y: f64 },
    SumSquares(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::Lookup { .. } => "lookup",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Concat(_) => "concat",
            Op::Conv1d { .. } => "conv1d",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Row { .. } => "row",
            Op::StackRows(_) => "stack_rows",
            Op::Gru { .. } => "gru_cell",
            Op::AlternateMerge(..) => "alternate_merge",
            Op::Softmax { .. } => "softmax",
            Op::Normalize(_) => "normalize",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Bce { .. } => "bce",
            Op::SumSquares(_) => "sum_squares",
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// Gradients indexed by parameter slot.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn get(&self, slot: usize) -> &Tensor {
        &self.0[slot]
    }
}

/// Recorded computation. Parameters live outside the graph and are borrowed
/// for its lifetime.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: Vec<Option<Var>>,
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_owned(&mut self, value: Tensor, op: Op) -> Result<Var> {
        self.push(Cow::Owned(value), op)
    }

    /// Registers a learnable tensor under `slot`. Its gradient is returned at
    /// that index by [`Graph::backward`].
    pub fn param(&mut self, slot: usize, tensor: &'p Tensor) -> Result<Var> {
        if self.params.len() <= slot {
            self.params.resize(slot + 1, None);
        }
        if let Some(v) = self.params[slot] {
            return Ok(v);
        }
        let v = self.push(Cow::Borrowed(tensor), Op::Param)?;
        self.params[slot] = Some(v);
        Ok(v)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.push_owned(tensor, Op::Constant)
    }

    /// Row gather. A rank-1 table is treated as a column, giving a vector.
    pub fn lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let vocab = t.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(mismatch("lookup", &[vocab], &[bad]));
        }
        let out = if t.shape().len() == 1 {
            Tensor::vector(indices.iter().map(|&i| t.data()[i]).collect())
        } else {
            let d = t.cols();
            let mut data = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(indices.len(), d, data)?
        };
        self.push_owned(
            out,
            Op::Lookup {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_owned(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_owned(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        self.push_owned(out, Op::Scale(x, c))
    }

    /// Multiplies row `n` of matrix `x` by `s[n]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.shape().len() != 2 || ts.len() != tx.rows() {
            return Err(mismatch("scale_rows", &[tx.rows()], ts.shape()));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for (n, row) in data.chunks_mut(c).enumerate() {
            let k = ts.data()[n];
            row.iter_mut().for_each(|v| *v *= k);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_owned(out, Op::ScaleRows { x, s })
    }

    /// Concatenates along the last axis. All parts must be vectors, or all
    /// matrices with the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let rank = first.shape().len();
        let rows = first.rows();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != rank || t.rows() != rows {
                return Err(mismatch("concat", first.shape(), t.shape()));
            }
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if rank == 2 { vec![rows, width] } else { vec![width] };
        let out = Tensor::new(shape, data)?;
        self.push_owned(out, Op::Concat(parts.to_vec()))
    }

    /// Same-padded 1-D convolution. `x`: N×C_in, `kernel`: K×C_in×C_out with
    /// K odd, `bias`: C_out. Output: N×C_out.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = conv1d_forward(self.value(x), self.value(kernel), self.value(bias))?;
        self.push_owned(out, Op::Conv1d { x, kernel, bias })
    }

    /// `x W + b` for a vector `x` (length a) or each row of a matrix `x`
    /// (N×a); `W` is a×b.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (a, bdim) = match tw.shape() {
            [a, b] => (*a, *b),
            s => return Err(mismatch("dense", &[tx.cols(), tb.len()], s)),
        };
        if tx.cols() != a || tb.len() != bdim {
            return Err(mismatch("dense", &[a, bdim], &[tx.cols(), tb.len()]));
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * bdim);
        for r in 0..rows {
            let xr = tx.row(r);
            let mut acc = tb.data().to_vec();
            for (i, &xi) in xr.iter().enumerate() {
                if xi != 0.0 {
                    let wr = &tw.data()[i * bdim..(i + 1) * bdim];
                    acc.iter_mut().zip(wr).for_each(|(o, w)| *o += xi * w);
                }
            }
            data.extend(acc);
        }
        let shape = if tx.shape().len() == 2 { vec![rows, bdim] } else { vec![bdim] };
        let out = Tensor::new(shape, data)?;
        self.push_owned(out, Op::Dense { x, w, b })
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Result<Var> {
        match act {
            Activation::None => Ok(x),
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    /// Dense layer followed by an activation.
    pub fn dense_act(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let y = self.dense(x, w, b)?;
        self.activate(y, act)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push_owned(out, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// Row `index` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || index >= t.rows() {
            return Err(mismatch("row", &[index + 1], t.shape()));
        }
        let out = Tensor::vector(t.row(index).to_vec());
        self.push_owned(out, Op::Row { x, index })
    }

    /// Stacks equal-length vectors into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let width = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let t = self.value(r);
            if t.shape() != [width] {
                return Err(mismatch("stack_rows", &[width], t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows.len(), width, data)?;
        self.push_owned(out, Op::StackRows(rows.to_vec()))
    }

    /// One GRU step. `h`: d, `x`: c, `w_x`: c×3d, `w_h`: d×3d, `b`: 3d, with
    /// gate blocks ordered update, reset, candidate.
    ///
    /// z = σ(x W_xz + h W_hz + b_z), r = σ(x W_xr + h W_hr + b_r),
    /// h̃ = tanh(x W_xc + (r ⊙ h) W_hc + b_c), h' = (1 − z) ⊙ h + z ⊙ h̃.
    pub fn gru_cell(&mut self, h: Var, x: Var, w_x: Var, w_h: Var, b: Var) -> Result<Var> {
        let (th, tx, twx, twh, tb) = (
            self.value(h),
            self.value(x),
            self.value(w_x),
            self.value(w_h),
            self.value(b),
        );
        let d = th.len();
        let c = tx.len();
        if twx.shape() != [c, 3 * d] {
            return Err(mismatch("gru_cell", &[c, 3 * d], twx.shape()));
        }
        if twh.shape() != [d, 3 * d] {
            return Err(mismatch("gru_cell", &[d, 3 * d], twh.shape()));
        }
        if tb.len() != 3 * d || th.shape().len() != 1 || tx.shape().len() != 1 {
            return Err(mismatch("gru_cell", &[3 * d], tb.shape()));
        }
        let (hv, xv, wx, wh) = (th.data(), tx.data(), twx.data(), twh.data());
        let three = 3 * d;

        // x W_x + b for all three blocks.
        let mut pre = tb.data().to_vec();
        for (i, &xi) in xv.iter().enumerate() {
            if xi != 0.0 {
                let wr = &wx[i * three..(i + 1) * three];
                pre.iter_mut().zip(wr).for_each(|(p, w)| *p += xi * w);
            }
        }
        // h W_h for update and reset blocks.
        for (i, &hi) in hv.iter().enumerate() {
            if hi != 0.0 {
                let wr = &wh[i * three..i * three + 2 * d];
                pre[..2 * d].iter_mut().zip(wr).for_each(|(p, w)| *p += hi * w);
            }
        }
        let z: Vec<f64> = pre[..d].iter().map(|&v| sigmoid(v)).collect();
        let r: Vec<f64> = pre[d..2 * d].iter().map(|&v| sigmoid(v)).collect();
        let rh: Vec<f64> = r.iter().zip(hv).map(|(a, b)| a * b).collect();
        let mut cand_pre = pre[2 * d..].to_vec();
        for (i, &v) in rh.iter().enumerate() {
            if v != 0.0 {
                let wr = &wh[i * three + 2 * d..(i + 1) * three];
                cand_pre.iter_mut().zip(wr).for_each(|(p, w)| *p += v * w);
            }
        }
        let cand: Vec<f64> = cand_pre.iter().map(|v| v.tanh()).collect();
        let out: Vec<f64> = (0..d)
            .map(|j| (1.0 - z[j]) * hv[j] + z[j] * cand[j])
            .collect();
        let cache = Box::new(GruCache { z, r, cand, rh });
        self.push_owned(
            Tensor::vector(out),
            Op::Gru {
                h,
                x,
                w_x,
                w_h,
                b,
                cache,
            },
        )
    }

    /// Interleaves two equal-shape matrices by row parity: 1-based odd rows
    /// from `a`, even rows from `b`.
    pub fn alternate_merge(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("alternate_merge", a, b)?;
        let out = alternate_merge(self.value(a), self.value(b))?;
        self.push_owned(out, Op::AlternateMerge(a, b))
    }

    /// Numerically stable softmax over a flattened score tensor. Masked
    /// entries (`false`) get weight 0.
    pub fn softmax(&mut self, e: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = Tensor::vector(softmax(self.value(e).data(), mask)?);
        self.push_owned(
            out,
Op::Softmax { e })
    }

    /// `e_n / Σ e_k` without exponentiation.
    pub fn normalize(&mut self, e: Var) -> Result<Var> {
        let t = self.value(e);
        let total: f64 = t.data().iter().sum();
        let out = Tensor::vector(t.data().iter().map(|v| v / total).collect());
        self.push_owned(out, Op::Normalize(e))
    }

    /// Σ_n alpha_n · m_n over the rows of `m`.
    pub fn weighted_sum(&mut self, alpha: Var, m: Var) -> Result<Var> {
        let (ta, tm) = (self.value(alpha), self.value(m));
        if tm.shape().len() != 2 || ta.len() != tm.rows() {
            return Err(mismatch("weighted_sum", &[tm.rows()], ta.shape()));
        }
        let mut acc = vec![0.0; tm.cols()];
        for (n, &a) in ta.data().iter().enumerate() {
            acc.iter_mut().zip(tm.row(n)).for_each(|(o, v)| *o += a * v);
        }
        self.push_owned(Tensor::vector(acc), Op::WeightedSum { alpha, m })
    }

    /// Binary cross-entropy `−[y ln p + (1−y) ln(1−p)]` with `p` clamped to
    /// `[PROB_CLAMP, 1 − PROB_CLAMP]`.
    pub fn bce(&mut self, p: Var, y: f64) -> Result<Var> {
        let t = self.value(p);
        if t.len() != 1 {
            return Err(mismatch("bce", &[1], t.shape()));
        }
        let out = Tensor::scalar(binary_cross_entropy(t.data()[0], y));
        self.push_owned(out, Op::Bce { p, y })
    }

    pub fn sum_squares(&mut self, xs: &[Var]) -> Result<Var> {
        let total = xs.iter().map(|&x| self.value(x).sum_squares()).sum();
        self.push_owned(Tensor::scalar(total), Op::SumSquares(xs.to_vec()))
    }

    /// Reverse pass from `output` seeded with `seed` (same shape as the
    /// output). Returns a gradient for every registered parameter slot;
    /// parameters the output does not depend on get zeros.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if seed.len() != self.value(output).len() {
            return Err(mismatch("backward", out_shape, seed.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut out = Vec::with_capacity(self.params.len());
        for (slot, var) in self.params.iter().enumerate() {
            let Some(var) = var else {
                return Err(Error::InvalidConfig(format!("parameter slot {slot} never registered")));
            };
            let shape = self.value(*var).shape().to_vec();
            let data = match grads.get(var.0).and_then(Option::as_ref) {
                Some(g) => g.clone(),
                None => vec![0.0; self.value(*var).len()],
            };
            let t = Tensor::new(shape, data)?;
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter slot {slot}")));
            }
            out.push(t);
        }
        Ok(Gradients(out))
    }

    fn backprop_node(&self, node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        // Accumulates into the gradient buffer of `v`, allocating on first use.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let val = |v: Var| self.value(v);
        let y = node.value.data();

        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Lookup { table, indices } => {
                let t = val(*table);
                let d = if t.shape().len() == 1 { 1 } else { t.cols() };
                let gt = slot(grads, *table, t.len());
                for (n, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[idx * d + j] += g[n * d + j];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let gv = slot(grads, v, g.len());
                    gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let ga = slot(grads, *a, g.len());
                for k in 0..g.len() {
                    ga[k] += g[k] * tb[k];
                }
                let gb = slot(grads, *b, g.len());
                for k in 0..g.len() {
                    gb[k] += g[k] * ta[k];
                }
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
            }
            Op::ScaleRows { x, s } => {
                let (tx, ts) = (val(*x), val(*s));
                let c = tx.cols();
                let gx = slot(grads, *x, g.len());
                for n in 0..tx.rows() {
                    let k = ts.data()[n];
                    for j in 0..c {
                        gx[n * c + j] += g[n * c + j] * k;
                    }
                }
                let gs = slot(grads, *s, ts.len());
                for n in 0..tx.rows() {
                    gs[n] += (0..c).map(|j| g[n * c + j] * tx.data()[n * c + j]).sum::<f64>();
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let width = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let w = tp.cols();
                    let gp = slot(grads, p, tp.len());
                    for r in 0..rows {
                        for j in 0..w {
                            gp[r * w + j] += g[r * width + offset + j];
                        }
                    }
                    offset += w;
                }
            }
            Op::Conv1d { x, kernel, bias } => {
                let (tx, tk) = (val(*x), val(*kernel));
                let (n_len, c_in) = (tx.rows(), tx.cols());
                let (k_len, c_out) = (tk.shape()[0], tk.shape()[2]);
                let pad = (k_len - 1) / 2;
                {
                    let gb = slot(grads, *bias, c_out);
                    for n in 0..n_len {
                        for o in 0..c_out {
                            gb[o] += g[n * c_out + o];
                        }
                    }
                }
                {
                    let gk = slot(grads, *kernel, tk.len());
                    for n in 0..n_len {
                        let gy = &g[n * c_out..(n + 1) * c_out];
                        for k in 0..k_len {
                            let Some(src) = (n + k).checked_sub(pad).filter(|&s| s < n_len) else {
                                continue;
                            };
                            let xr = tx.row(src);
                            for (i, &xi) in xr.iter().enumerate() {
                                if xi == 0.0 {
                                    continue;
                                }
                                let base = (k * c_in + i) * c_out;
                                gk[base..base + c_out]
                                    .iter_mut()
                                    .zip(gy)
                                    .for_each(|(o, gv)| *o += xi * gv);
                            }
                        }
                    }
                }
                let gx = slot(grads, *x, tx.len());
                for n in 0..n_len {
                    let gy = &g[n * c_out..(n + 1) * c_out];
                    for k in 0..k_len {
                        let Some(src) = (n + k).checked_sub(pad).filter(|&s| s < n_len) else {
                            continue;
                        };
                        for i in 0..c_in {
                            let base = (k * c_in + i) * c_out;
                            let w = &tk.data()[base..base + c_out];
                            gx[src * c_in + i] += w.iter().zip(gy).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let rows = tx.rows();
                let (a, bd) = (tw.shape()[0], tw.shape()[1]);
                {
                    let gb = slot(grads, *b, bd);
                    for r in 0..rows {
                        for o in 0..bd {
                            gb[o] += g[r * bd + o];
                        }
                    }
                }
                {
                    let gw = slot(grads, *w, tw.len());
                    for r in 0..rows {
                        let gy = &g[r * bd..(r + 1) * bd];
                        for (i, &xi) in tx.row(r).iter().enumerate() {
                            if xi != 0.0 {
                                gw[i * bd..(i + 1) * bd]
                                    .iter_mut()
                                    .zip(gy)
                                    .for_each(|(o, gv)| *o += xi * gv);
                            }
                        }
                    }
                }
                let gx = slot(grads, *x, tx.len());
                for r in 0..rows {
                    let gy = &g[r * bd..(r + 1) * bd];
                    for i in 0..a {
                        let wr = &tw.data()[i * bd..(i + 1) * bd];
                        gx[r * a + i] += wr.iter().zip(gy).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
            Op::Relu(x) => {
                let tx = val(*x).data();
                let gx = slot(grads, *x, g.len());
                for k in 0..g.len() {
                    if tx[k] > 0.0 {
                        gx[k] += g[k];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }
            Op::Tanh(x) => {
                let gx = slot(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }
            Op::Row { x, index } => {
                let tx = val(*x);
                let c = tx.cols();
                let gx = slot(grads, *x, tx.len());
                for j in 0..c {
                    gx[index * c + j] += g[j];
                }
            }
            Op::StackRows(rows) => {
                let width = node.value.cols();
                for (n, &r) in rows.iter().enumerate() {
                    let gr = slot(grads, r, width);
                    for j in 0..width {
                        gr[j] += g[n * width + j];
                    }
                }
            }
            Op::Gru {
                h,
                x,
                w_x,
                w_h,
                b,
                cache,
            } => {
                let (hv, xv) = (val(*h).data(), val(*x).data());
                let (wx, wh) = (val(*w_x).data(), val(*w_h).data());
                let d = hv.len();
                let three = 3 * d;
                let GruCache { z, r, cand, rh } = cache.as_ref();

                // Gradients of the three gate pre-activations, block-ordered.
                let mut da = vec![0.0; three];
                let mut dh = vec![0.0; d];
                for j in 0..d {
                    dh[j] = g[j] * (1.0 - z[j]);
                    da[j] = g[j] * (cand[j] - hv[j]) * z[j] * (1.0 - z[j]);
                    da[2 * d + j] = g[j] * z[j] * (1.0 - cand[j] * cand[j]);
                }
                // Through the candidate's recurrent term (r ⊙ h) W_hc.
                let mut drh = vec![0.0; d];
                for i in 0..d {
                    let wr = &wh[i * three + 2 * d..(i + 1) * three];
                    drh[i] = wr.iter().zip(&da[2 * d..]).map(|(w, a)| w * a).sum();
                }
                for i in 0..d {
                    dh[i] += drh[i] * r[i];
                    da[d + i] = drh[i] * hv[i] * r[i] * (1.0 - r[i]);
                }
                // Recurrent terms of the update and reset gates.
                for i in 0..d {
                    let wr = &wh[i * three..i * three + 2 * d];
                    dh[i] += wr.iter().zip(&da[..2 * d]).map(|(w, a)| w * a).sum::<f64>();
                }
                {
                    let gb = slot(grads, *b, three);
                    gb.iter_mut().zip(&da).for_each(|(o, a)| *o += a);
                }
                {
                    let gwx = slot(grads, *w_x, wx.len());
                    for (i, &xi) in xv.iter().enumerate() {
                        if xi != 0.0 {
                            gwx[i * three..(i + 1) * three]
                                .iter_mut()
                                .zip(&da)
                                .for_each(|(o, a)| *o += xi * a);
                        }
                    }
                }
                {
                    let gwh = slot(grads, *w_h, wh.len());
                    for i in 0..d {
                        let row = &mut gwh[i * three..(i + 1) * three];
                        for j in 0..2 * d {
                            row[j] += hv[i] * da[j];
                        }
                        for j in 2 * d..three {
                            row[j] += rh[i] * da[j];
                        }
                    }
                }
                {
                    let gx = slot(grads, *x, xv.len());
                    for i in 0..xv.len() {
                        let wr = &wx[i * three..(i + 1) * three];
                        gx[i] += wr.iter().zip(&da).map(|(w, a)| w * a).sum::<f64>();
                    }
                }
                let gh = slot(grads, *h, d);
                gh.iter_mut().zip(&dh).for_each(|(o, v)| *o += v);
            }
            Op::AlternateMerge(a, b) => {
                let c = node.value.cols();
                for (parity, v) in [(0usize, *a), (1usize, *b)] {
                    let gv = slot(grads, v, g.len());
                    for n in (parity..node.value.rows()).step_by(2) {
                        for j in 0..c {
                            gv[n * c + j] += g[n * c + j];
                        }
                    }
                }
            }
            Op::Softmax { e } => {
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                let ge = slot(grads, *e, g.len());
                for k in 0..g.len() {
                    ge[k] += y[k] * (g[k] - dot);
                }
            }
            Op::Normalize(e) => {
                let total: f64 = val(*e).data().iter().sum();
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                let ge = slot(grads, *e, g.len());
                for k in 0..g.len() {
                    ge[k] += (g[k] - dot) / total;
                }
            }
            Op::WeightedSum { alpha, m } => {
                let (ta, tm) = (val(*alpha), val(*m));
                let c = tm.cols();
                {
                    let ga = slot(grads, *alpha, ta.len());
                    for n in 0..ta.len() {
                        ga[n] += tm.row(n).iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                let gm = slot(grads, *m, tm.len());
                for n in 0..ta.len() {
                    let an = ta.data()[n];
                    for j in 0..c {
                        gm[n * c + j] += an * g[j];
                    }
                }
            }
            Op::Bce { p, y: label } => {
                let pv = val(*p).data()[0];
                let d = if pv > PROB_CLAMP && pv < 1.0 - PROB_CLAMP {
                    -label / pv + (1.0 - label) / (1.0 - pv)
                } else {
                    0.0
                };
                slot(grads, *p, 1)[0] += g[0] * d;
            }
            Op::SumSquares(xs) => {
                for &x in xs {
                    let tx = val(x).data();
                    let gx = slot(grads, x, tx.len());
                    gx.iter_mut().zip(tx).for_each(|(o, v)| *o += 2.0 * v * g[0]);
                }
            }
        }
        Ok(())
    }
}

fn conv1d_forward(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (k_len, c_in, c_out) = match kernel.shape() {
        [k, i, o] => (*k, *i, *o),
        s => return Err(mismatch("conv1d_same", &[3, x.cols(), bias.len()], s)),
    };
    if k_len % 2 == 0 {
        return Err(Error::InvalidConfig(format!("conv kernel size {k_len} must be odd")));
    }
    if x.shape().len() != 2 || x.cols() != c_in || bias.len() != c_out {
        return Err(mismatch("conv1d_same", &[k_len, c_in, c_out], &[x.cols(), bias.len()]));
    }
    let n_len = x.rows();
    let pad = (k_len - 1) / 2;
    let mut out = Vec::with_capacity(n_len * c_out);
    for n in 0..n_len {
        let mut acc = bias.data().to_vec();
        for k in 0..k_len {
            let Some(src) = (n + k).checked_sub(pad).filter(|&s| s < n_len) else {
                continue;
            };
            for (i, &xi) in x.row(src).iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let base = (k * c_in + i) * c_out;
                acc.iter_mut()
                    .zip(&kernel.data()[base..base + c_out])
                    .for_each(|(o, w)| *o += xi * w);
            }
        }
        out.extend(acc);
    }
    Tensor::matrix(n_len, c_out, out)
}

/// Value-level form of [`Graph::conv1d_same`].
pub fn conv1d_same(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    conv1d_forward(x, kernel, bias)
}

/// Value-level form of [`Graph::alternate_merge`].
pub fn alternate_merge(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(mismatch("alternate_merge", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.len());
    for n in 0..a.rows() {
        // Row index n is 0-based: even n is an odd 1-based row.
        let src = if n % 2 == 0 { a } else { b };
        data.extend_from_slice(src.row(n));
    }
    Tensor::new(a.shape().to_vec(), data)
}

/// Value-level softmax with optional mask.
pub fn softmax(e: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if let Some(m) = mask {
        if m.len() != e.len() {
            return Err(mismatch("softmax", &[e.len()], &[m.len()]));
        }
    }
    let live = |k: usize| mask.map_or(true, |m| m[k]);
    let max = (0..e.len())
        .filter(|&k| live(k))
        .map(|k| e[k])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let exps: Vec<f64> = (0..e.len())
        .map(|k| if live(k) { (e[k] - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|v| v / total).collect())
}

pub fn binary_cross_entropy(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> AdamState {
        let zeros: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// Bias-corrected Adam update of every parameter in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(mismatch(
            "adam_step",
            &[state.first_moment.len()],
            &[params.len(), grads.len()],
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(mismatch("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let pd = p.data_mut();
        for k in 0..pd.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            pd[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Central finite differences, used to check analytic gradients.
pub mod check {
    /// Estimates ∂f/∂x_k for every listed coordinate `k` of `x` with step `h`.
    pub fn central_difference(
        mut f: impl FnMut(&[f64]) -> f64,
        x: &[f64],
        coords: &[usize],
        h: f64,
    ) -> Vec<f64> {
        let mut probe = x.to_vec();
        coords
            .iter()
            .map(|&k| {
                probe[k] = x[k] + h;
                let up = f(&probe);
                probe[k] = x[k] - h;
                let down = f(&probe);
                probe[k] = x[k];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// `|a − b| / max(|a|, |b|, floor)`. The floor keeps exact zeros and
    /// round-off-sized gradients from dominating.
    pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(floor)
    }
}
