//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its forward value
//! and the handles of its inputs. Inputs are always created before their
//! consumers, so node indices are a topological order and
//! [`Graph::backward`] walks them in reverse, visiting each node once.
//! Gradients reaching a node from several consumers are summed.
//!
//! Graphs are rebuilt for every forward pass. A graph is single-threaded,
//! but distinct graphs share nothing and may be built on different threads.
//!
//! ```
//! use teamtraj::autodiff::Graph;
//! use teamtraj::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let a = g.param(Tensor::from_rows(&[&[1.0, 2.0]]));
//! let b = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
//! let c = g.matmul(a, b).unwrap();
//! let loss = g.sum_all(c);
//! assert_eq!(g.value(loss).item(), 11.0);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Softmax(Var),
    OuterSum(Var, Var),
    Concat(Vec<Var>, usize),
    SumAxis(Var, usize),
    SumAll(Var),
    Transpose(Var),
    Reshape(Var),
    Narrow(Var, usize),
    Conv1d { input: Var, kernel: Var, dilation: usize },
    WeightNorm { direction: Var, gain: Var },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// The gradient for `var`, or `None` when no path connects it to the
    /// loss or it does not require gradients.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Like [`Gradients::get`] but substitutes zeros for a missing gradient.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Splits a tensor shape into (rows, last-axis length) for row-wise ops.
fn rows_cols(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [] => (1, 1),
        [n] => (1, *n),
        s => {
            let cols = *s.last().unwrap();
            (t.len() / cols, cols)
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions of {:?} and {:?} disagree",
                ta.shape(),
                tb.shape()
            )));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `bias[i]` to every element of row `i` of a matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = tx.dims2()?;
        if tb.shape() != [m] {
            return Err(Error::dim(format!(
                "add_row_bias: bias {:?} does not match {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            let b = tb.data()[i];
            row.iter_mut().for_each(|v| *v += b);
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Elementwise product with a fixed tensor (masks, weights).
    pub fn mul_const(&mut self, x: Var, factor: &Tensor) -> Result<Var> {
        let t = self.value(x);
        same_shape("mul_const", t, factor)?;
        let data = t.data().iter().zip(factor.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::MulConst(x, factor.data().to_vec()), rg))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| if v >= 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map_unary(x, |v| if v >= 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Softmax along the last axis, using max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || t.rank() > 2 {
            return Err(Error::dim(format!("softmax: unsupported shape {:?}", t.shape())));
        }
        let (_, cols) = rows_cols(t);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// `out[i][j] = u[i] + v[j]` for vectors `u`, `v`.
    pub fn outer_sum(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        let (&[m], &[n]) = (tu.shape(), tv.shape()) else {
            return Err(Error::dim(format!(
                "outer_sum: expected vectors, got {:?} and {:?}",
                tu.shape(),
                tv.shape()
            )));
        };
        let mut data = Vec::with_capacity(m * n);
        for &a in tu.data() {
            data.extend(tv.data().iter().map(|&b| a + b));
        }
        let rg = self.needs(&[u, v]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::OuterSum(u, v), rg))
    }

    /// Concatenates vectors along axis 0, or matrices along axis 0 or 1.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat: no inputs"))?;
        let rank = self.value(*first).rank();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::dim(format!(
                "concat: axis {axis} unsupported for shape {:?}",
                self.shape(*first)
            )));
        }
        let value = if axis == 0 {
            let tail = self.value(*first).shape()[1..].to_vec();
            let mut lead = 0;
            let mut data = Vec::new();
            for &p in parts {
                let t = self.value(p);
                if t.shape()[1..] != tail[..] {
                    return Err(Error::dim(format!(
                        "concat: shape {:?} incompatible with {:?}",
                        t.shape(),
                        self.shape(*first)
                    )));
                }
                lead += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![lead];
            shape.extend(tail);
            Tensor::new(shape, data)?
        } else {
            let rows = self.value(*first).shape()[0];
            let mut widths = Vec::with_capacity(parts.len());
            for &p in parts {
                let (r, c) = self.value(p).dims2()?;
                if r != rows {
                    return Err(Error::dim(format!(
                        "concat: shape {:?} incompatible with {:?}",
                        self.shape(p),
                        self.shape(*first)
                    )));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (&p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        let rg = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Sums a matrix over `axis`, yielding a vector.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let data = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for row in t.data().chunks(n) {
                    out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                out
            }
            1 => t.data().chunks(n).map(|row| row.iter().sum()).collect(),
            _ => return Err(Error::dim(format!("sum_axis: axis {axis} out of range"))),
        };
        let len = if axis == 0 { n } else { m };
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![len], data)?, Op::SumAxis(x, axis), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data()[i * n + j];
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Slice `[start, start + len)` along axis 0.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let lead = *t
            .shape()
            .first()
            .ok_or_else(|| Error::dim("narrow: scalar input"))?;
        if len == 0 || start + len > lead {
            return Err(Error::dim(format!(
                "narrow: range {start}..{} outside axis of length {lead}",
                start + len
            )));
        }
        let inner = t.len() / lead;
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow(x, start), rg))
    }

    /// Causal dilated 1-D convolution.
    ///
    /// `input` is `[C_in, L]`, `kernel` is `[C_out, C_in, f]`. Tap `i`
    /// reads input position `s - dilation * i`; positions before the
    /// sequence start read zero, so the output keeps length `L` and
    /// position `s` never sees inputs after `s`.
    pub fn conv1d_causal(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let (c_in, len) = ti.dims2()?;
        let &[c_out, k_in, width] = tk.shape() else {
            return Err(Error::dim(format!(
                "conv1d: kernel must be [C_out, C_in, f], got {:?}",
                tk.shape()
            )));
        };
        if k_in != c_in {
            return Err(Error::dim(format!(
                "conv1d: kernel {:?} does not accept input {:?}",
                tk.shape(),
                ti.shape()
            )));
        }
        if dilation < 1 {
            return Err(Error::param("conv1d: dilation must be at least 1"));
        }
        let x = ti.data();
        let k = tk.data();
        let mut out = vec![0.0; c_out * len];
        for o in 0..c_out {
            for s in 0..len {
                let mut acc = 0.0;
                for c in 0..c_in {
                    let taps = &k[(o * c_in + c) * width..(o * c_in + c + 1) * width];
                    let row = &x[c * len..(c + 1) * len];
                    for (i, &w) in taps.iter().enumerate() {
                        let back = dilation * i;
                        if back > s {
                            break;
                        }
                        acc += w * row[s - back];
                    }
                }
                out[o * len + s] = acc;
            }
        }
        let rg = self.needs(&[input, kernel]);
        Ok(self.push(
            Tensor::new(vec![c_out, len], out)?,
            Op::Conv1d {
                input,
                kernel,
                dilation,
            },
            rg,
        ))
    }

    /// Weight normalization: row `o` of the result is
    /// `gain[o] * direction[o] / |direction[o]|`, where a row is everything
    /// behind the leading axis. A zero direction row yields a zero row.
    pub fn weight_norm(&mut self, direction: Var, gain: Var) -> Result<Var> {
        let (tv, tg) = (self.value(direction), self.value(gain));
        let lead = *tv.shape().first().unwrap_or(&0);
        if tg.shape() != [lead] {
            return Err(Error::dim(format!(
                "weight_norm: gain {:?} does not match direction {:?}",
                tg.shape(),
                tv.shape()
            )));
        }
        let inner = tv.len() / lead;
        let mut data = Vec::with_capacity(tv.len());
        for (o, row) in tv.data().chunks(inner).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let factor = if norm > 0.0 { tg.data()[o] / norm } else { 0.0 };
            data.extend(row.iter().map(|v| v * factor));
        }
        let value = Tensor::new(tv.shape().to_vec(), data)?;
        let rg = self.needs(&[direction, gain]);
        Ok(self.push(value, Op::WeightNorm { direction, gain }, rg))
    }

    /// Channel ("spatial") dropout on a `[C, L]` input: each channel is
    /// kept or zeroed as a whole, survivors scaled by `1 / (1 - rate)`.
    /// Identity when `train` is false or `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::param(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let (channels, len) = self.value(x).dims2()?;
        let keep = 1.0 / (1.0 - rate);
        let mut mask = Vec::with_capacity(channels * len);
        for _ in 0..channels {
            let m = if rng.gen::<f64>() < rate { 0.0 } else { keep };
            mask.extend(std::iter::repeat_n(m, len));
        }
        let mask = Tensor::new(vec![channels, len], mask)?;
        self.mul_const(x, &mask)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        same_shape("mse", tp, tt)?;
        let n = tp.len() as f64;
        let total: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(total / n), Op::Mse(pred, target), rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward: loss must hold one element, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, idx: usize, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        // Adds into the gradient buffer of `var`, creating it on first use.
        let mut acc = |var: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[var.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[var.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grad[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += av * grad[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(grad).for_each(|(o, d)| *o += d));
                acc(*b, &mut |g| g.iter_mut().zip(grad).for_each(|(o, d)| *o += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(grad).for_each(|(o, d)| *o += d));
                acc(*b, &mut |g| g.iter_mut().zip(grad).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for ((o, d), y) in g.iter_mut().zip(grad).zip(bd) {
                        *o += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((o, d), x) in g.iter_mut().zip(grad).zip(ad) {
                        *o += d * x;
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let n = self.value(*x).shape()[1];
                acc(*x, &mut |g| g.iter_mut().zip(grad).for_each(|(o, d)| *o += d));
                acc(*b, &mut |g| {
                    for (o, row) in g.iter_mut().zip(grad.chunks(n)) {
                        *o += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(x, factor) => {
                acc(*x, &mut |g| g.iter_mut().zip(grad).for_each(|(o, d)| *o += d * factor));
            }
            Op::MulConst(x, factor) => {
                acc(*x, &mut |g| {
                    for ((o, d), f) in g.iter_mut().zip(grad).zip(factor) {
                        *o += d * f;
                    }
                });
            }
            Op::Relu(x) => {
                let xd = val(*x);
                acc(*x, &mut |g| {
                    for ((o, d), v) in g.iter_mut().zip(grad).zip(xd) {
                        if *v >= 0.0 {
                            *o += d;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xd = val(*x);
                acc(*x, &mut |g| {
                    for ((o, d), v) in g.iter_mut().zip(grad).zip(xd) {
                        *o += if *v >= 0.0 { *d } else { d * slope };
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for ((o, d), yv) in g.iter_mut().zip(grad).zip(y) {
                        *o += d * (1.0 - yv * yv);
                    }
                });
            }
            Op::Softmax(x) => {
                let (_, cols) = rows_cols(&node.value);
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for ((go, gy), yr) in g.chunks_mut(cols).zip(grad.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, d), yv) in go.iter_mut().zip(gy).zip(yr) {
                            *o += yv * (d - dot);
                        }
                    }
                });
            }
            Op::OuterSum(u, v) => {
                let n = node.value.shape()[1];
                acc(*u, &mut |g| {
                    for (o, row) in g.iter_mut().zip(grad.chunks(n)) {
                        *o += row.iter().sum::<f64>();
                    }
                });
                acc(*v, &mut |g| {
                    for row in grad.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let slice = &grad[offset..offset + len];
                        acc(p, &mut |g| g.iter_mut().zip(slice).for_each(|(o, d)| *o += d));
                        offset += len;
                    }
                } else {
                    let (rows, total) = node.value.dims2().unwrap();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).shape()[1];
                        acc(p, &mut |g| {
                            for r in 0..rows {
                                let src = &grad[r * total + col..r * total + col + w];
                                g[r * w..(r + 1) * w]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(o, d)| *o += d);
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::SumAxis(x, axis) => {
                let n = self.value(*x).shape()[1];
                acc(*x, &mut |g| {
                    for (r, row) in g.chunks_mut(n).enumerate() {
                        for (c, o) in row.iter_mut().enumerate() {
                            *o += if *axis == 0 { grad[c] } else { grad[r] };
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let d = grad[0];
                acc(*x, &mut |g| g.iter_mut().for_each(|o| *o += d));
            }
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).dims2().unwrap();
                acc(*x, &mut |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += grad[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |g| g.iter_mut().zip(grad).for_each(|(o, d)| *o += d));
            }
            Op::Narrow(x, start) => {
                let t = self.value(*x);
                let inner = t.len() / t.shape()[0];
                let begin = start * inner;
                acc(*x, &mut |g| {
                    g[begin..begin + grad.len()]
                        .iter_mut()
                        .zip(grad)
                        .for_each(|(o, d)| *o += d);
                });
            }
            Op::Conv1d {
                input,
                kernel,
                dilation,
            } => {
                let (c_in, len) = self.value(*input).dims2().unwrap();
                let &[c_out, _, width] = self.value(*kernel).shape() else {
                    unreachable!()
                };
                let (x, k) = (val(*input), val(*kernel));
                let taps = |s: usize| (0..width).take_while(move |i| dilation * i <= s);
                acc(*input, &mut |gx| {
                    for o in 0..c_out {
                        for s in 0..len {
                            let d = grad[o * len + s];
                            for c in 0..c_in {
                                let base = (o * c_in + c) * width;
                                for i in taps(s) {
                                    gx[c * len + s - dilation * i] += k[base + i] * d;
                                }
                            }
                        }
                    }
                });
                acc(*kernel, &mut |gk| {
                    for o in 0..c_out {
                        for s in 0..len {
                            let d = grad[o * len + s];
                            for c in 0..c_in {
                                let base = (o * c_in + c) * width;
                                for i in taps(s) {
                                    gk[base + i] += x[c * len + s - dilation * i] * d;
                                }
                            }
                        }
                    }
                });
            }
            Op::WeightNorm { direction, gain } => {
                let tv = self.value(*direction);
                let inner = tv.len() / tv.shape()[0];
                let (vd, gd) = (tv.data(), val(*gain));
                let norms: Vec<f64> = vd
                    .chunks(inner)
                    .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                let dots: Vec<f64> = vd
                    .chunks(inner)
                    .zip(grad.chunks(inner))
                    .map(|(r, d)| r.iter().zip(d).map(|(a, b)| a * b).sum())
                    .collect();
                acc(*gain, &mut |gg| {
                    for (o, out) in gg.iter_mut().enumerate() {
                        if norms[o] > 0.0 {
                            *out += dots[o] / norms[o];
                        }
                    }
                });
                acc(*direction, &mut |gv| {
                    for (o, (out, (v, d))) in gv
                        .chunks_mut(inner)
                        .zip(vd.chunks(inner).zip(grad.chunks(inner)))
                        .enumerate()
                    {
                        let n = norms[o];
                        if n == 0.0 {
                            continue;
                        }
                        let scale = gd[o] / n;
                        let proj = dots[o] / (n * n);
                        for ((ov, vv), dv) in out.iter_mut().zip(v).zip(d) {
                            *ov += scale * (dv - vv * proj);
                        }
                    }
                });
            }
            Op::Mse(p, t) => {
                let (pd, td) = (val(*p), val(*t));
                let factor = 2.0 * grad[0] / pd.len() as f64;
                acc(*p, &mut |g| {
                    for ((o, a), b) in g.iter_mut().zip(pd).zip(td) {
                        *o += factor * (a - b);
                    }
                });
                acc(*t, &mut |g| {
                    for ((o, a), b) in g.iter_mut().zip(pd).zip(td) {
                        *o -= factor * (a - b);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = g.matmul(i, m).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1.0, 2.0]]));
        let b = g.constant(t(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).item(), 11.0);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0; 3]).unwrap());
        let s = g.softmax(z).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.constant(Tensor::vector(vec![1000.0, 1000.0]).unwrap());
        let s = g.softmax(big).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.softmax(x).unwrap();
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let total: f64 = exps.iter().sum();
        for (got, e) in g.value(s).data().iter().zip(&exps) {
            assert!((got - e / total).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_empty_and_scalar() {
        assert!(Tensor::vector(vec![]).is_err());
        let mut g = Graph::new();
        let s = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.softmax(s), Err(Error::Dimension(_))));
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![2.0, -2.0, 0.0]).unwrap());
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data(), &[2.0, -0.4, 0.0]);
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        // The kink at zero takes the positive branch.
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.2, 1.0]);
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
        let y1 = g.conv1d_causal(x, k, 1).unwrap();
        assert_eq!(g.value(y1).data(), &[1.0, 3.0, 5.0, 7.0]);
        let y2 = g.conv1d_causal(x, k, 2).unwrap();
        assert_eq!(g.value(y2).data(), &[1.0, 2.0, 4.0, 6.0]);
        let unit = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        for d in 1..5 {
            let y = g.conv1d_causal(x, unit, d).unwrap();
            assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        }
        assert!(matches!(g.conv1d_causal(x, k, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let l = g.mse(a, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let p = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let q = g.constant(Tensor::vector(vec![2.0, 0.0]).unwrap());
        let l = g.mse(p, q).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let r = g.constant(Tensor::vector(vec![2.0]).unwrap());
        assert!(matches!(g.mse(p, r), Err(Error::Dimension(_))));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.param(Tensor::uniform(&[4, 6], 1.0, &mut rng));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_masks_whole_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[16, 5], 1.0));
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let out = g.value(y);
        let mut dropped = 0;
        for row in out.data().chunks(5) {
            assert!(row.iter().all(|v| *v == row[0]));
            assert!(row[0] == 0.0 || row[0] == 2.0);
            dropped += (row[0] == 0.0) as usize;
        }
        assert!(dropped > 0 && dropped < 16);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let loss = g.sum_all(z);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let p = g.param(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let y = g.mul(c, p).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 1.0]).unwrap());
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn weight_norm_direction_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let v = g.param(Tensor::uniform(&[3, 2, 2], 1.0, &mut rng));
        let gain = g.param(Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap());
        let w = g.weight_norm(v, gain).unwrap();
        for row in g.value(w).data().chunks(4) {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_axis1_layout() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1.0], &[2.0]]));
        let b = g.constant(t(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let d = g.concat(&[b, b], 0).unwrap();
        assert_eq!(g.value(d).shape(), &[4, 2]);
    }
}
