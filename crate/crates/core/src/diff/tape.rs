//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse order exactly once.

use rand::Rng;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Concat(Vec<Var>, usize),
    Slice {
        src: Var,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    Transpose(Var),
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, usize),
    Sum(Var),
    Mean(Var),
    L2Normalize(Var, usize, Vec<f64>),
    Dropout(Var, Vec<f64>),
    BceWithLogits(Var, Vec<f64>),
    MaskedLogSumExp(Var, Vec<bool>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, zero if `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

/// Iteration lanes of a reduction along `axis`: (start, stride, len, count).
fn lanes(t: &Tensor, axis: usize, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let (r, c) = t.rows_cols();
    match (t.shape().len(), axis) {
        (0 | 1, 0) | (2, 1) => Ok((c, 1, c, r)),
        (2, 0) => Ok((1, c, r, c)),
        _ => Err(Error::dim(
            op,
            format!("axis {axis} invalid for shape {:?}", t.shape()),
        )),
    }
}

#[inline]
fn lane_start(lane_step: usize, l: usize) -> usize {
    l * lane_step
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Parameters are leaves with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let values = src.values().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), values).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// Stop-gradient: same value, never propagates gradient to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (r, n, c) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; r * c];
        matmul_into(ta.values(), tb.values(), &mut out, r, n, c);
        let value = Tensor::matrix(r, c, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let values = ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), values)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (&self.nodes[m.0].value, &self.nodes[row.0].value);
        let (r, c) = tm.rows_cols();
        if tr.len() != c || tr.rows() != 1 {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + row {:?}", tm.shape(), tr.shape()),
            ));
        }
        let mut out = tm.values().to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(tr.values()) {
                *o += b;
            }
        }
        let value = Tensor::new(tm.shape().to_vec(), out)?;
        let rg = self.rg(&[m, row]);
        Ok(self.push(value, Op::AddRow(m, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.shape() != c.shape() {
            return Err(Error::dim(
                "mul_const",
                format!("{:?} vs {:?}", tx.shape(), c.shape()),
            ));
        }
        let values = tx.values().iter().zip(c.values()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(tx.shape().to_vec(), values)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MulConst(x, c.values().to_vec()), rg))
    }

    /// Concatenates rank-2 tensors along `axis` (0 stacks rows, 1 joins columns).
    /// Rank-1 tensors concatenate along their single axis.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let rank = self.shape(*first).len();
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| self.shape(*p).to_vec()).collect();
        let bad = || Error::dim("concat", format!("axis {axis} over shapes {shapes:?}"));
        let value = match (rank, axis) {
            (1, 0) => {
                if shapes.iter().any(|s| s.len() != 1) {
                    return Err(bad());
                }
                let mut out = Vec::new();
                for p in parts {
                    out.extend_from_slice(self.nodes[p.0].value.values());
                }
                Tensor::vector(out)
            }
            (2, 0) => {
                let c = shapes[0][1];
                if shapes.iter().any(|s| s.len() != 2 || s[1] != c) {
                    return Err(bad());
                }
                let mut out = Vec::new();
                for p in parts {
                    out.extend_from_slice(self.nodes[p.0].value.values());
                }
                let r = out.len() / c.max(1);
                Tensor::matrix(r, c, out)?
            }
            (2, 1) => {
                let r = shapes[0][0];
                if shapes.iter().any(|s| s.len() != 2 || s[0] != r) {
                    return Err(bad());
                }
                let c: usize = shapes.iter().map(|s| s[1]).sum();
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    for p in parts {
                        out.extend_from_slice(self.nodes[p.0].value.row(i));
                    }
                }
                Tensor::matrix(r, c, out)?
            }
            _ => return Err(bad()),
        };
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Sub-matrix `rows.0..rows.1` x `cols.0..cols.1` of a rank-2 tensor.
    pub fn slice(&mut self, x: Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = t.rows_cols();
        if t.shape().len() != 2 || rows.0 >= rows.1 || cols.0 >= cols.1 || rows.1 > r || cols.1 > c {
            return Err(Error::dim(
                "slice",
                format!("{:?}[{}..{}, {}..{}]", t.shape(), rows.0, rows.1, cols.0, cols.1),
            ));
        }
        let mut out = Vec::with_capacity((rows.1 - rows.0) * (cols.1 - cols.0));
        for i in rows.0..rows.1 {
            out.extend_from_slice(&t.values()[i * c + cols.0..i * c + cols.1]);
        }
        let value = Tensor::matrix(rows.1 - rows.0, cols.1 - cols.0, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { src: x, rows, cols }, rg))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let c = self.nodes[x.0].value.cols();
        self.slice(x, (i, i + 1), (0, c))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 2 {
            return Err(Error::dim("transpose", format!("{:?}", t.shape())));
        }
        let value = t.transpose();
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.values().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (step, stride, len, count) = lanes(t, axis, "softmax")?;
        let mut out = t.values().to_vec();
        for l in 0..count {
            let s = lane_start(step, l);
            let idx = |q: usize| s + q * stride;
            let max = (0..len).map(|q| out[idx(q)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for q in 0..len {
                let e = (out[idx(q)] - max).exp();
                out[idx(q)] = e;
                z += e;
            }
            for q in 0..len {
                out[idx(q)] /= z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.values().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.values().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Scales each lane along `axis` to unit L2 norm. Zero lanes stay zero.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (step, stride, len, count) = lanes(t, axis, "l2_normalize")?;
        let mut out = t.values().to_vec();
        let mut norms = Vec::with_capacity(count);
        for l in 0..count {
            let s = lane_start(step, l);
            let norm = (0..len).map(|q| out[s + q * stride].powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                log::warn!("l2_normalize: zero vector in lane {l}, left as zero");
            } else {
                for q in 0..len {
                    out[s + q * stride] /= norm;
                }
            }
            norms.push(norm);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::L2Normalize(x, axis, norms), rg))
    }

    /// Inverted dropout. Identity (no new node) when `train` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let t = &self.nodes[x.0].value;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let values = t.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), values)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout(x, mask), rg))
    }

    /// Mean binary cross-entropy between `logits` and 0/1 `targets` of the same shape.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.len() != targets.len() {
            return Err(Error::dim(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", t.shape(), targets.shape()),
            ));
        }
        let n = t.len().max(1) as f64;
        let total: f64 = t
            .values()
            .iter()
            .zip(targets.values())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits(logits, targets.values().to_vec()),
            rg,
        ))
    }

    /// Row-wise `log sum_{j : mask[i][j]} exp(x[i][j])` of a rank-2 tensor, as an `r x 1` column.
    /// Rows with an empty mask yield 0 and receive no gradient.
    pub fn masked_logsumexp(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = t.rows_cols();
        if t.shape().len() != 2 || mask.len() != r * c {
            return Err(Error::dim(
                "masked_logsumexp",
                format!("{:?} with mask of {} entries", t.shape(), mask.len()),
            ));
        }
        let mut out = vec![0.0; r];
        for (i, o) in out.iter_mut().enumerate() {
            let row = t.row(i);
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let s: f64 = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(v, _)| (v - max).exp())
                .sum();
            *o = max + s.ln();
        }
        let value = Tensor::matrix(r, 1, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaskedLogSumExp(x, mask.to_vec()), rg))
    }

    /// Reverse-mode accumulation from the scalar `loss`. A tape can be consumed once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward already run on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (r, n, c) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |s| matmul_nt_into(g, tb.values(), s, r, n, c));
                acc(*b, &mut |s| matmul_tn_into(ta.values(), g, s, r, n, c));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.values(), nodes[b.0].value.values());
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::AddRow(m, row) => {
                let c = out.cols();
                acc(*m, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*row, &mut |s| {
                    for grow in g.chunks(c) {
                        s.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Scale(x, k) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k)),
            Op::AddScalar(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::MulConst(x, c) => acc(*x, &mut |s| {
                for ((s, g), c) in s.iter_mut().zip(g).zip(c) {
                    *s += g * c;
                }
            }),
            Op::Concat(parts, axis) => {
                if out.shape().len() == 2 && *axis == 1 {
                    let (r, c) = out.rows_cols();
                    let mut offset = 0;
                    for p in parts {
                        let pc = nodes[p.0].value.cols();
                        acc(*p, &mut |s| {
                            for i in 0..r {
                                for j in 0..pc {
                                    s[i * pc + j] += g[i * c + offset + j];
                                }
                            }
                        });
                        offset += pc;
                    }
                } else {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        acc(*p, &mut |s| {
                            s.iter_mut()
                                .zip(&g[offset..offset + len])
                                .for_each(|(s, g)| *s += g)
                        });
                        offset += len;
                    }
                }
            }
            Op::Slice { src, rows, cols } => {
                let c = nodes[src.0].value.cols();
                let w = cols.1 - cols.0;
                acc(*src, &mut |s| {
                    for (k, i) in (rows.0..rows.1).enumerate() {
                        for j in 0..w {
                            s[i * c + cols.0 + j] += g[k * w + j];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = out.rows_cols();
                acc(*x, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Tanh(x) => acc(*x, &mut |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out.values()) {
                    *s += g * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out.values()) {
                    *s += g * y * (1.0 - y);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out.values()) {
                    *s += g * y;
                }
            }),
            Op::Log(x) => {
                let xv = nodes[x.0].value.values();
                acc(*x, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(xv) {
                        *s += g / x;
                    }
                })
            }
            Op::Softmax(x, axis) => {
                let (step, stride, len, count) = lanes(out, *axis, "softmax").expect("checked");
                let y = out.values();
                acc(*x, &mut |s| {
                    for l in 0..count {
                        let st = lane_start(step, l);
                        let dot: f64 = (0..len).map(|q| y[st + q * stride] * g[st + q * stride]).sum();
                        for q in 0..len {
                            let i = st + q * stride;
                            s[i] += y[i] * (g[i] - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len().max(1) as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n))
            }
            Op::L2Normalize(x, axis, norms) => {
                let (step, stride, len, count) = lanes(out, *axis, "l2_normalize").expect("checked");
                let y = out.values();
                acc(*x, &mut |s| {
                    for (l, &norm) in norms.iter().enumerate().take(count) {
                        if norm == 0.0 {
                            continue;
                        }
                        let st = lane_start(step, l);
                        let dot: f64 = (0..len).map(|q| y[st + q * stride] * g[st + q * stride]).sum();
                        for q in 0..len {
                            let i = st + q * stride;
                            s[i] += (g[i] - y[i] * dot) / norm;
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => acc(*x, &mut |s| {
                for ((s, g), m) in s.iter_mut().zip(g).zip(mask) {
                    *s += g * m;
                }
            }),
            Op::BceWithLogits(x, targets) => {
                let xv = nodes[x.0].value.values();
                let n = xv.len().max(1) as f64;
                acc(*x, &mut |s| {
                    for ((s, x), y) in s.iter_mut().zip(xv).zip(targets) {
                        *s += g[0] * (sigmoid(*x) - y) / n;
                    }
                })
            }
            Op::MaskedLogSumExp(x, mask) => {
                let tx = &nodes[x.0].value;
                let (r, c) = tx.rows_cols();
                acc(*x, &mut |s| {
                    for i in 0..r {
                        let m = &mask[i * c..(i + 1) * c];
                        if !m.iter().any(|&k| k) {
                            continue;
                        }
                        let lse = out.values()[i];
                        for j in 0..c {
                            if m[j] {
                                s[i * c + j] += g[i] * (tx.get(i, j) - lse).exp();
                            }
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let y = tape.tanh(x);
        assert!(tape.value(y).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_by_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = tape.constant(Tensor::identity(2));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).values(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let a = tape.sum(x);
        let b = tape.sum(x);
        let l = tape.add(a, b).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).values(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_twice_is_state_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        // d/dx of x * stop(x) = stop(x)
        assert_eq!(g.wrt(x).values(), &[1.0, 2.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_rate_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let n = 100_000;
        let p = 0.1;
        let x = tape.constant(Tensor::full(&[n], 1.0));
        let y = tape.dropout(x, p, true, &mut rng).unwrap();
        let vals = tape.value(y).values();
        let zeros = vals.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((zeros - p).abs() < 0.01, "zero fraction {zeros}");
        let keep = 1.0 / (1.0 - p);
        assert!(vals.iter().all(|&v| v == 0.0 || (v - keep).abs() < 1e-12));
    }

    #[test]
    fn l2_normalize_rows_and_zero_vector() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![3.0, 4.0], vec![0.0, 0.0]]));
        let y = tape.l2_normalize(x, 1).unwrap();
        assert_eq!(tape.value(y).values(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn masked_logsumexp_empty_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]), true);
        let y = tape.masked_logsumexp(x, &[true, true, false, false]).unwrap();
        let v = tape.value(y).values().to_vec();
        assert!((v[0] - (1f64.exp() + 2f64.exp()).ln()).abs() < 1e-12);
        assert_eq!(v[1], 0.0);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(&g.wrt(x).values()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn concat_columns_then_slice_back() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0], vec![2.0]]));
        let b = tape.constant(t(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).values(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.slice(c, (1, 2), (1, 3)).unwrap();
        assert_eq!(tape.value(s).values(), &[5.0, 6.0]);
        assert!(tape.concat(&[a, b], 0).is_err());
    }
}
