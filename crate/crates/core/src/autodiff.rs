//! Tape-based reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Every value is a `rows x cols` matrix of `f64` (scalars are `1 x 1`).
//! Operations on [`Var`]s are appended to a [`Tape`]; [`Tape::grad`] walks the
//! tape backwards. Vector-Jacobian products are themselves recorded on the
//! tape, so a gradient can be differentiated again (needed when a loss is a
//! function of a coordinate gradient).
//!
//! Broadcasting is explicit: binary element-wise ops require equal shapes and
//! [`Var::broadcast_to`] expands a leading or trailing unit dimension.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};

/// Dense row-major matrix value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn from_rows3(rows: &[[f64; 3]]) -> Self {
        Self {
            rows: rows.len(),
            cols: 3,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn to_rows3(&self) -> Result<Vec<[f64; 3]>> {
        if self.cols != 3 {
            return Err(shape_err(format!("expected n x 3, got {}x{}", self.rows, self.cols)));
        }
        Ok(self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(shape_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Broadcast(usize),
    ReduceTo(usize),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    PadCols { x: usize, start: usize },
    GatherRows { x: usize, idx: Arc<[usize]> },
    ScatterAddRows { x: usize, idx: Arc<[usize]> },
    Exp(usize),
    Sqrt(usize),
    Square(usize),
    Softplus(usize),
    Sigmoid(usize),
    Cos(usize),
    Sin(usize),
    NormRows { x: usize, eps: f64 },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward (and any backward) computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("value", &self.value()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned vars live on this tape and can be differentiated again.
    /// A `wrt` entry that does not influence `output` gets a zero tensor.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let out_val = output.value();
        if out_val.shape() != [1, 1] {
            return Err(Error::NonScalarLoss {
                rows: out_val.rows(),
                cols: out_val.cols(),
            });
        }
        let mut adjoint: Vec<Option<Var<'t>>> = vec![None; output.id + 1];
        if self.requires_grad(output.id) {
            adjoint[output.id] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for id in (0..=output.id).rev() {
            let Some(g) = adjoint[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            for (input, contribution) in self.vjp(&op, id, g)? {
                if !self.requires_grad(input) {
                    continue;
                }
                adjoint[input] = Some(match adjoint[input] {
                    Some(acc) => acc.add(contribution)?,
                    None => contribution,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                adjoint
                    .get(w.id)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| {
                        let v = w.value();
                        self.constant(Tensor::zeros(v.rows(), v.cols()))
                    })
            })
            .collect())
    }

    fn vjp<'t>(&'t self, op: &Op, id: usize, g: Var<'t>) -> Result<Vec<(usize, Var<'t>)>> {
        let var = |i: usize| Var { tape: self, id: i };
        let out = var(id);
        Ok(match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(a, g.mul(var(b))?), (b, g.mul(var(a))?)],
            Op::Div(a, b) => vec![
                (a, g.div(var(b))?),
                (b, g.mul(out)?.div(var(b))?.scale(-1.0)),
            ],
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::Offset(a) => vec![(a, g)],
            Op::Matmul(a, b) => vec![
                (a, g.matmul(var(b).transpose())?),
                (b, var(a).transpose().matmul(g)?),
            ],
            Op::Transpose(a) => vec![(a, g.transpose())],
            Op::Sum(a) => {
                let [r, c] = self.value(a).shape();
                vec![(a, g.broadcast_to(r, c)?)]
            }
            Op::Broadcast(a) => {
                let [r, c] = self.value(a).shape();
                vec![(a, g.reduce_to(r, c)?)]
            }
            Op::ReduceTo(a) => {
                let [r, c] = self.value(a).shape();
                vec![(a, g.broadcast_to(r, c)?)]
            }
            Op::ConcatCols(ref parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).cols();
                    out.push((p, g.slice_cols(start, w)?));
                    start += w;
                }
                out
            }
            Op::SliceCols { x, start } => {
                let total = self.value(x).cols();
                vec![(x, g.pad_cols(start, total)?)]
            }
            Op::PadCols { x, start } => {
                let w = self.value(x).cols();
                vec![(x, g.slice_cols(start, w)?)]
            }
            Op::GatherRows { x, ref idx } => {
                let n = self.value(x).rows();
                vec![(x, g.scatter_add_rows(Arc::clone(idx), n)?)]
            }
            Op::ScatterAddRows { x, ref idx } => vec![(x, g.gather_rows(Arc::clone(idx))?)],
            Op::Exp(a) => vec![(a, g.mul(out)?)],
            Op::Sqrt(a) => vec![(a, g.div(out.scale(2.0))?)],
            Op::Square(a) => vec![(a, g.mul(var(a).scale(2.0))?)],
            Op::Softplus(a) => vec![(a, g.mul(var(a).sigmoid())?)],
            Op::Sigmoid(a) => {
                let slope = out.mul(out.scale(-1.0).offset(1.0))?;
                vec![(a, g.mul(slope)?)]
            }
            Op::Cos(a) => vec![(a, g.mul(var(a).sin())?.scale(-1.0))],
            Op::Sin(a) => vec![(a, g.mul(var(a).cos())?)],
            Op::NormRows { x, eps } => {
                let xv = self.value(x);
                let mask: Vec<f64> = xv
                    .data()
                    .chunks(xv.cols().max(1))
                    .map(|row| {
                        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n > eps {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mask = self.constant(Tensor::new(xv.rows(), 1, mask)?);
                let coef = g.mul(mask)?.div(out)?;
                vec![(x, coef.broadcast_to(xv.rows(), xv.cols())?.mul(var(x))?)]
            }
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value().shape()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.value());
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'t>, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok((a, b))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "add")?;
        Ok(self.binary(other, Op::Add(self.id, other.id), a.zip(&b, |x, y| x + y)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "sub")?;
        Ok(self.binary(other, Op::Sub(self.id, other.id), a.zip(&b, |x, y| x - y)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "mul")?;
        Ok(self.binary(other, Op::Mul(self.id, other.id), a.zip(&b, |x, y| x * y)))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "div")?;
        Ok(self.binary(other, Op::Div(self.id, other.id), a.zip(&b, |x, y| x / y)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |t| t.map(|x| c * x))
    }

    /// Adds a constant to every entry.
    pub fn offset(&self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |t| t.map(|x| x + c))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&other.value())?;
        Ok(self.binary(other, Op::Matmul(self.id, other.id), value))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    /// Sum of all entries, as `1 x 1`.
    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.data().iter().sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Expands unit dimensions to `rows x cols`.
    pub fn broadcast_to(&self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() == [rows, cols] {
            return Ok(*self);
        }
        if !(v.rows() == rows || v.rows() == 1) || !(v.cols() == cols || v.cols() == 1) {
            return Err(shape_err(format!(
                "cannot broadcast {:?} to [{rows}, {cols}]",
                v.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let ri = if v.rows() == 1 { 0 } else { i };
            for j in 0..cols {
                let cj = if v.cols() == 1 { 0 } else { j };
                data.push(v.get(ri, cj));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        Ok(self.tape.push(value, Op::Broadcast(self.id), self.requires_grad()))
    }

    /// Sums over the axes where the target dimension is 1.
    pub fn reduce_to(&self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() == [rows, cols] {
            return Ok(*self);
        }
        if !(rows == v.rows() || rows == 1) || !(cols == v.cols() || cols == 1) {
            return Err(shape_err(format!(
                "cannot reduce {:?} to [{rows}, {cols}]",
                v.shape()
            )));
        }
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..v.rows() {
            let ri = if rows == 1 { 0 } else { i };
            for j in 0..v.cols() {
                let cj = if cols == 1 { 0 } else { j };
                out.data[ri * cols + cj] += v.get(i, j);
            }
        }
        Ok(self.tape.push(out, Op::ReduceTo(self.id), self.requires_grad()))
    }

    /// Row-wise mean, `n x k -> 1 x k`.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let [r, c] = self.shape();
        Ok(self.reduce_to(1, c)?.scale(1.0 / r.max(1) as f64))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let rows = values[0].rows();
        if values.iter().any(|v| v.rows() != rows) {
            return Err(shape_err("concat_cols: row counts differ"));
        }
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for v in &values {
                data.extend_from_slice(&v.data()[i * v.cols()..(i + 1) * v.cols()]);
            }
        }
        let rg = parts.iter().any(Var::requires_grad);
        let op = Op::ConcatCols(parts.iter().map(|p| p.id).collect());
        Ok(tape.push(Tensor::new(rows, cols, data)?, op, rg))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        if start + len > v.cols() {
            return Err(shape_err(format!(
                "slice {start}..{} of {} columns",
                start + len,
                v.cols()
            )));
        }
        let mut data = Vec::with_capacity(v.rows() * len);
        for i in 0..v.rows() {
            data.extend_from_slice(&v.data()[i * v.cols() + start..i * v.cols() + start + len]);
        }
        let value = Tensor::new(v.rows(), len, data)?;
        Ok(self.tape.push(value, Op::SliceCols { x: self.id, start }, self.requires_grad()))
    }

    fn pad_cols(&self, start: usize, total: usize) -> Result<Var<'t>> {
        let v = self.value();
        if start + v.cols() > total {
            return Err(shape_err("pad_cols overflow"));
        }
        let mut out = Tensor::zeros(v.rows(), total);
        for i in 0..v.rows() {
            out.data[i * total + start..i * total + start + v.cols()]
                .copy_from_slice(&v.data()[i * v.cols()..(i + 1) * v.cols()]);
        }
        Ok(self.tape.push(out, Op::PadCols { x: self.id, start }, self.requires_grad()))
    }

    /// Row `k` of the result is row `idx[k]` of `self`.
    pub fn gather_rows(&self, idx: Arc<[usize]>) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(shape_err(format!("gather index {bad} of {} rows", v.rows())));
        }
        let c = v.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(idx.len(), c, data)?;
        Ok(self.tape.push(value, Op::GatherRows { x: self.id, idx }, self.requires_grad()))
    }

    /// Adds row `k` of `self` into row `idx[k]` of an `n`-row zero matrix.
    pub fn scatter_add_rows(&self, idx: Arc<[usize]>, n: usize) -> Result<Var<'t>> {
        let v = self.value();
        if idx.len() != v.rows() {
            return Err(shape_err(format!("{} indices for {} rows", idx.len(), v.rows())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err(format!("scatter index {bad} into {n} rows")));
        }
        let c = v.cols();
        let mut out = Tensor::zeros(n, c);
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..c {
                out.data[i * c + j] += v.data()[k * c + j];
            }
        }
        Ok(self.tape.push(out, Op::ScatterAddRows { x: self.id, idx }, self.requires_grad()))
    }

    /// `x[src[k]] - x[dst[k]]` for every edge `k`.
    pub fn pairwise_diff(&self, src: Arc<[usize]>, dst: Arc<[usize]>) -> Result<Var<'t>> {
        self.gather_rows(src)?.sub(self.gather_rows(dst)?)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), |t| t.map(f64::sqrt))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |t| t.map(|x| x * x))
    }

    /// `ln(1 + e^x)`, the smooth activation used throughout the networks.
    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), |t| t.map(softplus))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |t| t.map(sigmoid))
    }

    pub fn cos(&self) -> Var<'t> {
        self.unary(Op::Cos(self.id), |t| t.map(f64::cos))
    }

    pub fn sin(&self) -> Var<'t> {
        self.unary(Op::Sin(self.id), |t| t.map(f64::sin))
    }

    /// Row norms clamped from below: `n x k -> n x 1`, `max(|x_i|, eps)`.
    pub fn norm_rows(&self, eps: f64) -> Var<'t> {
        self.unary(Op::NormRows { x: self.id, eps }, |t| {
            let c = t.cols().max(1);
            let data = t
                .data()
                .chunks(c)
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps))
                .collect();
            Tensor {
                rows: t.rows(),
                cols: 1,
                data,
            }
        })
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
