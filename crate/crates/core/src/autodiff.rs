//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Tape`] evaluates eagerly: every operation computes its value
//! immediately and appends a node that remembers its inputs. Calling
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients.
//! Nodes whose inputs are all constants are marked as not requiring a
//! gradient and are skipped on the way back, which matters for the first
//! encoder layer where the input is a (large) data matrix.
//!
//! Batches are rows: an `n x m` value is `n` samples of width `m`.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};

use crate::error::AutodiffError;
use crate::fd::SeriesOperator;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a * b` or `a * b^T`.
    MatMul { a: Var, b: Var, transpose_b: bool },
    /// `x + row`, broadcasting a `1 x p` row over all rows of `x`.
    AddRow { x: Var, row: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Arc<Array1<f64>>),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather { x: Var, rows: Arc<Vec<usize>> },
    RowOperator { x: Var, op: Arc<SeriesOperator> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Array2<f64>,
    requires_grad: bool,
}

/// Computation record: values and the operations that produced them.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the output does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled to `shape` when absent.
    pub fn wrt_or_zeros(&self, var: Var, shape: (usize, usize)) -> Array2<f64> {
        self.wrt(var)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn dims(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
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

    fn push(&mut self, op: Op, value: Array2<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(AutodiffError::shape("matmul", dims(va), dims(vb)));
        }
        let value = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                transpose_b: false,
            },
            value,
            rg,
        ))
    }

    /// `a * b^T`; with `b` stored as `out x in` this is a dense layer on row batches.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(AutodiffError::shape("matmul_t", dims(va), dims(vb)));
        }
        let value = va.dot(&vb.t());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                transpose_b: true,
            },
            value,
            rg,
        ))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, AutodiffError> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != vx.ncols() {
            return Err(AutodiffError::shape("add_row", dims(vx), dims(vr)));
        }
        let value = vx + vr;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Op::AddRow { x, row }, value, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    /// Sum of several same-shaped nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var, AutodiffError> {
        let (&first, rest) = terms
            .split_first()
            .ok_or(AutodiffError::shape("add_all", (0, 0), (0, 0)))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        let rg = self.rg(x);
        self.push(Op::Scale(x, c), value, rg)
    }

    /// Multiplies row `i` of `x` by `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Arc<Array1<f64>>) -> Result<Var, AutodiffError> {
        let vx = self.value(x);
        if factors.len() != vx.nrows() {
            return Err(AutodiffError::shape(
                "scale_rows",
                dims(vx),
                (factors.len(), 1),
            ));
        }
        let value = vx * &factors.view().insert_axis(Axis(1));
        let rg = self.rg(x);
        Ok(self.push(Op::ScaleRows(x, factors), value, rg))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::sin);
        let rg = self.rg(x);
        self.push(Op::Sin(x), value, rg)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::cos);
        let rg = self.rg(x);
        self.push(Op::Cos(x), value, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::abs);
        let rg = self.rg(x);
        self.push(Op::Abs(x), value, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        let rg = self.rg(x);
        self.push(Op::Square(x), value, rg)
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::Sum(x), value, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let vx = self.value(x);
        if start > end || end > vx.nrows() {
            return Err(AutodiffError::shape("slice_rows", dims(vx), (start, end)));
        }
        let value = vx.slice(s![start..end, ..]).to_owned();
        let rg = self.rg(x);
        Ok(self.push(Op::SliceRows { x, start }, value, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let vx = self.value(x);
        if start > end || end > vx.ncols() {
            return Err(AutodiffError::shape("slice_cols", dims(vx), (start, end)));
        }
        let value = vx.slice(s![.., start..end]).to_owned();
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x, start }, value, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts
            .first()
            .ok_or(AutodiffError::shape("concat_rows", (0, 0), (0, 0)))?;
        let ncols = self.shape(*first).1;
        for &p in parts {
            if self.shape(p).1 != ncols {
                return Err(AutodiffError::shape(
                    "concat_rows",
                    self.shape(*first),
                    self.shape(p),
                ));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views)
            .map_err(|_| AutodiffError::shape("concat_rows", (0, ncols), (0, ncols)))?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts
            .first()
            .ok_or(AutodiffError::shape("concat_cols", (0, 0), (0, 0)))?;
        let nrows = self.shape(*first).0;
        for &p in parts {
            if self.shape(p).0 != nrows {
                return Err(AutodiffError::shape(
                    "concat_cols",
                    self.shape(*first),
                    self.shape(p),
                ));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views)
            .map_err(|_| AutodiffError::shape("concat_cols", (nrows, 0), (nrows, 0)))?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, rg))
    }

    /// Selects rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: Arc<Vec<usize>>) -> Result<Var, AutodiffError> {
        let vx = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= vx.nrows()) {
            return Err(AutodiffError::shape("gather_rows", dims(vx), (bad, 0)));
        }
        let value = vx.select(Axis(0), &rows);
        let rg = self.rg(x);
        Ok(self.push(Op::Gather { x, rows }, value, rg))
    }

    /// Applies a banded operator along the rows (time axis) of `x`.
    pub fn row_operator(&mut self, x: Var, op: Arc<SeriesOperator>) -> Result<Var, AutodiffError> {
        let vx = self.value(x);
        if op.len() != vx.nrows() {
            return Err(AutodiffError::shape(
                "row_operator",
                dims(vx),
                (op.len(), vx.ncols()),
            ));
        }
        let value = op.apply(vx.view());
        let rg = self.rg(x);
        Ok(self.push(Op::RowOperator { x, op }, value, rg))
    }

    /// Gradients of the scalar node `output` with respect to every leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        self.backward_with_seed(output, Array2::from_elem((1, 1), 1.0))
    }

    /// Vector-Jacobian product: `seed` has the shape of `output`.
    pub fn backward_with_seed(
        &self,
        output: Var,
        seed: Array2<f64>,
    ) -> Result<Gradients, AutodiffError> {
        let out_shape = self.shape(output);
        if seed.dim() != out_shape {
            return Err(AutodiffError::shape("backward", out_shape, seed.dim()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op,
        out_value: &Array2<f64>,
        g: Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if *transpose_b {
                    if self.rg(*a) {
                        acc(*a, g.dot(vb));
                    }
                    if self.rg(*b) {
                        acc(*b, g.t().dot(va));
                    }
                } else {
                    if self.rg(*a) {
                        acc(*a, g.dot(&vb.t()));
                    }
                    if self.rg(*b) {
                        acc(*b, va.t().dot(&g));
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.rg(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                acc(*x, g);
            }
            Op::Add(a, b) => {
                if self.rg(*b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    acc(*b, -&g);
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, &g * self.value(*b));
                }
                if self.rg(*b) {
                    acc(*b, &g * self.value(*a));
                }
            }
            Op::Scale(x, c) => acc(*x, g * *c),
            Op::ScaleRows(x, f) => acc(*x, g * f.view().insert_axis(Axis(1))),
            Op::Sin(x) => {
                let mut d = g;
                d.zip_mut_with(self.value(*x), |gi, xi| *gi *= xi.cos());
                acc(*x, d);
            }
            Op::Cos(x) => {
                let mut d = g;
                d.zip_mut_with(self.value(*x), |gi, xi| *gi *= -xi.sin());
                acc(*x, d);
            }
            Op::Abs(x) => {
                // Subgradient 0 at the kink.
                let mut d = g;
                d.zip_mut_with(self.value(*x), |gi, xi| {
                    *gi *= if *xi > 0.0 {
                        1.0
                    } else if *xi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(*x, d);
            }
            Op::Square(x) => {
                let mut d = g;
                d.zip_mut_with(self.value(*x), |gi, xi| *gi *= 2.0 * xi);
                acc(*x, d);
            }
            Op::Sum(x) => {
                let shape = self.shape(*x);
                acc(*x, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::SliceRows { x, start } => {
                let mut d = Array2::zeros(self.shape(*x));
                d.slice_mut(s![*start..*start + out_value.nrows(), ..])
                    .assign(&g);
                acc(*x, d);
            }
            Op::SliceCols { x, start } => {
                let mut d = Array2::zeros(self.shape(*x));
                d.slice_mut(s![.., *start..*start + out_value.ncols()])
                    .assign(&g);
                acc(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p).0;
                    if self.rg(*p) {
                        acc(*p, g.slice(s![offset..offset + n, ..]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p).1;
                    if self.rg(*p) {
                        acc(*p, g.slice(s![.., offset..offset + n]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::Gather { x, rows } => {
                let mut d = Array2::zeros(self.shape(*x));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(i);
                }
                acc(*x, d);
            }
            Op::RowOperator { x, op } => {
                let n = self.shape(*x).0;
                acc(*x, op.apply_transpose(g.view(), n));
            }
        }
    }
}

/// A map that can be evaluated together with its directional derivative
/// (forward-mode dual numbers over row batches).
pub trait DualMap {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Returns `(f(x), Df(x) t)` row-wise.
    fn eval_dual(&self, x: &Array2<f64>, t: &Array2<f64>) -> (Array2<f64>, Array2<f64>);
}

/// Jacobian-vector product `[Df(point)](tangent)`.
pub fn jvp<F: DualMap + ?Sized>(
    f: &F,
    point: &Array1<f64>,
    tangent: &Array1<f64>,
) -> Result<Array1<f64>, AutodiffError> {
    if point.len() != f.input_dim() || tangent.len() != point.len() {
        return Err(AutodiffError::shape(
            "jvp",
            (1, point.len()),
            (1, tangent.len()),
        ));
    }
    let x = point.view().insert_axis(Axis(0)).to_owned();
    let t = tangent.view().insert_axis(Axis(0)).to_owned();
    let (_, dt) = f.eval_dual(&x, &t);
    Ok(dt.row(0).to_owned())
}
