//! Reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node to the [`Tape`] holding its forward value.
//! Nodes are only ever appended, so index order is a topological order and
//! [`Tape::backward`] walks it in reverse exactly once.

use super::matrix::Matrix;
use super::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMax(Var, f64),
    RowSoftmax(Var),
    Relu(Var),
    Square(Var),
    Exp(Var),
    Abs(Var),
    Sqrt(Var),
    MeanRows(Var),
    Sum(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    RowNormalize(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Test hook: when set, the relu backward rule passes gradients through
/// unchanged. Used to show that the finite-difference check catches a broken
/// rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum GradientRules {
    #[default]
    Exact,
    CorruptRelu,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Matrix>>>,
    rules: GradientRules,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rules(rules: GradientRules) -> Self {
        Tape {
            rules,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a parameter on the tape. Its gradient is later collected by
    /// [`ParameterStore::accumulate_gradients`].
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: store.value(id).clone(),
            param: Some(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_transposed(self.value(b))?;
        Ok(self.push(Op::MatMulT(a, b), value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), value, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), value, &[a])
    }

    /// Elementwise `min(x, max)`.
    pub fn clamp_max(&mut self, a: Var, max: f64) -> Var {
        let value = self.value(a).map(|x| x.min(max));
        self.push(Op::ClampMax(a, max), value, &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        self.push(Op::RowSoftmax(a), value, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value, &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), value, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), value, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), value, &[a])
    }

    /// Column-wise mean over rows, giving a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (rows, cols) = m.shape();
        let mut out = Matrix::zeros(1, cols);
        for i in 0..rows {
            for (o, x) in out.data_mut().iter_mut().zip(m.row(i)) {
                *o += x;
            }
        }
        if rows > 0 {
            for o in out.data_mut() {
                *o /= rows as f64;
            }
        }
        self.push(Op::MeanRows(a), out, &[a])
    }

    /// Sum of all entries as a `1 x 1` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let m = self.value(a);
        if start + width > m.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: m.shape(),
                rhs: (start, width),
            });
        }
        let mut out = Matrix::zeros(m.rows(), width);
        for i in 0..m.rows() {
            out.row_mut(i).copy_from_slice(&m.row(i)[start..start + width]);
        }
        Ok(self.push(Op::SliceCols(a, start), out, &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let m = self.value(a);
        if start + count > m.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: m.shape(),
                rhs: (start, count),
            });
        }
        let cols = m.cols();
        let data = m.data()[start * cols..(start + count) * cols].to_vec();
        let out = Matrix::from_vec(count, cols, data)?;
        Ok(self.push(Op::SliceRows(a, start), out, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape(),
                    rhs: self.value(p).shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, parts))
    }

    /// Scales every row to unit Euclidean norm. All-zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        self.push(Op::RowNormalize(a), value, &[a])
    }

    /// Reverse sweep from a `1 x 1` node. May only run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: shape,
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for (input, g) in self.local_gradients(&node.op, &node.value, &upstream)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            // Leaves keep their gradient for collection.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(upstream);
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward sweep with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    pub(crate) fn param_gradients(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        let grads = self.grads.as_deref().unwrap_or(&[]);
        self.nodes
            .iter()
            .zip(grads)
            .filter_map(|(node, g)| Some((node.param?, g.as_ref()?)))
    }

    fn local_gradients(&self, op: &Op, out: &Matrix, up: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let grads = match op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, up.matmul_transposed(val(b))?),
                (*b, val(a).transposed_matmul(up)?),
            ],
            Op::MatMulT(a, b) => vec![
                (*a, up.matmul(val(b))?),
                (*b, up.transposed_matmul(val(a))?),
            ],
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::Sub(a, b) => vec![(*a, up.clone()), (*b, up.map(|g| -g))],
            Op::Mul(a, b) => vec![
                (*a, up.zip_map(val(b), "mul", |g, y| g * y)?),
                (*b, up.zip_map(val(a), "mul", |g, x| g * x)?),
            ],
            Op::Scale(a, s) => vec![(*a, up.map(|g| g * s))],
            Op::AddScalar(a) => vec![(*a, up.clone())],
            Op::ClampMax(a, max) => vec![(
                *a,
                up.zip_map(val(a), "clamp_max", |g, x| if x < *max { g } else { 0.0 })?,
            )],
            Op::RowSoftmax(a) => {
                let mut g = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let dy = up.row(i);
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for (j, gij) in g.row_mut(i).iter_mut().enumerate() {
                        *gij = y[j] * (dy[j] - dot);
                    }
                }
                vec![(*a, g)]
            }
            Op::Relu(a) => {
                let g = match self.rules {
                    GradientRules::Exact => {
                        up.zip_map(val(a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?
                    }
                    GradientRules::CorruptRelu => up.clone(),
                };
                vec![(*a, g)]
            }
            Op::Square(a) => vec![(*a, up.zip_map(val(a), "square", |g, x| 2.0 * x * g)?)],
            Op::Exp(a) => vec![(*a, up.zip_map(out, "exp", |g, y| g * y)?)],
            Op::Abs(a) => vec![(*a, up.zip_map(val(a), "abs", |g, x| g * sign(x))?)],
            Op::Sqrt(a) => vec![(
                *a,
                up.zip_map(out, "sqrt", |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 })?,
            )],
            Op::MeanRows(a) => {
                let (rows, cols) = val(a).shape();
                let mut g = Matrix::zeros(rows, cols);
                let inv = if rows > 0 { 1.0 / rows as f64 } else { 0.0 };
                for i in 0..rows {
                    for (gij, u) in g.row_mut(i).iter_mut().zip(up.row(0)) {
                        *gij = u * inv;
                    }
                }
                vec![(*a, g)]
            }
            Op::Sum(a) => {
                let (rows, cols) = val(a).shape();
                vec![(*a, Matrix::filled(rows, cols, up.item()))]
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = val(a).shape();
                let mut g = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    g.row_mut(i)[*start..*start + up.cols()].copy_from_slice(up.row(i));
                }
                vec![(*a, g)]
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = val(a).shape();
                let mut g = Matrix::zeros(rows, cols);
                g.data_mut()[start * cols..(start + up.rows()) * cols].copy_from_slice(up.data());
                vec![(*a, g)]
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let mut out_grads = Vec::with_capacity(parts.len());
                for p in parts {
                    let (rows, cols) = val(p).shape();
                    let mut g = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        g.row_mut(i).copy_from_slice(&up.row(i)[offset..offset + cols]);
                    }
                    offset += cols;
                    out_grads.push((*p, g));
                }
                out_grads
            }
            Op::RowNormalize(a) => {
                let x = val(a);
                let mut g = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let y = out.row(i);
                    let dy = up.row(i);
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for (j, gij) in g.row_mut(i).iter_mut().enumerate() {
                        *gij = (dy[j] - y[j] * dot) / norm;
                    }
                }
                vec![(*a, g)]
            }
        };
        Ok(grads)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
