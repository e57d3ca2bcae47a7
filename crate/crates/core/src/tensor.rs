//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order. [`Graph::backward`] walks that record in reverse and accumulates
//! gradients into the leaves that were created with `requires_grad`.
//! Intermediate adjoints live only for the duration of one backward pass, so
//! calling `backward` twice without [`Graph::zero_grad`] doubles the leaf
//! gradients exactly.
//!
//! Broadcasting is limited to scalar-with-tensor; anything else needs an
//! explicit [`Graph::repeat_rows`] or [`Graph::reshape`].

use std::sync::Arc;

use thiserror::Error;

use crate::mask::AttentionMask;

/// Variance floor inside the square root of [`Graph::std_axis`].
pub const STD_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("{op}: range {start}..{end} out of bounds for extent {extent}")]
    Range {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("attention mask row {row} admits no position")]
    DegenerateMask { row: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeData {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: extents must be positive")
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).unwrap()
    }

    /// Column vector `[n x 1]`.
    pub fn column(values: &[f64]) -> Self {
        Self::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    /// Builds a `[rows x cols]` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::Shape {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Broadcast, Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MeanAxis { input: Var, axis: usize },
    StdAxis { input: Var, axis: usize },
    Max0(Var),
    Abs(Var),
    Softplus(Var),
    Transpose(Var),
    SoftmaxMasked(Var, Arc<[bool]>),
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RepeatRows(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Dynamic computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
}

/// Splits `shape` around `axis` into (outer, extent, inner) counts.
fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
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

/// `c[m x n] += a[m x k] * b[k x n]`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
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

    /// Multiply-accumulate operations performed by `matmul` so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.shape_of(v)
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.tensor(a).rank2("matmul")?;
        let (k2, n) = self.tensor(b).rank2("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        let (na, nb) = (self.tensor(a).numel(), self.tensor(b).numel());
        let (bc, shape) = if sa == sb {
            (Broadcast::Same, sa.to_vec())
        } else if na == 1 {
            (Broadcast::LhsScalar, sb.to_vec())
        } else if nb == 1 {
            (Broadcast::RhsScalar, sa.to_vec())
        } else {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let (x, y) = (self.value(a), self.value(b));
        let n = shape.iter().product::<usize>();
        let f = |l: f64, r: f64| match kind {
            Binary::Add => l + r,
            Binary::Sub => l - r,
            Binary::Mul => l * r,
        };
        let out: Vec<f64> = match bc {
            Broadcast::Same => x.iter().zip(y).map(|(&l, &r)| f(l, r)).collect(),
            Broadcast::LhsScalar => (0..n).map(|i| f(x[0], y[i])).collect(),
            Broadcast::RhsScalar => (0..n).map(|i| f(x[i], y[0])).collect(),
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(kind, bc, a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.tensor(a);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v * c).collect()).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, c), needs)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Mean along `axis`; the reduced axis keeps extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape_of(a).to_vec();
        let (outer, extent, inner) = axis_layout(&shape, axis)?;
        let x = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let inv = 1.0 / extent as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MeanAxis { input: a, axis },
            needs,
        ))
    }

    /// Population standard deviation along `axis`:
    /// `sqrt(mean((x - mean)^2) + STD_EPS)`.
    pub fn std_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape_of(a).to_vec();
        let (outer, extent, inner) = axis_layout(&shape, axis)?;
        let x = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| x[(o * extent + e) * inner + i];
                let mean = (0..extent).map(at).sum::<f64>() / extent as f64;
                let var = (0..extent).map(|e| (at(e) - mean).powi(2)).sum::<f64>() / extent as f64;
                out[o * inner + i] = (var + STD_EPS).sqrt();
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::StdAxis { input: a, axis },
            needs,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.tensor(a);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| f(v)).collect()).unwrap();
        let needs = self.needs(a);
        self.push(out, op, needs)
    }

    /// Rectifier `max(0, x)`; the subgradient at 0 is 0.
    pub fn max0(&mut self, a: Var) -> Var {
        self.unary(a, |v| if v > 0.0 { v } else { 0.0 }, Op::Max0(a))
    }

    /// `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.tensor(a).rank2("transpose")?;
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), needs))
    }

    /// Row-wise softmax over admissible entries. Masked entries are exactly
    /// zero and receive no gradient.
    pub fn softmax_masked(&mut self, logits: Var, mask: &AttentionMask) -> Result<Var> {
        let (r, c) = self.tensor(logits).rank2("softmax_masked")?;
        if r != mask.size() || c != mask.size() {
            return Err(TensorError::Shape {
                op: "softmax_masked",
                lhs: vec![r, c],
                rhs: vec![mask.size(), mask.size()],
            });
        }
        let adm = mask.shared();
        let x = self.value(logits);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let ok = &adm[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(ok)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateMask { row: i });
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for j in 0..c {
                if ok[j] {
                    o[j] = (row[j] - max).exp();
                    total += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::SoftmaxMasked(logits, adm),
            needs,
        ))
    }

    /// Rows `start..end` of a tensor of rank >= 1.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape_of(a).to_vec();
        if start >= end || end > shape[0] {
            return Err(TensorError::Range {
                op: "slice_rows",
                start,
                end,
                extent: shape[0],
            });
        }
        let stride: usize = shape[1..].iter().product();
        let data = self.value(a)[start * stride..end * stride].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::SliceRows { input: a, start },
            needs,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.tensor(a).rank2("slice_cols")?;
        if start >= end || end > c {
            return Err(TensorError::Range {
                op: "slice_cols",
                start,
                end,
                extent: c,
            });
        }
        let x = self.value(a);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![r, w], out)?,
            Op::SliceCols { input: a, start },
            needs,
        ))
    }

    /// Stacks tensors along axis 0; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let tail = self.shape_of(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape_of(p);
            if s[1..] != tail[..] {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.shape_of(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Joins matrices side by side; row counts must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let (r, _) = self.tensor(first).rank2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.tensor(p).rank2("concat_cols")?;
            if rp != r {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape_of(first).to_vec(),
                    rhs: self.shape_of(p).to_vec(),
                });
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Tiles a `[1 x C]` row `n` times into `[n x C]`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, c) = self.tensor(a).rank2("repeat_rows")?;
        if r != 1 || n == 0 {
            return Err(TensorError::Shape {
                op: "repeat_rows",
                lhs: vec![r, c],
                rhs: vec![n],
            });
        }
        let data = self.value(a).repeat(n);
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![n, c], data)?, Op::RepeatRows(a), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let data = self.value(a).to_vec();
        let t = Tensor::new(shape, data)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), needs))
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.tensor(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape.clone()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((idx, g));
            }
        }

        for (idx, g) in leaf_grads {
            let value = &mut self.nodes[idx].value;
            match &mut value.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                None => value.grad = Some(g),
            }
        }
        Ok(())
    }

}

/// Adjoint buffer of `v`, allocated on first use; `None` when `v` needs no gradient.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let n = node.value.numel();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
}

impl Graph {
    /// Pushes the adjoint `g` of node `idx` into its inputs.
    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if let Some(da) = slot(nodes, adj, *a) {
                    // dA = dC * B^T
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &tb.data[p * n..(p + 1) * n];
                            da[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    // dB = A^T * dC
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::Binary(kind, bc, a, b) => {
                let (x, y) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                let xi = |i: usize| if matches!(bc, Broadcast::LhsScalar) { x[0] } else { x[i] };
                let yi = |i: usize| if matches!(bc, Broadcast::RhsScalar) { y[0] } else { y[i] };
                let da_fn = |i: usize| match kind {
                    Binary::Add | Binary::Sub => g[i],
                    Binary::Mul => g[i] * yi(i),
                };
                let db_fn = |i: usize| match kind {
                    Binary::Add => g[i],
                    Binary::Sub => -g[i],
                    Binary::Mul => g[i] * xi(i),
                };
                let scalar_lhs = matches!(bc, Broadcast::LhsScalar);
                let scalar_rhs = matches!(bc, Broadcast::RhsScalar);
                if let Some(da) = slot(nodes, adj, *a) {
                    if scalar_lhs {
                        da[0] += (0..g.len()).map(&da_fn).sum::<f64>();
                    } else {
                        da.iter_mut().enumerate().for_each(|(i, d)| *d += da_fn(i));
                    }
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    if scalar_rhs {
                        db[0] += (0..g.len()).map(&db_fn).sum::<f64>();
                    } else {
                        db.iter_mut().enumerate().for_each(|(i, d)| *d += db_fn(i));
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
            }
            Op::Sum(a) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAxis { input, axis } => {
                let (outer, extent, inner) = axis_layout(&nodes[input.0].value.shape, *axis).unwrap();
                let inv = 1.0 / extent as f64;
                if let Some(da) = slot(nodes, adj, *input) {
                    for o in 0..outer {
                        for e in 0..extent {
                            for i in 0..inner {
                                da[(o * extent + e) * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::StdAxis { input, axis } => {
                let xin = &nodes[input.0].value;
                let (outer, extent, inner) = axis_layout(&xin.shape, *axis).unwrap();
                if let Some(da) = slot(nodes, adj, *input) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |e: usize| (o * extent + e) * inner + i;
                            let mean = (0..extent).map(|e| xin.data[at(e)]).sum::<f64>() / extent as f64;
                            let sd = out.data[o * inner + i];
                            let coef = g[o * inner + i] / (extent as f64 * sd);
                            for e in 0..extent {
                                da[at(e)] += coef * (xin.data[at(e)] - mean);
                            }
                        }
                    }
                }
            }
            Op::Max0(a) => {
                let x = &nodes[a.0].value.data;
                if let Some(da) = slot(nodes, adj, *a) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::Abs(a) => {
                let x = &nodes[a.0].value.data;
                if let Some(da) = slot(nodes, adj, *a) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            da[i] += g[i];
                        } else if x[i] < 0.0 {
                            da[i] -= g[i];
                        }
                    }
                }
            }
            Op::Softplus(a) => {
                let x = &nodes[a.0].value.data;
                if let Some(da) = slot(nodes, adj, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * sigmoid(x[i]);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                if let Some(da) = slot(nodes, adj, *a) {
                    // out is [r x c], input is [c x r]
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::SoftmaxMasked(a, adm) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                let y = &out.data;
                if let Some(da) = slot(nodes, adj, *a) {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            if adm[j] {
                                da[j] += y[j] * (g[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::SliceRows { input, start } => {
                let stride: usize = out.shape[1..].iter().product();
                if let Some(da) = slot(nodes, adj, *input) {
                    let off = start * stride;
                    da[off..off + g.len()].iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::SliceCols { input, start } => {
                let (r, w) = (out.shape[0], out.shape[1]);
                let c = nodes[input.0].value.shape[1];
                if let Some(da) = slot(nodes, adj, *input) {
                    for i in 0..r {
                        for j in 0..w {
                            da[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(dp) = slot(nodes, adj, *p) {
                        dp.iter_mut().zip(&g[off..off + n]).for_each(|(d, gv)| *d += gv);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (out.shape[0], out.shape[1]);
                let mut col = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape[1];
                    if let Some(dp) = slot(nodes, adj, *p) {
                        for i in 0..r {
                            for j in 0..w {
                                dp[i * w + j] += g[i * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::RepeatRows(a) => {
                let c = out.shape[1];
                if let Some(da) = slot(nodes, adj, *a) {
                    for chunk in g.chunks(c) {
                        da.iter_mut().zip(chunk).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
        }
    }
}
