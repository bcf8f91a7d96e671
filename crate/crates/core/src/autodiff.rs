//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order: a node can only reference nodes created before it.
//! [`Graph::backward`] walks that record once, in reverse.
//!
//! Tensors are rank 0, 1 or 2. Row-wise operations treat a rank-1 tensor as a
//! single row. There is no broadcasting except [`Graph::add_row_bias`].

use crate::error::{Error, Result};

/// Epsilon inside the RMS normalization square root.
pub const RMS_EPS: f64 = 1e-6;
/// Norms below this are rejected by [`Graph::l2_normalize_rows`].
pub const MIN_NORM: f64 = 1e-12;

/// Dense row-major tensor, optionally carrying an accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|row| row.len() != c) {
            return Err(Error::Dimension {
                op: "from_rows",
                lhs: vec![c],
                rhs: vec![bad.len()],
            });
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the stored gradient, creating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    /// `(rows, cols)` view of a rank ≤ 2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape).expect("tensor rank > 2")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let (_, c) = self.dims2();
        self.values.chunks(c)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [] => Some((1, 1)),
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var),
    RmsNormalizeRows(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Mean(Var, Axis),
    Sum(Var),
    SqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Operation record plus the gradients of the last backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn d2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = &self.node(v).shape;
        dims2(shape).ok_or_else(|| Error::Dimension {
            op,
            lhs: shape.clone(),
            rhs: vec![],
        })
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.node(a).shape.clone(),
            rhs: self.node(b).shape.clone(),
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape, t.values, Op::Leaf, false))
    }

    /// Leaf that receives a gradient during backward.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), Op::Leaf, true)
    }

    /// Leaf whose gradient flag follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            values: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.d2(a, "matmul")?;
        let (k2, n) = self.d2(b, "matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.d2(a, "transpose")?;
        let out = transpose_raw(self.value(a), r, c);
        let rg = self.needs(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs(&[a, b]);
        let shape = self.node(a).shape.clone();
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.d2(x, "add_row_bias")?;
        let (br, bc) = self.d2(bias, "add_row_bias")?;
        if br != 1 || bc != c {
            return Err(self.shape_err("add_row_bias", x, bias));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for i in 0..r {
            out[i * c..(i + 1) * c]
                .iter_mut()
                .zip(b)
                .for_each(|(o, b)| *o += b);
        }
        let rg = self.needs(&[x, bias]);
        let shape = self.node(x).shape.clone();
        Ok(self.push(shape, out, Op::AddRowBias(x, bias), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.needs(&[a]);
        let shape = self.node(a).shape.clone();
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.d2(a, "softmax_rows")?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let rg = self.needs(&[a]);
        let shape = self.node(a).shape.clone();
        Ok(self.push(shape, out, Op::SoftmaxRows(a), rg))
    }

    /// `x / ||x||₂` along the last axis. Rows with norm below [`MIN_NORM`]
    /// are rejected.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.d2(a, "l2_normalize_rows")?;
        let mut out = self.value(a).to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm.is_nan() || norm < MIN_NORM {
                return Err(Error::Numerical(format!(
                    "l2_normalize_rows: row {i} has norm {norm:e}"
                )));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let rg = self.needs(&[a]);
        let shape = self.node(a).shape.clone();
        Ok(self.push(shape, out, Op::L2NormalizeRows(a), rg))
    }

    /// `x / sqrt(mean(x²) + ε)` along the last axis.
    pub fn rms_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.d2(a, "rms_normalize_rows")?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let rms = rms(row);
            row.iter_mut().for_each(|x| *x /= rms);
        }
        let rg = self.needs(&[a]);
        let shape = self.node(a).shape.clone();
        Ok(self.push(shape, out, Op::RmsNormalizeRows(a), rg))
    }

    /// Stacks rank ≤ 2 tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, c) = self.d2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.d2(p, "concat_rows")?;
            if pc != c {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.needs(parts);
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gathers rows (token positions) by index; indices may repeat.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.d2(a, "select_rows")?;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Index {
                    what: "select_rows",
                    index: i,
                    len: r,
                });
            }
            out.extend_from_slice(&self.value(a)[i * c..(i + 1) * c]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(
            vec![indices.len(), c],
            out,
            Op::SelectRows(a, indices.to_vec()),
            rg,
        ))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.select_rows(a, &[i])
    }

    /// One element per row: `out[i] = a[i, cols[i]]`, shape `rows × 1`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.d2(a, "pick")?;
        if cols.len() != r {
            return Err(Error::Dimension {
                op: "pick",
                lhs: self.node(a).shape.clone(),
                rhs: vec![cols.len()],
            });
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::Index {
                    what: "pick",
                    index: j,
                    len: c,
                });
            }
            out.push(self.value(a)[i * c + j]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(vec![r, 1], out, Op::Pick(a, cols.to_vec()), rg))
    }

    /// Mean along `axis`; `Axis::Rows` collapses rows to `1 × cols`,
    /// `Axis::Cols` collapses columns to `rows × 1`.
    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.d2(a, "mean")?;
        let v = self.value(a);
        let (shape, out) = match axis {
            Axis::Rows => {
                let mut out = vec![0.0; c];
                for row in v.chunks(c) {
                    out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
                (vec![1, c], out)
            }
            Axis::Cols => (
                vec![r, 1],
                v.chunks(c).map(|row| row.iter().sum::<f64>() / c as f64).collect(),
            ),
        };
        let rg = self.needs(&[a]);
        Ok(self.push(shape, out, Op::Mean(a, axis), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        let rg = self.needs(&[a]);
        self.push(Vec::new(), vec![total], Op::Sum(a), rg)
    }

    /// `Σ (a − b)²` over all elements of two equal-shape tensors.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_dist", a, b)?;
        let total = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Vec::new(), vec![total], Op::SqDist(a, b), rg))
    }

    /// Populates gradients of `root` for every ancestor that requires one.
    /// Gradients from a previous backward call are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let n = self.node(root);
        if n.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                n.shape
            )));
        }
        let root_needs = n.requires_grad;
        self.grads = vec![None; self.nodes.len()];
        if !root_needs {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        // Intermediate gradients are kept only for leaves.
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        delta(slot);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].shape).unwrap();
                let (_, n) = dims2(&self.nodes[b.0].shape).unwrap();
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(&self.nodes[b.0].value, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.acc(a, |s| add_into(s, &da));
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(&self.nodes[a.0].value, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.acc(b, |s| add_into(s, &db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims2(&self.nodes[a.0].shape).unwrap();
                let da = transpose_raw(g, c, r);
                self.acc(a, |s| add_into(s, &da));
            }
            Op::Add(a, b) => {
                self.acc(a, |s| add_into(s, g));
                self.acc(b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.acc(a, |s| add_into(s, g));
                self.acc(b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.acc(a, |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(&bv) {
                        *s += g * y;
                    }
                });
                self.acc(b, |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(&av) {
                        *s += g * x;
                    }
                });
            }
            Op::AddRowBias(x, bias) => {
                self.acc(x, |s| add_into(s, g));
                let c = self.nodes[bias.0].value.len();
                self.acc(bias, |s| {
                    for row in g.chunks(c) {
                        add_into(s, row);
                    }
                });
            }
            Op::Scale(a, k) => self.acc(a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g)),
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.acc(a, |s| add_into(s, &d));
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y).collect();
                self.acc(a, |s| add_into(s, &d));
            }
            Op::Log(a) => {
                let x = &self.nodes[a.0].value;
                let d: Vec<f64> = g.iter().zip(x).map(|(g, x)| g / x).collect();
                self.acc(a, |s| add_into(s, &d));
            }
            Op::SoftmaxRows(a) => {
                let (_, c) = dims2(&self.nodes[i].shape).unwrap();
                let y = &self.nodes[i].value;
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                self.acc(a, |s| add_into(s, &d));
            }
            Op::L2NormalizeRows(a) => {
                let (_, c) = dims2(&self.nodes[i].shape).unwrap();
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[i].value;
                let mut d = vec![0.0; y.len()];
                for (((dr, yr), gr), xr) in d
                    .chunks_mut(c)
                    .zip(y.chunks(c))
                    .zip(g.chunks(c))
                    .zip(x.chunks(c))
                {
                    let norm = xr.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (g - y * dot) / norm;
                    }
                }
                self.acc(a, |s| add_into(s, &d));
            }
            Op::RmsNormalizeRows(a) => {
                let (_, c) = dims2(&self.nodes[i].shape).unwrap();
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[i].value;
                let mut d = vec![0.0; y.len()];
                for (((dr, yr), gr), xr) in d
                    .chunks_mut(c)
                    .zip(y.chunks(c))
                    .zip(g.chunks(c))
                    .zip(x.chunks(c))
                {
                    let r = rms(xr);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum::<f64>() / c as f64;
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (g - y * dot) / r;
                    }
                }
                self.acc(a, |s| add_into(s, &d));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    let slice = &g[offset..offset + len];
                    self.acc(p, |s| add_into(s, slice));
                    offset += len;
                }
            }
            Op::SelectRows(a, indices) => {
                let (_, c) = dims2(&self.nodes[a.0].shape).unwrap();
                self.acc(a, |s| {
                    for (k, &r) in indices.iter().enumerate() {
                        add_into(&mut s[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Pick(a, cols) => {
                let (_, c) = dims2(&self.nodes[a.0].shape).unwrap();
                self.acc(a, |s| {
                    for (r, &j) in cols.iter().enumerate() {
                        s[r * c + j] += g[r];
                    }
                });
            }
            Op::Mean(a, axis) => {
                let (r, c) = dims2(&self.nodes[a.0].shape).unwrap();
                self.acc(a, |s| match axis {
                    Axis::Rows => {
                        for row in s.chunks_mut(c) {
                            row.iter_mut().zip(g).for_each(|(s, g)| *s += g / r as f64);
                        }
                    }
                    Axis::Cols => {
                        for (row, g) in s.chunks_mut(c).zip(g) {
                            row.iter_mut().for_each(|s| *s += g / c as f64);
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(a, |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::SqDist(a, b) => {
                let diff: Vec<f64> = self.nodes[a.0]
                    .value
                    .iter()
                    .zip(&self.nodes[b.0].value)
                    .map(|(x, y)| 2.0 * g[0] * (x - y))
                    .collect();
                self.acc(a, |s| add_into(s, &diff));
                self.acc(b, |s| s.iter_mut().zip(&diff).for_each(|(s, d)| *s -= d));
            }
        }
    }
}

fn rms(row: &[f64]) -> f64 {
    (row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64 + RMS_EPS).sqrt()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += aip * b);
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Checks analytic gradients of a scalar function of one tensor against
/// central differences. Returns the max over coordinates of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), h)
}

/// [`grad_check`] over several input tensors at once. Coordinates are
/// numbered consecutively across the inputs in order.
pub fn grad_check_many<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p)).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p)).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.scalar(root))
    };

    let mut worst: f64 = 0.0;
    let mut pts = points.to_vec();
    let mut coord = 0;
    for (t, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let x = points[t].values[j];
            pts[t].values[j] = x + h;
            let plus = eval(&pts)?;
            pts[t].values[j] = x - h;
            let minus = eval(&pts)?;
            pts[t].values[j] = x;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFiniteCoordinate { index: coord });
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
            coord += 1;
        }
    }
    Ok(worst)
}
