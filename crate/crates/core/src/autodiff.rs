//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes a new
//! node whose inputs already live in the arena, so index order is a
//! topological order and the reverse pass is a single backwards sweep.
//! Graphs are rebuilt for every training step.
//!
//! All values are two-dimensional. Vectors are `1 × n` rows and scalars are
//! `1 × 1`. Broadcasting in binary ops is limited to scalar-with-array and
//! row-with-matrix.

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    KronRows(Var, Var),
    SoftmaxRows(Var),
    Reshape(Var),
    PoolRows { weights: Var, feats: Var },
    ConcatCols(Var, Var),
    StraightThrough { input: Var, mask: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

fn broadcast_kind(target: (usize, usize), operand: (usize, usize)) -> Option<Broadcast> {
    if target == operand {
        Some(Broadcast::Same)
    } else if operand == (1, 1) {
        Some(Broadcast::Scalar)
    } else if operand.0 == 1 && operand.1 == target.1 {
        Some(Broadcast::Row)
    } else {
        None
    }
}

/// Sums `grad` down to an operand shape produced by [`broadcast_kind`].
fn reduce_to(grad: Tensor, shape: (usize, usize)) -> Tensor {
    if grad.dim() == shape {
        grad
    } else if shape == (1, 1) {
        Array2::from_elem((1, 1), grad.sum())
    } else {
        grad.sum_axis(Axis(0)).insert_axis(Axis(0))
    }
}

/// Arena holding one computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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
        let grad = Array2::zeros(value.raw_dim());
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a `1 × 1` node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
    }

    /// Smallest distance from any ReLU or clamp input to its kink.
    ///
    /// Finite-difference checks are only meaningful when this is larger than
    /// the perturbation reaching those nodes. Exact zeros at a ReLU are
    /// skipped: they come from inactive units upstream and stay zero under
    /// small perturbations.
    pub fn min_kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.iter().filter(|v| **v != 0.0) {
                        best = best.min(v.abs());
                    }
                }
                Op::Clamp { input, lo, hi } => {
                    for &v in self.nodes[input.0].value.iter() {
                        best = best.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                _ => {}
            }
        }
        best
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{m}x{k} cannot multiply {k2}x{n}"),
            ));
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out = if broadcast_kind(sa, sb).is_some() {
            sa
        } else if broadcast_kind(sb, sa).is_some() {
            sb
        } else {
            return Err(Error::dim(
                op,
                format!(
                    "shapes {}x{} and {}x{} do not broadcast",
                    sa.0, sa.1, sb.0, sb.1
                ),
            ));
        };
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Multiplication by a fixed real.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(Error::domain("log", format!("argument {bad} is not positive")));
        }
        let value = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp { input: a, lo, hi }, rg)
    }

    fn check_axis(op: &'static str, axis: Option<usize>) -> Result<()> {
        match axis {
            None | Some(0) | Some(1) => Ok(()),
            Some(ax) => Err(Error::dim(op, format!("axis {ax} is invalid for a 2-D value"))),
        }
    }

    fn reduce_sum(value: &Tensor, axis: Option<usize>) -> Tensor {
        match axis {
            None => Array2::from_elem((1, 1), value.sum()),
            Some(0) => value.sum_axis(Axis(0)).insert_axis(Axis(0)),
            _ => value.sum_axis(Axis(1)).insert_axis(Axis(1)),
        }
    }

    /// Sum over all entries (`None`), over rows (`Some(0)`, giving `1 × n`) or
    /// over columns (`Some(1)`, giving `m × 1`).
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        Self::check_axis("sum", axis)?;
        let value = Self::reduce_sum(self.value(a), axis);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Sum(a, axis), rg))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        Self::check_axis("mean", axis)?;
        let (m, n) = self.shape(a);
        let count = match axis {
            None => m * n,
            Some(0) => m,
            _ => n,
        };
        if count == 0 {
            return Err(Error::dim("mean", "reduction over an empty axis"));
        }
        let value = Self::reduce_sum(self.value(a), axis) / count as f64;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mean(a, axis), rg))
    }

    /// Kronecker product of two row vectors: `out[i*q + j] = a[i] * b[j]`.
    pub fn kron_vec(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.0 != 1 || sb.0 != 1 {
            return Err(Error::dim(
                "kron_vec",
                format!("expected row vectors, got {}x{} and {}x{}", sa.0, sa.1, sb.0, sb.1),
            ));
        }
        self.kron_rows(a, b)
    }

    /// Row-wise Kronecker product: row `r` of the output is `a[r] ⊗ b[r]`.
    pub fn kron_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.shape(a);
        let (n2, q) = self.shape(b);
        if n != n2 {
            return Err(Error::dim(
                "kron_rows",
                format!("row counts differ: {n} vs {n2}"),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut value = Array2::zeros((n, p * q));
        for r in 0..n {
            for i in 0..p {
                let ai = av[[r, i]];
                for j in 0..q {
                    value[[r, i * q + j]] = ai * bv[[r, j]];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::KronRows(a, b), rg))
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.shape(a);
        if n == 0 {
            return Err(Error::EmptyInput("softmax over zero columns".into()));
        }
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if m * n != rows * cols {
            return Err(Error::dim(
                "reshape",
                format!("{m}x{n} cannot become {rows}x{cols}"),
            ));
        }
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("element count checked");
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Weighted pooling of consecutive row groups.
    ///
    /// `weights` is `n × L`, `feats` is `(n·L) × C`; output row `i` is
    /// `Σ_l weights[i, l] · feats[i·L + l]`.
    pub fn pool_rows(&mut self, weights: Var, feats: Var) -> Result<Var> {
        let (n, l) = self.shape(weights);
        let (nl, c) = self.shape(feats);
        if n * l != nl {
            return Err(Error::dim(
                "pool_rows",
                format!("{n}x{l} weights do not match {nl} feature rows"),
            ));
        }
        let w = self.value(weights);
        let f = self.value(feats);
        let mut value = Array2::zeros((n, c));
        for i in 0..n {
            let mut out = value.row_mut(i);
            for loc in 0..l {
                out.scaled_add(w[[i, loc]], &f.row(i * l + loc));
            }
        }
        let rg = self.rg(weights) || self.rg(feats);
        Ok(self.push(value, Op::PoolRows { weights, feats }, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.shape(a);
        let (m2, q) = self.shape(b);
        if m != m2 {
            return Err(Error::dim(
                "concat_cols",
                format!("row counts differ: {m} vs {m2}"),
            ));
        }
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts checked");
        debug_assert_eq!(value.dim(), (m, p + q));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Node whose forward value is `value` and whose backward rule passes the
    /// upstream gradient to `input` multiplied elementwise by `mask`.
    pub fn straight_through(&mut self, input: Var, value: Tensor, mask: Tensor) -> Result<Var> {
        let shape = self.shape(input);
        if value.dim() != shape || mask.dim() != shape {
            return Err(Error::dim(
                "straight_through",
                "value and mask must match the input shape",
            ));
        }
        let rg = self.rg(input);
        Ok(self.push(value, Op::StraightThrough { input, mask }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients are accumulated into every reachable node that requires
    /// them; call [`Graph::zero_grad`] between passes to start fresh.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            self.nodes[idx].grad += &g;
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, g, &mut pending);
        }
        Ok(())
    }

    fn send(&self, pending: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if !self.rg(to) {
            return;
        }
        match &mut pending[to.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, op: &Op, g: Tensor, pending: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(a) {
                    self.send(pending, a, g.dot(&self.value(b).t()));
                }
                if self.rg(b) {
                    self.send(pending, b, self.value(a).t().dot(&g));
                }
            }
            Op::Add(a, b) => {
                if self.rg(a) {
                    self.send(pending, a, reduce_to(g.clone(), self.shape(a)));
                }
                if self.rg(b) {
                    self.send(pending, b, reduce_to(g, self.shape(b)));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    self.send(pending, a, reduce_to(g.clone(), self.shape(a)));
                }
                if self.rg(b) {
                    self.send(pending, b, reduce_to(-g, self.shape(b)));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let ga = &g * self.value(b);
                    self.send(pending, a, reduce_to(ga, self.shape(a)));
                }
                if self.rg(b) {
                    let gb = &g * self.value(a);
                    self.send(pending, b, reduce_to(gb, self.shape(b)));
                }
            }
            Op::Scale(a, factor) => self.send(pending, a, g * factor),
            Op::Relu(a) => {
                let mut ga = g;
                Zip::from(&mut ga)
                    .and(self.value(a))
                    .for_each(|gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                self.send(pending, a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(out).for_each(|gi, &y| *gi *= y * (1.0 - y));
                self.send(pending, a, ga);
            }
            Op::Exp(a) => self.send(pending, a, g * out),
            Op::Log(a) => self.send(pending, a, g / self.value(a)),
            Op::Square(a) => {
                let mut ga = g;
                Zip::from(&mut ga)
                    .and(self.value(a))
                    .for_each(|gi, &x| *gi *= 2.0 * x);
                self.send(pending, a, ga);
            }
            Op::Clamp { input, lo, hi } => {
                let mut ga = g;
                Zip::from(&mut ga)
                    .and(self.value(input))
                    .for_each(|gi, &x| {
                        if x < lo || x > hi {
                            *gi = 0.0;
                        }
                    });
                self.send(pending, input, ga);
            }
            Op::Sum(a, axis) => {
                let shape = self.value(a).raw_dim();
                let ga = match axis {
                    None => Array2::from_elem(shape, g[[0, 0]]),
                    _ => g.broadcast(shape).expect("reduced shape broadcasts").to_owned(),
                };
                self.send(pending, a, ga);
            }
            Op::Mean(a, axis) => {
                let (m, n) = self.shape(a);
                let count = match axis {
                    None => m * n,
                    Some(0) => m,
                    _ => n,
                } as f64;
                let shape = self.value(a).raw_dim();
                let ga = match axis {
                    None => Array2::from_elem(shape, g[[0, 0]] / count),
                    _ => g.broadcast(shape).expect("reduced shape broadcasts").mapv(|x| x / count),
                };
                self.send(pending, a, ga);
            }
            Op::KronRows(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let (n, p) = av.dim();
                let q = bv.ncols();
                if self.rg(a) {
                    let mut ga = Array2::zeros((n, p));
                    for r in 0..n {
                        for i in 0..p {
                            let mut acc = 0.0;
                            for j in 0..q {
                                acc += g[[r, i * q + j]] * bv[[r, j]];
                            }
                            ga[[r, i]] = acc;
                        }
                    }
                    self.send(pending, a, ga);
                }
                if self.rg(b) {
                    let mut gb = Array2::zeros((n, q));
                    for r in 0..n {
                        for i in 0..p {
                            let ai = av[[r, i]];
                            for j in 0..q {
                                gb[[r, j]] += g[[r, i * q + j]] * ai;
                            }
                        }
                    }
                    self.send(pending, b, gb);
                }
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g;
                for (mut grow, yrow) in ga.rows_mut().into_iter().zip(out.rows()) {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum();
                    Zip::from(&mut grow)
                        .and(&yrow)
                        .for_each(|gi, &y| *gi = y * (*gi - dot));
                }
                self.send(pending, a, ga);
            }
            Op::Reshape(a) => {
                let shape = self.shape(a);
                let flat: Vec<f64> = g.iter().copied().collect();
                let ga = Array2::from_shape_vec(shape, flat).expect("reshape preserves size");
                self.send(pending, a, ga);
            }
            Op::PoolRows { weights, feats } => {
                let w = self.value(weights);
                let f = self.value(feats);
                let (n, l) = w.dim();
                if self.rg(weights) {
                    let mut gw = Array2::zeros((n, l));
                    for i in 0..n {
                        for loc in 0..l {
                            gw[[i, loc]] = g.row(i).dot(&f.row(i * l + loc));
                        }
                    }
                    self.send(pending, weights, gw);
                }
                if self.rg(feats) {
                    let mut gf = Array2::zeros(f.raw_dim());
                    for i in 0..n {
                        for loc in 0..l {
                            gf.row_mut(i * l + loc).scaled_add(w[[i, loc]], &g.row(i));
                        }
                    }
                    self.send(pending, feats, gf);
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.shape(a).1;
                if self.rg(a) {
                    self.send(pending, a, g.slice(ndarray::s![.., ..p]).to_owned());
                }
                if self.rg(b) {
                    self.send(pending, b, g.slice(ndarray::s![.., p..]).to_owned());
                }
            }
            Op::StraightThrough { input, ref mask } => self.send(pending, input, g * mask),
        }
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
