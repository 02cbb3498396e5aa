//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix; scalars are `1×1`. Operations
//! are recorded in evaluation order and [`Tape::backward`] walks them in
//! reverse, accumulating vector-Jacobian products. Only the operations
//! needed by the multi-view model and its losses are provided.

use ndarray::{Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `aᵀ · b`
    MatMulTn(Var, Var),
    /// `a + 1·b` with `b` a `1×n` row broadcast over the rows of `a`.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Exp(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Square(Var),
    XLogX(Var),
    Sum(Var),
    RowSum(Var),
    ColMean(Var),
    Diag(Var),
    ColNormalize { x: Var, norms: Vec<f64>, floor: f64 },
    GatherRows { x: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, materializing zeros of `shape` when absent.
    pub fn take_or_zeros(&mut self, var: Var, shape: (usize, usize)) -> Array2<f64> {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Array2::zeros(shape))
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

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Array2<f64>, op: Op) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Array2<f64>, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, noise draws).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value[[0, 0]]
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).t().dot(self.value(b));
        self.binary(a, b, v, Op::MatMulTn(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.binary(a, row, v, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        self.unary(x, v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) + c;
        self.unary(x, v, Op::AddScalar(x))
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| if e > 0.0 { e } else { 0.0 });
        self.unary(x, v, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        self.unary(x, v, Op::SoftmaxRows(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::exp);
        self.unary(x, v, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::ln);
        self.unary(x, v, Op::Log(x))
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).mapv(|e| e.clamp(lo, hi));
        self.unary(x, v, Op::Clamp { x, lo, hi })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e * e);
        self.unary(x, v, Op::Square(x))
    }

    /// Elementwise `x·ln x` with `0·ln 0 = 0`.
    pub fn xlogx(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(xlogx);
        self.unary(x, v, Op::XLogX(x))
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    /// Per-row sums as an `r×1` column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(x, v, Op::RowSum(x))
    }

    /// Per-column means as a `1×c` row.
    pub fn col_mean(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let rows = value.nrows().max(1) as f64;
        let v = (value.sum_axis(Axis(0)) / rows).insert_axis(Axis(0));
        self.unary(x, v, Op::ColMean(x))
    }

    /// Diagonal of a square matrix as a `k×1` column.
    pub fn diag(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let k = value.nrows().min(value.ncols());
        let v = Array2::from_shape_fn((k, 1), |(i, _)| value[[i, i]]);
        self.unary(x, v, Op::Diag(x))
    }

    /// Divides every column by its Euclidean norm, floored at `floor`.
    pub fn col_normalize(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x);
        let norms: Vec<f64> = value
            .columns()
            .into_iter()
            .map(|c| c.dot(&c).sqrt().max(floor))
            .collect();
        let mut v = value.clone();
        for (mut col, &n) in v.columns_mut().into_iter().zip(&norms) {
            col /= n;
        }
        self.unary(x, v, Op::ColNormalize { x, norms, floor })
    }

    /// Selects rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), rows);
        self.unary(
            x,
            v,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Activation pattern of every piecewise operation on the tape.
    ///
    /// Two evaluations of the same program whose signatures differ have
    /// crossed a point where the function is not differentiable.
    pub fn kink_signature(&self) -> Vec<u8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => sig.extend(self.value(x).iter().map(|&e| u8::from(e > 0.0))),
                Op::Clamp { x, lo, hi } => sig.extend(self.value(x).iter().map(|&e| {
                    if e <= lo {
                        0
                    } else if e >= hi {
                        2
                    } else {
                        1
                    }
                })),
                Op::ColNormalize { ref norms, floor, .. } => {
                    sig.extend(norms.iter().map(|&n| u8::from(n > floor)))
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from the `1×1` node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones(self.shape(output)));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // interior gradients are dropped once propagated
            if let Some(g) = grads[i].take() {
                self.propagate(node, &g, &mut grads);
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], var: Var, contrib: Array2<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => *existing += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.dot(&self.value(b).t()));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, self.value(a).t().dot(g));
                }
            }
            Op::MatMulTn(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, self.value(b).dot(&g.t()));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, self.value(a).dot(g));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.needs(row) {
                    self.accumulate(grads, row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g * self.value(b));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g * self.value(a));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, x, g * c),
            Op::AddScalar(x) => self.accumulate(grads, x, g.clone()),
            Op::Relu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(x))
                    .for_each(|d, &e| if e <= 0.0 { *d = 0.0 });
                self.accumulate(grads, x, d);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let gy = g * y;
                let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                self.accumulate(grads, x, &gy - &(y * &dot));
            }
            Op::Exp(x) => self.accumulate(grads, x, g * &node.value),
            Op::Log(x) => self.accumulate(grads, x, g / self.value(x)),
            Op::Clamp { x, lo, hi } => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(x)).for_each(|d, &e| {
                    if e <= lo || e >= hi {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, x, d);
            }
            Op::Square(x) => self.accumulate(grads, x, g * &(self.value(x) * 2.0)),
            Op::XLogX(x) => {
                let d = self
                    .value(x)
                    .mapv(|e| if e > 0.0 { e.ln() + 1.0 } else { 0.0 });
                self.accumulate(grads, x, g * &d);
            }
            Op::Sum(x) => {
                let s = g[[0, 0]];
                self.accumulate(grads, x, Array2::from_elem(self.shape(x), s));
            }
            Op::RowSum(x) => {
                let (r, c) = self.shape(x);
                self.accumulate(grads, x, Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]]));
            }
            Op::ColMean(x) => {
                let (r, c) = self.shape(x);
                let inv = 1.0 / r.max(1) as f64;
                self.accumulate(
                    grads,
                    x,
                    Array2::from_shape_fn((r, c), |(_, j)| g[[0, j]] * inv),
                );
            }
            Op::Diag(x) => {
                let mut d = Array2::zeros(self.shape(x));
                for i in 0..g.nrows() {
                    d[[i, i]] = g[[i, 0]];
                }
                self.accumulate(grads, x, d);
            }
            Op::ColNormalize { x, ref norms, floor } => {
                let y = &node.value;
                let mut d = Array2::zeros(y.dim());
                for (j, &n) in norms.iter().enumerate() {
                    let gj = g.column(j);
                    let mut dj = d.column_mut(j);
                    if n > floor {
                        let yj = y.column(j);
                        let proj = yj.dot(&gj);
                        Zip::from(&mut dj)
                            .and(gj)
                            .and(yj)
                            .for_each(|d, &g, &y| *d = (g - y * proj) / n);
                    } else {
                        Zip::from(&mut dj).and(gj).for_each(|d, &g| *d = g / floor);
                    }
                }
                self.accumulate(grads, x, d);
            }
            Op::GatherRows { x, ref rows } => {
                let mut d = Array2::zeros(self.shape(x));
                for (src, &row) in rows.iter().enumerate() {
                    let mut target = d.row_mut(row);
                    target += &g.row(src);
                }
                self.accumulate(grads, x, d);
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|e| (e - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

pub(crate) fn xlogx(e: f64) -> f64 {
    if e > 0.0 {
        e * e.ln()
    } else {
        0.0
    }
}
