//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records a program built from a small set of array operations.
//! Every operation evaluates eagerly through [`Tape::push`], so a recorded
//! program and an unrecorded one ([`Tape::detached`]) run the same arithmetic
//! and produce bitwise identical values. [`Tape::vjp`] walks the nodes in
//! reverse and returns `uᵀJ` for every node that feeds the output.
//!
//! Kinks follow one convention everywhere: `clamp` passes the cotangent
//! through on the closed interval `[lo, hi]` and blocks it outside, `relu`
//! passes it through for `x >= 0`.

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("division by zero at node {node}")]
    DivisionByZero { node: usize },
    #[error("log of a nonpositive value at node {node}")]
    LogDomain { node: usize },
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: usize, detail: String },
    #[error("non-finite input at node {node}")]
    NonFiniteInput { node: usize },
    #[error("tape was evaluated without recording; no derivatives available")]
    NotRecorded,
    #[error("replay expected {expected} inputs, got {got}")]
    ReplayArity { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, TapeError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    /// `x * s[0]` for a length-one `s`.
    ScaleBy(Var, Var),
    MatVec {
        m: Var,
        x: Var,
        rows: usize,
        cols: usize,
        transpose: bool,
    },
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    SoftmaxRows {
        x: Var,
        cols: usize,
    },
    LogSoftmaxRows {
        x: Var,
        cols: usize,
    },
    SumRows {
        x: Var,
        cols: usize,
    },
    Sum(Var),
    Gather {
        x: Var,
        idx: Arc<[usize]>,
    },
    ScatterAdd {
        x: Var,
        idx: Arc<[usize]>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    CumSum {
        x: Var,
        reverse: bool,
        exclusive: bool,
    },
    /// Copies `x` and overwrites the listed entries with constants.
    Replace {
        x: Var,
        entries: Arc<[(usize, f64)]>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::ScaleBy(a, b) => {
                vec![*a, *b]
            }
            Op::MatVec { m, x, .. } => vec![*m, *x],
            Op::Scale(x, _)
            | Op::Shift(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Sum(x) => vec![*x],
            Op::Clamp { x, .. }
            | Op::SoftmaxRows { x, .. }
            | Op::LogSoftmaxRows { x, .. }
            | Op::SumRows { x, .. }
            | Op::Gather { x, .. }
            | Op::ScatterAdd { x, .. }
            | Op::Slice { x, .. }
            | Op::CumSum { x, .. }
            | Op::Replace { x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    /// Output length for ops whose length is not implied by their inputs.
    len: usize,
    value: Vec<f64>,
}

/// Append-only record of array operations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

/// Cotangents of every node reached by a reverse sweep.
#[derive(Debug, Clone)]
pub struct Cotangents {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Cotangents {
    /// Cotangent of `var`; zeros when `var` does not feed the output.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[var.0]],
        }
    }

    pub fn touched(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Tape that evaluates but keeps no derivative information.
    pub fn detached() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value[0]
    }

    pub fn size(&self, var: Var) -> usize {
        self.nodes[var.0].value.len()
    }

    /// Differentiable leaf. Rejects non-finite entries.
    pub fn input(&mut self, values: &[f64]) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TapeError::NonFiniteInput {
                node: self.nodes.len(),
            });
        }
        Ok(self.leaf(Op::Input, values.to_vec()))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        self.leaf(Op::Constant, values)
    }

    pub fn zeros(&mut self, len: usize) -> Var {
        self.constant(vec![0.0; len])
    }

    fn leaf(&mut self, op: Op, value: Vec<f64>) -> Var {
        let len = value.len();
        self.nodes.push(Node { op, len, value });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, len: usize) -> Result<Var> {
        let node = self.nodes.len();
        let value = evaluate(&op, len, node, &|v: Var| self.nodes[v.0].value.as_slice())?;
        let op = if self.recording { op } else { Op::Constant };
        self.nodes.push(Node { op, len, value });
        Ok(Var(node))
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let (la, lb) = (self.size(a), self.size(b));
        if la != lb {
            return Err(TapeError::Shape {
                node: self.nodes.len(),
                detail: format!("{what}: {la} vs {lb}"),
            });
        }
        Ok(la)
    }

    fn rows_of(&self, x: Var, cols: usize, what: &str) -> Result<usize> {
        let n = self.size(x);
        if cols == 0 || n % cols != 0 {
            return Err(TapeError::Shape {
                node: self.nodes.len(),
                detail: format!("{what}: length {n} not divisible into rows of {cols}"),
            });
        }
        Ok(n / cols)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.same_len(a, b, "add")?;
        self.push(Op::Add(a, b), n)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.same_len(a, b, "sub")?;
        self.push(Op::Sub(a, b), n)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.same_len(a, b, "mul")?;
        self.push(Op::Mul(a, b), n)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.same_len(a, b, "div")?;
        self.push(Op::Div(a, b), n)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let n = self.size(x);
        self.push(Op::Scale(x, c), n)
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        let n = self.size(x);
        self.push(Op::Shift(x, c), n)
    }

    /// `x * s` for a scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.size(s) != 1 {
            return Err(TapeError::Shape {
                node: self.nodes.len(),
                detail: format!("scale_by: scale has length {}", self.size(s)),
            });
        }
        let n = self.size(x);
        self.push(Op::ScaleBy(x, s), n)
    }

    /// Row-major `m` of shape `rows × cols` times `x` (`mᵀx` when `transpose`).
    pub fn matvec(
        &mut self,
        m: Var,
        x: Var,
        rows: usize,
        cols: usize,
        transpose: bool,
    ) -> Result<Var> {
        let (in_len, out_len) = if transpose { (rows, cols) } else { (cols, rows) };
        if self.size(m) != rows * cols || self.size(x) != in_len {
            return Err(TapeError::Shape {
                node: self.nodes.len(),
                detail: format!(
                    "matvec: matrix {} for {rows}x{cols}, vector {} (transpose={transpose})",
                    self.size(m),
                    self.size(x)
                ),
            });
        }
        self.push(
            Op::MatVec {
                m,
                x,
                rows,
                cols,
                transpose,
            },
            out_len,
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let n = self.size(x);
        self.push(Op::Exp(x), n)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let n = self.size(x);
        self.push(Op::Log(x), n)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let n = self.size(x);
        self.push(Op::Sigmoid(x), n)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let n = self.size(x);
        self.push(Op::Relu(x), n)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let n = self.size(x);
        self.push(Op::Clamp { x, lo, hi }, n)
    }

    pub fn softmax_rows(&mut self, x: Var, cols: usize) -> Result<Var> {
        self.rows_of(x, cols, "softmax_rows")?;
        let n = self.size(x);
        self.push(Op::SoftmaxRows { x, cols }, n)
    }

    pub fn log_softmax_rows(&mut self, x: Var, cols: usize) -> Result<Var> {
        self.rows_of(x, cols, "log_softmax_rows")?;
        let n = self.size(x);
        self.push(Op::LogSoftmaxRows { x, cols }, n)
    }

    pub fn sum_rows(&mut self, x: Var, cols: usize) -> Result<Var> {
        let rows = self.rows_of(x, cols, "sum_rows")?;
        self.push(Op::SumRows { x, cols }, rows)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x), 1)
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let n = self.size(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TapeError::Shape {
                node: self.nodes.len(),
                detail: format!("gather: index {bad} out of range {n}"),
            });
        }
        let len = idx.len();
        self.push(Op::Gather { x, idx }, len)
    }

    /// `out[idx[i]] += x[i]` into a zero array of length `len`.
    pub fn scatter_add(&mut self, x: Var, idx: Arc<[usize]>, len: usize) -> Result<Var> {
        if idx.len() != self.size(x) || idx.iter().any(|&i| i >= len) {
            return Err(TapeError::Shape {
                node: self.nodes.len(),
                detail: format!(
                    "scatter_add: {} indices for {} values into {len}",
                    idx.len(),
                    self.size(x)
                ),
            });
        }
        self.push(Op::ScatterAdd { x, idx }, len)
    }

    /// Contiguous sub-range `x[start..start + len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.size(x) {
            return Err(TapeError::Shape {
                node: self.nodes.len(),
                detail: format!("slice {start}..{} of length {}", start + len, self.size(x)),
            });
        }
        self.push(Op::Slice { x, start }, len)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let len = parts.iter().map(|&p| self.size(p)).sum();
        self.push(Op::Concat(parts.to_vec()), len)
    }

    pub fn cumsum(&mut self, x: Var, reverse: bool, exclusive: bool) -> Result<Var> {
        let n = self.size(x);
        self.push(
            Op::CumSum {
                x,
                reverse,
                exclusive,
            },
            n,
        )
    }

    pub fn replace(&mut self, x: Var, entries: Vec<(usize, f64)>) -> Result<Var> {
        let n = self.size(x);
        if entries.iter().any(|&(i, _)| i >= n) {
            return Err(TapeError::Shape {
                node: self.nodes.len(),
                detail: "replace: index out of range".into(),
            });
        }
        self.push(
            Op::Replace {
                x,
                entries: entries.into(),
            },
            n,
        )
    }

    /// Reverse sweep from `output` seeded with `cotangent`.
    pub fn vjp(&self, output: Var, cotangent: &[f64]) -> Result<Cotangents> {
        if !self.recording {
            return Err(TapeError::NotRecorded);
        }
        if cotangent.len() != self.size(output) {
            return Err(TapeError::Shape {
                node: output.0,
                detail: format!(
                    "cotangent length {} for output of length {}",
                    cotangent.len(),
                    self.size(output)
                ),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(cotangent.to_vec());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Cotangents {
            grads,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let out = node.value.as_slice();
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.iter().copied());
                accumulate(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.iter().copied());
                accumulate(grads, *b, g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y));
                accumulate(grads, *b, g.iter().zip(va).map(|(g, x)| g * x));
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                accumulate(grads, *a, g.iter().zip(vb).map(|(g, y)| g / y));
                accumulate(
                    grads,
                    *b,
                    g.iter().zip(out).zip(vb).map(|((g, q), y)| -g * q / y),
                );
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|g| g * c)),
            Op::Shift(x, _) => accumulate(grads, *x, g.iter().copied()),
            Op::ScaleBy(x, s) => {
                let c = val(*s)[0];
                accumulate(grads, *x, g.iter().map(|g| g * c));
                let ds: f64 = g.iter().zip(val(*x)).map(|(g, x)| g * x).sum();
                accumulate(grads, *s, std::iter::once(ds));
            }
            Op::MatVec {
                m,
                x,
                rows,
                cols,
                transpose,
            } => {
                let (vm, vx) = (val(*m), val(*x));
                let (rows, cols) = (*rows, *cols);
                let mut gm = vec![0.0; rows * cols];
                let mut gx = vec![0.0; vx.len()];
                if *transpose {
                    // out[c] = Σ_r m[r,c] x[r]
                    for r in 0..rows {
                        let row = &vm[r * cols..(r + 1) * cols];
                        let mut acc = 0.0;
                        for c in 0..cols {
                            gm[r * cols + c] = g[c] * vx[r];
                            acc += row[c] * g[c];
                        }
                        gx[r] = acc;
                    }
                } else {
                    for r in 0..rows {
                        let row = &vm[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gm[r * cols + c] = g[r] * vx[c];
                            gx[c] += row[c] * g[r];
                        }
                    }
                }
                accumulate(grads, *m, gm.into_iter());
                accumulate(grads, *x, gx.into_iter());
            }
            Op::Exp(x) => accumulate(grads, *x, g.iter().zip(out).map(|(g, y)| g * y)),
            Op::Log(x) => accumulate(grads, *x, g.iter().zip(val(*x)).map(|(g, x)| g / x)),
            Op::Sigmoid(x) => {
                accumulate(grads, *x, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)))
            }
            Op::Relu(x) => accumulate(
                grads,
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, x)| if *x >= 0.0 { *g } else { 0.0 }),
            ),
            Op::Clamp { x, lo, hi } => accumulate(
                grads,
                *x,
                g.iter().zip(val(*x)).map(|(g, x)| {
                    if *x >= *lo && *x <= *hi {
                        *g
                    } else {
                        0.0
                    }
                }),
            ),
            Op::SoftmaxRows { x, cols } => {
                let mut gx = vec![0.0; out.len()];
                for (r, (p, gr)) in out.chunks(*cols).zip(g.chunks(*cols)).enumerate() {
                    let dot: f64 = p.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for c in 0..*cols {
                        gx[r * cols + c] = p[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *x, gx.into_iter());
            }
            Op::LogSoftmaxRows { x, cols } => {
                let mut gx = vec![0.0; out.len()];
                for (r, (lp, gr)) in out.chunks(*cols).zip(g.chunks(*cols)).enumerate() {
                    let total: f64 = gr.iter().sum();
                    for c in 0..*cols {
                        gx[r * cols + c] = gr[c] - lp[c].exp() * total;
                    }
                }
                accumulate(grads, *x, gx.into_iter());
            }
            Op::SumRows { x, cols } => {
                accumulate(grads, *x, g.iter().flat_map(|g| std::iter::repeat(*g).take(*cols)))
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                accumulate(grads, *x, std::iter::repeat(g[0]).take(n));
            }
            Op::Gather { x, idx } => {
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (i, &j) in idx.iter().enumerate() {
                    gx[j] += g[i];
                }
                accumulate(grads, *x, gx.into_iter());
            }
            Op::ScatterAdd { x, idx } => accumulate(grads, *x, idx.iter().map(|&j| g[j])),
            Op::Slice { x, start } => {
                let n = self.nodes[x.0].value.len();
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; n]);
                slot[*start..*start + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, g)| *a += g);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    accumulate(grads, *p, g[offset..offset + n].iter().copied());
                    offset += n;
                }
            }
            Op::CumSum {
                x,
                reverse,
                exclusive,
            } => {
                // Adjoint of a forward cumsum is a reverse cumsum and vice versa.
                let gx = cumsum(g, !*reverse, *exclusive);
                accumulate(grads, *x, gx.into_iter());
            }
            Op::Replace { x, entries } => {
                let mut gx = g.to_vec();
                for &(i, _) in entries.iter() {
                    gx[i] = 0.0;
                }
                accumulate(grads, *x, gx.into_iter());
            }
        }
    }

    /// Re-evaluates every node with fresh values for the `Input` leaves, in
    /// recording order. Returns the value of every node.
    pub fn replay(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if !self.recording {
            return Err(TapeError::NotRecorded);
        }
        let expected = self
            .nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Input))
            .count();
        if expected != inputs.len() {
            return Err(TapeError::ReplayArity {
                expected,
                got: inputs.len(),
            });
        }
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        let mut next_input = inputs.iter();
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match node.op {
                Op::Input => next_input.next().cloned().unwrap_or_default(),
                Op::Constant => node.value.clone(),
                _ => evaluate(&node.op, node.len, i, &|v: Var| values[v.0].as_slice())?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Checks that every node's inputs precede it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().all(|v| v.0 < i))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, g: impl Iterator<Item = f64>) {
    match &mut grads[var.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, g)| *a += g),
        slot @ None => *slot = Some(g.collect()),
    }
}

fn cumsum(x: &[f64], reverse: bool, exclusive: bool) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    let mut acc = 0.0;
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    };
    for i in order {
        if exclusive {
            out[i] = acc;
            acc += x[i];
        } else {
            acc += x[i];
            out[i] = acc;
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn evaluate<'a>(
    op: &Op,
    len: usize,
    node: usize,
    val: &dyn Fn(Var) -> &'a [f64],
) -> Result<Vec<f64>> {
    let map = |x: Var, f: &dyn Fn(f64) -> f64| val(x).iter().map(|&v| f(v)).collect::<Vec<_>>();
    let zip = |a: Var, b: Var, f: &dyn Fn(f64, f64) -> f64| {
        val(a)
            .iter()
            .zip(val(b))
            .map(|(&x, &y)| f(x, y))
            .collect::<Vec<_>>()
    };
    Ok(match op {
        Op::Input | Op::Constant => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => zip(*a, *b, &|x, y| x + y),
        Op::Sub(a, b) => zip(*a, *b, &|x, y| x - y),
        Op::Mul(a, b) => zip(*a, *b, &|x, y| x * y),
        Op::Div(a, b) => {
            if val(*b).iter().any(|&y| y == 0.0) {
                return Err(TapeError::DivisionByZero { node });
            }
            zip(*a, *b, &|x, y| x / y)
        }
        Op::Scale(x, c) => map(*x, &|v| v * c),
        Op::Shift(x, c) => map(*x, &|v| v + c),
        Op::ScaleBy(x, s) => {
            let c = val(*s)[0];
            map(*x, &|v| v * c)
        }
        Op::MatVec {
            m,
            x,
            rows,
            cols,
            transpose,
        } => {
            let (vm, vx) = (val(*m), val(*x));
            if *transpose {
                let mut out = vec![0.0; *cols];
                for (r, row) in vm.chunks(*cols).enumerate() {
                    let xr = vx[r];
                    for (o, m) in out.iter_mut().zip(row) {
                        *o += m * xr;
                    }
                }
                out
            } else {
                vm.chunks(*cols)
                    .take(*rows)
                    .map(|row| row.iter().zip(vx).map(|(m, x)| m * x).sum())
                    .collect()
            }
        }
        Op::Exp(x) => map(*x, &f64::exp),
        Op::Log(x) => {
            if val(*x).iter().any(|&v| v <= 0.0) {
                return Err(TapeError::LogDomain { node });
            }
            map(*x, &f64::ln)
        }
        Op::Sigmoid(x) => map(*x, &sigmoid),
        Op::Relu(x) => map(*x, &|v| v.max(0.0)),
        Op::Clamp { x, lo, hi } => map(*x, &|v| v.max(*lo).min(*hi)),
        Op::SoftmaxRows { x, cols } => {
            let mut out = Vec::with_capacity(len);
            for row in val(*x).chunks(*cols) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let start = out.len();
                out.extend(row.iter().map(|v| (v - m).exp()));
                let z: f64 = out[start..].iter().sum();
                out[start..].iter_mut().for_each(|p| *p /= z);
            }
            out
        }
        Op::LogSoftmaxRows { x, cols } => {
            let mut out = Vec::with_capacity(len);
            for row in val(*x).chunks(*cols) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            out
        }
        Op::SumRows { x, cols } => val(*x).chunks(*cols).map(|r| r.iter().sum()).collect(),
        Op::Sum(x) => vec![val(*x).iter().sum()],
        Op::Gather { x, idx } => {
            let vx = val(*x);
            idx.iter().map(|&i| vx[i]).collect()
        }
        Op::ScatterAdd { x, idx } => {
            let mut out = vec![0.0; len];
            for (&i, &v) in idx.iter().zip(val(*x)) {
                out[i] += v;
            }
            out
        }
        Op::Slice { x, start } => val(*x)[*start..*start + len].to_vec(),
        Op::Concat(parts) => {
            let mut out = Vec::with_capacity(len);
            for p in parts {
                out.extend_from_slice(val(*p));
            }
            out
        }
        Op::CumSum {
            x,
            reverse,
            exclusive,
        } => cumsum(val(*x), *reverse, *exclusive),
        Op::Replace { x, entries } => {
            let mut out = val(*x).to_vec();
            for &(i, c) in entries.iter() {
                out[i] = c;
            }
            out
        }
    })
}

/// Records `program` on a fresh tape with one `Input` leaf per entry of
/// `inputs`.
pub fn record<F>(inputs: &[&[f64]], program: F) -> Result<(Vec<Var>, Vec<Var>, Tape)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let mut tape = Tape::new();
    let leaves = inputs
        .iter()
        .map(|x| tape.input(x))
        .collect::<Result<Vec<_>>>()?;
    let outputs = program(&mut tape, &leaves)?;
    Ok((leaves, outputs, tape))
}

/// Gradient of a scalar program at `x`, together with its value.
pub fn gradient<F, E>(x: &[f64], program: F) -> std::result::Result<(f64, Vec<f64>), E>
where
    F: FnOnce(&mut Tape, Var) -> std::result::Result<Var, E>,
    E: From<TapeError>,
{
    let mut tape = Tape::new();
    let leaf = tape.input(x)?;
    let out = program(&mut tape, leaf)?;
    let value = tape.scalar(out);
    let grads = tape.vjp(out, &[1.0])?;
    Ok((value, grads.wrt(leaf)))
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates where a probe evaluation was not finite.
    pub non_finite: Vec<usize>,
}

impl GradCheck {
    pub fn compare(analytic: Vec<f64>, numeric: Vec<f64>, non_finite: Vec<usize>) -> Self {
        let max_rel_error = analytic
            .iter()
            .zip(&numeric)
            .enumerate()
            .filter(|(i, _)| !non_finite.contains(i))
            .map(|(_, (a, n))| (a - n).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max);
        Self {
            max_rel_error,
            analytic,
            numeric,
            non_finite,
        }
    }
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2eps`. Returns the
/// estimate and the coordinates whose probes were not finite.
pub fn central_differences<E>(
    mut f: impl FnMut(&[f64]) -> std::result::Result<f64, E>,
    x: &[f64],
    eps: f64,
) -> std::result::Result<(Vec<f64>, Vec<usize>), E> {
    let mut probe = x.to_vec();
    let mut numeric = vec![0.0; x.len()];
    let mut non_finite = Vec::new();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        if up.is_finite() && down.is_finite() {
            numeric[i] = (up - down) / (2.0 * eps);
        } else {
            numeric[i] = f64::NAN;
            non_finite.push(i);
        }
    }
    Ok((numeric, non_finite))
}

/// Compares the tape gradient of a scalar program with central differences.
pub fn gradcheck<F, E>(program: F, x: &[f64], eps: f64) -> std::result::Result<GradCheck, E>
where
    F: Fn(&mut Tape, Var) -> std::result::Result<Var, E>,
    E: From<TapeError>,
{
    assert!(eps > 0.0, "gradcheck step must be positive");
    let (_, analytic) = gradient(x, &program)?;
    let (numeric, non_finite) = central_differences(
        |p| {
            let mut tape = Tape::detached();
            let leaf = tape.input(p)?;
            let out = program(&mut tape, leaf)?;
            Ok::<f64, E>(tape.scalar(out))
        },
        x,
        eps,
    )?;
    Ok(GradCheck::compare(analytic, numeric, non_finite))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares(t: &mut Tape, x: Var) -> Result<Var> {
        let sq = t.mul(x, x)?;
        t.sum(sq)
    }

    #[test]
    fn identity_program_is_one_node() {
        let (leaves, outs, tape) = record(&[&[1.5, -2.0]], |_, v| Ok(vec![v[0]])).unwrap();
        assert_eq!(tape.len(), 1);
        assert_eq!(tape.value(outs[0]), &[1.5, -2.0]);
        assert_eq!(leaves[0], outs[0]);
    }

    #[test]
    fn quadratic_value_and_gradient() {
        let (v, g) = gradient(&[1.0, 2.0], sum_of_squares).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g, vec![2.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (_, g) = gradient(&[0.3, -7.0, 2.0], |t, x| t.sum(x)).unwrap();
        assert_eq!(g, vec![1.0; 3]);
    }

    #[test]
    fn softmax_row_vjp_at_uniform() {
        let mut t = Tape::new();
        let x = t.input(&[0.0, 0.0]).unwrap();
        let p = t.softmax_rows(x, 2).unwrap();
        let g = t.vjp(p, &[1.0, 0.0]).unwrap().wrt(x);
        assert!((g[0] - 0.25).abs() < 1e-15);
        assert!((g[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn division_by_zero_names_node() {
        let mut t = Tape::new();
        let a = t.input(&[1.0]).unwrap();
        let b = t.constant(vec![0.0]);
        assert_eq!(t.div(a, b), Err(TapeError::DivisionByZero { node: 2 }));
    }

    #[test]
    fn log_of_zero_rejected() {
        let mut t = Tape::new();
        let a = t.input(&[1.0, 0.0]).unwrap();
        assert!(matches!(t.log(a), Err(TapeError::LogDomain { node: 1 })));
    }

    #[test]
    fn cotangent_shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.input(&[1.0, 2.0]).unwrap();
        let s = t.sum(a).unwrap();
        assert!(matches!(t.vjp(s, &[1.0, 1.0]), Err(TapeError::Shape { .. })));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut t = Tape::new();
        assert!(t.input(&[f64::NAN]).is_err());
    }

    #[test]
    fn clamp_passes_gradient_on_closed_interval() {
        let mut t = Tape::new();
        let x = t.input(&[-1.0, 0.0, 0.5, 1.0, 2.0]).unwrap();
        let c = t.clamp(x, 0.0, 1.0).unwrap();
        let g = t.vjp(c, &[1.0; 5]).unwrap().wrt(x);
        assert_eq!(g, vec![0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn relu_uses_right_branch_at_zero() {
        let mut t = Tape::new();
        let x = t.input(&[-1.0, 0.0, 3.0]).unwrap();
        let r = t.relu(x).unwrap();
        assert_eq!(t.vjp(r, &[1.0; 3]).unwrap().wrt(x), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn cumsum_variants() {
        let mut t = Tape::new();
        let x = t.input(&[1.0, 2.0, 3.0]).unwrap();
        let a = t.cumsum(x, false, false).unwrap();
        let b = t.cumsum(x, true, true).unwrap();
        assert_eq!(t.value(a), &[1.0, 3.0, 6.0]);
        assert_eq!(t.value(b), &[5.0, 3.0, 0.0]);
    }

    #[test]
    fn detached_tape_matches_recorded_and_refuses_vjp() {
        let run = |t: &mut Tape| {
            let x = t.input(&[0.3, -1.2, 2.5]).unwrap();
            let e = t.exp(x).unwrap();
            let s = t.softmax_rows(e, 3).unwrap();
            let l = t.log(s).unwrap();
            t.sum(l).unwrap()
        };
        let mut rec = Tape::new();
        let mut det = Tape::detached();
        let (a, b) = (run(&mut rec), run(&mut det));
        assert_eq!(rec.scalar(a).to_bits(), det.scalar(b).to_bits());
        assert_eq!(det.vjp(b, &[1.0]).unwrap_err(), TapeError::NotRecorded);
    }

    #[test]
    fn replay_reproduces_recorded_values() {
        let (_, outs, tape) = record(&[&[0.2, 0.9], &[1.0, -3.0]], |t, v| {
            let m = t.mul(v[0], v[1])?;
            let s = t.sigmoid(m)?;
            Ok(vec![t.sum(s)?])
        })
        .unwrap();
        assert!(tape.is_topologically_ordered());
        let values = tape
            .replay(&[vec![0.2, 0.9], vec![1.0, -3.0]])
            .unwrap();
        assert_eq!(values[outs[0].index()][0].to_bits(), tape.scalar(outs[0]).to_bits());
    }

    #[test]
    fn gradcheck_linear_and_quadratic() {
        let lin = gradcheck(
            |t, x| {
                let c = t.constant(vec![0.5, -2.0, 3.0]);
                let m = t.mul(x, c)?;
                t.sum(m)
            },
            &[1.0, 2.0, -1.0],
            1e-3,
        )
        .unwrap();
        assert!(lin.max_rel_error <= 1e-12, "{}", lin.max_rel_error);
        let quad = gradcheck(sum_of_squares, &[1.0, -0.5, 4.0], 1e-5).unwrap();
        assert!(quad.max_rel_error <= 1e-8, "{}", quad.max_rel_error);
    }
}
