//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Every node is a row-major
//! matrix (vectors are a single row, scalars are 1×1); nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! `backward` walks it in reverse.
//!
//! Parameters enter the tape through [`Graph::param`], which copies the
//! current value out of a [`ParamStore`]. Frozen parameters (and every
//! parameter of a non-recording graph) become constant leaves: no gradient
//! is ever computed for them or for anything that depends only on them.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the vector returned by
    /// [`Graph::gradients`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Cross-entropy target for one row of logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Ignore,
    Class(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `x[m×n] + b[1×n]`, bias broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Affine(Var, f64),
    /// Every element of `x` times the 1×1 node `s`.
    ScaleBy(Var, Var),
    /// Row `i` of `x[m×n]` times `s[i]`, with `s` of shape m×1.
    RowScale(Var, Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Target>,
        probs: Vec<f64>,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    /// A graph that records gradients for unfrozen parameters.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            recording: true,
        }
    }

    /// A graph whose leaves never require gradients.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Graph::new()
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf holding `t`'s values, viewed as a matrix.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.leaf(r, c, t.values().to_vec(), false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} constant with {} values",
                values.len()
            )));
        }
        Ok(self.leaf(rows, cols, values, false))
    }

    /// A leaf that requires a gradient regardless of any store; used by
    /// tests and finite-difference checks on raw operations.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        let rec = self.recording;
        self.leaf(r, c, t.values().to_vec(), rec)
    }

    /// Binds parameter `name` from `store`; repeated calls return the same
    /// node. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let p = store
            .param(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        let (r, c) = p.tensor.dims2();
        let needs = self.recording && !p.frozen;
        let v = self.leaf(r, c, p.tensor.values().to_vec(), needs);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::NotScalar(vec![n.rows, n.cols]));
        }
        Ok(n.value[0])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        mm(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}x{k} by transpose of {n}x{k2}")));
        }
        let mut out = vec![0.0; m * n];
        mm_bt(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMulBT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        Ok(self.push(r, c, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let out = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        Ok(self.push(r, c, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let out = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        Ok(self.push(r, c, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let ((r, c), (br, bc)) = (self.dims(x), self.dims(bias));
        if br * bc != c {
            return Err(Error::shape(format!("bias {br}x{bc} for {r}x{c} input")));
        }
        let b = &self.nodes[bias.0].value;
        let out = self.nodes[x.0]
            .value
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect::<Vec<_>>();
        Ok(self.push(r, c, out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if factors.len() != r * c {
            return Err(Error::shape("constant factor length"));
        }
        let out = zip_map(&self.nodes[x.0].value, &factors, |a, b| a * b);
        Ok(self.push(r, c, out, Op::MulConst(x, factors), &[x]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (r, c) = self.dims(x);
        let out = self.nodes[x.0].value.iter().map(|v| scale * v + shift).collect();
        self.push(r, c, out, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Multiplies every element of `x` by the 1×1 node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(Error::shape(format!("scale_by needs 1x1, got {:?}", self.dims(s))));
        }
        let (r, c) = self.dims(x);
        let k = self.nodes[s.0].value[0];
        let out = self.nodes[x.0].value.iter().map(|v| v * k).collect();
        Ok(self.push(r, c, out, Op::ScaleBy(x, s), &[x, s]))
    }

    /// Scales row `i` of `x[m×n]` by `s[i]`, `s` of shape m×1.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let ((r, c), ds) = (self.dims(x), self.dims(s));
        if ds != (r, 1) {
            return Err(Error::shape(format!("row_scale {r}x{c} by {ds:?}")));
        }
        let sv = &self.nodes[s.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..r {
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= sv[i]);
        }
        Ok(self.push(r, c, out, Op::RowScale(x, s), &[x, s]))
    }

    // ----- nonlinearities -----

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        self.push(r, c, out, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(r, c, out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.nodes[x.0].value.iter().map(|&v| sigmoid(v)).collect();
        self.push(r, c, out, Op::Sigmoid(x), &[x])
    }

    /// Row-wise softmax. Entries where `mask` is `false` are excluded and come
    /// out exactly zero. A row with no unmasked entry is an error.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape(format!("mask of {} for {r}x{c} input", m.len())));
            }
        }
        let xs = &self.nodes[x.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            softmax_row(&xs[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c], keep)
                .ok_or(Error::DegenerateRow { row: i })?;
        }
        Ok(self.push(r, c, out, Op::Softmax(x), &[x]))
    }

    /// Per-row normalization to zero mean and unit variance, then
    /// `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (g, b) = (self.dims(gamma), self.dims(beta));
        if g.0 * g.1 != c || b.0 * b.1 != c {
            return Err(Error::shape(format!(
                "layer_norm width {c} with gamma {g:?}, beta {b:?}"
            )));
        }
        let xs = &self.nodes[x.0].value;
        let gs = &self.nodes[gamma.0].value;
        let bs = &self.nodes[beta.0].value;
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gs[j] + bs[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(r, c, out, op, &[x, gamma, beta]))
    }

    /// Mean negative log-softmax over non-ignored rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Target]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::shape(format!("{} targets for {r} rows", targets.len())));
        }
        let xs = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            let Target::Class(k) = *t else { continue };
            if k >= c {
                return Err(Error::Input(format!("target {k} outside [0, {c})")));
            }
            let row = &xs[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            total += lse - row[k];
            count += 1;
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let value = total / count as f64;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.push(1, 1, vec![value], op, &[logits]))
    }

    // ----- indexing and layout -----

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        let t = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Input(format!("row {id} outside table of {r}")));
            }
            out.extend_from_slice(&t[id * c..(id + 1) * c]);
        }
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(ids.len(), c, out, op, &[table]))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xs = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::shape(format!("row {i} of {r}")));
            }
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let op = Op::SelectRows { x, rows: rows.to_vec() };
        Ok(self.push(rows.len(), c, out, op, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(Error::shape(format!("columns {start}..{} of {c}", start + len)));
        }
        let xs = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        Ok(self.push(r, len, out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|v| self.dims(*v).0).unwrap_or(0);
        if parts.iter().any(|v| self.dims(*v).0 != r) {
            return Err(Error::shape("concat_cols row counts differ"));
        }
        let c: usize = parts.iter().map(|v| self.dims(*v).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for v in parts {
                let pc = self.dims(*v).1;
                out.extend_from_slice(&self.nodes[v.0].value[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(r, c, out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|v| self.dims(*v).1).unwrap_or(0);
        if parts.iter().any(|v| self.dims(*v).1 != c) {
            let shapes: Vec<_> = parts.iter().map(|v| self.dims(*v)).collect();
            return Err(Error::shape(format!("concat_rows widths differ: {shapes:?}")));
        }
        let r: usize = parts.iter().map(|v| self.dims(*v).0).sum();
        let mut out = Vec::with_capacity(r * c);
        for v in parts {
            out.extend_from_slice(&self.nodes[v.0].value);
        }
        Ok(self.push(r, c, out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r * c != rows * cols {
            return Err(Error::shape(format!("reshape {r}x{c} to {rows}x{cols}")));
        }
        let out = self.nodes[x.0].value.clone();
        Ok(self.push(rows, cols, out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x), &[x])
    }

    // ----- backward -----

    /// Gradients of the scalar `loss` with respect to every node, indexed by
    /// node. Nodes that do not require a gradient get `None`.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(Error::NotScalar(vec![n.rows, n.cols]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !n.needs_grad {
            return Ok(grads);
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(grads)
    }

    /// Runs backward from `loss` and accumulates gradients into every
    /// unfrozen entry of `store`. Unfrozen entries the loss does not reach
    /// receive zeros; frozen entries are left untouched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            match self.params.get(name).and_then(|v| grads[v.0].as_ref()) {
                Some(g) => p.tensor.accumulate_grad(g)?,
                None => {
                    if p.tensor.grad().is_none() {
                        p.tensor.zero_grad();
                    }
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    #[allow(clippy::needless_range_loop)]
    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let ga = slot(grads, *a, m * k);
                    mm_bt_acc(dy, val(*b), ga, m, n, k);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let gb = slot(grads, *b, k * n);
                    mm_at_acc(val(*a), dy, gb, m, k, n);
                }
            }
            Op::MatMulBT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.wants(*a) {
                    // C = A Bᵀ → dA = dC · B
                    let ga = slot(grads, *a, m * k);
                    mm_acc(dy, val(*b), ga, m, n, k);
                }
                if self.wants(*b) {
                    // dB = dCᵀ · A
                    let gb = slot(grads, *b, n * k);
                    mm_at_acc(dy, val(*a), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(slot(grads, *v, dy.len()), dy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, dy.len()), dy);
                }
                if self.wants(*b) {
                    slot(grads, *b, dy.len()).iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::AddRow(x, b) => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, dy.len()), dy);
                }
                if self.wants(*b) && cols > 0 {
                    let gb = slot(grads, *b, cols);
                    for row in dy.chunks(cols) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = slot(grads, *a, dy.len());
                    for ((g, d), o) in ga.iter_mut().zip(dy).zip(val(*b)) {
                        *g += d * o;
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, dy.len());
                    for ((g, d), o) in gb.iter_mut().zip(dy).zip(val(*a)) {
                        *g += d * o;
                    }
                }
            }
            Op::MulConst(x, f) => {
                let gx = slot(grads, *x, dy.len());
                for ((g, d), k) in gx.iter_mut().zip(dy).zip(f) {
                    *g += d * k;
                }
            }
            Op::Affine(x, s) => {
                let gx = slot(grads, *x, dy.len());
                gx.iter_mut().zip(dy).for_each(|(g, d)| *g += s * d);
            }
            Op::ScaleBy(x, s) => {
                let k = val(*s)[0];
                if self.wants(*x) {
                    slot(grads, *x, dy.len())
                        .iter_mut()
                        .zip(dy)
                        .for_each(|(g, d)| *g += k * d);
                }
                if self.wants(*s) {
                    let dot: f64 = dy.iter().zip(val(*x)).map(|(d, v)| d * v).sum();
                    slot(grads, *s, 1)[0] += dot;
                }
            }
            Op::RowScale(x, s) => {
                let sv = val(*s);
                if self.wants(*x) {
                    let gx = slot(grads, *x, dy.len());
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[i * cols + j] += dy[i * cols + j] * sv[i];
                        }
                    }
                }
                if self.wants(*s) {
                    let xv = val(*x);
                    let gs = slot(grads, *s, rows);
                    for i in 0..rows {
                        let r = i * cols..(i + 1) * cols;
                        gs[i] += dy[r.clone()].iter().zip(&xv[r]).map(|(d, v)| d * v).sum::<f64>();
                    }
                }
            }
            Op::Gelu(x) => {
                let gx = slot(grads, *x, dy.len());
                for ((g, d), &v) in gx.iter_mut().zip(dy).zip(val(*x)) {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *g += d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }
            Op::Tanh(x) => {
                let gx = slot(grads, *x, dy.len());
                for ((g, d), y) in gx.iter_mut().zip(dy).zip(&node.value) {
                    *g += d * (1.0 - y * y);
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, *x, dy.len());
                for ((g, d), y) in gx.iter_mut().zip(dy).zip(&node.value) {
                    *g += d * y * (1.0 - y);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let gx = slot(grads, *x, dy.len());
                for i in 0..rows {
                    let r = i * cols..(i + 1) * cols;
                    let dot: f64 = dy[r.clone()].iter().zip(&y[r.clone()]).map(|(d, p)| d * p).sum();
                    for j in r {
                        gx[j] += y[j] * (dy[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gs = val(*gamma);
                if self.wants(*gamma) {
                    let gg = slot(grads, *gamma, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gg[j] += dy[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = slot(grads, *beta, cols);
                    for row in dy.chunks(cols.max(1)) {
                        add_into(gb, row);
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, *x, dy.len());
                    let inv = 1.0 / cols as f64;
                    for i in 0..rows {
                        let r = i * cols..(i + 1) * cols;
                        let dxhat: Vec<f64> = dy[r.clone()].iter().zip(gs).map(|(d, g)| d * g).collect();
                        let mean_d = dxhat.iter().sum::<f64>() * inv;
                        let mean_dx = dxhat.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum::<f64>() * inv;
                        for (j, idx) in r.enumerate() {
                            gx[idx] += rstd[i] * (dxhat[j] - mean_d - xhat[idx] * mean_dx);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (_, c) = self.dims(*logits);
                let scale = dy[0] / *count as f64;
                let gl = slot(grads, *logits, probs.len());
                for (i, t) in targets.iter().enumerate() {
                    let Target::Class(k) = *t else { continue };
                    for j in 0..c {
                        let onehot = if j == k { 1.0 } else { 0.0 };
                        gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let (tr, c) = self.dims(*table);
                let gt = slot(grads, *table, tr * c);
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * c..(id + 1) * c], &dy[i * c..(i + 1) * c]);
                }
            }
            Op::SelectRows { x, rows: sel } => {
                let (xr, c) = self.dims(*x);
                let gx = slot(grads, *x, xr * c);
                for (i, &src) in sel.iter().enumerate() {
                    add_into(&mut gx[src * c..(src + 1) * c], &dy[i * c..(i + 1) * c]);
                }
            }
            Op::SliceCols { x, start } => {
                let (xr, xc) = self.dims(*x);
                let gx = slot(grads, *x, xr * xc);
                for i in 0..rows {
                    add_into(
                        &mut gx[i * xc + start..i * xc + start + cols],
                        &dy[i * cols..(i + 1) * cols],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for v in parts {
                    let pc = self.dims(*v).1;
                    if self.wants(*v) {
                        let gp = slot(grads, *v, rows * pc);
                        for i in 0..rows {
                            add_into(
                                &mut gp[i * pc..(i + 1) * pc],
                                &dy[i * cols + offset..i * cols + offset + pc],
                            );
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for v in parts {
                    let len = self.nodes[v.0].value.len();
                    if self.wants(*v) {
                        add_into(slot(grads, *v, len), &dy[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, dy.len()), dy),
            Op::Sum(x) => {
                let len = self.nodes[x.0].value.len();
                slot(grads, *x, len).iter_mut().for_each(|g| *g += dy[0]);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Stabilized softmax of one row over the entries where `keep` holds.
/// Returns `None` when nothing is kept.
pub(crate) fn softmax_row(x: &[f64], out: &mut [f64], keep: impl Fn(usize) -> bool) -> Option<()> {
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (j, v) in x.iter().enumerate() {
        if keep(j) {
            any = true;
            max = max.max(*v);
        }
    }
    if !any {
        return None;
    }
    let mut total = 0.0;
    for (j, v) in x.iter().enumerate() {
        out[j] = if keep(j) { (v - max).exp() } else { 0.0 };
        total += out[j];
    }
    out.iter_mut().for_each(|o| *o /= total);
    Some(())
}

/// out[m×n] = a[m×k] · b[k×n]
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] = a[m×k] · b[n×k]ᵀ
fn mm_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    mm(a, b, out, m, k, n);
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn mm_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
fn mm_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
