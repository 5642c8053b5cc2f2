//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! references to its parents. Parents always precede children, so the
//! backward pass is a single sweep over the node list in reverse.
//!
//! ```
//! use moe_lab::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap().with_grad());
//! let b = tape.leaf(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
//! let c = tape.matmul(a, b).unwrap();
//! let loss = tape.sum(c);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{masked_softmax_slice, matmul_into, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Activation(Var, Activation),
    Sum(Var),
    /// Softmax over the last axis. `mask[i] == false` removes entry `i` from
    /// both the normalization and the gradient.
    Softmax { input: Var, mask: Option<Vec<bool>> },
    /// Mean cross-entropy over rows with a target; stores the row softmax.
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    GatherRows { src: Var, rows: Vec<usize> },
    ScatterRows { src: Var, rows: Vec<usize> },
    GatherElems { src: Var, at: Vec<(usize, usize)> },
    MulColumn { a: Var, col: Var },
    MeanRows(Var),
    WeightedSum { input: Var, coeffs: Vec<T> },
    CausalMean { input: Var, seq_len: usize },
}

struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
    /// Whether any requires-grad leaf is upstream of this node.
    tracked: bool,
}

/// Single-threaded recording of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether it
    /// receives a gradient.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.grad = None;
        let tracked = tensor.requires_grad;
        self.push(tensor, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    /// Accumulated gradient of a requires-grad leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { tensor, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, s) = self.dims(a)?;
        let (s2, t) = self.dims(b)?;
        if s != s2 {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}: inner dimensions differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); r * t];
        matmul_into(self.value(a).values(), self.value(b).values(), &mut out, r, s, t);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(r, t, out)?, Op::MatMul(a, b), tracked))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what} {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let values = zip_map(self.value(a).values(), self.value(b).values(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(shape, values)?, Op::Add(a, b), tracked))
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let values = zip_map(self.value(a).values(), self.value(b).values(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(shape, values)?, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let src = self.value(a);
        let values = src.values().iter().map(|&x| x * c).collect();
        let t = Tensor::new(src.shape().to_vec(), values).expect("same shape");
        let tracked = self.tracked(a);
        self.push(t, Op::Scale(a, c), tracked)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let src = self.value(a);
        let values = src
            .values()
            .iter()
            .map(|&x| match act {
                Activation::Relu => x.max(T::zero()),
                Activation::Tanh => x.tanh(),
            })
            .collect();
        let t = Tensor::new(src.shape().to_vec(), values).expect("same shape");
        let tracked = self.tracked(a);
        self.push(t, Op::Activation(a, act), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).values().iter().fold(T::zero(), |acc, &x| acc + x);
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(total), Op::Sum(a), tracked)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Row-wise softmax restricted to entries with `mask == true`; the others
    /// are exactly 0 and receive no gradient. Rows with no active entry are 0.
    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Dimension(format!(
                "mask of length {} for tensor {:?}",
                mask.len(),
                self.value(a).shape()
            )));
        }
        self.softmax_impl(a, Some(mask))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (rows, cols) = self.dims(a)?;
        let src = self.value(a);
        if src.values().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &src.values()[r * cols..(r + 1) * cols];
            let probs = match &mask {
                Some(m) => masked_softmax_slice(row, |j| m[r * cols + j]),
                None => masked_softmax_slice(row, |_| true),
            };
            out.extend(probs);
        }
        let shape = src.shape().to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { input: a, mask }, tracked))
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let (rows, cols) = self.dims(logits)?;
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= cols) {
            return Err(Error::Dimension(format!("target {bad} outside {cols} classes")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Parameter("cross-entropy with no targets".into()));
        }
        let src = self.value(logits).values();
        let mut probs = Vec::with_capacity(rows * cols);
        let mut total = T::zero();
        for (r, target) in targets.iter().enumerate() {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, &z| m.max(z));
            let sum = row.iter().fold(T::zero(), |s, &z| s + (z - max).exp());
            if let Some(t) = *target {
                total = total + (max + sum.ln() - row[t]);
            }
            probs.extend(row.iter().map(|&z| (z - max).exp() / sum));
        }
        let loss = total / T::lit(count as f64);
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets, probs, count },
            tracked,
        ))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, src: Var, rows: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims(src)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension(format!("row {bad} outside {r} rows")));
        }
        let s = self.value(src).values();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            out.extend_from_slice(&s[i * c..(i + 1) * c]);
        }
        let tracked = self.tracked(src);
        let t = Tensor::matrix(rows.len(), c, out)?;
        Ok(self.push(t, Op::GatherRows { src, rows }, tracked))
    }

    /// Adds row `i` of `src` into row `rows[i]` of a zero matrix with
    /// `out_rows` rows.
    pub fn scatter_rows(&mut self, src: Var, rows: Vec<usize>, out_rows: usize) -> Result<Var> {
        let (r, c) = self.dims(src)?;
        if rows.len() != r {
            return Err(Error::Dimension(format!("{} destinations for {r} rows", rows.len())));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= out_rows) {
            return Err(Error::Dimension(format!("row {bad} outside {out_rows} rows")));
        }
        let s = self.value(src).values();
        let mut out = vec![T::zero(); out_rows * c];
        for (i, &dst) in rows.iter().enumerate() {
            for j in 0..c {
                out[dst * c + j] = out[dst * c + j] + s[i * c + j];
            }
        }
        let tracked = self.tracked(src);
        let t = Tensor::matrix(out_rows, c, out)?;
        Ok(self.push(t, Op::ScatterRows { src, rows }, tracked))
    }

    /// Picks `(row, col)` entries into a column vector `[len x 1]`.
    pub fn gather_elems(&mut self, src: Var, at: Vec<(usize, usize)>) -> Result<Var> {
        let (r, c) = self.dims(src)?;
        if let Some(bad) = at.iter().find(|(i, j)| *i >= r || *j >= c) {
            return Err(Error::Dimension(format!("element {bad:?} outside {r}x{c}")));
        }
        let s = self.value(src).values();
        let out = at.iter().map(|&(i, j)| s[i * c + j]).collect();
        let tracked = self.tracked(src);
        let t = Tensor::matrix(at.len(), 1, out)?;
        Ok(self.push(t, Op::GatherElems { src, at }, tracked))
    }

    /// Multiplies row `i` of `a` by `col[i]`.
    pub fn mul_column(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let (cr, cc) = self.dims(col)?;
        if cr != r || cc != 1 {
            return Err(Error::Dimension(format!(
                "mul_column {:?} by {:?}",
                self.value(a).shape(),
                self.value(col).shape()
            )));
        }
        let av = self.value(a).values();
        let cv = self.value(col).values();
        let out = (0..r * c).map(|k| av[k] * cv[k / c]).collect();
        let tracked = self.tracked(a) || self.tracked(col);
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(t, Op::MulColumn { a, col }, tracked))
    }

    /// Column means of a matrix, as a `[1 x c]` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if r == 0 {
            return Err(Error::Parameter("mean over zero rows".into()));
        }
        let v = self.value(a).values();
        let inv = T::one() / T::lit(r as f64);
        let out = (0..c)
            .map(|j| (0..r).fold(T::zero(), |s, i| s + v[i * c + j]) * inv)
            .collect();
        let tracked = self.tracked(a);
        let t = Tensor::matrix(1, c, out)?;
        Ok(self.push(t, Op::MeanRows(a), tracked))
    }

    /// Scalar `sum_i coeffs[i] * a[i]`; the coefficients are constants.
    pub fn weighted_sum(&mut self, input: Var, coeffs: Vec<T>) -> Result<Var> {
        if coeffs.len() != self.value(input).len() {
            return Err(Error::Dimension(format!(
                "{} coefficients for tensor {:?}",
                coeffs.len(),
                self.value(input).shape()
            )));
        }
        let total = self
            .value(input)
            .values()
            .iter()
            .zip(&coeffs)
            .fold(T::zero(), |s, (&x, &c)| s + x * c);
        let tracked = self.tracked(input);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { input, coeffs }, tracked))
    }

    /// Running mean over consecutive rows within each sequence of `seq_len`
    /// rows: output row `t` is the mean of rows `start..=t` of its sequence.
    pub fn causal_mean(&mut self, input: Var, seq_len: usize) -> Result<Var> {
        let (r, c) = self.dims(input)?;
        if seq_len == 0 || r % seq_len != 0 {
            return Err(Error::Dimension(format!(
                "{r} rows do not split into sequences of {seq_len}"
            )));
        }
        let v = self.value(input).values();
        let mut out = vec![T::zero(); r * c];
        for s in 0..r / seq_len {
            let mut acc = vec![T::zero(); c];
            for t in 0..seq_len {
                let row = s * seq_len + t;
                let inv = T::one() / T::lit((t + 1) as f64);
                for j in 0..c {
                    acc[j] = acc[j] + v[row * c + j];
                    out[row * c + j] = acc[j] * inv;
                }
            }
        }
        let tracked = self.tracked(input);
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(t, Op::CausalMean { input, seq_len }, tracked))
    }

    /// Propagates d(loss)/d(node) to every requires-grad leaf reachable from
    /// `loss`, adding into any gradient already stored there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = adj[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[idx] = Some(upstream);
                continue;
            }
            for (parent, delta) in self.local_grads(idx, &upstream) {
                if !self.nodes[parent.0].tracked {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a = *a + *d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        for (idx, node) in self.nodes.iter_mut().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.tensor.requires_grad {
                match &adj[idx] {
                    Some(delta) => node.tensor.accumulate_grad(delta),
                    None => {
                        let zeros = vec![T::zero(); node.tensor.len()];
                        node.tensor.accumulate_grad(&zeros);
                    }
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for each parent.
    fn local_grads(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let out = node.tensor.values();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (r, s) = self.dims(*a).expect("recorded");
                let (_, t) = self.dims(*b).expect("recorded");
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                let mut ga = vec![T::zero(); r * s];
                let mut gb = vec![T::zero(); s * t];
                for i in 0..r {
                    for p in 0..s {
                        let mut acc = T::zero();
                        for j in 0..t {
                            acc = acc + g[i * t + j] * bv[p * t + j];
                        }
                        ga[i * s + p] = acc;
                    }
                }
                for p in 0..s {
                    for j in 0..t {
                        let mut acc = T::zero();
                        for i in 0..r {
                            acc = acc + av[i * s + p] * g[i * t + j];
                        }
                        gb[p * t + j] = acc;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                vec![
                    (*a, zip_map(g, bv, |x, y| x * y)),
                    (*b, zip_map(g, av, |x, y| x * y)),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&x| x * *c).collect())],
            Op::Activation(a, act) => {
                let inp = self.value(*a).values();
                let d = match act {
                    Activation::Relu => zip_map(g, inp, |gi, x| if x > T::zero() { gi } else { T::zero() }),
                    Activation::Tanh => zip_map(g, out, |gi, y| gi * (T::one() - y * y)),
                };
                vec![(*a, d)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::Softmax { input, mask } => {
                let (rows, cols) = self.dims(*input).expect("recorded");
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let y = &out[span.clone()];
                    let gr = &g[span];
                    let dot = y.iter().zip(gr).fold(T::zero(), |s, (&yi, &gi)| s + yi * gi);
                    for j in 0..cols {
                        let active = mask.as_ref().is_none_or(|m| m[r * cols + j]);
                        if active {
                            d[r * cols + j] = y[j] * (gr[j] - dot);
                        }
                    }
                }
                vec![(*input, d)]
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let (_, cols) = self.dims(*logits).expect("recorded");
                let scale = g[0] / T::lit(*count as f64);
                let mut d = vec![T::zero(); probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    if let Some(t) = *target {
                        for j in 0..cols {
                            d[r * cols + j] = probs[r * cols + j] * scale;
                        }
                        d[r * cols + t] = d[r * cols + t] - scale;
                    }
                }
                vec![(*logits, d)]
            }
            Op::GatherRows { src, rows } => {
                let (r, c) = self.dims(*src).expect("recorded");
                let mut d = vec![T::zero(); r * c];
                for (i, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[row * c + j] = d[row * c + j] + g[i * c + j];
                    }
                }
                vec![(*src, d)]
            }
            Op::ScatterRows { src, rows } => {
                let (_, c) = self.dims(*src).expect("recorded");
                let mut d = Vec::with_capacity(rows.len() * c);
                for &row in rows {
                    d.extend_from_slice(&g[row * c..(row + 1) * c]);
                }
                vec![(*src, d)]
            }
            Op::GatherElems { src, at } => {
                let (r, c) = self.dims(*src).expect("recorded");
                let mut d = vec![T::zero(); r * c];
                for (k, &(i, j)) in at.iter().enumerate() {
                    d[i * c + j] = d[i * c + j] + g[k];
                }
                vec![(*src, d)]
            }
            Op::MulColumn { a, col } => {
                let (r, c) = self.dims(*a).expect("recorded");
                let av = self.value(*a).values();
                let cv = self.value(*col).values();
                let da = (0..r * c).map(|k| g[k] * cv[k / c]).collect();
                let dc = (0..r)
                    .map(|i| (0..c).fold(T::zero(), |s, j| s + g[i * c + j] * av[i * c + j]))
                    .collect();
                vec![(*a, da), (*col, dc)]
            }
            Op::MeanRows(a) => {
                let (r, c) = self.dims(*a).expect("recorded");
                let inv = T::one() / T::lit(r as f64);
                let d = (0..r * c).map(|k| g[k % c] * inv).collect();
                vec![(*a, d)]
            }
            Op::WeightedSum { input, coeffs } => {
                vec![(*input, coeffs.iter().map(|&c| c * g[0]).collect())]
            }
            Op::CausalMean { input, seq_len } => {
                let (r, c) = self.dims(*input).expect("recorded");
                let mut d = vec![T::zero(); r * c];
                for s in 0..r / seq_len {
                    // row u receives sum over t >= u of g[t] / (t + 1)
                    let mut acc = vec![T::zero(); c];
                    for t in (0..*seq_len).rev() {
                        let row = s * seq_len + t;
                        let inv = T::one() / T::lit((t + 1) as f64);
                        for j in 0..c {
                            acc[j] = acc[j] + g[row * c + j] * inv;
                            d[row * c + j] = acc[j];
                        }
                    }
                }
                vec![(*input, d)]
            }
        }
    }
}

fn zip_map<T: Copy>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
