//! Dense row-major tensors and the value-level primitives used by the router.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array of scalars with optional gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            values: vec![T::zero(); len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<T>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.values[i * n + i] = T::one();
        }
        t
    }

    /// Samples every entry from uniform(-scale, scale).
    pub fn uniform<R: Rng>(shape: Vec<usize>, scale: f64, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let values = (0..len)
            .map(|_| T::lit(rng.gen_range(-scale..=scale)))
            .collect();
        Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(rows, cols)` of a matrix; a vector is treated as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [c] => Ok((1, *c)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, c) = self.dims2().expect("row() on a matrix");
        &self.values[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        let (_, cols) = self.dims2().expect("get2() on a matrix");
        self.values[r * cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        let (rows, cols) = self.dims2().expect("column() on a matrix");
        (0..rows).map(|r| self.values[r * cols + c]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        let grad = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); self.values.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }
}

/// Plain matrix product of two value tensors (no tape).
pub fn matmul_values<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, s) = a.dims2()?;
    let (s2, t) = b.dims2()?;
    if s != s2 {
        return Err(Error::Dimension(format!(
            "matmul {:?} x {:?}: inner dimensions differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); r * t];
    matmul_into(a.values(), b.values(), &mut out, r, s, t);
    Tensor::matrix(r, t, out)
}

pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], r: usize, s: usize, t: usize) {
    for i in 0..r {
        for j in 0..t {
            let mut acc = T::zero();
            for p in 0..s {
                acc = acc + a[i * s + p] * b[p * t + j];
            }
            out[i * t + j] = acc;
        }
    }
}

/// Softmax of one slice with masked entries forced to exactly zero.
///
/// `keep[i] == false` (or a masked logit) excludes entry `i`. If every entry is
/// excluded the result is all zeros.
pub(crate) fn masked_softmax_slice<T: Scalar>(logits: &[T], keep: impl Fn(usize) -> bool) -> Vec<T> {
    let active = |i: usize| keep(i) && !logits[i].is_masked();
    let mut max = T::neg_infinity();
    for (i, &z) in logits.iter().enumerate() {
        if active(i) && z > max {
            max = z;
        }
    }
    let mut out = vec![T::zero(); logits.len()];
    if max == T::neg_infinity() {
        return out;
    }
    let mut sum = T::zero();
    for (i, &z) in logits.iter().enumerate() {
        if active(i) {
            let e = (z - max).exp();
            out[i] = e;
            sum = sum + e;
        }
    }
    for v in out.iter_mut() {
        *v = *v / sum;
    }
    out
}

/// Softmax along `axis`; masked (`-inf` or sentinel) logits map to exactly 0.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if logits.values().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let shape = logits.shape();
    if shape.is_empty() {
        return Tensor::new(vec![], vec![T::one()]);
    }
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::zero(); logits.len()];
    let mut lane = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = logits.values()[(o * len + j) * inner + i];
            }
            let probs = masked_softmax_slice(&lane, |_| true);
            for (j, p) in probs.into_iter().enumerate() {
                out[(o * len + j) * inner + i] = p;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Indices of the `k` largest entries, ordered by descending value with ties
/// going to the lower index.
pub fn topk_indices<T: Scalar>(logits: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(Error::Parameter(format!(
            "top-k width {k} outside 1..={}",
            logits.len()
        )));
    }
    Ok(descending_order(logits).into_iter().take(k).collect())
}

/// All indices sorted by descending value, lower index first among ties.
pub(crate) fn descending_order<T: Scalar>(values: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Keeps the top-`k` logits and replaces the rest with the mask sentinel.
pub fn topk_mask<T: Scalar>(logits: &Tensor<T>, k: usize) -> Result<(Vec<usize>, Tensor<T>)> {
    let indices = topk_indices(logits.values(), k)?;
    let mut masked = vec![T::mask_value(); logits.len()];
    for &i in &indices {
        masked[i] = logits.values()[i];
    }
    Ok((indices, Tensor::new(logits.shape().to_vec(), masked)?))
}
