//! Token-choice router over `n` true experts followed by `m` null experts.
//!
//! Global expert ids are `0..n` for true experts and `n..n+m` for null
//! experts. A token picks its experts from its own logits only; nothing here
//! ever looks at another token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{descending_order, masked_softmax_slice, topk_indices, Tensor};

/// What a selected null expert emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullKind {
    /// Constant zero output.
    #[default]
    Zero,
    /// Returns its input unchanged. Experimental: forward rule only.
    Identity,
}

/// Which selected experts share the softmax normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Softmax over every selected expert, null ones included.
    AllSelected,
    /// Softmax over the selected true experts only.
    #[default]
    TrueOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RouterVariant {
    #[default]
    TopK,
    /// Smallest probability-sorted prefix whose mass exceeds `p`.
    TopP { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub n_true: usize,
    pub n_null: usize,
    pub k: usize,
    #[serde(default)]
    pub null_kind: NullKind,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub variant: RouterVariant,
}

impl RouterConfig {
    /// Top-k router with zero-mapping nulls and true-only normalization.
    pub fn top_k(n_true: usize, n_null: usize, k: usize) -> Self {
        Self {
            n_true,
            n_null,
            k,
            null_kind: NullKind::Zero,
            normalization: Normalization::TrueOnly,
            variant: RouterVariant::TopK,
        }
    }

    /// The classic router: no null experts, softmax over all selected.
    pub fn vanilla(n_true: usize, k: usize) -> Self {
        Self {
            normalization: Normalization::AllSelected,
            ..Self::top_k(n_true, 0, k)
        }
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn with_null_kind(mut self, null_kind: NullKind) -> Self {
        self.null_kind = null_kind;
        self
    }

    pub fn with_top_p(mut self, p: f64) -> Self {
        self.variant = RouterVariant::TopP { p };
        self
    }

    pub fn n_total(&self) -> usize {
        self.n_true + self.n_null
    }

    pub fn is_null(&self, id: usize) -> bool {
        id >= self.n_true
    }

    /// Largest number of true experts a single token can select.
    pub fn max_true_count(&self) -> usize {
        match self.variant {
            RouterVariant::TopK => self.k.min(self.n_true),
            RouterVariant::TopP { .. } => self.n_true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_true == 0 {
            return Err(Error::Parameter("router needs at least one true expert".into()));
        }
        if self.k == 0 || self.k > self.n_total() {
            return Err(Error::Parameter(format!(
                "k = {} outside 1..={}",
                self.k,
                self.n_total()
            )));
        }
        if let RouterVariant::TopP { p } = self.variant {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Parameter(format!("top-p threshold {p} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Per-token routing outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<T> {
    /// Selected global expert ids, by descending logit.
    pub selected: Vec<usize>,
    /// Output-combination weight of each selected expert. Zero-mapping null
    /// experts, and any null expert under true-only normalization, get 0.
    pub weights: Vec<T>,
    /// Number of selected true experts.
    pub true_count: usize,
    /// Softmax over all `n + m` unmasked logits.
    pub full_softmax: Vec<T>,
}

impl<T: Scalar> RoutingDecision<T> {
    pub fn is_bypass(&self) -> bool {
        self.true_count == 0
    }

    /// Dense length-`n_total` vector of combination weights.
    pub fn dense_weights(&self, n_total: usize) -> Vec<T> {
        let mut dense = vec![T::zero(); n_total];
        for (&id, &w) in self.selected.iter().zip(&self.weights) {
            dense[id] = w;
        }
        dense
    }

    /// One JSON line: token id, selected ids, weights and true count.
    pub fn to_json_line(&self, token: usize) -> String {
        let record = DecisionRecord {
            token,
            selected: self.selected.clone(),
            weights: self.weights.iter().map(|w| w.to_f64_lossy()).collect(),
            true_count: self.true_count,
        };
        serde_json::to_string(&record).expect("plain record serializes")
    }
}

/// Serialized form of a [`RoutingDecision`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub token: usize,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub true_count: usize,
}

impl DecisionRecord {
    pub fn parse_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Format(format!("decision line: {e}")))
    }
}

/// Which selected entries take part in the softmax that produces the gates.
pub fn normalization_mask(selected: &[usize], cfg: &RouterConfig) -> Vec<bool> {
    let mut mask = vec![false; cfg.n_total()];
    for &id in selected {
        mask[id] = match cfg.normalization {
            Normalization::AllSelected => true,
            Normalization::TrueOnly => !cfg.is_null(id),
        };
    }
    mask
}

/// Whether a selected expert's gate enters the layer output.
pub fn contributes(id: usize, cfg: &RouterConfig) -> bool {
    if !cfg.is_null(id) {
        return true;
    }
    cfg.null_kind == NullKind::Identity && cfg.normalization == Normalization::AllSelected
}

fn check_logits<T: Scalar>(logits: &[T], cfg: &RouterConfig) -> Result<()> {
    cfg.validate()?;
    if logits.len() != cfg.n_total() {
        return Err(Error::Dimension(format!(
            "{} logits for {} experts",
            logits.len(),
            cfg.n_total()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("router logits must be finite".into()));
    }
    Ok(())
}

fn decide<T: Scalar>(logits: &[T], selected: Vec<usize>, cfg: &RouterConfig) -> RoutingDecision<T> {
    let mask = normalization_mask(&selected, cfg);
    let gates = masked_softmax_slice(logits, |i| mask[i]);
    let weights = selected
        .iter()
        .map(|&id| if contributes(id, cfg) { gates[id] } else { T::zero() })
        .collect();
    let true_count = selected.iter().filter(|&&id| !cfg.is_null(id)).count();
    RoutingDecision {
        selected,
        weights,
        true_count,
        full_softmax: masked_softmax_slice(logits, |_| true),
    }
}

/// Routes one token, dispatching on `cfg.variant`.
pub fn route_token<T: Scalar>(logits: &[T], cfg: &RouterConfig) -> Result<RoutingDecision<T>> {
    check_logits(logits, cfg)?;
    match cfg.variant {
        RouterVariant::TopK => {
            let selected = topk_indices(logits, cfg.k)?;
            Ok(decide(logits, selected, cfg))
        }
        RouterVariant::TopP { p } => Ok(top_p(logits, p, cfg)),
    }
}

/// Routes one token with the cumulative-probability rule, whatever
/// `cfg.variant` says about the threshold source.
pub fn route_token_top_p<T: Scalar>(
    logits: &[T],
    cfg: &RouterConfig,
) -> Result<RoutingDecision<T>> {
    let RouterVariant::TopP { p } = cfg.variant else {
        return Err(Error::Parameter("top-p routing needs a TopP router config".into()));
    };
    check_logits(logits, cfg)?;
    Ok(top_p(logits, p, cfg))
}

fn top_p<T: Scalar>(logits: &[T], p: f64, cfg: &RouterConfig) -> RoutingDecision<T> {
    let probs = masked_softmax_slice(logits, |_| true);
    let selected = cumulative_prefix(&probs, T::lit(p));
    decide(logits, selected, cfg)
}

/// Smallest descending-probability prefix with cumulative mass strictly above
/// `threshold`. Falls back to every entry if rounding keeps the total at or
/// below the threshold.
pub(crate) fn cumulative_prefix<T: Scalar>(probs: &[T], threshold: T) -> Vec<usize> {
    let order = descending_order(probs);
    let mut acc = T::zero();
    for (taken, &id) in order.iter().enumerate() {
        acc = acc + probs[id];
        if acc > threshold {
            return order[..=taken].to_vec();
        }
    }
    order
}

/// Routes every row of a `[B x (n+m)]` logit matrix independently.
pub fn route_batch<T: Scalar>(
    logits: &Tensor<T>,
    cfg: &RouterConfig,
) -> Result<Vec<RoutingDecision<T>>> {
    let (rows, cols) = logits.dims2()?;
    if cols != cfg.n_total() {
        return Err(Error::Dimension(format!(
            "logit matrix {:?} for {} experts",
            logits.shape(),
            cfg.n_total()
        )));
    }
    (0..rows)
        .map(|r| {
            route_token(logits.row(r), cfg).map_err(|e| Error::Token {
                token: r,
                source: Box::new(e),
            })
        })
        .collect()
}
