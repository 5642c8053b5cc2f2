//! Mixture-of-experts layer with virtual null experts.
//!
//! Only the `n` true experts own parameters. Null experts exist as extra
//! router columns; a token whose selection is entirely null gets a zero
//! contribution from the layer and is carried by the surrounding residual.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::routing::{
    contributes, normalization_mask, route_batch, Normalization, NullKind, RouterConfig, RoutingDecision,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameters of one true expert.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpertParams<T> {
    /// `act(x W1) W2`.
    Ffn {
        w1: Tensor<T>,
        w2: Tensor<T>,
        activation: Activation,
    },
    /// `base(x) + (2 / r) (x A) B`; the base projection lives on the layer.
    LoraDelta { a: Tensor<T>, b: Tensor<T> },
}

impl<T: Scalar> ExpertParams<T> {
    fn validate(&self, d_in: usize, d_out: usize) -> Result<()> {
        match self {
            ExpertParams::Ffn { w1, w2, .. } => {
                let (r1, h1) = w1.dims2()?;
                let (h2, c2) = w2.dims2()?;
                if r1 != d_in || h1 != h2 || c2 != d_out || h1 == 0 {
                    return Err(Error::Dimension(format!(
                        "ffn expert {:?}/{:?} for {d_in} -> {d_out}",
                        w1.shape(),
                        w2.shape()
                    )));
                }
            }
            ExpertParams::LoraDelta { a, b } => {
                let (r1, rank) = a.dims2()?;
                let (rank2, c2) = b.dims2()?;
                if r1 != d_in || rank != rank2 || c2 != d_out {
                    return Err(Error::Dimension(format!(
                        "lora expert {:?}/{:?} for {d_in} -> {d_out}",
                        a.shape(),
                        b.shape()
                    )));
                }
                if rank == 0 || rank > d_in.min(d_out) {
                    return Err(Error::Parameter(format!(
                        "lora rank {rank} outside 1..={}",
                        d_in.min(d_out)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Forward FLOPs for one token, counting a multiply-accumulate as 2.
    /// For LoRA experts only the low-rank delta is counted.
    pub fn flops_per_token(&self) -> f64 {
        let mm = |t: &Tensor<T>| {
            let (r, c) = t.dims2().expect("validated");
            2.0 * (r * c) as f64
        };
        match self {
            ExpertParams::Ffn { w1, w2, .. } => mm(w1) + mm(w2),
            ExpertParams::LoraDelta { a, b } => mm(a) + mm(b),
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            ExpertParams::Ffn { w1, w2, .. } => vec![("w1", w1), ("w2", w2)],
            ExpertParams::LoraDelta { a, b } => vec![("lora_a", a), ("lora_b", b)],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            ExpertParams::Ffn { w1, w2, .. } => vec![w1, w2],
            ExpertParams::LoraDelta { a, b } => vec![a, b],
        }
    }
}

/// Router weights plus the true experts, with an evaluation counter.
#[derive(Debug)]
pub struct MoeLayer<T> {
    pub router_weights: Tensor<T>,
    pub experts: Vec<ExpertParams<T>>,
    /// Frozen projection shared by LoRA experts.
    pub lora_base: Option<Tensor<T>>,
    pub cfg: RouterConfig,
    d_in: usize,
    d_out: usize,
    evaluations: AtomicU64,
}

impl<T: Scalar> Clone for MoeLayer<T> {
    fn clone(&self) -> Self {
        Self {
            router_weights: self.router_weights.clone(),
            experts: self.experts.clone(),
            lora_base: self.lora_base.clone(),
            cfg: self.cfg,
            d_in: self.d_in,
            d_out: self.d_out,
            evaluations: AtomicU64::new(self.expert_evaluations()),
        }
    }
}

impl<T: Scalar> PartialEq for MoeLayer<T> {
    fn eq(&self, other: &Self) -> bool {
        self.router_weights == other.router_weights
            && self.experts == other.experts
            && self.lora_base == other.lora_base
            && self.cfg == other.cfg
    }
}

/// Values produced by a recorded layer forward pass.
pub struct LayerOutput<T> {
    pub y: Var,
    pub logits: Var,
    pub decisions: Vec<RoutingDecision<T>>,
}

/// Tape handles for the parameters of one [`MoeLayer`], in
/// [`MoeLayer::named_params`] order.
pub struct BoundLayer {
    pub router: Var,
    pub lora_base: Option<Var>,
    pub experts: Vec<Vec<Var>>,
}

impl BoundLayer {
    pub fn params(&self) -> Vec<Var> {
        let mut out = vec![self.router];
        out.extend(self.lora_base);
        out.extend(self.experts.iter().flatten().copied());
        out
    }
}

impl<T: Scalar> MoeLayer<T> {
    pub fn new(
        router_weights: Tensor<T>,
        experts: Vec<ExpertParams<T>>,
        lora_base: Option<Tensor<T>>,
        cfg: RouterConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d_in, cols) = router_weights.dims2()?;
        if router_weights.shape().len() != 2 {
            return Err(Error::Dimension("router weights must be a matrix".into()));
        }
        if cols != cfg.n_total() {
            return Err(Error::Dimension(format!(
                "router has {cols} columns for {} experts",
                cfg.n_total()
            )));
        }
        if experts.len() != cfg.n_true {
            return Err(Error::Dimension(format!(
                "{} expert parameter sets for {} true experts",
                experts.len(),
                cfg.n_true
            )));
        }
        let d_out = match &experts[0] {
            ExpertParams::Ffn { w2, .. } => w2.dims2()?.1,
            ExpertParams::LoraDelta { b, .. } => b.dims2()?.1,
        };
        for e in &experts {
            e.validate(d_in, d_out)?;
        }
        let needs_base = experts.iter().any(|e| matches!(e, ExpertParams::LoraDelta { .. }));
        match (&lora_base, needs_base) {
            (Some(b), true) if b.dims2()? == (d_in, d_out) => {}
            (None, false) => {}
            _ => return Err(Error::Dimension("lora base projection missing or misshapen".into())),
        }
        if cfg.null_kind == NullKind::Identity && d_in != d_out {
            return Err(Error::Parameter(format!(
                "identity null experts need d_in == d_out, got {d_in} -> {d_out}"
            )));
        }
        Ok(Self {
            router_weights,
            experts,
            lora_base,
            cfg,
            d_in,
            d_out,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// Number of (token, true expert) evaluations performed so far.
    pub fn expert_evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    pub fn expert_flops_per_token(&self) -> f64 {
        self.experts[0].flops_per_token()
    }

    /// Parameters with stable names; the LoRA base is listed but frozen.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("router".to_string(), &self.router_weights)];
        if let Some(b) = &self.lora_base {
            out.push(("lora_base".to_string(), b));
        }
        for (i, e) in self.experts.iter().enumerate() {
            for (name, t) in e.tensors() {
                out.push((format!("expert{i}.{name}"), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.router_weights];
        if let Some(b) = &mut self.lora_base {
            out.push(b);
        }
        for e in &mut self.experts {
            out.extend(e.tensors_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on the tape. Trainable tensors are recorded
    /// with gradients; the LoRA base is recorded as a constant.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundLayer {
        let router = tape.leaf(self.router_weights.clone().with_grad());
        let lora_base = self.lora_base.as_ref().map(|b| tape.constant(b.clone()));
        let experts = self
            .experts
            .iter()
            .map(|e| e.tensors().into_iter().map(|(_, t)| tape.leaf(t.clone().with_grad())).collect())
            .collect();
        BoundLayer { router, lora_base, experts }
    }

    fn expert_forward(&self, tape: &mut Tape<T>, bound: &BoundLayer, i: usize, x: Var) -> Result<Var> {
        let vars = &bound.experts[i];
        match &self.experts[i] {
            ExpertParams::Ffn { activation, .. } => {
                let h = tape.matmul(x, vars[0])?;
                let h = tape.activation(h, *activation);
                tape.matmul(h, vars[1])
            }
            ExpertParams::LoraDelta { a, .. } => {
                let rank = a.dims2()?.1;
                let base = tape.matmul(x, bound.lora_base.expect("validated"))?;
                let low = tape.matmul(x, vars[0])?;
                let delta = tape.matmul(low, vars[1])?;
                let delta = tape.scale(delta, T::lit(2.0 / rank as f64));
                tape.add(base, delta)
            }
        }
    }

    /// Records the layer on `tape` for an input `x` of shape `[B x d_in]`.
    ///
    /// Each true expert runs once on the rows routed to it; its output is
    /// scaled by the gate and scattered back. Unselected experts never run.
    pub fn forward_on(&self, tape: &mut Tape<T>, bound: &BoundLayer, x: Var) -> Result<LayerOutput<T>> {
        let (batch, d_in) = tape.value(x).dims2()?;
        if d_in != self.d_in {
            return Err(Error::Dimension(format!(
                "input {:?} for a layer with d_in = {}",
                tape.value(x).shape(),
                self.d_in
            )));
        }
        if !tape.value(x).is_finite() {
            return Err(Error::Numeric("layer input is not finite".into()));
        }
        let logits = tape.matmul(x, bound.router)?;
        let decisions = route_batch(tape.value(logits), &self.cfg)?;
        let n_total = self.cfg.n_total();
        let mut mask = Vec::with_capacity(batch * n_total);
        let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n_total];
        for (t, d) in decisions.iter().enumerate() {
            mask.extend(normalization_mask(&d.selected, &self.cfg));
            for &id in &d.selected {
                if contributes(id, &self.cfg) {
                    routed[id].push(t);
                }
            }
        }
        let gates = tape.masked_softmax(logits, mask)?;

        let mut y: Option<Var> = None;
        for (id, tokens) in routed.into_iter().enumerate() {
            if tokens.is_empty() {
                continue;
            }
            let xs = tape.gather_rows(x, tokens.clone())?;
            let out = if self.cfg.is_null(id) {
                xs
            } else {
                self.evaluations.fetch_add(tokens.len() as u64, Ordering::Relaxed);
                self.expert_forward(tape, bound, id, xs)?
            };
            let g = tape.gather_elems(gates, tokens.iter().map(|&t| (t, id)).collect())?;
            let weighted = tape.mul_column(out, g)?;
            let spread = tape.scatter_rows(weighted, tokens, batch)?;
            y = Some(match y {
                Some(acc) => tape.add(acc, spread)?,
                None => spread,
            });
        }
        let y = match y {
            Some(y) => y,
            None => tape.constant(Tensor::zeros(vec![batch, self.d_out])),
        };
        Ok(LayerOutput { y, logits, decisions })
    }

    /// Builds a copy with `m` null experts appended to the router by
    /// duplicating true columns, and top-`k` selection. A vanilla router
    /// switches to normalizing over the selected true experts only.
    pub fn with_null_experts(&self, m: usize, k: usize) -> Result<Self> {
        let base = if self.cfg.n_null == 0 {
            self.router_weights.clone()
        } else {
            let (rows, _) = self.router_weights.dims2()?;
            let n = self.cfg.n_true;
            let vals = (0..rows)
                .flat_map(|r| self.router_weights.row(r)[..n].to_vec())
                .collect();
            Tensor::matrix(rows, n, vals)?
        };
        let mut cfg = RouterConfig { n_null: m, k, ..self.cfg };
        if m == 0 {
            cfg.normalization = Normalization::AllSelected;
        } else if self.cfg.n_null == 0 {
            cfg.normalization = Normalization::TrueOnly;
        }
        let router = if m == 0 { base } else { expand_router(&base, m)? };
        Self::new(router, self.experts.clone(), self.lora_base.clone(), cfg)
    }
}

/// Runs the layer on a fresh tape and returns the output values and decisions.
pub fn layer_forward<T: Scalar>(
    x_batch: &Tensor<T>,
    layer: &MoeLayer<T>,
) -> Result<(Tensor<T>, Vec<RoutingDecision<T>>)> {
    let mut tape = Tape::new();
    let bound = layer.bind(&mut tape);
    let x = tape.constant(x_batch.clone());
    let out = layer.forward_on(&mut tape, &bound, x)?;
    Ok((tape.value(out.y).clone(), out.decisions))
}

/// Appends `m` null columns to a `[d_in x n]` router; null column `j` copies
/// true column `j mod n`.
pub fn expand_router<T: Scalar>(base_weights: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let (rows, n) = base_weights.dims2()?;
    if n == 0 {
        return Err(Error::Parameter("cannot expand a router with no true experts".into()));
    }
    if m == 0 {
        return Err(Error::Parameter("router expansion needs m >= 1".into()));
    }
    let mut out = Vec::with_capacity(rows * (n + m));
    for r in 0..rows {
        let row = base_weights.row(r);
        out.extend_from_slice(row);
        out.extend((0..m).map(|j| row[j % n]));
    }
    Tensor::matrix(rows, n + m, out)
}

/// Two-matrix FFN experts and router, all drawn from uniform(-s, s) with
/// `s = 1 / sqrt(d_in)`.
pub fn make_moe_block<T: Scalar>(
    d_in: usize,
    d_out: usize,
    d_h: usize,
    cfg: RouterConfig,
    seed: u64,
) -> Result<MoeLayer<T>> {
    make_moe_block_with(d_in, d_out, d_h, cfg, Activation::Relu, seed)
}

pub fn make_moe_block_with<T: Scalar>(
    d_in: usize,
    d_out: usize,
    d_h: usize,
    cfg: RouterConfig,
    activation: Activation,
    seed: u64,
) -> Result<MoeLayer<T>> {
    if d_in == 0 || d_out == 0 || d_h == 0 {
        return Err(Error::Parameter("layer dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (d_in as f64).sqrt();
    let router = Tensor::uniform(vec![d_in, cfg.n_total()], s, &mut rng);
    let experts = (0..cfg.n_true)
        .map(|_| ExpertParams::Ffn {
            w1: Tensor::uniform(vec![d_in, d_h], s, &mut rng),
            w2: Tensor::uniform(vec![d_h, d_out], s, &mut rng),
            activation,
        })
        .collect();
    MoeLayer::new(router, experts, None, cfg)
}

/// LoRA-expert layer: a shared frozen base plus per-expert rank-`rank` deltas.
pub fn make_lora_block<T: Scalar>(
    d_in: usize,
    d_out: usize,
    rank: usize,
    cfg: RouterConfig,
    seed: u64,
) -> Result<MoeLayer<T>> {
    if d_in == 0 || d_out == 0 {
        return Err(Error::Parameter("layer dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (d_in as f64).sqrt();
    let router = Tensor::uniform(vec![d_in, cfg.n_total()], s, &mut rng);
    let base = Tensor::uniform(vec![d_in, d_out], s, &mut rng);
    let experts = (0..cfg.n_true)
        .map(|_| ExpertParams::LoraDelta {
            a: Tensor::uniform(vec![d_in, rank], s, &mut rng),
            b: Tensor::uniform(vec![rank, d_out], s, &mut rng),
        })
        .collect();
    MoeLayer::new(router, experts, Some(base), cfg)
}
