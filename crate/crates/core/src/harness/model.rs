//! Tiny residual sequence model built from MoE blocks.
//!
//! Each block mixes tokens with a causal running mean, then applies an MoE
//! layer; both sub-steps are residual:
//!
//! ```text
//! h = embed[x] + pos[t]
//! per block:  h = h + causal_mean(h) W_mix
//!             h = h + moe(h)
//! logits = h W_out
//! ```
//!
//! Parameter count with `L` layers, width `d`, hidden width `d_h`, vocabulary
//! `V`, sequence length `S`, `n` true and `m` null experts:
//!
//! ```text
//! V d + S d + L (d^2 + d (n + m) + 2 n d d_h) + d V
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::task::Batch;
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layer::{make_moe_block_with, BoundLayer, MoeLayer};
use crate::routing::RoutingDecision;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Scalar> {
    pub mix: Tensor<T>,
    pub moe: MoeLayer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel<T: Scalar> {
    pub embed: Tensor<T>,
    pub pos: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub head: Tensor<T>,
    pub seq_len: usize,
}

/// Closed-form parameter count of [`SeqModel`] for a configuration.
pub fn parameter_count(cfg: &ExperimentConfig) -> usize {
    let d = cfg.model.d_model;
    let v = cfg.model.vocab;
    let s = cfg.task.seq_len();
    let n = cfg.router.n_true;
    let per_layer = d * d + d * cfg.router.n_total() + 2 * n * d * cfg.model.d_h;
    v * d + s * d + cfg.model.layers * per_layer + d * v
}

/// Per-layer values from a recorded forward pass.
pub struct LayerTrace<T> {
    pub router_logits: Var,
    pub decisions: Vec<RoutingDecision<T>>,
}

pub struct ForwardTrace<T> {
    pub logits: Var,
    pub layers: Vec<LayerTrace<T>>,
}

/// Tape handles for every model parameter, in [`SeqModel::named_params`] order.
pub struct BoundModel {
    embed: Var,
    pos: Var,
    blocks: Vec<(Var, BoundLayer)>,
    head: Var,
}

impl BoundModel {
    pub fn params(&self) -> Vec<Var> {
        let mut out = vec![self.embed, self.pos];
        for (mix, layer) in &self.blocks {
            out.push(*mix);
            out.extend(layer.params());
        }
        out.push(self.head);
        out
    }
}

impl<T: Scalar> SeqModel<T> {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed);
        let d = cfg.model.d_model;
        let v = cfg.model.vocab;
        let s = 1.0 / (d as f64).sqrt();
        let embed = Tensor::uniform(vec![v, d], 1.0, &mut rng);
        let pos = Tensor::uniform(vec![cfg.task.seq_len(), d], s, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.model.layers);
        for _ in 0..cfg.model.layers {
            let mix = Tensor::uniform(vec![d, d], s, &mut rng);
            let moe = make_moe_block_with(d, d, cfg.model.d_h, cfg.router, cfg.model.activation, rng.gen())?;
            blocks.push(Block { mix, moe });
        }
        let head = Tensor::uniform(vec![d, v], s, &mut rng);
        Ok(Self { embed, pos, blocks, head, seq_len: cfg.task.seq_len() })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("pos".to_string(), &self.pos)];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("layer{l}.mix"), &b.mix));
            for (name, t) in b.moe.named_params() {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable parameters in [`SeqModel::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed, &mut self.pos];
        for b in &mut self.blocks {
            out.push(&mut b.mix);
            out.extend(b.moe.params_mut());
        }
        out.push(&mut self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        let embed = tape.leaf(self.embed.clone().with_grad());
        let pos = tape.leaf(self.pos.clone().with_grad());
        let blocks = self
            .blocks
            .iter()
            .map(|b| (tape.leaf(b.mix.clone().with_grad()), b.moe.bind(tape)))
            .collect();
        let head = tape.leaf(self.head.clone().with_grad());
        BoundModel { embed, pos, blocks, head }
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &BoundModel, batch: &Batch) -> Result<ForwardTrace<T>> {
        let vocab = self.embed.dims2()?.0;
        for seq in &batch.tokens {
            if seq.len() != self.seq_len {
                return Err(Error::Dimension(format!(
                    "sequence of length {} for a model with seq_len {}",
                    seq.len(),
                    self.seq_len
                )));
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= vocab) {
                return Err(Error::Dimension(format!("token {t} outside vocabulary of {vocab}")));
            }
        }
        let flat: Vec<usize> = batch.tokens.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..self.seq_len).collect();
        let e = tape.gather_rows(bound.embed, flat)?;
        let p = tape.gather_rows(bound.pos, positions)?;
        let mut h = tape.add(e, p)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (block, (mix, moe)) in self.blocks.iter().zip(&bound.blocks) {
            let c = tape.causal_mean(h, self.seq_len)?;
            let mixed = tape.matmul(c, *mix)?;
            h = tape.add(h, mixed)?;
            let out = block.moe.forward_on(tape, moe, h)?;
            h = tape.add(h, out.y)?;
            layers.push(LayerTrace { router_logits: out.logits, decisions: out.decisions });
        }
        let logits = tape.matmul(h, bound.head)?;
        Ok(ForwardTrace { logits, layers })
    }

    /// Writes parameters plus the JSON-encoded experiment config.
    pub fn to_checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint<T> {
        let mut ck = Checkpoint::new();
        ck.push_meta("config", serde_json::to_string(cfg).expect("config serializes"));
        for (name, t) in self.named_params() {
            ck.push_tensor(name, t);
        }
        ck
    }

    /// Rebuilds the model described by a checkpoint's config and loads its
    /// tensors by name, checking every shape.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<(Self, ExperimentConfig)> {
        let cfg_text = ck
            .meta_value("config")
            .ok_or_else(|| Error::Format("checkpoint has no config".into()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(cfg_text).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut model = Self::build(&cfg).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != ck.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                ck.tensors.len(),
                names.len()
            )));
        }
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = ck.tensor(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok((model, cfg))
    }

    /// Appends `m` null experts to every layer's router (columns copied from
    /// the true experts) and switches to top-`k`.
    pub fn expand_routers(&self, m: usize, k: usize) -> Result<Self> {
        let mut out = self.clone();
        for b in &mut out.blocks {
            b.moe = b.moe.with_null_experts(m, k)?;
        }
        Ok(out)
    }

    pub fn expert_flops_per_token(&self) -> f64 {
        self.blocks[0].moe.expert_flops_per_token()
    }
}
