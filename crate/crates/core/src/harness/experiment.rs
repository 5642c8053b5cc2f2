//! Training, baseline comparison and checkpoint analysis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::model::{ForwardTrace, SeqModel};
use super::task::{Batch, Task};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{collect_load_stats, load_loss_null, load_loss_vanilla, mean_router_probs, LossReduction};
use crate::metrics::{flops_reduction, FlopsAccount, RoutingReport, RunTotals};
use crate::routing::RoutingDecision;

const DATA_SALT: u64 = 0x5eed_da7a;
const EVAL_SALT: u64 = 0x5eed_e7a1;

pub type Model = SeqModel<f64>;

/// Held-out evaluation at one point of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task_loss: f64,
    pub accuracy: f64,
    /// Mean over layers of the per-layer average true-expert load.
    pub avg_true_load: f64,
    pub layers: Vec<RoutingReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub alpha: f64,
    pub task_loss: f64,
    /// Weighted auxiliary term as added to the objective.
    pub aux_loss: f64,
    pub layers: Vec<RoutingReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: usize,
    /// Last step of the phase.
    pub end_step: usize,
    pub alpha: f64,
    pub eval: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub logs: Vec<StepLog>,
    pub phases: Vec<PhaseSummary>,
    pub final_eval: Option<EvalSummary>,
    pub diverged: Option<Divergence>,
    pub checkpoint: Option<String>,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.final_eval.as_ref().map(|e| e.accuracy)
    }

    /// Line-delimited JSON: config, one line per log entry, one per phase,
    /// then the final record.
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![serde_json::json!({ "record": "config", "config": self.config })];
        for log in &self.logs {
            let mut v = serde_json::to_value(log).expect("log serializes");
            v["record"] = "step".into();
            lines.push(v);
        }
        for ph in &self.phases {
            let mut v = serde_json::to_value(ph).expect("phase serializes");
            v["record"] = "phase".into();
            lines.push(v);
        }
        lines.push(serde_json::json!({
            "record": "final",
            "final_eval": self.final_eval,
            "diverged": self.diverged,
            "checkpoint": self.checkpoint,
        }));
        lines.iter().map(|v| v.to_string() + "\n").collect()
    }
}

fn reduce(terms: Vec<crate::autodiff::Var>, reduction: LossReduction, tape: &mut Tape<f64>) -> Result<Option<crate::autodiff::Var>> {
    let count = terms.len();
    let mut iter = terms.into_iter();
    let Some(mut acc) = iter.next() else {
        return Ok(None);
    };
    for t in iter {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(match reduction {
        LossReduction::SumOverLayers => acc,
        LossReduction::MeanOverLayers => tape.scale(acc, 1.0 / count as f64),
    }))
}

/// Sum of per-layer auxiliary losses (or their mean), weighted by `alpha`.
/// Layers with null experts use the null-aware loss.
pub fn auxiliary_loss(
    tape: &mut Tape<f64>,
    trace: &ForwardTrace<f64>,
    model: &Model,
    alpha: f64,
    reduction: LossReduction,
) -> Result<Option<crate::autodiff::Var>> {
    let mut terms = Vec::with_capacity(trace.layers.len());
    for (layer, block) in trace.layers.iter().zip(&model.blocks) {
        let cfg = &block.moe.cfg;
        let stats = collect_load_stats(&layer.decisions, cfg)?;
        let p = mean_router_probs(tape, layer.router_logits)?;
        let term = if cfg.n_null > 0 {
            load_loss_null(tape, p, &stats, alpha)?
        } else {
            load_loss_vanilla(tape, p, &stats, alpha)?
        };
        terms.push(term);
    }
    reduce(terms, reduction, tape)
}

fn layer_reports(model: &Model, layers: &[Vec<RoutingDecision<f64>>]) -> Result<Vec<RoutingReport>> {
    layers
        .iter()
        .zip(&model.blocks)
        .enumerate()
        .map(|(l, (d, b))| RoutingReport::from_decisions(l, d, &b.moe.cfg))
        .collect()
}

fn mean_load(reports: &[RoutingReport]) -> f64 {
    reports.iter().map(|r| r.avg_true_load).sum::<f64>() / reports.len() as f64
}

/// Evaluates cross-entropy, accuracy and routing on `batch`.
pub fn evaluate(model: &Model, batch: &Batch) -> Result<EvalSummary> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let trace = model.forward(&mut tape, &bound, batch)?;
    let targets = batch.flat_targets();
    let ce = tape.cross_entropy(trace.logits, targets.clone())?;
    let logits = tape.value(trace.logits);
    let mut hits = 0usize;
    let mut total = 0usize;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let row = logits.row(r);
            let best = crate::tensor::topk_indices(row, 1)?[0];
            hits += usize::from(best == *t);
            total += 1;
        }
    }
    let decisions: Vec<_> = trace.layers.into_iter().map(|l| l.decisions).collect();
    let layers = layer_reports(model, &decisions)?;
    Ok(EvalSummary {
        task_loss: tape.value(ce).values()[0],
        accuracy: hits as f64 / total as f64,
        avg_true_load: mean_load(&layers),
        layers,
    })
}

/// Fixed evaluation set for a config (independent of the training stream).
pub fn eval_batch(cfg: &ExperimentConfig, task: &Task) -> Batch {
    task.sample(cfg.eval_sequences, &mut ChaCha8Rng::seed_from_u64(cfg.optimizer.seed ^ EVAL_SALT))
}

/// Trains a model and returns its record and parameters. A diverged run is
/// not an `Err`: the record carries the divergence and everything logged
/// before it.
pub fn train_model(cfg: &ExperimentConfig) -> Result<(RunRecord, Model)> {
    cfg.validate()?;
    let task = Task::from_config(&cfg.task, cfg.model.vocab)?;
    let schedule = cfg.anneal_schedule()?;
    let mut model = Model::build(cfg)?;
    let eval = eval_batch(cfg, &task);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed ^ DATA_SALT);
    let mut record = RunRecord {
        config: cfg.clone(),
        logs: Vec::new(),
        phases: Vec::new(),
        final_eval: None,
        diverged: None,
        checkpoint: None,
    };
    let steps = cfg.optimizer.steps;
    for step in 0..steps {
        let alpha = schedule.alpha_at(step);
        let batch = task.sample(cfg.optimizer.batch_size, &mut data_rng);
        match train_step(&mut model, &batch, alpha, cfg) {
            Ok(Some(log)) if step % cfg.log_interval == 0 || step + 1 == steps => {
                record.logs.push(StepLog { step, ..log });
            }
            Ok(_) => {}
            Err(e) => {
                record.diverged = Some(Divergence { step, reason: e.to_string() });
                return Ok((record, model));
            }
        }
        let phase = schedule.phase_at(step);
        let phase_ends = step + 1 == steps || schedule.phase_at(step + 1) != phase;
        if phase_ends && phase < schedule.phases.len() {
            let summary = evaluate(&model, &eval)?;
            record.phases.push(PhaseSummary { phase, end_step: step, alpha, eval: summary });
        }
    }
    record.final_eval = record.phases.last().map(|p| p.eval.clone());
    Ok((record, model))
}

/// One gradient-descent step. Returns the log entry for the step (with a
/// placeholder step index).
fn train_step(model: &mut Model, batch: &Batch, alpha: f64, cfg: &ExperimentConfig) -> Result<Option<StepLog>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let trace = model.forward(&mut tape, &bound, batch)?;
    let ce = tape.cross_entropy(trace.logits, batch.flat_targets())?;
    let aux = auxiliary_loss(&mut tape, &trace, model, alpha, cfg.loss_reduction)?;
    let total = match aux {
        Some(a) => tape.add(ce, a)?,
        None => ce,
    };
    let task_loss = tape.value(ce).values()[0];
    let aux_loss = aux.map_or(0.0, |a| tape.value(a).values()[0]);
    if !task_loss.is_finite() || !aux_loss.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite (task {task_loss}, aux {aux_loss})")));
    }
    tape.backward(total)?;
    let lr = cfg.optimizer.lr;
    for (param, var) in model.params_mut().into_iter().zip(bound.params()) {
        if let Some(g) = tape.grad(var) {
            for (w, d) in param.values_mut().iter_mut().zip(g) {
                *w -= lr * d;
            }
        }
    }
    if model.params_mut().iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    let decisions: Vec<_> = trace.layers.into_iter().map(|l| l.decisions).collect();
    Ok(Some(StepLog {
        step: 0,
        alpha,
        task_loss,
        aux_loss,
        layers: layer_reports(model, &decisions)?,
    }))
}

/// Trains and fails with a run error if the loss diverged.
pub fn train(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let (record, _) = train_model(cfg)?;
    if let Some(d) = &record.diverged {
        return Err(Error::Diverged { step: d.step, reason: d.reason.clone() });
    }
    Ok(record)
}

/// Side-by-side runs of a baseline and a null-expert configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seeds: Vec<u64>,
    pub baseline: Vec<RunRecord>,
    pub adaptive: Vec<RunRecord>,
    pub baseline_accuracy: Vec<f64>,
    pub adaptive_accuracy: Vec<f64>,
    pub baseline_mean_accuracy: f64,
    pub adaptive_mean_accuracy: f64,
    pub baseline_load: f64,
    pub adaptive_load: f64,
    /// Saving counting expert compute only.
    pub flops_reduction_experts_pct: f64,
    /// Saving over the whole model (router, mixer and output head included).
    pub flops_reduction_model_pct: f64,
}

impl ComparisonReport {
    /// Summary JSON without the full per-step records.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "seeds": self.seeds,
            "baseline_accuracy": self.baseline_accuracy,
            "adaptive_accuracy": self.adaptive_accuracy,
            "baseline_mean_accuracy": self.baseline_mean_accuracy,
            "adaptive_mean_accuracy": self.adaptive_mean_accuracy,
            "baseline_load": self.baseline_load,
            "adaptive_load": self.adaptive_load,
            "flops_reduction_experts_pct": self.flops_reduction_experts_pct,
            "flops_reduction_model_pct": self.flops_reduction_model_pct,
        })
    }
}

fn check_matched(base: &ExperimentConfig, ada: &ExperimentConfig) -> Result<()> {
    let mismatch = |what: &str| Err(Error::Config(format!("compared runs differ in {what}")));
    if base.task != ada.task {
        return mismatch("task");
    }
    if base.model != ada.model {
        return mismatch("model dimensions or vocabulary");
    }
    if base.router.n_true != ada.router.n_true {
        return mismatch("number of true experts");
    }
    if base.optimizer != ada.optimizer {
        return mismatch("optimizer settings or seed");
    }
    Ok(())
}

fn expert_flops(cfg: &ExperimentConfig) -> f64 {
    (4 * cfg.model.d_model * cfg.model.d_h) as f64
}

/// Per-token compute of the whole model: experts and router per layer, plus
/// the token mixers and output head as fixed cost.
pub fn model_flops(cfg: &ExperimentConfig) -> FlopsAccount {
    let d = cfg.model.d_model;
    let layers = cfg.model.layers;
    FlopsAccount {
        expert_flops: expert_flops(cfg),
        router_flops: (2 * d * cfg.router.n_total()) as f64,
        fixed_flops: (layers * 2 * d * d + 2 * d * cfg.model.vocab) as f64,
        layers,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs both configurations for `seeds` consecutive seeds, the two legs of
/// each seed on separate threads.
pub fn compare(base: &ExperimentConfig, ada: &ExperimentConfig, seeds: usize) -> Result<ComparisonReport> {
    check_matched(base, ada)?;
    if seeds == 0 {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| base.optimizer.seed + i).collect();
    let mut baseline = Vec::new();
    let mut adaptive = Vec::new();
    for &seed in &seed_list {
        let mut b = base.clone();
        b.optimizer.seed = seed;
        let mut a = ada.clone();
        a.optimizer.seed = seed;
        let (rb, ra) = std::thread::scope(|s| {
            let hb = s.spawn(|| train(&b));
            let ha = s.spawn(|| train(&a));
            (hb.join().expect("baseline leg"), ha.join().expect("adaptive leg"))
        });
        baseline.push(rb?);
        adaptive.push(ra?);
    }
    let acc = |rs: &[RunRecord]| rs.iter().map(|r| r.final_accuracy().unwrap_or(f64::NAN)).collect::<Vec<_>>();
    let load = |rs: &[RunRecord]| mean(&rs.iter().map(|r| r.final_eval.as_ref().map_or(f64::NAN, |e| e.avg_true_load)).collect::<Vec<_>>());
    let baseline_accuracy = acc(&baseline);
    let adaptive_accuracy = acc(&adaptive);
    let baseline_load = load(&baseline);
    let adaptive_load = load(&adaptive);

    let experts_only = FlopsAccount::experts_only(expert_flops(ada), ada.model.layers);
    let whole = model_flops(ada);
    let k = base.router.k.min(base.router.n_true);
    Ok(ComparisonReport {
        seeds: seed_list,
        baseline_mean_accuracy: mean(&baseline_accuracy),
        adaptive_mean_accuracy: mean(&adaptive_accuracy),
        baseline_accuracy,
        adaptive_accuracy,
        baseline_load,
        adaptive_load,
        flops_reduction_experts_pct: flops_reduction(adaptive_load, k, &experts_only)?,
        flops_reduction_model_pct: flops_reduction(adaptive_load, k, &whole)?,
        baseline,
        adaptive,
    })
}

/// Per-token routing of one evaluated position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRoute {
    pub sequence: usize,
    pub position: usize,
    pub token: usize,
    /// True experts used at each layer.
    pub true_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub layers: Vec<RoutingReport>,
    pub totals: RunTotals,
    pub tokens: Vec<TokenRoute>,
}

/// Routes an evaluation batch through a trained model and summarizes the
/// decisions per layer and per token. With `flops` the totals include the
/// saving against a top-`k` baseline.
pub fn analyze(model: &Model, batch: &Batch, flops: Option<(&FlopsAccount, usize)>) -> Result<AnalysisReport> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let trace = model.forward(&mut tape, &bound, batch)?;
    let decisions: Vec<_> = trace.layers.into_iter().map(|l| l.decisions).collect();
    let layers = layer_reports(model, &decisions)?;
    let seq_len = model.seq_len;
    let tokens = batch
        .tokens
        .iter()
        .flatten()
        .enumerate()
        .map(|(i, &token)| TokenRoute {
            sequence: i / seq_len,
            position: i % seq_len,
            token,
            true_counts: decisions.iter().map(|l| l[i].true_count).collect(),
        })
        .collect();
    let totals = RunTotals::from_reports(&layers, flops)?;
    Ok(AnalysisReport { layers, totals, tokens })
}
