//! Load-balancing auxiliary losses and the annealed loss weight.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::routing::{RouterConfig, RoutingDecision};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dispatch fractions and mean router probabilities of one layer over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadStats<T> {
    /// Fraction of tokens that selected each expert.
    pub f: Vec<T>,
    /// Mean full-softmax probability of each expert.
    pub p: Vec<T>,
    /// `f` with every null entry replaced by the mean null fraction.
    pub f_tilde: Vec<T>,
    pub batch_size: usize,
    pub n_true: usize,
    pub n_null: usize,
}

/// Builds `f_tilde` from `f`: true entries kept, null entries averaged.
pub fn average_null_fractions<T: Scalar>(f: &[T], n_true: usize) -> Vec<T> {
    let m = f.len() - n_true;
    if m == 0 {
        return f.to_vec();
    }
    let mean = f[n_true..].iter().fold(T::zero(), |s, &x| s + x) / T::lit(m as f64);
    f.iter()
        .enumerate()
        .map(|(i, &x)| if i < n_true { x } else { mean })
        .collect()
}

pub fn collect_load_stats<T: Scalar>(
    decisions: &[RoutingDecision<T>],
    cfg: &RouterConfig,
) -> Result<LoadStats<T>> {
    if decisions.is_empty() {
        return Err(Error::Parameter("load statistics need a nonempty batch".into()));
    }
    let n_total = cfg.n_total();
    let mut counts = vec![0usize; n_total];
    let mut p = vec![T::zero(); n_total];
    for d in decisions {
        if d.full_softmax.len() != n_total {
            return Err(Error::Dimension(format!(
                "decision over {} experts for a router with {n_total}",
                d.full_softmax.len()
            )));
        }
        for &id in &d.selected {
            counts[id] += 1;
        }
        for (acc, &q) in p.iter_mut().zip(&d.full_softmax) {
            *acc = *acc + q;
        }
    }
    let b = T::lit(decisions.len() as f64);
    let f: Vec<T> = counts.iter().map(|&c| T::lit(c as f64) / b).collect();
    p.iter_mut().for_each(|x| *x = *x / b);
    Ok(LoadStats {
        f_tilde: average_null_fractions(&f, cfg.n_true),
        f,
        p,
        batch_size: decisions.len(),
        n_true: cfg.n_true,
        n_null: cfg.n_null,
    })
}

impl<T: Scalar> LoadStats<T> {
    pub fn n_total(&self) -> usize {
        self.f.len()
    }

    /// Value of the plain loss, every expert balanced individually.
    pub fn vanilla_loss(&self, alpha: T) -> T {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(self.p.clone()));
        let l = load_loss_vanilla(&mut tape, p, self, alpha).expect("stats are consistent");
        tape.value(l).values()[0]
    }

    /// Value of the null-aware loss.
    pub fn null_loss(&self, alpha: T) -> Result<T> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(self.p.clone()));
        let l = load_loss_null(&mut tape, p, self, alpha)?;
        Ok(tape.value(l).values()[0])
    }

    /// JSON record for one layer at one step.
    pub fn to_json_line(&self, layer: usize, step: usize) -> String {
        let conv = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>();
        serde_json::json!({
            "layer": layer,
            "step": step,
            "batch_size": self.batch_size,
            "n_true": self.n_true,
            "n_null": self.n_null,
            "f": conv(&self.f),
            "p": conv(&self.p),
            "f_tilde": conv(&self.f_tilde),
        })
        .to_string()
    }
}

/// Batch-mean of the full softmax of `logits` (`[B x N]`), as `[1 x N]`.
pub fn mean_router_probs<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let probs = tape.softmax(logits)?;
    tape.mean_rows(probs)
}

fn weighted_loss<T: Scalar>(tape: &mut Tape<T>, p: Var, weights: &[T], alpha: T) -> Result<Var> {
    let n = T::lit(weights.len() as f64);
    let coeffs = weights.iter().map(|&w| alpha * n * w).collect();
    tape.weighted_sum(p, coeffs)
}

/// `alpha * N * sum_i f_i P_i` over all `N` experts. Gradient flows through
/// `p` only; the dispatch fractions are constants.
pub fn load_loss_vanilla<T: Scalar>(
    tape: &mut Tape<T>,
    p: Var,
    stats: &LoadStats<T>,
    alpha: T,
) -> Result<Var> {
    weighted_loss(tape, p, &stats.f, alpha)
}

/// `alpha * (n + m) * sum_i f~_i P_i` where null experts share the mean
/// null dispatch fraction.
pub fn load_loss_null<T: Scalar>(
    tape: &mut Tape<T>,
    p: Var,
    stats: &LoadStats<T>,
    alpha: T,
) -> Result<Var> {
    if stats.n_null == 0 {
        return Err(Error::Parameter(
            "null-aware load loss needs m >= 1; use the vanilla loss without null experts".into(),
        ));
    }
    weighted_loss(tape, p, &stats.f_tilde, alpha)
}

/// How per-layer auxiliary losses combine into one term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    #[default]
    SumOverLayers,
    MeanOverLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub steps: usize,
    pub alpha: f64,
}

/// Piecewise-constant loss weight; the last phase never ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub phases: Vec<Phase>,
}

impl AnnealSchedule {
    pub fn new(phases: Vec<Phase>) -> Result<Self> {
        let s = Self { phases };
        s.validate()?;
        Ok(s)
    }

    /// A large weight for `tight_steps`, then a small one.
    pub fn tight_loose(tight_alpha: f64, tight_steps: usize, loose_alpha: f64, loose_steps: usize) -> Result<Self> {
        Self::new(vec![
            Phase { steps: tight_steps, alpha: tight_alpha },
            Phase { steps: loose_steps, alpha: loose_alpha },
        ])
    }

    pub fn constant(alpha: f64, steps: usize) -> Result<Self> {
        Self::new(vec![Phase { steps, alpha }])
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Parameter("schedule has no phases".into()));
        }
        let mut prev = f64::INFINITY;
        for ph in &self.phases {
            if ph.steps == 0 {
                return Err(Error::Parameter("schedule phase with zero steps".into()));
            }
            if !ph.alpha.is_finite() || ph.alpha < 0.0 {
                return Err(Error::Parameter(format!("schedule alpha {} must be >= 0", ph.alpha)));
            }
            if ph.alpha > prev {
                return Err(Error::Parameter("schedule alpha must not increase".into()));
            }
            prev = ph.alpha;
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    /// Index of the phase containing `step`.
    pub fn phase_at(&self, step: usize) -> usize {
        let mut end = 0;
        for (i, ph) in self.phases.iter().enumerate() {
            end += ph.steps;
            if step < end {
                return i;
            }
        }
        self.phases.len() - 1
    }

    pub fn alpha_at(&self, step: usize) -> f64 {
        self.phases[self.phase_at(step)].alpha
    }
}

/// Free-function form of [`AnnealSchedule::alpha_at`].
pub fn alpha_at(schedule: &AnnealSchedule, step: usize) -> f64 {
    schedule.alpha_at(step)
}
