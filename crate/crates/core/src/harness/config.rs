//! Experiment configuration, read from TOML.
//!
//! ```toml
//! loss_reduction = "sum_over_layers"
//! log_interval = 10
//!
//! [task]
//! kind = "copy_memory"       # or "modular_addition" / "char_lm"
//! seq_len = 8
//!
//! [model]
//! layers = 2
//! d_model = 16
//! d_h = 16
//! vocab = 8
//!
//! [router]
//! n_true = 4
//! n_null = 4
//! k = 2
//!
//! [schedule]
//! alpha1 = 0.02
//! alpha2 = 0.0001
//!
//! [optimizer]
//! lr = 0.3
//! steps = 400
//! batch_size = 8
//! seed = 0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::losses::{AnnealSchedule, LossReduction, Phase};
use crate::routing::{Normalization, RouterConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Every position must reproduce its own input symbol.
    CopyMemory { seq_len: usize },
    /// Two operands `a b`; the second position predicts `(a + b) mod modulus`.
    ModularAddition { modulus: usize },
    /// Next-character prediction over windows of a text file.
    CharLm { corpus: PathBuf, seq_len: usize },
}

impl TaskConfig {
    pub fn seq_len(&self) -> usize {
        match self {
            TaskConfig::CopyMemory { seq_len } | TaskConfig::CharLm { seq_len, .. } => *seq_len,
            TaskConfig::ModularAddition { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_h: usize,
    pub vocab: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

/// Two-phase loss weight: `alpha1` for the first `tight_fraction` of the
/// steps, then `alpha2`. Without `alpha2` the weight stays at `alpha1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub alpha1: f64,
    #[serde(default)]
    pub alpha2: Option<f64>,
    #[serde(default = "default_tight_fraction")]
    pub tight_fraction: f64,
}

fn default_tight_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub router: RouterConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss_reduction: LossReduction,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    /// Held-out sequences used for phase-end and final evaluation.
    #[serde(default = "default_eval_sequences")]
    pub eval_sequences: usize,
}

fn default_log_interval() -> usize {
    10
}

fn default_eval_sequences() -> usize {
    64
}

/// Command-line overrides applied on top of a file config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// A small copy-task setup that trains in well under a second per hundred steps.
    pub fn tiny_copy(n_true: usize, n_null: usize, k: usize) -> Self {
        Self {
            task: TaskConfig::CopyMemory { seq_len: 8 },
            model: ModelConfig {
                layers: 2,
                d_model: 16,
                d_h: 16,
                vocab: 8,
                activation: Activation::Relu,
            },
            router: if n_null == 0 {
                RouterConfig::vanilla(n_true, k)
            } else {
                RouterConfig::top_k(n_true, n_null, k)
            },
            schedule: ScheduleConfig {
                alpha1: 0.02,
                alpha2: Some(0.0001),
                tight_fraction: 0.5,
            },
            optimizer: OptimizerConfig {
                lr: 0.3,
                steps: 400,
                batch_size: 8,
                seed: 0,
            },
            loss_reduction: LossReduction::SumOverLayers,
            log_interval: 10,
            eval_sequences: 64,
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(m) = o.m {
            self.router.n_null = m;
            if m == 0 && self.router.normalization == Normalization::TrueOnly {
                self.router.normalization = Normalization::AllSelected;
            }
        }
        if let Some(k) = o.k {
            self.router.k = k;
        }
        if let Some(a) = o.alpha1 {
            self.schedule.alpha1 = a;
        }
        if let Some(a) = o.alpha2 {
            self.schedule.alpha2 = Some(a);
        }
        if let Some(s) = o.seed {
            self.optimizer.seed = s;
        }
        if let Some(s) = o.steps {
            self.optimizer.steps = s;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let m = &self.model;
        if m.layers == 0 || m.d_model == 0 || m.d_h == 0 || m.vocab == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.optimizer.steps == 0 || self.optimizer.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if !self.optimizer.lr.is_finite() || self.optimizer.lr <= 0.0 {
            return bad(format!("learning rate {} must be positive", self.optimizer.lr));
        }
        if self.log_interval == 0 || self.eval_sequences == 0 {
            return bad("log_interval and eval_sequences must be positive".into());
        }
        if !(self.schedule.tight_fraction > 0.0 && self.schedule.tight_fraction <= 1.0) {
            return bad("tight_fraction must lie in (0, 1]".into());
        }
        self.router
            .validate()
            .map_err(|e| Error::Config(format!("router: {e}")))?;
        match &self.task {
            TaskConfig::CopyMemory { seq_len } => {
                if *seq_len == 0 || m.vocab < 2 {
                    return bad("copy task needs seq_len >= 1 and vocab >= 2".into());
                }
            }
            TaskConfig::ModularAddition { modulus } => {
                if *modulus < 2 || m.vocab < *modulus {
                    return bad(format!("modular addition mod {modulus} needs vocab >= modulus"));
                }
            }
            TaskConfig::CharLm { seq_len, .. } => {
                if *seq_len == 0 {
                    return bad("char_lm needs seq_len >= 1".into());
                }
            }
        }
        self.anneal_schedule()?;
        Ok(())
    }

    /// Phase list over `optimizer.steps`.
    pub fn anneal_schedule(&self) -> Result<AnnealSchedule> {
        let steps = self.optimizer.steps;
        let s = &self.schedule;
        let result = match s.alpha2 {
            None => AnnealSchedule::constant(s.alpha1, steps),
            Some(a2) => {
                let tight = ((steps as f64 * s.tight_fraction).round() as usize).clamp(1, steps);
                if tight == steps {
                    AnnealSchedule::constant(s.alpha1, steps)
                } else {
                    AnnealSchedule::new(vec![
                        Phase { steps: tight, alpha: s.alpha1 },
                        Phase { steps: steps - tight, alpha: a2 },
                    ])
                }
            }
        };
        result.map_err(|e| Error::Config(format!("schedule: {e}")))
    }
}
