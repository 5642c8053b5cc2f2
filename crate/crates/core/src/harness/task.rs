//! Synthetic sequence tasks.

use rand::Rng;

use super::config::TaskConfig;
use crate::error::{Error, Result};

/// A batch of equal-length sequences with optional per-position targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub targets: Vec<Vec<Option<usize>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn flat_targets(&self) -> Vec<Option<usize>> {
        self.targets.iter().flatten().copied().collect()
    }

    /// Reorders sequences; `order[i]` is the source index of new sequence `i`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            tokens: order.iter().map(|&i| self.tokens[i].clone()).collect(),
            targets: order.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Task {
    CopyMemory { seq_len: usize, vocab: usize },
    ModularAddition { modulus: usize },
    CharLm { seq_len: usize, text: Vec<usize>, alphabet: Vec<char> },
}

impl Task {
    /// Instantiates the task; a corpus is read and checked against `vocab`.
    pub fn from_config(cfg: &TaskConfig, vocab: usize) -> Result<Self> {
        Ok(match cfg {
            TaskConfig::CopyMemory { seq_len } => Task::CopyMemory { seq_len: *seq_len, vocab },
            TaskConfig::ModularAddition { modulus } => Task::ModularAddition { modulus: *modulus },
            TaskConfig::CharLm { corpus, seq_len } => {
                let raw = std::fs::read_to_string(corpus)
                    .map_err(|e| Error::Config(format!("corpus {}: {e}", corpus.display())))?;
                let mut alphabet: Vec<char> = raw.chars().collect();
                alphabet.sort_unstable();
                alphabet.dedup();
                if alphabet.len() > vocab {
                    return Err(Error::Config(format!(
                        "corpus has {} distinct characters but vocab is {vocab}",
                        alphabet.len()
                    )));
                }
                let text: Vec<usize> = raw
                    .chars()
                    .map(|c| alphabet.binary_search(&c).expect("char from corpus"))
                    .collect();
                if text.len() < seq_len + 1 {
                    return Err(Error::Config(format!(
                        "corpus of {} characters is shorter than one window of {}",
                        text.len(),
                        seq_len + 1
                    )));
                }
                Task::CharLm { seq_len: *seq_len, text, alphabet }
            }
        })
    }

    pub fn seq_len(&self) -> usize {
        match self {
            Task::CopyMemory { seq_len, .. } | Task::CharLm { seq_len, .. } => *seq_len,
            Task::ModularAddition { .. } => 2,
        }
    }

    /// Loss of predicting uniformly over the task's symbols.
    pub fn uniform_loss(&self) -> f64 {
        let symbols = match self {
            Task::CopyMemory { vocab, .. } => *vocab,
            Task::ModularAddition { modulus } => *modulus,
            Task::CharLm { alphabet, .. } => alphabet.len(),
        };
        (symbols as f64).ln()
    }

    pub fn sample<R: Rng>(&self, sequences: usize, rng: &mut R) -> Batch {
        let mut tokens = Vec::with_capacity(sequences);
        let mut targets = Vec::with_capacity(sequences);
        for _ in 0..sequences {
            match self {
                Task::CopyMemory { seq_len, vocab } => {
                    let seq: Vec<usize> = (0..*seq_len).map(|_| rng.gen_range(0..*vocab)).collect();
                    targets.push(seq.iter().map(|&t| Some(t)).collect());
                    tokens.push(seq);
                }
                Task::ModularAddition { modulus } => {
                    let a = rng.gen_range(0..*modulus);
                    let b = rng.gen_range(0..*modulus);
                    tokens.push(vec![a, b]);
                    targets.push(vec![None, Some((a + b) % modulus)]);
                }
                Task::CharLm { seq_len, text, .. } => {
                    let start = rng.gen_range(0..text.len() - seq_len);
                    tokens.push(text[start..start + seq_len].to_vec());
                    targets.push(text[start + 1..=start + seq_len].iter().map(|&t| Some(t)).collect());
                }
            }
        }
        Batch { tokens, targets }
    }
}
