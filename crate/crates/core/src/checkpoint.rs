//! Flat text checkpoints: named tensors written row-major in decimal.
//!
//! ```text
//! moe-lab-checkpoint 1
//! meta <key> <value...>
//! tensor <name> <d0>x<d1> <v0> <v1> ...
//! ```
//!
//! Values use 17 significant digits, so `f64` tensors round-trip bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &str = "moe-lab-checkpoint 1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint<T> {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        Self { meta: Vec::new(), tensors: Vec::new() }
    }

    pub fn push_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.push((key.to_string(), value.into()));
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let mut t = tensor.clone();
        t.grad = None;
        t.requires_grad = false;
        self.tensors.push((name.into(), t));
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn render(&self) -> String {
        let mut out = String::from(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            let shape = if t.shape().is_empty() {
                "scalar".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
            };
            let _ = write!(out, "tensor {name} {shape}");
            for v in t.values() {
                let _ = write!(out, " {v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == MAGIC => {}
            _ => return Err(Error::Format("missing checkpoint header".into())),
        }
        let mut ck = Self::new();
        for (no, line) in lines {
            let bad = |what: &str| Error::Format(format!("line {}: {what}", no + 1));
            if line.trim().is_empty() {
                continue;
            }
            let (kind, rest) = line.split_once(' ').ok_or_else(|| bad("truncated record"))?;
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let mut parts = rest.split_ascii_whitespace();
                    let name = parts.next().ok_or_else(|| bad("tensor without name"))?;
                    let shape_txt = parts.next().ok_or_else(|| bad("tensor without shape"))?;
                    let shape: Vec<usize> = if shape_txt == "scalar" {
                        vec![]
                    } else {
                        shape_txt
                            .split('x')
                            .map(|d| d.parse().map_err(|_| bad("bad shape")))
                            .collect::<Result<_>>()?
                    };
                    let values: Vec<T> = parts
                        .map(|v| v.parse::<T>().map_err(|_| bad("bad value")))
                        .collect::<Result<_>>()?;
                    let t = Tensor::new(shape, values).map_err(|e| bad(&e.to_string()))?;
                    ck.tensors.push((name.to_string(), t));
                }
                _ => return Err(bad("unknown record kind")),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
