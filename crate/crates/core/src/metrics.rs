//! Expert load, bypass rate, FLOPs accounting and routing sharpness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{cumulative_prefix, RouterConfig, RoutingDecision};
use crate::scalar::Scalar;

/// Mean number of true experts per token.
pub fn average_load<T>(decisions: &[RoutingDecision<T>]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::Parameter("average load of an empty batch".into()));
    }
    let total: usize = decisions.iter().map(|d| d.true_count).sum();
    Ok(total as f64 / decisions.len() as f64)
}

/// Fraction of tokens that selected only null experts.
pub fn bypass_rate<T>(decisions: &[RoutingDecision<T>]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::Parameter("bypass rate of an empty batch".into()));
    }
    let bypassed = decisions.iter().filter(|d| d.true_count == 0).count();
    Ok(bypassed as f64 / decisions.len() as f64)
}

/// Histogram of `true_count` with bins `0..=max_count`.
pub fn count_histogram<T>(decisions: &[RoutingDecision<T>], max_count: usize) -> Vec<usize> {
    let mut hist = vec![0; max_count + 1];
    for d in decisions {
        if d.true_count >= hist.len() {
            hist.resize(d.true_count + 1, 0);
        }
        hist[d.true_count] += 1;
    }
    hist
}

/// Per-token FLOPs of one layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsAccount {
    /// One true-expert forward for one token.
    pub expert_flops: f64,
    /// Router projection for one token in one layer.
    pub router_flops: f64,
    /// Everything outside the MoE layers, per token, whole model.
    pub fixed_flops: f64,
    pub layers: usize,
}

impl FlopsAccount {
    /// Account for two-matrix FFN experts: `2 d_in d_h + 2 d_h d_out` per
    /// expert and `2 d_in (n + m)` for the router.
    pub fn for_ffn(d_in: usize, d_h: usize, d_out: usize, n_total: usize, layers: usize, fixed_flops: f64) -> Self {
        Self {
            expert_flops: (2 * d_in * d_h + 2 * d_h * d_out) as f64,
            router_flops: (2 * d_in * n_total) as f64,
            fixed_flops,
            layers,
        }
    }

    /// Only expert compute counts.
    pub fn experts_only(expert_flops: f64, layers: usize) -> Self {
        Self { expert_flops, router_flops: 0.0, fixed_flops: 0.0, layers }
    }

    /// Per-token FLOPs at an average load of `load` true experts per layer.
    pub fn total(&self, load: f64) -> f64 {
        self.fixed_flops + self.layers as f64 * (self.router_flops + load * self.expert_flops)
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.expert_flops, self.router_flops, self.fixed_flops];
        if parts.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter("FLOPs components must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Percentage of per-token FLOPs saved by running at `adaptive_load` instead of
/// a fixed top-`baseline_k` router.
pub fn flops_reduction(adaptive_load: f64, baseline_k: usize, account: &FlopsAccount) -> Result<f64> {
    if baseline_k == 0 {
        return Err(Error::Parameter("baseline k must be positive".into()));
    }
    account.validate()?;
    let baseline = account.total(baseline_k as f64);
    if baseline <= 0.0 {
        return Err(Error::Numeric("baseline FLOPs total is zero".into()));
    }
    Ok(100.0 * (baseline - account.total(adaptive_load)) / baseline)
}

/// Minimal number of top-probability entries whose cumulative mass is
/// strictly above `threshold`.
pub fn sharpness_count<T: Scalar>(probs: &[T], threshold: f64) -> Result<usize> {
    let total = probs.iter().fold(T::zero(), |s, &p| s + p).to_f64_lossy();
    if probs.is_empty() || (total - 1.0).abs() > 1e-9 || probs.iter().any(|p| *p < T::zero()) {
        return Err(Error::Contract(format!(
            "routing distribution must be nonnegative and sum to 1, sums to {total}"
        )));
    }
    Ok(cumulative_prefix(probs, T::lit(threshold)).len())
}

/// Histogram of sharpness counts; bin `c` holds rows needing `c` experts.
pub fn sharpness_counts<T: Scalar>(rows: &[Vec<T>], threshold: f64) -> Result<Vec<usize>> {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut hist = vec![0; width + 1];
    for (i, row) in rows.iter().enumerate() {
        let c = sharpness_count(row, threshold).map_err(|e| Error::Token {
            token: i,
            source: Box::new(e),
        })?;
        hist[c] += 1;
    }
    Ok(hist)
}

/// Routing summary of one layer over a set of tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub layer: usize,
    pub tokens: usize,
    pub avg_true_load: f64,
    pub bypass_rate: f64,
    /// Bin `c`: tokens that used `c` true experts.
    pub count_histogram: Vec<usize>,
    /// Bin `c`: tokens whose top `c` experts first exceed half the mass.
    pub sharpness_histogram: Vec<usize>,
}

impl RoutingReport {
    pub fn from_decisions<T: Scalar>(
        layer: usize,
        decisions: &[RoutingDecision<T>],
        cfg: &RouterConfig,
    ) -> Result<Self> {
        let rows: Vec<Vec<T>> = decisions.iter().map(|d| d.full_softmax.clone()).collect();
        Ok(Self {
            layer,
            tokens: decisions.len(),
            avg_true_load: average_load(decisions)?,
            bypass_rate: bypass_rate(decisions)?,
            count_histogram: count_histogram(decisions, cfg.max_true_count()),
            sharpness_histogram: sharpness_counts(&rows, 0.5)?,
        })
    }

    /// Number of histogram bins holding at least one token.
    pub fn occupied_count_bins(&self) -> usize {
        self.count_histogram.iter().filter(|&&c| c > 0).count()
    }
}

/// Whole-run totals appended after the per-layer records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub layers: usize,
    pub tokens: usize,
    pub avg_true_load: f64,
    pub bypass_rate: f64,
    pub flops_reduction_pct: Option<f64>,
}

impl RunTotals {
    pub fn from_reports(reports: &[RoutingReport], flops: Option<(&FlopsAccount, usize)>) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Parameter("run totals need at least one layer".into()));
        }
        let n = reports.len() as f64;
        let avg_true_load = reports.iter().map(|r| r.avg_true_load).sum::<f64>() / n;
        let flops_reduction_pct = match flops {
            Some((acc, k)) => Some(flops_reduction(avg_true_load, k, acc)?),
            None => None,
        };
        Ok(Self {
            layers: reports.len(),
            tokens: reports[0].tokens,
            avg_true_load,
            bypass_rate: reports.iter().map(|r| r.bypass_rate).sum::<f64>() / n,
            flops_reduction_pct,
        })
    }
}

/// Line-delimited JSON: one record per layer, then the totals record.
pub fn render_report(reports: &[RoutingReport], totals: &RunTotals) -> String {
    let mut out = String::new();
    for r in reports {
        let mut v = serde_json::to_value(r).expect("report serializes");
        v["record"] = "layer".into();
        out.push_str(&v.to_string());
        out.push('\n');
    }
    let mut v = serde_json::to_value(totals).expect("totals serialize");
    v["record"] = "totals".into();
    out.push_str(&v.to_string());
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decision(true_count: usize) -> RoutingDecision<f64> {
        RoutingDecision {
            selected: vec![],
            weights: vec![],
            true_count,
            full_softmax: vec![0.25; 4],
        }
    }

    #[test]
    fn load_examples() {
        let ds: Vec<_> = [1, 2, 2, 3].into_iter().map(decision).collect();
        assert_eq!(average_load(&ds).unwrap(), 2.0);
        let ds: Vec<_> = [2, 2, 2].into_iter().map(decision).collect();
        assert_eq!(average_load(&ds).unwrap(), 2.0);
        assert_eq!(bypass_rate(&ds).unwrap(), 0.0);
        let ds: Vec<_> = [0, 0].into_iter().map(decision).collect();
        assert_eq!(average_load(&ds).unwrap(), 0.0);
        assert_eq!(bypass_rate(&ds).unwrap(), 1.0);
        let ds: Vec<_> = [0, 1, 0, 2, 1].into_iter().map(decision).collect();
        assert_eq!(bypass_rate(&ds).unwrap(), 0.4);
        assert_eq!(count_histogram(&ds, 2), vec![2, 2, 1]);
        assert!(average_load::<f64>(&[]).is_err());
        assert!(bypass_rate::<f64>(&[]).is_err());
    }

    #[test]
    fn flops_examples() {
        let acc = FlopsAccount::experts_only(100.0, 1);
        let r = flops_reduction(1.66, 2, &acc).unwrap();
        assert!((r - 17.0).abs() < 1e-9);
        assert_eq!(flops_reduction(2.0, 2, &acc).unwrap(), 0.0);
        let with_fixed = FlopsAccount { fixed_flops: 50.0, ..acc };
        assert!(flops_reduction(1.67, 2, &with_fixed).unwrap() < flops_reduction(1.67, 2, &acc).unwrap());
        assert!(flops_reduction(1.0, 0, &acc).is_err());
        let empty = FlopsAccount::experts_only(0.0, 1);
        assert_eq!(flops_reduction(1.0, 2, &empty).unwrap_err().category(), "numeric");
    }

    #[test]
    fn ffn_account_counts_macs_twice() {
        let acc = FlopsAccount::for_ffn(4, 8, 4, 6, 2, 0.0);
        assert_eq!(acc.expert_flops, 128.0);
        assert_eq!(acc.router_flops, 48.0);
    }

    #[test]
    fn sharpness_examples() {
        assert_eq!(sharpness_count(&[0.6, 0.2, 0.1, 0.1], 0.5).unwrap(), 1);
        assert_eq!(sharpness_count(&[0.3, 0.3, 0.2, 0.2], 0.5).unwrap(), 2);
        assert_eq!(sharpness_count(&[0.125; 8], 0.5).unwrap(), 5);
        assert_eq!(sharpness_count(&[0.2, 0.0, 0.8], 0.0).unwrap(), 1);
        assert_eq!(sharpness_count(&[0.5, 0.0, 0.5, 0.0], 1.0 - 1e-9).unwrap(), 2);
        assert_eq!(sharpness_count(&[0.5, 0.6], 0.5).unwrap_err().category(), "contract");
        let hist = sharpness_counts(&[vec![0.6, 0.4], vec![0.5, 0.5], vec![0.1, 0.9]], 0.5).unwrap();
        assert_eq!(hist, vec![0, 2, 1]);
    }

    #[test]
    fn report_lines_have_stable_keys() {
        let ds: Vec<_> = [0, 1, 2, 1].into_iter().map(decision).collect();
        let cfg = RouterConfig::top_k(2, 2, 2);
        let rep = RoutingReport::from_decisions(0, &ds, &cfg).unwrap();
        assert_eq!(rep.count_histogram, vec![1, 2, 1]);
        assert_eq!(rep.occupied_count_bins(), 3);
        assert_eq!(rep.sharpness_histogram, vec![0, 0, 0, 4, 0]);
        let totals = RunTotals::from_reports(std::slice::from_ref(&rep), None).unwrap();
        let text = render_report(&[rep], &totals);
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines[0]["record"], "layer");
        assert_eq!(lines[1]["record"], "totals");
        for key in ["avg_true_load", "bypass_rate", "count_histogram", "sharpness_histogram"] {
            assert!(lines[0].get(key).is_some(), "{key}");
        }
    }
}
