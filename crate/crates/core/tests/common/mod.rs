//! Reference implementations written from the definitions, sharing no code
//! with the crate beyond its data types.
#![allow(dead_code)]

use moe_lab::{ExpertParams, MoeLayer64, Normalization, NullKind, RouterConfig};
use rand::Rng;

pub fn mat_vec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let rows = x.len();
    assert_eq!(w.len(), rows * cols);
    (0..cols)
        .map(|j| {
            let mut acc = 0.0;
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w[i * cols + j];
            }
            acc
        })
        .collect()
}

/// Ids sorted by descending logit, ties to the lower id.
pub fn ranked(logits: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    ids
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn expert_output(e: &ExpertParams<f64>, base: Option<&moe_lab::Tensor64>, x: &[f64]) -> Vec<f64> {
    match e {
        ExpertParams::Ffn { w1, w2, activation } => {
            let h_dim = w1.shape()[1];
            let h: Vec<f64> = mat_vec(x, w1.values(), h_dim)
                .into_iter()
                .map(|v| match activation {
                    moe_lab::Activation::Relu => v.max(0.0),
                    moe_lab::Activation::Tanh => v.tanh(),
                })
                .collect();
            mat_vec(&h, w2.values(), w2.shape()[1])
        }
        ExpertParams::LoraDelta { a, b } => {
            let rank = a.shape()[1];
            let base = base.expect("lora layer has a base");
            let y0 = mat_vec(x, base.values(), base.shape()[1]);
            let d = mat_vec(&mat_vec(x, a.values(), rank), b.values(), b.shape()[1]);
            y0.iter().zip(d).map(|(u, v)| u + 2.0 / rank as f64 * v).collect()
        }
    }
}

/// Dense evaluation of `y = sum_i G_i(x) E_i(x)`: every expert is evaluated,
/// gates outside the top-k (or outside the normalization set) are zero.
pub fn dense_layer(layer: &MoeLayer64, x: &[f64]) -> Vec<f64> {
    let cfg = layer.cfg;
    let n = cfg.n_true;
    let logits = mat_vec(x, layer.router_weights.values(), cfg.n_total());
    let top: Vec<usize> = ranked(&logits)[..cfg.k].to_vec();
    let in_norm = |id: usize| top.contains(&id) && (id < n || cfg.normalization == Normalization::AllSelected);
    let max = (0..cfg.n_total()).filter(|&i| in_norm(i)).map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut gates = vec![0.0; cfg.n_total()];
    if max.is_finite() {
        let total: f64 = (0..cfg.n_total()).filter(|&i| in_norm(i)).map(|i| (logits[i] - max).exp()).sum();
        for i in 0..cfg.n_total() {
            if in_norm(i) {
                gates[i] = (logits[i] - max).exp() / total;
            }
        }
    }
    let d_out = layer.d_out();
    let mut y = vec![0.0; d_out];
    for (i, g) in gates.iter().enumerate() {
        let e = if i < n {
            expert_output(&layer.experts[i], layer.lora_base.as_ref(), x)
        } else {
            match cfg.null_kind {
                NullKind::Zero => vec![0.0; d_out],
                NullKind::Identity => x.to_vec(),
            }
        };
        for (acc, v) in y.iter_mut().zip(e) {
            *acc += g * v;
        }
    }
    y
}

/// Classic sparse MoE with no null experts: `G = softmax(TopK(x W))` with
/// unselected logits set to `-inf`, `y = sum_i G_i E_i(x)` summed in expert order.
pub fn vanilla_layer(layer: &MoeLayer64, x: &[f64]) -> Vec<f64> {
    let n = layer.cfg.n_true;
    let mut logits = mat_vec(x, layer.router_weights.values(), n);
    let keep: Vec<usize> = ranked(&logits)[..layer.cfg.k].to_vec();
    for (i, z) in logits.iter_mut().enumerate() {
        if !keep.contains(&i) {
            *z = f64::NEG_INFINITY;
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut g = vec![0.0; n];
    for (gi, z) in g.iter_mut().zip(&logits) {
        *gi = (z - max).exp();
        sum += *gi;
    }
    let mut y = vec![0.0; layer.d_out()];
    for (expert, &gi) in layer.experts.iter().zip(&g) {
        if gi == 0.0 {
            continue;
        }
        let gi = gi / sum;
        let e = expert_output(expert, layer.lora_base.as_ref(), x);
        for (acc, v) in y.iter_mut().zip(e) {
            *acc += gi * v;
        }
    }
    y
}

/// `alpha * N * sum_i f_i P_i`.
pub fn balance_loss(f: &[f64], p: &[f64], alpha: f64) -> f64 {
    alpha * f.len() as f64 * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>()
}

/// The same loss after replacing each null fraction by the mean null fraction.
pub fn null_balance_loss(f: &[f64], p: &[f64], n_true: usize, alpha: f64) -> f64 {
    let nulls = &f[n_true..];
    let mean = nulls.iter().sum::<f64>() / nulls.len() as f64;
    let ft: Vec<f64> = (0..f.len()).map(|i| if i < n_true { f[i] } else { mean }).collect();
    balance_loss(&ft, p, alpha)
}

/// Fewest largest entries whose sum exceeds `threshold`, found by trying
/// every count from one upward.
pub fn brute_sharpness(probs: &[f64], threshold: f64) -> usize {
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for c in 1..=sorted.len() {
        let mut s = 0.0;
        for v in &sorted[..c] {
            s += v;
        }
        if s > threshold {
            return c;
        }
    }
    sorted.len()
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> moe_lab::Tensor64 {
    let vals = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    moe_lab::Tensor64::matrix(rows, cols, vals).unwrap()
}

/// A random router configuration within the given bounds.
pub fn random_router<R: Rng>(rng: &mut R, max_n: usize, max_m: usize, max_k: usize, identity_ok: bool) -> RouterConfig {
    let n = rng.gen_range(1..=max_n);
    let m = rng.gen_range(0..=max_m);
    let k = rng.gen_range(1..=max_k.min(n + m));
    let mut cfg = RouterConfig::top_k(n, m, k);
    if rng.gen_bool(0.5) {
        cfg = cfg.with_normalization(Normalization::AllSelected);
    }
    if identity_ok && rng.gen_bool(0.3) {
        cfg = cfg.with_null_kind(NullKind::Identity);
    }
    cfg
}
