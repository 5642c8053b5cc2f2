mod common;

use moe_lab::harness::config::ExperimentConfig;
use moe_lab::harness::model::SeqModel;
use moe_lab::harness::task::Task;
use moe_lab::layer::make_moe_block_with;
use moe_lab::losses::{average_null_fractions, AnnealSchedule, Phase};
use moe_lab::metrics::{flops_reduction, sharpness_count};
use moe_lab::{
    expand_router, layer_forward, load_loss_null, load_loss_vanilla, make_moe_block, route_batch, route_token,
    softmax, topk_mask, Activation, LoadStats64, Normalization, RouterConfig, Tape64, Tensor64,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logits_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, len)
}

fn router_strategy() -> impl Strategy<Value = RouterConfig> {
    (1usize..=6, 0usize..=6, any::<prop::sample::Index>(), any::<bool>()).prop_map(|(n, m, k, all)| {
        let k = k.index(n + m) + 1;
        let cfg = RouterConfig::top_k(n, m, k);
        if all { cfg.with_normalization(Normalization::AllSelected) } else { cfg }
    })
}

fn uniform_stats(n: usize, m: usize, f: Vec<f64>, p: Vec<f64>) -> LoadStats64 {
    LoadStats64 { f_tilde: average_null_fractions(&f, n), f, p, batch_size: 1, n_true: n, n_null: m }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one_and_masked_entries_vanish(z in logits_strategy(7), k in 1usize..=7) {
        let (_, masked) = topk_mask(&Tensor64::vector(z.clone()), k).unwrap();
        let p = softmax(&masked, 0).unwrap();
        let s: f64 = p.values().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert_eq!(p.values().iter().filter(|&&v| v == 0.0).count(), 7 - k);
    }

    #[test]
    fn topk_follows_stable_descending_order(z in prop::collection::vec(-3i32..3, 1..10), k in 1usize..10) {
        let z: Vec<f64> = z.into_iter().map(f64::from).collect();
        let k = k.min(z.len());
        let got = moe_lab::tensor::topk_indices(&z, k).unwrap();
        prop_assert_eq!(got, common::ranked(&z)[..k].to_vec());
    }

    #[test]
    fn batch_routing_is_rowwise(cfg in router_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_matrix(&mut rng, 9, cfg.n_total(), 3.0);
        let batch = route_batch(&x, &cfg).unwrap();
        for (r, d) in batch.iter().enumerate() {
            prop_assert_eq!(d, &route_token(x.row(r), &cfg).unwrap());
        }
    }

    #[test]
    fn true_only_weights_are_normalized(z in logits_strategy(10), n in 1usize..=9, k in 1usize..=10) {
        let cfg = RouterConfig::top_k(n, 10 - n, k);
        let d = route_token(&z, &cfg).unwrap();
        let true_mass: f64 = d.selected.iter().zip(&d.weights).filter(|(&id, _)| id < n).map(|(_, w)| w).sum();
        if d.true_count >= 1 {
            prop_assert!((true_mass - 1.0).abs() < 1e-12);
        } else {
            prop_assert!(d.is_bypass());
        }
        for (&id, &w) in d.selected.iter().zip(&d.weights) {
            if id >= n {
                prop_assert_eq!(w, 0.0);
            }
        }
    }

    #[test]
    fn raising_a_true_logit_never_lowers_true_count(
        cfg in router_strategy(), z in logits_strategy(12), pick in any::<prop::sample::Index>(), bump in 0.0f64..5.0,
    ) {
        let z = &z[..cfg.n_total()];
        let before = route_token(z, &cfg).unwrap().true_count;
        let mut raised = z.to_vec();
        raised[pick.index(cfg.n_true)] += bump;
        prop_assert!(route_token(&raised, &cfg).unwrap().true_count >= before);
    }

    #[test]
    fn no_nulls_reproduces_classic_top_k(z in logits_strategy(6), k in 1usize..=6) {
        let d = route_token(&z, &RouterConfig::vanilla(6, k)).unwrap();
        let (idx, masked) = topk_mask(&Tensor64::vector(z.clone()), k).unwrap();
        let g = softmax(&masked, 0).unwrap();
        prop_assert_eq!(&d.selected, &idx);
        for (&id, &w) in d.selected.iter().zip(&d.weights) {
            prop_assert_eq!(w, g.values()[id]);
        }
    }

    #[test]
    fn shifting_logits_keeps_selection_and_weights(cfg in router_strategy(), z in logits_strategy(12), c in -10.0f64..10.0) {
        let z = &z[..cfg.n_total()];
        let a = route_token(z, &cfg).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let b = route_token(&shifted, &cfg).unwrap();
        prop_assert_eq!(&a.selected, &b.selected);
        for (u, v) in a.weights.iter().zip(&b.weights) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_stats_give_alpha_times_k(n in 1usize..10, m in 1usize..10, k in any::<prop::sample::Index>(), alpha in 0.0f64..1.0) {
        let total = n + m;
        let k = k.index(total) + 1;
        let s = uniform_stats(n, m, vec![k as f64 / total as f64; total], vec![1.0 / total as f64; total]);
        prop_assert!((s.vanilla_loss(alpha) - alpha * k as f64).abs() < 1e-12);
        prop_assert!((s.null_loss(alpha).unwrap() - alpha * k as f64).abs() < 1e-12);
    }

    #[test]
    fn losses_are_homogeneous_in_alpha(seed in any::<u64>(), alpha in 0.0f64..2.0, scale in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = uniform_stats(3, 4, f.clone(), p.clone());
        prop_assert!((s.vanilla_loss(alpha * scale) - scale * s.vanilla_loss(alpha)).abs() < 1e-12);
        prop_assert!((s.null_loss(alpha * scale).unwrap() - scale * s.null_loss(alpha).unwrap()).abs() < 1e-12);
        prop_assert!((s.vanilla_loss(alpha) - common::balance_loss(&f, &p, alpha)).abs() < 1e-12);
        prop_assert!((s.null_loss(alpha).unwrap() - common::null_balance_loss(&f, &p, 3, alpha)).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_in_p_matches_finite_differences(seed in any::<u64>(), null in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let stats = uniform_stats(2, 4, f.clone(), p.clone());
        let mut tape = Tape64::new();
        let pv = tape.leaf(Tensor64::vector(p.clone()).with_grad());
        let l = if null {
            load_loss_null(&mut tape, pv, &stats, 0.3).unwrap()
        } else {
            load_loss_vanilla(&mut tape, pv, &stats, 0.3).unwrap()
        };
        tape.backward(l).unwrap();
        let g = tape.grad(pv).unwrap().to_vec();
        let eval = |q: &[f64]| if null { common::null_balance_loss(&f, q, 2, 0.3) } else { common::balance_loss(&f, q, 0.3) };
        let h = 1e-5;
        for i in 0..6 {
            let mut up = p.clone();
            up[i] += h;
            let mut dn = p.clone();
            dn[i] -= h;
            let num = (eval(&up) - eval(&dn)) / (2.0 * h);
            prop_assert!((g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-6) < 1e-6);
        }
    }

    #[test]
    fn flops_reduction_decreases_with_load_and_fixed_cost(
        load in 0.0f64..1.9, dl in 0.01f64..0.1, fixed in 0.0f64..1e4, df in 1.0f64..1e3,
    ) {
        let acc = |f| moe_lab::FlopsAccount { expert_flops: 100.0, router_flops: 3.0, fixed_flops: f, layers: 2 };
        let r = flops_reduction(load, 2, &acc(fixed)).unwrap();
        prop_assert!(flops_reduction(load + dl, 2, &acc(fixed)).unwrap() < r);
        prop_assert!(flops_reduction(load, 2, &acc(fixed + df)).unwrap() < r);
    }

    #[test]
    fn sharpness_bounds(z in logits_strategy(9)) {
        let p = softmax(&Tensor64::vector(z), 0).unwrap().into_values();
        let c = sharpness_count(&p, 0.5).unwrap();
        prop_assert!((1..=9).contains(&c));
        prop_assert_eq!(sharpness_count(&p, 0.0).unwrap(), 1);
        prop_assert_eq!(sharpness_count(&p, 1.0 - 1e-9).unwrap(), p.iter().filter(|&&v| v > 0.0).count());
    }

    #[test]
    fn anneal_schedule_is_piecewise_constant(a in 1usize..50, b in 1usize..50, step in 0usize..200) {
        let s = AnnealSchedule::new(vec![Phase { steps: a, alpha: 0.02 }, Phase { steps: b, alpha: 1e-4 }]).unwrap();
        let expected = if step < a { 0.02 } else { 1e-4 };
        prop_assert_eq!(moe_lab::alpha_at(&s, step), expected);
    }

    #[test]
    fn expanded_nulls_twin_their_true_columns(n in 1usize..6, m in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = common::random_matrix(&mut rng, 5, n, 1.0);
        let wide = expand_router(&w, m).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let full = common::softmax(&common::mat_vec(&x, wide.values(), n + m));
        let base = common::softmax(&common::mat_vec(&x, w.values(), n));
        let true_mass: f64 = full[..n].iter().sum();
        for j in 0..m {
            prop_assert_eq!(full[n + j], full[j % n]);
        }
        for i in 0..n {
            prop_assert!((full[i] / true_mass - base[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn only_routed_true_experts_are_evaluated(cfg in router_strategy(), seed in any::<u64>(), b in 1usize..20) {
        let layer = make_moe_block::<f64>(5, 5, 4, cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = common::random_matrix(&mut rng, b, 5, 2.0);
        let (_, decisions) = layer_forward(&x, &layer).unwrap();
        let routed: usize = decisions.iter().map(|d| d.true_count).sum();
        prop_assert_eq!(layer.expert_evaluations(), routed as u64);
    }

    #[test]
    fn unselected_experts_get_zero_gradient(cfg in router_strategy(), seed in any::<u64>()) {
        let layer = make_moe_block_with::<f64>(4, 4, 3, cfg, Activation::Tanh, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let x = common::random_matrix(&mut rng, 1, 4, 2.0);
        let mut tape = Tape64::new();
        let bound = layer.bind(&mut tape);
        let xv = tape.constant(x);
        let out = layer.forward_on(&mut tape, &bound, xv).unwrap();
        let loss = tape.sum(out.y);
        tape.backward(loss).unwrap();
        let selected = &out.decisions[0].selected;
        for (i, vars) in bound.experts.iter().enumerate() {
            for &v in vars {
                let g = tape.grad(v).unwrap();
                if !selected.contains(&i) {
                    prop_assert!(g.iter().all(|&x| x == 0.0));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn model_is_causal(seed in any::<u64>(), pos in 0usize..7, tok in 0usize..8) {
        let mut cfg = ExperimentConfig::tiny_copy(4, 4, 2);
        cfg.optimizer.seed = seed;
        let model = SeqModel::<f64>::build(&cfg).unwrap();
        let task = Task::from_config(&cfg.task, cfg.model.vocab).unwrap();
        let batch = task.sample(2, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut edited = batch.clone();
        edited.tokens[0][pos + 1] = tok;
        let run = |b| {
            let mut tape = Tape64::new();
            let bound = model.bind(&mut tape);
            let t = model.forward(&mut tape, &bound, b).unwrap();
            (tape.value(t.logits).clone(), t.layers.into_iter().map(|l| l.decisions).collect::<Vec<_>>())
        };
        let (la, da) = run(&batch);
        let (lb, db) = run(&edited);
        for r in 0..=pos {
            prop_assert_eq!(la.row(r), lb.row(r));
            for l in 0..2 {
                prop_assert_eq!(&da[l][r], &db[l][r]);
            }
        }
    }

    #[test]
    fn uniform_f_minimizes_balance_term(n in 2usize..6, k in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let k = (k.index(n) + 1) as f64;
        let at = |f: &[f64]| f.iter().map(|v| v * v / k).sum::<f64>();
        let uniform = at(&vec![k / n as f64; n]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10_000 {
            let raw: Vec<f64> = (0..n).map(|_| -rng.gen_range(1e-12f64..1.0).ln()).collect();
            let s: f64 = raw.iter().sum();
            let f: Vec<f64> = raw.iter().map(|v| v * k / s).collect();
            prop_assert!(uniform <= at(&f) + 1e-12);
        }
    }
}
