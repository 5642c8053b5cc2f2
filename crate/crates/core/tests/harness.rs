use moe_lab::harness::config::{ExperimentConfig, TaskConfig};
use moe_lab::harness::experiment::{analyze, compare, eval_batch, train, train_model};
use moe_lab::harness::model::SeqModel;
use moe_lab::harness::task::Task;
use moe_lab::{Checkpoint64, Normalization, RouterConfig, Tape64};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn short(n: usize, m: usize, k: usize, steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::tiny_copy(n, m, k);
    cfg.optimizer.steps = steps;
    cfg
}

#[test]
fn same_config_same_record() {
    let cfg = short(4, 4, 2, 60);
    assert_eq!(train(&cfg).unwrap(), train(&cfg).unwrap());
    let mut other = cfg.clone();
    other.optimizer.seed = 1;
    assert_ne!(train(&cfg).unwrap().logs, train(&other).unwrap().logs);
}

#[test]
fn losses_are_logged_every_interval_and_finite() {
    let r = train(&short(4, 4, 2, 95)).unwrap();
    let steps: Vec<usize> = r.logs.iter().map(|l| l.step).collect();
    assert_eq!(steps, (0..95).step_by(10).chain([94]).collect::<Vec<_>>());
    assert!(r.logs.iter().all(|l| l.task_loss.is_finite() && l.aux_loss.is_finite()));
    assert!(r.logs.iter().all(|l| l.layers.len() == 2));
}

#[test]
fn null_free_adaptive_router_is_the_vanilla_pipeline() {
    let vanilla = short(4, 0, 2, 80);
    let mut adaptive = vanilla.clone();
    adaptive.router = RouterConfig::top_k(4, 0, 2).with_normalization(Normalization::AllSelected);
    assert_eq!(adaptive.router, vanilla.router);
    let mut true_only = vanilla.clone();
    true_only.router = RouterConfig::top_k(4, 0, 2);
    let a = train(&vanilla).unwrap();
    let b = train(&true_only).unwrap();
    assert_eq!(a.logs, b.logs);
    assert_eq!(a.final_eval, b.final_eval);

    let report = compare(&vanilla, &adaptive, 1).unwrap();
    assert_eq!(report.baseline[0], report.adaptive[0]);
    assert_eq!(report.flops_reduction_experts_pct, 0.0);
}

#[test]
fn shuffling_the_eval_batch_keeps_token_decisions() {
    let cfg = short(4, 4, 2, 40);
    let (_, model) = train_model(&cfg).unwrap();
    let task = Task::from_config(&cfg.task, cfg.model.vocab).unwrap();
    let batch = eval_batch(&cfg, &task);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let shuffled = batch.permuted(&order);
    let decisions = |b| {
        let mut tape = Tape64::new();
        let bound = model.bind(&mut tape);
        model.forward(&mut tape, &bound, b).unwrap().layers.into_iter().map(|l| l.decisions).collect::<Vec<_>>()
    };
    let a = decisions(&batch);
    let b = decisions(&shuffled);
    let s = cfg.task.seq_len();
    for (new_seq, &old_seq) in order.iter().enumerate() {
        for t in 0..s {
            for l in 0..2 {
                assert_eq!(a[l][old_seq * s + t], b[l][new_seq * s + t]);
            }
        }
    }
}

#[test]
fn tight_loads_follow_the_balanced_prediction_order() {
    // (m, k) with n = 4; balanced loads 8/9, 16/13, 16/9.
    let shapes = [(5, 2), (9, 4), (5, 4)];
    let loads: Vec<f64> = shapes
        .iter()
        .map(|&(m, k)| {
            let mut cfg = short(4, m, k, 300);
            cfg.schedule.alpha2 = None;
            train(&cfg).unwrap().final_eval.unwrap().avg_true_load
        })
        .collect();
    assert!(loads[0] < loads[1] && loads[1] < loads[2], "{loads:?}");
}

#[test]
fn five_nulls_top_two_runs_below_two_experts() {
    let base = short(4, 0, 2, 200);
    let ada = short(4, 5, 2, 200);
    let report = compare(&base, &ada, 3).unwrap();
    assert!(report.adaptive_load < 2.0, "{}", report.adaptive_load);
    assert_eq!(report.baseline_load, 2.0);
    assert_eq!(report.seeds, vec![0, 1, 2]);
    assert_eq!(report.adaptive_accuracy.len(), 3);
    let mean = report.adaptive_accuracy.iter().sum::<f64>() / 3.0;
    assert!((report.adaptive_mean_accuracy - mean).abs() < 1e-15);
    assert!(report.flops_reduction_experts_pct > report.flops_reduction_model_pct);
    assert!(report.flops_reduction_model_pct > 0.0);
}

#[test]
fn training_beats_uniform_prediction() {
    let mut cfg = short(4, 0, 2, 150);
    cfg.schedule.alpha1 = 0.0;
    cfg.schedule.alpha2 = None;
    let r = train(&cfg).unwrap();
    let uniform = (cfg.model.vocab as f64).ln();
    assert!(r.final_eval.unwrap().task_loss < uniform);
    assert!(r.logs[0].task_loss > r.logs.last().unwrap().task_loss);
}

#[test]
fn modular_addition_trains() {
    let mut cfg = short(4, 4, 2, 300);
    cfg.task = TaskConfig::ModularAddition { modulus: 5 };
    cfg.model.vocab = 5;
    let r = train(&cfg).unwrap();
    assert!(r.final_eval.unwrap().task_loss < 5f64.ln());
}

#[test]
fn vanilla_checkpoint_routes_every_token_to_k_experts() {
    let cfg = short(4, 0, 2, 30);
    let (_, model) = train_model(&cfg).unwrap();
    let ck = Checkpoint64::parse(&model.to_checkpoint(&cfg).render()).unwrap();
    let (back, cfg) = SeqModel::from_checkpoint(&ck).unwrap();
    let task = Task::from_config(&cfg.task, cfg.model.vocab).unwrap();
    let report = analyze(&back, &eval_batch(&cfg, &task), None).unwrap();
    for l in &report.layers {
        assert_eq!(l.count_histogram, vec![0, 0, l.tokens]);
        assert_eq!(l.bypass_rate, 0.0);
    }
    assert!(report.tokens.iter().all(|t| t.true_counts == vec![2, 2]));
}

#[test]
fn trained_adaptive_checkpoint_is_token_adaptive() {
    let cfg = short(2, 2, 2, 200);
    let (_, model) = train_model(&cfg).unwrap();
    let task = Task::from_config(&cfg.task, cfg.model.vocab).unwrap();
    let report = analyze(&model, &eval_batch(&cfg, &task), None).unwrap();
    for l in &report.layers {
        assert!(l.occupied_count_bins() >= 2, "{:?}", l.count_histogram);
        // four experts: sharpness categories 1..=4, no empty distributions
        assert_eq!(l.sharpness_histogram.len(), 5);
        assert_eq!(l.sharpness_histogram[0], 0);
        assert_eq!(l.sharpness_histogram.iter().sum::<usize>(), l.tokens);
    }
}
