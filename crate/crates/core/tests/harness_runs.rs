use proptest::prelude::*;
use slr_core::checkpoint::load_checkpoint;
use slr_core::engine::EngineConfig;
use slr_core::harness::{
    ablation_grid, compare_deployment, deployment_curve, embedding_ablation, rpca_surrogate, run_training, AblationAxes,
    HarnessError, RunConfig,
};
use slr_core::rpca::RpcaConfig;
use slr_core::hpa::removable_counts;
use slr_core::model::{
    adam_step, build_model, evaluate, forward_backward, AdamState, ModelKind, ToyModelConfig, WeightSource,
};
use slr_core::tensor::Matrix;

fn tiny(cycles: usize) -> RunConfig {
    let base = RunConfig::default();
    RunConfig {
        model: ToyModelConfig {
            kind: ModelKind::CharLm,
            layer_dims: vec![8, 32, 16],
            vocab_size: 32,
            context_len: 4,
            include_embedding_block: true,
            include_head_block: false,
            seed: 3,
        },
        engine: EngineConfig {
            k_inner: 4,
            ..base.engine
        },
        total_cycles: cycles,
        eval_every: 3,
        log_every: 1,
        batch_size: 8,
        eval_examples: 96,
        ..base
    }
}

#[test]
fn vanishing_rho_reduces_to_plain_adam() {
    let mut cfg = tiny(1);
    cfg.engine.k_inner = 1;
    cfg.engine.rho_constant = 1e-30;
    let out = run_training(&cfg).unwrap();

    let mut model = build_model(&cfg.model, &cfg.engine).unwrap();
    let mut adam = AdamState::new(cfg.adam, &model).unwrap();
    let mut data = cfg.data_source().unwrap();
    data.eval_batches(cfg.eval_batch_size, cfg.eval_examples);
    let batch = data.next_batch(cfg.batch_size);
    let (_, grads) = forward_backward(&model, &batch).unwrap();
    adam_step(&mut adam, &mut model, &grads).unwrap();

    for (a, b) in out.model.blocks.iter().zip(&model.blocks) {
        let diff = a.x.sub(&b.x).max_abs();
        assert!(diff <= 1e-9, "{}: {diff}", a.name);
    }
    for (a, b) in out.model.plain.iter().zip(&model.plain) {
        assert!(a.value.sub(&b.value).max_abs() <= 1e-9, "{}", a.name);
    }
}

#[test]
fn frozen_zero_thresholds_keep_the_surrogate_on_x() {
    let mut cfg = tiny(5);
    cfg.controller_enabled = false;
    let out = run_training(&cfg).unwrap();
    for m in &out.metrics {
        assert!(m.avg_recon_error <= 1e-9, "cycle {}: {}", m.cycle, m.avg_recon_error);
        for b in &m.per_block {
            assert_eq!((b.alpha, b.beta), (0.0, 0.0));
        }
    }
    for b in &out.model.blocks {
        assert!(b.x.sub(&b.l).max_abs() <= 1e-9);
        assert!(b.s.max_abs() <= 1e-9);
    }
}

#[test]
fn metrics_are_consistent_and_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(7);
    cfg.output_dir = Some(dir.path().to_path_buf());
    let out = run_training(&cfg).unwrap();
    assert_eq!(out.metrics.len(), 7);
    for m in &out.metrics {
        let mean = m.per_block.iter().map(|b| b.delta).sum::<f64>() / m.per_block.len() as f64;
        assert!((m.avg_recon_error - mean).abs() <= 1e-12);
        let evaluated = m.cycle % 3 == 0 || m.cycle == 7;
        assert_eq!(m.eval_loss_x.is_some(), evaluated);
        assert_eq!(m.eval_loss_surrogate.is_some(), evaluated);
    }
    let log = std::fs::read_to_string(dir.path().join("metrics.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 7);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 8);
    for cycle in [3, 6, 7] {
        let ckpt = load_checkpoint(&dir.path().join(format!("checkpoint-{cycle:06}.slr"))).unwrap();
        if cycle == 7 {
            assert_eq!(ckpt.model, out.model);
            assert_eq!(ckpt.adam.as_ref(), Some(&out.adam));
        }
    }
}

#[test]
fn identical_configs_give_identical_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &std::path::Path| {
        let mut cfg = tiny(6);
        cfg.output_dir = Some(dir.to_path_buf());
        run_training(&cfg).unwrap();
        std::fs::read(dir.join("metrics.ndjson")).unwrap()
    };
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn structure_shrinks_between_first_and_last_cycle() {
    let out = run_training(&tiny(30)).unwrap();
    let first = &out.metrics[0].per_block;
    let last = &out.metrics.last().unwrap().per_block;
    for (a, b) in first.iter().zip(last) {
        assert!(b.rank_ratio <= a.rank_ratio, "{}", a.name);
        assert!(b.density <= a.density, "{}", a.name);
    }
}

#[test]
fn vanilla_runs_have_no_structure() {
    let mut cfg = tiny(4);
    cfg.regularize = false;
    let out = run_training(&cfg).unwrap();
    for m in &out.metrics {
        assert!(m.per_block.is_empty());
        assert_eq!(m.avg_recon_error, 0.0);
        assert!(m.eval_loss_surrogate.is_none());
    }
    assert!(out.model.blocks.iter().all(|b| !b.has_surrogate()));
}

#[test]
fn divergence_reports_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(40);
    cfg.eval_every = 1;
    cfg.adam.lr = 1.0;
    cfg.adam.weight_decay = 1000.0;
    cfg.output_dir = Some(dir.path().to_path_buf());
    match run_training(&cfg) {
        Err(HarnessError::Divergence { cycle, last_checkpoint, .. }) => {
            assert!(cycle > 1);
            let path = last_checkpoint.expect("a checkpoint precedes the failure");
            assert!(path.ends_with(format!("checkpoint-{:06}.slr", cycle - 1)));
            let ckpt = load_checkpoint(&path).unwrap();
            assert!(ckpt.model.blocks.iter().all(|b| b.x.is_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics.len())),
    }
}

#[test]
fn single_cell_grid_matches_a_plain_run() {
    let cfg = tiny(4);
    let axes = AblationAxes {
        delta_alpha: vec![cfg.controller.delta_alpha],
        delta_beta: vec![cfg.controller.delta_beta],
        rho_constant: vec![cfg.engine.rho_constant],
    };
    let rows = ablation_grid(&cfg, &axes).unwrap();
    let out = run_training(&cfg).unwrap();
    let last = out.metrics.last().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].eval_x, last.eval_loss_x.unwrap());
    assert_eq!(rows[0].eval_surrogate, last.eval_loss_surrogate.unwrap());
    assert_eq!(rows[0].param_count, out.model.surrogate_param_count());
    assert!(ablation_grid(&cfg, &AblationAxes { delta_alpha: vec![], ..axes }).is_err());
}

#[test]
fn zero_error_surrogate_evaluates_like_x() {
    let mut out = run_training(&tiny(2)).unwrap();
    for b in &mut out.model.blocks {
        b.l = b.x.clone();
        b.s = Matrix::zeros(b.x.rows(), b.x.cols());
    }
    let x = evaluate(&out.model, &out.eval_batches, WeightSource::DenseX).unwrap();
    let s = evaluate(&out.model, &out.eval_batches, WeightSource::Surrogate).unwrap();
    assert_eq!(x, s);
}

#[test]
fn deployment_curve_is_sorted_and_shrinks_with_budget() {
    let out = run_training(&tiny(6)).unwrap();
    let (c_l, c_s) = removable_counts(&out.model).unwrap();
    let surrogate = evaluate(&out.model, &out.eval_batches, WeightSource::Surrogate).unwrap();
    let total = c_l + c_s;
    let curve = deployment_curve(&out.model, &[total / 2, 0, total + 1, total / 5], 0.5, &out.eval_batches);
    assert_eq!(curve.len(), 4);
    let ok: Vec<_> = curve.iter().filter(|p| p.error.is_none()).collect();
    assert_eq!(ok.len(), 3);
    assert!(ok.windows(2).all(|w| w[0].param_count < w[1].param_count));
    let zero = ok.iter().find(|p| p.budget == 0).unwrap();
    assert_eq!(zero.eval_loss, surrogate.loss);
    assert!(curve.iter().any(|p| p.error.as_deref().is_some_and(|e| e.contains(&total.to_string()))));
}

#[test]
fn embedding_ablation_differs_only_in_the_embedding_block() {
    let cfg = tiny(8);
    let ab = embedding_ablation(&cfg).unwrap();
    assert_eq!(ab.with_embedding.len(), 8);
    assert_eq!(ab.without_embedding.len(), 8);
    assert_eq!(ab.embed_trajectory.len(), 8);
    let names = |m: &slr_core::harness::MetricsRecord| m.per_block.iter().map(|b| b.name.clone()).collect::<Vec<_>>();
    assert!(names(&ab.with_embedding[0]).contains(&"embed".to_string()));
    assert!(!names(&ab.without_embedding[0]).contains(&"embed".to_string()));
    assert!(ab.final_quarter_gap.is_finite() && ab.final_quarter_gap >= 0.0);

    let direct = run_training(&cfg).unwrap();
    assert_eq!(direct.metrics, ab.with_embedding);

    let mut mlp = cfg.clone();
    mlp.model.kind = ModelKind::MlpRegression;
    assert!(matches!(embedding_ablation(&mlp), Err(HarnessError::Config(_))));
}

#[test]
fn deployment_comparison_matches_targets_and_baseline() {
    let cfg = tiny(10);
    let trained = run_training(&cfg).unwrap();
    let vanilla = run_training(&RunConfig { regularize: false, ..cfg.clone() }).unwrap();
    let fractions = [1.0, 0.6, 0.3];
    let cmp = compare_deployment(&trained.model, &vanilla.model, &fractions, 0.5, &trained.eval_batches, &RpcaConfig::default())
        .unwrap();
    let full = trained.model.surrogate_param_count();
    assert_eq!(cmp.targets, fractions.iter().map(|f| (f * full as f64).round() as usize).collect::<Vec<_>>());
    assert_eq!(cmp.regularized.len(), 3);
    assert_eq!(cmp.vanilla.len(), 3);
    for (p, t) in cmp.regularized.iter().zip(&cmp.targets) {
        assert!(p.error.is_none());
        assert!(p.param_count <= *t);
    }
    assert_eq!(cmp.regularized[0].budget, 0);
    let wins = cmp.regularized.iter().zip(&cmp.vanilla).filter(|(a, b)| a.eval_loss <= b.eval_loss).count();
    assert_eq!(cmp.dominance, wins as f64 / 3.0);
    assert_eq!(cmp.vanilla_profile.rows.len(), vanilla.model.blocks.len());

    let (baseline, _) = rpca_surrogate(&vanilla.model, &RpcaConfig::default()).unwrap();
    for (b, v) in baseline.blocks.iter().zip(&vanilla.model.blocks) {
        assert_eq!(b.x, v.x);
        assert!(b.has_surrogate());
        assert!(b.surrogate().sub(&v.x).frobenius_norm() <= 1e-6 * v.x.frobenius_norm());
    }
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    (
        (any::<bool>(), prop::collection::vec(1usize..64, 2..5), 2usize..=64, 1usize..12, any::<bool>(), any::<bool>(), any::<u64>()),
        (1usize..100, 1usize..5, 1e-6f64..1e3, 0.0f64..1.0, 0.0f64..1.0),
        (0.01f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 1e-4f64..2.0, 1e-5f64..1.0),
        (1e-6f64..1.0, 0.01f64..0.999, 0.01f64..0.9999, 1e-12f64..1e-3, 0.0f64..0.1),
        (1usize..1000, 1usize..100, 1usize..100, 1usize..512, any::<u64>(), 0.0f64..1.0, any::<bool>(), any::<bool>(), 0.0f64..=1.0),
    )
        .prop_map(|(m, e, c, a, r)| {
            let mut cfg = RunConfig::default();
            cfg.model.kind = if m.0 { ModelKind::CharLm } else { ModelKind::MlpRegression };
            cfg.model.layer_dims = m.1;
            cfg.model.vocab_size = m.2;
            cfg.model.context_len = m.3;
            cfg.model.include_embedding_block = m.4;
            cfg.model.include_head_block = m.5;
            cfg.model.seed = m.6;
            cfg.engine = EngineConfig { k_inner: e.0, j_inner: e.1, rho_constant: e.2, initial_alpha: e.3, initial_beta: e.4 };
            cfg.controller.gamma = c.0;
            cfg.controller.target_rank_ratio = c.1;
            cfg.controller.target_density = c.2;
            cfg.controller.delta_alpha = c.3;
            cfg.controller.delta_beta = c.4;
            cfg.adam.lr = a.0;
            cfg.adam.beta1 = a.1;
            cfg.adam.beta2 = a.2;
            cfg.adam.eps = a.3;
            cfg.adam.weight_decay = a.4;
            cfg.total_cycles = r.0;
            cfg.eval_every = r.1;
            cfg.log_every = r.2;
            cfg.batch_size = r.3;
            cfg.data_seed = r.4;
            cfg.noise_std = r.5;
            cfg.regularize = r.6;
            cfg.controller_enabled = r.7;
            cfg.kappa = r.8;
            cfg
        })
}

proptest! {
    #[test]
    fn configs_round_trip_through_text(cfg in arb_config()) {
        let text = cfg.to_config_string();
        prop_assert_eq!(RunConfig::from_config_str(&text).unwrap(), cfg);
    }
}
