use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slr_core::engine::EngineConfig;
use slr_core::hpa::{apply_plan, kappa_sweep, make_plan, removable_counts, HpaError, HpaPlan};
use slr_core::model::{build_model, evaluate, Batch, Model, ModelKind, ToyModelConfig, WeightSource};
use slr_core::tensor::Matrix;

/// Small regression model whose blocks carry surrogates of assorted rank and sparsity.
fn swept_model(seed: u64) -> Model {
    let cfg = ToyModelConfig {
        kind: ModelKind::MlpRegression,
        layer_dims: vec![6, 10, 8, 4],
        seed,
        ..ToyModelConfig::default()
    };
    let mut model = build_model(&cfg, &EngineConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in &mut model.blocks {
        b.alpha = b.rho * rng.random_range(0.0..0.6);
        b.beta = b.rho * rng.random_range(0.0..0.4);
        b.adaptation_sweep(1).unwrap();
    }
    model
}

fn eval_batches(seed: u64) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
    vec![Batch::Features {
        inputs: Matrix::random_normal(32, 6, 1.0, &mut rng),
        targets: Matrix::random_normal(32, 4, 1.0, &mut rng),
    }]
}

fn max_unit_cost(plan: &HpaPlan) -> u64 {
    plan.per_block
        .iter()
        .map(|b| if b.rank > 0 { b.unit_cost as u64 } else { 1 })
        .max()
        .unwrap_or(1)
}

proptest! {
    #[test]
    fn plan_invariants(seed in 0u64..500, frac in 0.0f64..=1.0, kappa in 0.0f64..=1.0) {
        let model = swept_model(seed);
        let (c_l, c_s) = removable_counts(&model).unwrap();
        let budget = (frac * (c_l + c_s) as f64).floor() as u64;
        let plan = make_plan(&model, budget, kappa).unwrap();

        prop_assert!(plan.removed >= budget);
        prop_assert!(plan.removed <= budget + max_unit_cost(&plan));
        prop_assert!((0.0..=1.0).contains(&plan.phi_l) && (0.0..=1.0).contains(&plan.phi_s));

        for a in &plan.per_block {
            for b in &plan.per_block {
                if a.rank > 0 && b.rank > 0 {
                    let gap = (a.drop_singular as f64 / a.rank as f64 - b.drop_singular as f64 / b.rank as f64).abs();
                    prop_assert!(gap <= 1.0 / a.rank.min(b.rank) as f64 + 1e-12);
                }
                if a.nnz > 0 && b.nnz > 0 {
                    let gap = (a.drop_sparse as f64 / a.nnz as f64 - b.drop_sparse as f64 / b.nnz as f64).abs();
                    prop_assert!(gap <= 1.0 / a.nnz.min(b.nnz) as f64 + 1e-12);
                }
            }
        }

        let compressed = apply_plan(&model, &plan).unwrap();
        prop_assert_eq!(compressed.param_count as u64, c_l + c_s - plan.removed);
        let recount: usize = compressed
            .blocks
            .iter()
            .map(|b| b.factors.rank() * (b.factors.rows() + b.factors.cols()) + b.sparse.count_nonzero())
            .sum();
        prop_assert_eq!(compressed.param_count, recount);
    }

    #[test]
    fn removal_is_nested_in_the_budget(seed in 0u64..500, f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0, kappa in 0.0f64..=1.0) {
        let model = swept_model(seed);
        let (c_l, c_s) = removable_counts(&model).unwrap();
        let total = (c_l + c_s) as f64;
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let small = make_plan(&model, (lo * total) as u64, kappa).unwrap();
        let large = make_plan(&model, (hi * total) as u64, kappa).unwrap();
        for (a, b) in small.per_block.iter().zip(&large.per_block) {
            prop_assert!(a.drop_singular <= b.drop_singular);
            prop_assert!(a.drop_sparse <= b.drop_sparse);
        }
    }

    #[test]
    fn truncation_removes_smallest_units_first(seed in 0u64..500, frac in 0.0f64..=1.0, kappa in 0.0f64..=1.0) {
        let model = swept_model(seed);
        let (c_l, c_s) = removable_counts(&model).unwrap();
        let plan = make_plan(&model, (frac * (c_l + c_s) as f64) as u64, kappa).unwrap();
        let compressed = apply_plan(&model, &plan).unwrap();
        for (orig, cut) in model.blocks.iter().zip(&compressed.blocks) {
            let sigma = &orig.l_factors.as_ref().unwrap().sigma;
            prop_assert_eq!(&cut.factors.sigma[..], &sigma[..cut.factors.rank()]);
            let kept_min = cut.sparse.as_slice().iter().filter(|v| **v != 0.0).fold(f64::INFINITY, |m, v| m.min(v.abs()));
            for (o, c) in orig.s.as_slice().iter().zip(cut.sparse.as_slice()) {
                if *o != 0.0 && *c == 0.0 {
                    prop_assert!(o.abs() <= kept_min);
                }
                prop_assert!(*c == 0.0 || c == o);
            }
        }
    }
}

#[test]
fn zero_budget_is_the_identity() {
    for seed in 0..5 {
        let model = swept_model(seed);
        let eval = eval_batches(seed);
        let surrogate = evaluate(&model, &eval, WeightSource::Surrogate).unwrap();
        for kappa in [0.0, 0.3, 1.0] {
            let plan = make_plan(&model, 0, kappa).unwrap();
            assert!(plan.per_block.iter().all(|b| b.drop_singular == 0 && b.drop_sparse == 0));
            let cm = apply_plan(&model, &plan).unwrap();
            let loss = evaluate(&model, &eval, WeightSource::Compressed(&cm)).unwrap();
            assert_eq!(loss, surrogate);
        }
    }
}

#[test]
fn removable_counts_match_a_naive_scan() {
    let model = swept_model(42);
    let mut c_l = 0u64;
    let mut c_s = 0u64;
    for b in &model.blocks {
        let (n, m) = b.x.shape();
        let spectrum = b.last_singular_values.as_ref().unwrap();
        c_l += spectrum.iter().filter(|s| **s > 0.0).count() as u64 * (n + m) as u64;
        c_s += b.s.as_slice().iter().filter(|v| **v != 0.0).count() as u64;
    }
    assert_eq!(removable_counts(&model).unwrap(), (c_l, c_s));
}

#[test]
fn infeasible_budget_cites_capacity() {
    let model = swept_model(3);
    let (c_l, c_s) = removable_counts(&model).unwrap();
    let err = make_plan(&model, c_l + c_s + 1, 0.5).unwrap_err();
    assert!(matches!(err, HpaError::Budget { capacity, .. } if capacity == c_l + c_s));
    assert!(err.to_string().contains(&(c_l + c_s).to_string()));
    assert!(matches!(make_plan(&model, 0, 1.5), Err(HpaError::Kappa(_))));
}

#[test]
fn full_budget_removes_everything() {
    let model = swept_model(8);
    let (c_l, c_s) = removable_counts(&model).unwrap();
    let plan = make_plan(&model, c_l + c_s, 0.4).unwrap();
    let cm = apply_plan(&model, &plan).unwrap();
    assert_eq!(cm.param_count, 0);
}

#[test]
fn kappa_sweep_at_zero_budget_is_flat_and_sorted() {
    let model = swept_model(11);
    let eval = eval_batches(11);
    let base = evaluate(&model, &eval, WeightSource::Surrogate).unwrap().loss;
    let (c_l, c_s) = removable_counts(&model).unwrap();
    let rows = kappa_sweep(&model, &[(c_l + c_s) / 3, 0], &[1.0, 0.0, 0.5], &eval);
    assert_eq!(rows.len(), 6);
    assert!(rows.windows(2).all(|w| (w[0].budget, w[0].kappa) <= (w[1].budget, w[1].kappa)));
    for r in rows.iter().filter(|r| r.budget == 0) {
        assert_eq!(r.eval_loss, base);
    }
    for budget in [0, (c_l + c_s) / 3] {
        assert_eq!(rows.iter().filter(|r| r.budget == budget && r.best).count(), 1);
    }
}
