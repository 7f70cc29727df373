use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slr_core::engine::{adapt_blocks, BlockState, ControllerConfig, EngineError};
use slr_core::tensor::{density, effective_rank_ratio, Matrix};

fn block(n: usize, m: usize, seed: u64, rho: f64, alpha: f64, beta: f64) -> BlockState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = BlockState::new("b", Matrix::random_normal(n, m, 1.0, &mut rng), rho).unwrap();
    b.y = Matrix::random_normal(n, m, 0.2, &mut rng);
    b.alpha = alpha;
    b.beta = beta;
    b
}

proptest! {
    #[test]
    fn controller_moves_thresholds_in_the_right_direction(
        seed: u64,
        rho in 0.05f64..2.0,
        alpha in 0.0f64..2.0,
        beta in 0.0f64..1.0,
        target_rank in 0.0f64..=1.0,
        target_density in 0.0f64..=1.0,
    ) {
        let mut b = block(6, 5, seed, rho, alpha, beta);
        b.adaptation_sweep(1).unwrap();
        let cfg = ControllerConfig { target_rank_ratio: target_rank, target_density, ..ControllerConfig::default() };
        let rank = effective_rank_ratio(b.last_singular_values.as_ref().unwrap(), cfg.gamma).unwrap();
        let dens = density(&b.s, 0.0);
        let (a0, b0) = (b.alpha, b.beta);
        b.controller_update(&cfg).unwrap();

        prop_assert!(b.alpha >= 0.0 && b.beta >= 0.0);
        let raw_a = a0 + rho * (rank - target_rank) * cfg.delta_alpha;
        let raw_b = b0 + rho * (dens - target_density) * cfg.delta_beta;
        prop_assert_eq!(b.alpha, raw_a.max(0.0));
        prop_assert_eq!(b.beta, raw_b.max(0.0));
        if rank > target_rank {
            prop_assert!(b.alpha > a0);
        } else if rank < target_rank {
            prop_assert!(b.alpha < a0 || b.alpha == 0.0);
        } else {
            prop_assert_eq!(b.alpha, a0);
        }
        if dens > target_density {
            prop_assert!(b.beta > b0);
        } else if dens < target_density {
            prop_assert!(b.beta < b0 || b.beta == 0.0);
        }
    }

    #[test]
    fn sweep_keeps_exact_zeros_and_dual_identity(
        n in 1usize..7, m in 1usize..7, seed: u64,
        rho in 0.1f64..3.0, alpha in 0.0f64..3.0, beta in 0.0f64..2.0,
    ) {
        let mut b = block(n, m, seed, rho, alpha, beta);
        b.s = Matrix::random_normal(n, m, 0.3, &mut ChaCha8Rng::seed_from_u64(seed ^ 5));
        b.adaptation_sweep(1).unwrap();
        let y0 = b.y.clone();
        b.adaptation_sweep(1).unwrap();
        let tau = b.beta / b.rho;
        for i in 0..b.x.len() {
            let pre = b.x.as_slice()[i] - b.l.as_slice()[i] + y0.as_slice()[i] / b.rho;
            let s = b.s.as_slice()[i];
            if s != 0.0 {
                prop_assert!(pre.abs() > tau - 1e-15);
            } else {
                prop_assert!(pre.abs() <= tau);
            }
            let dy = b.y.as_slice()[i] - y0.as_slice()[i];
            let expect = b.rho * (b.x.as_slice()[i] - b.l.as_slice()[i] - s);
            prop_assert!((dy - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
        prop_assert_eq!(b.l.clone(), b.l_factors.as_ref().unwrap().to_dense());
    }

    #[test]
    fn penalty_gradient_is_exact(n in 1usize..6, m in 1usize..6, seed: u64, rho in 0.1f64..3.0) {
        let mut b = block(n, m, seed, rho, 0.3, 0.1);
        b.adaptation_sweep(1).unwrap();
        let (_, g) = b.structural_penalty();
        let h = 1e-5;
        for i in 0..b.x.len() {
            let mut p = b.clone();
            p.x.as_mut_slice()[i] += h;
            let mut q = b.clone();
            q.x.as_mut_slice()[i] -= h;
            let fd = (p.structural_penalty().0 - q.structural_penalty().0) / (2.0 * h);
            let an = g.as_slice()[i];
            prop_assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0));
        }
    }
}

#[test]
fn fixed_point_leaves_thresholds_alone() {
    let mut b = block(4, 4, 3, 0.5, 0.7, 0.2);
    b.adaptation_sweep(1).unwrap();
    let rank = b.rank_ratio(0.999).unwrap();
    let cfg = ControllerConfig {
        target_rank_ratio: rank,
        target_density: b.density(),
        ..ControllerConfig::default()
    };
    let before = (b.alpha, b.beta);
    b.controller_update(&cfg).unwrap();
    assert_eq!((b.alpha, b.beta), before);
}

#[test]
fn controller_requires_a_spectrum() {
    let mut b = block(3, 3, 1, 1.0, 0.0, 0.0);
    assert!(matches!(
        b.controller_update(&ControllerConfig::default()),
        Err(EngineError::MissingSpectrum(_))
    ));
}

#[test]
fn parallel_and_serial_adaptation_agree() {
    let mut many: Vec<BlockState> = (0..6).map(|i| block(9, 7, i, 0.4, 0.8, 0.1)).collect();
    let mut one_by_one = many.clone();
    let cfg = ControllerConfig::default();
    adapt_blocks(&mut many, 2, Some(&cfg)).unwrap();
    for b in &mut one_by_one {
        b.adaptation_sweep(2).unwrap();
        b.controller_update(&cfg).unwrap();
    }
    assert_eq!(many, one_by_one);
}
