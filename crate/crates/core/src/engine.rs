//! Per-block ADMM state for sparse-plus-low-rank training.
//!
//! Each regulated weight `X` carries a low-rank component `L`, a sparse
//! component `S` and a dual variable `Y`. Training alternates gradient steps
//! on the task loss plus [`BlockState::structural_penalty`] with closed-form
//! adaptation sweeps ([`BlockState::adaptation_sweep`]) and an integral
//! controller on the thresholds ([`BlockState::controller_update`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    density, effective_rank_ratio, shrink, svt_factored, LowRank, Matrix, TensorError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("block `{block}`: {source}")]
    Numerical {
        block: String,
        #[source]
        source: TensorError,
    },
    #[error("block `{0}` has no cached spectrum; run an adaptation sweep before the controller")]
    MissingSpectrum(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Targets and gains of the integral controller on `(alpha, beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Energy coverage used by the effective rank ratio.
    pub gamma: f64,
    pub target_rank_ratio: f64,
    pub target_density: f64,
    pub delta_alpha: f64,
    pub delta_beta: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            gamma: 0.999,
            target_rank_ratio: 0.15,
            target_density: 0.05,
            delta_alpha: 0.1,
            delta_beta: 0.005,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(EngineError::InvalidArgument(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !unit(self.target_rank_ratio) || !unit(self.target_density) {
            return Err(EngineError::InvalidArgument("targets must lie in [0, 1]".into()));
        }
        if !(self.delta_alpha > 0.0 && self.delta_beta > 0.0) {
            return Err(EngineError::InvalidArgument("controller step sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Cycle structure of the two-stage optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Gradient steps per cycle.
    pub k_inner: usize,
    /// Adaptation sweeps per cycle.
    pub j_inner: usize,
    /// Constant `c` in `rho = c / (N * sqrt(n * m))`.
    pub rho_constant: f64,
    /// Starting thresholds; zero lets the controller grow them.
    #[serde(default)]
    pub initial_alpha: f64,
    #[serde(default)]
    pub initial_beta: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            k_inner: 40,
            j_inner: 1,
            rho_constant: 1.0,
            initial_alpha: 0.0,
            initial_beta: 0.0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.k_inner == 0 || self.j_inner == 0 {
            return Err(EngineError::InvalidArgument("k_inner and j_inner must be positive".into()));
        }
        if !(self.rho_constant > 0.0 && self.rho_constant.is_finite()) {
            return Err(EngineError::InvalidArgument("rho_constant must be positive".into()));
        }
        if !(self.initial_alpha >= 0.0 && self.initial_beta >= 0.0)
            || !self.initial_alpha.is_finite()
            || !self.initial_beta.is_finite()
        {
            return Err(EngineError::InvalidArgument("initial thresholds must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Penalty coefficient from the block-count and shape scaling law.
pub fn rho_for_block(n: usize, m: usize, n_blocks: usize, c: f64) -> Result<f64, EngineError> {
    if n == 0 || m == 0 || n_blocks == 0 {
        return Err(EngineError::InvalidArgument(format!(
            "rho needs positive dimensions, got n={n} m={m} blocks={n_blocks}"
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(EngineError::InvalidArgument(format!("rho constant must be positive, got {c}")));
    }
    Ok(c / (n_blocks as f64 * ((n * m) as f64).sqrt()))
}

/// One regulated weight block and its surrogate state.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub name: String,
    /// Live trainable weight.
    pub x: Matrix,
    pub l: Matrix,
    pub s: Matrix,
    pub y: Matrix,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    /// Factors of `l` from the most recent sweep; `l == factors.to_dense()` bitwise.
    pub l_factors: Option<LowRank>,
    /// Shrunk spectrum of `l` from the most recent sweep.
    pub last_singular_values: Option<Vec<f64>>,
}

impl BlockState {
    /// Zero-initialized surrogate with `alpha = beta = 0`.
    pub fn new(name: impl Into<String>, x: Matrix, rho: f64) -> Result<Self, EngineError> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(EngineError::InvalidArgument(format!("rho must be positive, got {rho}")));
        }
        let (n, m) = x.shape();
        Ok(BlockState {
            name: name.into(),
            l: Matrix::zeros(n, m),
            s: Matrix::zeros(n, m),
            y: Matrix::zeros(n, m),
            x,
            alpha: 0.0,
            beta: 0.0,
            rho,
            l_factors: None,
            last_singular_values: None,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.x.shape()
    }

    /// True once the block carries a surrogate produced by a sweep (or loaded).
    pub fn has_surrogate(&self) -> bool {
        self.l_factors.is_some()
    }

    /// `(rho/2) * ||X - L - S + Y/rho||_F^2` and its gradient with respect to `X`.
    pub fn structural_penalty(&self) -> (f64, Matrix) {
        let rho = self.rho;
        let x = self.x.as_slice();
        let l = self.l.as_slice();
        let s = self.s.as_slice();
        let y = self.y.as_slice();
        let mut grad = Vec::with_capacity(x.len());
        let mut sq = 0.0;
        for i in 0..x.len() {
            let r = x[i] - l[i] - s[i];
            let shifted = r + y[i] / rho;
            sq += shifted * shifted;
            grad.push(rho * r + y[i]);
        }
        let (n, m) = self.x.shape();
        (
            0.5 * rho * sq,
            Matrix::from_vec(n, m, grad).expect("penalty gradient shape"),
        )
    }

    /// Applies `j_inner` closed-form sweeps `L -> S -> Y`; `X` is untouched.
    pub fn adaptation_sweep(&mut self, j_inner: usize) -> Result<(), EngineError> {
        if j_inner == 0 {
            return Err(EngineError::InvalidArgument("j_inner must be at least 1".into()));
        }
        let rho = self.rho;
        let tau_l = self.alpha / rho;
        let tau_s = self.beta / rho;
        let numerical = |source| EngineError::Numerical {
            block: self.name.clone(),
            source,
        };
        for _ in 0..j_inner {
            // L = svt(X - S + Y/rho, alpha/rho)
            let target_l = Matrix::from_fn(self.x.rows(), self.x.cols(), |r, c| {
                self.x.get(r, c) - self.s.get(r, c) + self.y.get(r, c) / rho
            });
            let out = svt_factored(&target_l, tau_l).map_err(numerical)?;
            let l = out.factors.to_dense();

            // S = soft(X - L + Y/rho, beta/rho), then Y += rho (X - L - S)
            let x = self.x.as_slice();
            let ls = l.as_slice();
            let mut s = Vec::with_capacity(x.len());
            for (i, &xv) in x.iter().enumerate() {
                s.push(shrink(xv - ls[i] + self.y.as_slice()[i] / rho, tau_s));
            }
            let y = self.y.as_mut_slice();
            for i in 0..x.len() {
                y[i] += rho * (x[i] - ls[i] - s[i]);
            }
            let (n, m) = self.x.shape();
            self.s = Matrix::from_vec(n, m, s).map_err(numerical)?;
            self.l = l;
            self.l_factors = Some(out.factors);
            self.last_singular_values = Some(out.spectrum);
        }
        Ok(())
    }

    /// Effective rank ratio of the cached spectrum of `L`.
    pub fn rank_ratio(&self, gamma: f64) -> Result<f64, EngineError> {
        let spectrum = self
            .last_singular_values
            .as_ref()
            .ok_or_else(|| EngineError::MissingSpectrum(self.name.clone()))?;
        effective_rank_ratio(spectrum, gamma).map_err(|source| EngineError::Numerical {
            block: self.name.clone(),
            source,
        })
    }

    /// Density of `S` (exact zeros).
    pub fn density(&self) -> f64 {
        density(&self.s, 0.0)
    }

    /// Integral update of `(alpha, beta)` toward the rank and density targets,
    /// clamped at zero.
    pub fn controller_update(&mut self, cfg: &ControllerConfig) -> Result<(), EngineError> {
        let rank = self.rank_ratio(cfg.gamma)?;
        let dens = self.density();
        self.alpha = (self.alpha + self.rho * (rank - cfg.target_rank_ratio) * cfg.delta_alpha).max(0.0);
        self.beta = (self.beta + self.rho * (dens - cfg.target_density) * cfg.delta_beta).max(0.0);
        Ok(())
    }

    /// `L + S`
    pub fn surrogate(&self) -> Matrix {
        self.l.add(&self.s)
    }

    /// `||X - L - S||_F`
    pub fn reconstruction_error(&self) -> f64 {
        let x = self.x.as_slice();
        let l = self.l.as_slice();
        let s = self.s.as_slice();
        (0..x.len())
            .map(|i| {
                let r = x[i] - l[i] - s[i];
                r * r
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Number of retained singular values of `L` and nonzeros of `S`.
    pub fn structure_counts(&self) -> (usize, usize) {
        let rank = self.l_factors.as_ref().map_or(0, |f| f.rank());
        (rank, self.s.count_nonzero())
    }

    /// Factored parameter count `r (n + m) + nnz(S)`.
    pub fn surrogate_param_count(&self) -> usize {
        let (n, m) = self.shape();
        let (r, nnz) = self.structure_counts();
        r * (n + m) + nnz
    }
}

/// Runs sweeps (and optionally the controller) over every block, fanning out
/// across blocks when the `parallel` feature is on.
pub fn adapt_blocks(
    blocks: &mut [BlockState],
    j_inner: usize,
    controller: Option<&ControllerConfig>,
) -> Result<(), EngineError> {
    let results = crate::par::map_mut_collect(blocks, |b| {
        b.adaptation_sweep(j_inner)?;
        if let Some(cfg) = controller {
            b.controller_update(cfg)?;
        }
        Ok(())
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{soft_threshold, svd};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_block(x: f64, l: f64, s: f64, y: f64, rho: f64) -> BlockState {
        let mut b = BlockState::new("b", Matrix::filled(1, 1, x), rho).unwrap();
        b.l = Matrix::filled(1, 1, l);
        b.s = Matrix::filled(1, 1, s);
        b.y = Matrix::filled(1, 1, y);
        b
    }

    fn random_block(n: usize, m: usize, seed: u64) -> BlockState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = BlockState::new("rand", Matrix::random_normal(n, m, 1.0, &mut rng), 0.7).unwrap();
        b.l = Matrix::random_normal(n, m, 0.5, &mut rng);
        b.s = Matrix::random_normal(n, m, 0.5, &mut rng);
        b.y = Matrix::random_normal(n, m, 0.3, &mut rng);
        b.alpha = 0.4;
        b.beta = 0.2;
        b
    }

    #[test]
    fn rho_law() {
        assert_eq!(rho_for_block(1, 1, 1, 1.0).unwrap(), 1.0);
        assert_eq!(rho_for_block(4, 9, 2, 12.0).unwrap(), 1.0);
        assert!(rho_for_block(0, 9, 2, 12.0).is_err());
        assert!(rho_for_block(4, 9, 0, 12.0).is_err());
        assert!(rho_for_block(4, 9, 1, -1.0).is_err());
    }

    #[test]
    fn penalty_scalar_case() {
        let b = scalar_block(2.0, 1.0, 0.5, 0.1, 1.0);
        let (v, g) = b.structural_penalty();
        assert!((v - 0.18).abs() < 1e-15);
        assert!((g.get(0, 0) - 0.6).abs() < 1e-15);
        let b = scalar_block(1.5, 1.0, 0.5, 0.0, 3.0);
        let (v, g) = b.structural_penalty();
        assert_eq!(v, 0.0);
        assert_eq!(g.get(0, 0), 0.0);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let b = random_block(8, 8, 4);
        let (_, g) = b.structural_penalty();
        let h = 1e-5;
        for idx in 0..64 {
            let mut p = b.clone();
            p.x.as_mut_slice()[idx] += h;
            let mut q = b.clone();
            q.x.as_mut_slice()[idx] -= h;
            let fd = (p.structural_penalty().0 - q.structural_penalty().0) / (2.0 * h);
            let an = g.as_slice()[idx];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
        }
    }

    #[test]
    fn zero_thresholds_give_identity_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::random_normal(6, 5, 1.0, &mut rng);
        let mut b = BlockState::new("id", x.clone(), 2.0).unwrap();
        b.adaptation_sweep(1).unwrap();
        assert!(b.l.sub(&x).max_abs() < 1e-12);
        assert!(b.s.max_abs() < 1e-12);
        assert!(b.y.max_abs() < 1e-11);
        assert_eq!(b.x, x);
    }

    #[test]
    fn rank_one_closed_form() {
        let u = Matrix::from_rows(&[&[1.0], &[2.0], &[-1.0]]).unwrap();
        let v = Matrix::from_rows(&[&[0.5, 1.0, 0.0, -2.0]]).unwrap();
        let x = u.matmul(&v);
        let sigma1 = svd(&x).unwrap().singular_values[0];
        let rho = 2.0;
        let mut b = BlockState::new("r1", x.clone(), rho).unwrap();
        b.alpha = 0.5 * sigma1 * rho;
        b.beta = 1e6;
        b.adaptation_sweep(1).unwrap();
        let expected_l = x.scale(0.5);
        let diff = b.l.sub(&expected_l).max_abs();
        assert!(diff < 1e-12, "diff {diff}");
        assert_eq!(b.s, Matrix::zeros(3, 4));
        assert!(b.y.sub(&x.sub(&b.l).scale(rho)).max_abs() < 1e-12);
    }

    #[test]
    fn sweep_matches_straight_line_transcription() {
        let b0 = random_block(12, 12, 21);
        let mut b = b0.clone();
        b.adaptation_sweep(1).unwrap();

        let rho = b0.rho;
        let z = b0.x.sub(&b0.s).add(&b0.y.scale(1.0 / rho));
        let l = svt_factored(&z, b0.alpha / rho).unwrap().to_dense();
        let s = soft_threshold(&b0.x.sub(&l).add(&b0.y.scale(1.0 / rho)), b0.beta / rho).unwrap();
        let y = b0.y.add(&b0.x.sub(&l).sub(&s).scale(rho));
        assert!(b.l.sub(&l).max_abs() <= 1e-12);
        assert!(b.s.sub(&s).max_abs() <= 1e-12);
        assert!(b.y.sub(&y).max_abs() <= 1e-12);
    }

    #[test]
    fn fixed_point_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Matrix::random_normal(7, 9, 1.0, &mut rng);
        let mut b = BlockState::new("fp", x.clone(), 1.3).unwrap();
        b.l = x.clone();
        b.adaptation_sweep(1).unwrap();
        let before = b.clone();
        b.adaptation_sweep(1).unwrap();
        assert!(b.l.sub(&before.l).max_abs() <= 1e-12);
        assert!(b.s.sub(&before.s).max_abs() <= 1e-12);
        assert!(b.y.sub(&before.y).max_abs() <= 1e-12);
    }

    #[test]
    fn dual_update_identity_and_exact_zeros() {
        let mut b = random_block(10, 6, 31);
        for _ in 0..3 {
            let y_old = b.y.clone();
            let rho = b.rho;
            let pre_s = {
                let z = b.x.sub(&b.s).add(&b.y.scale(1.0 / rho));
                let l = svt_factored(&z, b.alpha / rho).unwrap().to_dense();
                b.x.sub(&l).add(&b.y.scale(1.0 / rho))
            };
            b.adaptation_sweep(1).unwrap();
            let dy = b.y.sub(&y_old);
            let resid = b.x.sub(&b.l).sub(&b.s).scale(rho);
            assert!(dy.sub(&resid).max_abs() <= 1e-12);
            let tau = b.beta / rho;
            for (i, &v) in b.s.as_slice().iter().enumerate() {
                if v != 0.0 {
                    assert!(pre_s.as_slice()[i].abs() > tau - 1e-15);
                }
            }
            assert_eq!(b.l, b.l_factors.as_ref().unwrap().to_dense());
        }
    }

    #[test]
    fn controller_examples() {
        let cfg = ControllerConfig::default();
        let mut b = BlockState::new("c", Matrix::zeros(4, 5), 1e-7).unwrap();
        b.alpha = 3e-7;
        b.beta = 2e-7;
        // spectrum giving rank ratio 0.25 with gamma=0.999
        b.last_singular_values = Some(vec![1.0, 0.0, 0.0, 0.0]);
        b.s.as_mut_slice()[0] = 1.0; // density 0.05
        b.controller_update(&cfg).unwrap();
        assert!((b.alpha - (3e-7 + 1e-7 * 0.1 * 0.1)).abs() < 1e-22);
        assert!((b.beta - 2e-7).abs() < 1e-22);

        let mut z = BlockState::new("z", Matrix::zeros(2, 2), 1.0).unwrap();
        z.last_singular_values = Some(vec![0.0, 0.0]);
        z.controller_update(&cfg).unwrap();
        assert_eq!(z.alpha, 0.0);
        assert_eq!(z.beta, 0.0);

        let mut missing = BlockState::new("m", Matrix::zeros(2, 2), 1.0).unwrap();
        assert!(matches!(
            missing.controller_update(&cfg),
            Err(EngineError::MissingSpectrum(_))
        ));
    }

    #[test]
    fn reconstruction_error_and_surrogate() {
        let b = random_block(5, 4, 8);
        assert!((b.reconstruction_error() - b.x.sub(&b.l).sub(&b.s).frobenius_norm()).abs() < 1e-12);
        let mut z = BlockState::new("z", Matrix::identity(3), 1.0).unwrap();
        assert_eq!(z.surrogate(), Matrix::zeros(3, 3));
        assert_eq!(z.reconstruction_error(), 3f64.sqrt());
        z.l = Matrix::identity(3);
        assert_eq!(z.surrogate(), Matrix::identity(3));
        assert_eq!(z.reconstruction_error(), 0.0);
    }

    #[test]
    fn convex_limit_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = Matrix::random_normal(20, 20, 1.0, &mut rng);
        let mut b = BlockState::new("cvx", x, 0.5).unwrap();
        b.alpha = 0.5 * 2.0;
        b.beta = 0.5 * 0.1;
        let mut sweeps = 0;
        loop {
            b.adaptation_sweep(1).unwrap();
            sweeps += 1;
            if b.reconstruction_error() < 1e-6 {
                break;
            }
            assert!(sweeps < 200, "delta {}", b.reconstruction_error());
        }
    }
}
