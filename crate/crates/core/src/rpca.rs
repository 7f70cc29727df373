//! Post-hoc robust PCA by the inexact augmented Lagrange multiplier method.
//!
//! Splits a matrix `M` into `L + S` by minimizing `|L|_* + lambda |S|_1`
//! subject to `L + S = M`. Used as the decomposition baseline for weights
//! trained without structural regularization, and as a recovery check on
//! trained surrogates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{density, shrink, svd, svt_factored, LowRank, Matrix, TensorError};

/// Energy coverage used when reporting rank ratios.
pub const REPORT_GAMMA: f64 = 0.999;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RpcaError {
    #[error("invalid rpca config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpcaConfig {
    /// Sparse-term weight; `None` selects `1 / sqrt(max(n, m))`.
    pub lambda: Option<f64>,
    /// Initial penalty; `None` selects `1.25 / sigma_max(M)`.
    pub mu0: Option<f64>,
    pub mu_growth: f64,
    /// Upper bound on the penalty as a multiple of `mu0`.
    pub mu_max_factor: f64,
    pub max_iters: usize,
    /// Stop once `||M - L - S||_F / ||M||_F` drops below this.
    pub primal_tol: f64,
}

impl Default for RpcaConfig {
    fn default() -> Self {
        RpcaConfig {
            lambda: None,
            mu0: None,
            mu_growth: 1.5,
            mu_max_factor: 1e7,
            max_iters: 500,
            primal_tol: 1e-7,
        }
    }
}

impl RpcaConfig {
    pub fn validate(&self) -> Result<(), RpcaError> {
        let positive = |v: Option<f64>| v.is_none_or(|x| x > 0.0 && x.is_finite());
        if !positive(self.lambda) || !positive(self.mu0) {
            return Err(RpcaError::Config("lambda and mu0 must be positive".into()));
        }
        if !(self.mu_growth >= 1.0) || !(self.mu_max_factor >= 1.0) {
            return Err(RpcaError::Config("mu growth factors must be >= 1".into()));
        }
        if self.max_iters == 0 || !(self.primal_tol > 0.0) {
            return Err(RpcaError::Config("max_iters and primal_tol must be positive".into()));
        }
        Ok(())
    }

    pub fn lambda_for(&self, rows: usize, cols: usize) -> f64 {
        self.lambda
            .unwrap_or_else(|| 1.0 / (rows.max(cols) as f64).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct RpcaResult {
    pub l: Matrix,
    pub s: Matrix,
    /// Factors of `l`; `l == l_factors.to_dense()` bitwise.
    pub l_factors: LowRank,
    /// Shrunk spectrum of `l` from the last iteration.
    pub spectrum: Vec<f64>,
    pub dual: Matrix,
    pub final_mu: f64,
    pub lambda: f64,
    pub iters: usize,
    /// Relative primal residual `||M - L - S||_F / ||M||_F`.
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub rank_ratio: f64,
    pub density: f64,
}

/// One inexact-ALM sweep: `L`, then `S`, then the dual ascent step.
/// Returns the new `(L factors, spectrum, S)` and updates `dual` in place.
pub fn rpca_sweep(
    m: &Matrix,
    s: &Matrix,
    dual: &mut Matrix,
    mu: f64,
    lambda: f64,
) -> Result<(LowRank, Vec<f64>, Matrix), TensorError> {
    let inv_mu = 1.0 / mu;
    let target = Matrix::from_fn(m.rows(), m.cols(), |r, c| {
        m.get(r, c) - s.get(r, c) + dual.get(r, c) * inv_mu
    });
    let out = svt_factored(&target, inv_mu)?;
    let l = out.factors.to_dense();
    let tau = lambda * inv_mu;
    let mut s_new = Matrix::zeros(m.rows(), m.cols());
    {
        let (mv, lv, yv) = (m.as_slice(), l.as_slice(), dual.as_slice());
        for (i, sv) in s_new.as_mut_slice().iter_mut().enumerate() {
            *sv = shrink(mv[i] - lv[i] + yv[i] * inv_mu, tau);
        }
    }
    let (mv, lv, sv) = (m.as_slice(), l.as_slice(), s_new.as_slice());
    for (i, y) in dual.as_mut_slice().iter_mut().enumerate() {
        *y += mu * (mv[i] - lv[i] - sv[i]);
    }
    Ok((out.factors, out.spectrum, s_new))
}

/// Decomposes `m` into low-rank plus sparse parts. Non-convergence is not an
/// error: the partial factors are returned with `converged == false`.
pub fn rpca_decompose(m: &Matrix, cfg: &RpcaConfig) -> Result<RpcaResult, RpcaError> {
    cfg.validate()?;
    if !m.is_finite() {
        return Err(TensorError::NonFinite.into());
    }
    let (n, p) = m.shape();
    let lambda = cfg.lambda_for(n, p);
    let norm_m = m.frobenius_norm();
    if norm_m == 0.0 {
        return Ok(RpcaResult {
            l: Matrix::zeros(n, p),
            s: Matrix::zeros(n, p),
            l_factors: LowRank::empty(n, p),
            spectrum: vec![0.0; n.min(p)],
            dual: Matrix::zeros(n, p),
            final_mu: cfg.mu0.unwrap_or(1.0),
            lambda,
            iters: 1,
            final_residual: 0.0,
            residual_history: vec![0.0],
            converged: true,
            rank_ratio: 0.0,
            density: 0.0,
        });
    }

    let spectral = svd(m)?.singular_values[0];
    let mu0 = cfg.mu0.unwrap_or(1.25 / spectral);
    let mu_max = mu0 * cfg.mu_max_factor;
    let scale = spectral.max(m.max_abs() / lambda);
    let mut dual = m.scale(1.0 / scale);
    let mut s = Matrix::zeros(n, p);
    let mut mu = mu0;
    let mut history = Vec::new();
    let mut factors = LowRank::empty(n, p);
    let mut spectrum = vec![0.0; n.min(p)];
    let mut l = Matrix::zeros(n, p);
    let mut converged = false;

    for _ in 0..cfg.max_iters {
        let (f, spec, s_new) = rpca_sweep(m, &s, &mut dual, mu, lambda)?;
        l = f.to_dense();
        factors = f;
        spectrum = spec;
        s = s_new;
        let resid = m.sub(&l).sub(&s).frobenius_norm() / norm_m;
        history.push(resid);
        mu = (mu * cfg.mu_growth).min(mu_max);
        if resid <= cfg.primal_tol {
            converged = true;
            break;
        }
    }

    let rank_ratio = crate::tensor::effective_rank_ratio(&spectrum, REPORT_GAMMA)?;
    let dens = density(&s, 0.0);
    Ok(RpcaResult {
        l,
        s,
        l_factors: factors,
        spectrum,
        dual,
        final_mu: mu,
        lambda,
        iters: history.len(),
        final_residual: *history.last().unwrap_or(&0.0),
        residual_history: history,
        converged,
        rank_ratio,
        density: dens,
    })
}

/// Per-block row of an RPCA profile table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub block_name: String,
    pub rows: usize,
    pub cols: usize,
    pub rank_ratio: f64,
    pub density: f64,
    pub residual: f64,
    pub iters: usize,
    pub converged: bool,
    /// Set when the block failed; numeric fields are then NaN / zero.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcaProfile {
    pub rows: Vec<ProfileRow>,
    pub rank_ratio: MeanStd,
    pub density: MeanStd,
}

impl RpcaProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block_name,rows,cols,rank_ratio,density,residual,iters\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.block_name, r.rows, r.cols, r.rank_ratio, r.density, r.residual, r.iters
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }
}

/// Runs RPCA on every named matrix; failures are recorded per row.
pub fn rpca_profile_matrices(blocks: &[(String, Matrix)], cfg: &RpcaConfig) -> RpcaProfile {
    let rows: Vec<ProfileRow> = crate::par::map_collect(blocks, |(name, m)| {
        match rpca_decompose(m, cfg) {
            Ok(r) => ProfileRow {
                block_name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                rank_ratio: r.rank_ratio,
                density: r.density,
                residual: r.final_residual,
                iters: r.iters,
                converged: r.converged,
                error: None,
            },
            Err(e) => ProfileRow {
                block_name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                rank_ratio: f64::NAN,
                density: f64::NAN,
                residual: f64::NAN,
                iters: 0,
                converged: false,
                error: Some(e.to_string()),
            },
        }
    });
    let ok: Vec<&ProfileRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let rank: Vec<f64> = ok.iter().map(|r| r.rank_ratio).collect();
    let dens: Vec<f64> = ok.iter().map(|r| r.density).collect();
    RpcaProfile {
        rank_ratio: MeanStd::of(&rank),
        density: MeanStd::of(&dens),
        rows,
    }
}

/// Profiles the dense weight `X` of every block of a model.
pub fn rpca_profile(model: &crate::model::Model, cfg: &RpcaConfig) -> RpcaProfile {
    let blocks: Vec<(String, Matrix)> = model.blocks.iter().map(|b| (b.name.clone(), b.x.clone())).collect();
    rpca_profile_matrices(&blocks, cfg)
}
