use super::svd::{svd, LowRank};
use super::{Matrix, TensorError};

fn check_tau(tau: f64) -> Result<(), TensorError> {
    if tau.is_finite() && tau >= 0.0 {
        Ok(())
    } else {
        Err(TensorError::InvalidArgument(format!(
            "threshold must be finite and nonnegative, got {tau}"
        )))
    }
}

#[inline]
pub(crate) fn shrink(z: f64, tau: f64) -> f64 {
    let mag = z.abs() - tau;
    if mag > 0.0 {
        mag.copysign(z)
    } else {
        0.0
    }
}

/// Elementwise soft thresholding, the proximal operator of `tau * |.|_1`.
pub fn soft_threshold(m: &Matrix, tau: f64) -> Result<Matrix, TensorError> {
    check_tau(tau)?;
    Ok(m.map(|z| shrink(z, tau)))
}

/// Output of singular value thresholding.
#[derive(Debug, Clone)]
pub struct SvtOutput {
    /// Nonzero part of the shrunk decomposition.
    pub factors: LowRank,
    /// Full shrunk spectrum `(sigma_i - tau)_+`, length `min(n, m)`.
    pub spectrum: Vec<f64>,
}

impl SvtOutput {
    pub fn to_dense(&self) -> Matrix {
        self.factors.to_dense()
    }
}

/// Singular value thresholding, the proximal operator of `tau * |.|_*`,
/// returning both the factored result and the shrunk spectrum.
pub fn svt_factored(m: &Matrix, tau: f64) -> Result<SvtOutput, TensorError> {
    check_tau(tau)?;
    let dec = svd(m)?;
    let spectrum: Vec<f64> = dec.singular_values.iter().map(|&s| (s - tau).max(0.0)).collect();
    let rank = spectrum.iter().take_while(|&&s| s > 0.0).count();
    let factors = LowRank::from_svd_prefix(&dec, &spectrum[..rank]);
    Ok(SvtOutput { factors, spectrum })
}

/// Singular value thresholding returning a dense matrix.
pub fn svt(m: &Matrix, tau: f64) -> Result<Matrix, TensorError> {
    Ok(svt_factored(m, tau)?.to_dense())
}
