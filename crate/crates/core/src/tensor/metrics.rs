use super::{Matrix, TensorError};

/// Fraction `k / len` where `k` is the smallest head of the spectrum whose
/// share of the total singular-value mass reaches `gamma`.
///
/// An all-zero spectrum carries no energy and yields 0.
pub fn effective_rank_ratio(singular_values: &[f64], gamma: f64) -> Result<f64, TensorError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(TensorError::InvalidArgument(format!(
            "energy coverage must lie in (0, 1], got {gamma}"
        )));
    }
    if singular_values.iter().any(|&s| s < 0.0 || !s.is_finite()) {
        return Err(TensorError::InvalidArgument(
            "singular values must be finite and nonnegative".into(),
        ));
    }
    let len = singular_values.len();
    let total: f64 = singular_values.iter().sum();
    if len == 0 || total == 0.0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (i, &s) in singular_values.iter().enumerate() {
        acc += s;
        if acc / total >= gamma {
            return Ok((i + 1) as f64 / len as f64);
        }
    }
    // rounding can leave acc/total a hair under gamma == 1
    Ok(1.0)
}

/// Fraction of entries with magnitude strictly above `zero_tol`.
pub fn density(m: &Matrix, zero_tol: f64) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let nnz = m.as_slice().iter().filter(|v| v.abs() > zero_tol).count();
    nnz as f64 / m.len() as f64
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.frobenius_norm()
}
