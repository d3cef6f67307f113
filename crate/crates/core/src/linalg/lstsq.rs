//! Ridge-regularized linear least squares.

use ndarray::{Array2, ArrayView2};

use super::{from_nalgebra, to_nalgebra};
use crate::error::{Error, Result};

const MAX_CONDITION: f64 = 1e12;

/// `J = argmin ‖JX − Y‖² + ridge·‖J‖²` for samples stored as columns.
///
/// Solves the normal equations `(XXᵀ + ridge·I) Jᵀ = X Yᵀ` with a Cholesky
/// factorization. The condition number is estimated from the squared ratio
/// of the extreme diagonal entries of the factor.
pub fn least_squares_fit(x: ArrayView2<f64>, y: ArrayView2<f64>, ridge: f64) -> Result<Array2<f64>> {
    let (n, samples) = x.dim();
    if y.ncols() != samples {
        return Err(Error::Shape(format!("X has {samples} samples but Y has {}", y.ncols())));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Domain("ridge must be non-negative".into()));
    }
    let mut gram = x.dot(&x.t());
    for i in 0..n {
        gram[[i, i]] += ridge;
    }
    let rhs = x.dot(&y.t());

    let chol = nalgebra::linalg::Cholesky::new(to_nalgebra(gram.view()))
        .ok_or(Error::IllConditioned { condition: f64::INFINITY })?;
    let l = chol.l_dirty();
    let diag: Vec<f64> = (0..n).map(|i| l[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { (max / min).powi(2) } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    let jt = chol.solve(&to_nalgebra(rhs.view()));
    Ok(from_nalgebra(&jt).reversed_axes().as_standard_layout().into_owned())
}
