//! Real eigenpair nearest a starting vector, by Rayleigh-quotient iteration.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{canonicalize_sign, frobenius, norm, to_nalgebra};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub lambda: f64,
    pub w: Array1<f64>,
    /// `‖Rw − λw‖`.
    pub residual: f64,
    pub iterations: usize,
    /// Residual stayed above `1e-3·‖R‖_F`: the nearest eigenvalue is
    /// probably one of a complex pair and only its real shadow was found.
    pub likely_complex: bool,
}

const PLATEAU: usize = 5;

fn rayleigh(r: ArrayView2<f64>, w: ArrayView1<f64>) -> (f64, f64) {
    let rw = r.dot(&w);
    let lambda = w.dot(&rw);
    let resid = norm((&rw - &(lambda * &w)).view());
    (lambda, resid)
}

fn finish(r: ArrayView2<f64>, mut w: Array1<f64>, iterations: usize, rnorm: f64) -> EigenPair {
    canonicalize_sign(&mut w);
    let (lambda, residual) = rayleigh(r, w.view());
    EigenPair { lambda, w, residual, iterations, likely_complex: residual > 1e-3 * rnorm }
}

/// Rayleigh-quotient iteration from `v0`.
///
/// Converges when `‖Rw − λw‖ ≤ tol·‖R‖_F`. If the best residual fails to
/// improve for five consecutive iterations the best iterate is returned as
/// is; its residual tells the caller how far it is from an eigenpair.
pub fn eigenpair_near(r: ArrayView2<f64>, v0: ArrayView1<f64>, tol: f64, max_iter: usize) -> Result<EigenPair> {
    let n = r.nrows();
    if r.ncols() != n || v0.len() != n {
        return Err(Error::Shape(format!("eigenpair_near on {:?} with start of length {}", r.dim(), v0.len())));
    }
    let nv = norm(v0);
    if !((nv - 1.0).abs() <= 1e-6) {
        return Err(Error::Domain(format!("start vector must be unit length (norm {nv})")));
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric { location: "matrix passed to eigenpair_near".into() });
    }
    let rnorm = frobenius(r);
    let target = tol * rnorm;
    let bump = 1e-8 * rnorm.max(f64::MIN_POSITIVE);
    let rm = to_nalgebra(r);

    let mut w = v0.to_owned() / nv;
    let mut best = w.clone();
    let (mut mu, mut best_resid) = rayleigh(r, w.view());
    if best_resid <= target {
        return Ok(finish(r, w, 0, rnorm));
    }
    let mut stale = 0usize;

    for it in 1..=max_iter {
        let rhs = nalgebra::DVector::from_iterator(n, w.iter().copied());
        let mut shift = mu;
        let mut solved = None;
        for _ in 0..4 {
            let mut a = rm.clone();
            for i in 0..n {
                a[(i, i)] -= shift;
            }
            match a.lu().solve(&rhs) {
                Some(x) if x.iter().all(|t| t.is_finite()) && x.norm() > 0.0 => {
                    solved = Some(x);
                    break;
                }
                _ => shift += bump,
            }
        }
        let Some(x) = solved else {
            // Every perturbed shift was singular; the iterate is already
            // an eigenvector to working precision.
            return Ok(finish(r, best, it, rnorm));
        };
        let nx = x.norm();
        w = x.iter().map(|t| t / nx).collect();
        let (lambda, resid) = rayleigh(r, w.view());
        mu = lambda;
        if resid < best_resid {
            if resid < best_resid * (1.0 - 1e-3) {
                stale = 0;
            } else {
                stale += 1;
            }
            best_resid = resid;
            best = w.clone();
        } else {
            stale += 1;
        }
        if best_resid <= target || stale >= PLATEAU {
            return Ok(finish(r, best, it, rnorm));
        }
    }
    let pair = finish(r, best, max_iter, rnorm);
    Err(Error::Convergence { iterations: max_iter, residual: pair.residual, best: Some(Box::new(pair)) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn negative_identity() {
        let r = -Array2::<f64>::eye(3);
        let p = eigenpair_near(r.view(), array![1.0, 0.0, 0.0].view(), 1e-10, 50).unwrap();
        assert_eq!(p.lambda, -1.0);
        assert_eq!(p.residual, 0.0);
        assert_eq!(p.w.to_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn nearest_pair() {
        let r = Array2::from_diag(&array![5.0, -2.0]);
        let v0 = array![0.1, 0.995];
        let v0 = &v0 / norm(v0.view());
        let p = eigenpair_near(r.view(), v0.view(), 1e-12, 50).unwrap();
        assert!((p.lambda + 2.0).abs() < 1e-10);
        assert!((p.w[1].abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_matrix_fixes_start() {
        let r = Array2::<f64>::zeros((3, 3));
        let v0 = array![0.0, 0.6, 0.8];
        let p = eigenpair_near(r.view(), v0.view(), 1e-10, 10).unwrap();
        assert_eq!(p.lambda, 0.0);
        assert_eq!(p.w.to_vec(), v0.to_vec());
    }

    #[test]
    fn rotation_flags_complex() {
        let r = array![[0.0, -1.0], [1.0, 0.0]];
        let p = eigenpair_near(r.view(), array![1.0, 0.0].view(), 1e-10, 50).unwrap();
        assert!(p.likely_complex);
    }

    #[test]
    fn rejects_non_unit_start() {
        let r = Array2::<f64>::eye(2);
        assert!(matches!(eigenpair_near(r.view(), array![1.0, 1.0].view(), 1e-8, 10), Err(Error::Domain(_))));
    }
}
