//! Leading singular triplets by power iteration on `MᵀM` with deflation.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{canonicalize_sign, frobenius, norm, random_unit, start_rng, IterConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdTriplet {
    pub sigma: f64,
    /// Left vector, length `m`.
    pub u: Array1<f64>,
    /// Right vector, length `n`.
    pub v: Array1<f64>,
    /// `‖Mᵀu − σv‖`.
    pub residual: f64,
    /// Set when `sigma` is tied with a neighbour and the vector was picked
    /// by the lowest-index basis rule.
    pub degenerate: bool,
}

/// Iterations of plain power iteration before switching to restarted
/// Krylov refinement, which handles clustered leading values.
const POLISH_AFTER: usize = 300;
const KRYLOV_DIM: usize = 24;

fn project_out(w: &mut Array1<f64>, basis: &[Array1<f64>]) {
    // Two passes keep the deflation orthogonal to working precision.
    for _ in 0..2 {
        for b in basis {
            let c = b.dot(w);
            w.scaled_add(-c, b);
        }
    }
}

struct Converged {
    v: Array1<f64>,
    lambda: f64,
}

fn gram_step(g: &Array2<f64>, prev: &[Array1<f64>], v: &Array1<f64>) -> Array1<f64> {
    let mut w = g.dot(v);
    project_out(&mut w, prev);
    w
}

/// Dominant eigenvector of the symmetric PSD `g` on the orthogonal
/// complement of `prev`, starting from `start`.
fn power_on_gram(
    g: &Array2<f64>,
    prev: &[Array1<f64>],
    start: Array1<f64>,
    cfg: IterConfig,
    mnorm: f64,
) -> Result<Option<Converged>> {
    let mut v = start;
    project_out(&mut v, prev);
    let nv = norm(v.view());
    if nv < 1e-8 {
        return Ok(None);
    }
    v /= nv;
    let floor = f64::EPSILON * mnorm * mnorm;
    let done = |resid: f64, lambda: f64| resid <= cfg.tol * mnorm * lambda.max(0.0).sqrt() || resid <= floor;
    let mut last_resid = f64::INFINITY;

    let mut it = 0;
    while it < cfg.max_iter.min(POLISH_AFTER) {
        it += 1;
        let w = gram_step(g, prev, &v);
        let lambda = v.dot(&w);
        let resid = norm((&w - &(lambda * &v)).view());
        last_resid = resid;
        if done(resid, lambda) {
            return Ok(Some(Converged { v, lambda }));
        }
        let nw = norm(w.view());
        if nw == 0.0 {
            return Ok(Some(Converged { v, lambda: 0.0 }));
        }
        v = w / nw;
    }

    // Restarted Krylov: Rayleigh-Ritz on span{v, Gv, G²v, ...}. The top Ritz
    // value never falls below the current Rayleigh quotient.
    let dim = KRYLOV_DIM.min(g.nrows().saturating_sub(prev.len())).max(1);
    while it < cfg.max_iter {
        let mut basis: Vec<Array1<f64>> = vec![v.clone()];
        let mut images: Vec<Array1<f64>> = Vec::with_capacity(dim);
        while images.len() < basis.len() {
            let w = gram_step(g, prev, basis.last().expect("non-empty"));
            it += 1;
            images.push(w.clone());
            if basis.len() == dim {
                break;
            }
            let mut q = w;
            project_out(&mut q, &basis);
            let nq = norm(q.view());
            if nq > 1e-12 * mnorm.max(1.0) {
                basis.push(q / nq);
            }
        }
        let b = basis.len();
        let t = nalgebra::DMatrix::from_fn(b, b, |i, j| 0.5 * (basis[i].dot(&images[j]) + basis[j].dot(&images[i])));
        let eig = nalgebra::SymmetricEigen::new(t);
        let top = eig.eigenvalues.imax();
        let y = eig.eigenvectors.column(top);
        let mut nv = Array1::zeros(v.len());
        for (q, &c) in basis.iter().zip(y.iter()) {
            nv.scaled_add(c, q);
        }
        project_out(&mut nv, prev);
        let n = norm(nv.view());
        if !(n.is_finite() && n > 0.0) {
            break;
        }
        v = nv / n;
        let w = gram_step(g, prev, &v);
        it += 1;
        let lambda = v.dot(&w);
        let resid = norm((&w - &(lambda * &v)).view());
        last_resid = resid;
        if done(resid, lambda) {
            return Ok(Some(Converged { v, lambda }));
        }
    }
    Err(Error::Convergence { iterations: cfg.max_iter, residual: last_resid, best: None })
}

/// The `k` largest singular triplets of `m`, in non-increasing `sigma`.
///
/// Start vectors come from the fixed-seed generator so results are
/// reproducible. Tied singular values (within `10·tol` relative) are
/// resolved by taking, for each tied slot, the unit vector of the tied
/// right subspace best aligned with the lowest-index basis vector not yet
/// used.
pub fn leading_singular_triplets(m: ArrayView2<f64>, k: usize, tol: f64, max_iter: usize) -> Result<Vec<SvdTriplet>> {
    let (rows, cols) = m.dim();
    let kmax = rows.min(cols);
    if k > kmax {
        return Err(Error::Shape(format!("asked for {k} triplets of a {rows}x{cols} matrix")));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain("tol must be positive".into()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric { location: "matrix passed to leading_singular_triplets".into() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let cfg = IterConfig { tol, max_iter };
    let mnorm = frobenius(m);
    let g = m.t().dot(&m);
    let mut rng = start_rng();

    // One extra triplet so a tie at the last requested slot is visible.
    let want = (k + 1).min(kmax);
    let mut vs: Vec<Array1<f64>> = Vec::with_capacity(want);
    let mut lambdas: Vec<f64> = Vec::with_capacity(want);
    while vs.len() < want {
        let start = random_unit(&mut rng, cols);
        if let Some(c) = power_on_gram(&g, &vs, start, cfg, mnorm)? {
            vs.push(c.v);
            lambdas.push(c.lambda.max(0.0));
        }
    }
    // Deflation returns values in order up to rounding; enforce it.
    let mut order: Vec<usize> = (0..want).collect();
    order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    let mut vs: Vec<Array1<f64>> = order.iter().map(|&i| vs[i].clone()).collect();
    let sigmas: Vec<f64> = order.iter().map(|&i| lambdas[i].sqrt()).collect();

    let tie = 10.0 * tol * sigmas[0].max(f64::MIN_POSITIVE);
    let mut degenerate = vec![false; want];
    let mut a = 0;
    while a < k {
        let mut b = a + 1;
        while b < want && (sigmas[a] - sigmas[b]).abs() <= tie {
            b += 1;
        }
        if b - a > 1 {
            let slots = b.min(k) - a;
            let mut chosen: Vec<Array1<f64>> = vs[..a].to_vec();
            let mut picked = Vec::with_capacity(slots);
            for j in 0..cols {
                if picked.len() == slots {
                    break;
                }
                let mut e = Array1::zeros(cols);
                e[j] = 1.0;
                if let Some(c) = power_on_gram(&g, &chosen, e, cfg, mnorm)? {
                    if (c.lambda.max(0.0).sqrt() - sigmas[a]).abs() <= tie {
                        chosen.push(c.v.clone());
                        picked.push(c.v);
                    }
                }
            }
            for (off, v) in picked.into_iter().enumerate() {
                vs[a + off] = v;
            }
            for flag in &mut degenerate[a..b] {
                *flag = true;
            }
        }
        a = b;
    }

    let mut out: Vec<SvdTriplet> = Vec::with_capacity(k);
    let mut us: Vec<Array1<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let sigma = sigmas[i];
        let mut v = vs[i].clone();
        let mut u = if sigma > 0.0 { m.dot(&v) / sigma } else { Array1::zeros(rows) };
        if !(sigma > 0.0) || norm(u.view()) < 0.5 {
            u = zero_sigma_left(rows, &us);
            canonicalize_sign(&mut v);
            canonicalize_sign(&mut u);
        } else {
            let nu = norm(u.view());
            u /= nu;
            if canonicalize_sign(&mut u) {
                v.mapv_inplace(|x| -x);
            }
        }
        let residual = norm((&m.t().dot(&u) - &(sigma * &v)).view());
        us.push(u.clone());
        out.push(SvdTriplet { sigma, u, v, residual, degenerate: degenerate[i] });
    }
    Ok(out)
}

/// Lowest-index basis vector orthogonalized against earlier left vectors.
fn zero_sigma_left(rows: usize, prev: &[Array1<f64>]) -> Array1<f64> {
    for j in 0..rows {
        let mut e = Array1::zeros(rows);
        e[j] = 1.0;
        project_out(&mut e, prev);
        let ne = norm(e.view());
        if ne > 0.5 {
            return e / ne;
        }
    }
    let mut e = Array1::zeros(rows);
    e[0] = 1.0;
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn identity() {
        let t = leading_singular_triplets(Array2::eye(4).view(), 1, 1e-7, 1000).unwrap();
        assert!((t[0].sigma - 1.0).abs() < 1e-12);
        assert!(t[0].degenerate);
        assert_eq!(t[0].v.to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t[0].u.to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn diagonal() {
        let m = Array2::from_diag(&array![3.0, 2.0, 1.0]);
        let t = leading_singular_triplets(m.view(), 2, 1e-7, 1000).unwrap();
        assert!((t[0].sigma - 3.0).abs() < 1e-10 && (t[1].sigma - 2.0).abs() < 1e-10);
        assert!((t[0].u[0].abs() - 1.0).abs() < 1e-8 && (t[1].v[1].abs() - 1.0).abs() < 1e-8);
        assert!(!t[0].degenerate);
    }

    #[test]
    fn zero_matrix() {
        let t = leading_singular_triplets(Array2::<f64>::zeros((3, 2)).view(), 2, 1e-7, 100).unwrap();
        assert_eq!(t[0].sigma, 0.0);
        assert_eq!(t[0].v.to_vec(), vec![1.0, 0.0]);
        assert_eq!(t[1].v.to_vec(), vec![0.0, 1.0]);
        assert_eq!(t[1].u.to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_large_k() {
        assert!(matches!(leading_singular_triplets(Array2::<f64>::eye(2).view(), 3, 1e-7, 10), Err(Error::Shape(_))));
    }
}
