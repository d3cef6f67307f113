//! Deterministic dense linear algebra in `f64`.

mod eigen;
mod lstsq;
mod svd;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_xorshift::XorShiftRng;
use serde::{Deserialize, Serialize};

pub use eigen::{eigenpair_near, EigenPair};
pub use lstsq::least_squares_fit;
pub use svd::{leading_singular_triplets, SvdTriplet};

use crate::error::{Error, Result};

/// Seed for every power-iteration start vector.
pub const START_SEED: u64 = 0x5EED_5EED;
pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Iteration controls shared by the spectral routines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IterConfig {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER }
    }
}

pub(crate) fn start_rng() -> XorShiftRng {
    XorShiftRng::seed_from_u64(START_SEED)
}

pub(crate) fn random_unit(rng: &mut XorShiftRng, n: usize) -> Array1<f64> {
    let mut v: Array1<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nv = norm(v.view());
    if nv == 0.0 {
        v[0] = 1.0;
    } else {
        v /= nv;
    }
    v
}

pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn frobenius(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Flip `v` so that its largest-magnitude entry is non-negative. Returns
/// whether a flip happened. Ties go to the lowest index.
pub fn canonicalize_sign(v: &mut Array1<f64>) -> bool {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.mapv_inplace(|x| -x);
        true
    } else {
        false
    }
}

/// Acute angle between two lines, in degrees.
pub fn acute_angle(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("angle between vectors of length {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::Domain("acute angle needs two nonzero finite vectors".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let c = (dot.abs() / (nu * nv)).min(1.0);
    Ok(c.acos().to_degrees())
}

/// [`acute_angle`] for `f32` data, computed in `f64`.
pub fn acute_angle_f32(u: &[f32], v: &[f32]) -> Result<f64> {
    let a: Vec<f64> = u.iter().map(|&x| x as f64).collect();
    let b: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    acute_angle(&a, &b)
}

pub fn to_f64(m: &Array2<f32>) -> Array2<f64> {
    m.mapv(|x| x as f64)
}

pub(crate) fn to_nalgebra(m: ArrayView2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

pub(crate) fn from_nalgebra(m: &nalgebra::DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}
