//! Closed-form optimal transport between Gaussians.
//!
//! For source moments (m1, S1) and target moments (m2, S2), the optimal map
//! is affine, `x -> A'A x + b`, where
//!
//! ```text
//! A'A = S1^{-1/2} (S1^{1/2} S2 S1^{1/2})^{1/2} S1^{-1/2}
//! b   = m2 - A'A m1
//! ```
//!
//! and `A` is the symmetric PSD square root of `A'A`. Writing
//! `w = m1 - (A'A)^{-1} m2`, the potential whose gradient is the map shifts
//! to `f(x) = 0.5 ||A (x - w)||^2`: a nonnegative quadratic bowl whose
//! minimum value is exactly 0 at `x = w`. The additive constant the shift
//! absorbs is `t = 0.5 b'(A'A)^{-1} b`, stored on the map for reference.
//!
//! These maps serve two roles: ground truth for evaluating learned
//! transports on Gaussian tasks, and the source of the quadratic layers that
//! warm-start convex networks.

use serde::{Deserialize, Serialize};

use crate::tensor_core::{
    spd_solve, spd_sqrt, DenseMatrix, GaussianMoments, TensorResult,
};

/// Affine Monge map between two Gaussians, in potential-shifted form.
///
/// `a` is symmetric PSD with `a * a` the map's linear part; `omega` is the
/// potential's minimizer; `b = -a'a omega` is the map's offset; `t` is the
/// constant absorbed by shifting the potential's minimum to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMongeMap {
    pub a: DenseMatrix,
    pub b: Vec<f64>,
    pub omega: Vec<f64>,
    pub t: f64,
}

impl AffineMongeMap {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// The identity map in `d` dimensions (potential `0.5 ||x||^2`).
    pub fn identity(d: usize) -> Self {
        AffineMongeMap {
            a: DenseMatrix::identity(d),
            b: vec![0.0; d],
            omega: vec![0.0; d],
            t: 0.0,
        }
    }

    /// Linear part `A'A` of the map.
    pub fn curvature(&self) -> DenseMatrix {
        self.a.matmul(&self.a)
    }

    /// Map one point: `A'A x + b`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        assert_eq!(x.len(), d);
        let ata = self.curvature();
        let mut out = self.b.clone();
        for i in 0..d {
            for j in 0..d {
                out[i] += ata.get(i, j) * x[j];
            }
        }
        out
    }

    /// Map every row of `x`.
    pub fn push_forward(&self, x: &DenseMatrix) -> DenseMatrix {
        self.curvature().affine_apply_rows(x, &self.b)
    }

    /// Exact moments of the pushforward of `src` through this map:
    /// mean `A'A m + b`, covariance `A'A S A'A`.
    pub fn push_moments(&self, src: &GaussianMoments) -> TensorResult<GaussianMoments> {
        let ata = self.curvature();
        let mean = self.apply(&src.mean);
        let cov = ata.matmul(&src.cov).matmul(&ata);
        // Symmetrize round-off before the constructor's symmetry check.
        let mut sym = cov.clone();
        for r in 0..sym.rows() {
            for c in (r + 1)..sym.cols() {
                let v = 0.5 * (cov.get(r, c) + cov.get(c, r));
                sym.set(r, c, v);
                sym.set(c, r, v);
            }
        }
        GaussianMoments::new(mean, sym)
    }
}

/// Closed-form optimal map from `src` to `dst`.
///
/// The source covariance must be full rank up to the eigenvalue floor;
/// indefinite input surfaces as [`crate::tensor_core::TensorError::NotSpd`].
///
/// ```
/// use condot::gaussian_ot::gaussian_monge_map;
/// use condot::tensor_core::{DenseMatrix, GaussianMoments};
/// // 1-D: N(0, 1) to N(3, 4). Variance quadruples, so the map is 2x + 3.
/// let src = GaussianMoments::new(vec![0.0], DenseMatrix::identity(1)).unwrap();
/// let dst = GaussianMoments::new(vec![3.0], DenseMatrix::from_vec(1, 1, vec![4.0]).unwrap()).unwrap();
/// let map = gaussian_monge_map(&src, &dst).unwrap();
/// assert!((map.curvature().get(0, 0) - 2.0).abs() < 1e-12);
/// assert!((map.b[0] - 3.0).abs() < 1e-12);
/// assert!((map.apply(&[1.0])[0] - 5.0).abs() < 1e-12);
/// ```
pub fn gaussian_monge_map(
    src: &GaussianMoments,
    dst: &GaussianMoments,
) -> TensorResult<AffineMongeMap> {
    assert_eq!(src.dim(), dst.dim(), "source/target dimension mismatch");
    let d = src.dim();
    let s1_sqrt = spd_sqrt(&src.cov)?;
    let inner = s1_sqrt.matmul(&dst.cov).matmul(&s1_sqrt);
    let mid = spd_sqrt(&inner)?;
    // A'A = S1^{-1/2} mid S1^{-1/2}, computed as two SPD solves to avoid
    // forming the inverse explicitly.
    let mut ata = DenseMatrix::zeros(d, d);
    // First solve S1^{1/2} Y = mid columnwise, then S1^{1/2} (A'A)' = Y'.
    let mut y = DenseMatrix::zeros(d, d);
    for c in 0..d {
        let col: Vec<f64> = (0..d).map(|r| mid.get(r, c)).collect();
        let sol = spd_solve(&s1_sqrt, &col)?;
        for r in 0..d {
            y.set(r, c, sol[r]);
        }
    }
    for r in 0..d {
        let row: Vec<f64> = y.row(r).to_vec();
        let sol = spd_solve(&s1_sqrt, &row)?;
        for c in 0..d {
            ata.set(r, c, sol[c]);
        }
    }
    for r in 0..d {
        for c in (r + 1)..d {
            let v = 0.5 * (ata.get(r, c) + ata.get(c, r));
            ata.set(r, c, v);
            ata.set(c, r, v);
        }
    }
    let a = spd_sqrt(&ata)?;
    let mut b = dst.mean.clone();
    for i in 0..d {
        for j in 0..d {
            b[i] -= ata.get(i, j) * src.mean[j];
        }
    }
    let ata_inv_m2 = spd_solve(&ata, &dst.mean)?;
    let omega: Vec<f64> = src
        .mean
        .iter()
        .zip(&ata_inv_m2)
        .map(|(m, s)| m - s)
        .collect();
    let ata_inv_b = spd_solve(&ata, &b)?;
    let t = 0.5 * b.iter().zip(&ata_inv_b).map(|(p, q)| p * q).sum::<f64>();
    Ok(AffineMongeMap { a, b, omega, t })
}

/// Potential value `0.5 ||A (x - omega)||^2` of the shifted Brenier
/// potential. Nonnegative everywhere, zero at `omega`, gradient
/// `A'A (x - omega) = A'A x + b`.
pub fn brenier_potential(map: &AffineMongeMap, x: &[f64]) -> f64 {
    let d = map.dim();
    assert_eq!(x.len(), d);
    let mut acc = 0.0;
    for r in 0..d {
        let mut axr = 0.0;
        for c in 0..d {
            axr += map.a.get(r, c) * (x[c] - map.omega[c]);
        }
        acc += axr * axr;
    }
    0.5 * acc
}

/// Gradient of [`brenier_potential`] at `x`, equal to the map's action.
pub fn brenier_potential_grad(map: &AffineMongeMap, x: &[f64]) -> Vec<f64> {
    map.apply(x)
}

/// Quadratic layer `q(x) = 0.5 ||M (x - m)||^2`, the building block that
/// injects a closed-form map into a convex network's first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadLayer {
    pub m_weight: DenseMatrix,
    pub m_center: Vec<f64>,
}

impl QuadLayer {
    pub fn identity(d: usize) -> Self {
        QuadLayer {
            m_weight: DenseMatrix::identity(d),
            m_center: vec![0.0; d],
        }
    }

    /// The layer that reproduces `map`'s potential: weight `A`, center
    /// `omega`.
    pub fn from_map(map: &AffineMongeMap) -> Self {
        QuadLayer {
            m_weight: map.a.clone(),
            m_center: map.omega.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.m_center.len()
    }
}

/// Value and gradient of a quadratic layer at `x`:
/// `(0.5 ||M (x - m)||^2, M'M (x - m))`.
pub fn quad_layer_eval(q: &QuadLayer, x: &[f64]) -> (f64, Vec<f64>) {
    let d = q.dim();
    assert_eq!(x.len(), d);
    let mut mx = vec![0.0; q.m_weight.rows()];
    for r in 0..q.m_weight.rows() {
        for c in 0..d {
            mx[r] += q.m_weight.get(r, c) * (x[c] - q.m_center[c]);
        }
    }
    let value = 0.5 * mx.iter().map(|v| v * v).sum::<f64>();
    let mut grad = vec![0.0; d];
    for c in 0..d {
        for r in 0..q.m_weight.rows() {
            grad[c] += q.m_weight.get(r, c) * mx[r];
        }
    }
    (value, grad)
}

/// Squared 2-Wasserstein distance between Gaussians:
/// `||m_a - m_b||^2 + tr(Sa + Sb - 2 (Sa^{1/2} Sb Sa^{1/2})^{1/2})`.
///
/// The trace term is nonnegative in exact arithmetic; round-off of order
/// 1e-15 is clamped so identical moments return exactly 0.
pub fn gelbrich_distance(a: &GaussianMoments, b: &GaussianMoments) -> TensorResult<f64> {
    assert_eq!(a.dim(), b.dim(), "moment dimension mismatch");
    let d = a.dim();
    let mean_sq: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    let sa_sqrt = spd_sqrt(&a.cov)?;
    let cross = spd_sqrt(&sa_sqrt.matmul(&b.cov).matmul(&sa_sqrt))?;
    let mut trace = 0.0;
    for i in 0..d {
        trace += a.cov.get(i, i) + b.cov.get(i, i) - 2.0 * cross.get(i, i);
    }
    Ok((mean_sq + trace).max(0.0))
}
