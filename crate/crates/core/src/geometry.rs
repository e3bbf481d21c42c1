//! Distances, merging and divergences between Gaussians.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse_det, sqrt_unregularized, Point2, Spd2};

/// Bivariate normal over the (weight-mean, weight-std) plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2 {
    pub mean: Point2,
    pub cov: Spd2,
}

impl Gaussian2 {
    pub fn new(mean: Point2, cov: Spd2) -> Self {
        Self { mean, cov }
    }
}

/// Values in `[-NEG_TOLERANCE, 0)` are rounding noise and clamp to zero.
const NEG_TOLERANCE: f64 = 1e-12;

/// `(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}` for already-regularized inputs.
fn cross_root(s1: &Spd2, s2: &Spd2) -> Result<Spd2> {
    let r1 = sqrt_unregularized(*s1)?;
    sqrt_unregularized(r1.sandwich(s2))
}

/// Squared 2-Wasserstein distance between two Gaussians:
/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn wasserstein2_sq(g1: &Gaussian2, g2: &Gaussian2) -> Result<f64> {
    let s1 = g1.cov.regularized();
    let s2 = g2.cov.regularized();
    let dm0 = g1.mean[0] - g2.mean[0];
    let dm1 = g1.mean[1] - g2.mean[1];
    let cross = cross_root(&s1, &s2)?;
    let w = dm0 * dm0 + dm1 * dm1 + s1.trace() + s2.trace() - 2.0 * cross.trace();
    if w < 0.0 {
        if w >= -NEG_TOLERANCE {
            return Ok(0.0);
        }
        // Cancellation between large traces; the value is still ~0 relative
        // to their magnitude.
        let scale = s1.trace() + s2.trace();
        if w >= -NEG_TOLERANCE * scale.max(1.0) {
            return Ok(0.0);
        }
    }
    Ok(w)
}

/// Merges two components:
/// mean `(μ₁ + μ₂)/2`,
/// covariance `(Σ₁ + Σ₂)/2 + (μ₁ − μ₂)(μ₁ − μ₂)ᵀ/8 + (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}/2`.
///
/// The covariance is not idempotent: merging a component with itself gives
/// `1.5 Σ`.
pub fn merge_components(g1: &Gaussian2, g2: &Gaussian2) -> Result<Gaussian2> {
    let s1 = g1.cov.regularized();
    let s2 = g2.cov.regularized();
    let mean = [(g1.mean[0] + g2.mean[0]) / 2.0, (g1.mean[1] + g2.mean[1]) / 2.0];
    let d = [g1.mean[0] - g2.mean[0], g1.mean[1] - g2.mean[1]];
    let cross = cross_root(&s1, &s2)?;
    let cov = s1
        .add(&s2)
        .scale(0.5)
        .add(&Spd2::outer(d).scale(0.125))
        .add(&cross.scale(0.5));
    Ok(Gaussian2 { mean, cov })
}

/// `(x − μ)ᵀ Σ⁻¹ (x − μ)`
pub fn mahalanobis_sq(x: Point2, g: &Gaussian2) -> Result<f64> {
    let (inv, _) = spd_inverse_det(g.cov)?;
    let d = [x[0] - g.mean[0], x[1] - g.mean[1]];
    Ok(inv.quad_form(d).max(0.0))
}

/// `KL(N(q_mean, q_std²) ‖ N(p_mean, p_std²))`.
pub fn kl_gaussian_1d(q_mean: f64, q_std: f64, p_mean: f64, p_std: f64) -> Result<f64> {
    if !(q_std > 0.0 && p_std > 0.0) {
        return Err(Error::NonPositiveStd { q_std, p_std });
    }
    Ok(kl_unchecked(q_mean, q_std, p_mean, p_std))
}

#[inline]
pub(crate) fn kl_unchecked(q_mean: f64, q_std: f64, p_mean: f64, p_std: f64) -> f64 {
    let vq = q_std * q_std;
    let vp = p_std * p_std;
    let dm = p_mean - q_mean;
    let kl = 0.5 * (vq / vp + dm * dm / vp - 1.0 + (vp / vq).ln());
    if kl < 0.0 {
        0.0
    } else {
        kl
    }
}

/// Partial derivatives of [`kl_gaussian_1d`] with respect to `(q_mean, q_std)`.
#[inline]
pub fn kl_gaussian_1d_grad(q_mean: f64, q_std: f64, p_mean: f64, p_std: f64) -> (f64, f64) {
    let vp = p_std * p_std;
    ((q_mean - p_mean) / vp, q_std / vp - 1.0 / q_std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn g(mean: Point2, cov: Spd2) -> Gaussian2 {
        Gaussian2::new(mean, cov)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn w2_identical_is_zero() {
        let a = g([0.1, 0.02], Spd2::new(2.0, 0.3, 1.0));
        assert!(wasserstein2_sq(&a, &a).unwrap() <= 1e-14);
    }

    #[test]
    fn w2_diagonal_example() {
        let a = g([0.0, 0.0], Spd2::IDENTITY);
        let b = g([3.0, 4.0], Spd2::scaled_identity(4.0));
        let w = wasserstein2_sq(&a, &b).unwrap();
        assert!(rel(w, 27.0) <= 1e-9, "{w}");
    }

    fn random_gaussian(rng: &mut RngStream) -> Gaussian2 {
        let l1 = 10f64.powf(rng.uniform_range(-3.0, 1.0));
        let l2 = 10f64.powf(rng.uniform_range(-3.0, 1.0));
        let th = rng.uniform_range(0.0, std::f64::consts::PI);
        let (s, c) = th.sin_cos();
        let cov = Spd2::new(l1 * c * c + l2 * s * s, (l1 - l2) * c * s, l1 * s * s + l2 * c * c);
        g([rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0)], cov)
    }

    #[test]
    fn w2_symmetric() {
        let mut rng = RngStream::new(8);
        for _ in 0..100 {
            let a = random_gaussian(&mut rng);
            let b = random_gaussian(&mut rng);
            let ab = wasserstein2_sq(&a, &b).unwrap();
            let ba = wasserstein2_sq(&b, &a).unwrap();
            assert!((ab - ba).abs() <= 1e-10 * ab.max(1.0));
        }
    }

    #[test]
    fn w2_metric_properties() {
        let mut rng = RngStream::new(9);
        for _ in 0..1000 {
            let a = random_gaussian(&mut rng);
            let b = random_gaussian(&mut rng);
            let c = random_gaussian(&mut rng);
            let ab = wasserstein2_sq(&a, &b).unwrap();
            let bc = wasserstein2_sq(&b, &c).unwrap();
            let ac = wasserstein2_sq(&a, &c).unwrap();
            assert!(ab >= 0.0 && bc >= 0.0 && ac >= 0.0);
            assert!(ac.sqrt() <= ab.sqrt() + bc.sqrt() + 1e-8);
        }
    }

    #[test]
    fn w2_matches_diagonal_closed_form() {
        let mut rng = RngStream::new(10);
        for _ in 0..500 {
            let (a1, c1, a2, c2) = (
                rng.uniform_range(1e-3, 5.0),
                rng.uniform_range(1e-3, 5.0),
                rng.uniform_range(1e-3, 5.0),
                rng.uniform_range(1e-3, 5.0),
            );
            let m1 = [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
            let m2 = [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
            let oracle = (m1[0] - m2[0]).powi(2)
                + (m1[1] - m2[1]).powi(2)
                + (a1.sqrt() - a2.sqrt()).powi(2)
                + (c1.sqrt() - c2.sqrt()).powi(2);
            let w = wasserstein2_sq(&g(m1, Spd2::diag(a1, c1)), &g(m2, Spd2::diag(a2, c2))).unwrap();
            assert!((w - oracle).abs() <= 1e-10 * oracle.max(1.0), "{w} vs {oracle}");
        }
    }

    #[test]
    fn merge_examples() {
        let a = g([1.0, 2.0], Spd2::IDENTITY);
        let m = merge_components(&a, &a).unwrap();
        assert_eq!(m.mean, [1.0, 2.0]);
        assert!(rel(m.cov.a, 1.5) < 1e-12 && m.cov.b.abs() < 1e-15 && rel(m.cov.c, 1.5) < 1e-12);

        let a = g([0.0, 0.0], Spd2::IDENTITY);
        let b = g([2.0, 0.0], Spd2::IDENTITY);
        let m = merge_components(&a, &b).unwrap();
        assert_eq!(m.mean, [1.0, 0.0]);
        assert!(rel(m.cov.a, 2.0) < 1e-12 && m.cov.b.abs() < 1e-15 && rel(m.cov.c, 1.5) < 1e-12);
    }

    #[test]
    fn merge_mean_is_midpoint_and_cov_is_pd() {
        let mut rng = RngStream::new(11);
        for _ in 0..1000 {
            let a = random_gaussian(&mut rng);
            let b = random_gaussian(&mut rng);
            let m = merge_components(&a, &b).unwrap();
            assert_eq!(m.mean[0], (a.mean[0] + b.mean[0]) / 2.0);
            assert_eq!(m.mean[1], (a.mean[1] + b.mean[1]) / 2.0);
            assert!(m.cov.is_pd());
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let a = g([0.5, 0.5], Spd2::IDENTITY);
        assert_eq!(mahalanobis_sq([0.5, 0.5], &a).unwrap(), 0.0);
        assert_eq!(mahalanobis_sq([1.5, 2.5], &a).unwrap(), 5.0);
        let b = g([0.0, 0.0], Spd2::diag(4.0, 1.0));
        assert!((mahalanobis_sq([2.0, 1.0], &b).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn mahalanobis_identity_is_euclidean() {
        let mut rng = RngStream::new(12);
        let gi = g([0.25, -0.5], Spd2::IDENTITY);
        for _ in 0..200 {
            let x = [rng.uniform_range(-3.0, 3.0), rng.uniform_range(-3.0, 3.0)];
            let e = (x[0] - 0.25).powi(2) + (x[1] + 0.5).powi(2);
            assert!((mahalanobis_sq(x, &gi).unwrap() - e).abs() <= 1e-15 * e.max(1.0));
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_gaussian_1d(0.3, 0.7, 0.3, 0.7).unwrap(), 0.0);
        assert!((kl_gaussian_1d(0.0, 1.0, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let v = kl_gaussian_1d(0.0, 0.5, 0.0, 1.0).unwrap();
        assert!((v - 0.5 * (0.25 - 1.0 + 4f64.ln())).abs() < 1e-15);
        assert!((v - 0.318147).abs() < 1e-6);
        assert!(matches!(
            kl_gaussian_1d(0.0, 0.0, 0.0, 1.0),
            Err(Error::NonPositiveStd { .. })
        ));
        assert!(kl_gaussian_1d(0.0, 1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn kl_nonnegative_and_gradient_matches_differences() {
        let mut rng = RngStream::new(13);
        for _ in 0..500 {
            let (qm, qs) = (rng.uniform_range(-1.0, 1.0), rng.uniform_range(0.01, 2.0));
            let (pm, ps) = (rng.uniform_range(-1.0, 1.0), rng.uniform_range(0.01, 2.0));
            assert!(kl_gaussian_1d(qm, qs, pm, ps).unwrap() >= 0.0);
            let (gm, gs) = kl_gaussian_1d_grad(qm, qs, pm, ps);
            let h = 1e-6;
            let fm = (kl_unchecked(qm + h, qs, pm, ps) - kl_unchecked(qm - h, qs, pm, ps)) / (2.0 * h);
            let fs = (kl_unchecked(qm, qs + h, pm, ps) - kl_unchecked(qm, qs - h, pm, ps)) / (2.0 * h);
            assert!((gm - fm).abs() <= 1e-5 * gm.abs().max(1.0));
            assert!((gs - fs).abs() <= 1e-5 * gs.abs().max(1.0));
        }
    }
}
