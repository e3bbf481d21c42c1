//! Closed-form 2x2 symmetric-matrix algebra, the bivariate normal density and
//! a numerically stable softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point2 = [f64; 2];

/// Added to the diagonal of a near-singular covariance.
pub const REGULARIZATION: f64 = 1e-8;
/// A covariance with determinant or leading entry at or below this is
/// considered near-singular.
pub const SINGULAR_THRESHOLD: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Symmetric 2x2 matrix `[[a, b], [b, c]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spd2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Spd2 {
    pub const IDENTITY: Spd2 = Spd2 { a: 1.0, b: 0.0, c: 1.0 };

    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    pub fn diag(a: f64, c: f64) -> Self {
        Self { a, b: 0.0, c }
    }

    pub fn scaled_identity(s: f64) -> Self {
        Self::diag(s, s)
    }

    /// Builds a covariance, regularizing and validating it.
    pub fn covariance(a: f64, b: f64, c: f64) -> Result<Self> {
        let m = Self::new(a, b, c).regularized();
        m.check_pd()?;
        Ok(m)
    }

    /// `v vᵀ`
    pub fn outer(v: Point2) -> Self {
        Self::new(v[0] * v[0], v[0] * v[1], v[1] * v[1])
    }

    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn trace(&self) -> f64 {
        self.a + self.c
    }

    pub fn add(&self, o: &Spd2) -> Spd2 {
        Spd2::new(self.a + o.a, self.b + o.b, self.c + o.c)
    }

    pub fn sub(&self, o: &Spd2) -> Spd2 {
        Spd2::new(self.a - o.a, self.b - o.b, self.c - o.c)
    }

    pub fn scale(&self, s: f64) -> Spd2 {
        Spd2::new(self.a * s, self.b * s, self.c * s)
    }

    pub fn max_abs(&self) -> f64 {
        self.a.abs().max(self.b.abs()).max(self.c.abs())
    }

    pub fn mul_vec(&self, v: Point2) -> Point2 {
        [self.a * v[0] + self.b * v[1], self.b * v[0] + self.c * v[1]]
    }

    /// `vᵀ M v`
    pub fn quad_form(&self, v: Point2) -> f64 {
        self.a * v[0] * v[0] + 2.0 * self.b * v[0] * v[1] + self.c * v[1] * v[1]
    }

    /// Plain matrix product as a row-major 2x2 array. The product of two
    /// symmetric matrices is not symmetric in general.
    pub fn matmul(&self, o: &Spd2) -> [[f64; 2]; 2] {
        [
            [self.a * o.a + self.b * o.b, self.a * o.b + self.b * o.c],
            [self.b * o.a + self.c * o.b, self.b * o.b + self.c * o.c],
        ]
    }

    /// `S M S` for symmetric `S`, which is symmetric.
    pub fn sandwich(&self, m: &Spd2) -> Spd2 {
        let p = self.matmul(m);
        // (S M) S, keeping the upper triangle.
        let a = p[0][0] * self.a + p[0][1] * self.b;
        let b = p[0][0] * self.b + p[0][1] * self.c;
        let c = p[1][0] * self.b + p[1][1] * self.c;
        Spd2::new(a, b, c)
    }

    pub fn is_near_singular(&self) -> bool {
        self.det() <= SINGULAR_THRESHOLD || self.a < SINGULAR_THRESHOLD || self.c < SINGULAR_THRESHOLD
    }

    /// Adds `REGULARIZATION * I` when the matrix is near-singular.
    pub fn regularized(self) -> Spd2 {
        if self.is_near_singular() {
            Spd2::new(self.a + REGULARIZATION, self.b, self.c + REGULARIZATION)
        } else {
            self
        }
    }

    pub fn is_pd(&self) -> bool {
        self.a > 0.0
            && self.c > 0.0
            && self.det() > 0.0
            && self.a.is_finite()
            && self.c.is_finite()
            && self.b.is_finite()
    }

    fn check_pd(&self) -> Result<()> {
        if self.is_pd() {
            Ok(())
        } else {
            Err(Error::NonPositiveDefinite {
                det: self.det(),
                trace: self.trace(),
            })
        }
    }

    /// Eigenvalues (largest first) and the angle of the major axis, for
    /// drawing covariance ellipses.
    pub fn eigen(&self) -> (f64, f64, f64) {
        let half_tr = 0.5 * self.trace();
        let disc = (0.25 * (self.a - self.c).powi(2) + self.b * self.b).sqrt();
        let angle = 0.5 * (2.0 * self.b).atan2(self.a - self.c);
        (half_tr + disc, half_tr - disc, angle)
    }
}

/// Principal square root: `S = (M + sI) / sqrt(t + 2s)` with `t = tr M`,
/// `s = sqrt(det M)`.
pub fn spd_sqrt(m: Spd2) -> Result<Spd2> {
    sqrt_unregularized(m.regularized())
}

/// The same closed form applied to `m` as given. Used on intermediate
/// products, which are not covariances and must not be shifted.
pub(crate) fn sqrt_unregularized(m: Spd2) -> Result<Spd2> {
    let det = m.det().max(0.0);
    let tr = m.trace();
    if tr <= 0.0 || !det.is_finite() || !tr.is_finite() || m.det() < -1e-12 * tr * tr {
        return Err(Error::NonPositiveDefinite {
            det: m.det(),
            trace: tr,
        });
    }
    let s = det.sqrt();
    let denom = (tr + 2.0 * s).sqrt();
    Ok(Spd2::new((m.a + s) / denom, m.b / denom, (m.c + s) / denom))
}

/// Returns `(M⁻¹, det M)`.
pub fn spd_inverse_det(m: Spd2) -> Result<(Spd2, f64)> {
    let m = m.regularized();
    m.check_pd()?;
    let det = m.det();
    Ok((Spd2::new(m.c / det, -m.b / det, m.a / det), det))
}

/// Log density of `N(mean, cov)` at `x`.
pub fn gaussian2_logpdf(x: Point2, mean: Point2, cov: Spd2) -> Result<f64> {
    let (inv, det) = spd_inverse_det(cov)?;
    let d = [x[0] - mean[0], x[1] - mean[1]];
    Ok(-LN_2PI - 0.5 * det.ln() - 0.5 * inv.quad_form(d))
}

/// Precomputed inverse and normalizer of a bivariate normal, for evaluating
/// many points against the same component.
#[derive(Clone, Copy, Debug)]
pub struct GaussianEvaluator {
    pub mean: Point2,
    pub inv: Spd2,
    /// `-ln(2π) - ½ ln det Σ`
    pub log_norm: f64,
}

impl GaussianEvaluator {
    pub fn new(mean: Point2, cov: Spd2) -> Result<Self> {
        let (inv, det) = spd_inverse_det(cov)?;
        Ok(Self {
            mean,
            inv,
            log_norm: -LN_2PI - 0.5 * det.ln(),
        })
    }

    #[inline]
    pub fn mahalanobis_sq(&self, x: Point2) -> f64 {
        let d0 = x[0] - self.mean[0];
        let d1 = x[1] - self.mean[1];
        self.inv.a * d0 * d0 + 2.0 * self.inv.b * d0 * d1 + self.inv.c * d1 * d1
    }

    #[inline]
    pub fn logpdf(&self, x: Point2) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis_sq(x)
    }
}

/// `ln Σ exp(v_i)` computed with a max shift.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput("logsumexp of an empty vector"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

/// Softmax of `v` and its log-partition.
pub fn stable_softmax_logsumexp(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let lse = logsumexp(v)?;
    let probs: Vec<f64> = v.iter().map(|x| (x - lse).exp()).collect();
    let total: f64 = probs.iter().sum();
    Ok((probs.into_iter().map(|p| p / total).collect(), lse))
}

/// Softmax of `v` written into `out` in place, returning the log-partition.
pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        s += *o;
    }
    let inv = 1.0 / s;
    for o in out.iter_mut() {
        *o *= inv;
    }
    max + s.ln()
}
