//! The compressed posterior: every weight is an outlier with its own (μ, σ),
//! a member of one shared component, or an α-blend of its nearest
//! components.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AssignmentConfig, BlendMode};
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::linalg::{softmax_into, GaussianEvaluator, Point2, Spd2};
use crate::model::{Layout, WeightSampler};
use crate::partition::Partition;
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightAssignment {
    Outlier {
        mu: f64,
        sigma: f64,
    },
    Single {
        component: u32,
    },
    /// Candidates ordered by increasing Mahalanobis distance.
    Blended {
        entries: Vec<(u32, f64)>,
    },
}

impl WeightAssignment {
    /// The component the weight is closest to, if it is an inlier.
    pub fn primary_component(&self) -> Option<u32> {
        match self {
            WeightAssignment::Outlier { .. } => None,
            WeightAssignment::Single { component } => Some(*component),
            WeightAssignment::Blended { entries } => entries.first().map(|e| e.0),
        }
    }
}

/// Smallest α kept for a blend candidate, so that every candidate stays
/// strictly positive after f32 rounding.
pub const ALPHA_FLOOR: f64 = 1e-30;

/// `α_k ∝ pdf_k(x)`, normalized in log space. Returns the coefficients and
/// whether the uniform fallback was used (all densities zero or undefined).
pub fn compute_alpha(x: Point2, candidates: &[GaussianEvaluator]) -> Result<(Vec<f64>, bool)> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("compute_alpha needs at least one candidate"));
    }
    let logp: Vec<f64> = candidates.iter().map(|e| e.logpdf(x)).collect();
    let n = candidates.len();
    if logp.iter().all(|v| !v.is_finite()) {
        return Ok((vec![1.0 / n as f64; n], true));
    }
    let mut alpha = vec![0.0; n];
    softmax_into(&logp, &mut alpha);
    if alpha.iter().any(|&a| a < ALPHA_FLOOR) {
        for a in alpha.iter_mut() {
            *a = a.max(ALPHA_FLOOR);
        }
        let s: f64 = alpha.iter().sum();
        alpha.iter_mut().for_each(|a| *a /= s);
    }
    Ok((alpha, false))
}

/// Number of blends that fell back to uniform α.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AssignmentStats {
    pub uniform_fallbacks: usize,
}

/// Assigns every weight. Outliers keep their own point; an inlier whose
/// smallest Mahalanobis distance is within `t_m` (or every inlier, when
/// blending is off) goes to that component; the rest blend their
/// `k_nearest` nearest components.
pub fn assign_weights(
    points: &[Point2],
    partition: &Partition,
    gmm: &GmmModel,
    cfg: &AssignmentConfig,
) -> Result<(Vec<WeightAssignment>, AssignmentStats)> {
    if gmm.k() == 0 {
        return Err(Error::EmptyGmm);
    }
    if points.len() != partition.n_weights() {
        return Err(Error::InconsistentInputs(format!(
            "{} points for a partition of {} weights",
            points.len(),
            partition.n_weights()
        )));
    }
    let evals = gmm.evaluators()?;
    let k_near = cfg.k_nearest.clamp(1, gmm.k());
    let mask = partition.outlier_mask();
    let out: Vec<Result<(WeightAssignment, bool)>> = points
        .par_iter()
        .enumerate()
        .map(|(i, &x)| {
            if mask[i] {
                return Ok((WeightAssignment::Outlier { mu: x[0], sigma: x[1] }, false));
            }
            let d2: Vec<f64> = evals.iter().map(|e| e.mahalanobis_sq(x)).collect();
            let best = (0..d2.len()).fold(0, |b, j| if d2[j] < d2[b] { j } else { b });
            if !cfg.blending || d2[best] <= cfg.t_m {
                return Ok((WeightAssignment::Single { component: best as u32 }, false));
            }
            let mut order: Vec<usize> = (0..d2.len()).collect();
            let cmp = |a: &usize, b: &usize| d2[*a].total_cmp(&d2[*b]).then(a.cmp(b));
            if k_near < order.len() {
                order.select_nth_unstable_by(k_near - 1, cmp);
                order.truncate(k_near);
            }
            order.sort_by(cmp);
            let cands: Vec<GaussianEvaluator> = order.iter().map(|&j| evals[j]).collect();
            let (alpha, fallback) = compute_alpha(x, &cands)?;
            let entries = order.iter().map(|&j| j as u32).zip(alpha).collect();
            Ok((WeightAssignment::Blended { entries }, fallback))
        })
        .collect();
    let mut assignments = Vec::with_capacity(points.len());
    let mut stats = AssignmentStats::default();
    for r in out {
        let (a, fb) = r?;
        stats.uniform_fallbacks += fb as usize;
        assignments.push(a);
    }
    Ok((assignments, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_outliers: usize,
    pub n_singles: usize,
    pub n_ellipses: usize,
    pub n_gaussians: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedPosterior {
    pub layout: Layout,
    pub gmm: GmmModel,
    /// One entry per flat parameter index.
    pub assignments: Vec<WeightAssignment>,
}

fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

impl CompressedPosterior {
    pub fn n_weights(&self) -> usize {
        self.assignments.len()
    }

    pub fn counts(&self) -> Counts {
        let mut c = Counts {
            n_outliers: 0,
            n_singles: 0,
            n_ellipses: 0,
            n_gaussians: self.gmm.k(),
        };
        for a in &self.assignments {
            match a {
                WeightAssignment::Outlier { .. } => c.n_outliers += 1,
                WeightAssignment::Single { .. } => c.n_singles += 1,
                WeightAssignment::Blended { .. } => c.n_ellipses += 1,
            }
        }
        c
    }

    pub fn n_inliers(&self) -> usize {
        let c = self.counts();
        c.n_singles + c.n_ellipses
    }

    /// `2K + 2·n_outliers`: component (m, s) pairs and outlier (μ, σ) pairs.
    pub fn trainable_count(&self) -> usize {
        2 * self.gmm.k() + 2 * self.counts().n_outliers
    }

    /// `(index, μ, σ)` of every outlier, by index.
    pub fn outliers(&self) -> Vec<(usize, f64, f64)> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, a)| match a {
                WeightAssignment::Outlier { mu, sigma } => Some((i, *mu, *sigma)),
                _ => None,
            })
            .collect()
    }

    /// Rounds every stored float to f32 precision, the precision of the file
    /// format, so that a saved and reloaded model behaves identically.
    pub fn round_to_storage(&mut self) {
        for c in &mut self.gmm.components {
            c.weight = f32r(c.weight);
            c.gauss.mean = [f32r(c.gauss.mean[0]), f32r(c.gauss.mean[1])];
            let cov = c.gauss.cov;
            c.gauss.cov = Spd2::new(f32r(cov.a), f32r(cov.b), f32r(cov.c));
        }
        for a in &mut self.assignments {
            match a {
                WeightAssignment::Outlier { mu, sigma } => {
                    *mu = f32r(*mu);
                    *sigma = f32r(*sigma);
                }
                WeightAssignment::Single { .. } => {}
                WeightAssignment::Blended { entries } => {
                    for e in entries.iter_mut() {
                        e.1 = f32r(e.1);
                    }
                }
            }
        }
    }

    /// Checks ids, α and member bookkeeping; the first violation is returned.
    pub fn validate(&self) -> Result<()> {
        if self.assignments.len() != self.layout.n_weights() {
            return Err(Error::InconsistentInputs(format!(
                "{} assignments for {} weights",
                self.assignments.len(),
                self.layout.n_weights()
            )));
        }
        let k = self.gmm.k();
        for (i, a) in self.assignments.iter().enumerate() {
            match a {
                WeightAssignment::Outlier { sigma, .. } => {
                    if !(*sigma > 0.0) {
                        return Err(Error::InconsistentInputs(format!("outlier {i} has σ = {sigma}")));
                    }
                }
                WeightAssignment::Single { component } => {
                    if *component as usize >= k {
                        return Err(Error::InvalidComponentRef {
                            index: i,
                            component: *component as usize,
                            k,
                        });
                    }
                }
                WeightAssignment::Blended { entries } => {
                    if entries.is_empty() || entries.len() > u8::MAX as usize {
                        return Err(Error::InconsistentInputs(format!(
                            "weight {i} blends {} components",
                            entries.len()
                        )));
                    }
                    let mut sum = 0.0;
                    for &(c, alpha) in entries {
                        if c as usize >= k {
                            return Err(Error::InvalidComponentRef {
                                index: i,
                                component: c as usize,
                                k,
                            });
                        }
                        if !(alpha > 0.0) {
                            return Err(Error::InconsistentInputs(format!("weight {i} has α = {alpha}")));
                        }
                        sum += alpha;
                    }
                    if (sum - 1.0).abs() > 1e-6 {
                        return Err(Error::InconsistentInputs(format!("α of weight {i} sums to {sum}")));
                    }
                }
            }
        }
        let total = self.gmm.components.iter().map(|c| c.member_count).sum::<usize>();
        if total != self.n_inliers() {
            return Err(Error::InconsistentInputs(format!(
                "member counts sum to {total}, but there are {} inliers",
                self.n_inliers()
            )));
        }
        Ok(())
    }

    /// Member count of each component: the inliers whose nearest component
    /// it is.
    pub fn recount_members(&mut self) {
        for c in &mut self.gmm.components {
            c.member_count = 0;
        }
        for a in &self.assignments {
            if let Some(c) = a.primary_component() {
                if let Some(comp) = self.gmm.components.get_mut(c as usize) {
                    comp.member_count += 1;
                }
            }
        }
    }

    /// Per-weight effective `(m, s)` under parameter blending; `s` is clamped
    /// to `sigma_min`.
    pub fn effective_params(&self, sigma_min: f64) -> (Vec<f64>, Vec<f64>) {
        let comps = &self.gmm.components;
        let mut m = Vec::with_capacity(self.n_weights());
        let mut s = Vec::with_capacity(self.n_weights());
        for a in &self.assignments {
            let (mi, si) = match a {
                WeightAssignment::Outlier { mu, sigma } => (*mu, *sigma),
                WeightAssignment::Single { component } => {
                    let g = comps[*component as usize].gauss.mean;
                    (g[0], g[1])
                }
                WeightAssignment::Blended { entries } => entries.iter().fold((0.0, 0.0), |(m, s), &(c, al)| {
                    let g = comps[c as usize].gauss.mean;
                    (m + al * g[0], s + al * g[1])
                }),
            };
            m.push(mi);
            s.push(si.max(sigma_min));
        }
        (m, s)
    }
}

/// Checks the pieces against each other and assembles the posterior.
/// Member counts are recomputed from the assignments and every float is
/// rounded to storage precision.
pub fn build_compressed(
    layout: &Layout,
    points: &[Point2],
    partition: &Partition,
    gmm: &GmmModel,
    assignments: Vec<WeightAssignment>,
) -> Result<CompressedPosterior> {
    let n = layout.n_weights();
    if points.len() != n || partition.n_weights() != n || assignments.len() != n {
        return Err(Error::InconsistentInputs(format!(
            "layout has {n} weights; got {} points, a partition of {}, {} assignments",
            points.len(),
            partition.n_weights(),
            assignments.len()
        )));
    }
    let mask = partition.outlier_mask();
    for (i, a) in assignments.iter().enumerate() {
        let is_out = matches!(a, WeightAssignment::Outlier { .. });
        if is_out != mask[i] {
            return Err(Error::InconsistentInputs(format!(
                "weight {i} is {} in the partition but {} in the assignment",
                if mask[i] { "an outlier" } else { "an inlier" },
                if is_out { "an outlier" } else { "an inlier" }
            )));
        }
        if let WeightAssignment::Outlier { mu, sigma } = a {
            if *mu != points[i][0] || *sigma != points[i][1] {
                return Err(Error::InconsistentInputs(format!(
                    "outlier {i} stores ({mu}, {sigma}) but its posterior is {:?}",
                    points[i]
                )));
            }
        }
    }
    let mut cp = CompressedPosterior {
        layout: layout.clone(),
        gmm: gmm.clone(),
        assignments,
    };
    cp.recount_members();
    cp.validate()?;
    cp.round_to_storage();
    Ok(cp)
}

/// Parameters realized for one forward pass, with what is needed to route
/// gradients back to the shared parameters.
#[derive(Clone, Debug)]
pub struct Realization {
    pub weights: Vec<f64>,
    pub eps: Vec<f64>,
    /// Component drawn for each blended weight under the sampling modes;
    /// `u32::MAX` elsewhere.
    pub chosen: Vec<u32>,
}

pub const NOT_CHOSEN: u32 = u32::MAX;

fn categorical(entries: &[(u32, f64)], u: f64) -> u32 {
    let mut acc = 0.0;
    for &(c, a) in entries {
        acc += a;
        if u < acc {
            return c;
        }
    }
    entries.last().unwrap().0
}

/// Draws one value per weight: `w = m + s·ε` where `(m, s)` is the outlier's
/// own pair, the component mean, or the blend given by `mode`.
pub fn realize_weights(
    cp: &CompressedPosterior,
    rng: &mut RngStream,
    mode: BlendMode,
    sigma_min: f64,
) -> Result<Realization> {
    let n = cp.n_weights();
    let eps = crate::rng::sample_standard_normal(rng, n);
    let mut chosen = vec![NOT_CHOSEN; n];
    if mode == BlendMode::Hierarchical {
        return realize_hierarchical(cp, eps, chosen, rng, sigma_min);
    }
    if mode == BlendMode::MixtureSample {
        for (i, a) in cp.assignments.iter().enumerate() {
            if let WeightAssignment::Blended { entries } = a {
                chosen[i] = categorical(entries, rng.uniform());
            }
        }
    }
    let weights = realize_with_noise(cp, &eps, &chosen, sigma_min)?;
    Ok(Realization { weights, eps, chosen })
}

/// Deterministic part of [`realize_weights`]: given the noise and, for
/// blended weights, an optional drawn component, returns `m + max(s, σ_min)·ε`.
/// A blended weight with no drawn component uses the α-blend of its
/// candidates.
pub fn realize_with_noise(cp: &CompressedPosterior, eps: &[f64], chosen: &[u32], sigma_min: f64) -> Result<Vec<f64>> {
    let n = cp.n_weights();
    if eps.len() != n || chosen.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "noise for {} weights, model has {n}",
            eps.len()
        )));
    }
    let k = cp.gmm.k();
    let comps = &cp.gmm.components;
    let mean_of = |i: usize, c: u32| -> Result<Point2> {
        comps
            .get(c as usize)
            .map(|c| c.gauss.mean)
            .ok_or(Error::InvalidComponentRef {
                index: i,
                component: c as usize,
                k,
            })
    };
    let mut weights = Vec::with_capacity(n);
    for (i, a) in cp.assignments.iter().enumerate() {
        let (m, s) = match a {
            WeightAssignment::Outlier { mu, sigma } => (*mu, *sigma),
            WeightAssignment::Single { component } => {
                let g = mean_of(i, *component)?;
                (g[0], g[1])
            }
            WeightAssignment::Blended { entries } if chosen[i] == NOT_CHOSEN => {
                let mut acc = (0.0, 0.0);
                for &(c, al) in entries {
                    let g = mean_of(i, c)?;
                    acc.0 += al * g[0];
                    acc.1 += al * g[1];
                }
                acc
            }
            WeightAssignment::Blended { .. } => {
                let g = mean_of(i, chosen[i])?;
                (g[0], g[1])
            }
        };
        weights.push(m + s.max(sigma_min) * eps[i]);
    }
    Ok(weights)
}

fn realize_hierarchical(
    cp: &CompressedPosterior,
    eps: Vec<f64>,
    mut chosen: Vec<u32>,
    rng: &mut RngStream,
    sigma_min: f64,
) -> Result<Realization> {
    let k = cp.gmm.k();
    let comps = &cp.gmm.components;
    let mut weights = Vec::with_capacity(eps.len());
    for (i, a) in cp.assignments.iter().enumerate() {
        let pick = match a {
            WeightAssignment::Outlier { mu, sigma } => {
                weights.push(mu + sigma.max(sigma_min) * eps[i]);
                continue;
            }
            WeightAssignment::Single { component } => *component,
            WeightAssignment::Blended { entries } => categorical(entries, rng.uniform()),
        };
        let c = comps.get(pick as usize).ok_or(Error::InvalidComponentRef {
            index: i,
            component: pick as usize,
            k,
        })?;
        chosen[i] = pick;
        let (m, s) = hierarchical_draw(&c.gauss.mean, &c.gauss.cov, rng);
        weights.push(m + s.max(sigma_min) * eps[i]);
    }
    Ok(Realization { weights, eps, chosen })
}

/// `(m, s) ~ N(mean, cov)` by the Cholesky factor of `cov`.
fn hierarchical_draw(mean: &Point2, cov: &Spd2, rng: &mut RngStream) -> (f64, f64) {
    let cov = cov.regularized();
    let l00 = cov.a.sqrt();
    let l10 = cov.b / l00;
    let l11 = (cov.c - l10 * l10).max(0.0).sqrt();
    let z0 = rng.standard_normal();
    let z1 = rng.standard_normal();
    (mean[0] + l00 * z0, mean[1] + l10 * z0 + l11 * z1)
}

/// A compressed posterior paired with its sampling settings, for predictive
/// evaluation.
pub struct CompressedSampler<'a> {
    pub cp: &'a CompressedPosterior,
    pub mode: BlendMode,
    pub sigma_min: f64,
}

impl WeightSampler for CompressedSampler<'_> {
    fn layout(&self) -> &Layout {
        &self.cp.layout
    }

    fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        realize_weights(self.cp, rng, self.mode, self.sigma_min)
            .expect("compressed posterior was validated")
            .weights
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Gaussian2;
    use crate::gmm::GaussianComponent;
    use crate::partition::OutlierSource;

    fn comp(mean: Point2, cov: Spd2) -> GaussianComponent {
        GaussianComponent {
            weight: 1.0,
            gauss: Gaussian2::new(mean, cov),
            member_count: 0,
        }
    }

    fn gmm(comps: Vec<GaussianComponent>) -> GmmModel {
        let mut m = GmmModel { components: comps };
        m.normalize_weights();
        m
    }

    fn cfg() -> AssignmentConfig {
        AssignmentConfig::default()
    }

    #[test]
    fn alpha_cases() {
        let e = |m: Point2| GaussianEvaluator::new(m, Spd2::IDENTITY).unwrap();
        assert_eq!(compute_alpha([0.3, 0.1], &[e([0.0, 0.0])]).unwrap().0, vec![1.0]);
        let (a, _) = compute_alpha([1.0, 0.0], &[e([0.0, 0.0]), e([2.0, 0.0])]).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-15 && (a[1] - 0.5).abs() < 1e-15);
        let (a, _) = compute_alpha([0.5, 0.0], &[e([0.0, 0.0]), e([2.0, 0.0])]).unwrap();
        let want = std::f64::consts::E / (1.0 + std::f64::consts::E);
        assert!((a[0] - want).abs() < 1e-12);
        assert!((a[0] - 0.7311).abs() < 1e-4 && (a[1] - 0.2689).abs() < 1e-4);
        let (a, _) = compute_alpha([0.0, 0.0], &[e([0.0, 0.0]), e([100.0, 0.0])]).unwrap();
        assert!(a[1] > 0.0 && (a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_at_mean_is_single() {
        let g = gmm(vec![comp([0.0, 0.0], Spd2::IDENTITY), comp([5.0, 5.0], Spd2::IDENTITY)]);
        let p = Partition::all_inliers(1);
        let (a, _) = assign_weights(&[[5.0, 5.0]], &p, &g, &cfg()).unwrap();
        assert_eq!(a[0], WeightAssignment::Single { component: 1 });
    }

    #[test]
    fn far_point_blends_five_nearest() {
        // Six unit components on a line; the point sits at D² = 7 from the
        // closest one.
        let comps: Vec<_> = (0..6).map(|k| comp([10.0 * k as f64, 0.0], Spd2::IDENTITY)).collect();
        let g = gmm(comps);
        let x = [20.0, 7f64.sqrt()];
        let (a, _) = assign_weights(&[x], &Partition::all_inliers(1), &g, &cfg()).unwrap();
        let WeightAssignment::Blended { entries } = &a[0] else {
            panic!("{:?}", a[0])
        };
        let ids: Vec<u32> = entries.iter().map(|e| e.0).collect();
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], 2);
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert!((entries.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-9);
        for w in entries.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }

        let no_blend = AssignmentConfig {
            blending: false,
            ..cfg()
        };
        let (a, _) = assign_weights(&[x], &Partition::all_inliers(1), &g, &no_blend).unwrap();
        assert_eq!(a[0], WeightAssignment::Single { component: 2 });
    }

    #[test]
    fn empty_gmm_rejected() {
        let g = GmmModel { components: vec![] };
        assert!(matches!(
            assign_weights(&[[0.0, 0.0]], &Partition::all_inliers(1), &g, &cfg()),
            Err(Error::EmptyGmm)
        ));
    }

    fn fixture() -> (Layout, Vec<Point2>, Partition, GmmModel) {
        // 2 outliers, 7 singles, 1 weight far from both components.
        let layout = Layout::new(&[3, 2, 1]).unwrap();
        assert_eq!(layout.n_weights(), 11);
        let mut pts = vec![[0.0, 0.01]; 11];
        pts[0] = [0.9, 0.02];
        pts[5] = [-0.8, 0.03];
        pts[6] = [0.5, 0.05];
        for p in pts.iter_mut().skip(7) {
            *p = [1.0, 0.01];
        }
        let mut part = Partition::all_inliers(11);
        part.add_outliers(&[0, 5], OutlierSource::Manual).unwrap();
        let g = gmm(vec![
            comp([0.0, 0.01], Spd2::scaled_identity(1e-4)),
            comp([1.0, 0.01], Spd2::scaled_identity(1e-4)),
            comp([0.4, 0.05], Spd2::scaled_identity(1e-4)),
        ]);
        (layout, pts, part, g)
    }

    #[test]
    fn counts_of_constructed_fixture() {
        let (layout, pts, part, g) = fixture();
        let (a, _) = assign_weights(&pts, &part, &g, &cfg()).unwrap();
        let cp = build_compressed(&layout, &pts, &part, &g, a).unwrap();
        let c = cp.counts();
        assert_eq!((c.n_outliers, c.n_ellipses, c.n_gaussians), (2, 1, 3));
        assert_eq!(c.n_singles, 8);
        assert_eq!(c.n_outliers + c.n_singles + c.n_ellipses, 11);
        assert_eq!(cp.trainable_count(), 2 * 3 + 2 * 2);
        let members: usize = cp.gmm.components.iter().map(|c| c.member_count).sum();
        assert_eq!(members, 9);
    }

    #[test]
    fn all_outliers() {
        let (layout, pts, _, g) = fixture();
        let mut part = Partition::all_inliers(11);
        part.add_outliers(&(0..11).collect::<Vec<_>>(), OutlierSource::Manual)
            .unwrap();
        let (a, _) = assign_weights(&pts, &part, &g, &cfg()).unwrap();
        let cp = build_compressed(&layout, &pts, &part, &g, a).unwrap();
        let c = cp.counts();
        assert_eq!((c.n_outliers, c.n_ellipses, c.n_gaussians), (11, 0, 3));
    }

    #[test]
    fn inconsistent_inputs_rejected() {
        let (layout, pts, part, g) = fixture();
        let (mut a, _) = assign_weights(&pts, &part, &g, &cfg()).unwrap();
        a[1] = WeightAssignment::Outlier { mu: 0.0, sigma: 0.01 };
        assert!(matches!(
            build_compressed(&layout, &pts, &part, &g, a),
            Err(Error::InconsistentInputs(_))
        ));
        let (mut a, _) = assign_weights(&pts, &part, &g, &cfg()).unwrap();
        a[2] = WeightAssignment::Single { component: 9 };
        assert!(matches!(
            build_compressed(&layout, &pts, &part, &g, a),
            Err(Error::InvalidComponentRef {
                index: 2,
                component: 9,
                k: 3
            })
        ));
    }

    fn single_fixture(m: Point2, n: usize) -> CompressedPosterior {
        let layout = Layout::new(&[n - 1, 1]).unwrap();
        CompressedPosterior {
            layout,
            gmm: gmm(vec![comp(m, Spd2::IDENTITY)]),
            assignments: vec![WeightAssignment::Single { component: 0 }; n],
        }
    }

    #[test]
    fn single_component_draws_match_its_mean() {
        let cp = single_fixture([0.3, 0.2], 100_001);
        let r = realize_weights(&cp, &mut RngStream::new(1), BlendMode::ParameterBlend, 1e-6).unwrap();
        let n = r.weights.len() as f64;
        let mean = r.weights.iter().sum::<f64>() / n;
        let sd = (r.weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let se_mean = 0.2 / n.sqrt();
        let se_sd = 0.2 / (2.0 * (n - 1.0)).sqrt();
        assert!((mean - 0.3).abs() < 4.0 * se_mean);
        assert!((sd - 0.2).abs() < 4.0 * se_sd);
    }

    #[test]
    fn minimal_sigma_is_deterministic() {
        let cp = single_fixture([0.3, 1e-6], 11);
        let r = realize_weights(&cp, &mut RngStream::new(1), BlendMode::ParameterBlend, 1e-6).unwrap();
        assert!(r.weights.iter().all(|w| (w - 0.3).abs() < 1e-5));
    }

    #[test]
    fn parameter_blend_moments() {
        let n = 100_000;
        let layout = Layout::new(&[n - 1, 1]).unwrap();
        let cp = CompressedPosterior {
            layout,
            gmm: gmm(vec![comp([0.0, 0.1], Spd2::IDENTITY), comp([2.0, 0.3], Spd2::IDENTITY)]),
            assignments: vec![
                WeightAssignment::Blended {
                    entries: vec![(0, 0.5), (1, 0.5)]
                };
                n
            ],
        };
        let r = realize_weights(&cp, &mut RngStream::new(2), BlendMode::ParameterBlend, 1e-6).unwrap();
        let nf = n as f64;
        let mean = r.weights.iter().sum::<f64>() / nf;
        let sd = (r.weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * 0.2 / nf.sqrt());
        assert!((sd - 0.2).abs() < 4.0 * 0.2 / (2.0 * nf).sqrt());

        // Mixture sampling: per-draw mean 1 but the spread includes the
        // distance between component means.
        let r = realize_weights(&cp, &mut RngStream::new(2), BlendMode::MixtureSample, 1e-6).unwrap();
        let mean = r.weights.iter().sum::<f64>() / nf;
        let var = r.weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        let want = 0.5 * (0.01 + 0.09) + 1.0;
        assert!((var - want).abs() < 0.02, "{var}");
        assert!(r.chosen.iter().all(|&c| c < 2));
    }

    #[test]
    fn realization_is_seeded() {
        let (layout, pts, part, g) = fixture();
        let (a, _) = assign_weights(&pts, &part, &g, &cfg()).unwrap();
        let cp = build_compressed(&layout, &pts, &part, &g, a).unwrap();
        for mode in [
            BlendMode::ParameterBlend,
            BlendMode::MixtureSample,
            BlendMode::Hierarchical,
        ] {
            let a = realize_weights(&cp, &mut RngStream::new(5), mode, 1e-6).unwrap();
            let b = realize_weights(&cp, &mut RngStream::new(5), mode, 1e-6).unwrap();
            let c = realize_weights(&cp, &mut RngStream::new(6), mode, 1e-6).unwrap();
            assert_eq!(a.weights, b.weights);
            assert_ne!(a.weights, c.weights);
        }
    }

    #[test]
    fn bad_reference_detected_when_realizing() {
        let mut cp = single_fixture([0.0, 0.1], 3);
        cp.assignments[1] = WeightAssignment::Single { component: 4 };
        assert!(matches!(
            realize_weights(&cp, &mut RngStream::new(0), BlendMode::ParameterBlend, 1e-6),
            Err(Error::InvalidComponentRef { index: 1, .. })
        ));
    }
}
