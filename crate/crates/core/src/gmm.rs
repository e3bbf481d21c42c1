//! Bivariate Gaussian mixture over the (μ, σ) plane.
//!
//! Fitting runs mini-batch k-means for the initial partition, then
//! stochastic EM with exponentially averaged sufficient statistics. Small
//! clusters are pruned and close components are merged greedily under a
//! 2-Wasserstein gate.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{merge_components, wasserstein2_sq, Gaussian2};
use crate::linalg::{softmax_into, GaussianEvaluator, Point2, Spd2};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub gauss: Gaussian2,
    pub member_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: Vec<GaussianComponent>,
}

/// Points per parallel work unit. Fixed so that reductions do not depend on
/// the thread count.
const CHUNK: usize = 512;

impl GmmModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    pub fn normalize_weights(&mut self) {
        let s = self.weight_sum();
        if s > 0.0 {
            for c in &mut self.components {
                c.weight /= s;
            }
        }
    }

    pub fn evaluators(&self) -> Result<Vec<GaussianEvaluator>> {
        self.components
            .iter()
            .map(|c| GaussianEvaluator::new(c.gauss.mean, c.gauss.cov))
            .collect()
    }

    fn log_weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight.ln()).collect()
    }
}

fn dist_sq(a: Point2, b: Point2) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    d0 * d0 + d1 * d1
}

fn nearest(x: Point2, centers: &[Point2]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = dist_sq(x, *c);
        if d < bd {
            bd = d;
            best = k;
        }
    }
    best
}

/// k-means++ seeding.
fn seed_centers(points: &[Point2], k: usize, rng: &mut RngStream) -> Vec<Point2> {
    let mut centers = vec![points[rng.below(points.len())]];
    let mut d2: Vec<f64> = points.par_iter().map(|&p| dist_sq(p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.below(points.len())
        };
        let c = points[next];
        centers.push(c);
        d2.par_iter_mut().zip(points.par_iter()).for_each(|(d, &p)| {
            let v = dist_sq(p, c);
            if v < *d {
                *d = v;
            }
        });
    }
    centers
}

/// Components from a hard partition: empirical means and (regularized)
/// covariances, weights proportional to size. Empty clusters are dropped.
pub fn components_from_labels(points: &[Point2], labels: &[usize], k: usize) -> Result<GmmModel> {
    let mut n = vec![0usize; k];
    let mut s1 = vec![[0.0f64; 2]; k];
    for (p, &l) in points.iter().zip(labels) {
        n[l] += 1;
        s1[l][0] += p[0];
        s1[l][1] += p[1];
    }
    let means: Vec<Point2> = (0..k)
        .map(|l| {
            let c = n[l].max(1) as f64;
            [s1[l][0] / c, s1[l][1] / c]
        })
        .collect();
    let mut s2 = vec![[0.0f64; 3]; k];
    for (p, &l) in points.iter().zip(labels) {
        let d0 = p[0] - means[l][0];
        let d1 = p[1] - means[l][1];
        s2[l][0] += d0 * d0;
        s2[l][1] += d0 * d1;
        s2[l][2] += d1 * d1;
    }
    let total = points.len() as f64;
    let mut components = Vec::with_capacity(k);
    for l in 0..k {
        if n[l] == 0 {
            continue;
        }
        let c = n[l] as f64;
        let cov = Spd2::covariance(s2[l][0] / c, s2[l][1] / c, s2[l][2] / c)?;
        components.push(GaussianComponent {
            weight: c / total,
            gauss: Gaussian2::new(means[l], cov),
            member_count: n[l],
        });
    }
    Ok(GmmModel { components })
}

/// Mini-batch k-means with k-means++ seeding; the resulting clusters become
/// the initial components.
pub fn init_gmm(points: &[Point2], k: usize, batch: usize, iters: usize, rng: &mut RngStream) -> Result<GmmModel> {
    if k == 0 {
        return Err(Error::EmptyGmm);
    }
    if points.len() < k {
        return Err(Error::TooFewPoints {
            needed: k,
            got: points.len(),
        });
    }
    let mut centers = seed_centers(points, k, rng);
    let batch = batch.max(k).min(points.len());
    let mut seen = vec![0usize; k];
    for _ in 0..iters {
        let idx: Vec<usize> = (0..batch).map(|_| rng.below(points.len())).collect();
        let labels: Vec<usize> = idx.par_iter().map(|&i| nearest(points[i], &centers)).collect();
        for (&i, &l) in idx.iter().zip(&labels) {
            seen[l] += 1;
            let eta = 1.0 / seen[l] as f64;
            let c = &mut centers[l];
            c[0] += eta * (points[i][0] - c[0]);
            c[1] += eta * (points[i][1] - c[1]);
        }
    }
    let labels: Vec<usize> = points.par_iter().map(|&p| nearest(p, &centers)).collect();
    components_from_labels(points, &labels, k)
}

/// Per-component sufficient statistics, normalized per point:
/// `E[r]`, `E[r x]`, `E[r x xᵀ]` (upper triangle).
#[derive(Clone, Debug)]
struct SuffStats {
    s0: Vec<f64>,
    s1: Vec<[f64; 2]>,
    s2: Vec<[f64; 3]>,
}

impl SuffStats {
    fn zeros(k: usize) -> Self {
        Self {
            s0: vec![0.0; k],
            s1: vec![[0.0; 2]; k],
            s2: vec![[0.0; 3]; k],
        }
    }

    fn from_model(m: &GmmModel) -> Self {
        let mut s = Self::zeros(m.k());
        for (k, c) in m.components.iter().enumerate() {
            let (mu, cov, w) = (c.gauss.mean, c.gauss.cov, c.weight);
            s.s0[k] = w;
            s.s1[k] = [w * mu[0], w * mu[1]];
            s.s2[k] = [
                w * (cov.a + mu[0] * mu[0]),
                w * (cov.b + mu[0] * mu[1]),
                w * (cov.c + mu[1] * mu[1]),
            ];
        }
        s
    }

    fn add(&mut self, o: &SuffStats) {
        for k in 0..self.s0.len() {
            self.s0[k] += o.s0[k];
            for d in 0..2 {
                self.s1[k][d] += o.s1[k][d];
            }
            for d in 0..3 {
                self.s2[k][d] += o.s2[k][d];
            }
        }
    }

    fn blend(&mut self, o: &SuffStats, rho: f64) {
        for k in 0..self.s0.len() {
            self.s0[k] = (1.0 - rho) * self.s0[k] + rho * o.s0[k];
            for d in 0..2 {
                self.s1[k][d] = (1.0 - rho) * self.s1[k][d] + rho * o.s1[k][d];
            }
            for d in 0..3 {
                self.s2[k][d] = (1.0 - rho) * self.s2[k][d] + rho * o.s2[k][d];
            }
        }
    }
}

/// E-step over `points`, returning per-point-normalized statistics and the
/// summed log likelihood.
fn e_step(model: &GmmModel, points: &[Point2]) -> Result<(SuffStats, f64)> {
    let k = model.k();
    let evals = model.evaluators()?;
    let logw = model.log_weights();
    let partials: Vec<(SuffStats, f64)> = points
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut st = SuffStats::zeros(k);
            let mut lj = vec![0.0; k];
            let mut r = vec![0.0; k];
            let mut ll = 0.0;
            for &x in chunk {
                for j in 0..k {
                    lj[j] = logw[j] + evals[j].logpdf(x);
                }
                ll += softmax_into(&lj, &mut r);
                for j in 0..k {
                    let rj = r[j];
                    if rj == 0.0 {
                        continue;
                    }
                    st.s0[j] += rj;
                    st.s1[j][0] += rj * x[0];
                    st.s1[j][1] += rj * x[1];
                    st.s2[j][0] += rj * x[0] * x[0];
                    st.s2[j][1] += rj * x[0] * x[1];
                    st.s2[j][2] += rj * x[1] * x[1];
                }
            }
            (st, ll)
        })
        .collect();
    let mut total = SuffStats::zeros(k);
    let mut ll = 0.0;
    for (s, l) in &partials {
        total.add(s);
        ll += l;
    }
    let inv = 1.0 / points.len() as f64;
    for j in 0..k {
        total.s0[j] *= inv;
        for d in 0..2 {
            total.s1[j][d] *= inv;
        }
        for d in 0..3 {
            total.s2[j][d] *= inv;
        }
    }
    Ok((total, ll))
}

/// Components whose responsibility mass falls below this keep their previous
/// parameters; pruning removes them later.
const MIN_MASS: f64 = 1e-300;

fn m_step(model: &mut GmmModel, st: &SuffStats) -> Result<()> {
    for (k, c) in model.components.iter_mut().enumerate() {
        let s0 = st.s0[k];
        c.weight = s0;
        if s0 <= MIN_MASS {
            continue;
        }
        let m = [st.s1[k][0] / s0, st.s1[k][1] / s0];
        let a = st.s2[k][0] / s0 - m[0] * m[0];
        let b = st.s2[k][1] / s0 - m[0] * m[1];
        let cc = st.s2[k][2] / s0 - m[1] * m[1];
        c.gauss = Gaussian2::new(m, Spd2::covariance(a.max(0.0), b, cc.max(0.0))?);
    }
    model.normalize_weights();
    Ok(())
}

/// EM step size for mini-batch `t` (0-based).
pub fn step_size(t: usize) -> f64 {
    (t as f64 + 10.0).powf(-0.6)
}

/// Stochastic EM: each mini-batch's statistics are blended into running
/// averages with step `ρ_t = (t + 10)^(-0.6)`, followed by an M-step.
pub fn em_minibatch_fit(
    mut model: GmmModel,
    points: &[Point2],
    epochs: usize,
    batch: usize,
    rng: &mut RngStream,
) -> Result<GmmModel> {
    if model.k() == 0 {
        return Err(Error::EmptyGmm);
    }
    if points.is_empty() {
        return Err(Error::EmptyInput("no points to fit"));
    }
    let batch = batch.clamp(1, points.len());
    let mut running = SuffStats::from_model(&model);
    let mut t = 0;
    let mut buf = Vec::with_capacity(batch);
    for _ in 0..epochs {
        let order = rng.permutation(points.len());
        for rows in order.chunks(batch) {
            buf.clear();
            buf.extend(rows.iter().map(|&i| points[i]));
            let (st, _) = e_step(&model, &buf)?;
            running.blend(&st, step_size(t));
            m_step(&mut model, &running)?;
            t += 1;
        }
    }
    Ok(model)
}

/// Classic EM on all points. Returns the fitted model and the total log
/// likelihood before each iteration and after the last.
pub fn em_full_batch(mut model: GmmModel, points: &[Point2], iters: usize) -> Result<(GmmModel, Vec<f64>)> {
    if model.k() == 0 {
        return Err(Error::EmptyGmm);
    }
    if points.is_empty() {
        return Err(Error::EmptyInput("no points to fit"));
    }
    let mut trace = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let (st, ll) = e_step(&model, points)?;
        trace.push(ll);
        m_step(&mut model, &st)?;
    }
    trace.push(gmm_loglik(&model, points)?);
    Ok((model, trace))
}

/// `Σ_x ln Σ_k π_k N(x; μ_k, Σ_k)`
pub fn gmm_loglik(model: &GmmModel, points: &[Point2]) -> Result<f64> {
    if model.k() == 0 {
        return Err(Error::EmptyGmm);
    }
    let evals = model.evaluators()?;
    let logw = model.log_weights();
    let parts: Vec<f64> = points
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut lj = vec![0.0; evals.len()];
            let mut r = vec![0.0; evals.len()];
            chunk
                .iter()
                .map(|&x| {
                    for j in 0..evals.len() {
                        lj[j] = logw[j] + evals[j].logpdf(x);
                    }
                    softmax_into(&lj, &mut r)
                })
                .sum::<f64>()
        })
        .collect();
    Ok(parts.iter().sum())
}

/// Arg-max responsibility per point (lowest index on ties). Updates every
/// component's member count.
pub fn hard_assign(model: &mut GmmModel, points: &[Point2]) -> Result<Vec<usize>> {
    if model.k() == 0 {
        return Err(Error::EmptyGmm);
    }
    let evals = model.evaluators()?;
    let logw = model.log_weights();
    let labels: Vec<usize> = points
        .par_iter()
        .map(|&x| {
            let mut best = 0;
            let mut bv = f64::NEG_INFINITY;
            for j in 0..evals.len() {
                let v = logw[j] + evals[j].logpdf(x);
                if v > bv {
                    bv = v;
                    best = j;
                }
            }
            best
        })
        .collect();
    for c in &mut model.components {
        c.member_count = 0;
    }
    for &l in &labels {
        model.components[l].member_count += 1;
    }
    Ok(labels)
}

/// Result of pruning: the surviving model, the positions (into the point
/// list) whose cluster was removed, and the relabelled hard assignment
/// (`None` for pruned points).
#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub model: GmmModel,
    pub pruned_points: Vec<usize>,
    pub labels: Vec<Option<usize>>,
}

pub fn prune_small_clusters(model: &GmmModel, labels: &[usize], n_min: usize) -> Result<PruneOutcome> {
    let k = model.k();
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::InconsistentInputs(format!("label {l} out of range for K = {k}")));
        }
        counts[l] += 1;
    }
    let mut remap = vec![None; k];
    let mut components = Vec::new();
    for (j, c) in model.components.iter().enumerate() {
        if counts[j] >= n_min && counts[j] > 0 {
            remap[j] = Some(components.len());
            components.push(GaussianComponent {
                member_count: counts[j],
                ..*c
            });
        }
    }
    if components.is_empty() {
        return Err(Error::AllClustersPruned { n_min });
    }
    let mut out = GmmModel { components };
    out.normalize_weights();
    let new_labels: Vec<Option<usize>> = labels.iter().map(|&l| remap[l]).collect();
    let pruned_points = new_labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.is_none().then_some(i))
        .collect();
    Ok(PruneOutcome {
        model: out,
        pruned_points,
        labels: new_labels,
    })
}

/// Per-component member statistics used by the merge gates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDiagnostics {
    pub count: Vec<usize>,
    /// Mean gradient magnitude of the members.
    pub grad_mean: Vec<f64>,
    /// Empirical mean of the member points.
    pub point_mean: Vec<Point2>,
    /// Trace of the member points' empirical covariance.
    pub variance: Vec<f64>,
}

impl ClusterDiagnostics {
    /// `labels[i]` is the component of point `i` (or `None` if it has none);
    /// `grads[i]` its gradient statistic.
    pub fn compute(k: usize, points: &[Point2], labels: &[Option<usize>], grads: &[f64]) -> Self {
        let mut count = vec![0usize; k];
        let mut gsum = vec![0.0; k];
        let mut psum = vec![[0.0; 2]; k];
        for ((p, l), g) in points.iter().zip(labels).zip(grads) {
            if let Some(l) = *l {
                count[l] += 1;
                gsum[l] += g;
                psum[l][0] += p[0];
                psum[l][1] += p[1];
            }
        }
        let point_mean: Vec<Point2> = (0..k)
            .map(|j| {
                let c = count[j].max(1) as f64;
                [psum[j][0] / c, psum[j][1] / c]
            })
            .collect();
        let mut vsum = vec![0.0; k];
        for (p, l) in points.iter().zip(labels) {
            if let Some(l) = *l {
                vsum[l] += dist_sq(*p, point_mean[l]);
            }
        }
        let grad_mean = (0..k).map(|j| gsum[j] / count[j].max(1) as f64).collect();
        let variance = (0..k).map(|j| vsum[j] / count[j].max(1) as f64).collect();
        Self {
            count,
            grad_mean,
            point_mean,
            variance,
        }
    }

    /// Diagnostics of the union of clusters `i` and `j`, exact from the
    /// per-cluster moments.
    fn union(&self, i: usize, j: usize) -> (usize, f64, Point2, f64) {
        let (ni, nj) = (self.count[i] as f64, self.count[j] as f64);
        let n = ni + nj;
        if n == 0.0 {
            return (0, 0.0, self.point_mean[i], 0.0);
        }
        let g = (ni * self.grad_mean[i] + nj * self.grad_mean[j]) / n;
        let (mi, mj) = (self.point_mean[i], self.point_mean[j]);
        let m = [(ni * mi[0] + nj * mj[0]) / n, (ni * mi[1] + nj * mj[1]) / n];
        let v = (ni * (self.variance[i] + dist_sq(mi, m)) + nj * (self.variance[j] + dist_sq(mj, m))) / n;
        (self.count[i] + self.count[j], g, m, v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeGates {
    /// Upper bound on the 2-Wasserstein distance.
    pub tau_d: f64,
    pub tau_g: f64,
    pub tau_v: f64,
}

impl MergeGates {
    pub fn new(tau_d: f64, tau_g: Option<f64>, tau_v: Option<f64>) -> Result<Self> {
        let g = Self {
            tau_d,
            tau_g: tau_g.unwrap_or(f64::INFINITY),
            tau_v: tau_v.unwrap_or(f64::INFINITY),
        };
        if !(g.tau_d > 0.0 && g.tau_g > 0.0 && g.tau_v > 0.0) {
            return Err(Error::BadThreshold(format!("merge thresholds must be positive: {g:?}")));
        }
        Ok(g)
    }
}

#[derive(Clone, Debug)]
pub struct MergeOutcome {
    pub model: GmmModel,
    pub diagnostics: ClusterDiagnostics,
    /// Old component index → new component index.
    pub mapping: Vec<usize>,
    pub n_merges: usize,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    w2: f64,
    i: usize,
    j: usize,
    vi: u32,
    vj: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, o: &Self) -> Ordering {
        // Reversed for a min-heap on (w2, i, j).
        o.w2.total_cmp(&self.w2)
            .then_with(|| o.i.cmp(&self.i))
            .then_with(|| o.j.cmp(&self.j))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

struct MergeState {
    gauss: Vec<Gaussian2>,
    weight: Vec<f64>,
    alive: Vec<bool>,
    version: Vec<u32>,
    diags: ClusterDiagnostics,
}

impl MergeState {
    /// W₂² between `i` and `j` if the pair passes every gate.
    fn gated(&self, i: usize, j: usize, g: &MergeGates) -> Result<Option<f64>> {
        if (self.diags.grad_mean[i] - self.diags.grad_mean[j]).abs() >= g.tau_g
            || (self.diags.variance[i] - self.diags.variance[j]).abs() >= g.tau_v
        {
            return Ok(None);
        }
        let w2 = wasserstein2_sq(&self.gauss[i], &self.gauss[j])?;
        Ok((w2.sqrt() < g.tau_d).then_some(w2))
    }

    fn push_pairs(&self, i: usize, heap: &mut BinaryHeap<Candidate>, g: &MergeGates) -> Result<()> {
        let found: Vec<Result<Option<Candidate>>> = (0..self.gauss.len())
            .into_par_iter()
            .filter(|&j| j != i && self.alive[j])
            .map(|j| {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                Ok(self.gated(a, b, g)?.map(|w2| Candidate {
                    w2,
                    i: a,
                    j: b,
                    vi: self.version[a],
                    vj: self.version[b],
                }))
            })
            .collect();
        for c in found {
            if let Some(c) = c? {
                heap.push(c);
            }
        }
        Ok(())
    }
}

/// Repeatedly merges the gated pair with the smallest W₂² until no pair
/// passes the gates. The merged component takes the lower index slot; weights
/// and member counts add.
pub fn merge_pass(model: &GmmModel, diags: &ClusterDiagnostics, gates: &MergeGates) -> Result<MergeOutcome> {
    let k = model.k();
    if diags.count.len() != k {
        return Err(Error::InconsistentInputs(format!(
            "{} diagnostics for {k} components",
            diags.count.len()
        )));
    }
    let mut st = MergeState {
        gauss: model.components.iter().map(|c| c.gauss).collect(),
        weight: model.components.iter().map(|c| c.weight).collect(),
        alive: vec![true; k],
        version: vec![0; k],
        diags: diags.clone(),
    };
    let mut counts: Vec<usize> = model.components.iter().map(|c| c.member_count).collect();
    let mut parent: Vec<usize> = (0..k).collect();

    let mut heap = BinaryHeap::new();
    let initial: Vec<Result<Vec<Candidate>>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut v = Vec::new();
            for j in i + 1..k {
                if let Some(w2) = st.gated(i, j, gates)? {
                    v.push(Candidate { w2, i, j, vi: 0, vj: 0 });
                }
            }
            Ok(v)
        })
        .collect();
    for v in initial {
        heap.extend(v?);
    }

    let mut n_merges = 0;
    while let Some(c) = heap.pop() {
        if !st.alive[c.i] || !st.alive[c.j] || st.version[c.i] != c.vi || st.version[c.j] != c.vj {
            continue;
        }
        let merged = merge_components(&st.gauss[c.i], &st.gauss[c.j])?;
        let (n, g, m, v) = st.diags.union(c.i, c.j);
        st.gauss[c.i] = merged;
        st.weight[c.i] += st.weight[c.j];
        st.alive[c.j] = false;
        st.version[c.i] += 1;
        st.diags.count[c.i] = n;
        st.diags.grad_mean[c.i] = g;
        st.diags.point_mean[c.i] = m;
        st.diags.variance[c.i] = v;
        counts[c.i] += counts[c.j];
        parent[c.j] = c.i;
        n_merges += 1;
        st.push_pairs(c.i, &mut heap, gates)?;
    }

    let mut new_index = vec![usize::MAX; k];
    let mut components = Vec::new();
    let mut out_diag = ClusterDiagnostics {
        count: Vec::new(),
        grad_mean: Vec::new(),
        point_mean: Vec::new(),
        variance: Vec::new(),
    };
    for i in 0..k {
        if st.alive[i] {
            new_index[i] = components.len();
            components.push(GaussianComponent {
                weight: st.weight[i],
                gauss: st.gauss[i],
                member_count: counts[i],
            });
            out_diag.count.push(st.diags.count[i]);
            out_diag.grad_mean.push(st.diags.grad_mean[i]);
            out_diag.point_mean.push(st.diags.point_mean[i]);
            out_diag.variance.push(st.diags.variance[i]);
        }
    }
    let mapping = (0..k)
        .map(|i| {
            let mut r = i;
            while parent[r] != r {
                r = parent[r];
            }
            new_index[r]
        })
        .collect();
    let mut model = GmmModel { components };
    model.normalize_weights();
    Ok(MergeOutcome {
        model,
        diagnostics: out_diag,
        mapping,
        n_merges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> (Vec<Point2>, [Point2; 3], [f64; 3]) {
        let means = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let pis = [0.5, 0.3, 0.2];
        let mut rng = RngStream::new(seed);
        let pts = (0..n)
            .map(|_| {
                let u = rng.uniform();
                let k = if u < 0.5 {
                    0
                } else if u < 0.8 {
                    1
                } else {
                    2
                };
                [means[k][0] + rng.standard_normal(), means[k][1] + rng.standard_normal()]
            })
            .collect();
        (pts, means, pis)
    }

    fn comp(w: f64, mean: Point2, cov: Spd2) -> GaussianComponent {
        GaussianComponent {
            weight: w,
            gauss: Gaussian2::new(mean, cov),
            member_count: 0,
        }
    }

    fn match_means(model: &GmmModel, truth: &[Point2]) -> Vec<usize> {
        truth
            .iter()
            .map(|t| {
                (0..model.k())
                    .min_by(|&a, &b| {
                        dist_sq(model.components[a].gauss.mean, *t)
                            .total_cmp(&dist_sq(model.components[b].gauss.mean, *t))
                    })
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn identical_points_give_regularized_component() {
        let pts = vec![[0.3, 0.01]; 50];
        let m = init_gmm(&pts, 1, 16, 5, &mut RngStream::new(1)).unwrap();
        assert_eq!(m.k(), 1);
        let c = &m.components[0];
        assert!((c.gauss.mean[0] - 0.3).abs() < 1e-14 && (c.gauss.mean[1] - 0.01).abs() < 1e-14);
        assert!((c.gauss.cov.a - 1e-8).abs() < 1e-20 && c.gauss.cov.b.abs() < 1e-20);
        assert_eq!(c.weight, 1.0);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            init_gmm(&[[0.0, 0.0]], 2, 4, 1, &mut RngStream::new(0)),
            Err(Error::TooFewPoints { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn kmeans_finds_separated_blobs() {
        let (pts, means, _) = blobs(3000, 2);
        let m = init_gmm(&pts, 3, 256, 50, &mut RngStream::new(3)).unwrap();
        assert_eq!(m.k(), 3);
        let idx = match_means(&m, &means);
        for (t, &j) in means.iter().zip(&idx) {
            assert!(dist_sq(m.components[j].gauss.mean, *t).sqrt() < 0.1);
        }
        assert!((m.weight_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_sizes_decay() {
        assert!((step_size(0) - 10f64.powf(-0.6)).abs() < 1e-15);
        assert!(step_size(100) < step_size(10));
    }

    #[test]
    fn loglik_of_standard_normal_at_mean() {
        let m = GmmModel {
            components: vec![comp(1.0, [0.0, 0.0], Spd2::IDENTITY)],
        };
        let ll = gmm_loglik(&m, &[[0.0, 0.0]]).unwrap();
        assert!((ll - (1.0 / (2.0 * std::f64::consts::PI)).ln()).abs() < 1e-14);
    }

    #[test]
    fn duplicated_component_collapses() {
        let one = GmmModel {
            components: vec![comp(1.0, [1.0, 2.0], Spd2::new(2.0, 0.3, 1.0))],
        };
        let two = GmmModel {
            components: vec![
                comp(0.5, [1.0, 2.0], Spd2::new(2.0, 0.3, 1.0)),
                comp(0.5, [1.0, 2.0], Spd2::new(2.0, 0.3, 1.0)),
            ],
        };
        let pts = [[0.0, 0.0], [1.0, 1.0], [3.0, -2.0]];
        let a = gmm_loglik(&one, &pts).unwrap();
        let b = gmm_loglik(&two, &pts).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn far_point_lowers_mean_loglik() {
        let (pts, _, _) = blobs(300, 4);
        let m = init_gmm(&pts, 3, 128, 20, &mut RngStream::new(5)).unwrap();
        let base = gmm_loglik(&m, &pts).unwrap() / pts.len() as f64;
        let mut more = pts.clone();
        more.push([100.0, 100.0]);
        let with = gmm_loglik(&m, &more).unwrap() / more.len() as f64;
        assert!(with < base);
    }

    #[test]
    fn full_batch_em_is_monotone() {
        let (pts, _, _) = blobs(500, 6);
        let init = init_gmm(&pts, 3, 128, 10, &mut RngStream::new(7)).unwrap();
        let (_, trace) = em_full_batch(init, &pts, 50).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn full_batch_em_recovers_mixture() {
        let (pts, means, pis) = blobs(50_000, 6);
        let init = init_gmm(&pts, 3, 512, 20, &mut RngStream::new(7)).unwrap();
        let (m, _) = em_full_batch(init, &pts, 30).unwrap();
        let idx = match_means(&m, &means);
        for k in 0..3 {
            let c = &m.components[idx[k]];
            assert!(dist_sq(c.gauss.mean, means[k]).sqrt() < 0.05);
            assert!((c.weight - pis[k]).abs() < 0.02);
        }
    }

    #[test]
    fn minibatch_close_to_full_batch() {
        let (pts, _, _) = blobs(4000, 8);
        let init = init_gmm(&pts, 3, 256, 20, &mut RngStream::new(9)).unwrap();
        let (full, _) = em_full_batch(init.clone(), &pts, 100).unwrap();
        let mb = em_minibatch_fit(init, &pts, 5, 200, &mut RngStream::new(10)).unwrap();
        let a = gmm_loglik(&full, &pts).unwrap() / pts.len() as f64;
        let b = gmm_loglik(&mb, &pts).unwrap() / pts.len() as f64;
        assert!(((a - b) / a).abs() < 0.01, "{a} vs {b}");
    }

    #[test]
    fn prune_removes_small_cluster() {
        let m = GmmModel {
            components: vec![
                comp(0.4, [0.0, 0.0], Spd2::IDENTITY),
                comp(0.2, [5.0, 0.0], Spd2::IDENTITY),
                comp(0.4, [9.0, 0.0], Spd2::IDENTITY),
            ],
        };
        let mut labels = vec![0; 100];
        labels.extend(vec![1; 29]);
        labels.extend(vec![2; 100]);
        let out = prune_small_clusters(&m, &labels, 30).unwrap();
        assert_eq!(out.model.k(), 2);
        assert_eq!(out.pruned_points, (100..129).collect::<Vec<_>>());
        assert!((out.model.weight_sum() - 1.0).abs() < 1e-12);
        assert_eq!(out.model.components[1].member_count, 100);
        assert_eq!(out.labels[150], Some(1));

        let same = prune_small_clusters(&m, &labels, 29).unwrap();
        assert_eq!(same.model.k(), 3);
        assert!(same.pruned_points.is_empty());
        assert!(matches!(
            prune_small_clusters(&m, &labels, 101),
            Err(Error::AllClustersPruned { n_min: 101 })
        ));
    }

    fn diag_for(model: &GmmModel) -> ClusterDiagnostics {
        let k = model.k();
        ClusterDiagnostics {
            count: model.components.iter().map(|c| c.member_count).collect(),
            grad_mean: vec![0.0; k],
            point_mean: model.components.iter().map(|c| c.gauss.mean).collect(),
            variance: vec![0.0; k],
        }
    }

    fn open_gates(tau_d: f64) -> MergeGates {
        MergeGates::new(tau_d, None, None).unwrap()
    }

    #[test]
    fn identical_components_merge() {
        let c = GaussianComponent {
            member_count: 10,
            ..comp(0.5, [0.1, 0.01], Spd2::scaled_identity(1e-4))
        };
        let m = GmmModel { components: vec![c, c] };
        let out = merge_pass(&m, &diag_for(&m), &open_gates(1e-6)).unwrap();
        assert_eq!(out.model.k(), 1);
        assert_eq!(out.n_merges, 1);
        assert!((out.model.components[0].weight - 1.0).abs() < 1e-15);
        assert_eq!(out.model.components[0].member_count, 20);
        assert_eq!(out.mapping, vec![0, 0]);
    }

    #[test]
    fn distant_components_stay() {
        let m = GmmModel {
            components: vec![
                comp(0.5, [0.0, 0.0], Spd2::scaled_identity(1e-4)),
                comp(0.5, [1.0, 0.0], Spd2::scaled_identity(1e-4)),
            ],
        };
        let out = merge_pass(&m, &diag_for(&m), &open_gates(0.5)).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.n_merges, 0);
    }

    #[test]
    fn gradient_gate_blocks_merge() {
        let c = comp(0.5, [0.0, 0.0], Spd2::scaled_identity(1e-4));
        let m = GmmModel { components: vec![c, c] };
        let mut d = diag_for(&m);
        d.grad_mean = vec![0.0, 1.0];
        let gates = MergeGates::new(1.0, Some(0.5), None).unwrap();
        assert_eq!(merge_pass(&m, &d, &gates).unwrap().model.k(), 2);
    }

    /// Every final component count reachable by some merge order.
    fn all_fixpoints(comps: Vec<Gaussian2>, tau: f64, out: &mut Vec<usize>) {
        let mut any = false;
        for i in 0..comps.len() {
            for j in i + 1..comps.len() {
                if wasserstein2_sq(&comps[i], &comps[j]).unwrap().sqrt() < tau {
                    any = true;
                    let mut next = comps.clone();
                    next[i] = merge_components(&comps[i], &comps[j]).unwrap();
                    next.remove(j);
                    all_fixpoints(next, tau, out);
                }
            }
        }
        if !any {
            out.push(comps.len());
        }
    }

    #[test]
    fn chain_merges_to_one_under_every_order() {
        // A–B within the gate; C is too far from either, but close enough
        // to their merged component.
        let cov = Spd2::scaled_identity(0.01);
        let comps = vec![
            comp(0.3, [-0.2, 0.0], cov),
            comp(0.3, [0.2, 0.0], cov),
            comp(0.4, [0.0, 0.45], cov),
        ];
        let m = GmmModel { components: comps };
        let tau = 0.47;
        let w = |i: usize, j: usize| {
            wasserstein2_sq(&m.components[i].gauss, &m.components[j].gauss)
                .unwrap()
                .sqrt()
        };
        assert!(w(0, 1) < tau && w(0, 2) >= tau && w(1, 2) >= tau);
        let out = merge_pass(&m, &diag_for(&m), &open_gates(tau)).unwrap();
        let mut oracle = Vec::new();
        all_fixpoints(m.components.iter().map(|c| c.gauss).collect(), tau, &mut oracle);
        assert!(oracle.iter().all(|&k| k == 1), "{oracle:?}");
        assert_eq!(out.model.k(), 1);
    }

    #[test]
    fn greedy_reaches_an_oracle_fixpoint_on_random_sets() {
        let mut rng = RngStream::new(77);
        for _ in 0..40 {
            let n = 3 + rng.below(3);
            let comps: Vec<GaussianComponent> = (0..n)
                .map(|_| {
                    let s = 0.01 + 0.05 * rng.uniform();
                    comp(
                        1.0 / n as f64,
                        [rng.uniform(), rng.uniform()],
                        Spd2::new(s, 0.3 * s * rng.uniform(), s),
                    )
                })
                .collect();
            let m = GmmModel { components: comps };
            let tau = 0.4;
            let out = merge_pass(&m, &diag_for(&m), &open_gates(tau)).unwrap();
            let mut oracle = Vec::new();
            all_fixpoints(m.components.iter().map(|c| c.gauss).collect(), tau, &mut oracle);
            assert!(oracle.contains(&out.model.k()));
            assert!(out.model.k() <= m.k() && out.n_merges == m.k() - out.model.k());
            assert!((out.model.weight_sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn union_diagnostics_match_recomputation() {
        let pts = [[0.0, 0.0], [1.0, 0.5], [2.0, -1.0], [4.0, 4.0], [5.0, 3.0]];
        let grads = [0.1, 0.2, 0.3, 0.4, 0.5];
        let split = [Some(0), Some(0), Some(1), Some(1), Some(1)];
        let d = ClusterDiagnostics::compute(2, &pts, &split, &grads);
        let (n, g, m, v) = d.union(0, 1);
        let whole = ClusterDiagnostics::compute(1, &pts, &[Some(0); 5], &grads);
        assert_eq!(n, 5);
        assert!((g - whole.grad_mean[0]).abs() < 1e-14);
        assert!((m[0] - whole.point_mean[0][0]).abs() < 1e-14);
        assert!((v - whole.variance[0]).abs() < 1e-12);
    }
}
