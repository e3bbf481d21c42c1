//! Splitting weights into codebook inliers and individually kept outliers.
//!
//! A weight is an outlier when its mean is large (`|μ| > τ_w`) or its mean
//! gradient magnitude is among the top `top_frac` of all weights. Clustering
//! later adds the members of clusters that were too small to keep.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{backward_weights, forward_sample, Network};
use crate::rng::{stage, RngStream};

/// Per-weight mean of `|∂NLL/∂μ_i|` over a window of mini-batches.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientStats {
    pub mean_abs: Vec<f64>,
    pub window: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierSource {
    MeanThreshold,
    GradientTop,
    SmallCluster,
    Manual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    n_w: usize,
    /// Sorted ascending, paired with `sources`.
    outliers: Vec<usize>,
    sources: Vec<OutlierSource>,
}

impl Partition {
    /// Every weight an inlier.
    pub fn all_inliers(n_w: usize) -> Self {
        Self {
            n_w,
            outliers: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn n_weights(&self) -> usize {
        self.n_w
    }

    pub fn outlier_indices(&self) -> &[usize] {
        &self.outliers
    }

    pub fn sources(&self) -> &[OutlierSource] {
        &self.sources
    }

    pub fn n_outliers(&self) -> usize {
        self.outliers.len()
    }

    pub fn source_of(&self, index: usize) -> Option<OutlierSource> {
        self.outliers.binary_search(&index).ok().map(|p| self.sources[p])
    }

    pub fn is_outlier(&self, index: usize) -> bool {
        self.outliers.binary_search(&index).is_ok()
    }

    pub fn inlier_indices(&self) -> Vec<usize> {
        let mask = self.outlier_mask();
        (0..self.n_w).filter(|&i| !mask[i]).collect()
    }

    pub fn outlier_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.n_w];
        for &i in &self.outliers {
            m[i] = true;
        }
        m
    }

    /// Marks more weights as outliers. Indices already present keep their
    /// original source.
    pub fn add_outliers(&mut self, indices: &[usize], source: OutlierSource) -> Result<()> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_w) {
            return Err(Error::InconsistentInputs(format!(
                "outlier index {bad} out of range for {} weights",
                self.n_w
            )));
        }
        let mut merged: Vec<(usize, OutlierSource)> = self
            .outliers
            .iter()
            .copied()
            .zip(self.sources.iter().copied())
            .collect();
        merged.extend(indices.iter().map(|&i| (i, source)));
        // Stable sort keeps the existing entry first among duplicates.
        merged.sort_by_key(|&(i, _)| i);
        merged.dedup_by_key(|&mut (i, _)| i);
        self.outliers = merged.iter().map(|&(i, _)| i).collect();
        self.sources = merged.iter().map(|&(_, s)| s).collect();
        Ok(())
    }
}

/// One pass over `data` in shuffled mini-batches, averaging the absolute
/// gradient of the batch-mean NLL with respect to each μ. The weights are
/// sampled once per batch.
pub fn accumulate_gradient_stats(
    net: &Network,
    data: &Dataset,
    batch_size: usize,
    rng: &RngStream,
) -> Result<GradientStats> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch_size = batch_size.clamp(1, data.len());
    let order = rng.derive(&[stage::GRAD_STATS]).permutation(data.len());
    let mut sum = vec![0.0; net.n_weights()];
    let mut window = 0;
    for (b, rows) in order.chunks(batch_size).enumerate() {
        let (x, y) = data.gather(rows);
        let batch = crate::model::Batch::new(&x, data.dim);
        let mut brng = rng.derive(&[stage::GRAD_STATS, 1, b as u64]);
        let tape = forward_sample(net, &batch, &mut brng)?;
        let (_, g) = backward_weights(&net.layout, &tape, &y, 1.0 / rows.len() as f64)?;
        for (s, v) in sum.iter_mut().zip(&g) {
            *s += v.abs();
        }
        window += 1;
    }
    let inv = 1.0 / window as f64;
    sum.iter_mut().for_each(|s| *s *= inv);
    Ok(GradientStats { mean_abs: sum, window })
}

/// Number of gradient outliers, `⌈top_frac · n⌉`, ignoring float noise in the
/// product (0.01 · 300 must give 3, not 4).
pub fn gradient_outlier_count(top_frac: f64, n: usize) -> usize {
    let x = top_frac * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k as usize).min(n)
}

/// Mean rule `|μ_i| > τ_w` OR gradient rule (the `⌈top_frac · n_w⌉` largest
/// statistics, ties to the lower index). A weight caught by both rules is
/// tagged with the mean rule.
pub fn classify_outliers(mu: &[f64], stats: &GradientStats, tau_w: f64, top_frac: f64) -> Result<Partition> {
    if !(tau_w > 0.0) {
        return Err(Error::BadThreshold(format!("tau_w must be positive, got {tau_w}")));
    }
    if !(0.0..1.0).contains(&top_frac) {
        return Err(Error::BadThreshold(format!(
            "top_frac must lie in [0, 1), got {top_frac}"
        )));
    }
    if stats.mean_abs.len() != mu.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient statistics for {} weights",
            stats.mean_abs.len(),
            mu.len()
        )));
    }
    if stats.window == 0 {
        return Err(Error::InconsistentInputs(
            "gradient statistics have an empty window".into(),
        ));
    }
    let n = mu.len();
    let mut source: Vec<Option<OutlierSource>> = mu
        .iter()
        .map(|m| (m.abs() > tau_w).then_some(OutlierSource::MeanThreshold))
        .collect();

    let k = gradient_outlier_count(top_frac, n);
    if k > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        let s = &stats.mean_abs;
        let cmp = |a: &usize, b: &usize| s[*b].total_cmp(&s[*a]).then(a.cmp(b));
        if k < n {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        for &i in &order[..k] {
            source[i].get_or_insert(OutlierSource::GradientTop);
        }
    }

    let mut outliers = Vec::new();
    let mut sources = Vec::new();
    for (i, s) in source.into_iter().enumerate() {
        if let Some(s) = s {
            outliers.push(i);
            sources.push(s);
        }
    }
    Ok(Partition {
        n_w: n,
        outliers,
        sources,
    })
}
