//! Evaluation metrics and parameter accounting.

use serde::{Deserialize, Serialize};

use crate::assignment::Counts;
use crate::error::{Error, Result};

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn check_rows(mean_probs: &[f64], labels: &[usize]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    if !mean_probs.len().is_multiple_of(labels.len()) || mean_probs.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities for {} labels",
            mean_probs.len(),
            labels.len()
        )));
    }
    Ok(mean_probs.len() / labels.len())
}

/// Bin of a confidence in `n` equal-width bins over `(0, 1]`; bin `b` is
/// `(b/n, (b+1)/n]`. A confidence of 0 lands in the first bin.
pub fn confidence_bin(conf: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut b = ((conf * nf).ceil() as isize - 1).clamp(0, n as isize - 1) as usize;
    while b > 0 && conf <= b as f64 / nf {
        b -= 1;
    }
    while b + 1 < n && conf > (b + 1) as f64 / nf {
        b += 1;
    }
    b
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Per-bin accuracy and mean confidence of the top-class prediction.
pub fn reliability_bins(mean_probs: &[f64], labels: &[usize], n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    if n_bins == 0 {
        return Err(Error::EmptyInput("ece bins"));
    }
    let classes = check_rows(mean_probs, labels)?;
    let mut correct = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (row, &y) in mean_probs.chunks(classes).zip(labels) {
        let k = argmax(row);
        let b = confidence_bin(row[k], n_bins);
        count[b] += 1;
        conf_sum[b] += row[k];
        correct[b] += (k == y) as usize;
    }
    Ok((0..n_bins)
        .map(|b| {
            let c = count[b].max(1) as f64;
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                accuracy: correct[b] as f64 / c,
                confidence: conf_sum[b] / c,
            }
        })
        .collect())
}

/// Expected calibration error, `Σ_b (|b|/n)·|acc(b) − conf(b)|`.
pub fn ece(mean_probs: &[f64], labels: &[usize], n_bins: usize) -> Result<f64> {
    let bins = reliability_bins(mean_probs, labels, n_bins)?;
    let n = labels.len() as f64;
    Ok(bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

pub const PROB_FLOOR: f64 = 1e-12;

/// Mean `−log p(label)` (floored at 1e-12) and top-1 accuracy.
pub fn nll_and_accuracy(mean_probs: &[f64], labels: &[usize]) -> Result<(f64, f64)> {
    let classes = check_rows(mean_probs, labels)?;
    let mut nll = 0.0;
    let mut hits = 0usize;
    for (row, &y) in mean_probs.chunks(classes).zip(labels) {
        nll -= row[y].max(PROB_FLOOR).ln();
        hits += (argmax(row) == y) as usize;
    }
    let n = labels.len() as f64;
    Ok((nll / n, hits as f64 / n))
}

/// OOD score of each row: `1 − max probability`.
pub fn ood_scores(mean_probs: &[f64], classes: usize) -> Vec<f64> {
    mean_probs
        .chunks(classes)
        .map(|r| 1.0 - r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocMetrics {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr85: f64,
}

/// Ranking metrics with out-of-distribution samples as the positive class
/// (higher score means more likely OOD).
pub fn roc_metrics(scores_in: &[f64], scores_out: &[f64]) -> Result<RocMetrics> {
    if scores_in.is_empty() {
        return Err(Error::EmptyInput("in-distribution scores"));
    }
    if scores_out.is_empty() {
        return Err(Error::EmptyInput("out-of-distribution scores"));
    }
    let n_pos = scores_out.len() as f64;
    let n_neg = scores_in.len() as f64;
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, false))
        .chain(scores_out.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Mid-ranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let auroc = (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);

    // Sweep thresholds from the highest score down; a tie group enters at once.
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_recall = 0.0;
    let mut aupr = 0.0;
    let mut fpr85 = 1.0f64;
    let mut j = all.len();
    while j > 0 {
        let mut i = j;
        while i > 0 && all[i - 1].0 == all[j - 1].0 {
            i -= 1;
        }
        for e in &all[i..j] {
            if e.1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / n_pos;
        aupr += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
        if recall >= 0.85 {
            fpr85 = fpr85.min(fp / n_neg);
        }
        j = i;
    }
    Ok(RocMetrics { auroc, aupr, fpr85 })
}

/// Reported parameter count, `n_outliers + n_ellipses + 2·n_gaussians`.
pub fn count_parameters(c: &Counts) -> usize {
    c.n_outliers + c.n_ellipses + 2 * c.n_gaussians
}

/// `1 − reported / dense`, where the dense posterior has `2·n_w` values.
/// A model with nothing to report is fully compressed.
pub fn compression_ratio(reported: usize, dense_parameters: usize) -> f64 {
    if reported == 0 {
        return 1.0;
    }
    1.0 - reported as f64 / dense_parameters as f64
}

/// Flat evaluation document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub n_outliers: usize,
    pub n_ellipses: usize,
    pub n_gaussians: usize,
    pub reported_parameters: usize,
    pub compression_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aupr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fpr85: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_score: Option<String>,
}

impl EvalReport {
    /// `counts` is `None` for a dense network, which reports `2·n_w`
    /// parameters with every weight counted as an outlier.
    pub fn build(
        mean_probs: &[f64],
        labels: &[usize],
        n_bins: usize,
        counts: Option<Counts>,
        n_weights: usize,
        ood: Option<RocMetrics>,
    ) -> Result<Self> {
        let (nll, accuracy) = nll_and_accuracy(mean_probs, labels)?;
        let ece = ece(mean_probs, labels, n_bins)?;
        let (n_outliers, n_ellipses, n_gaussians, reported) = match counts {
            Some(c) => (c.n_outliers, c.n_ellipses, c.n_gaussians, count_parameters(&c)),
            None => (n_weights, 0, 0, 2 * n_weights),
        };
        Ok(Self {
            accuracy,
            nll,
            ece,
            n_outliers,
            n_ellipses,
            n_gaussians,
            reported_parameters: reported,
            compression_ratio: if counts.is_some() {
                compression_ratio(reported, 2 * n_weights)
            } else {
                0.0
            },
            auroc: ood.map(|o| o.auroc),
            aupr: ood.map(|o| o.aupr),
            fpr85: ood.map(|o| o.fpr85),
            ood_score: ood.map(|_| "one_minus_max_softmax".to_string()),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
