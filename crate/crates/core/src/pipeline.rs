//! End-to-end stages: pretrain, compress, retrain, evaluate, export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assignment::{
    assign_weights, build_compressed, CompressedPosterior, CompressedSampler, Counts, WeightAssignment,
};
use crate::config::PipelineConfig;
use crate::data::{load_mnist_dir, train_val_split, uniform_noise_like, Dataset};
use crate::error::{Error, Result};
use crate::gmm::{
    em_minibatch_fit, hard_assign, init_gmm, merge_pass, prune_small_clusters, ClusterDiagnostics, MergeGates,
};
use crate::linalg::Point2;
use crate::metrics::{ood_scores, reliability_bins, roc_metrics, EvalReport, ReliabilityBin};
use crate::model::{init_network, predict_with, Batch, Network, PredictiveOutput, WeightSampler};
use crate::partition::{accumulate_gradient_stats, classify_outliers, GradientStats, OutlierSource, Partition};
use crate::persistence::compressed_size;
use crate::rng::{stage, RngStream};
use crate::training::{pretrain_stage1, train_stage3, TrainingLog};

pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

/// Loads MNIST from `dir` and holds out `pretrain.val_fraction` of the
/// training set.
pub fn load_splits(dir: &Path, cfg: &PipelineConfig) -> Result<Splits> {
    let train = load_mnist_dir(dir, true)?;
    let test = load_mnist_dir(dir, false)?;
    let root = RngStream::new(cfg.seed);
    let (train, val) = if cfg.pretrain.val_fraction > 0.0 {
        let (t, v) = train_val_split(&train, cfg.pretrain.val_fraction, &mut root.derive(&[stage::DATA]));
        (t, Some(v))
    } else {
        (train, None)
    };
    Ok(Splits { train, val, test })
}

/// Initializes and trains the dense mean-field network.
pub fn pretrain(cfg: &PipelineConfig, train: &Dataset, val: Option<&Dataset>) -> Result<(Network, TrainingLog)> {
    let root = RngStream::new(cfg.seed);
    let mut net = init_network(&cfg.architecture, &mut root.clone(), cfg)?;
    if net.layout.input_dim() != train.dim || net.layout.n_classes() != train.n_classes {
        return Err(Error::ShapeMismatch(format!(
            "architecture {:?} does not fit data with {} inputs and {} classes",
            cfg.architecture, train.dim, train.n_classes
        )));
    }
    let log = pretrain_stage1(&mut net, train, val, cfg, &root)?;
    Ok((net, log))
}

/// What the compression stage did, stage by stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressReport {
    pub n_weights: usize,
    pub mean_outliers: usize,
    pub gradient_outliers: usize,
    pub small_cluster_outliers: usize,
    pub k_initial: usize,
    pub k_after_prune: usize,
    pub k_final: usize,
    pub n_merges: usize,
    pub uniform_fallbacks: usize,
    pub counts: Counts,
    pub trainable_parameters: usize,
    pub storage_bytes: usize,
    pub diagnostics: ClusterDiagnostics,
}

/// Partition, GMM fit, pruning, assignment, merging, reassignment.
pub fn compress(net: &Network, train: &Dataset, cfg: &PipelineConfig) -> Result<(CompressedPosterior, CompressReport)> {
    let root = RngStream::new(cfg.seed);
    let points = net.points();
    let n_w = points.len();
    let pc = &cfg.partition;
    let needs_stats = pc.enabled || cfg.merge.tau_g.is_some();
    let stats = if needs_stats {
        accumulate_gradient_stats(net, train, pc.stats_batch_size, &root)?
    } else {
        GradientStats {
            mean_abs: vec![0.0; n_w],
            window: 1,
        }
    };
    let mut partition = if pc.enabled {
        classify_outliers(&net.mu, &stats, pc.tau_w, pc.top_frac)?
    } else {
        Partition::all_inliers(n_w)
    };
    let count_source = |p: &Partition, s: OutlierSource| p.sources().iter().filter(|&&x| x == s).count();

    let inliers = partition.inlier_indices();
    if inliers.is_empty() {
        return Err(Error::EmptyInput("every weight is an outlier"));
    }
    let inlier_points: Vec<Point2> = inliers.iter().map(|&i| points[i]).collect();
    let k = cfg.gmm.k.min(inlier_points.len());
    let model = init_gmm(
        &inlier_points,
        k,
        cfg.gmm.kmeans_batch,
        cfg.gmm.kmeans_iters,
        &mut root.derive(&[stage::GMM, 0]),
    )?;
    let k_initial = model.k();
    let mut model = em_minibatch_fit(
        model,
        &inlier_points,
        cfg.gmm.em_epochs,
        cfg.gmm.em_batch,
        &mut root.derive(&[stage::GMM, 1]),
    )?;
    let labels = hard_assign(&mut model, &inlier_points)?;
    if pc.enabled {
        let pruned = prune_small_clusters(&model, &labels, cfg.gmm.n_min)?;
        let newly: Vec<usize> = pruned.pruned_points.iter().map(|&p| inliers[p]).collect();
        partition.add_outliers(&newly, OutlierSource::SmallCluster)?;
        model = pruned.model;
    }
    let k_after_prune = model.k();

    let (mut assignments, mut astats) = assign_weights(&points, &partition, &model, &cfg.assignment)?;
    let mut n_merges = 0;
    let primary = |a: &[WeightAssignment]| -> Vec<Option<usize>> {
        a.iter().map(|x| x.primary_component().map(|c| c as usize)).collect()
    };
    let mut diagnostics = ClusterDiagnostics::compute(model.k(), &points, &primary(&assignments), &stats.mean_abs);
    if cfg.merge.enabled {
        for (c, &n) in model.components.iter_mut().zip(&diagnostics.count) {
            c.member_count = n;
        }
        let gates = MergeGates::new(cfg.merge.tau_d, cfg.merge.tau_g, cfg.merge.tau_v)?;
        let merged = merge_pass(&model, &diagnostics, &gates)?;
        n_merges = merged.n_merges;
        if n_merges > 0 {
            model = merged.model;
            (assignments, astats) = assign_weights(&points, &partition, &model, &cfg.assignment)?;
            diagnostics = ClusterDiagnostics::compute(model.k(), &points, &primary(&assignments), &stats.mean_abs);
        }
    }
    let cp = build_compressed(&net.layout, &points, &partition, &model, assignments)?;
    let counts = cp.counts();
    let report = CompressReport {
        n_weights: n_w,
        mean_outliers: count_source(&partition, OutlierSource::MeanThreshold),
        gradient_outliers: count_source(&partition, OutlierSource::GradientTop),
        small_cluster_outliers: count_source(&partition, OutlierSource::SmallCluster),
        k_initial,
        k_after_prune,
        k_final: cp.gmm.k(),
        n_merges,
        uniform_fallbacks: astats.uniform_fallbacks,
        counts,
        trainable_parameters: cp.trainable_count(),
        storage_bytes: compressed_size(&cp),
        diagnostics,
    };
    Ok((cp, report))
}

/// Stage 3 on a compressed model.
pub fn retrain(
    cp: &mut CompressedPosterior,
    cfg: &PipelineConfig,
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<TrainingLog> {
    train_stage3(cp, train, val, cfg, &RngStream::new(cfg.seed))
}

/// Either kind of model the CLI can evaluate.
pub enum Model {
    Dense(Network),
    Compressed(CompressedPosterior),
}

impl Model {
    pub fn n_weights(&self) -> usize {
        match self {
            Model::Dense(n) => n.n_weights(),
            Model::Compressed(c) => c.n_weights(),
        }
    }

    fn counts(&self) -> Option<Counts> {
        match self {
            Model::Dense(_) => None,
            Model::Compressed(c) => Some(c.counts()),
        }
    }

    fn predict(&self, x: &Batch<'_>, cfg: &PipelineConfig, rng: &mut RngStream) -> Result<PredictiveOutput> {
        let n = cfg.eval.n_samples;
        match self {
            Model::Dense(net) => predict_chunked(net, x, n, cfg.eval.batch_size, rng),
            Model::Compressed(cp) => {
                let s = CompressedSampler {
                    cp,
                    mode: cfg.assignment.blend_mode,
                    sigma_min: cfg.sigma_min,
                };
                predict_chunked(&s, x, n, cfg.eval.batch_size, rng)
            }
        }
    }
}

/// Predictive averaging over `n` weight draws, applied to blocks of rows.
/// Every block sees the same draws.
fn predict_chunked<S: WeightSampler + ?Sized>(
    sampler: &S,
    x: &Batch<'_>,
    n: usize,
    rows: usize,
    rng: &mut RngStream,
) -> Result<PredictiveOutput> {
    let draws: Vec<Vec<f64>> = (0..n).map(|_| sampler.sample(rng)).collect();
    struct Fixed<'a> {
        layout: &'a crate::model::Layout,
        draws: &'a [Vec<f64>],
        next: std::cell::Cell<usize>,
    }
    impl WeightSampler for Fixed<'_> {
        fn layout(&self) -> &crate::model::Layout {
            self.layout
        }
        fn sample(&self, _: &mut RngStream) -> Vec<f64> {
            let i = self.next.get();
            self.next.set(i + 1);
            self.draws[i].clone()
        }
    }
    let classes = sampler.layout().n_classes();
    let mut mean = Vec::with_capacity(x.rows * classes);
    let rows = rows.max(1);
    let mut start = 0;
    while start < x.rows {
        let end = (start + rows).min(x.rows);
        let block = Batch::new(&x.data[start * x.cols..end * x.cols], x.cols);
        let fixed = Fixed {
            layout: sampler.layout(),
            draws: &draws,
            next: std::cell::Cell::new(0),
        };
        let p = predict_with(&fixed, &block, n, rng, false)?;
        mean.extend(p.mean_probs);
        start = end;
    }
    Ok(PredictiveOutput {
        rows: x.rows,
        classes,
        mean_probs: mean,
        draws: None,
    })
}

pub struct Evaluation {
    pub report: EvalReport,
    pub reliability: Vec<ReliabilityBin>,
}

/// Evaluates on `test`; with `ood` given, also scores it as the positive
/// class of the OOD ranking.
pub fn evaluate(model: &Model, cfg: &PipelineConfig, test: &Dataset, ood: Option<&Dataset>) -> Result<Evaluation> {
    let root = RngStream::new(cfg.seed);
    let mut rng = root.derive(&[stage::EVAL]);
    let p = model.predict(&Batch::new(&test.inputs, test.dim), cfg, &mut rng)?;
    let roc = match ood {
        Some(o) => {
            let q = model.predict(&Batch::new(&o.inputs, o.dim), cfg, &mut root.derive(&[stage::EVAL, 1]))?;
            Some(roc_metrics(
                &ood_scores(&p.mean_probs, p.classes),
                &ood_scores(&q.mean_probs, q.classes),
            )?)
        }
        None => None,
    };
    let report = EvalReport::build(
        &p.mean_probs,
        &test.labels,
        cfg.eval.n_bins,
        model.counts(),
        model.n_weights(),
        roc,
    )?;
    let reliability = reliability_bins(&p.mean_probs, &test.labels, cfg.eval.n_bins)?;
    Ok(Evaluation { report, reliability })
}

/// Uniform noise over the reference's input range, `eval.n_ood` rows.
pub fn noise_ood(reference: &Dataset, cfg: &PipelineConfig) -> Dataset {
    uniform_noise_like(
        reference,
        cfg.eval.n_ood,
        &mut RngStream::new(cfg.seed).derive(&[stage::OOD]),
    )
}

/// Scatter export: one row per weight, then one row per component with its
/// covariance ellipse (semi-axes at one standard deviation, angle in
/// radians).
pub fn viz_csv(cp: &CompressedPosterior, points: Option<&[Point2]>) -> String {
    let mut s =
        String::from("kind,index,mu,sigma,assignment,component,pi,cov_a,cov_b,cov_c,axis_major,axis_minor,angle\n");
    let (m, sd) = cp.effective_params(0.0);
    for (i, a) in cp.assignments.iter().enumerate() {
        let (mu, sigma) = match points {
            Some(p) => (p[i][0], p[i][1]),
            None => (m[i], sd[i]),
        };
        let (kind, comp) = match a {
            WeightAssignment::Outlier { .. } => ("outlier", String::new()),
            WeightAssignment::Single { component } => ("single", component.to_string()),
            WeightAssignment::Blended { .. } => ("blended", a.primary_component().unwrap().to_string()),
        };
        let _ = writeln!(s, "weight,{i},{mu},{sigma},{kind},{comp},,,,,,,");
    }
    for (k, c) in cp.gmm.components.iter().enumerate() {
        let (l1, l2, th) = c.gauss.cov.eigen();
        let cov = c.gauss.cov;
        let _ = writeln!(
            s,
            "component,{k},{},{},,,{},{},{},{},{},{},{th}",
            c.gauss.mean[0],
            c.gauss.mean[1],
            c.weight,
            cov.a,
            cov.b,
            cov.c,
            l1.max(0.0).sqrt(),
            l2.max(0.0).sqrt()
        );
    }
    s
}

/// Markdown summary of training logs and an evaluation report.
pub fn report_markdown(logs: &[(String, TrainingLog)], eval: Option<&EvalReport>) -> String {
    let mut s = String::from("# Run summary\n");
    for (name, log) in logs {
        let _ = writeln!(s, "\n## {name}\n");
        s.push_str("| epoch | nll term | gmm kl | outlier kl | total | train acc | val acc |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &log.rows {
            let val = r.val_acc.map(|v| format!("{:.4}", v)).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
                r.epoch, r.loss.nll_term, r.loss.gmm_kl_term, r.loss.outlier_kl_term, r.loss.total, r.train_acc, val
            );
        }
    }
    if let Some(e) = eval {
        s.push_str("\n## Evaluation\n\n| metric | value |\n|---|---|\n");
        let _ = writeln!(s, "| accuracy | {:.4} |", e.accuracy);
        let _ = writeln!(s, "| nll | {:.4} |", e.nll);
        let _ = writeln!(s, "| ece | {:.4} |", e.ece);
        let _ = writeln!(s, "| outliers | {} |", e.n_outliers);
        let _ = writeln!(s, "| ellipses | {} |", e.n_ellipses);
        let _ = writeln!(s, "| gaussians | {} |", e.n_gaussians);
        let _ = writeln!(s, "| parameters | {:.3}M |", e.reported_parameters as f64 / 1e6);
        let _ = writeln!(s, "| compression ratio | {:.2}% |", 100.0 * e.compression_ratio);
        if let (Some(a), Some(p), Some(f)) = (e.auroc, e.aupr, e.fpr85) {
            let _ = writeln!(s, "| auroc | {a:.4} |\n| aupr | {p:.4} |\n| fpr85 | {f:.4} |");
        }
    }
    s
}

/// Parses a training-log CSV written by [`TrainingLog::to_csv`].
pub fn parse_log_csv(text: &str) -> Result<TrainingLog> {
    let mut lines = text.lines();
    if lines.next() != Some(TrainingLog::HEADER) {
        return Err(Error::InconsistentInputs(
            "training log has an unexpected header".into(),
        ));
    }
    let mut log = TrainingLog::default();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::InconsistentInputs(format!(
                "training log row {n} has {} fields",
                f.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::InconsistentInputs(format!("bad number {:?} in training log row {n}", f[i])))
        };
        log.rows.push(crate::training::EpochRecord {
            epoch: num(0)? as usize,
            loss: crate::training::LossBreakdown {
                nll_term: num(1)?,
                gmm_kl_term: num(2)?,
                outlier_kl_term: num(3)?,
                total: num(4)?,
            },
            train_acc: num(5)?,
            val_acc: if f[6].is_empty() { None } else { Some(num(6)?) },
        });
    }
    Ok(log)
}
