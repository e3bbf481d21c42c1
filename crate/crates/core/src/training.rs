//! Stage 1 (mean-field VI on the dense network) and Stage 3 (training the
//! shared component means and outliers of a compressed posterior).
//!
//! Both losses use the full-data scaling `(N/|B|)·NLL(batch)` plus KL terms
//! against the Gaussian prior.

use std::fmt::Write as _;
use std::path::Path;

use crate::assignment::{
    realize_weights, realize_with_noise, CompressedPosterior, CompressedSampler, Realization, WeightAssignment,
    NOT_CHOSEN,
};
use crate::config::{BlendMode, KlScaleMode, Optimizer, PipelineConfig, PriorConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{kl_gaussian_1d_grad, kl_unchecked};
use crate::model::{backward, backward_weights, forward_realized, predict_with, Batch, Network, Tape};
use crate::rng::{stage, RngStream};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub nll_term: f64,
    pub gmm_kl_term: f64,
    pub outlier_kl_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(nll_term: f64, gmm_kl_term: f64, outlier_kl_term: f64) -> Self {
        Self {
            nll_term,
            gmm_kl_term,
            outlier_kl_term,
            total: nll_term + gmm_kl_term + outlier_kl_term,
        }
    }
}

/// Plain gradient descent on one parameter group, then projection onto
/// `floor` when given.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, floor: Option<f64>) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    if let Some(f) = floor {
        project(params, f);
    }
    Ok(())
}

fn project(params: &mut [f64], floor: f64) {
    for p in params.iter_mut() {
        if !(*p >= floor) {
            *p = floor;
        }
    }
}

/// Adam moments for one parameter group.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, floor: Option<f64>) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
        if let Some(f) = floor {
            project(params, f);
        }
        Ok(())
    }
}

/// One optimizer per parameter group.
#[derive(Clone, Debug)]
pub enum GroupOptimizer {
    Sgd,
    Adam(Adam),
}

impl GroupOptimizer {
    pub fn new(kind: Optimizer, n: usize) -> Self {
        match kind {
            Optimizer::Sgd => GroupOptimizer::Sgd,
            Optimizer::Adam => GroupOptimizer::Adam(Adam::new(n)),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, floor: Option<f64>) -> Result<()> {
        match self {
            GroupOptimizer::Sgd => sgd_step(params, grads, lr, floor),
            GroupOptimizer::Adam(a) => a.step(params, grads, lr, floor),
        }
    }
}

/// One row per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<EpochRecord>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,nll_term,gmm_kl_term,outlier_kl_term,total,train_acc,val_acc";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.loss.nll_term, r.loss.gmm_kl_term, r.loss.outlier_kl_term, r.loss.total, r.train_acc, val
            );
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn count_correct(logits: &[f64], labels: &[usize], classes: usize) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(z, &y)| {
            let arg = (0..classes).fold(0, |b, j| if z[j] > z[b] { j } else { b });
            arg == y
        })
        .count()
}

/// Forward pass with the given noise: `w = μ + σ ε`.
pub fn tape_with_noise(net: &Network, x: &Batch<'_>, eps: Vec<f64>) -> Result<Tape> {
    if eps.len() != net.n_weights() {
        return Err(Error::ShapeMismatch(format!(
            "{} noise values for {} weights",
            eps.len(),
            net.n_weights()
        )));
    }
    let w = net
        .mu
        .iter()
        .zip(&net.sigma)
        .zip(&eps)
        .map(|((m, s), e)| m + s * e)
        .collect();
    let mut tape = forward_realized(&net.layout, w, x)?;
    tape.eps = Some(eps);
    Ok(tape)
}

/// Stage-1 loss `(N/|B|)·NLL + Σ KL(q_i ‖ prior)` on a recorded tape. The
/// gradient is added to the network's buffers. The KL sum is reported as
/// `outlier_kl_term`, since every weight is individual at this stage.
pub fn elbo_loss_and_grad(
    net: &mut Network,
    tape: &Tape,
    labels: &[usize],
    n_total: usize,
    prior: &PriorConfig,
) -> Result<LossBreakdown> {
    let scale = n_total as f64 / labels.len() as f64;
    let nll = backward(net, tape, labels, scale)?;
    let mut kl = 0.0;
    for i in 0..net.n_weights() {
        let (m, s) = (net.mu[i], net.sigma[i]);
        kl += kl_unchecked(m, s, prior.mean, prior.std);
        let (gm, gs) = kl_gaussian_1d_grad(m, s, prior.mean, prior.std);
        net.grad_mu[i] += gm;
        net.grad_sigma[i] += gs;
    }
    Ok(LossBreakdown::new(scale * nll, 0.0, kl))
}

/// Optimizer state for Stage 1: one group for the means, one for the stds.
pub struct Stage1Optimizer {
    mu: GroupOptimizer,
    sigma: GroupOptimizer,
}

impl Stage1Optimizer {
    pub fn new(kind: Optimizer, n: usize) -> Self {
        Self {
            mu: GroupOptimizer::new(kind, n),
            sigma: GroupOptimizer::new(kind, n),
        }
    }
}

/// One Stage-1 step. Returns the loss and the number of correct sampled
/// predictions. The network is untouched when the loss is not finite.
#[allow(clippy::too_many_arguments)]
pub fn stage1_step(
    net: &mut Network,
    x: &Batch<'_>,
    labels: &[usize],
    n_total: usize,
    cfg: &PipelineConfig,
    opt: &mut Stage1Optimizer,
    rng: &mut RngStream,
    at: (usize, usize),
) -> Result<(LossBreakdown, usize)> {
    net.zero_grad();
    let eps = crate::rng::sample_standard_normal(rng, net.n_weights());
    let tape = tape_with_noise(net, x, eps)?;
    let loss = elbo_loss_and_grad(net, &tape, labels, n_total, &cfg.prior)?;
    let grads_finite = net.grad_mu.iter().chain(&net.grad_sigma).all(|g| g.is_finite());
    if !loss.total.is_finite() || !grads_finite {
        return Err(Error::Divergence {
            epoch: at.0,
            step: at.1,
            loss: loss.total,
        });
    }
    let correct = count_correct(tape.logits(), labels, net.layout.n_classes());
    opt.mu.step(&mut net.mu, &net.grad_mu, cfg.pretrain.lr_mu, None)?;
    opt.sigma.step(
        &mut net.sigma,
        &net.grad_sigma,
        cfg.pretrain.lr_sigma,
        Some(cfg.sigma_min),
    )?;
    Ok((loss, correct))
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    rng.permutation(n).chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

fn accuracy_of(probs: &[f64], labels: &[usize], classes: usize) -> f64 {
    count_correct(probs, labels, classes) as f64 / labels.len().max(1) as f64
}

/// Stage-1 mean-field VI. On divergence the error is returned and `net`
/// holds the last finite state.
pub fn pretrain_stage1(
    net: &mut Network,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &PipelineConfig,
    rng: &RngStream,
) -> Result<TrainingLog> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = Stage1Optimizer::new(cfg.optimizer, net.n_weights());
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.pretrain.epochs {
        let batches = shuffled_batches(
            data.len(),
            cfg.pretrain.batch_size,
            &mut rng.derive(&[stage::PRETRAIN, epoch as u64]),
        );
        let mut sum = LossBreakdown::default();
        let mut correct = 0;
        for (b, rows) in batches.iter().enumerate() {
            let (x, y) = data.gather(rows);
            let mut brng = rng.derive(&[stage::PRETRAIN, epoch as u64, 1 + b as u64]);
            let (l, c) = stage1_step(
                net,
                &Batch::new(&x, data.dim),
                &y,
                data.len(),
                cfg,
                &mut opt,
                &mut brng,
                (epoch, b),
            )?;
            sum = add(sum, l);
            correct += c;
        }
        let val_acc = match val {
            Some(v) if !v.is_empty() => {
                let mut vrng = rng.derive(&[stage::PRETRAIN, epoch as u64, 0]);
                let p = predict_with(&*net, &Batch::new(&v.inputs, v.dim), 1, &mut vrng, false)?;
                Some(accuracy_of(&p.mean_probs, &v.labels, v.n_classes))
            }
            _ => None,
        };
        log.rows.push(EpochRecord {
            epoch,
            loss: scale(sum, 1.0 / batches.len() as f64),
            train_acc: correct as f64 / data.len() as f64,
            val_acc,
        });
    }
    Ok(log)
}

fn add(a: LossBreakdown, b: LossBreakdown) -> LossBreakdown {
    LossBreakdown::new(
        a.nll_term + b.nll_term,
        a.gmm_kl_term + b.gmm_kl_term,
        a.outlier_kl_term + b.outlier_kl_term,
    )
}

fn scale(a: LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown::new(a.nll_term * s, a.gmm_kl_term * s, a.outlier_kl_term * s)
}

/// Gradients with respect to Stage-3's trainable parameters. Outliers are in
/// flat-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedGrads {
    pub comp_m: Vec<f64>,
    pub comp_s: Vec<f64>,
    pub out_mu: Vec<f64>,
    pub out_sigma: Vec<f64>,
}

/// Recorded forward pass of the compressed model.
pub struct Stage3Tape {
    pub realization: Realization,
    pub tape: Tape,
}

fn gmm_kl_multiplier(cp: &CompressedPosterior, mode: KlScaleMode) -> f64 {
    match mode {
        KlScaleMode::AsWritten => 1.0,
        KlScaleMode::PerWeight => cp.n_inliers() as f64,
    }
}

/// KL terms of the combined loss and their gradients.
fn kl_terms(cp: &CompressedPosterior, cfg: &PipelineConfig) -> (f64, f64, SharedGrads) {
    let p = &cfg.prior;
    let c = gmm_kl_multiplier(cp, cfg.retrain.kl_scale_mode);
    let k = cp.gmm.k();
    let mut g = SharedGrads {
        comp_m: vec![0.0; k],
        comp_s: vec![0.0; k],
        out_mu: Vec::new(),
        out_sigma: Vec::new(),
    };
    let mut gmm_kl = 0.0;
    for (j, comp) in cp.gmm.components.iter().enumerate() {
        let [m, s] = comp.gauss.mean;
        let s = s.max(cfg.sigma_min);
        gmm_kl += comp.weight * kl_unchecked(m, s, p.mean, p.std);
        let (dm, ds) = kl_gaussian_1d_grad(m, s, p.mean, p.std);
        g.comp_m[j] = c * comp.weight * dm;
        g.comp_s[j] = c * comp.weight * ds;
    }
    let mut out_kl = 0.0;
    for a in &cp.assignments {
        if let WeightAssignment::Outlier { mu, sigma } = a {
            let s = sigma.max(cfg.sigma_min);
            out_kl += kl_unchecked(*mu, s, p.mean, p.std);
            let (dm, ds) = kl_gaussian_1d_grad(*mu, s, p.mean, p.std);
            g.out_mu.push(dm);
            g.out_sigma.push(ds);
        }
    }
    (c * gmm_kl, out_kl, g)
}

/// Combined loss for a given realization:
/// `(N/|B|)·NLL + c·Σ_k π_k KL(N(m_k, s_k) ‖ prior) + Σ_outliers KL`.
pub fn combined_loss_for(
    cp: &CompressedPosterior,
    realization: Realization,
    x: &Batch<'_>,
    labels: &[usize],
    n_total: usize,
    cfg: &PipelineConfig,
) -> Result<(LossBreakdown, Stage3Tape)> {
    let tape = forward_realized(&cp.layout, realization.weights.clone(), x)?;
    let scale = n_total as f64 / labels.len() as f64;
    let (nll, _) = crate::model::softmax_cross_entropy(tape.logits(), labels, cp.layout.n_classes(), 1.0);
    let (gmm_kl, out_kl, _) = kl_terms(cp, cfg);
    Ok((
        LossBreakdown::new(scale * nll, gmm_kl, out_kl),
        Stage3Tape { realization, tape },
    ))
}

/// Samples weights from the compressed posterior and evaluates the combined
/// loss on one batch.
pub fn compute_combined_loss(
    cp: &CompressedPosterior,
    x: &Batch<'_>,
    labels: &[usize],
    n_total: usize,
    cfg: &PipelineConfig,
    rng: &mut RngStream,
) -> Result<(LossBreakdown, Stage3Tape)> {
    let r = realize_weights(cp, rng, cfg.assignment.blend_mode, cfg.sigma_min)?;
    combined_loss_for(cp, r, x, labels, n_total, cfg)
}

/// Gradient of the combined loss. Each realized weight's gradient is summed
/// into the component(s) it was drawn from, weighted by α under parameter
/// blending.
pub fn combined_backward(
    cp: &CompressedPosterior,
    st: &Stage3Tape,
    labels: &[usize],
    n_total: usize,
    cfg: &PipelineConfig,
) -> Result<SharedGrads> {
    let scale = n_total as f64 / labels.len() as f64;
    let (_, gw) = backward_weights(&cp.layout, &st.tape, labels, scale)?;
    let (_, _, mut g) = kl_terms(cp, cfg);
    let smin = cfg.sigma_min;
    let comps = &cp.gmm.components;
    let eps = &st.realization.eps;
    let chosen = &st.realization.chosen;
    let mut slot = 0;
    for (i, a) in cp.assignments.iter().enumerate() {
        let gi = gw[i];
        let ge = gi * eps[i];
        match a {
            WeightAssignment::Outlier { sigma, .. } => {
                g.out_mu[slot] += gi;
                if *sigma >= smin {
                    g.out_sigma[slot] += ge;
                }
                slot += 1;
            }
            WeightAssignment::Single { component } => {
                let k = *component as usize;
                g.comp_m[k] += gi;
                if comps[k].gauss.mean[1] >= smin {
                    g.comp_s[k] += ge;
                }
            }
            WeightAssignment::Blended { entries } if chosen[i] == NOT_CHOSEN => {
                let s_bar: f64 = entries
                    .iter()
                    .map(|&(c, al)| al * comps[c as usize].gauss.mean[1])
                    .sum();
                for &(c, al) in entries {
                    g.comp_m[c as usize] += al * gi;
                    if s_bar >= smin {
                        g.comp_s[c as usize] += al * ge;
                    }
                }
            }
            WeightAssignment::Blended { .. } => {
                let k = chosen[i] as usize;
                g.comp_m[k] += gi;
                if comps[k].gauss.mean[1] >= smin {
                    g.comp_s[k] += ge;
                }
            }
        }
    }
    Ok(g)
}

/// Rebuilds the realized weights of a tape after the parameters changed,
/// keeping its noise (and drawn components) fixed.
pub fn refresh_realization(cp: &CompressedPosterior, r: &Realization, sigma_min: f64) -> Result<Realization> {
    let weights = realize_with_noise(cp, &r.eps, &r.chosen, sigma_min)?;
    Ok(Realization {
        weights,
        eps: r.eps.clone(),
        chosen: r.chosen.clone(),
    })
}

/// Stage-3 trainable parameters gathered into flat groups.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedParams {
    pub comp_m: Vec<f64>,
    pub comp_s: Vec<f64>,
    pub out_mu: Vec<f64>,
    pub out_sigma: Vec<f64>,
}

impl SharedParams {
    pub fn gather(cp: &CompressedPosterior) -> Self {
        let outs = cp.outliers();
        Self {
            comp_m: cp.gmm.components.iter().map(|c| c.gauss.mean[0]).collect(),
            comp_s: cp.gmm.components.iter().map(|c| c.gauss.mean[1]).collect(),
            out_mu: outs.iter().map(|o| o.1).collect(),
            out_sigma: outs.iter().map(|o| o.2).collect(),
        }
    }

    pub fn scatter(&self, cp: &mut CompressedPosterior) {
        for (k, c) in cp.gmm.components.iter_mut().enumerate() {
            c.gauss.mean = [self.comp_m[k], self.comp_s[k]];
        }
        let mut slot = 0;
        for a in cp.assignments.iter_mut() {
            if let WeightAssignment::Outlier { mu, sigma } = a {
                *mu = self.out_mu[slot];
                *sigma = self.out_sigma[slot];
                slot += 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.comp_m.len() + self.comp_s.len() + self.out_mu.len() + self.out_sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Stage3Optimizer {
    groups: [GroupOptimizer; 4],
}

impl Stage3Optimizer {
    pub fn new(kind: Optimizer, cp: &CompressedPosterior) -> Self {
        let k = cp.gmm.k();
        let n = cp.counts().n_outliers;
        Self {
            groups: [
                GroupOptimizer::new(kind, k),
                GroupOptimizer::new(kind, k),
                GroupOptimizer::new(kind, n),
                GroupOptimizer::new(kind, n),
            ],
        }
    }
}

/// One Stage-3 step on a batch; only component means and outliers move.
#[allow(clippy::too_many_arguments)]
pub fn stage3_step(
    cp: &mut CompressedPosterior,
    x: &Batch<'_>,
    labels: &[usize],
    n_total: usize,
    cfg: &PipelineConfig,
    opt: &mut Stage3Optimizer,
    rng: &mut RngStream,
    at: (usize, usize),
) -> Result<(LossBreakdown, usize)> {
    let (loss, st) = compute_combined_loss(cp, x, labels, n_total, cfg, rng)?;
    if !loss.total.is_finite() {
        return Err(Error::Divergence {
            epoch: at.0,
            step: at.1,
            loss: loss.total,
        });
    }
    let correct = count_correct(st.tape.logits(), labels, cp.layout.n_classes());
    let g = combined_backward(cp, &st, labels, n_total, cfg)?;
    let mut p = SharedParams::gather(cp);
    let lr = cfg.retrain.lr;
    let floor = Some(cfg.sigma_min);
    let [om, os, oom, oos] = &mut opt.groups;
    om.step(&mut p.comp_m, &g.comp_m, lr, None)?;
    os.step(&mut p.comp_s, &g.comp_s, lr, floor)?;
    oom.step(&mut p.out_mu, &g.out_mu, lr, None)?;
    oos.step(&mut p.out_sigma, &g.out_sigma, lr, floor)?;
    p.scatter(cp);
    Ok((loss, correct))
}

/// Stage-3 training. Mixing weights, covariances, α and assignments stay
/// frozen. The result is rounded to storage precision.
pub fn train_stage3(
    cp: &mut CompressedPosterior,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &PipelineConfig,
    rng: &RngStream,
) -> Result<TrainingLog> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = Stage3Optimizer::new(cfg.optimizer, cp);
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.retrain.epochs {
        let batches = shuffled_batches(
            data.len(),
            cfg.retrain.batch_size,
            &mut rng.derive(&[stage::RETRAIN, epoch as u64]),
        );
        let mut sum = LossBreakdown::default();
        let mut correct = 0;
        for (b, rows) in batches.iter().enumerate() {
            let (x, y) = data.gather(rows);
            let mut brng = rng.derive(&[stage::RETRAIN, epoch as u64, 1 + b as u64]);
            let (l, c) = stage3_step(
                cp,
                &Batch::new(&x, data.dim),
                &y,
                data.len(),
                cfg,
                &mut opt,
                &mut brng,
                (epoch, b),
            )?;
            sum = add(sum, l);
            correct += c;
        }
        let val_acc = match val {
            Some(v) if !v.is_empty() => {
                let sampler = CompressedSampler {
                    cp,
                    mode: cfg.assignment.blend_mode,
                    sigma_min: cfg.sigma_min,
                };
                let mut vrng = rng.derive(&[stage::RETRAIN, epoch as u64, 0]);
                let p = predict_with(&sampler, &Batch::new(&v.inputs, v.dim), 1, &mut vrng, false)?;
                Some(accuracy_of(&p.mean_probs, &v.labels, v.n_classes))
            }
            _ => None,
        };
        log.rows.push(EpochRecord {
            epoch,
            loss: scale(sum, 1.0 / batches.len() as f64),
            train_acc: correct as f64 / data.len() as f64,
            val_acc,
        });
    }
    cp.round_to_storage();
    Ok(log)
}

/// Blend mode that realizes weights deterministically given noise, used when
/// Stage-3 gradients are checked against finite differences.
pub fn is_noise_deterministic(mode: BlendMode) -> bool {
    mode != BlendMode::Hierarchical
}
