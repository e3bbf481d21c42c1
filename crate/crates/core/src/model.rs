//! Mean-field variational MLP.
//!
//! Every scalar weight and bias carries its own Gaussian `N(μ, σ²)`. The
//! parameters are stored flat: for each layer the `out × in` weight matrix in
//! row-major order, then its `out` biases. A flat index therefore identifies
//! one scalar parameter for the lifetime of the network, across save/load.
//!
//! A forward pass realizes `w = μ + σ ε` with fresh `ε ~ N(0, 1)` per
//! parameter, shared by every example in the batch. Gradients are derived by
//! hand for dense layers, ReLU and a softmax cross-entropy head, summed over
//! the batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::linalg::softmax_into;
use crate::rng::RngStream;

/// Layer widths and the flat parameter index derived from them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    dims: Vec<usize>,
    offsets: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tensor {
    Weight,
    Bias,
}

/// Position of one scalar parameter. `col` is 0 for biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLocation {
    pub layer: usize,
    pub tensor: Tensor,
    pub row: usize,
    pub col: usize,
}

impl Layout {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::BadArchitecture(format!(
                "need at least an input and an output size, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::BadArchitecture(format!("zero-width layer in {dims:?}")));
        }
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        offsets.push(0);
        for w in dims.windows(2) {
            off += w[0] * w[1] + w[1];
            offsets.push(off);
        }
        Ok(Self {
            dims: dims.to_vec(),
            offsets,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn in_dim(&self, l: usize) -> usize {
        self.dims[l]
    }

    pub fn out_dim(&self, l: usize) -> usize {
        self.dims[l + 1]
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_weights(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn weight_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.offsets[l];
        start..start + self.dims[l] * self.dims[l + 1]
    }

    pub fn bias_range(&self, l: usize) -> std::ops::Range<usize> {
        let w = self.weight_range(l);
        w.end..self.offsets[l + 1]
    }

    pub fn locate(&self, index: usize) -> Option<ParamLocation> {
        if index >= self.n_weights() {
            return None;
        }
        let layer = self.offsets.partition_point(|&o| o <= index) - 1;
        let wr = self.weight_range(layer);
        if index < wr.end {
            let k = index - wr.start;
            let cols = self.in_dim(layer);
            Some(ParamLocation {
                layer,
                tensor: Tensor::Weight,
                row: k / cols,
                col: k % cols,
            })
        } else {
            Some(ParamLocation {
                layer,
                tensor: Tensor::Bias,
                row: index - wr.end,
                col: 0,
            })
        }
    }

    pub fn index_of(&self, loc: ParamLocation) -> Option<usize> {
        if loc.layer >= self.n_layers() || loc.row >= self.out_dim(loc.layer) {
            return None;
        }
        match loc.tensor {
            Tensor::Weight if loc.col < self.in_dim(loc.layer) => {
                Some(self.weight_range(loc.layer).start + loc.row * self.in_dim(loc.layer) + loc.col)
            }
            Tensor::Bias if loc.col == 0 => Some(self.bias_range(loc.layer).start + loc.row),
            _ => None,
        }
    }
}

/// Read-only view of one layer's parameters and accumulated gradients.
pub struct BayesDenseLayer<'a> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_mu: &'a [f64],
    pub weight_sigma: &'a [f64],
    pub bias_mu: &'a [f64],
    pub bias_sigma: &'a [f64],
    pub grad_weight_mu: &'a [f64],
    pub grad_weight_sigma: &'a [f64],
    pub grad_bias_mu: &'a [f64],
    pub grad_bias_sigma: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layout: Layout,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub grad_mu: Vec<f64>,
    pub grad_sigma: Vec<f64>,
}

impl Network {
    pub fn from_parts(layout: Layout, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let n = layout.n_weights();
        if mu.len() != n || sigma.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "layout has {n} parameters, got {} means and {} stds",
                mu.len(),
                sigma.len()
            )));
        }
        Ok(Self {
            layout,
            mu,
            sigma,
            grad_mu: vec![0.0; n],
            grad_sigma: vec![0.0; n],
        })
    }

    pub fn n_weights(&self) -> usize {
        self.layout.n_weights()
    }

    pub fn layer(&self, l: usize) -> BayesDenseLayer<'_> {
        let w = self.layout.weight_range(l);
        let b = self.layout.bias_range(l);
        BayesDenseLayer {
            in_dim: self.layout.in_dim(l),
            out_dim: self.layout.out_dim(l),
            weight_mu: &self.mu[w.clone()],
            weight_sigma: &self.sigma[w.clone()],
            bias_mu: &self.mu[b.clone()],
            bias_sigma: &self.sigma[b.clone()],
            grad_weight_mu: &self.grad_mu[w.clone()],
            grad_weight_sigma: &self.grad_sigma[w],
            grad_bias_mu: &self.grad_mu[b.clone()],
            grad_bias_sigma: &self.grad_sigma[b],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad_mu.iter_mut().for_each(|g| *g = 0.0);
        self.grad_sigma.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn project_sigma(&mut self, sigma_min: f64) {
        for s in self.sigma.iter_mut() {
            if *s < sigma_min || s.is_nan() {
                *s = sigma_min;
            }
        }
    }

    /// `(μ_i, σ_i)` for every parameter, in flat order.
    pub fn points(&self) -> Vec<[f64; 2]> {
        self.mu.iter().zip(&self.sigma).map(|(&m, &s)| [m, s]).collect()
    }
}

/// Xavier-uniform means, `|U(±g/√(fan_in+fan_out))|` weight stds, zero bias
/// means and `|N(0, s²)|` bias stds, all stds clamped to `sigma_min`.
pub fn init_network(arch: &[usize], rng: &mut RngStream, cfg: &PipelineConfig) -> Result<Network> {
    let layout = Layout::new(arch)?;
    let n = layout.n_weights();
    let mut mu = vec![0.0; n];
    let mut sigma = vec![0.0; n];
    for l in 0..layout.n_layers() {
        let mut lrng = rng.derive(&[crate::rng::stage::INIT, l as u64]);
        let fan = (layout.in_dim(l) + layout.out_dim(l)) as f64;
        let mu_bound = cfg.init.mu_gain * (6.0 / fan).sqrt();
        let sigma_bound = cfg.init.sigma_gain / fan.sqrt();
        for i in layout.weight_range(l) {
            mu[i] = lrng.uniform_range(-mu_bound, mu_bound);
        }
        for i in layout.weight_range(l) {
            sigma[i] = lrng.uniform_range(-sigma_bound, sigma_bound).abs().max(cfg.sigma_min);
        }
        for i in layout.bias_range(l) {
            sigma[i] = (cfg.init.bias_sigma_std * lrng.standard_normal())
                .abs()
                .max(cfg.sigma_min);
        }
    }
    Network::from_parts(layout, mu, sigma)
}

/// Row-major dense `rows × cols` block of inputs.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
}

impl<'a> Batch<'a> {
    pub fn new(data: &'a [f64], cols: usize) -> Self {
        assert!(cols > 0 && data.len().is_multiple_of(cols));
        Self {
            data,
            rows: data.len() / cols,
            cols,
        }
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    pub rows: usize,
    /// Realized parameters, flat.
    pub weights: Vec<f64>,
    /// The noise used to realize them, when sampled.
    pub eps: Option<Vec<f64>>,
    /// Input to each layer (`inputs[0]` is the batch).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer; the last entry is the logits.
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().unwrap()
    }
}

/// `C = A·B` where `A` is `m × k` and `B` is `k × n` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches, and `c`
    // is a distinct mutable slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_input(layout: &Layout, x: &Batch<'_>) -> Result<()> {
    if x.cols != layout.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} features, network expects {}",
            x.cols,
            layout.input_dim()
        )));
    }
    Ok(())
}

/// Forward pass with already-realized parameters.
pub fn forward_realized(layout: &Layout, weights: Vec<f64>, x: &Batch<'_>) -> Result<Tape> {
    check_input(layout, x)?;
    if weights.len() != layout.n_weights() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} parameters, got {}",
            layout.n_weights(),
            weights.len()
        )));
    }
    let rows = x.rows;
    let n_layers = layout.n_layers();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut act = x.data.to_vec();
    for l in 0..n_layers {
        let (din, dout) = (layout.in_dim(l), layout.out_dim(l));
        let w = &weights[layout.weight_range(l)];
        let b = &weights[layout.bias_range(l)];
        let mut z = vec![0.0; rows * dout];
        for r in 0..rows {
            z[r * dout..(r + 1) * dout].copy_from_slice(b);
        }
        // Z = X Wᵀ + b
        gemm(rows, din, dout, &act, din, 1, w, 1, din, &mut z, 1.0);
        let next = if l + 1 < n_layers {
            z.iter().map(|&v| v.max(0.0)).collect()
        } else {
            Vec::new()
        };
        inputs.push(std::mem::replace(&mut act, next));
        pre.push(z);
    }
    Ok(Tape {
        rows,
        weights,
        eps: None,
        inputs,
        pre,
    })
}

/// Realizes `w = μ + σ ε` with fresh noise and runs the forward pass.
pub fn forward_sample_params(
    layout: &Layout,
    mu: &[f64],
    sigma: &[f64],
    x: &Batch<'_>,
    rng: &mut RngStream,
) -> Result<Tape> {
    let n = layout.n_weights();
    if mu.len() != n || sigma.len() != n {
        return Err(Error::ShapeMismatch("parameter vectors do not match the layout".into()));
    }
    let eps = crate::rng::sample_standard_normal(rng, n);
    let weights: Vec<f64> = mu.iter().zip(sigma).zip(&eps).map(|((m, s), e)| m + s * e).collect();
    let mut tape = forward_realized(layout, weights, x)?;
    tape.eps = Some(eps);
    Ok(tape)
}

pub fn forward_sample(net: &Network, x: &Batch<'_>, rng: &mut RngStream) -> Result<Tape> {
    forward_sample_params(&net.layout, &net.mu, &net.sigma, x, rng)
}

/// Summed softmax cross-entropy of the logits and its gradient, scaled.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize, scale: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; logits.len()];
    let mut nll = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let z = &logits[r * classes..(r + 1) * classes];
        let g = &mut grad[r * classes..(r + 1) * classes];
        let lse = softmax_into(z, g);
        nll += lse - z[y];
        g[y] -= 1.0;
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    (nll, grad)
}

/// Returns the summed NLL of the batch and `scale · ∂NLL/∂w` for every
/// realized parameter.
pub fn backward_weights(layout: &Layout, tape: &Tape, labels: &[usize], scale: f64) -> Result<(f64, Vec<f64>)> {
    if labels.len() != tape.rows {
        return Err(Error::TapeMismatch(format!(
            "tape holds {} rows, got {} labels",
            tape.rows,
            labels.len()
        )));
    }
    if tape.weights.len() != layout.n_weights() || tape.pre.len() != layout.n_layers() {
        return Err(Error::TapeMismatch("tape was recorded for a different layout".into()));
    }
    let classes = layout.n_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::ShapeMismatch(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let rows = tape.rows;
    let (nll, mut dz) = softmax_cross_entropy(tape.logits(), labels, classes, scale);
    let mut grad = vec![0.0; layout.n_weights()];
    for l in (0..layout.n_layers()).rev() {
        let (din, dout) = (layout.in_dim(l), layout.out_dim(l));
        let x = &tape.inputs[l];
        let wr = layout.weight_range(l);
        // dW = dZᵀ X
        gemm(dout, rows, din, &dz, 1, dout, x, din, 1, &mut grad[wr.clone()], 0.0);
        let gb = &mut grad[layout.bias_range(l)];
        for r in 0..rows {
            for (g, d) in gb.iter_mut().zip(&dz[r * dout..(r + 1) * dout]) {
                *g += d;
            }
        }
        if l > 0 {
            // dX = dZ W, then through the ReLU of the previous layer.
            let mut dx = vec![0.0; rows * din];
            gemm(rows, dout, din, &dz, dout, 1, &tape.weights[wr], din, 1, &mut dx, 0.0);
            for (d, &p) in dx.iter_mut().zip(&tape.pre[l - 1]) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
            dz = dx;
        }
    }
    Ok((nll, grad))
}

/// Accumulates `scale · ∂NLL/∂μ` and `scale · ∂NLL/∂σ` into the network's
/// gradient buffers (`∂w/∂μ = 1`, `∂w/∂σ = ε`) and returns the summed NLL.
pub fn backward(net: &mut Network, tape: &Tape, labels: &[usize], scale: f64) -> Result<f64> {
    let eps = tape
        .eps
        .as_ref()
        .ok_or_else(|| Error::TapeMismatch("tape has no sampled noise".into()))?;
    let (nll, gw) = backward_weights(&net.layout, tape, labels, scale)?;
    for (((gm, gs), g), e) in net.grad_mu.iter_mut().zip(net.grad_sigma.iter_mut()).zip(&gw).zip(eps) {
        *gm += g;
        *gs += g * e;
    }
    Ok(nll)
}

#[derive(Clone, Debug)]
pub struct PredictiveOutput {
    pub rows: usize,
    pub classes: usize,
    /// `rows × classes`, each row a probability vector.
    pub mean_probs: Vec<f64>,
    /// Per-draw probabilities, kept only on request.
    pub draws: Option<Vec<Vec<f64>>>,
}

impl PredictiveOutput {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.mean_probs[r * self.classes..(r + 1) * self.classes]
    }
}

/// Draws a full parameter vector for one predictive sample.
pub trait WeightSampler {
    fn layout(&self) -> &Layout;
    fn sample(&self, rng: &mut RngStream) -> Vec<f64>;
}

impl WeightSampler for Network {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let eps = crate::rng::sample_standard_normal(rng, self.n_weights());
        self.mu
            .iter()
            .zip(&self.sigma)
            .zip(eps)
            .map(|((m, s), e)| m + s * e)
            .collect()
    }
}

const PREDICT_CHUNK: usize = 256;

fn softmax_rows(layout: &Layout, weights: &[f64], x: &Batch<'_>) -> Result<Vec<f64>> {
    let classes = layout.n_classes();
    // Rows are independent, so chunking never changes the result.
    let chunks: Vec<Result<Vec<f64>>> = x
        .data
        .par_chunks(PREDICT_CHUNK * x.cols)
        .map(|chunk| {
            let tape = forward_realized(layout, weights.to_vec(), &Batch::new(chunk, x.cols))?;
            let logits = tape.logits();
            let mut p = vec![0.0; logits.len()];
            for (z, o) in logits.chunks(classes).zip(p.chunks_mut(classes)) {
                softmax_into(z, o);
            }
            Ok(p)
        })
        .collect();
    let mut out = Vec::with_capacity(x.rows * classes);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Monte-Carlo predictive: the average of softmax outputs over `n_samples`
/// independent parameter draws.
pub fn predict_with<S: WeightSampler + ?Sized>(
    sampler: &S,
    x: &Batch<'_>,
    n_samples: usize,
    rng: &mut RngStream,
    keep_draws: bool,
) -> Result<PredictiveOutput> {
    if n_samples == 0 {
        return Err(Error::EmptyInput("predict needs at least one sample"));
    }
    let layout = sampler.layout();
    check_input(layout, x)?;
    let classes = layout.n_classes();
    let mut mean = vec![0.0; x.rows * classes];
    let mut draws = keep_draws.then(Vec::new);
    for _ in 0..n_samples {
        let w = sampler.sample(rng);
        let p = softmax_rows(layout, &w, x)?;
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v;
        }
        if let Some(d) = draws.as_mut() {
            d.push(p);
        }
    }
    let inv = 1.0 / n_samples as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(PredictiveOutput {
        rows: x.rows,
        classes,
        mean_probs: mean,
        draws,
    })
}

pub fn predict(net: &Network, x: &Batch<'_>, n_samples: usize, rng: &mut RngStream) -> Result<PredictiveOutput> {
    predict_with(net, x, n_samples, rng, false)
}
