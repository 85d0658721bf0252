//! Softmax loss, Potts initialization and SGD-with-momentum training of the
//! CRF parameters through the unrolled recurrence. Unaries are fixed inputs;
//! only the kernel weights and the compatibility matrix are learned.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crf_rnn::{crf_rnn_backward, crf_rnn_forward, crf_rnn_infer, ParamSchedule};
use crate::error::{CrfError, Result};
use crate::image::{LabelMap, RgbImage, DEFAULT_IGNORE_LABEL};
use crate::meanfield::{CrfParams, KernelBank, KernelSpec, MarginalField, UnaryField};
use crate::metrics::ConfusionMatrix;
use crate::tensor::Matrix;

/// Probabilities are clamped to this before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: RgbImage,
    pub unary: UnaryField,
    pub ground_truth: LabelMap,
}

impl Sample {
    pub fn new(image: RgbImage, unary: UnaryField, ground_truth: LabelMap) -> Result<Self> {
        let dims = (image.height(), image.width());
        if (unary.height(), unary.width()) != dims
            || (ground_truth.height(), ground_truth.width()) != dims
        {
            return Err(CrfError::shape(format!(
                "image is {}x{}, unaries {}x{}, ground truth {}x{}",
                image.width(),
                image.height(),
                unary.width(),
                unary.height(),
                ground_truth.width(),
                ground_truth.height()
            )));
        }
        Ok(Self {
            image,
            unary,
            ground_truth,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.unary.n_labels()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub t_train: usize,
    pub ignore_label: u8,
    pub seed: u64,
    /// Rescale each step's gradient to at most this norm.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.99,
            epochs: 50,
            t_train: 5,
            ignore_label: DEFAULT_IGNORE_LABEL,
            seed: 0,
            clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(CrfError::invalid("learning rate must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CrfError::invalid("momentum must lie in [0, 1)"));
        }
        if self.t_train == 0 {
            return Err(CrfError::invalid("t_train must be at least 1"));
        }
        if let Some(c) = self.clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(CrfError::invalid("clip norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Pixel-averaged negative log-likelihood of the ground truth and its
/// gradient with respect to `y`.
pub fn softmax_loss(y: &MarginalField, gt: &LabelMap, ignore_label: u8) -> Result<(f64, Matrix)> {
    if (gt.height(), gt.width()) != (y.height(), y.width()) {
        return Err(CrfError::shape("ground truth does not match marginals"));
    }
    gt.validate(y.n_labels(), ignore_label)?;
    let valid = gt.labels().iter().filter(|&&g| g != ignore_label).count();
    if valid == 0 {
        return Err(CrfError::invalid("every ground-truth pixel is ignored"));
    }
    let scale = 1.0 / valid as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(y.n_pixels(), y.n_labels());
    for (i, &g) in gt.labels().iter().enumerate() {
        if g == ignore_label {
            continue;
        }
        let p = y.values().get(i, usize::from(g)).max(PROB_FLOOR);
        loss -= p.ln();
        grad.set(i, usize::from(g), -scale / p);
    }
    Ok((loss * scale, grad))
}

/// Potts compatibility `µ(l, l′) = [l ≠ l′]` with `weights(l, m) = kernel_init[m]`.
pub fn init_params(n_labels: usize, kernel_init: &[f64]) -> Result<CrfParams> {
    if n_labels < 2 {
        return Err(CrfError::invalid("at least two labels are required"));
    }
    if kernel_init.is_empty() {
        return Err(CrfError::invalid("at least one kernel weight is required"));
    }
    CrfParams::new(
        Matrix::from_fn(n_labels, kernel_init.len(), |_, m| kernel_init[m]),
        Matrix::from_fn(n_labels, n_labels, |a, b| if a == b { 0.0 } else { 1.0 }),
    )
}

/// Classical momentum: `v ← momentum·v − lr·g`, then `θ ← θ + v`.
pub fn sgd_momentum_step(
    params: &mut CrfParams,
    grads: &CrfParams,
    velocity: &mut CrfParams,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    let shape = (params.n_labels(), params.n_kernels());
    if (grads.n_labels(), grads.n_kernels()) != shape
        || (velocity.n_labels(), velocity.n_kernels()) != shape
    {
        return Err(CrfError::shape(
            "parameters, gradients and velocity differ in shape",
        ));
    }
    if !grads.is_finite() {
        return Err(CrfError::NonFinite("parameter gradient"));
    }
    for (v, g) in [
        (&mut velocity.weights, &grads.weights),
        (&mut velocity.compatibility, &grads.compatibility),
    ] {
        v.scale(momentum);
        v.add_scaled(-learning_rate, g);
    }
    params.weights.add_scaled(1.0, &velocity.weights);
    params
        .compatibility
        .add_scaled(1.0, &velocity.compatibility);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over samples of the loss seen at each step, before that step's update.
    pub loss: f64,
    /// Mean IU of the same forward passes, accumulated over the whole set.
    pub mean_iu: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSchedule,
    pub history: Vec<EpochRecord>,
}

fn check_dataset(dataset: &[Sample], kernels: &[KernelSpec], ignore_label: u8) -> Result<usize> {
    let first = dataset
        .first()
        .ok_or_else(|| CrfError::invalid("dataset is empty"))?;
    let l = first.n_labels();
    for (k, s) in dataset.iter().enumerate() {
        if s.n_labels() != l {
            return Err(CrfError::shape(format!(
                "sample {k} has {} labels, sample 0 has {l}",
                s.n_labels()
            )));
        }
        s.ground_truth.validate(l, ignore_label)?;
    }
    if kernels.is_empty() {
        return Err(CrfError::invalid("at least one kernel is required"));
    }
    Ok(l)
}

/// Builds the kernel bank of every sample once.
pub fn build_banks(dataset: &[Sample], kernels: &[KernelSpec]) -> Result<Vec<Arc<KernelBank>>> {
    dataset
        .iter()
        .map(|s| KernelBank::build(&s.image, kernels).map(Arc::new))
        .collect()
}

fn clip_grads(grads: &mut ParamSchedule, max_norm: f64) {
    let norm = grads
        .sets()
        .iter()
        .map(|g| g.norm().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.sets_mut() {
            g.weights.scale(factor);
            g.compatibility.scale(factor);
        }
    }
}

/// Trains `initial` on `dataset`, one sample per step, visiting samples in
/// an order shuffled per epoch from `config.seed`.
pub fn train(
    dataset: &[Sample],
    kernels: &[KernelSpec],
    initial: ParamSchedule,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let l = check_dataset(dataset, kernels, config.ignore_label)?;
    for p in initial.sets() {
        p.ensure_matches(l, kernels.len())?;
    }
    let banks = build_banks(dataset, kernels)?;
    let mut params = initial;
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut losses = vec![0.0; dataset.len()];
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut cm = ConfusionMatrix::new(l);
        for &k in &order {
            let s = &dataset[k];
            let (y, tape) = crf_rnn_forward(&s.unary, banks[k].clone(), &params, config.t_train)?;
            let (loss, d_y) = softmax_loss(&y, &s.ground_truth, config.ignore_label)?;
            losses[k] = loss;
            cm.accumulate(&y.argmax(), s.ground_truth.labels(), config.ignore_label)?;
            let mut grads = crf_rnn_backward(&tape, &d_y)?.d_params;
            if let Some(c) = config.clip {
                clip_grads(&mut grads, c);
            }
            for ((p, g), v) in params
                .sets_mut()
                .iter_mut()
                .zip(grads.sets())
                .zip(velocity.sets_mut())
            {
                sgd_momentum_step(p, g, v, config.learning_rate, config.momentum)?;
            }
        }
        history.push(EpochRecord {
            epoch,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            mean_iu: cm.mean_iu(),
        });
    }
    Ok(TrainOutcome { params, history })
}

/// Dataset-level confusion of CRF-refined predictions after `iterations`
/// mean-field updates.
pub fn evaluate(
    dataset: &[Sample],
    kernels: &[KernelSpec],
    params: &ParamSchedule,
    iterations: usize,
    ignore_label: u8,
) -> Result<ConfusionMatrix> {
    let l = check_dataset(dataset, kernels, ignore_label)?;
    let mut cm = ConfusionMatrix::new(l);
    for s in dataset {
        let bank = KernelBank::build(&s.image, kernels)?;
        let inf = crf_rnn_infer(&s.unary, &bank, params, iterations)?;
        cm.accumulate(
            &inf.marginals.argmax(),
            s.ground_truth.labels(),
            ignore_label,
        )?;
    }
    Ok(cm)
}

/// Dataset-level confusion of `argmax(U)`.
pub fn evaluate_unaries(dataset: &[Sample], ignore_label: u8) -> Result<ConfusionMatrix> {
    let l = dataset
        .first()
        .ok_or_else(|| CrfError::invalid("dataset is empty"))?
        .n_labels();
    let mut cm = ConfusionMatrix::new(l);
    for s in dataset {
        cm.accumulate(&s.unary.argmax(), s.ground_truth.labels(), ignore_label)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub weights: Vec<f64>,
    pub mean_iu: f64,
}

/// Scores Potts-initialized inference for every combination of kernel
/// weights in `grid` (one candidate list per kernel). Results come back in
/// grid order; ties keep the earliest point when picking the best.
pub fn grid_search(
    dataset: &[Sample],
    kernels: &[KernelSpec],
    grid: &[Vec<f64>],
    iterations: usize,
    ignore_label: u8,
) -> Result<Vec<GridPoint>> {
    if grid.len() != kernels.len() {
        return Err(CrfError::invalid(format!(
            "{} candidate lists for {} kernels",
            grid.len(),
            kernels.len()
        )));
    }
    if grid.iter().any(Vec::is_empty) {
        return Err(CrfError::invalid(
            "every kernel needs at least one candidate weight",
        ));
    }
    let l = check_dataset(dataset, kernels, ignore_label)?;
    let banks = build_banks(dataset, kernels)?;
    let mut points = Vec::new();
    let mut idx = vec![0usize; grid.len()];
    loop {
        let weights: Vec<f64> = idx.iter().zip(grid).map(|(&i, c)| c[i]).collect();
        let params = ParamSchedule::Shared(init_params(l, &weights)?);
        let mut cm = ConfusionMatrix::new(l);
        for (s, bank) in dataset.iter().zip(&banks) {
            let inf = crf_rnn_infer(&s.unary, bank, &params, iterations)?;
            cm.accumulate(
                &inf.marginals.argmax(),
                s.ground_truth.labels(),
                ignore_label,
            )?;
        }
        points.push(GridPoint {
            weights,
            mean_iu: cm.mean_iu(),
        });
        // odometer over the candidate lists, last kernel fastest
        let mut k = grid.len();
        loop {
            if k == 0 {
                return Ok(points);
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < grid[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// The highest-scoring point, earliest on ties.
pub fn best_grid_point(points: &[GridPoint]) -> Option<&GridPoint> {
    points
        .iter()
        .fold(None, |best: Option<&GridPoint>, p| match best {
            Some(b) if b.mean_iu >= p.mean_iu => Some(b),
            _ => Some(p),
        })
}

#[cfg(test)]
mod tests;
