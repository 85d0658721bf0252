//! Mean-field inference unrolled as a recurrent network.
//!
//! The forward pass starts from `softmax(U)` and applies `T` mean-field
//! iterations, all sharing one [`KernelBank`]. The [`Tape`] it returns holds
//! every iteration's intermediates so [`crf_rnn_backward`] can run
//! backpropagation through time.

use std::sync::Arc;

use crate::error::{CrfError, Result};
use crate::image::RgbImage;
use crate::meanfield::{
    init_softmax, mean_field_iteration, mean_field_iteration_backward, mean_field_step,
    softmax_backward, CrfParams, KernelBank, KernelSpec, MarginalField, StageCache, UnaryField,
};
use crate::tensor::Matrix;

/// Iteration counts for training and inference, and whether all iterations
/// share one parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RnnConfig {
    pub t_train: usize,
    pub t_infer: usize,
    pub share_iteration_params: bool,
}

impl Default for RnnConfig {
    fn default() -> Self {
        Self {
            t_train: 5,
            t_infer: 10,
            share_iteration_params: true,
        }
    }
}

impl RnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_train == 0 || self.t_infer == 0 {
            return Err(CrfError::invalid("iteration counts must be at least 1"));
        }
        Ok(())
    }
}

/// Parameters used by the unrolled iterations.
///
/// With `PerIteration`, iteration `t` (counting from 0) uses entry `t`, and
/// iterations past the end of the list reuse the last entry.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSchedule {
    Shared(CrfParams),
    PerIteration(Vec<CrfParams>),
}

impl ParamSchedule {
    /// Builds the schedule `config` asks for, starting every iteration from
    /// `params`.
    pub fn from_config(params: CrfParams, config: &RnnConfig) -> Self {
        if config.share_iteration_params {
            Self::Shared(params)
        } else {
            Self::PerIteration(vec![params; config.t_train])
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Shared(_) => 1,
            Self::PerIteration(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sets(&self) -> &[CrfParams] {
        match self {
            Self::Shared(p) => std::slice::from_ref(p),
            Self::PerIteration(v) => v,
        }
    }

    pub fn sets_mut(&mut self) -> &mut [CrfParams] {
        match self {
            Self::Shared(p) => std::slice::from_mut(p),
            Self::PerIteration(v) => v,
        }
    }

    fn index(&self, t: usize) -> usize {
        t.min(self.len().saturating_sub(1))
    }

    pub fn for_iteration(&self, t: usize) -> &CrfParams {
        &self.sets()[self.index(t)]
    }

    /// A schedule of the same layout with every entry zeroed.
    pub fn zeros_like(&self) -> Self {
        let zero = |p: &CrfParams| CrfParams::zeros(p.n_labels(), p.n_kernels());
        match self {
            Self::Shared(p) => Self::Shared(zero(p)),
            Self::PerIteration(v) => Self::PerIteration(v.iter().map(zero).collect()),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.sets().iter().flat_map(CrfParams::to_flat).collect()
    }

    /// Rebuilds a schedule with this layout from [`ParamSchedule::to_flat`] output.
    pub fn from_flat_like(&self, flat: &[f64]) -> Result<Self> {
        let sizes: Vec<usize> = self.sets().iter().map(|p| p.to_flat().len()).collect();
        if flat.len() != sizes.iter().sum::<usize>() {
            return Err(CrfError::shape(format!(
                "flat schedule has {} values, expected {}",
                flat.len(),
                sizes.iter().sum::<usize>()
            )));
        }
        let mut rest = flat;
        let mut sets = Vec::with_capacity(sizes.len());
        for (p, n) in self.sets().iter().zip(sizes) {
            let (head, tail) = rest.split_at(n);
            sets.push(CrfParams::from_flat(p.n_labels(), p.n_kernels(), head)?);
            rest = tail;
        }
        Ok(match self {
            Self::Shared(_) => Self::Shared(sets.pop().expect("one set")),
            Self::PerIteration(_) => Self::PerIteration(sets),
        })
    }

    fn validate(&self) -> Result<()> {
        let sets = self.sets();
        let first = sets
            .first()
            .ok_or_else(|| CrfError::invalid("parameter schedule is empty"))?;
        for p in sets {
            p.validate()?;
            if (p.n_labels(), p.n_kernels()) != (first.n_labels(), first.n_kernels()) {
                return Err(CrfError::shape(
                    "parameter sets in a schedule differ in shape",
                ));
            }
        }
        Ok(())
    }
}

/// Everything [`crf_rnn_backward`] needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    bank: Arc<KernelBank>,
    initial: MarginalField,
    caches: Vec<StageCache>,
    schedule: ParamSchedule,
}

impl Tape {
    pub fn iterations(&self) -> usize {
        self.caches.len()
    }

    pub fn caches(&self) -> &[StageCache] {
        &self.caches
    }

    /// `softmax(U)`, the marginals fed to the first iteration.
    pub fn initial(&self) -> &MarginalField {
        &self.initial
    }

    pub fn bank(&self) -> &Arc<KernelBank> {
        &self.bank
    }

    pub fn schedule(&self) -> &ParamSchedule {
        &self.schedule
    }

    pub fn output(&self) -> &MarginalField {
        self.caches.last().map_or(&self.initial, |c| c.output())
    }
}

/// Gradients of a scalar loss with respect to the unaries and every
/// parameter set in the schedule.
#[derive(Debug, Clone)]
pub struct RnnGrads {
    pub d_unary: Matrix,
    pub d_params: ParamSchedule,
}

fn check_forward(unary: &UnaryField, schedule: &ParamSchedule, iterations: usize) -> Result<()> {
    if iterations == 0 {
        return Err(CrfError::invalid(
            "at least one mean-field iteration is required",
        ));
    }
    schedule.validate()?;
    unary.values().ensure_finite("unaries")
}

/// Runs `iterations` mean-field updates from `softmax(U)` and records a tape.
pub fn crf_rnn_forward(
    unary: &UnaryField,
    bank: Arc<KernelBank>,
    schedule: &ParamSchedule,
    iterations: usize,
) -> Result<(MarginalField, Tape)> {
    check_forward(unary, schedule, iterations)?;
    let initial = init_softmax(unary);
    let mut caches: Vec<StageCache> = Vec::with_capacity(iterations);
    for t in 0..iterations {
        let q_in = caches.last().map_or(&initial, |c| c.output());
        let (_, cache) = mean_field_iteration(unary, q_in, &bank, schedule.for_iteration(t))?;
        caches.push(cache);
    }
    let tape = Tape {
        bank,
        initial,
        caches,
        schedule: schedule.clone(),
    };
    Ok((tape.output().clone(), tape))
}

/// Builds the kernel bank for `image` and runs [`crf_rnn_forward`].
pub fn crf_rnn_forward_image(
    unary: &UnaryField,
    image: &RgbImage,
    kernels: &[KernelSpec],
    schedule: &ParamSchedule,
    iterations: usize,
) -> Result<(MarginalField, Tape)> {
    let bank = Arc::new(KernelBank::build(image, kernels)?);
    crf_rnn_forward(unary, bank, schedule, iterations)
}

/// Backpropagation through time over a recorded forward pass.
pub fn crf_rnn_backward(tape: &Tape, d_y: &Matrix) -> Result<RnnGrads> {
    let (n, l) = tape.initial.values().shape();
    if d_y.shape() != (n, l) {
        return Err(CrfError::StaleCache(format!(
            "output gradient is {}x{}, tape recorded {n}x{l}",
            d_y.rows(),
            d_y.cols()
        )));
    }
    let mut d_params = tape.schedule.zeros_like();
    let mut d_unary = Matrix::zeros(n, l);
    let mut g = d_y.clone();
    for (t, cache) in tape.caches.iter().enumerate().rev() {
        let grads = mean_field_iteration_backward(cache, &tape.bank, &g)?;
        d_unary.add_scaled(1.0, &grads.d_unary);
        let idx = tape.schedule.index(t);
        d_params.sets_mut()[idx].add_scaled(1.0, &grads.d_params);
        g = grads.d_q_in;
    }
    d_unary.add_scaled(1.0, &softmax_backward(&tape.initial, &g)?);
    Ok(RnnGrads { d_unary, d_params })
}

/// Result of a tapeless forward pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub marginals: MarginalField,
    /// `max |Q(t) − Q(t−1)|` for t = 1..T, with `Q(0) = softmax(U)`.
    pub deltas: Vec<f64>,
}

/// Forward pass without a tape, for inference.
pub fn crf_rnn_infer(
    unary: &UnaryField,
    bank: &KernelBank,
    schedule: &ParamSchedule,
    iterations: usize,
) -> Result<Inference> {
    check_forward(unary, schedule, iterations)?;
    let mut q = init_softmax(unary);
    let mut deltas = Vec::with_capacity(iterations);
    for t in 0..iterations {
        let next = mean_field_step(unary, &q, bank, schedule.for_iteration(t))?;
        deltas.push(next.values().max_abs_diff(q.values()));
        q = next;
    }
    Ok(Inference {
        marginals: q,
        deltas,
    })
}
