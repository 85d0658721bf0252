//! One mean-field update for a dense CRF with Gaussian pairwise potentials,
//! broken into differentiable stages:
//!
//! 1. initialization, `Q ← softmax(U)` ([`init_softmax`])
//! 2. message passing through M Gaussian filters ([`message_passing`])
//! 3. class-specific weighting of the filter outputs ([`weight_filter_outputs`])
//! 4. compatibility transform with `µ` ([`compatibility_transform`])
//! 5. adding the unaries, `Q̆ = U − Q̂` ([`add_unary`])
//! 6. normalization, `Q ← softmax(Q̆)` ([`normalize`])
//!
//! Stages 2–6 make up [`mean_field_iteration`]; its [`StageCache`] keeps what
//! [`mean_field_iteration_backward`] needs.

mod fields;
mod stages;

pub use fields::{
    build_kernel_features, CrfParams, KernelSpec, MarginalField, RawField, UnaryField,
};
pub use stages::{
    add_unary, add_unary_backward, compatibility_transform, compatibility_transform_backward,
    init_softmax, message_passing, message_passing_backward, normalize, softmax_backward,
    weight_filter_outputs, weight_filter_outputs_backward, KernelBank, MessageFilter,
};

use crate::error::{CrfError, Result};
use crate::tensor::Matrix;

/// Default spatial bandwidth θγ, in pixels.
pub const DEFAULT_THETA_GAMMA: f64 = 3.0;
/// Default spatial bandwidth of the bilateral kernel θα, in pixels.
pub const DEFAULT_THETA_ALPHA: f64 = 80.0;
/// Default color bandwidth of the bilateral kernel θβ, in intensity units.
pub const DEFAULT_THETA_BETA: f64 = 13.0;
/// Initial weight of the spatial kernel.
pub const DEFAULT_SPATIAL_WEIGHT: f64 = 3.0;
/// Initial weight of the bilateral kernel.
pub const DEFAULT_BILATERAL_WEIGHT: f64 = 5.0;

/// The default kernel pair: one spatial and one bilateral kernel, with
/// their initial weights.
pub fn default_kernels() -> Vec<(KernelSpec, f64)> {
    vec![
        (
            KernelSpec::Spatial {
                theta_gamma: DEFAULT_THETA_GAMMA,
            },
            DEFAULT_SPATIAL_WEIGHT,
        ),
        (
            KernelSpec::Bilateral {
                theta_alpha: DEFAULT_THETA_ALPHA,
                theta_beta: DEFAULT_THETA_BETA,
            },
            DEFAULT_BILATERAL_WEIGHT,
        ),
    ]
}

/// Intermediates of one forward iteration.
#[derive(Debug, Clone)]
pub struct StageCache {
    msgs: Vec<RawField>,
    q_check: RawField,
    q_out: MarginalField,
    params: CrfParams,
}

impl StageCache {
    pub fn output(&self) -> &MarginalField {
        &self.q_out
    }

    pub fn filter_outputs(&self) -> &[RawField] {
        &self.msgs
    }

    pub fn params(&self) -> &CrfParams {
        &self.params
    }
}

/// Gradients produced by [`mean_field_iteration_backward`].
#[derive(Debug, Clone)]
pub struct IterationGrads {
    pub d_unary: Matrix,
    pub d_q_in: Matrix,
    pub d_params: CrfParams,
}

fn check_inputs(
    unary: &UnaryField,
    q_in: &MarginalField,
    bank: &KernelBank,
    params: &CrfParams,
) -> Result<()> {
    if q_in.values().shape() != unary.values().shape() {
        return Err(CrfError::shape("marginals and unaries differ in shape"));
    }
    if (unary.height(), unary.width()) != (bank.height(), bank.width()) {
        return Err(CrfError::shape(format!(
            "unaries are {}x{}, kernels were built for {}x{}",
            unary.height(),
            unary.width(),
            bank.height(),
            bank.width()
        )));
    }
    params.ensure_matches(unary.n_labels(), bank.n_kernels())
}

/// `Q_out = f_θ(U, Q_in, I)`, one full mean-field update.
pub fn mean_field_iteration(
    unary: &UnaryField,
    q_in: &MarginalField,
    bank: &KernelBank,
    params: &CrfParams,
) -> Result<(MarginalField, StageCache)> {
    check_inputs(unary, q_in, bank, params)?;
    let msgs = message_passing(q_in, bank)?;
    let q_check = weight_filter_outputs(&msgs, &params.weights)?;
    let q_hat = compatibility_transform(&q_check, &params.compatibility)?;
    let q_breve = add_unary(unary, &q_hat)?;
    let q_out = normalize(unary.height(), unary.width(), &q_breve)?;
    let cache = StageCache {
        msgs,
        q_check,
        q_out: q_out.clone(),
        params: params.clone(),
    };
    Ok((q_out, cache))
}

/// Same as [`mean_field_iteration`] without keeping the intermediates.
pub fn mean_field_step(
    unary: &UnaryField,
    q_in: &MarginalField,
    bank: &KernelBank,
    params: &CrfParams,
) -> Result<MarginalField> {
    check_inputs(unary, q_in, bank, params)?;
    let msgs = message_passing(q_in, bank)?;
    let q_check = weight_filter_outputs(&msgs, &params.weights)?;
    let q_hat = compatibility_transform(&q_check, &params.compatibility)?;
    let q_breve = add_unary(unary, &q_hat)?;
    normalize(unary.height(), unary.width(), &q_breve)
}

/// Backward through one iteration, chaining the stage backwards in reverse.
pub fn mean_field_iteration_backward(
    cache: &StageCache,
    bank: &KernelBank,
    d_q_out: &Matrix,
) -> Result<IterationGrads> {
    let (n, l) = cache.q_out.values().shape();
    if d_q_out.shape() != (n, l) {
        return Err(CrfError::StaleCache(format!(
            "output gradient is {}x{}, cached iteration produced {n}x{l}",
            d_q_out.rows(),
            d_q_out.cols()
        )));
    }
    if bank.n_pixels() != n || bank.n_kernels() != cache.msgs.len() {
        return Err(CrfError::StaleCache(
            "kernel bank does not match the cached iteration".into(),
        ));
    }
    let d_breve = softmax_backward(&cache.q_out, d_q_out)?;
    let (d_unary, d_hat) = add_unary_backward(&d_breve);
    let (d_check, d_mu) =
        compatibility_transform_backward(&cache.q_check, &cache.params.compatibility, &d_hat)?;
    let (d_msgs, d_weights) =
        weight_filter_outputs_backward(&cache.msgs, &cache.params.weights, &d_check)?;
    let d_q_in = message_passing_backward(bank, &d_msgs)?;
    Ok(IterationGrads {
        d_unary,
        d_q_in,
        d_params: CrfParams {
            weights: d_weights,
            compatibility: d_mu,
        },
    })
}
