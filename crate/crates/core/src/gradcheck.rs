//! Finite-difference check of the unrolled network's gradients under the
//! softmax loss.

use std::sync::Arc;

use crate::crf_rnn::{crf_rnn_backward, crf_rnn_forward, ParamSchedule};
use crate::error::Result;
use crate::image::LabelMap;
use crate::meanfield::{KernelBank, UnaryField};
use crate::oracle::{finite_difference_gradients, max_relative_error};
use crate::tensor::Matrix;
use crate::training::softmax_loss;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    pub iterations: usize,
    pub loss: f64,
    /// [`max_relative_error`] of `∂L/∂U` against central differences.
    pub unary_error: f64,
    /// Same for every parameter set, flattened.
    pub params_error: f64,
    pub unary_grad_norm: f64,
    pub params_grad_norm: f64,
}

impl GradientReport {
    pub fn max_error(&self) -> f64 {
        self.unary_error.max(self.params_error)
    }
}

/// Compares backpropagated gradients of the softmax loss after `iterations`
/// mean-field updates with central differences of step `epsilon`.
pub fn check_gradients(
    unary: &UnaryField,
    bank: Arc<KernelBank>,
    schedule: &ParamSchedule,
    ground_truth: &LabelMap,
    iterations: usize,
    epsilon: f64,
    ignore_label: u8,
) -> Result<GradientReport> {
    let (h, w) = (unary.height(), unary.width());
    let (n, l) = unary.values().shape();
    let loss_of = |u: &UnaryField, s: &ParamSchedule| -> Result<f64> {
        let (y, _) = crf_rnn_forward(u, bank.clone(), s, iterations)?;
        Ok(softmax_loss(&y, ground_truth, ignore_label)?.0)
    };

    let (y, tape) = crf_rnn_forward(unary, bank.clone(), schedule, iterations)?;
    let (loss, d_y) = softmax_loss(&y, ground_truth, ignore_label)?;
    let grads = crf_rnn_backward(&tape, &d_y)?;

    let fd_u = finite_difference_gradients(
        |x| {
            let u = UnaryField::new(h, w, Matrix::from_vec(n, l, x.to_vec())?)?;
            loss_of(&u, schedule)
        },
        unary.values().as_slice(),
        epsilon,
    )?;
    let fd_p = finite_difference_gradients(
        |x| loss_of(unary, &schedule.from_flat_like(x)?),
        &schedule.to_flat(),
        epsilon,
    )?;
    let d_p = grads.d_params.to_flat();
    Ok(GradientReport {
        iterations,
        loss,
        unary_error: max_relative_error(grads.d_unary.as_slice(), &fd_u),
        params_error: max_relative_error(&d_p, &fd_p),
        unary_grad_norm: grads.d_unary.norm(),
        params_grad_norm: d_p.iter().map(|x| x * x).sum::<f64>().sqrt(),
    })
}
