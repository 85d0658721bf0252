//! Dense-CRF mean-field inference as a differentiable recurrence.
//!
//! The engine refines per-pixel label scores (unaries) from an independent
//! classifier into label distributions that respect image edges. Each
//! mean-field update filters the current marginals with Gaussian kernels over
//! position and color ([`lattice`]), mixes the results through learnable
//! kernel weights and a label compatibility matrix ([`meanfield`]), and the
//! updates are unrolled into a recurrence with backpropagation through time
//! ([`crf_rnn`]) so the CRF parameters can be trained ([`training`]).
//! [`oracle`] holds brute-force references for all of it.

pub mod config;
pub mod crf_rnn;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod lattice;
pub mod meanfield;
pub mod metrics;
pub mod oracle;
pub mod perf;
pub mod synth;
pub mod tensor;
pub mod training;

pub use config::RunConfig;
pub use crf_rnn::{
    crf_rnn_backward, crf_rnn_forward, crf_rnn_infer, ParamSchedule, RnnConfig, RnnGrads, Tape,
};
pub use error::{CrfError, Result};
pub use image::{LabelMap, RgbImage, DEFAULT_IGNORE_LABEL};
pub use lattice::{
    build_lattice, FeatureMatrix, LatticeValues, Normalization, PermutohedralLattice,
};
pub use meanfield::{CrfParams, KernelBank, KernelSpec, MarginalField, RawField, UnaryField};
pub use metrics::{mean_iu, ConfusionMatrix};
pub use tensor::Matrix;
pub use training::{Sample, TrainConfig};
