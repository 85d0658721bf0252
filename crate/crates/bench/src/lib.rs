//! Fixtures shared by the benchmarks.

use crfrnn_core::meanfield::default_kernels;
use crfrnn_core::perf::random_image;
use crfrnn_core::training::init_params;
use crfrnn_core::{KernelBank, KernelSpec, Matrix, ParamSchedule, RgbImage, UnaryField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Label count of the PASCAL VOC setting.
pub const LABELS: usize = 21;

pub fn kernel_specs() -> Vec<KernelSpec> {
    default_kernels().into_iter().map(|(k, _)| k).collect()
}

pub fn image(side: usize) -> RgbImage {
    random_image(side, side, 7).expect("valid size")
}

pub fn unary(side: usize, labels: usize) -> UnaryField {
    let mut r = ChaCha8Rng::seed_from_u64(side as u64);
    let u = Matrix::from_fn(side * side, labels, |_, _| r.gen_range(-3.0..3.0));
    UnaryField::new(side, side, u).expect("valid unaries")
}

pub fn values(n: usize, channels: usize) -> Matrix {
    let mut r = ChaCha8Rng::seed_from_u64(n as u64 ^ 0x5eed);
    Matrix::from_fn(n, channels, |_, _| r.gen())
}

pub fn bank(side: usize) -> KernelBank {
    KernelBank::build(&image(side), &kernel_specs()).expect("valid kernels")
}

pub fn potts(labels: usize) -> ParamSchedule {
    let weights: Vec<f64> = default_kernels().into_iter().map(|(_, w)| w).collect();
    ParamSchedule::Shared(init_params(labels, &weights).expect("valid weights"))
}
