//! Wall-clock measurements of the lattice filter across image sizes.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CrfError, Result};
use crate::image::RgbImage;
use crate::lattice::{Normalization, PermutohedralLattice};
use crate::meanfield::{build_kernel_features, KernelSpec};
use crate::tensor::Matrix;

pub fn random_image(width: usize, height: usize, seed: u64) -> Result<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::new(
        width,
        height,
        (0..width * height * 3).map(|_| rng.gen()).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterTiming {
    pub n_pixels: usize,
    /// Lattice construction.
    pub build: Duration,
    /// Best of the repeated filter runs, lattice already built.
    pub filter: Duration,
}

/// Times lattice construction plus filtering of `channels` values on a
/// random `side × side` image, for each side length.
pub fn filter_scaling(
    sides: &[usize],
    spec: &KernelSpec,
    channels: usize,
    repeat: usize,
    seed: u64,
) -> Result<Vec<FilterTiming>> {
    if repeat == 0 {
        return Err(CrfError::invalid("repeat must be at least 1"));
    }
    let mut out = Vec::with_capacity(sides.len());
    for &side in sides {
        let img = random_image(side, side, seed)?;
        let features = build_kernel_features(&img, spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ side as u64);
        let values = Matrix::from_fn(side * side, channels, |_, _| rng.gen());
        let t = Instant::now();
        let lattice = PermutohedralLattice::build(&features)?;
        let build = t.elapsed();
        let mut best = Duration::MAX;
        for _ in 0..repeat {
            let t = Instant::now();
            let r = lattice.gaussian_filter(&values, false, Normalization::Symmetric)?;
            best = best.min(t.elapsed());
            std::hint::black_box(r);
        }
        out.push(FilterTiming {
            n_pixels: side * side,
            build,
            filter: best,
        });
    }
    Ok(out)
}

/// Least-squares line `y = slope·x + intercept` and its R².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(CrfError::invalid(
            "a line fit needs at least two paired points",
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(CrfError::invalid("line fit needs distinct x values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Line fit of total filter time (build plus one filter) against pixel count.
pub fn fit_timings(timings: &[FilterTiming]) -> Result<LinearFit> {
    let xs: Vec<f64> = timings.iter().map(|t| t.n_pixels as f64).collect();
    let ys: Vec<f64> = timings
        .iter()
        .map(|t| (t.build + t.filter).as_secs_f64())
        .collect();
    linear_fit(&xs, &ys)
}
