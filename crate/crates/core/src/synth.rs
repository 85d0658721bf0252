//! Synthetic segmentation data: colored shapes on a contrasting background
//! with noisy unaries.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CrfError, Result};
use crate::image::{LabelMap, RgbImage};
use crate::meanfield::UnaryField;
use crate::tensor::Matrix;
use crate::training::Sample;

const MIN_SIDE: usize = 4;
const COLOR_JITTER: i32 = 8;

/// `n_samples` two-label samples. See [`synth_dataset_with_labels`].
pub fn synth_dataset(
    seed: u64,
    n_samples: usize,
    height: usize,
    width: usize,
    noise_rate: f64,
) -> Result<Vec<Sample>> {
    synth_dataset_with_labels(seed, n_samples, height, width, noise_rate, 2)
}

/// Each sample holds one to three rectangles, ellipses or thin bars on a background
/// (label 0); every shape carries a label in `1..n_labels`. Unaries are
/// `ln(½·onehot(ℓ) + ½·r)` with `r` a random distribution, where `ℓ` is the
/// true label, swapped for a random wrong label with probability
/// `noise_rate`, so `argmax(U)` is wrong on about that fraction of pixels.
///
/// Sample `k` depends only on `seed` and `k`.
pub fn synth_dataset_with_labels(
    seed: u64,
    n_samples: usize,
    height: usize,
    width: usize,
    noise_rate: f64,
    n_labels: usize,
) -> Result<Vec<Sample>> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(CrfError::invalid(format!(
            "synthetic images need at least {MIN_SIDE}x{MIN_SIDE} pixels"
        )));
    }
    if n_samples == 0 {
        return Err(CrfError::invalid("at least one sample is required"));
    }
    if !(0.0..1.0).contains(&noise_rate) {
        return Err(CrfError::invalid("noise rate must lie in [0, 1)"));
    }
    if !(2..=255).contains(&n_labels) {
        return Err(CrfError::invalid("label count must lie in 2..=255"));
    }
    (0..n_samples)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            sample(&mut rng, height, width, noise_rate, n_labels)
        })
        .collect()
}

#[derive(PartialEq)]
enum Shape {
    Rectangle,
    Ellipse,
    // one or two pixels thick, easily smoothed away
    Bar,
}

fn contrasting(rng: &mut ChaCha8Rng, other: [u8; 3]) -> [u8; 3] {
    loop {
        let c: [u8; 3] = rng.gen();
        let dist: i32 = c
            .iter()
            .zip(&other)
            .map(|(&a, &b)| (i32::from(a) - i32::from(b)).abs())
            .sum();
        if dist >= 150 {
            return c;
        }
    }
}

fn sample(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    noise_rate: f64,
    n_labels: usize,
) -> Result<Sample> {
    let background: [u8; 3] = rng.gen();
    let mut colors = vec![background; h * w];
    let mut labels = vec![0u8; h * w];
    for _ in 0..rng.gen_range(1..=3) {
        let label = rng.gen_range(1..n_labels) as u8;
        let color = contrasting(rng, background);
        let shape = match rng.gen_range(0..3) {
            0 => Shape::Rectangle,
            1 => Shape::Ellipse,
            _ => Shape::Bar,
        };
        let (sw, sh) = match shape {
            Shape::Bar if rng.gen_bool(0.5) => (rng.gen_range(1..=2), rng.gen_range(h / 2..=h - 2)),
            Shape::Bar => (rng.gen_range(w / 2..=w - 2), rng.gen_range(1..=2)),
            _ => (
                rng.gen_range(w / 5..=w / 2).max(2),
                rng.gen_range(h / 5..=h / 2).max(2),
            ),
        };
        let (x0, y0) = (rng.gen_range(0..=w - sw), rng.gen_range(0..=h - sh));
        let ellipse = shape == Shape::Ellipse;
        let (cx, cy) = (x0 as f64 + sw as f64 / 2.0, y0 as f64 + sh as f64 / 2.0);
        let (rx, ry) = (sw as f64 / 2.0, sh as f64 / 2.0);
        for y in y0..y0 + sh {
            for x in x0..x0 + sw {
                let inside = !ellipse || {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                };
                if inside {
                    colors[y * w + x] = color;
                    labels[y * w + x] = label;
                }
            }
        }
    }

    let mut bytes = Vec::with_capacity(h * w * 3);
    for c in &colors {
        for &v in c {
            let jitter = rng.gen_range(-COLOR_JITTER..=COLOR_JITTER);
            bytes.push((i32::from(v) + jitter).clamp(0, 255) as u8);
        }
    }

    let mut u = Matrix::zeros(h * w, n_labels);
    let mut r = vec![0.0; n_labels];
    for (i, &gt) in labels.iter().enumerate() {
        let mut noisy = usize::from(gt);
        if rng.gen_bool(noise_rate) {
            noisy = (noisy + rng.gen_range(1..n_labels)) % n_labels;
        }
        r.iter_mut().for_each(|x| *x = rng.gen::<f64>());
        let z: f64 = r.iter().sum();
        for (l, out) in u.row_mut(i).iter_mut().enumerate() {
            let onehot = if l == noisy { 1.0 } else { 0.0 };
            *out = (0.5 * onehot + 0.5 * r[l] / z).ln();
        }
    }

    Sample::new(
        RgbImage::new(w, h, bytes)?,
        UnaryField::new(h, w, u)?,
        LabelMap::new(w, h, labels)?,
    )
}
