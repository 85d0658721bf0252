//! Brute-force reference implementations used to validate the fast paths.
//!
//! Nothing here calls into the lattice or the mean-field stage code: the
//! kernels are evaluated exactly, pair by pair, and mean-field is run as the
//! literal textbook update. Everything is O(N²) and guarded by
//! [`ORACLE_MAX_POINTS`].

use crate::error::{CrfError, Result};
use crate::image::{LabelMap, RgbImage};
use crate::lattice::{FeatureMatrix, Normalization};
use crate::meanfield::{CrfParams, KernelSpec, MarginalField, UnaryField};
use crate::tensor::Matrix;

/// Largest instance the oracles accept.
pub const ORACLE_MAX_POINTS: usize = 4096;

/// Agreement bound between the lattice filter and the exact filter, as
/// measured by [`relative_l2_error`] with symmetric normalization on
/// non-negative inputs. Also bounds self-excluded messages, measured on the
/// scale of the full filter output. Calibrated on 8×8 to 24×24 random-color
/// images, 40 seeds, spatial and bilateral bandwidths (worst filter 0.145,
/// worst message 0.162) and frozen.
pub const FILTER_TOLERANCE: f64 = 0.18;

/// Agreement bound between fast mean-field inference and
/// [`reference_mean_field`], measured by [`relative_l2_error`] on the
/// marginals. Calibrated on 8×8 random-color images, 40 seeds, default
/// bandwidths with both kernel weights 3 and Potts µ, up to 10 iterations
/// (worst 0.064), and frozen. Stronger coupling amplifies the per-filter
/// error over iterations: with the default weights (3 and 5) one iteration
/// stays inside the bound but ten can reach about 0.16.
pub const MEAN_FIELD_TOLERANCE: f64 = 0.08;

/// Largest relative L2 error over channels:
/// `max_c ‖approx[:, c] − exact[:, c]‖ / ‖exact[:, c]‖`.
pub fn relative_l2_error(approx: &Matrix, exact: &Matrix) -> f64 {
    assert_eq!(approx.shape(), exact.shape());
    (0..exact.cols())
        .map(|c| {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..exact.rows() {
                num += (approx.get(i, c) - exact.get(i, c)).powi(2);
                den += exact.get(i, c).powi(2);
            }
            if den == 0.0 {
                if num == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (num / den).sqrt()
            }
        })
        .fold(0.0, f64::max)
}

fn guard(points: usize) -> Result<()> {
    if points > ORACLE_MAX_POINTS {
        return Err(CrfError::SizeGuard {
            points,
            limit: ORACLE_MAX_POINTS,
        });
    }
    Ok(())
}

#[inline]
fn gaussian(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-0.5 * sq).exp()
}

/// The exact kernel matrix `K(i, j) = exp(−½‖fᵢ − fⱼ‖²)`.
#[derive(Debug, Clone)]
pub struct DenseKernelMatrix {
    k: Matrix,
}

impl DenseKernelMatrix {
    pub fn new(features: &FeatureMatrix) -> Result<Self> {
        let n = features.n_points();
        guard(n)?;
        let mut k = Matrix::zeros(n, n);
        for i in 0..n {
            k.set(i, i, 1.0);
            for j in 0..i {
                let v = gaussian(features.point(i), features.point(j));
                k.set(i, j, v);
                k.set(j, i, v);
            }
        }
        Ok(Self { k })
    }

    pub fn n_points(&self) -> usize {
        self.k.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.k.get(i, j)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.k
    }

    /// `K · values`
    pub fn apply(&self, values: &Matrix) -> Result<Matrix> {
        values.ensure_shape(self.n_points(), values.cols(), "kernel matrix product")?;
        let n = self.n_points();
        let c = values.cols();
        let mut out = Matrix::zeros(n, c);
        for i in 0..n {
            let krow = self.k.row(i);
            let orow = out.row_mut(i);
            for (j, &kij) in krow.iter().enumerate() {
                for (o, v) in orow.iter_mut().zip(values.row(j)) {
                    *o += kij * v;
                }
            }
        }
        Ok(out)
    }
}

/// Exact Gaussian filtering `K · values` with the same normalization
/// semantics as the lattice filter: `Symmetric` gives
/// `D^-½ K D^-½ values`, `D = diag(K · 1)`.
pub fn brute_force_gaussian_filter(
    features: &FeatureMatrix,
    values: &Matrix,
    normalization: Normalization,
) -> Result<Matrix> {
    let n = features.n_points();
    guard(n)?;
    if values.rows() != n {
        return Err(CrfError::shape(format!(
            "{} value rows for {n} feature points",
            values.rows()
        )));
    }
    values.ensure_finite("oracle filter input")?;
    let c = values.cols();
    let scale: Vec<f64> = match normalization {
        Normalization::None => vec![1.0; n],
        Normalization::Symmetric => (0..n)
            .map(|i| {
                let d: f64 = (0..n)
                    .map(|j| gaussian(features.point(i), features.point(j)))
                    .sum();
                d.sqrt().recip()
            })
            .collect(),
    };
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        let fi = features.point(i);
        let mut acc = vec![0.0; c];
        for j in 0..n {
            let w = gaussian(fi, features.point(j)) * scale[j];
            for (a, v) in acc.iter_mut().zip(values.row(j)) {
                *a += w * v;
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(acc) {
            *o = a * scale[i];
        }
    }
    Ok(out)
}

fn pixel_features(image: &RgbImage, spec: &KernelSpec) -> Vec<Vec<f64>> {
    let w = image.width();
    (0..image.n_pixels())
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            match *spec {
                KernelSpec::Spatial { theta_gamma } => vec![x / theta_gamma, y / theta_gamma],
                KernelSpec::Bilateral {
                    theta_alpha,
                    theta_beta,
                } => {
                    let [r, g, b] = image.pixel(i);
                    vec![
                        x / theta_alpha,
                        y / theta_alpha,
                        r as f64 / theta_beta,
                        g as f64 / theta_beta,
                        b as f64 / theta_beta,
                    ]
                }
            }
        })
        .collect()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    for v in row.iter_mut() {
        *v = (*v - max).exp() / z;
    }
}

/// Mean-field inference run literally: `T` updates with exact kernels and an
/// explicit `j ≠ i` sum, using symmetric kernel normalization to match the
/// fast path.
pub fn reference_mean_field(
    unary: &UnaryField,
    image: &RgbImage,
    params: &CrfParams,
    kernels: &[KernelSpec],
    iterations: usize,
) -> Result<MarginalField> {
    let n = unary.n_pixels();
    let l = unary.n_labels();
    guard(n)?;
    if image.n_pixels() != n {
        return Err(CrfError::shape("image and unaries differ in pixel count"));
    }
    if params.weights.shape() != (l, kernels.len()) || params.compatibility.shape() != (l, l) {
        return Err(CrfError::shape(
            "parameters do not match labels and kernels",
        ));
    }
    for k in kernels {
        k.validate()?;
    }

    // Normalized kernel matrices with a zeroed diagonal.
    let mut normalized = Vec::with_capacity(kernels.len());
    for spec in kernels {
        let f = pixel_features(image, spec);
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = gaussian(&f[i], &f[j]);
            }
        }
        let deg: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum()).collect();
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = if i == j {
                    0.0
                } else {
                    k[i * n + j] / (deg[i] * deg[j]).sqrt()
                };
            }
        }
        normalized.push(k);
    }

    let u = unary.values();
    let mut q: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = u.row(i).to_vec();
            softmax_in_place(&mut row);
            row
        })
        .collect();

    for _ in 0..iterations {
        let mut next = vec![vec![0.0; l]; n];
        for i in 0..n {
            // Σₘ w(l, m) Σ_{j≠i} k̃⁽ᵐ⁾(i, j) Q(j, l)
            let mut weighted = vec![0.0; l];
            for (m, k) in normalized.iter().enumerate() {
                for lab in 0..l {
                    let mut s = 0.0;
                    for j in 0..n {
                        if j != i {
                            s += k[i * n + j] * q[j][lab];
                        }
                    }
                    weighted[lab] += params.weights.get(lab, m) * s;
                }
            }
            for lab in 0..l {
                let penalty: f64 = (0..l)
                    .map(|lp| params.compatibility.get(lab, lp) * weighted[lp])
                    .sum();
                next[i][lab] = u.get(i, lab) - penalty;
            }
            softmax_in_place(&mut next[i]);
        }
        q = next;
    }

    let flat: Vec<f64> = q.into_iter().flatten().collect();
    MarginalField::new(unary.height(), unary.width(), Matrix::from_vec(n, l, flat)?)
}

/// Gradient-check bound on [`max_relative_error`].
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Entries smaller than this in both gradients are compared absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-8;

/// `max |a − b| / max(|a|, |b|, GRADIENT_FLOOR)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(GRADIENT_FLOOR))
        .fold(0.0, f64::max)
}

/// Central finite-difference gradient of `loss` at `theta`.
pub fn finite_difference_gradients<F>(mut loss: F, theta: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(CrfError::invalid("finite-difference step must be positive"));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        probe[k] = theta[k] + epsilon;
        let plus = loss(&probe)?;
        probe[k] = theta[k] - epsilon;
        let minus = loss(&probe)?;
        probe[k] = theta[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CrfError::NonFinite("finite-difference loss"));
        }
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(grad)
}

/// Gibbs energy of a labeling:
/// `E(x) = Σᵢ −U(i, xᵢ) + Σ_{i<j} ψ(xᵢ, xⱼ)`, with exact, unnormalized
/// Gaussian kernels.
///
/// The pairwise term for an unordered pair is the mean of the two directed
/// terms `µ(xᵢ, xⱼ) Σₘ w(xⱼ, m) k⁽ᵐ⁾ᵢⱼ`, which reduces to
/// `µ(xᵢ, xⱼ) Σₘ wₘ k⁽ᵐ⁾ᵢⱼ` when the weights are shared across classes.
pub fn labeling_energy(
    labels: &LabelMap,
    unary: &UnaryField,
    image: &RgbImage,
    params: &CrfParams,
    kernels: &[KernelSpec],
) -> Result<f64> {
    let n = unary.n_pixels();
    let l = unary.n_labels();
    guard(n)?;
    if labels.len() != n || image.n_pixels() != n {
        return Err(CrfError::shape(
            "labels, image and unaries differ in pixel count",
        ));
    }
    if params.weights.shape() != (l, kernels.len()) || params.compatibility.shape() != (l, l) {
        return Err(CrfError::shape(
            "parameters do not match labels and kernels",
        ));
    }
    if let Some(bad) = labels.labels().iter().find(|&&x| x as usize >= l) {
        return Err(CrfError::invalid(format!("label {bad} out of range")));
    }
    let feats: Vec<Vec<Vec<f64>>> = kernels.iter().map(|k| pixel_features(image, k)).collect();
    let x = labels.labels();
    let mut energy: f64 = (0..n).map(|i| -unary.values().get(i, x[i] as usize)).sum();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (x[i] as usize, x[j] as usize);
            let mut toward_j = 0.0;
            let mut toward_i = 0.0;
            for (m, f) in feats.iter().enumerate() {
                let k = gaussian(&f[i], &f[j]);
                toward_j += params.weights.get(b, m) * k;
                toward_i += params.weights.get(a, m) * k;
            }
            energy += 0.5
                * (params.compatibility.get(a, b) * toward_j
                    + params.compatibility.get(b, a) * toward_i);
        }
    }
    Ok(energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn two_identical_points_symmetric() {
        let f = FeatureMatrix::new(2, 3, vec![0.5, 1.0, -1.0, 0.5, 1.0, -1.0]).unwrap();
        let v = Matrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let out = brute_force_gaussian_filter(&f, &v, Normalization::Symmetric).unwrap();
        // K = [[1,1],[1,1]], D = 2: each output row is (1, 0) again
        for i in 0..2 {
            assert!((out.get(i, 0) - 1.0).abs() < 1e-15);
            assert_eq!(out.get(i, 1), 0.0);
        }
        let single = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let out = brute_force_gaussian_filter(&f, &single, Normalization::Symmetric).unwrap();
        assert!((out.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((out.get(1, 0) - 0.5).abs() < 1e-15);
        let raw = brute_force_gaussian_filter(&f, &single, Normalization::None).unwrap();
        assert_eq!(raw.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn single_point_is_identity() {
        let f = FeatureMatrix::new(1, 5, vec![3.0; 5]).unwrap();
        let v = Matrix::from_vec(1, 3, vec![0.2, -1.0, 4.0]).unwrap();
        for norm in [Normalization::None, Normalization::Symmetric] {
            let out = brute_force_gaussian_filter(&f, &v, norm).unwrap();
            assert_eq!(out, v);
        }
    }

    #[test]
    fn matches_dense_matrix_product() {
        let f = random_features(50, 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = Matrix::from_fn(50, 2, |_, _| rng.gen_range(-1.0..1.0));
        let fast = brute_force_gaussian_filter(&f, &v, Normalization::None).unwrap();
        let dense = DenseKernelMatrix::new(&f).unwrap().apply(&v).unwrap();
        assert!(fast.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn kernel_matrix_symmetric_unit_diagonal() {
        let k = DenseKernelMatrix::new(&random_features(30, 5, 1)).unwrap();
        for i in 0..30 {
            assert_eq!(k.get(i, i), 1.0);
            for j in 0..30 {
                assert_eq!(k.get(i, j), k.get(j, i));
                assert!(k.get(i, j) > 0.0 && k.get(i, j) <= 1.0);
            }
        }
    }

    #[test]
    fn size_guard_is_an_error() {
        let f =
            FeatureMatrix::new(ORACLE_MAX_POINTS + 1, 1, vec![0.0; ORACLE_MAX_POINTS + 1]).unwrap();
        let v = Matrix::zeros(ORACLE_MAX_POINTS + 1, 1);
        assert!(matches!(
            brute_force_gaussian_filter(&f, &v, Normalization::None),
            Err(CrfError::SizeGuard { .. })
        ));
    }

    #[test]
    fn finite_differences_of_closed_forms() {
        let theta = [0.3, -1.2, 2.5];
        let g = finite_difference_gradients(
            |t| Ok(0.5 * t.iter().map(|x| x * x).sum::<f64>()),
            &theta,
            1e-4,
        )
        .unwrap();
        for (a, b) in g.iter().zip(&theta) {
            assert!((a - b).abs() < 1e-8);
        }
        let coef = [2.0, -3.0, 0.5];
        for eps in [1e-6, 1e-2, 1.0] {
            let g = finite_difference_gradients(
                |t| Ok(t.iter().zip(&coef).map(|(x, c)| x * c).sum()),
                &theta,
                eps,
            )
            .unwrap();
            for (a, b) in g.iter().zip(&coef) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(finite_difference_gradients(|_| Ok(1.0), &theta, 0.0).is_err());
        assert!(finite_difference_gradients(|_| Ok(f64::NAN), &theta, 1e-3).is_err());
    }

    fn potts(l: usize) -> Matrix {
        Matrix::from_fn(l, l, |a, b| if a == b { 0.0 } else { 1.0 })
    }

    #[test]
    fn energy_single_pixel_and_zero_mu() {
        let img = RgbImage::filled(1, 1, [10, 20, 30]).unwrap();
        let u =
            UnaryField::new(1, 1, Matrix::from_vec(1, 3, vec![0.1, -0.7, 2.0]).unwrap()).unwrap();
        let kernels = [KernelSpec::Spatial { theta_gamma: 3.0 }];
        let params = CrfParams::new(Matrix::filled(3, 1, 2.0), potts(3)).unwrap();
        let lm = LabelMap::new(1, 1, vec![1]).unwrap();
        let e = labeling_energy(&lm, &u, &img, &params, &kernels).unwrap();
        assert_eq!(e, 0.7);

        let img = RgbImage::filled(2, 2, [0, 0, 0]).unwrap();
        let u = UnaryField::new(2, 2, Matrix::from_fn(4, 2, |i, l| (i + 2 * l) as f64)).unwrap();
        let params = CrfParams::new(Matrix::filled(2, 1, 1.0), Matrix::zeros(2, 2)).unwrap();
        let lm = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let e = labeling_energy(&lm, &u, &img, &params, &kernels).unwrap();
        assert_eq!(e, -(0.0 + 3.0 + 4.0 + 3.0));
    }

    #[test]
    fn energy_potts_gap_for_identical_pixels() {
        let img = RgbImage::filled(2, 1, [50, 50, 50]).unwrap();
        let u = UnaryField::new(
            1,
            2,
            Matrix::from_vec(2, 2, vec![0.3, 0.1, -0.2, 0.4]).unwrap(),
        )
        .unwrap();
        // large bandwidths make the two pixels (nearly) identical in feature space
        let kernels = [
            KernelSpec::Spatial { theta_gamma: 1e6 },
            KernelSpec::Bilateral {
                theta_alpha: 1e6,
                theta_beta: 13.0,
            },
        ];
        let w = [3.0, 5.0];
        let params = CrfParams::new(Matrix::from_fn(2, 2, |_, m| w[m]), potts(2)).unwrap();
        let same = LabelMap::new(2, 1, vec![0, 0]).unwrap();
        let diff = LabelMap::new(2, 1, vec![0, 1]).unwrap();
        let e_same = labeling_energy(&same, &u, &img, &params, &kernels).unwrap();
        let e_diff = labeling_energy(&diff, &u, &img, &params, &kernels).unwrap();
        let k = (-0.5 * (1e-6f64).powi(2)).exp();
        // unary part: −U₀(0) − U₁(1) versus −U₀(0) − U₁(0)
        let unary_delta = -0.6;
        assert!(((e_diff - e_same) - (unary_delta + (w[0] + w[1]) * k)).abs() < 1e-12);
    }

    #[test]
    fn reference_mean_field_degenerate_cases() {
        let img = RgbImage::filled(3, 2, [1, 2, 3]).unwrap();
        let u = UnaryField::new(
            2,
            3,
            Matrix::from_fn(6, 3, |i, l| ((i * 7 + l * 3) % 5) as f64),
        )
        .unwrap();
        let kernels = [KernelSpec::Spatial { theta_gamma: 2.0 }];
        let zero = CrfParams::zeros(3, 1);
        let q = reference_mean_field(&u, &img, &zero, &kernels, 4).unwrap();
        for i in 0..6 {
            let mut row = u.values().row(i).to_vec();
            softmax_in_place(&mut row);
            for l in 0..3 {
                assert!((q.values().get(i, l) - row[l]).abs() < 1e-15);
            }
        }

        let img = RgbImage::filled(1, 1, [9, 9, 9]).unwrap();
        let u =
            UnaryField::new(1, 1, Matrix::from_vec(1, 2, vec![2f64.ln(), 0.0]).unwrap()).unwrap();
        let params = CrfParams::new(Matrix::filled(2, 1, 4.0), potts(2)).unwrap();
        let q = reference_mean_field(&u, &img, &params, &kernels, 3).unwrap();
        assert!((q.values().get(0, 0) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn reference_mean_field_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bytes: Vec<u8> = (0..8 * 8 * 3).map(|_| rng.gen()).collect();
        let img = RgbImage::new(8, 8, bytes).unwrap();
        let u = UnaryField::new(
            8,
            8,
            Matrix::from_fn(64, 4, |_, _| rng.gen_range(-2.0..2.0)),
        )
        .unwrap();
        let kernels = [
            KernelSpec::Spatial { theta_gamma: 3.0 },
            KernelSpec::Bilateral {
                theta_alpha: 5.0,
                theta_beta: 40.0,
            },
        ];
        let params = CrfParams::new(Matrix::filled(4, 2, 3.0), potts(4)).unwrap();
        let q = reference_mean_field(&u, &img, &params, &kernels, 5).unwrap();
        for row in q.values().row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
