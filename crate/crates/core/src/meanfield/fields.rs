use crate::error::{CrfError, Result};
use crate::image::RgbImage;
use crate::lattice::FeatureMatrix;
use crate::tensor::Matrix;

/// Unnormalized per-pixel label scores, the intermediates between the two
/// softmax stages of an iteration.
pub type RawField = Matrix;

/// Negative unary energies `U(i, l)`, one row per pixel (row-major), one
/// column per label.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    height: usize,
    width: usize,
    values: Matrix,
}

impl UnaryField {
    pub fn new(height: usize, width: usize, values: Matrix) -> Result<Self> {
        if values.rows() != height * width || height == 0 || width == 0 {
            return Err(CrfError::shape(format!(
                "unary field with {} rows does not cover a {height}x{width} image",
                values.rows()
            )));
        }
        if values.cols() < 2 {
            return Err(CrfError::invalid("a unary field needs at least two labels"));
        }
        values.ensure_finite("unary field")?;
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_pixels(&self) -> usize {
        self.values.rows()
    }

    pub fn n_labels(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    /// Per-pixel argmax; ties go to the lowest label index.
    pub fn argmax(&self) -> Vec<u8> {
        argmax_rows(&self.values)
    }
}

/// Per-pixel label distributions `Q(i, l)`. Every row is a probability
/// vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    height: usize,
    width: usize,
    values: Matrix,
}

impl MarginalField {
    /// Wraps `values`, checking that every row is a distribution.
    pub fn new(height: usize, width: usize, values: Matrix) -> Result<Self> {
        if values.rows() != height * width {
            return Err(CrfError::shape(format!(
                "marginal field with {} rows does not cover a {height}x{width} image",
                values.rows()
            )));
        }
        for (i, row) in values.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&q| !(0.0..=1.0).contains(&q)) || (sum - 1.0).abs() > 1e-5 {
                return Err(CrfError::invalid(format!(
                    "row {i} of a marginal field is not a distribution"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub(crate) fn new_unchecked(height: usize, width: usize, values: Matrix) -> Self {
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_pixels(&self) -> usize {
        self.values.rows()
    }

    pub fn n_labels(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    /// Per-pixel argmax; ties go to the lowest label index.
    pub fn argmax(&self) -> Vec<u8> {
        argmax_rows(&self.values)
    }
}

pub(crate) fn argmax_rows(m: &Matrix) -> Vec<u8> {
    m.row_iter()
        .map(|row| {
            let mut best = 0;
            for (l, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = l;
                }
            }
            best as u8
        })
        .collect()
}

/// A Gaussian kernel over pixel features, with its bandwidths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    /// Position only: features `(x/θγ, y/θγ)`.
    Spatial { theta_gamma: f64 },
    /// Position and color: features `(x/θα, y/θα, r/θβ, g/θβ, b/θβ)`.
    Bilateral { theta_alpha: f64, theta_beta: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            KernelSpec::Spatial { theta_gamma } => theta_gamma > 0.0 && theta_gamma.is_finite(),
            KernelSpec::Bilateral {
                theta_alpha,
                theta_beta,
            } => {
                theta_alpha > 0.0
                    && theta_beta > 0.0
                    && theta_alpha.is_finite()
                    && theta_beta.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(CrfError::invalid(format!(
                "kernel bandwidths must be positive and finite: {self:?}"
            )))
        }
    }

    /// Feature dimension this kernel induces.
    pub fn feature_dim(&self) -> usize {
        match self {
            KernelSpec::Spatial { .. } => 2,
            KernelSpec::Bilateral { .. } => 5,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            KernelSpec::Spatial { .. } => "spatial",
            KernelSpec::Bilateral { .. } => "bilateral",
        }
    }
}

/// Scaled per-pixel feature vectors for `spec`, in row-major pixel order.
pub fn build_kernel_features(image: &RgbImage, spec: &KernelSpec) -> Result<FeatureMatrix> {
    spec.validate()?;
    let (w, h) = (image.width(), image.height());
    let dim = spec.feature_dim();
    let mut data = Vec::with_capacity(w * h * dim);
    for y in 0..h {
        for x in 0..w {
            match *spec {
                KernelSpec::Spatial { theta_gamma } => {
                    data.push(x as f64 / theta_gamma);
                    data.push(y as f64 / theta_gamma);
                }
                KernelSpec::Bilateral {
                    theta_alpha,
                    theta_beta,
                } => {
                    let rgb = image.pixel_at(x, y);
                    data.push(x as f64 / theta_alpha);
                    data.push(y as f64 / theta_alpha);
                    data.extend(rgb.iter().map(|&c| c as f64 / theta_beta));
                }
            }
        }
    }
    FeatureMatrix::new(w * h, dim, data)
}

/// Learnable CRF parameters: per-class kernel weights (`L × M`) and the
/// label compatibility matrix (`L × L`, not necessarily symmetric).
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub weights: Matrix,
    pub compatibility: Matrix,
}

impl CrfParams {
    pub fn new(weights: Matrix, compatibility: Matrix) -> Result<Self> {
        let p = Self {
            weights,
            compatibility,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(n_labels: usize, n_kernels: usize) -> Self {
        Self {
            weights: Matrix::zeros(n_labels, n_kernels),
            compatibility: Matrix::zeros(n_labels, n_labels),
        }
    }

    pub fn n_labels(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_kernels(&self) -> usize {
        self.weights.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.weights.rows();
        self.compatibility
            .ensure_shape(l, l, "compatibility matrix")?;
        self.weights.ensure_finite("kernel weights")?;
        self.compatibility.ensure_finite("compatibility matrix")
    }

    pub(crate) fn ensure_matches(&self, n_labels: usize, n_kernels: usize) -> Result<()> {
        self.weights
            .ensure_shape(n_labels, n_kernels, "kernel weights")?;
        self.compatibility
            .ensure_shape(n_labels, n_labels, "compatibility matrix")
    }

    /// Flattened `[weights..., compatibility...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.as_slice().to_vec();
        v.extend_from_slice(self.compatibility.as_slice());
        v
    }

    /// Inverse of [`Self::to_flat`] for the same shapes.
    pub fn from_flat(n_labels: usize, n_kernels: usize, flat: &[f64]) -> Result<Self> {
        let nw = n_labels * n_kernels;
        if flat.len() != nw + n_labels * n_labels {
            return Err(CrfError::shape(
                "flat parameter vector has the wrong length",
            ));
        }
        Self::new(
            Matrix::from_vec(n_labels, n_kernels, flat[..nw].to_vec())?,
            Matrix::from_vec(n_labels, n_labels, flat[nw..].to_vec())?,
        )
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, factor: f64, other: &CrfParams) {
        self.weights.add_scaled(factor, &other.weights);
        self.compatibility.add_scaled(factor, &other.compatibility);
    }

    pub fn norm(&self) -> f64 {
        (self.weights.dot(&self.weights) + self.compatibility.dot(&self.compatibility)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.compatibility.is_finite()
    }
}
