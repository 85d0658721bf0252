//! The individual stages of one mean-field update, each with its backward
//! pass. Stages operate on `N × L` fields; backward functions take the
//! gradient of the stage output and return gradients of its inputs.

use crate::error::{CrfError, Result};
use crate::image::RgbImage;
use crate::lattice::{Normalization, PermutohedralLattice};
use crate::tensor::Matrix;

use super::fields::{build_kernel_features, KernelSpec, MarginalField, RawField, UnaryField};

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let l = out.cols();
    for row in out.as_mut_slice().chunks_exact_mut(l) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Softmax Jacobian-transpose product: `dx = y ⊙ (dy − ⟨dy, y⟩)` per row.
pub fn softmax_backward(y: &MarginalField, dy: &Matrix) -> Result<Matrix> {
    dy.ensure_shape(y.n_pixels(), y.n_labels(), "softmax output gradient")?;
    let l = y.n_labels();
    let mut dx = dy.clone();
    for (row, yrow) in dx
        .as_mut_slice()
        .chunks_exact_mut(l)
        .zip(y.values().row_iter())
    {
        let inner: f64 = row.iter().zip(yrow).map(|(g, q)| g * q).sum();
        for (g, q) in row.iter_mut().zip(yrow) {
            *g = q * (*g - inner);
        }
    }
    Ok(dx)
}

/// Initialization: `Q = softmax(U)` per pixel.
pub fn init_softmax(unary: &UnaryField) -> MarginalField {
    MarginalField::new_unchecked(unary.height(), unary.width(), softmax_rows(unary.values()))
}

/// Normalization: `Q = softmax(Q̆)` per pixel. Same contract as
/// [`init_softmax`], applied to the pre-normalization field.
pub fn normalize(height: usize, width: usize, q_breve: &RawField) -> Result<MarginalField> {
    if q_breve.rows() != height * width {
        return Err(CrfError::shape(
            "normalize: field does not match image size",
        ));
    }
    q_breve.ensure_finite("pre-normalization field")?;
    Ok(MarginalField::new_unchecked(
        height,
        width,
        softmax_rows(q_breve),
    ))
}

/// One Gaussian kernel's lattice plus the per-pixel self-coefficient needed
/// to exclude `j = i` from the message sum.
#[derive(Debug)]
pub struct MessageFilter {
    lattice: PermutohedralLattice,
    self_coefficient: Vec<f64>,
}

impl MessageFilter {
    pub fn new(lattice: PermutohedralLattice) -> Self {
        let self_coefficient = lattice.normalized_self_coefficient();
        Self {
            lattice,
            self_coefficient,
        }
    }

    pub fn lattice(&self) -> &PermutohedralLattice {
        &self.lattice
    }

    pub fn self_coefficient(&self) -> &[f64] {
        &self.self_coefficient
    }

    /// `G q − s ⊙ q`, or `Gᵀ q − s ⊙ q` for the adjoint.
    fn apply(&self, q: &Matrix, adjoint: bool) -> Result<Matrix> {
        let mut out = self
            .lattice
            .gaussian_filter(q, adjoint, Normalization::Symmetric)?;
        let l = out.cols();
        for ((orow, qrow), s) in out
            .as_mut_slice()
            .chunks_exact_mut(l)
            .zip(q.row_iter())
            .zip(&self.self_coefficient)
        {
            for (o, x) in orow.iter_mut().zip(qrow) {
                *o -= s * x;
            }
        }
        Ok(out)
    }
}

/// The M message-passing filters for one image, built once and reused by
/// every iteration.
#[derive(Debug)]
pub struct KernelBank {
    height: usize,
    width: usize,
    specs: Vec<KernelSpec>,
    filters: Vec<MessageFilter>,
}

impl KernelBank {
    pub fn build(image: &RgbImage, specs: &[KernelSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(CrfError::invalid("at least one kernel is required"));
        }
        let filters = specs
            .iter()
            .map(|spec| {
                let features = build_kernel_features(image, spec)?;
                Ok(MessageFilter::new(PermutohedralLattice::build(&features)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            height: image.height(),
            width: image.width(),
            specs: specs.to_vec(),
            filters,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn n_kernels(&self) -> usize {
        self.filters.len()
    }

    pub fn specs(&self) -> &[KernelSpec] {
        &self.specs
    }

    pub fn filters(&self) -> &[MessageFilter] {
        &self.filters
    }

    fn ensure_pixels(&self, rows: usize) -> Result<()> {
        if rows != self.n_pixels() {
            return Err(CrfError::shape(format!(
                "field has {rows} pixels, kernels were built for {}",
                self.n_pixels()
            )));
        }
        Ok(())
    }
}

/// Message passing: `Q̃⁽ᵐ⁾(i, l) = Σ_{j≠i} k⁽ᵐ⁾(fᵢ, fⱼ) Q(j, l)` for each kernel,
/// using the symmetric-normalized lattice filter.
pub fn message_passing(q: &MarginalField, bank: &KernelBank) -> Result<Vec<RawField>> {
    bank.ensure_pixels(q.n_pixels())?;
    bank.filters
        .iter()
        .map(|f| f.apply(q.values(), false))
        .collect()
}

/// Backward of [`message_passing`]: sums the adjoint filter responses.
pub fn message_passing_backward(bank: &KernelBank, d_msgs: &[RawField]) -> Result<Matrix> {
    if d_msgs.len() != bank.n_kernels() {
        return Err(CrfError::shape(format!(
            "{} message gradients for {} kernels",
            d_msgs.len(),
            bank.n_kernels()
        )));
    }
    let mut dq: Option<Matrix> = None;
    for (f, g) in bank.filters.iter().zip(d_msgs) {
        bank.ensure_pixels(g.rows())?;
        let part = f.apply(g, true)?;
        match dq.as_mut() {
            Some(acc) => acc.add_scaled(1.0, &part),
            None => dq = Some(part),
        }
    }
    Ok(dq.expect("bank has at least one kernel"))
}

fn check_msgs(msgs: &[RawField], weights: &Matrix) -> Result<(usize, usize)> {
    let (l, m) = weights.shape();
    if msgs.len() != m {
        return Err(CrfError::shape(format!(
            "{} filter outputs for {m} kernel weight columns",
            msgs.len()
        )));
    }
    let n = msgs.first().map_or(0, |q| q.rows());
    for q in msgs {
        q.ensure_shape(n, l, "filter output")?;
    }
    Ok((n, l))
}

/// Weighting: `Q̌(i, l) = Σₘ w(l, m) Q̃⁽ᵐ⁾(i, l)` with class-specific weights.
pub fn weight_filter_outputs(msgs: &[RawField], weights: &Matrix) -> Result<RawField> {
    let (n, l) = check_msgs(msgs, weights)?;
    let mut out = Matrix::zeros(n, l);
    for (m, q) in msgs.iter().enumerate() {
        for i in 0..n {
            let (orow, qrow) = (out.row_mut(i), q.row(i));
            for lab in 0..l {
                orow[lab] += weights.get(lab, m) * qrow[lab];
            }
        }
    }
    Ok(out)
}

/// Backward of [`weight_filter_outputs`]: returns `(d_msgs, d_weights)`.
pub fn weight_filter_outputs_backward(
    msgs: &[RawField],
    weights: &Matrix,
    d_out: &Matrix,
) -> Result<(Vec<RawField>, Matrix)> {
    let (n, l) = check_msgs(msgs, weights)?;
    d_out.ensure_shape(n, l, "weighting output gradient")?;
    let mut d_weights = Matrix::zeros(l, msgs.len());
    let mut d_msgs = Vec::with_capacity(msgs.len());
    for (m, q) in msgs.iter().enumerate() {
        let mut dq = Matrix::zeros(n, l);
        let mut acc = vec![0.0; l];
        for i in 0..n {
            let (g, qrow, dqrow) = (d_out.row(i), q.row(i), dq.row_mut(i));
            for lab in 0..l {
                acc[lab] += g[lab] * qrow[lab];
                dqrow[lab] = weights.get(lab, m) * g[lab];
            }
        }
        for (lab, a) in acc.into_iter().enumerate() {
            d_weights.set(lab, m, a);
        }
        d_msgs.push(dq);
    }
    Ok((d_msgs, d_weights))
}

/// Compatibility transform: `Q̂ᵢ = µ · Q̌ᵢ` per pixel.
pub fn compatibility_transform(q_check: &RawField, mu: &Matrix) -> Result<RawField> {
    let l = q_check.cols();
    mu.ensure_shape(l, l, "compatibility matrix")?;
    let mut out = Matrix::zeros(q_check.rows(), l);
    for (orow, qrow) in out
        .as_mut_slice()
        .chunks_exact_mut(l.max(1))
        .zip(q_check.row_iter())
    {
        for (a, o) in orow.iter_mut().enumerate() {
            *o = mu.row(a).iter().zip(qrow).map(|(m, q)| m * q).sum();
        }
    }
    Ok(out)
}

/// Backward of [`compatibility_transform`]: returns `(d_q_check, d_mu)`.
pub fn compatibility_transform_backward(
    q_check: &RawField,
    mu: &Matrix,
    d_out: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let l = q_check.cols();
    mu.ensure_shape(l, l, "compatibility matrix")?;
    d_out.ensure_shape(q_check.rows(), l, "compatibility output gradient")?;
    let mut d_mu = Matrix::zeros(l, l);
    let mut d_in = Matrix::zeros(q_check.rows(), l);
    for i in 0..q_check.rows() {
        let (g, qrow) = (d_out.row(i), q_check.row(i));
        for a in 0..l {
            let ga = g[a];
            let mrow = d_mu.row_mut(a);
            for b in 0..l {
                mrow[b] += ga * qrow[b];
            }
        }
        let drow = d_in.row_mut(i);
        for b in 0..l {
            drow[b] = (0..l).map(|a| mu.get(a, b) * g[a]).sum();
        }
    }
    Ok((d_in, d_mu))
}

/// Adding unaries: `Q̆ = U − Q̂`.
pub fn add_unary(unary: &UnaryField, q_hat: &RawField) -> Result<RawField> {
    q_hat.ensure_shape(unary.n_pixels(), unary.n_labels(), "compatibility output")?;
    let mut out = unary.values().clone();
    out.add_scaled(-1.0, q_hat);
    Ok(out)
}

/// Backward of [`add_unary`]: returns `(d_unary, d_q_hat) = (g, −g)`.
pub fn add_unary_backward(d_out: &Matrix) -> (Matrix, Matrix) {
    (d_out.clone(), d_out.map(|g| -g))
}
