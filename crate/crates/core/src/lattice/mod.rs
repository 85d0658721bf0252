//! Approximate Gaussian filtering over arbitrary feature points using the
//! permutohedral lattice (Adams, Baek and Davis, 2010).
//!
//! Filtering is the pipeline `slice ∘ blur ∘ splat`:
//!
//! * `splat` scatters each point's value onto the `d + 1` vertices of the
//!   lattice simplex enclosing it, weighted by barycentric coordinates;
//! * `blur` convolves the vertex values with the kernel `(½, 1, ½)` along each
//!   of the `d + 1` lattice axes in turn;
//! * `slice` gathers the blurred values back with the same barycentric weights.
//!
//! `slice` is the exact transpose of `splat` and every per-axis blur pass is
//! symmetric, so running the blur passes in reverse order yields the exact
//! adjoint of the forward filter.

mod hash;

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{CrfError, Result};
use crate::tensor::Matrix;
use hash::KeyTable;

/// Marker for a missing neighbor in [`PermutohedralLattice::neighbors`].
pub const NO_NEIGHBOR: u32 = u32::MAX;

// Rows handed to one rayon task. Fixed, so chunking never depends on the
// thread count.
const PAR_ROWS: usize = 512;

/// Per-point feature vectors, already divided by the kernel bandwidths.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_points: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n_points: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if n_points == 0 || dim == 0 {
            return Err(CrfError::invalid(
                "feature matrix needs at least one point and one dimension",
            ));
        }
        if data.len() != n_points * dim {
            return Err(CrfError::shape(format!(
                "{} feature values for {n_points} points of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CrfError::NonFinite("features"));
        }
        Ok(Self {
            n_points,
            dim,
            data,
        })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Values stored at lattice vertices, one row per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeValues {
    values: Matrix,
}

impl LatticeValues {
    pub fn from_matrix(values: Matrix) -> Result<Self> {
        values.ensure_finite("lattice values")?;
        Ok(Self { values })
    }

    pub fn n_lattice_points(&self) -> usize {
        self.values.rows()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix {
        self.values
    }
}

/// How the raw lattice response `K̂` is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `K̂ · v`
    None,
    /// `D^-½ · K̂ · D^-½ · v` with `D = diag(K̂ · 1)`.
    #[default]
    Symmetric,
}

/// A permutohedral lattice built over a fixed set of feature points.
///
/// Immutable once built; the normalizer and self-response caches are filled
/// lazily and are safe to share across threads.
pub struct PermutohedralLattice {
    n_points: usize,
    dim: usize,
    /// `n_points × (dim + 1)` vertex ids of each point's enclosing simplex.
    offsets: Vec<u32>,
    /// `n_points × (dim + 1)` barycentric weights matching `offsets`.
    barycentric: Vec<f64>,
    /// `n_lattice_points × (2·dim + 2)`; entries `2k` and `2k + 1` are the two
    /// neighbors along axis `k`, or [`NO_NEIGHBOR`].
    neighbors: Vec<u32>,
    /// CSR transpose of `offsets`: for every vertex, the `(point, weight)`
    /// pairs splatting onto it, in increasing point order.
    splat_start: Vec<usize>,
    splat_entries: Vec<(u32, f64)>,
    normalizer: OnceLock<Vec<f64>>,
    self_response: OnceLock<Vec<f64>>,
}

impl std::fmt::Debug for PermutohedralLattice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PermutohedralLattice")
            .field("n_points", &self.n_points)
            .field("dim", &self.dim)
            .field("n_lattice_points", &self.n_lattice_points())
            .finish()
    }
}

/// Builds the lattice for `features`.
pub fn build_lattice(features: &FeatureMatrix) -> Result<PermutohedralLattice> {
    PermutohedralLattice::build(features)
}

impl PermutohedralLattice {
    pub fn build(features: &FeatureMatrix) -> Result<Self> {
        if features.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(CrfError::NonFinite("features"));
        }
        let d = features.dim();
        let d1 = d + 1;
        let n = features.n_points();

        // Canonical simplex: vertex `r` of the 0-colored simplex, expressed per
        // coordinate rank.
        let mut canonical = vec![0i32; d1 * d1];
        for r in 0..d1 {
            for j in 0..d1 {
                canonical[r * d1 + j] = if j + r <= d {
                    r as i32
                } else {
                    r as i32 - d1 as i32
                };
            }
        }

        // Diagonal of the elevation matrix E, scaled so that the (½, 1, ½)
        // blur along the d + 1 axes approximates a unit-variance Gaussian.
        let inv_std_dev = (2.0f64 / 3.0).sqrt() * d1 as f64;
        let scale: Vec<f64> = (0..d)
            .map(|i| inv_std_dev / (((i + 2) * (i + 1)) as f64).sqrt())
            .collect();

        let mut table = KeyTable::with_capacity(d, 2 * d1 * n);
        let mut offsets = vec![0u32; n * d1];
        let mut barycentric = vec![0.0f64; n * d1];

        let mut elevated = vec![0.0f64; d1];
        let mut rem0 = vec![0i32; d1];
        let mut rank = vec![0i32; d1];
        let mut bary = vec![0.0f64; d1 + 1];
        let mut key = vec![0i32; d];

        for p in 0..n {
            let f = features.point(p);

            // Elevate onto the hyperplane x · 1 = 0.
            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            // Nearest remainder-0 lattice point by rounding each coordinate
            // to a multiple of d + 1.
            let mut sum = 0i32;
            for i in 0..d1 {
                let rd = (elevated[i] / d1 as f64).round() as i32;
                rem0[i] = rd * d1 as i32;
                sum += rd;
            }

            // Rank of each coordinate's residual, sorted descending.
            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..d1 {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }

            // Project back onto the hyperplane if rounding left the
            // coordinate sum non-zero.
            for i in 0..d1 {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += d1 as i32;
                    rem0[i] += d1 as i32;
                } else if rank[i] > d as i32 {
                    rank[i] -= d1 as i32;
                    rem0[i] -= d1 as i32;
                }
            }

            // Barycentric coordinates within the simplex.
            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..d1 {
                let v = (elevated[i] - rem0[i] as f64) / d1 as f64;
                let r = rank[i] as usize;
                bary[d - r] += v;
                bary[d - r + 1] -= v;
            }
            bary[0] += 1.0 + bary[d1];

            // Vertex keys: only the first d coordinates are stored, the last
            // is implied by the zero-sum constraint.
            for r in 0..d1 {
                for i in 0..d {
                    key[i] = rem0[i] + canonical[r * d1 + rank[i] as usize];
                }
                offsets[p * d1 + r] = table.find_or_insert(&key);
                barycentric[p * d1 + r] = bary[r];
            }
        }

        let n_vertices = table.len();
        let mut neighbors = vec![NO_NEIGHBOR; n_vertices * 2 * d1];
        let mut up = vec![0i32; d];
        let mut down = vec![0i32; d];
        for v in 0..n_vertices {
            let k = table.key(v);
            for axis in 0..d1 {
                // Step along axis: +(d+1) on the axis coordinate, -1 on the rest.
                for i in 0..d {
                    up[i] = k[i] - 1;
                    down[i] = k[i] + 1;
                }
                if axis < d {
                    up[axis] = k[axis] + d as i32;
                    down[axis] = k[axis] - d as i32;
                }
                let base = v * 2 * d1 + 2 * axis;
                neighbors[base] = table.find(&up).unwrap_or(NO_NEIGHBOR);
                neighbors[base + 1] = table.find(&down).unwrap_or(NO_NEIGHBOR);
            }
        }

        // Transpose offsets into per-vertex splat lists (counting sort keeps
        // points in increasing order within each vertex).
        let mut splat_start = vec![0usize; n_vertices + 1];
        for &o in &offsets {
            splat_start[o as usize + 1] += 1;
        }
        for v in 0..n_vertices {
            splat_start[v + 1] += splat_start[v];
        }
        let mut cursor = splat_start.clone();
        let mut splat_entries = vec![(0u32, 0.0f64); offsets.len()];
        for p in 0..n {
            for r in 0..d1 {
                let v = offsets[p * d1 + r] as usize;
                splat_entries[cursor[v]] = (p as u32, barycentric[p * d1 + r]);
                cursor[v] += 1;
            }
        }

        Ok(Self {
            n_points: n,
            dim: d,
            offsets,
            barycentric,
            neighbors,
            splat_start,
            splat_entries,
            normalizer: OnceLock::new(),
            self_response: OnceLock::new(),
        })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_lattice_points(&self) -> usize {
        self.splat_start.len() - 1
    }

    /// Vertex ids of the simplex enclosing point `i`.
    pub fn offsets(&self, i: usize) -> &[u32] {
        let d1 = self.dim + 1;
        &self.offsets[i * d1..(i + 1) * d1]
    }

    /// Barycentric weights of point `i`, aligned with [`Self::offsets`].
    pub fn barycentric(&self, i: usize) -> &[f64] {
        let d1 = self.dim + 1;
        &self.barycentric[i * d1..(i + 1) * d1]
    }

    /// The two neighbors of vertex `v` along `axis`.
    pub fn neighbors(&self, v: usize, axis: usize) -> (u32, u32) {
        let base = v * 2 * (self.dim + 1) + 2 * axis;
        (self.neighbors[base], self.neighbors[base + 1])
    }

    fn check_points(&self, values: &Matrix, what: &str) -> Result<()> {
        if values.rows() != self.n_points {
            return Err(CrfError::shape(format!(
                "{what}: {} rows for a lattice over {} points",
                values.rows(),
                self.n_points
            )));
        }
        Ok(())
    }

    fn check_vertices(&self, lv: &LatticeValues) -> Result<()> {
        if lv.n_lattice_points() != self.n_lattice_points() {
            return Err(CrfError::shape(format!(
                "lattice values have {} rows, lattice has {} vertices",
                lv.n_lattice_points(),
                self.n_lattice_points()
            )));
        }
        Ok(())
    }

    /// Scatters per-point values onto the lattice vertices.
    pub fn splat(&self, values: &Matrix) -> Result<LatticeValues> {
        self.check_points(values, "splat")?;
        let c = values.cols();
        let mut out = Matrix::zeros(self.n_lattice_points(), c);
        if c > 0 {
            out.as_mut_slice()
                .par_chunks_mut(c)
                .with_min_len(PAR_ROWS)
                .enumerate()
                .for_each(|(v, row)| {
                    let entries = &self.splat_entries[self.splat_start[v]..self.splat_start[v + 1]];
                    for &(p, w) in entries {
                        for (o, x) in row.iter_mut().zip(values.row(p as usize)) {
                            *o += w * x;
                        }
                    }
                });
        }
        Ok(LatticeValues { values: out })
    }

    /// One `(½, 1, ½)` pass along a single lattice axis.
    pub fn blur_axis(&self, lv: &LatticeValues, axis: usize) -> Result<LatticeValues> {
        self.check_vertices(lv)?;
        if axis > self.dim {
            return Err(CrfError::invalid(format!(
                "axis {axis} out of range for a {}-d lattice",
                self.dim
            )));
        }
        let c = lv.channels();
        let mut out = Matrix::zeros(self.n_lattice_points(), c);
        if c > 0 {
            self.blur_pass(lv.as_matrix(), &mut out, axis);
        }
        Ok(LatticeValues { values: out })
    }

    fn blur_pass(&self, src: &Matrix, dst: &mut Matrix, axis: usize) {
        let c = src.cols();
        dst.as_mut_slice()
            .par_chunks_mut(c)
            .with_min_len(PAR_ROWS)
            .enumerate()
            .for_each(|(v, row)| {
                let (up, down) = self.neighbors(v, axis);
                row.copy_from_slice(src.row(v));
                for n in [up, down] {
                    if n != NO_NEIGHBOR {
                        for (o, x) in row.iter_mut().zip(src.row(n as usize)) {
                            *o += 0.5 * x;
                        }
                    }
                }
            });
    }

    /// Blurs along every axis, in order `0..=d`, or `d..=0` when `reversed`.
    /// The reversed blur is the transpose of the forward blur.
    pub fn blur(&self, lv: &LatticeValues, reversed: bool) -> Result<LatticeValues> {
        self.check_vertices(lv)?;
        let c = lv.channels();
        let mut cur = lv.values.clone();
        if c == 0 {
            return Ok(LatticeValues { values: cur });
        }
        let mut next = Matrix::zeros(cur.rows(), c);
        for step in 0..=self.dim {
            let axis = if reversed { self.dim - step } else { step };
            self.blur_pass(&cur, &mut next, axis);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(LatticeValues { values: cur })
    }

    /// Gathers vertex values back to the points; the transpose of [`Self::splat`].
    pub fn slice(&self, lv: &LatticeValues) -> Result<Matrix> {
        self.check_vertices(lv)?;
        let c = lv.channels();
        let d1 = self.dim + 1;
        let mut out = Matrix::zeros(self.n_points, c);
        if c > 0 {
            out.as_mut_slice()
                .par_chunks_mut(c)
                .with_min_len(PAR_ROWS)
                .enumerate()
                .for_each(|(p, row)| {
                    for r in 0..d1 {
                        let v = self.offsets[p * d1 + r] as usize;
                        let w = self.barycentric[p * d1 + r];
                        for (o, x) in row.iter_mut().zip(lv.values.row(v)) {
                            *o += w * x;
                        }
                    }
                });
        }
        Ok(out)
    }

    fn raw_filter(&self, values: &Matrix, adjoint: bool) -> Result<Matrix> {
        let splatted = self.splat(values)?;
        let blurred = self.blur(&splatted, adjoint)?;
        self.slice(&blurred)
    }

    /// `D = K̂ · 1`, the per-point response of the raw forward filter to a
    /// constant input. Computed once per lattice.
    pub fn normalizer(&self) -> &[f64] {
        self.normalizer.get_or_init(|| {
            let ones = Matrix::filled(self.n_points, 1, 1.0);
            self.raw_filter(&ones, false)
                .expect("shapes are consistent by construction")
                .into_vec()
        })
    }

    /// Diagonal of the raw forward filter matrix, `K̂(i, i)`: the weight the
    /// filter gives a point's own value.
    pub fn self_response(&self) -> &[f64] {
        self.self_response
            .get_or_init(|| self.compute_self_response())
    }

    /// Per-point coefficient of the point's own value in the symmetric
    /// normalized filter, `K̂(i, i) / D(i)`.
    pub fn normalized_self_coefficient(&self) -> Vec<f64> {
        self.self_response()
            .iter()
            .zip(self.normalizer())
            .map(|(k, d)| k / d)
            .collect()
    }

    fn compute_self_response(&self) -> Vec<f64> {
        // K̂(i,i) = sᵢᵀ B sᵢ with sᵢ the point's barycentric vector. Split the
        // blur B = P₂P₁ at the middle axis so both halves stay sparse:
        // sᵢᵀ P₂ P₁ sᵢ = ⟨P₂ᵀ sᵢ, P₁ sᵢ⟩, and P₂ᵀ is P₂'s passes reversed.
        let d1 = self.dim + 1;
        let split = d1 / 2;
        let n_vertices = self.n_lattice_points();
        let mut out = vec![0.0; self.n_points];
        out.par_chunks_mut(PAR_ROWS)
            .enumerate()
            .for_each(|(chunk, out)| {
                let mut acc = SparseAccumulator::new(n_vertices);
                for (k, o) in out.iter_mut().enumerate() {
                    let p = chunk * PAR_ROWS + k;
                    let start: Vec<(u32, f64)> = self
                        .offsets(p)
                        .iter()
                        .copied()
                        .zip(self.barycentric(p).iter().copied())
                        .collect();
                    let left = self.sparse_blur(&start, 0..split, &mut acc);
                    let right = self.sparse_blur(&start, (split..d1).rev(), &mut acc);
                    *o = acc.dot(&left, &right);
                }
            });
        out
    }

    fn sparse_blur(
        &self,
        start: &[(u32, f64)],
        axes: impl Iterator<Item = usize>,
        acc: &mut SparseAccumulator,
    ) -> Vec<(u32, f64)> {
        let mut cur = start.to_vec();
        for axis in axes {
            for &(v, x) in &cur {
                acc.add(v, x);
                let (up, down) = self.neighbors(v as usize, axis);
                for n in [up, down] {
                    if n != NO_NEIGHBOR {
                        acc.add(n, 0.5 * x);
                    }
                }
            }
            cur = acc.drain();
        }
        cur
    }

    /// Gaussian filter `F · values`, or its adjoint `Fᵀ · values`.
    ///
    /// Runs in `O(n_points · (d + 1) · channels)` once the lattice is built.
    pub fn gaussian_filter(
        &self,
        values: &Matrix,
        adjoint: bool,
        normalization: Normalization,
    ) -> Result<Matrix> {
        self.check_points(values, "gaussian filter")?;
        values.ensure_finite("filter input")?;
        match normalization {
            Normalization::None => self.raw_filter(values, adjoint),
            Normalization::Symmetric => {
                let inv_sqrt: Vec<f64> =
                    self.normalizer().iter().map(|d| d.sqrt().recip()).collect();
                let mut scaled = values.clone();
                scale_rows(&mut scaled, &inv_sqrt);
                let mut out = self.raw_filter(&scaled, adjoint)?;
                scale_rows(&mut out, &inv_sqrt);
                Ok(out)
            }
        }
    }
}

fn scale_rows(m: &mut Matrix, factors: &[f64]) {
    let c = m.cols();
    if c == 0 {
        return;
    }
    m.as_mut_slice()
        .chunks_exact_mut(c)
        .zip(factors)
        .for_each(|(row, f)| row.iter_mut().for_each(|x| *x *= f));
}

/// Dense scratch with a touched list, for sparse vectors over vertex ids.
struct SparseAccumulator {
    dense: Vec<f64>,
    seen: Vec<bool>,
    touched: Vec<u32>,
}

impl SparseAccumulator {
    fn new(n: usize) -> Self {
        Self {
            dense: vec![0.0; n],
            seen: vec![false; n],
            touched: Vec::new(),
        }
    }

    #[inline]
    fn add(&mut self, v: u32, x: f64) {
        let i = v as usize;
        if !self.seen[i] {
            self.seen[i] = true;
            self.touched.push(v);
        }
        self.dense[i] += x;
    }

    fn drain(&mut self) -> Vec<(u32, f64)> {
        let out = self
            .touched
            .iter()
            .map(|&v| {
                let i = v as usize;
                let x = self.dense[i];
                self.dense[i] = 0.0;
                self.seen[i] = false;
                (v, x)
            })
            .collect();
        self.touched.clear();
        out
    }

    fn dot(&mut self, a: &[(u32, f64)], b: &[(u32, f64)]) -> f64 {
        for &(v, x) in a {
            self.add(v, x);
        }
        let s = b.iter().map(|&(v, x)| self.dense[v as usize] * x).sum();
        self.drain();
        s
    }
}
