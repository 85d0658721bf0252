//! File formats: `CRFT` tensor files for unaries, marginals and parameters;
//! PPM/PGM (and PNG with the `png` feature) for images and label maps;
//! tab-separated dataset manifests.

#[cfg(feature = "png")]
pub mod png_codec;
pub mod pnm;
pub mod tensor_file;

use std::fs;
use std::path::{Path, PathBuf};

pub use tensor_file::TensorRecord;

use crate::crf_rnn::ParamSchedule;
use crate::error::{CrfError, Result};
use crate::image::{LabelMap, RgbImage};
use crate::meanfield::{CrfParams, MarginalField, UnaryField};
use crate::tensor::Matrix;
use crate::training::Sample;

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CrfError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CrfError::io(path, e))
}

/// Prefixes format errors with the file they came from.
fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        CrfError::Format(msg) => CrfError::format(format!("{}: {msg}", path.display())),
        CrfError::Shape(msg) => CrfError::shape(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn wants_png(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

#[cfg(not(feature = "png"))]
fn no_png<T>() -> Result<T> {
    Err(CrfError::format(
        "PNG support is not built in (enable the `png` feature)",
    ))
}

/// Loads a binary PPM (`P6`, maxval 255) or, with the `png` feature, an
/// 8-bit RGB PNG. Pixels come back in row-major order.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    in_file(path, decode_image(&bytes))
}

fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, data) = if bytes.starts_with(PNG_SIGNATURE) {
        #[cfg(feature = "png")]
        {
            png_codec::decode_png_rgb(bytes)?
        }
        #[cfg(not(feature = "png"))]
        {
            return no_png();
        }
    } else {
        pnm::decode_ppm(bytes)?
    };
    RgbImage::new(w, h, data)
}

/// Writes PNG when the path ends in `.png`, PPM otherwise.
pub fn save_image(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if wants_png(path) {
        #[cfg(feature = "png")]
        {
            png_codec::encode_png_rgb(image.width(), image.height(), image.as_bytes())?
        }
        #[cfg(not(feature = "png"))]
        {
            return no_png();
        }
    } else {
        pnm::encode_ppm(image.width(), image.height(), image.as_bytes())
    };
    write_bytes(path, &bytes)
}

/// Loads a label map from a binary PGM (`P5`) or, with the `png` feature,
/// an indexed or grayscale 8-bit PNG.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let decoded = if bytes.starts_with(PNG_SIGNATURE) {
        #[cfg(feature = "png")]
        {
            png_codec::decode_png_labels(&bytes)
        }
        #[cfg(not(feature = "png"))]
        {
            no_png()
        }
    } else {
        pnm::decode_pgm(&bytes)
    };
    let (w, h, labels) = in_file(path, decoded)?;
    LabelMap::new(w, h, labels)
}

/// Writes an indexed PNG when the path ends in `.png`, PGM otherwise.
pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if wants_png(path) {
        #[cfg(feature = "png")]
        {
            png_codec::encode_png_indexed(
                labels.width(),
                labels.height(),
                labels.labels(),
                &label_palette(),
            )?
        }
        #[cfg(not(feature = "png"))]
        {
            return no_png();
        }
    } else {
        pnm::encode_pgm(labels.width(), labels.height(), labels.labels())
    };
    write_bytes(path, &bytes)
}

/// Per-pixel argmax of the marginals, ties going to the lowest label.
pub fn labels_from_marginals(q: &MarginalField) -> Result<LabelMap> {
    if q.n_labels() > 256 {
        return Err(CrfError::invalid("label maps hold at most 256 labels"));
    }
    LabelMap::new(q.width(), q.height(), q.argmax())
}

/// Reads every record of a tensor file.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Vec<TensorRecord>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    in_file(path, tensor_file::decode_records(&bytes))
}

pub fn save_tensor(records: &[TensorRecord], path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &tensor_file::encode_records(records))
}

fn single_record(path: &Path) -> Result<TensorRecord> {
    let mut records = load_tensor(path)?;
    if records.len() != 1 {
        return Err(CrfError::format(format!(
            "{}: expected one tensor record, found {}",
            path.display(),
            records.len()
        )));
    }
    Ok(records.remove(0))
}

fn field_record(path: &Path, rec: TensorRecord) -> Result<(usize, usize, Matrix)> {
    match *rec.dims() {
        [h, w, l] => Ok((h, w, Matrix::from_vec(h * w, l, rec.to_f64())?)),
        ref dims => Err(CrfError::shape(format!(
            "{}: expected dims (H, W, L), found {dims:?}",
            path.display()
        ))),
    }
}

/// Reads a unary tensor with whatever dims the file declares.
pub fn read_unary(path: impl AsRef<Path>) -> Result<UnaryField> {
    let path = path.as_ref();
    let (h, w, m) = field_record(path, single_record(path)?)?;
    in_file(path, UnaryField::new(h, w, m))
}

/// Reads a unary tensor and checks its dims against `(height, width, n_labels)`.
pub fn load_unary(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    n_labels: usize,
) -> Result<UnaryField> {
    let path = path.as_ref();
    let u = read_unary(path)?;
    let found = (u.height(), u.width(), u.n_labels());
    if found != (height, width, n_labels) {
        return Err(CrfError::shape(format!(
            "{}: unary dims are {found:?}, expected {:?}",
            path.display(),
            (height, width, n_labels)
        )));
    }
    Ok(u)
}

fn field_to_record(h: usize, w: usize, m: &Matrix) -> Result<TensorRecord> {
    TensorRecord::from_f64(vec![h, w, m.cols()], m.as_slice())
}

pub fn save_unary(u: &UnaryField, path: impl AsRef<Path>) -> Result<()> {
    save_tensor(&[field_to_record(u.height(), u.width(), u.values())?], path)
}

pub fn save_marginal(q: &MarginalField, path: impl AsRef<Path>) -> Result<()> {
    save_tensor(&[field_to_record(q.height(), q.width(), q.values())?], path)
}

/// Writes each parameter set as two records: weights `(L, M)`, then `µ` `(L, L)`.
pub fn save_params(schedule: &ParamSchedule, path: impl AsRef<Path>) -> Result<()> {
    let mut records = Vec::new();
    for p in schedule.sets() {
        let (l, m) = p.weights.shape();
        records.push(TensorRecord::from_f64(vec![l, m], p.weights.as_slice())?);
        records.push(TensorRecord::from_f64(
            vec![l, l],
            p.compatibility.as_slice(),
        )?);
    }
    save_tensor(&records, path)
}

/// Reads a parameter file. One (weights, µ) pair gives a shared schedule,
/// several pairs a per-iteration one.
pub fn load_params(
    path: impl AsRef<Path>,
    n_labels: usize,
    n_kernels: usize,
) -> Result<ParamSchedule> {
    let path = path.as_ref();
    let records = load_tensor(path)?;
    if records.is_empty() || records.len() % 2 != 0 {
        return Err(CrfError::format(format!(
            "{}: parameter files hold (weights, compatibility) record pairs, found {} records",
            path.display(),
            records.len()
        )));
    }
    let mut sets = Vec::new();
    for pair in records.chunks_exact(2) {
        let (w, mu) = (&pair[0], &pair[1]);
        if w.dims() != [n_labels, n_kernels] || mu.dims() != [n_labels, n_labels] {
            return Err(CrfError::shape(format!(
                "{}: parameter dims {:?} and {:?}, expected [{n_labels}, {n_kernels}] and [{n_labels}, {n_labels}]",
                path.display(),
                w.dims(),
                mu.dims()
            )));
        }
        sets.push(CrfParams::new(
            Matrix::from_vec(n_labels, n_kernels, w.to_f64())?,
            Matrix::from_vec(n_labels, n_labels, mu.to_f64())?,
        )?);
    }
    Ok(if sets.len() == 1 {
        ParamSchedule::Shared(sets.remove(0))
    } else {
        ParamSchedule::PerIteration(sets)
    })
}

/// The usual segmentation color map: bits of the label spread over the
/// high bits of R, G and B. Label 255 is drawn light gray.
pub fn label_palette() -> Vec<u8> {
    let mut palette = Vec::with_capacity(768);
    for label in 0..=255u8 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = label;
        for shift in (0..8).rev() {
            r |= (c & 1) << shift;
            g |= ((c >> 1) & 1) << shift;
            b |= ((c >> 2) & 1) << shift;
            c >>= 3;
        }
        palette.extend_from_slice(&[r, g, b]);
    }
    palette[765..].copy_from_slice(&[224, 224, 192]);
    palette
}

/// Blends the palette color of each label into the image with weight
/// `alpha`. Pixels labeled `ignore_label` keep their color.
pub fn overlay(
    image: &RgbImage,
    labels: &LabelMap,
    alpha: f64,
    ignore_label: u8,
) -> Result<RgbImage> {
    if (labels.width(), labels.height()) != (image.width(), image.height()) {
        return Err(CrfError::shape("label map does not match the image"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CrfError::invalid("overlay alpha must lie in [0, 1]"));
    }
    let palette = label_palette();
    let mut out = image.as_bytes().to_vec();
    for (px, &l) in out.chunks_exact_mut(3).zip(labels.labels()) {
        if l == ignore_label {
            continue;
        }
        let color = &palette[usize::from(l) * 3..usize::from(l) * 3 + 3];
        for (v, &c) in px.iter_mut().zip(color) {
            *v = ((1.0 - alpha) * f64::from(*v) + alpha * f64::from(c)).round() as u8;
        }
    }
    RgbImage::new(image.width(), image.height(), out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub unary: PathBuf,
    pub ground_truth: PathBuf,
}

/// Parses a manifest: one `image<TAB>unary<TAB>ground-truth` line per
/// sample. Relative paths are taken relative to the manifest's directory;
/// blank lines and lines starting with `#` are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|_| CrfError::format(format!("{}: manifest is not UTF-8", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [image, unary, gt] = fields[..] else {
            return Err(CrfError::format(format!(
                "{}:{}: expected 3 tab-separated paths, found {}",
                path.display(),
                n + 1,
                fields.len()
            )));
        };
        entries.push(ManifestEntry {
            image: base.join(image),
            unary: base.join(unary),
            ground_truth: base.join(gt),
        });
    }
    if entries.is_empty() {
        return Err(CrfError::format(format!(
            "{}: manifest lists no samples",
            path.display()
        )));
    }
    Ok(entries)
}

/// Loads every sample a manifest lists, checking each against `n_labels`.
pub fn load_dataset(
    manifest: impl AsRef<Path>,
    n_labels: usize,
    ignore_label: u8,
) -> Result<Vec<Sample>> {
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            let image = load_image(&e.image)?;
            let unary = load_unary(&e.unary, image.height(), image.width(), n_labels)?;
            let gt = load_labels(&e.ground_truth)?;
            in_file(&e.ground_truth, gt.validate(n_labels, ignore_label))?;
            Sample::new(image, unary, gt)
        })
        .collect()
}

/// Writes samples as `sample_NNN.{ppm,crft,pgm}` plus `manifest.tsv` in
/// `dir`, returning the manifest path.
pub fn write_dataset(samples: &[Sample], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| CrfError::io(dir, e))?;
    let mut manifest = String::new();
    for (k, s) in samples.iter().enumerate() {
        let names = [
            format!("sample_{k:03}.ppm"),
            format!("sample_{k:03}.crft"),
            format!("sample_{k:03}.pgm"),
        ];
        save_image(&s.image, dir.join(&names[0]))?;
        save_unary(&s.unary, dir.join(&names[1]))?;
        save_labels(&s.ground_truth, dir.join(&names[2]))?;
        manifest.push_str(&names.join("\t"));
        manifest.push('\n');
    }
    let path = dir.join("manifest.tsv");
    write_bytes(&path, manifest.as_bytes())?;
    Ok(path)
}
