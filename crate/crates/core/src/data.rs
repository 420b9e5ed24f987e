//! Labeled image sets: a procedural digit generator for desk experiments and
//! an IDX reader for externally supplied data.

use std::fs;
use std::path::{Path, PathBuf};

use advlab_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images in NHWC layout with values in `[0,1]`, plus integer labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!("images must be NHWC, got {:?}", images.shape())));
        }
        if images.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Invalid(format!("label {bad} outside {num_classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("pixel values must lie in [0,1]".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn pixels_per_image(&self) -> usize {
        self.images.row_len()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` examples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let (images, labels) = self.batch(idx);
        Self {
            images,
            labels,
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

// ---------------------------------------------------------------------------
// Procedural digits

/// Control polylines for each digit in a unit box, y pointing down.
fn glyph(digit: usize) -> Vec<Vec<(f64, f64)>> {
    let ellipse = |cx: f64, cy: f64, rx: f64, ry: f64, n: usize| -> Vec<(f64, f64)> {
        (0..=n)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                (cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect()
    };
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.26, 0.38, 14)],
        1 => vec![vec![(0.36, 0.26), (0.52, 0.1), (0.52, 0.9)]],
        2 => vec![vec![
            (0.26, 0.3),
            (0.36, 0.14),
            (0.56, 0.1),
            (0.72, 0.2),
            (0.72, 0.38),
            (0.26, 0.9),
            (0.78, 0.9),
        ]],
        3 => vec![vec![
            (0.26, 0.14),
            (0.72, 0.14),
            (0.46, 0.44),
            (0.7, 0.58),
            (0.7, 0.8),
            (0.5, 0.92),
            (0.26, 0.84),
        ]],
        4 => vec![vec![(0.64, 0.9), (0.64, 0.1), (0.2, 0.64), (0.8, 0.64)]],
        5 => vec![vec![
            (0.72, 0.1),
            (0.32, 0.1),
            (0.28, 0.46),
            (0.56, 0.42),
            (0.72, 0.58),
            (0.7, 0.8),
            (0.5, 0.92),
            (0.26, 0.84),
        ]],
        6 => vec![vec![
            (0.68, 0.12),
            (0.46, 0.2),
            (0.3, 0.44),
            (0.28, 0.7),
            (0.4, 0.9),
            (0.6, 0.9),
            (0.72, 0.72),
            (0.62, 0.52),
            (0.4, 0.5),
            (0.29, 0.62),
        ]],
        7 => vec![vec![(0.22, 0.1), (0.78, 0.1), (0.42, 0.9)]],
        8 => vec![ellipse(0.5, 0.29, 0.19, 0.18, 12), ellipse(0.5, 0.7, 0.23, 0.2, 12)],
        _ => vec![ellipse(0.5, 0.32, 0.21, 0.2, 12), vec![(0.71, 0.32), (0.62, 0.9)]],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Renders one jittered digit into a `size × size` grayscale image.
fn render_digit(digit: usize, size: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<f64> {
    let scale = rng.random_range(0.82..1.04);
    let angle: f64 = rng.random_range(-0.22..0.22);
    let shear = rng.random_range(-0.2..0.2);
    let tx = rng.random_range(-0.07..0.07);
    let ty = rng.random_range(-0.06..0.06);
    let width = rng.random_range(0.045..0.075);
    let peak = rng.random_range(0.85..1.0);
    let (s, c) = angle.sin_cos();
    let strokes: Vec<Vec<(f64, f64)>> = glyph(digit)
        .into_iter()
        .map(|line| {
            line.into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x - 0.5 + rng.random_range(-0.025..0.025), y - 0.5 + rng.random_range(-0.025..0.025));
                    let x = x + shear * y;
                    let (x, y) = (scale * (c * x - s * y), scale * (s * x + c * y));
                    (x + 0.5 + tx, y + 0.5 + ty)
                })
                .collect()
        })
        .collect();
    let px = 1.0 / size as f64;
    let mut img = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let p = ((j as f64 + 0.5) * px, (i as f64 + 0.5) * px);
            let d = strokes
                .iter()
                .flat_map(|line| line.windows(2).map(|w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let ink = ((width + 0.5 * px - d) / px).clamp(0.0, 1.0) * peak;
            img[i * size + j] = (ink + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    img
}

/// Balanced set of procedurally drawn digits, `[n, size, size, 1]`.
pub fn synthetic_digits(n: usize, size: usize, split: Split, seed: u64) -> Result<LabeledDataset> {
    if size < 8 {
        return Err(Error::Invalid(format!("digit images need at least 8 pixels per side, got {size}")));
    }
    let salt = match split {
        Split::Train => 0x7261_696e,
        Split::Test => 0x7465_7374,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        data.extend(render_digit(digit, size, &mut rng, &noise));
        labels.push(digit);
    }
    let images = Tensor::new(vec![n, size, size, 1], data)?;
    LabeledDataset::new(images, labels, 10, split)
}

/// The default desk split: 4000 training and 1000 test digits at 16×16.
pub fn desk_digits(seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    Ok((
        synthetic_digits(4000, 16, Split::Train, seed)?,
        synthetic_digits(1000, 16, Split::Test, seed)?,
    ))
}

// ---------------------------------------------------------------------------
// IDX files

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    Magic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated, header promises {expected} bytes but file has {actual}")]
    Truncated { path: PathBuf, expected: usize, actual: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Parses an IDX payload with the given magic, returning dimensions and data.
fn parse_idx(path: &Path, bytes: &[u8], magic: u32) -> std::result::Result<(Vec<usize>, Vec<u8>), IdxError> {
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            path: path.into(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(IdxError::Magic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(IdxError::Truncated {
            path: path.into(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            path: path.into(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok((dims, bytes[header..expected].to_vec()))
}

/// Loads an IDX image/label pair; pixels are scaled from bytes to `[0,1]`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<LabeledDataset> {
    let (dims, pixels) = parse_idx(images, &read_file(images)?, IDX_IMAGES)?;
    let (ldims, raw_labels) = parse_idx(labels, &read_file(labels)?, IDX_LABELS)?;
    if dims[0] != ldims[0] {
        return Err(IdxError::CountMismatch {
            images: dims[0],
            labels: ldims[0],
        }
        .into());
    }
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let tensor = Tensor::new(vec![dims[0], dims[1], dims[2], 1], data)?;
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    LabeledDataset::new(tensor, labels, num_classes, split)
}

/// Serializes a dataset as an IDX pair (pixels rounded to bytes).
pub fn write_idx(data: &LabeledDataset, images: &Path, labels: &Path) -> Result<()> {
    let shape = data.images.shape();
    if shape[3] != 1 {
        return Err(Error::Invalid("IDX export supports single-channel images only".into()));
    }
    let mut img = IDX_IMAGES.to_be_bytes().to_vec();
    for d in &shape[..3] {
        img.extend((*d as u32).to_be_bytes());
    }
    img.extend(data.images.data().iter().map(|v| (v * 255.0).round() as u8));
    let mut lab = IDX_LABELS.to_be_bytes().to_vec();
    lab.extend((data.len() as u32).to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));
    for (path, bytes) in [(images, img), (labels, lab)] {
        fs::write(path, bytes).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_digits_are_balanced_and_deterministic() {
        let a = synthetic_digits(50, 16, Split::Train, 3).unwrap();
        let b = synthetic_digits(50, 16, Split::Train, 3).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.image_shape(), &[16, 16, 1]);
        for d in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == d).count(), 5);
        }
        let t = synthetic_digits(50, 16, Split::Test, 3).unwrap();
        assert_ne!(a.images.data(), t.images.data());
    }

    #[test]
    fn digits_have_ink() {
        let a = synthetic_digits(20, 16, Split::Train, 1).unwrap();
        for i in 0..20 {
            let ink = a.images.row(i).iter().filter(|&&v| v > 0.5).count();
            assert!(ink >= 12, "digit {} has only {ink} inked pixels", a.labels[i]);
        }
    }

    #[test]
    fn rejects_mismatched_labels() {
        let images = Tensor::zeros(&[3, 4, 4, 1]);
        assert!(LabeledDataset::new(images.clone(), vec![0, 1], 10, Split::Test).is_err());
        assert!(LabeledDataset::new(images, vec![0, 1, 10], 10, Split::Test).is_err());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let data = synthetic_digits(12, 8, Split::Test, 9).unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&data, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp, Split::Test).unwrap();
        assert_eq!(back.labels, data.labels);
        for (a, b) in back.images.data().iter().zip(data.images.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        let err = load_idx(&lp, &lp, Split::Test).unwrap_err();
        assert!(matches!(err, Error::Idx(IdxError::Magic { .. })), "{err}");

        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_idx(&ip, &lp, Split::Test).unwrap_err();
        assert!(matches!(err, Error::Idx(IdxError::Truncated { .. })), "{err}");
        assert!(err.to_string().contains("img"));

        let other = synthetic_digits(5, 8, Split::Test, 9).unwrap();
        let lp2 = dir.path().join("lab2");
        write_idx(&other, &dir.path().join("img2"), &lp2).unwrap();
        fs::write(&ip, &bytes).unwrap();
        let err = load_idx(&ip, &lp2, Split::Test).unwrap_err();
        assert!(matches!(err, Error::Idx(IdxError::CountMismatch { images: 12, labels: 5 })));
    }
}
