//! Image datasets: IDX ingestion, deterministic splits and the shifted
//! variants used as out-of-distribution inputs.

use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::diff::Tensor;
use crate::rng::{self, purpose};
use crate::scalar::Scalar;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{what}: expected magic {expected:#010x}, found {found:#010x}")]
    BadMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("{what}: truncated, need {expected} bytes but have {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{0}")]
    Invalid(String),
}

/// `N` grayscale images of `height × width` pixels in `[0, 1]`, stored
/// contiguously, with optional class labels (`None` for unlabeled inputs
/// such as noise images).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset<T> {
    pub images: Vec<T>,
    pub labels: Vec<Option<usize>>,
    pub height: usize,
    pub width: usize,
    pub name: String,
}

impl<T: Scalar> ImageDataset<T> {
    pub fn new(
        images: Vec<T>,
        labels: Vec<Option<usize>>,
        height: usize,
        width: usize,
        name: impl Into<String>,
    ) -> Result<Self, DataError> {
        if images.len() != labels.len() * height * width {
            return Err(DataError::Invalid(format!(
                "{} pixels cannot hold {} images of {}x{}",
                images.len(),
                labels.len(),
                height,
                width
            )));
        }
        Ok(ImageDataset {
            images,
            labels,
            height,
            width,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[T] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// One more than the largest label.
    pub fn class_count(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |&m| m + 1)
    }

    /// Labels, failing if any instance is unlabeled.
    pub fn class_labels(&self) -> Result<Vec<usize>, DataError> {
        self.labels
            .iter()
            .map(|l| l.ok_or_else(|| DataError::Invalid(format!("{}: unlabeled instance", self.name))))
            .collect()
    }

    /// The instances at `idx`, in that order.
    pub fn select(&self, idx: &[usize], name: impl Into<String>) -> Self {
        let mut images = Vec::with_capacity(idx.len() * self.pixels());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        ImageDataset {
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            height: self.height,
            width: self.width,
            name: name.into(),
        }
    }

    /// Flattened images `[idx.len(), H·W]` as one tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * self.pixels());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![idx.len(), self.pixels()], data).expect("batch shape")
    }

    /// Flattened images `start..end` as one tensor.
    pub fn range(&self, start: usize, end: usize) -> Tensor<T> {
        let p = self.pixels();
        Tensor::new(vec![end - start, p], self.images[start * p..end * p].to_vec()).expect("range shape")
    }

    /// The first `n` instances (all of them if fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx, self.name.clone())
    }

    fn remap(&self, suffix: &str, f: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let (h, w) = (self.height, self.width);
        let mut images = Vec::with_capacity(self.images.len());
        for i in 0..self.len() {
            let img = self.image(i);
            for r in 0..h {
                for c in 0..w {
                    let (sr, sc) = f(r, c);
                    images.push(img[sr * w + sc]);
                }
            }
        }
        ImageDataset {
            images,
            labels: self.labels.clone(),
            height: h,
            width: w,
            name: format!("{}-{}", self.name, suffix),
        }
    }
}

/// Reverses the row order of every image.
pub fn vflip<T: Scalar>(ds: &ImageDataset<T>) -> ImageDataset<T> {
    let h = ds.height;
    ds.remap("vflip", |r, c| (h - 1 - r, c))
}

/// Reverses the column order of every image.
pub fn hflip<T: Scalar>(ds: &ImageDataset<T>) -> ImageDataset<T> {
    let w = ds.width;
    ds.remap("hflip", |r, c| (r, w - 1 - c))
}

/// `n` unlabeled images with i.i.d. `U[0, 1)` pixels.
pub fn uniform_noise<T: Scalar>(n: usize, height: usize, width: usize, seed: u64) -> ImageDataset<T> {
    let mut r = rng::stream(seed, purpose::UNIFORM_IMAGES, &[]);
    let images = (0..n * height * width)
        .map(|_| T::lit(r.random::<f64>()))
        .collect();
    ImageDataset {
        images,
        labels: vec![None; n],
        height,
        width,
        name: "uniform".into(),
    }
}

/// Index sets of a seeded shuffled split; `round(N · dev_fraction)` go to
/// dev. Both index lists are in permutation order.
pub fn split_indices(n: usize, dev_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "dev fraction must lie in (0, 1), got {}",
            dev_fraction
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, purpose::SPLIT, &[]));
    let dev_n = ((n as f64) * dev_fraction).round() as usize;
    let train = idx.split_off(dev_n);
    Ok((train, idx))
}

/// Seeded train/dev split.
pub fn split<T: Scalar>(
    ds: &ImageDataset<T>,
    dev_fraction: f64,
    seed: u64,
) -> Result<(ImageDataset<T>, ImageDataset<T>), DataError> {
    let (train, dev) = split_indices(ds.len(), dev_fraction, seed)?;
    Ok((
        ds.select(&train, format!("{}-train", ds.name)),
        ds.select(&dev, format!("{}-dev", ds.name)),
    ))
}

// ---- IDX ------------------------------------------------------------------

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            what,
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &'static str) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(DataError::BadMagic {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

/// Decoded IDX image file: count, rows, columns and raw pixel bytes.
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, DataError> {
    const WHAT: &str = "image file";
    check_magic(bytes, IMAGE_MAGIC, WHAT)?;
    let count = be_u32(bytes, 4, WHAT)? as usize;
    let rows = be_u32(bytes, 8, WHAT)? as usize;
    let cols = be_u32(bytes, 12, WHAT)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(DataError::Truncated {
            what: WHAT,
            expected: need,
            found: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    const WHAT: &str = "label file";
    check_magic(bytes, LABEL_MAGIC, WHAT)?;
    let count = be_u32(bytes, 4, WHAT)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(DataError::Truncated {
            what: WHAT,
            expected: need,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..need].to_vec())
}

/// File contents, transparently gunzipped when they start with `1f 8b`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = std::fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into())
}

fn scale_pixels<T: Scalar>(pixels: &[u8]) -> Vec<T> {
    let full = T::lit(255.0);
    pixels.iter().map(|&p| T::lit(p as f64) / full).collect()
}

/// Images from an IDX image file with no labels.
pub fn load_idx_images<T: Scalar>(images_path: &Path) -> Result<ImageDataset<T>, DataError> {
    let img = parse_idx_images(&read_maybe_gz(images_path)?)?;
    ImageDataset::new(
        scale_pixels(&img.pixels),
        vec![None; img.count],
        img.rows,
        img.cols,
        dataset_name(images_path),
    )
}

/// Labeled images from a pair of IDX files; pixels are scaled by 1/255.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<ImageDataset<T>, DataError> {
    let img = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?)?;
    if labels.len() != img.count {
        return Err(DataError::CountMismatch {
            images: img.count,
            labels: labels.len(),
        });
    }
    ImageDataset::new(
        scale_pixels(&img.pixels),
        labels.iter().map(|&l| Some(l as usize)).collect(),
        img.rows,
        img.cols,
        dataset_name(images_path),
    )
}

/// IDX image bytes with pixels quantized to `round(255 · p)`.
pub fn encode_idx_images<T: Scalar>(ds: &ImageDataset<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.images.len());
    for v in [IMAGE_MAGIC, ds.len() as u32, ds.height as u32, ds.width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(
        ds.images
            .iter()
            .map(|&p| (p.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// IDX label bytes; unlabeled instances are written as 255.
pub fn encode_idx_labels<T: Scalar>(ds: &ImageDataset<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend(ds.labels.iter().map(|l| l.map_or(u8::MAX, |v| v as u8)));
    out
}
