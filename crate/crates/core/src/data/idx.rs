//! MNIST ingestion from the big-endian IDX container.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{Dataset, Split};
use crate::error::{Error, IdxError, Result};
use crate::tensor::Tensor4;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Side length after zero padding.
pub const PADDED_SIDE: usize = 32;

/// Undecoded images and labels, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reads a whole file, transparently inflating `.gz`.
fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    } else {
        file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    }
    Ok(buf)
}

fn idx_err(path: &Path, kind: IdxError) -> Error {
    Error::Idx { path: path.to_path_buf(), kind }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(path, IdxError::Truncated { expected: at + 4, found: bytes.len() }))
}

/// Parses an IDX body, returning its dims and the `u8` payload.
fn parse_idx(bytes: &[u8], path: &Path, magic: u32, rank: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(idx_err(path, IdxError::WrongMagic { expected: magic, found }));
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize)).collect::<Result<_>>()?;
    let header = 4 + 4 * rank;
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(idx_err(path, IdxError::Truncated { expected: header + payload, found: bytes.len() }));
    }
    Ok((dims, bytes[header..header + payload].to_vec()))
}

/// Parses an image file (`0x00000803`) and a label file (`0x00000801`).
pub fn load_idx(images: &Path, labels: &Path) -> Result<RawDataset> {
    let (dims, pixels) = parse_idx(&read_bytes(images)?, images, IMAGES_MAGIC, 3)?;
    let (ldims, label_bytes) = parse_idx(&read_bytes(labels)?, labels, LABELS_MAGIC, 1)?;
    if dims[0] != ldims[0] {
        return Err(idx_err(labels, IdxError::CountMismatch { images: dims[0], labels: ldims[0] }));
    }
    if let Some(&bad) = label_bytes.iter().find(|&&l| l >= 10) {
        return Err(idx_err(labels, IdxError::BadLabel(bad)));
    }
    Ok(RawDataset { rows: dims[1], cols: dims[2], pixels, labels: label_bytes })
}

/// Global affine map applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

/// Pads each image to `PADDED_SIDE²` with zeros and scales to `[0, 1]`.
fn padded_unit(raw: &RawDataset, limit: usize) -> Result<Tensor4> {
    let n = raw.len().min(limit);
    if raw.rows > PADDED_SIDE || raw.cols > PADDED_SIDE {
        return Err(Error::Shape(format!("{}x{} images exceed the padded size {PADDED_SIDE}", raw.rows, raw.cols)));
    }
    let top = (PADDED_SIDE - raw.rows) / 2;
    let left = (PADDED_SIDE - raw.cols) / 2;
    let mut out = Tensor4::zeros(n, 1, PADDED_SIDE, PADDED_SIDE);
    for i in 0..n {
        let src = &raw.pixels[i * raw.rows * raw.cols..(i + 1) * raw.rows * raw.cols];
        let dst = out.sample_mut(i);
        for r in 0..raw.rows {
            for c in 0..raw.cols {
                dst[(r + top) * PADDED_SIDE + c + left] = src[r * raw.cols + c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

impl Standardizer {
    /// Mean and population standard deviation over every padded training pixel.
    pub fn fit(images: &Tensor4) -> Self {
        let n = images.data().len() as f64;
        let mean = images.data().iter().sum::<f64>() / n;
        let var = images.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Standardizer { mean, std: var.sqrt().max(f64::MIN_POSITIVE) }
    }

    pub fn apply(&self, images: &mut Tensor4) {
        for v in images.data_mut() {
            *v = (*v - self.mean) / self.std;
        }
    }
}

/// Converts the first `limit` raw samples into a dataset. When `standardizer`
/// is `None` one is fitted to these samples (the training split).
pub fn to_dataset(raw: &RawDataset, limit: usize, split: Split, standardizer: Option<Standardizer>) -> Result<(Dataset, Standardizer)> {
    let mut images = padded_unit(raw, limit)?;
    let std = standardizer.unwrap_or_else(|| Standardizer::fit(&images));
    std.apply(&mut images);
    let labels = raw.labels[..images.batch()].iter().map(|&l| l as usize).collect();
    Ok((Dataset::new(images, labels, split)?, std))
}

/// Locates `name` or `name.gz` inside `dir`.
pub fn find_idx_file(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::io(plain, std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (tried plain and .gz)")))
}

/// Loads the standard train and test files from `dir`; the test split
/// serves as validation. Both are standardized with training statistics.
pub fn load_mnist(dir: &Path, train_limit: usize, val_limit: usize) -> Result<(Dataset, Dataset)> {
    let train_raw = load_idx(&find_idx_file(dir, "train-images-idx3-ubyte")?, &find_idx_file(dir, "train-labels-idx1-ubyte")?)?;
    let val_raw = load_idx(&find_idx_file(dir, "t10k-images-idx3-ubyte")?, &find_idx_file(dir, "t10k-labels-idx1-ubyte")?)?;
    let (train, std) = to_dataset(&train_raw, train_limit, Split::Train, None)?;
    let (val, _) = to_dataset(&val_raw, val_limit, Split::Val, Some(std))?;
    Ok((train, val))
}
