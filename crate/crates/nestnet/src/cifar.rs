//! Reader for the CIFAR-10 binary distribution (`cifar-10-batches-bin`).
//!
//! Each record is one label byte followed by 3072 pixel bytes: the 1024
//! red values of the 32×32 image in row-major order, then green, then blue.
//! Pixels are scaled by 1/255 and kept channel-major.

use std::path::{Path, PathBuf};

use nestnet_core::data::Split;
use nestnet_core::{Dataset, Tensor};

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const RECORD: usize = 1 + PIXELS;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, thiserror::Error)]
pub enum CifarError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: expected {expected} bytes, found {found}")]
    Length { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: record {record} has label {label}, expected 0..=9")]
    Label { path: PathBuf, record: usize, label: u8 },
    #[error(transparent)]
    Dataset(#[from] nestnet_core::Error),
}

/// Raw contents of one batch file.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub labels: Vec<usize>,
    /// `labels.len() × 3072` values in `[0, 1]`.
    pub pixels: Vec<f32>,
}

/// Reads one batch file holding exactly `records` records.
pub fn read_batch(path: &Path, records: usize) -> Result<Batch, CifarError> {
    let bytes = std::fs::read(path).map_err(|source| CifarError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let expected = records * RECORD;
    if bytes.len() != expected {
        return Err(CifarError::Length {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let mut labels = Vec::with_capacity(records);
    let mut pixels = Vec::with_capacity(records * PIXELS);
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(CifarError::Label {
                path: path.to_path_buf(),
                record: i,
                label: rec[0],
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Batch { labels, pixels })
}

fn to_dataset(batches: Vec<Batch>, split: Split) -> Result<Dataset, CifarError> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for b in batches {
        labels.extend(b.labels);
        pixels.extend(b.pixels);
    }
    let images = Tensor::from_vec(&[labels.len(), 3, SIDE, SIDE], pixels)?;
    Ok(Dataset::new(images, labels, CLASSES, split)?)
}

/// Loads the 50000 training and 10000 test images from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset), CifarError> {
    let train = TRAIN_FILES
        .iter()
        .map(|f| read_batch(&dir.join(f), RECORDS_PER_FILE))
        .collect::<Result<Vec<_>, _>>()?;
    let test = read_batch(&dir.join(TEST_FILE), RECORDS_PER_FILE)?;
    Ok((to_dataset(train, Split::Train)?, to_dataset(vec![test], Split::Test)?))
}

/// Loads a single batch file as a dataset (useful for small fixtures).
pub fn load_batch_file(path: &Path, records: usize, split: Split) -> Result<Dataset, CifarError> {
    to_dataset(vec![read_batch(path, records)?], split)
}
