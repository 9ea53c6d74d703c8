//! Reader for the CIFAR-10 binary distribution.
//!
//! Each record is one label byte followed by 3072 pixel bytes: the 1024
//! red values, then green, then blue, each plane row-major over 32×32.
//! Images come out channel-first (`C×H×W`, RGB order) scaled by 1/255.

use std::fs;
use std::path::Path;

use ndarray::Array4;

use super::ImageBatch;
use crate::error::{Error, Result};

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const RECORD: usize = 1 + 3 * PLANE;
const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    /// Every `data_batch_{1..5}.bin` present, in order.
    Train,
    /// `test_batch.bin`.
    Test,
}

pub fn load_cifar_format(dir: &Path, split: CifarSplit) -> Result<ImageBatch> {
    let files: Vec<_> = match split {
        CifarSplit::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .filter(|p| p.exists())
            .collect(),
        CifarSplit::Test => {
            let p = dir.join("test_batch.bin");
            if p.exists() {
                vec![p]
            } else {
                vec![]
            }
        }
    };
    if files.is_empty() {
        let expected = match split {
            CifarSplit::Train => "data_batch_1.bin",
            CifarSplit::Test => "test_batch.bin",
        };
        return Err(Error::format(
            expected,
            format!("file not found in {}", dir.display()),
        ));
    }

    let mut labels = Vec::new();
    let mut raw = Vec::new();
    for f in &files {
        let bytes = fs::read(f)?;
        if bytes.len() % RECORD != 0 {
            return Err(Error::format(
                f.display().to_string(),
                format!("length {} is not a multiple of {RECORD}", bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(RECORD) {
            let label = rec[0] as usize;
            if label >= NUM_CLASSES {
                return Err(Error::format(
                    f.display().to_string(),
                    format!("label byte {label} out of range"),
                ));
            }
            labels.push(label);
            raw.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
        }
    }
    let n = labels.len();
    let pixels = Array4::from_shape_vec((n, 3, SIDE, SIDE), raw)
        .map_err(|e| Error::format("pixels", e.to_string()))?;
    let prefix = match split {
        CifarSplit::Train => "cifar-train",
        CifarSplit::Test => "cifar-test",
    };
    let ids = (0..n).map(|i| format!("{prefix}-{i}")).collect();
    ImageBatch::new(pixels, labels, ids, NUM_CLASSES)
}
