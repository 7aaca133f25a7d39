//! CIFAR-10 binary format: 1 label byte + 3072 channel-planar pixel bytes per record.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::ImageBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
const CLASSES: usize = 10;

pub fn load_cifar10_binary(path: &Path) -> Result<ImageBatch> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn parse(bytes: &[u8]) -> Result<ImageBatch> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "length {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::Format(format!("record {i} has label {label}")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    ImageBatch::new(Tensor::from_vec(&[n, 3, 32, 32], pixels)?, labels, CLASSES)
}

/// Pixels are quantized with `round(x·255)`.
pub fn write_cifar10_binary(batch: &ImageBatch, path: &Path) -> Result<()> {
    if batch.dims() != [3, 32, 32] || batch.classes > 256 {
        return Err(Error::Format(format!(
            "CIFAR records hold 3×32×32 images, got {:?}",
            batch.dims()
        )));
    }
    let mut out = Vec::with_capacity(batch.len() * CIFAR_RECORD_BYTES);
    for i in 0..batch.len() {
        out.push(batch.labels[i] as u8);
        out.extend(batch.images.row(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads `data_batch_{1..5}.bin` and `test_batch.bin` from a directory.
pub fn load_cifar10_dir(dir: &Path) -> Result<(ImageBatch, ImageBatch)> {
    let mut parts = Vec::new();
    for i in 1..=5 {
        parts.push(load_cifar10_binary(&dir.join(format!("data_batch_{i}.bin")))?);
    }
    let test = load_cifar10_binary(&dir.join("test_batch.bin"))?;
    let images: Vec<&Tensor<f32>> = parts.iter().map(|p| &p.images).collect();
    let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
    let train = ImageBatch::new(Tensor::concat_rows(&images)?, labels, CLASSES)?;
    Ok((train, test))
}
