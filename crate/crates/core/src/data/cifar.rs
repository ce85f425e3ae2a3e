use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Pixel bytes per record: three 1024-byte channel planes (R, G, B), each row-major 32x32.
pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    /// One label byte per record.
    Cifar10,
    /// Coarse then fine label byte; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_IMAGE_BYTES
    }
}

pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let record = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::DatasetFormat {
            offset: 0,
            reason: "file is empty".into(),
        });
    }
    if !bytes.len().is_multiple_of(record) {
        let complete = bytes.len() / record;
        return Err(Error::DatasetFormat {
            offset: (complete * record) as u64,
            reason: format!(
                "length {} is not a multiple of the {record}-byte record; trailing record is truncated",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / record;
    let k = variant.num_classes();
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * CIFAR_IMAGE_BYTES);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label_at = variant.label_bytes() - 1;
        let label = rec[label_at] as usize;
        if label >= k {
            return Err(Error::CorruptRecord {
                record: i,
                offset: (i * record + label_at) as u64,
                label,
                num_classes: k,
            });
        }
        labels.push(label);
        images.extend(
            rec[variant.label_bytes()..]
                .iter()
                .map(|&b| b as f32 / 255.0),
        );
    }
    Dataset::new(images, labels, k, (3, 32, 32))
}

/// Inverse of [`parse_cifar`]. CIFAR-100 coarse labels are not kept by the parser, so
/// they are taken from `coarse` when given and written as 0 otherwise.
pub fn serialize_cifar(
    dataset: &Dataset,
    variant: CifarVariant,
    coarse: Option<&[u8]>,
) -> Result<Vec<u8>> {
    if dataset.image_shape() != (3, 32, 32) {
        return Err(Error::InvalidInput(format!(
            "CIFAR records hold 3x32x32 images, got {:?}",
            dataset.image_shape()
        )));
    }
    let mut out = Vec::with_capacity(dataset.len() * variant.record_len());
    for i in 0..dataset.len() {
        if variant == CifarVariant::Cifar100 {
            out.push(coarse.and_then(|c| c.get(i).copied()).unwrap_or(0));
        }
        out.push(dataset.labels()[i] as u8);
        out.extend(dataset.image(i).iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn load_cifar_file(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes, variant)
}
