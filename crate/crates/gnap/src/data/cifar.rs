//! CIFAR-10/100 binary batch files: per record one label byte (CIFAR-10) or
//! a coarse+fine label pair (CIFAR-100) followed by 3072 channel-major
//! pixel bytes.

use std::fs;
use std::path::Path;

use super::{DataError, Dataset};

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Ten,
    Hundred,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Ten => 10,
            CifarVariant::Hundred => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Ten => 1,
            CifarVariant::Hundred => 2,
        }
    }

    fn record_bytes(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }
}

pub fn load_cifar(paths: &[&Path], variant: CifarVariant) -> Result<Dataset, DataError> {
    let record = variant.record_bytes();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let raw = fs::read(path)?;
        if raw.is_empty() || raw.len() % record != 0 {
            return Err(DataError::BadRecordSize {
                size: raw.len(),
                record,
            });
        }
        for chunk in raw.chunks_exact(record) {
            // CIFAR-100 stores (coarse, fine); the fine label is retained
            let label = chunk[variant.label_bytes() - 1] as usize;
            labels.push(label);
            images.extend(
                chunk[variant.label_bytes()..]
                    .iter()
                    .map(|&b| b as f32 / 255.0),
            );
        }
    }
    let dataset = Dataset {
        n: labels.len(),
        images,
        channels: 3,
        height: 32,
        width: 32,
        labels,
        classes: variant.classes(),
        name: match variant {
            CifarVariant::Ten => "cifar10".into(),
            CifarVariant::Hundred => "cifar100".into(),
        },
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Serialize back to the binary batch layout (CIFAR-100 coarse byte is
/// written as zero).
pub fn write_cifar(dataset: &Dataset, path: &Path, variant: CifarVariant) -> Result<(), DataError> {
    let stride = dataset.channels * dataset.height * dataset.width;
    assert_eq!(stride, CIFAR_PIXELS, "CIFAR records are 3x32x32");
    let mut out = Vec::with_capacity(dataset.n * variant.record_bytes());
    for i in 0..dataset.n {
        if variant == CifarVariant::Hundred {
            out.push(0u8);
        }
        out.push(dataset.labels[i] as u8);
        out.extend(
            dataset
                .image(i)
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    fs::write(path, out)?;
    Ok(())
}
