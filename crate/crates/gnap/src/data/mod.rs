//! Dataset ingestion, deterministic splitting and batching, and the
//! training-time augmentation pipeline.

mod augment;
mod cifar;
mod idx;
pub mod synthetic;

pub use augment::{augment_image, AugmentConfig};
pub use cifar::{load_cifar, write_cifar, CifarVariant};
pub use idx::{load_mnist, write_idx_images, write_idx_labels};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic at byte {offset}: found {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        offset: usize,
        found: u32,
        expected: u32,
    },
    #[error("file truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("file size {size} is not a multiple of the {record}-byte record (or is empty)")]
    BadRecordSize { size: usize, record: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Images normalized to [0,1] in `[N,C,H,W]` layout plus class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn image(&self, index: usize) -> &[f32] {
        let stride = self.channels * self.height * self.width;
        &self.images[index * stride..(index + 1) * stride]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for &label in &self.labels {
            if label >= self.classes {
                return Err(DataError::BadLabel {
                    label,
                    classes: self.classes,
                });
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let stride = self.channels * self.height * self.width;
        let mut images = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            n: indices.len(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            labels,
            classes: self.classes,
            name: self.name.clone(),
        }
    }
}

/// Seeded disjoint train/validation split: the validation part takes the
/// remainder after `floor(n * (1 - val_fraction))` training examples.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    assert!(
        val_fraction > 0.0 && val_fraction < 1.0,
        "val fraction must be in (0,1)"
    );
    let mut order: Vec<usize> = (0..dataset.n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train_len = ((dataset.n as f64) * (1.0 - val_fraction)).floor() as usize;
    let (train_idx, val_idx) = order.split_at(train_len);
    (dataset.subset(train_idx), dataset.subset(val_idx))
}

/// Per-epoch seeded shuffle into batches; the final short batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// How a batch is assembled; augmentation exists only behind the training
/// variant, so evaluation pipelines cannot apply it.
pub enum BatchMode<'a> {
    Eval,
    Train {
        augment: Option<(&'a AugmentConfig, u64, usize)>,
    },
}

/// Gather (and in training mode optionally augment) one batch. Augmentation
/// randomness is keyed by (seed, epoch, example index), so the result does
/// not depend on assembly order.
pub fn assemble_batch<S: Scalar>(
    dataset: &Dataset,
    indices: &[usize],
    mode: BatchMode<'_>,
) -> (Tensor<S>, Vec<usize>) {
    let stride = dataset.channels * dataset.height * dataset.width;
    let mut values = Vec::with_capacity(indices.len() * stride);
    let mut labels = Vec::with_capacity(indices.len());
    let augment = match mode {
        BatchMode::Eval => None,
        BatchMode::Train { augment } => augment,
    };
    for &i in indices {
        let image = dataset.image(i);
        match augment {
            Some((cfg, aug_seed, epoch)) => {
                let mut rng = example_rng(aug_seed, epoch, i);
                let out = augment_image(
                    image,
                    dataset.channels,
                    dataset.height,
                    dataset.width,
                    cfg,
                    &mut rng,
                );
                values.extend(out.iter().map(|&v| S::from_f64(v as f64)));
            }
            None => values.extend(image.iter().map(|&v| S::from_f64(v as f64))),
        }
        labels.push(dataset.labels[i]);
    }
    let tensor = Tensor::from_vec(
        vec![indices.len(), dataset.channels, dataset.height, dataset.width],
        values,
    )
    .expect("consistent batch length");
    (tensor, labels)
}

fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) ^ index as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        Dataset {
            images: (0..n * 4).map(|i| (i % 7) as f32 / 7.0).collect(),
            n,
            channels: 1,
            height: 2,
            width: 2,
            labels: (0..n).map(|i| i % 3).collect(),
            classes: 3,
            name: "toy".into(),
        }
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let (train, val) = split(&toy(100), 0.1, 7);
        assert_eq!(train.n, 90);
        assert_eq!(val.n, 10);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let d = toy(50);
        let (a_train, a_val) = split(&d, 0.2, 3);
        let (b_train, b_val) = split(&d, 0.2, 3);
        assert_eq!(a_train.images, b_train.images);
        assert_eq!(a_val.labels, b_val.labels);
        let (c_train, _) = split(&d, 0.2, 4);
        assert_ne!(a_train.images, c_train.images, "different seed reshuffles");
    }

    #[test]
    fn batch_sizes_keep_the_short_tail() {
        let batches = batch_indices(10, 4, 1, 0);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn batches_are_seed_and_epoch_deterministic() {
        assert_eq!(batch_indices(20, 6, 5, 3), batch_indices(20, 6, 5, 3));
        assert_ne!(batch_indices(20, 6, 5, 3), batch_indices(20, 6, 5, 4));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_covers_without_duplicates(n in 2usize..200, seed in 0u64..100) {
                let d = toy(n);
                let (train, val) = split(&d, 0.25, seed);
                prop_assert_eq!(train.n + val.n, n);
                // recover which original index each example came from via
                // its unique pixel pattern is overkill; check label
                // multiset instead plus sizes
                let mut got: Vec<usize> = train.labels.iter().chain(val.labels.iter()).copied().collect();
                let mut want: Vec<usize> = d.labels.clone();
                got.sort();
                want.sort();
                prop_assert_eq!(got, want);
            }

            #[test]
            fn batch_multiset_is_complete(n in 1usize..300, bs in 1usize..40, seed in 0u64..50, epoch in 0usize..5) {
                let mut all: Vec<usize> = batch_indices(n, bs, seed, epoch).concat();
                all.sort();
                let want: Vec<usize> = (0..n).collect();
                prop_assert_eq!(all, want);
            }
        }
    }
}
