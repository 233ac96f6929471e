//! Source data, CIFAR-10 ingestion, corruptions and target streams.

mod cifar;
mod corrupt;
mod stream;
mod synthetic;

pub use cifar::{encode_cifar10, load_cifar10, parse_cifar10, write_cifar10, CIFAR_RECORD_BYTES};
pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec};
pub use stream::{build_stream, Batch, DomainSpec, ShuffleMode, Stream, StreamPlan};
pub use synthetic::generate_source;

use crate::error::{Error, Result};
use crate::model::Standardizer;
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[3, 32, 32]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
}

impl LabeledImage {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.pixels.data()[c * IMAGE_PIXELS..(c + 1) * IMAGE_PIXELS]
    }
}

/// Per-channel mean and (population) standard deviation of a dataset.
pub fn fit_standardizer(images: &[LabeledImage]) -> Result<Standardizer> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot fit statistics on zero images".into()));
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    let count = (images.len() * IMAGE_PIXELS) as f64;
    for c in 0..IMAGE_CHANNELS {
        let m = images.iter().map(|im| im.channel(c).iter().sum::<f64>()).sum::<f64>() / count;
        let v = images
            .iter()
            .map(|im| im.channel(c).iter().map(|x| (x - m) * (x - m)).sum::<f64>())
            .sum::<f64>()
            / count;
        mean[c] = m;
        std[c] = v.sqrt().max(1e-8);
    }
    Ok(Standardizer { mean, std })
}

/// Stacks images into a standardized `[N, 3, 32, 32]` batch.
pub fn to_batch(images: &[&LabeledImage], standardizer: &Standardizer) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut data = Vec::with_capacity(images.len() * IMAGE_CHANNELS * IMAGE_PIXELS);
    for im in images {
        for c in 0..IMAGE_CHANNELS {
            let (m, s) = (standardizer.mean[c], standardizer.std[c]);
            data.extend(im.channel(c).iter().map(|x| (x - m) / s));
        }
    }
    Tensor::new(vec![images.len(), IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)
}

pub fn labels_of(images: &[&LabeledImage]) -> Vec<usize> {
    images.iter().map(|im| im.label).collect()
}
