//! CIFAR-10 binary layout: 3073-byte records, one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes in row-major order.

use std::path::Path;

use super::{LabeledImage, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * IMAGE_PIXELS;
const CIFAR_CLASSES: u8 = 10;

pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Data(format!(
            "length {} is not a multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0];
            if label >= CIFAR_CLASSES {
                return Err(Error::Data(format!("record {i}: label byte {label} > 9")));
            }
            let pixels = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
            Ok(LabeledImage {
                pixels: Tensor::new(vec![3, IMAGE_SIDE, IMAGE_SIDE], pixels)?,
                label: label as usize,
            })
        })
        .collect()
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes)
}

/// Quantizes `[0, 1]` pixels to bytes (round to nearest).
pub fn encode_cifar10(images: &[LabeledImage]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(images.len() * CIFAR_RECORD_BYTES);
    for im in images {
        if im.label >= CIFAR_CLASSES as usize || im.pixels.len() != 3 * IMAGE_PIXELS {
            return Err(Error::Data(format!("cannot encode label {}", im.label)));
        }
        out.push(im.label as u8);
        out.extend(im.pixels.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_cifar10(path: impl AsRef<Path>, images: &[LabeledImage]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_cifar10(images)?).map_err(|e| Error::io(path, e))
}
