//! Analytically defined corruptions with five severity levels, applied in
//! `[0, 1]` pixel space and clamped.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{LabeledImage, IMAGE_CHANNELS, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    Brightness,
    Contrast,
    Pixelate,
    Saturate,
}

impl CorruptionKind {
    /// Default sequential order.
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::Saturate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Saturate => "saturate",
        }
    }

    /// Severity-indexed constant (severity 1..=5).
    pub fn level(self, severity: u8) -> f64 {
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            CorruptionKind::DefocusBlur => [0.5, 1.0, 1.5, 2.0, 2.5],
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            CorruptionKind::Brightness => [0.05, 0.1, 0.15, 0.2, 0.3],
            CorruptionKind::Pixelate => [0.6, 0.5, 0.4, 0.3, 0.25],
            CorruptionKind::Saturate => [0.1, 0.2, 0.3, 0.4, 0.5],
        };
        table[severity as usize - 1]
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity {severity} outside 1..=5")));
        }
        Ok(Self { kind, severity, seed })
    }
}

fn luminance(px: &[f64], i: usize) -> f64 {
    0.299 * px[i] + 0.587 * px[IMAGE_PIXELS + i] + 0.114 * px[2 * IMAGE_PIXELS + i]
}

fn gaussian_blur(px: &[f64], sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let side = IMAGE_SIDE as isize;
    let clampi = |v: isize| v.clamp(0, side - 1) as usize;
    let mut tmp = vec![0.0; px.len()];
    let mut out = vec![0.0; px.len()];
    for c in 0..IMAGE_CHANNELS {
        let base = c * IMAGE_PIXELS;
        for y in 0..side {
            for x in 0..side {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * px[base + y as usize * IMAGE_SIDE + clampi(x + k as isize - radius)])
                    .sum();
                tmp[base + y as usize * IMAGE_SIDE + x as usize] = acc;
            }
        }
        for y in 0..side {
            for x in 0..side {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * tmp[base + clampi(y + k as isize - radius) * IMAGE_SIDE + x as usize])
                    .sum();
                out[base + y as usize * IMAGE_SIDE + x as usize] = acc;
            }
        }
    }
    out
}

fn pixelate(px: &[f64], factor: f64) -> Vec<f64> {
    let small = ((IMAGE_SIDE as f64 * factor).round() as usize).max(1);
    let down = |i: usize| ((i as f64 + 0.5) * IMAGE_SIDE as f64 / small as f64) as usize;
    let up = |i: usize| i * small / IMAGE_SIDE;
    let mut out = vec![0.0; px.len()];
    for c in 0..IMAGE_CHANNELS {
        let base = c * IMAGE_PIXELS;
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let (sy, sx) = (down(up(y)).min(IMAGE_SIDE - 1), down(up(x)).min(IMAGE_SIDE - 1));
                out[base + y * IMAGE_SIDE + x] = px[base + sy * IMAGE_SIDE + sx];
            }
        }
    }
    out
}

/// Label-preserving corruption of a `[0, 1]` image.
pub fn corrupt(img: &LabeledImage, spec: &CorruptionSpec) -> LabeledImage {
    let level = spec.kind.level(spec.severity);
    let px = img.pixels.data();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out: Vec<f64> = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let noise = Normal::new(0.0, level).expect("valid sigma");
            px.iter().map(|&v| v + noise.sample(&mut rng)).collect()
        }
        CorruptionKind::ShotNoise => px
            .iter()
            .map(|&v| {
                let rate = v * level;
                if rate <= 0.0 {
                    0.0
                } else {
                    Poisson::new(rate).expect("positive rate").sample(&mut rng) / level
                }
            })
            .collect(),
        CorruptionKind::ImpulseNoise => px
            .iter()
            .map(|&v| {
                if rng.random::<f64>() < level {
                    if rng.random::<bool>() { 1.0 } else { 0.0 }
                } else {
                    v
                }
            })
            .collect(),
        CorruptionKind::DefocusBlur => gaussian_blur(px, level),
        CorruptionKind::Contrast => {
            let mean = px.iter().sum::<f64>() / px.len() as f64;
            px.iter().map(|&v| (v - mean) * level + mean).collect()
        }
        CorruptionKind::Brightness => px.iter().map(|&v| v + level).collect(),
        CorruptionKind::Pixelate => pixelate(px, level),
        CorruptionKind::Saturate => {
            // chroma pushed away from luminance by 1 + 5·level
            let gain = 1.0 + 5.0 * level;
            let mut out = px.to_vec();
            for i in 0..IMAGE_PIXELS {
                let gray = luminance(px, i);
                for c in 0..IMAGE_CHANNELS {
                    let j = c * IMAGE_PIXELS + i;
                    out[j] = gray + (px[j] - gray) * gain;
                }
            }
            out
        }
    };
    let out = out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    LabeledImage {
        pixels: Tensor::new(img.pixels.shape().to_vec(), out).expect("same shape"),
        label: img.label,
    }
}
