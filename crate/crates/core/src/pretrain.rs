//! Supervised source training with Adam and cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::{fit_standardizer, to_batch, LabeledImage};
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::norm_stats::{NormKind, NormMode};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 3e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub initial_loss: f64,
}

/// Trains θ and the normalization affine parameters on `data` with a
/// cosine-annealed learning rate. The
/// standardizer is fitted on `data` first; source statistics are the
/// momentum average of the training-batch statistics. On return the model
/// is in source-frozen mode with running statistics reset to source.
pub fn pretrain_source(model: &mut Backbone, data: &[LabeledImage], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::config("pretrain", "epochs and batch size must be >= 1"));
    }
    model.standardizer = fit_standardizer(data)?;
    model.unfreeze_backbone();
    let mut group: Vec<String> = model.params.names().map(str::to_string).collect();
    group.extend(model.norms.affine_param_group(true)?);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = PretrainReport::default();
    model.norms.set_mode(NormMode::TargetBatch);
    let is_batch_norm = model.norms.kind == NormKind::Batch;
    let total_steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let mut global_step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<&LabeledImage> = chunk.iter().map(|&i| &data[i]).collect();
            let labels: Vec<usize> = images.iter().map(|im| im.label).collect();
            let x = to_batch(&images, &model.standardizer)?;
            let mut g = Graph::new();
            let pass = model.forward(&mut g, &x, false)?;
            let loss = g.cross_entropy(pass.logits, &labels);
            let loss = match loss {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_idx,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: value,
                });
            }
            if epoch == 0 && batch_idx == 0 {
                report.initial_loss = value;
            }
            total += value * chunk.len() as f64;
            let grads = g.backward(loss)?;
            if !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: value,
                });
            }
            // cosine annealing from lr to 0 over the whole run
            let progress = global_step as f64 / total_steps as f64;
            adam.config.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos());
            global_step += 1;
            adam.step_model(model, &group, &grads)?;
            if is_batch_norm {
                for (idx, stats) in pass.batch_stats.iter().enumerate() {
                    if let Some(s) = stats {
                        model.norms.accumulate_source(idx, s);
                    }
                }
            }
        }
        let mean = total / data.len() as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.4}");
        report.epoch_loss.push(mean);
    }
    model.norms.reset_running();
    model.norms.set_mode(NormMode::SourceFrozen);
    Ok(report)
}

/// Fraction of correctly classified images under source-frozen statistics.
pub fn evaluate(model: &mut Backbone, data: &[LabeledImage], batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let std = model.standardizer.clone();
    let mut correct = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let logits = model.predict_with_mode(&to_batch(&refs, &std)?, NormMode::SourceFrozen)?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(chunk)
            .filter(|(p, im)| **p == im.label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}
