//! Read-only diagnostics on an adapted model: source-error probes and
//! per-channel feature statistics.

use crate::autodiff::norm::channel_stats;
use crate::autodiff::Graph;
use crate::data::{to_batch, LabeledImage};
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::norm_stats::NormMode;
use crate::tensor::Tensor;

use super::config::ProbeProtocol;

fn count_wrong(logits: &Tensor, chunk: &[LabeledImage]) -> usize {
    logits
        .argmax_rows()
        .iter()
        .zip(chunk)
        .filter(|(p, im)| **p != im.label)
        .count()
}

/// Source error of the current model (θ, buffers, adapted affine) on clean
/// probe images. Normalization state and mode are restored afterwards.
pub fn forgetting_probe(
    model: &mut Backbone,
    probe: &[LabeledImage],
    protocol: ProbeProtocol,
    batch_size: usize,
) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::InvalidArgument("probe set is empty".into()));
    }
    let snapshot = model.norms.snapshot();
    let std = model.standardizer.clone();
    let batches: Vec<&[LabeledImage]> = probe.chunks(batch_size.max(1)).collect();
    let result = (|| {
        let mut wrong = 0;
        match protocol {
            ProbeProtocol::Moving => {
                model.norms.set_mode(NormMode::MovingUpdate);
                for chunk in &batches {
                    let refs: Vec<&LabeledImage> = chunk.iter().collect();
                    model.predict(&to_batch(&refs, &std)?)?;
                }
                model.norms.set_mode(NormMode::Running);
            }
            ProbeProtocol::Fixed => model.norms.set_mode(NormMode::TargetBatch),
        }
        for chunk in &batches {
            let refs: Vec<&LabeledImage> = chunk.iter().collect();
            wrong += count_wrong(&model.predict(&to_batch(&refs, &std)?)?, chunk);
        }
        Ok(wrong as f64 / probe.len() as f64)
    })();
    model.norms.restore(&snapshot)?;
    result
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRow {
    pub channel: usize,
    pub mean: f64,
    pub var: f64,
}

/// Per-channel mean and variance over `(N, H, W)` of the activation at a
/// named insertion point or stage output, under the model's current mode.
pub fn feature_stats(model: &mut Backbone, x: &Tensor, layer: &str) -> Result<Vec<ChannelRow>> {
    if !model.tap_names().iter().any(|n| n == layer) {
        return Err(Error::UnknownPoint(layer.to_string()));
    }
    let snapshot = model.norms.snapshot();
    let mut g = Graph::new();
    let pass = model.forward(&mut g, x, true);
    model.norms.restore(&snapshot)?;
    let pass = pass?;
    let stats = channel_stats(g.value(pass.taps[layer]))?;
    Ok(stats
        .mean
        .iter()
        .zip(&stats.var)
        .enumerate()
        .map(|(channel, (&mean, &var))| ChannelRow { channel, mean, var })
        .collect())
}

pub fn feature_stats_csv(rows: &[ChannelRow]) -> String {
    let mut out = String::from("channel,mean,var\n");
    for r in rows {
        out.push_str(&format!("{},{:.9e},{:.9e}\n", r.channel, r.mean, r.var));
    }
    out
}
