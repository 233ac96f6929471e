//! Normalization statistics and the modes that decide which statistics a
//! normalization layer uses.
//!
//! | mode            | normalizes with              | side effect                    |
//! |-----------------|------------------------------|--------------------------------|
//! | `SourceFrozen`  | source running stats         | none                           |
//! | `TargetBatch`   | statistics of the batch      | none                           |
//! | `MovingUpdate`  | running stats after update   | `run ← (1−m)·run + m·batch`    |
//! | `Running`       | running stats                | none                           |

use sha2::{Digest, Sha256};

use crate::autodiff::{ChannelStats, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormMode {
    SourceFrozen,
    TargetBatch,
    MovingUpdate,
    Running,
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" | "source-frozen" => Ok(Self::SourceFrozen),
            "target" | "target-batch" => Ok(Self::TargetBatch),
            "moving" | "moving-update" => Ok(Self::MovingUpdate),
            "running" => Ok(Self::Running),
            other => Err(Error::InvalidArgument(format!("unknown norm mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Group { groups: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mu_s: Vec<f64>,
    pub var_s: Vec<f64>,
    pub mu_run: Vec<f64>,
    pub var_run: Vec<f64>,
}

impl NormLayer {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            mu_s: vec![0.0; channels],
            var_s: vec![1.0; channels],
            mu_run: vec![0.0; channels],
            var_run: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mu_s.len()
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.name)
    }

    fn source_stats(&self) -> ChannelStats {
        ChannelStats {
            mean: self.mu_s.clone(),
            var: self.var_s.clone(),
        }
    }

    fn running_stats(&self) -> ChannelStats {
        ChannelStats {
            mean: self.mu_run.clone(),
            var: self.var_run.clone(),
        }
    }
}

fn blend(run: &mut [f64], batch: &[f64], momentum: f64) {
    for (r, b) in run.iter_mut().zip(batch) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormTable {
    pub kind: NormKind,
    pub layers: Vec<NormLayer>,
    mode: NormMode,
    pub momentum: f64,
    pub eps: f64,
    pub affine_trainable: bool,
}

impl NormTable {
    pub fn new(kind: NormKind, layers: Vec<NormLayer>) -> Self {
        Self {
            kind,
            layers,
            mode: NormMode::SourceFrozen,
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            affine_trainable: true,
        }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    /// Switches every layer at once.
    pub fn set_mode(&mut self, mode: NormMode) {
        self.mode = mode;
    }

    pub fn layer(&self, name: &str) -> Option<&NormLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Statistics layer `index` should normalize `input` with under the
    /// current mode; `None` means "use the batch's own statistics".
    /// `MovingUpdate` folds the batch into the running statistics first.
    pub fn statistics_for(&mut self, index: usize, input: &Tensor) -> Result<Option<ChannelStats>> {
        let momentum = self.momentum;
        let layer = &mut self.layers[index];
        Ok(match self.mode {
            NormMode::SourceFrozen => Some(layer.source_stats()),
            NormMode::TargetBatch => None,
            NormMode::Running => Some(layer.running_stats()),
            NormMode::MovingUpdate => {
                let batch = crate::autodiff::norm::channel_stats(input)?;
                if batch.mean.len() != layer.channels() {
                    return Err(Error::ChannelMismatch {
                        point: layer.name.clone(),
                        expected: layer.channels(),
                        found: batch.mean.len(),
                    });
                }
                blend(&mut layer.mu_run, &batch.mean, momentum);
                blend(&mut layer.var_run, &batch.var, momentum);
                Some(layer.running_stats())
            }
        })
    }

    /// Folds batch statistics into the *source* statistics (pretraining).
    pub fn accumulate_source(&mut self, index: usize, batch: &ChannelStats) {
        let m = self.momentum;
        let layer = &mut self.layers[index];
        blend(&mut layer.mu_s, &batch.mean, m);
        blend(&mut layer.var_s, &batch.var, m);
    }

    /// Resets post-deployment running statistics to the source statistics.
    pub fn reset_running(&mut self) {
        for l in &mut self.layers {
            l.mu_run.clone_from(&l.mu_s);
            l.var_run.clone_from(&l.var_s);
        }
    }

    pub fn snapshot(&self) -> NormTable {
        self.clone()
    }

    pub fn restore(&mut self, snapshot: &NormTable) -> Result<()> {
        if snapshot.layers.len() != self.layers.len()
            || snapshot
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(a, b)| a.name != b.name || a.channels() != b.channels())
        {
            return Err(Error::InvalidArgument(format!(
                "cannot restore a {}-layer snapshot into a {}-layer table",
                snapshot.layers.len(),
                self.layers.len()
            )));
        }
        self.clone_from(snapshot);
        Ok(())
    }

    /// Names of every (γ, β) pair, for optimizers that adapt normalization
    /// affine parameters. Group-norm affine must be requested explicitly.
    pub fn affine_param_group(&self, allow_group_norm: bool) -> Result<Vec<String>> {
        if matches!(self.kind, NormKind::Group { .. }) && !allow_group_norm {
            return Err(Error::InvalidArgument(
                "affine parameter group requested on a group-norm backbone".into(),
            ));
        }
        Ok(self
            .layers
            .iter()
            .flat_map(|l| [l.gamma_name(), l.beta_name()])
            .collect())
    }

    pub fn affine_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (layer, field) = name.rsplit_once('.')?;
        let l = self.layers.iter_mut().find(|l| l.name == layer)?;
        match field {
            "gamma" => Some(&mut l.gamma),
            "beta" => Some(&mut l.beta),
            _ => None,
        }
    }

    /// SHA-256 over (γ, β, μ_s, σ²_s) of every layer.
    pub fn hash_source_state(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update(l.name.as_bytes());
            for v in l.gamma.data().iter().chain(l.beta.data()).chain(&l.mu_s).chain(&l.var_s) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}
