//! Online test-time adaptation: predict on a batch, then take one optimizer
//! step on the configured parameter group.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::data::{to_batch, LabeledImage};
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::norm_stats::NormMode;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    Tent,
    Eata,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Buffer,
    Bn,
    BnBuffer,
}

impl ParamGroup {
    pub fn includes_buffer(self) -> bool {
        matches!(self, ParamGroup::Buffer | ParamGroup::BnBuffer)
    }

    pub fn includes_norm(self) -> bool {
        matches!(self, ParamGroup::Bn | ParamGroup::BnBuffer)
    }

    fn tag(self) -> &'static str {
        match self {
            ParamGroup::Buffer => "buffer",
            ParamGroup::Bn => "bn",
            ParamGroup::BnBuffer => "bn+buffer",
        }
    }
}

/// An experiment arm: a control or an (objective, parameter group) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Frozen model with source statistics.
    Source,
    /// Frozen model normalized with each test batch's own statistics.
    BnStats,
    Adapt(Objective, ParamGroup),
}

impl Method {
    pub fn uses_buffers(self) -> bool {
        matches!(self, Method::Adapt(_, g) if g.includes_buffer())
    }

    pub fn norm_mode(self) -> NormMode {
        match self {
            Method::Source => NormMode::SourceFrozen,
            _ => NormMode::TargetBatch,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Source => f.write_str("source"),
            Method::BnStats => f.write_str("bnstats"),
            Method::Adapt(o, g) => {
                let o = match o {
                    Objective::Tent => "tent",
                    Objective::Eata => "eata",
                };
                write!(f, "{o}@{}", g.tag())
            }
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "source" | "source-only" => return Ok(Method::Source),
            "bnstats" | "norm" => return Ok(Method::BnStats),
            _ => {}
        }
        let bad = || Error::config("method", format!("unknown method `{s}`"));
        let (o, g) = s.split_once('@').ok_or_else(bad)?;
        let objective = match o {
            "tent" => Objective::Tent,
            "eata" => Objective::Eata,
            _ => return Err(bad()),
        };
        let group = match g {
            "buffer" => ParamGroup::Buffer,
            "bn" => ParamGroup::Bn,
            "bn+buffer" | "buffer+bn" => ParamGroup::BnBuffer,
            _ => return Err(bad()),
        };
        Ok(Method::Adapt(objective, group))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EataConfig {
    /// λ.
    pub fisher_strength: f64,
    /// d; the entropy threshold is `d · ln K`.
    pub margin: f64,
    pub fisher_samples: usize,
    /// Weight selected samples by `exp(d·ln K − H)`; off gives plain masking.
    pub weighting: bool,
}

impl Default for EataConfig {
    fn default() -> Self {
        Self {
            fisher_strength: 1.0,
            margin: 0.4,
            fisher_samples: 2000,
            weighting: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub method: Method,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub eata: EataConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: Method::Adapt(Objective::Tent, ParamGroup::Buffer),
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_decay: 0.0,
            eata: EataConfig::default(),
            batch_size: 16,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("adapt.lr", "must be > 0"));
        }
        if self.eata.margin.is_nan() || self.eata.margin < 0.0 {
            return Err(Error::config("adapt.eata.margin", "must be >= 0"));
        }
        if self.eata.fisher_strength.is_nan() || self.eata.fisher_strength < 0.0 {
            return Err(Error::config("adapt.eata.lambda", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("adapt.bs", "must be >= 1"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EataState {
    pub fisher: IndexMap<String, Tensor>,
    pub anchor: IndexMap<String, Tensor>,
    pub threshold: f64,
    pub lambda: f64,
    pub weighting: bool,
}

impl EataState {
    pub fn new(
        fisher: IndexMap<String, Tensor>,
        anchor: IndexMap<String, Tensor>,
        num_classes: usize,
        cfg: &EataConfig,
    ) -> Self {
        Self {
            fisher,
            anchor,
            threshold: cfg.margin * (num_classes as f64).ln(),
            lambda: cfg.fisher_strength,
            weighting: cfg.weighting,
        }
    }

    /// Selection mask and weights for per-sample entropies.
    pub fn select(&self, entropies: &[f64]) -> (Vec<bool>, Vec<f64>) {
        let mask: Vec<bool> = entropies.iter().map(|&h| h < self.threshold).collect();
        let weights = entropies
            .iter()
            .zip(&mask)
            .map(|(&h, &m)| match (m, self.weighting) {
                (false, _) => 0.0,
                (true, false) => 1.0,
                (true, true) => (self.threshold - h).exp(),
            })
            .collect();
        (mask, weights)
    }
}

/// Running mean of squared per-sample gradients.
#[derive(Clone, Debug, Default)]
pub struct FisherAccumulator {
    sums: IndexMap<String, Tensor>,
    count: usize,
}

impl FisherAccumulator {
    pub fn add<'a>(&mut self, grads: impl IntoIterator<Item = (&'a str, &'a Tensor)>) {
        for (name, g) in grads {
            let slot = self
                .sums
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            slot.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(s, v)| *s += v * v);
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> IndexMap<String, Tensor> {
        let n = self.count.max(1) as f64;
        self.sums
            .into_iter()
            .map(|(k, t)| (k, t.map(|v| v / n)))
            .collect()
    }
}

/// Fisher diagonal over `group` from clean source samples. Each sample is
/// forwarded on its own with source statistics and differentiated through
/// the cross-entropy against its own argmax prediction.
pub fn estimate_fisher(
    model: &mut Backbone,
    group: &[String],
    source: &[LabeledImage],
    n_samples: usize,
) -> Result<IndexMap<String, Tensor>> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("empty Fisher sample set".into()));
    }
    if n_samples > source.len() {
        log::warn!(
            "requested {n_samples} Fisher samples but only {} available; using all",
            source.len()
        );
    }
    let prev = model.norms.mode();
    model.norms.set_mode(NormMode::SourceFrozen);
    let std = model.standardizer.clone();
    let mut acc = FisherAccumulator::default();
    let result = (|| {
        for im in source.iter().take(n_samples) {
            let x = to_batch(&[im], &std)?;
            let mut g = Graph::new();
            let pass = model.forward(&mut g, &x, false)?;
            let pred = g.value(pass.logits).argmax_rows();
            let loss = g.cross_entropy(pass.logits, &pred)?;
            let grads = g.backward(loss)?;
            let named: Vec<(&str, &Tensor)> = group
                .iter()
                .map(|n| {
                    grads
                        .by_name(n)
                        .map(|t| (n.as_str(), t))
                        .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{n}`")))
                })
                .collect::<Result<_>>()?;
            acc.add(named);
        }
        Ok(())
    })();
    model.norms.set_mode(prev);
    result?;
    Ok(acc.finish())
}

/// Mean softmax entropy of the logits.
pub fn tent_loss(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let h = g.softmax_entropy(logits)?;
    g.mean(h)
}

/// The EATA objective: weighted entropy over low-entropy samples plus the
/// Fisher-weighted anchor penalty on every parameter in `state.fisher`
/// present as a named leaf in `g`.
pub fn eata_loss(g: &mut Graph, logits: NodeId, state: &EataState) -> Result<(NodeId, Vec<bool>, Vec<f64>)> {
    let h = g.softmax_entropy(logits)?;
    let (mask, weights) = state.select(g.value(h).data());
    let selected = mask.iter().filter(|&&m| m).count();
    let mut loss = g.weighted_sum(h, weights.clone(), selected.max(1) as f64)?;
    if state.lambda > 0.0 {
        for (name, f) in &state.fisher {
            let Some(leaf) = g.find_named(name) else {
                continue;
            };
            let anchor = state.anchor.get(name).expect("anchor for every Fisher entry");
            let pen = g.quadratic_penalty(leaf, f.map(|v| v * state.lambda), anchor.clone())?;
            loss = g.add(loss, pen)?;
        }
    }
    Ok((loss, mask, weights))
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Prediction made before the update; `None` when the forward failed.
    pub logits: Option<Tensor>,
    /// NaN for control arms and skipped steps.
    pub loss: f64,
    pub skipped: bool,
    /// Samples that contributed entropy (EATA); batch size otherwise.
    pub selected: usize,
}

/// One adaptation run over a model: owns the optimizer and EATA state.
pub struct Engine {
    pub config: AdaptConfig,
    group: Vec<String>,
    adam: Option<Adam>,
    eata: Option<EataState>,
    skips: usize,
    steps: usize,
}

impl Engine {
    /// Freezes θ, marks the configured group trainable and sets the norm
    /// mode. EATA arms need clean source images for the Fisher estimate.
    pub fn new(model: &mut Backbone, config: AdaptConfig, fisher_source: Option<&[LabeledImage]>) -> Result<Self> {
        config.validate()?;
        model.freeze_backbone();
        model.norms.set_mode(config.method.norm_mode());
        let (objective, group_kind) = match config.method {
            Method::Source | Method::BnStats => {
                if let Some(bank) = model.bank_mut() {
                    bank.set_trainable(false);
                }
                return Ok(Self {
                    config,
                    group: Vec::new(),
                    adam: None,
                    eata: None,
                    skips: 0,
                    steps: 0,
                });
            }
            Method::Adapt(o, g) => (o, g),
        };
        let mut group = Vec::new();
        if group_kind.includes_norm() {
            model.norms.affine_trainable = true;
            group.extend(model.norms.affine_param_group(true)?);
        }
        match model.bank_mut() {
            Some(bank) => {
                bank.set_trainable(group_kind.includes_buffer());
                if group_kind.includes_buffer() {
                    group.extend(bank.trainable_names());
                }
            }
            None if group_kind.includes_buffer() => return Err(Error::NotAttached),
            None => {}
        }
        if group.is_empty() {
            return Err(Error::config("adapt.group", "no trainable parameters"));
        }
        let eata = match objective {
            Objective::Tent => None,
            Objective::Eata => {
                let source = fisher_source.ok_or_else(|| {
                    Error::config("adapt.eata", "Fisher estimation needs source samples")
                })?;
                let fisher = estimate_fisher(model, &group, source, config.eata.fisher_samples)?;
                let anchor = group
                    .iter()
                    .map(|n| (n.clone(), model.param(n).expect("group member").clone()))
                    .collect();
                Some(EataState::new(fisher, anchor, model.config.num_classes, &config.eata))
            }
        };
        let adam = Some(Adam::new(config.adam())?);
        Ok(Self {
            config,
            group,
            adam,
            eata,
            skips: 0,
            steps: 0,
        })
    }

    pub fn group(&self) -> &[String] {
        &self.group
    }

    pub fn optimizer(&self) -> Option<&Adam> {
        self.adam.as_ref()
    }

    pub fn eata_state(&self) -> Option<&EataState> {
        self.eata.as_ref()
    }

    pub fn skips(&self) -> usize {
        self.skips
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn skip(&mut self, logits: Option<Tensor>, reason: &dyn fmt::Display) -> StepOutcome {
        self.skips += 1;
        log::warn!("skipping adaptation step {}: {reason}", self.steps);
        StepOutcome {
            logits,
            loss: f64::NAN,
            skipped: true,
            selected: 0,
        }
    }

    /// Predicts on a standardized batch and then updates the group.
    pub fn step(&mut self, model: &mut Backbone, x: &Tensor) -> Result<StepOutcome> {
        self.steps += 1;
        model.norms.set_mode(self.config.method.norm_mode());
        let n = x.dims4("adapt_step")?.0;
        let Some(adam) = self.adam.as_mut() else {
            return match model.predict(x) {
                Ok(logits) => Ok(StepOutcome {
                    logits: Some(logits),
                    loss: f64::NAN,
                    skipped: false,
                    selected: n,
                }),
                Err(Error::NonFinite(op)) => Ok(self.skip(None, &op)),
                Err(e) => Err(e),
            };
        };
        let mut g = Graph::new();
        let pass = match model.forward(&mut g, x, false) {
            Ok(p) => p,
            Err(Error::NonFinite(op)) => return Ok(self.skip(None, &format!("non-finite {op}"))),
            Err(e) => return Err(e),
        };
        let logits = g.value(pass.logits).clone();
        let built = match &self.eata {
            None => tent_loss(&mut g, pass.logits).map(|l| (l, n)),
            Some(state) => eata_loss(&mut g, pass.logits, state)
                .map(|(l, mask, _)| (l, mask.iter().filter(|&&m| m).count())),
        };
        let (loss, selected) = match built {
            Ok(v) => v,
            Err(Error::NonFinite(op)) => return Ok(self.skip(Some(logits), &format!("non-finite {op}"))),
            Err(e) => return Err(e),
        };
        let value = g.value(loss).item();
        let grads: Gradients = match g.backward(loss) {
            Ok(gr) if value.is_finite() && gr.all_finite() => gr,
            Ok(_) => return Ok(self.skip(Some(logits), &"non-finite loss or gradient")),
            Err(Error::NonFinite(op)) => return Ok(self.skip(Some(logits), &format!("non-finite {op}"))),
            Err(e) => return Err(e),
        };
        adam.step_model(model, &self.group, &grads)?;
        Ok(StepOutcome {
            logits: Some(logits),
            loss: value,
            skipped: false,
            selected,
        })
    }
}
