//! Flat `key = value` experiment configuration with dotted keys.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::adapt::{AdaptConfig, Method};
use crate::buffer::{BufferSpec, Design, Placement, Selection};
use crate::data::{CorruptionKind, DomainSpec, ShuffleMode, StreamPlan};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    Single,
    Continual,
    Mixed,
    Forgetting,
    AblationModule,
    AblationPlacement,
    AblationAlpha,
}

impl Scenario {
    const NAMES: [(&'static str, Scenario); 7] = [
        ("single", Scenario::Single),
        ("continual", Scenario::Continual),
        ("mixed", Scenario::Mixed),
        ("forgetting", Scenario::Forgetting),
        ("ablation-module", Scenario::AblationModule),
        ("ablation-placement", Scenario::AblationPlacement),
        ("ablation-alpha", Scenario::AblationAlpha),
    ];

    pub fn is_sweep(self) -> bool {
        matches!(
            self,
            Scenario::AblationModule | Scenario::AblationPlacement | Scenario::AblationAlpha
        )
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = Self::NAMES.iter().find(|(_, s)| s == self).expect("listed").0;
        f.write_str(name)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::NAMES
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::config("scenario", format!("unknown scenario `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeProtocol {
    /// Refresh running statistics on the probe set, evaluate with them,
    /// then restore.
    Moving,
    /// Normalize each probe batch with its own statistics.
    Fixed,
}

impl fmt::Display for ProbeProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeProtocol::Moving => "moving",
            ProbeProtocol::Fixed => "fixed",
        })
    }
}

impl FromStr for ProbeProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving" => Ok(ProbeProtocol::Moving),
            "fixed" => Ok(ProbeProtocol::Fixed),
            other => Err(Error::config("probe.protocol", format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Probe after every this many batches (0 disables).
    pub every: usize,
    pub protocol: ProbeProtocol,
    pub size: usize,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            every: 0,
            protocol: ProbeProtocol::Moving,
            size: 256,
            batch_size: 64,
        }
    }
}

/// Explicit buffer overrides; anything unset falls back to the batch-size
/// dependent default.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BufferOverrides {
    pub design: Option<Design>,
    pub placement: Option<Placement>,
    pub selection: Option<Selection>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub train_scales: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub arms: Vec<Method>,
    pub adapt: AdaptConfig,
    pub buffer: BufferOverrides,
    /// Empty means the scenario default.
    pub order: Vec<CorruptionKind>,
    pub severity: u8,
    pub per_domain: usize,
    pub probe: ProbeConfig,
    /// Clean images the target domains are derived from.
    pub pool_size: usize,
    pub cifar10: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    pub sweep_alpha: Vec<f64>,
    pub sweep_bs: Vec<usize>,
    /// Record wall time per step (makes the CSV non-reproducible).
    pub timing: bool,
}

pub const DEFAULT_ALPHA_GRID: [f64; 5] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Single,
            arms: vec!["tent@buffer".parse().expect("valid tag")],
            adapt: AdaptConfig::default(),
            buffer: BufferOverrides::default(),
            order: Vec::new(),
            severity: 5,
            per_domain: 2000,
            probe: ProbeConfig::default(),
            pool_size: 2000,
            cifar10: None,
            checkpoint: PathBuf::from("ckpt.btta"),
            output: PathBuf::from("out"),
            seed: 0,
            sweep_alpha: DEFAULT_ALPHA_GRID.to_vec(),
            sweep_bs: Vec::new(),
            timing: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_list<T>(key: &str, value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).map_err(|e| Error::config(key, e.to_string())))
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), "expected `key = value`")
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one setting; the key is the dotted path used in config files.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.adapt;
        match key {
            "scenario" => self.scenario = value.parse()?,
            "arms" | "methods" => self.arms = parse_list(key, value, |s| s.parse())?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "output" => self.output = PathBuf::from(value),
            "output.timing" => self.timing = parse_bool(key, value)?,
            "adapt.lr" => a.lr = parse(key, value)?,
            "adapt.beta1" => a.adam_beta1 = parse(key, value)?,
            "adapt.beta2" => a.adam_beta2 = parse(key, value)?,
            "adapt.weight_decay" => a.weight_decay = parse(key, value)?,
            "adapt.bs" | "adapt.batch_size" => a.batch_size = parse(key, value)?,
            "adapt.eata.lambda" => a.eata.fisher_strength = parse(key, value)?,
            "adapt.eata.margin" => a.eata.margin = parse(key, value)?,
            "adapt.eata.fisher_samples" => a.eata.fisher_samples = parse(key, value)?,
            "adapt.eata.weighting" => a.eata.weighting = parse_bool(key, value)?,
            "buffer.design" => self.buffer.design = Some(value.parse()?),
            "buffer.placement" => self.buffer.placement = Some(value.parse()?),
            "buffer.stages" | "buffer.points" => self.buffer.selection = Some(Selection::parse(value)?),
            "buffer.alpha" => self.buffer.alpha = Some(parse(key, value)?),
            "buffer.beta" => self.buffer.beta = Some(parse(key, value)?),
            "buffer.train_scales" => self.buffer.train_scales = Some(parse_bool(key, value)?),
            "stream.order" => self.order = parse_list(key, value, |s| s.parse())?,
            "stream.severity" => self.severity = parse(key, value)?,
            "stream.per_domain" => self.per_domain = parse(key, value)?,
            "probe.every" => self.probe.every = parse(key, value)?,
            "probe.protocol" => self.probe.protocol = value.parse()?,
            "probe.size" => self.probe.size = parse(key, value)?,
            "probe.bs" => self.probe.batch_size = parse(key, value)?,
            "data.pool" => self.pool_size = parse(key, value)?,
            "data.cifar10" => self.cifar10 = Some(PathBuf::from(value)),
            "sweep.alpha" => self.sweep_alpha = parse_list(key, value, |s| parse(key, s))?,
            "sweep.bs" => self.sweep_bs = parse_list(key, value, |s| parse(key, s))?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() && !self.scenario.is_sweep() {
            return Err(Error::config("arms", "at least one arm is required"));
        }
        self.adapt.validate()?;
        if !(1..=5).contains(&self.severity) {
            return Err(Error::config("stream.severity", "must be 1..=5"));
        }
        if self.per_domain == 0 {
            return Err(Error::config("stream.per_domain", "must be >= 1"));
        }
        if self.pool_size == 0 {
            return Err(Error::config("data.pool", "must be >= 1"));
        }
        if self.scenario == Scenario::Single && self.order.len() > 1 {
            return Err(Error::config("stream.order", "single scenario takes one corruption"));
        }
        if self.scenario == Scenario::Forgetting && self.probe.every == 0 {
            return Err(Error::config("probe.every", "forgetting scenario needs probes"));
        }
        if self.probe.every > 0 && (self.probe.size == 0 || self.probe.batch_size == 0) {
            return Err(Error::config("probe.size", "probe set must be nonempty"));
        }
        if self.scenario == Scenario::AblationAlpha && self.sweep_alpha.is_empty() {
            return Err(Error::config("sweep.alpha", "grid is empty"));
        }
        if self.sweep_bs.contains(&0) {
            return Err(Error::config("sweep.bs", "batch sizes must be >= 1"));
        }
        Ok(())
    }

    pub fn domain_order(&self) -> Vec<CorruptionKind> {
        if !self.order.is_empty() {
            return self.order.clone();
        }
        match self.scenario {
            Scenario::Continual | Scenario::Mixed | Scenario::Forgetting => CorruptionKind::ALL.to_vec(),
            _ => vec![CorruptionKind::GaussianNoise],
        }
    }

    pub fn stream_plan(&self, batch_size: usize) -> StreamPlan {
        StreamPlan {
            domains: self
                .domain_order()
                .into_iter()
                .map(|k| DomainSpec::corrupted(k, self.severity, self.per_domain))
                .collect(),
            mode: if self.scenario == Scenario::Mixed {
                ShuffleMode::Mixed
            } else {
                ShuffleMode::Sequential
            },
            batch_size,
            seed: self.seed,
        }
    }

    pub fn buffer_spec(&self, batch_size: usize) -> BufferSpec {
        let mut spec = BufferSpec::default_for_batch_size(batch_size);
        let o = &self.buffer;
        if let Some(d) = o.design {
            spec.design = d;
        }
        if let Some(p) = o.placement {
            spec.placement = p;
        }
        if let Some(s) = &o.selection {
            spec.selection = s.clone();
        }
        if let Some(a) = o.alpha {
            spec.alpha_init = a;
        }
        if let Some(b) = o.beta {
            spec.beta_init = b;
        }
        if let Some(t) = o.train_scales {
            spec.trainable_scales = t;
        }
        spec
    }

    pub fn sweep_batch_sizes(&self) -> Vec<usize> {
        if self.sweep_bs.is_empty() {
            vec![self.adapt.batch_size]
        } else {
            self.sweep_bs.clone()
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let a = &self.adapt;
        let join = |v: Vec<String>| v.join(",");
        let mut lines = vec![
            format!("scenario = {}", self.scenario),
            format!("arms = {}", join(self.arms.iter().map(|m| m.to_string()).collect())),
            format!("seed = {}", self.seed),
            format!("checkpoint = {}", self.checkpoint.display()),
            format!("output = {}", self.output.display()),
            format!("output.timing = {}", self.timing),
            format!("adapt.lr = {:e}", a.lr),
            format!("adapt.beta1 = {}", a.adam_beta1),
            format!("adapt.beta2 = {}", a.adam_beta2),
            format!("adapt.weight_decay = {}", a.weight_decay),
            format!("adapt.bs = {}", a.batch_size),
            format!("adapt.eata.lambda = {}", a.eata.fisher_strength),
            format!("adapt.eata.margin = {}", a.eata.margin),
            format!("adapt.eata.fisher_samples = {}", a.eata.fisher_samples),
            format!("adapt.eata.weighting = {}", a.eata.weighting),
        ];
        let b = &self.buffer;
        if let Some(d) = b.design {
            lines.push(format!("buffer.design = {}", d.number()));
        }
        if let Some(p) = b.placement {
            lines.push(format!("buffer.placement = {}", p.roman()));
        }
        if let Some(s) = &b.selection {
            lines.push(format!("buffer.stages = {}", s.label()));
        }
        if let Some(x) = b.alpha {
            lines.push(format!("buffer.alpha = {x:e}"));
        }
        if let Some(x) = b.beta {
            lines.push(format!("buffer.beta = {x:e}"));
        }
        if let Some(x) = b.train_scales {
            lines.push(format!("buffer.train_scales = {x}"));
        }
        if !self.order.is_empty() {
            lines.push(format!(
                "stream.order = {}",
                join(self.order.iter().map(|k| k.name().to_string()).collect())
            ));
        }
        lines.extend([
            format!("stream.severity = {}", self.severity),
            format!("stream.per_domain = {}", self.per_domain),
            format!("probe.every = {}", self.probe.every),
            format!("probe.protocol = {}", self.probe.protocol),
            format!("probe.size = {}", self.probe.size),
            format!("probe.bs = {}", self.probe.batch_size),
            format!("data.pool = {}", self.pool_size),
        ]);
        if let Some(p) = &self.cifar10 {
            lines.push(format!("data.cifar10 = {}", p.display()));
        }
        lines.push(format!(
            "sweep.alpha = {}",
            join(self.sweep_alpha.iter().map(|x| format!("{x:e}")).collect())
        ));
        if !self.sweep_bs.is_empty() {
            lines.push(format!(
                "sweep.bs = {}",
                join(self.sweep_bs.iter().map(|x| x.to_string()).collect())
            ));
        }
        lines.join("\n") + "\n"
    }
}
