//! Experiment runner: one fresh model per arm, one pass over the stream,
//! one metrics record per batch.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde_json::{json, Value};

use crate::adapt::{AdaptConfig, Engine, Method, Objective};
use crate::buffer::{attach_buffers, BufferSpec};
use crate::checkpoint::load_checkpoint;
use crate::data::{build_stream, generate_source, load_cifar10, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{hex_digest, Backbone};

use super::config::ExperimentConfig;
use super::probe::forgetting_probe;

pub const POOL_SEED: u64 = 1_000_003;
pub const PROBE_SEED: u64 = 2_000_003;
pub const FISHER_SEED: u64 = 3_000_017;

/// Batches in the trailing window reported as `window_err`.
pub const ERROR_WINDOW: usize = 20;

/// Clean images an experiment draws on.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub pool: Arc<Vec<LabeledImage>>,
    pub probe: Vec<LabeledImage>,
    pub fisher: Vec<LabeledImage>,
}

impl ExperimentData {
    /// Synthetic images disjoint from any pretraining set, or the first
    /// images of a CIFAR-10 file when one is configured.
    pub fn for_config(cfg: &ExperimentConfig, num_classes: usize) -> Result<Self> {
        let needs_fisher = cfg
            .arms
            .iter()
            .any(|m| matches!(m, Method::Adapt(Objective::Eata, _)));
        let n_fisher = if needs_fisher { cfg.adapt.eata.fisher_samples } else { 0 };
        let n_probe = if cfg.probe.every > 0 { cfg.probe.size } else { 0 };
        if let Some(path) = &cfg.cifar10 {
            let all = load_cifar10(path)?;
            let pool: Vec<LabeledImage> = all.iter().take(cfg.pool_size).cloned().collect();
            let probe = all.iter().take(n_probe).cloned().collect();
            let fisher = all.iter().take(n_fisher).cloned().collect();
            return Ok(Self {
                pool: Arc::new(pool),
                probe,
                fisher,
            });
        }
        Ok(Self {
            pool: Arc::new(generate_source(cfg.pool_size, num_classes, POOL_SEED + cfg.seed)),
            probe: if n_probe > 0 {
                generate_source(n_probe, num_classes, PROBE_SEED + cfg.seed)
            } else {
                Vec::new()
            },
            fisher: if n_fisher > 0 {
                generate_source(n_fisher, num_classes, FISHER_SEED + cfg.seed)
            } else {
                Vec::new()
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub arm: String,
    pub step: usize,
    pub domain: String,
    pub bs: usize,
    pub loss: f64,
    pub wrong: usize,
    pub cum_err: f64,
    pub src_err: Option<f64>,
    pub skips: usize,
    pub theta_hash: String,
    pub ms: f64,
}

impl MetricsRecord {
    pub fn batch_err(&self) -> f64 {
        self.wrong as f64 / self.bs as f64
    }
}

pub const CSV_HEADER: &str = "run_id,arm,step,domain,bs,loss,batch_err,cum_err,src_err,skips,theta_hash,ms";

fn fmt_opt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{},{},{},{:.3}\n",
            r.run_id,
            r.arm,
            r.step,
            r.domain,
            r.bs,
            fmt_opt(r.loss),
            r.batch_err(),
            r.cum_err,
            r.src_err.map(fmt_opt).unwrap_or_default(),
            r.skips,
            r.theta_hash,
            r.ms
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbePoint {
    /// Batches consumed before the probe.
    pub batches_seen: usize,
    pub src_err: f64,
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub method: Method,
    pub spec: Option<BufferSpec>,
    pub records: Vec<MetricsRecord>,
    pub probes: Vec<ProbePoint>,
    pub skips: usize,
    pub theta_hash_start: String,
    pub theta_hash_end: String,
    pub source_state_start: String,
    pub source_state_end: String,
}

impl ArmResult {
    pub fn samples(&self) -> usize {
        self.records.iter().map(|r| r.bs).sum()
    }

    pub fn mean_err(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.cum_err)
    }

    fn error_over<'a>(records: impl Iterator<Item = &'a MetricsRecord>) -> f64 {
        let (w, n) = records.fold((0, 0), |(w, n), r| (w + r.wrong, n + r.bs));
        if n == 0 {
            f64::NAN
        } else {
            w as f64 / n as f64
        }
    }

    /// Error over the trailing `ERROR_WINDOW` batches.
    pub fn window_err(&self) -> f64 {
        let start = self.records.len().saturating_sub(ERROR_WINDOW);
        Self::error_over(self.records[start..].iter())
    }

    /// Error per domain in first-appearance order.
    pub fn domain_errors(&self) -> Vec<(String, f64)> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.records {
            if !names.contains(&r.domain.as_str()) {
                names.push(&r.domain);
            }
        }
        names
            .into_iter()
            .map(|d| {
                (
                    d.to_string(),
                    Self::error_over(self.records.iter().filter(|r| r.domain == d)),
                )
            })
            .collect()
    }

    /// Error on the batches of the last domain in the stream.
    pub fn final_domain_err(&self) -> f64 {
        match self.records.last() {
            Some(last) => Self::error_over(self.records.iter().filter(|r| r.domain == last.domain)),
            None => f64::NAN,
        }
    }

    pub fn step0_err(&self) -> f64 {
        self.records.first().map_or(f64::NAN, MetricsRecord::batch_err)
    }

    pub fn summary(&self) -> Value {
        let domains: serde_json::Map<String, Value> = self
            .domain_errors()
            .into_iter()
            .map(|(d, e)| (d, json!(e)))
            .collect();
        let probes: Vec<Value> = self
            .probes
            .iter()
            .map(|p| json!({"batches_seen": p.batches_seen, "src_err": p.src_err}))
            .collect();
        json!({
            "arm": self.method.to_string(),
            "samples": self.samples(),
            "mean_err": self.mean_err(),
            "window_err": self.window_err(),
            "final_domain_err": self.final_domain_err(),
            "domain_err": domains,
            "skips": self.skips,
            "probes": probes,
            "theta_hash_start": self.theta_hash_start,
            "theta_hash_end": self.theta_hash_end,
            "source_state_start": self.source_state_start,
            "source_state_end": self.source_state_end,
        })
    }
}

/// Options for a single arm beyond the experiment config.
#[derive(Clone, Debug)]
pub struct ArmPlan {
    pub method: Method,
    pub batch_size: usize,
    /// Buffer spec for buffer-using methods; defaults from the config.
    pub spec: Option<BufferSpec>,
    pub run_id: String,
    pub probes: bool,
}

pub fn run_arm(cfg: &ExperimentConfig, base: &Backbone, data: &ExperimentData, plan: &ArmPlan) -> Result<ArmResult> {
    let mut model = base.clone();
    let spec = if plan.method.uses_buffers() {
        let spec = plan.spec.clone().unwrap_or_else(|| cfg.buffer_spec(plan.batch_size));
        attach_buffers(&mut model, &spec, cfg.seed)?;
        Some(spec)
    } else {
        None
    };
    let adapt = AdaptConfig {
        method: plan.method,
        batch_size: plan.batch_size,
        seed: cfg.seed,
        ..cfg.adapt.clone()
    };
    let fisher = (!data.fisher.is_empty()).then_some(&data.fisher[..]);
    let mut engine = Engine::new(&mut model, adapt, fisher)?;
    let stream = build_stream(&cfg.stream_plan(plan.batch_size), data.pool.clone(), &model.standardizer)?;
    let arm = plan.method.to_string();
    let probe_every = if plan.probes { cfg.probe.every } else { 0 };
    let probe = |model: &mut Backbone| {
        forgetting_probe(model, &data.probe, cfg.probe.protocol, cfg.probe.batch_size)
    };
    let mut probes = Vec::new();
    if probe_every > 0 {
        probes.push(ProbePoint {
            batches_seen: 0,
            src_err: probe(&mut model)?,
        });
    }
    let theta_hash_start = hex_digest(&model.hash_params());
    let source_state_start = hex_digest(&model.norms.hash_source_state());
    let mut records = Vec::with_capacity(stream.num_batches());
    let (mut wrong_total, mut seen) = (0usize, 0usize);
    for (step, batch) in stream.enumerate() {
        let started = Instant::now();
        let out = engine.step(&mut model, &batch.x)?;
        let bs = batch.labels.len();
        let wrong = match &out.logits {
            Some(l) => l
                .argmax_rows()
                .iter()
                .zip(&batch.labels)
                .filter(|(p, y)| p != y)
                .count(),
            None => bs,
        };
        let ms = if cfg.timing {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        wrong_total += wrong;
        seen += bs;
        let src_err = if probe_every > 0 && (step + 1) % probe_every == 0 {
            let e = probe(&mut model)?;
            probes.push(ProbePoint {
                batches_seen: step + 1,
                src_err: e,
            });
            Some(e)
        } else {
            None
        };
        records.push(MetricsRecord {
            run_id: plan.run_id.clone(),
            arm: arm.clone(),
            step,
            domain: batch.domain,
            bs,
            loss: out.loss,
            wrong,
            cum_err: wrong_total as f64 / seen as f64,
            src_err,
            skips: engine.skips(),
            theta_hash: hex_digest(&model.hash_params()),
            ms,
        });
    }
    if probe_every > 0 && probes.last().map(|p| p.batches_seen) != Some(records.len()) {
        probes.push(ProbePoint {
            batches_seen: records.len(),
            src_err: probe(&mut model)?,
        });
    }
    Ok(ArmResult {
        method: plan.method,
        spec,
        records,
        probes,
        skips: engine.skips(),
        theta_hash_start,
        theta_hash_end: hex_digest(&model.hash_params()),
        source_state_start,
        source_state_end: hex_digest(&model.norms.hash_source_state()),
    })
}

/// Worker count from `BTTA_THREADS` (default 1).
pub fn thread_count() -> usize {
    std::env::var("BTTA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Runs independent jobs on up to `threads` workers; results come back in
/// job order.
pub fn run_parallel<T: Send, J: Sync>(
    jobs: &[J],
    threads: usize,
    f: impl Fn(&J) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if threads <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("collector lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("collector lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub run_id: String,
    pub arms: Vec<ArmResult>,
}

impl ExperimentResult {
    pub fn records(&self) -> Vec<MetricsRecord> {
        self.arms.iter().flat_map(|a| a.records.iter().cloned()).collect()
    }

    pub fn arm(&self, method: Method) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.method == method)
    }

    pub fn summary(&self, cfg: &ExperimentConfig) -> Value {
        json!({
            "run_id": self.run_id,
            "scenario": cfg.scenario.to_string(),
            "seed": cfg.seed,
            "config": cfg.to_text(),
            "arms": self.arms.iter().map(ArmResult::summary).collect::<Vec<_>>(),
        })
    }
}

/// Runs every arm of a non-sweep scenario against `base`.
pub fn run_with_model(cfg: &ExperimentConfig, base: &Backbone) -> Result<ExperimentResult> {
    cfg.validate()?;
    if cfg.scenario.is_sweep() {
        return Err(Error::config("scenario", "sweep scenarios run through the sweep entry points"));
    }
    let data = ExperimentData::for_config(cfg, base.config.num_classes)?;
    let run_id = format!("{}-s{}", cfg.scenario, cfg.seed);
    let plans: Vec<ArmPlan> = cfg
        .arms
        .iter()
        .map(|&method| ArmPlan {
            method,
            batch_size: cfg.adapt.batch_size,
            spec: None,
            run_id: run_id.clone(),
            probes: cfg.probe.every > 0,
        })
        .collect();
    let arms = run_parallel(&plans, thread_count(), |p| run_arm(cfg, base, &data, p))?;
    Ok(ExperimentResult { run_id, arms })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    if !cfg.checkpoint.exists() {
        return Err(Error::config(
            "checkpoint",
            format!("{} does not exist (run `pretrain` first)", cfg.checkpoint.display()),
        ));
    }
    let base = load_checkpoint(&cfg.checkpoint)?;
    run_with_model(cfg, &base)
}

/// Writes `metrics.csv` and `summary.json` under `cfg.output`.
pub fn write_outputs(cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    let dir = &cfg.output;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("metrics.csv");
    std::fs::write(&csv, metrics_csv(&result.records())).map_err(|e| Error::io(&csv, e))?;
    let js = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&result.summary(cfg)).expect("summary serializes") + "\n";
    std::fs::write(&js, text).map_err(|e| Error::io(&js, e))?;
    Ok(())
}
