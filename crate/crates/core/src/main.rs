use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use buffer_tta::checkpoint::{load_checkpoint, save_checkpoint};
use buffer_tta::data::{corrupt, generate_source, to_batch, CorruptionKind, CorruptionSpec, LabeledImage};
use buffer_tta::harness::report::{parse_metrics, svg_report, text_report};
use buffer_tta::harness::{
    feature_stats, feature_stats_csv, forgetting_probe, run_experiment, run_sweep, sweep_csv,
    write_outputs, ExperimentConfig, ProbeProtocol, Scenario,
};
use buffer_tta::model::{hex_digest, Backbone, BackboneConfig};
use buffer_tta::norm_stats::{NormKind, NormMode};
use buffer_tta::pretrain::{evaluate, pretrain_source, PretrainConfig};
use buffer_tta::{Error, Result};

/// Test-time adaptation with residual buffer layers.
#[derive(Parser)]
#[command(name = "btta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a source model on the synthetic task and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Stream corrupted data through one or more adaptation arms.
    Adapt(ExperimentArgs),
    /// Run an ablation grid (module, placement or alpha).
    Sweep {
        #[arg(long, value_parser = ["module", "placement", "alpha"])]
        kind: String,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Source error of a checkpoint on clean probe data.
    Probe {
        #[arg(long, default_value = "ckpt.btta")]
        ckpt: PathBuf,
        #[arg(long, default_value = "moving")]
        protocol: String,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 64)]
        bs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-channel feature statistics at an insertion point or stage output.
    Stats {
        #[arg(long, default_value = "ckpt.btta")]
        ckpt: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long)]
        corruption: Option<String>,
        #[arg(long, default_value_t = 5)]
        severity: u8,
        /// Normalization mode: source, target, moving or running.
        #[arg(long, default_value = "source")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a metrics CSV as text tables and an SVG plot.
    Report {
        metrics: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "ckpt.btta")]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    samples: usize,
    #[arg(long, default_value_t = 1000)]
    holdout: usize,
    #[arg(long, default_value_t = PretrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = PretrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = PretrainConfig::default().batch_size)]
    bs: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    /// bn or gn
    #[arg(long, default_value = "bn")]
    norm: String,
    #[arg(long, default_value_t = 4)]
    groups: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Arm tags, e.g. tent@buffer,tent@bn,source.
    #[arg(long, value_delimiter = ',')]
    method: Vec<String>,
    #[arg(long)]
    bs: Option<usize>,
    #[arg(long)]
    scenario: Option<String>,
    /// Corruption order (comma separated).
    #[arg(long)]
    corruption: Option<String>,
    #[arg(long)]
    severity: Option<u8>,
    #[arg(long)]
    per_domain: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Initial α and β of every buffer.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    design: Option<String>,
    #[arg(long)]
    placement: Option<String>,
    /// Stage subset (a, a+b, …) or @point,point.
    #[arg(long)]
    stages: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    probe_every: Option<usize>,
    #[arg(long)]
    probe_protocol: Option<String>,
    #[arg(long)]
    probe_size: Option<usize>,
    /// Batch sizes for sweeps (comma separated).
    #[arg(long)]
    sweep_bs: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall time per step.
    #[arg(long)]
    timing: bool,
    /// Extra `key=value` settings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ExperimentArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                ExperimentConfig::parse(&text)?
            }
            None => ExperimentConfig::default(),
        };
        let mut set = |k: &str, v: String| cfg.set(k, &v);
        if let Some(p) = &self.ckpt {
            set("checkpoint", p.display().to_string())?;
        }
        if !self.method.is_empty() {
            set("arms", self.method.join(","))?;
        }
        let pairs: [(&str, Option<String>); 13] = [
            ("scenario", self.scenario.clone()),
            ("adapt.bs", self.bs.map(|v| v.to_string())),
            ("stream.order", self.corruption.clone()),
            ("stream.severity", self.severity.map(|v| v.to_string())),
            ("stream.per_domain", self.per_domain.map(|v| v.to_string())),
            ("adapt.lr", self.lr.map(|v| v.to_string())),
            ("buffer.design", self.design.clone()),
            ("buffer.placement", self.placement.clone()),
            ("buffer.stages", self.stages.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("probe.every", self.probe_every.map(|v| v.to_string())),
            ("probe.protocol", self.probe_protocol.clone()),
            ("probe.size", self.probe_size.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                set(k, v)?;
            }
        }
        if let Some(a) = self.alpha {
            set("buffer.alpha", a.to_string())?;
            set("buffer.beta", a.to_string())?;
        }
        if let Some(v) = &self.sweep_bs {
            set("sweep.bs", v.clone())?;
        }
        if let Some(p) = &self.out {
            set("output", p.display().to_string())?;
        }
        if self.timing {
            set("output.timing", "true".into())?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(kv.as_str(), "expected KEY=VALUE"))?;
            set(k.trim(), v.trim().to_string())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &PathBuf, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let norm = match a.norm.as_str() {
        "bn" => NormKind::Batch,
        "gn" => NormKind::Group { groups: a.groups },
        other => return Err(Error::config("norm", format!("expected bn or gn, got `{other}`"))),
    };
    let config = BackboneConfig {
        base_channels: a.base_channels,
        blocks_per_stage: a.blocks,
        num_classes: a.classes,
        norm,
        ..BackboneConfig::default()
    };
    let mut model = Backbone::build(config, a.seed)?;
    let train = generate_source(a.samples, a.classes, a.seed);
    let holdout = generate_source(a.holdout.max(1), a.classes, a.seed.wrapping_add(1 << 32));
    let cfg = PretrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.bs,
        seed: a.seed,
    };
    let report = pretrain_source(&mut model, &train, &cfg)?;
    let acc = evaluate(&mut model, &holdout, 100)?;
    for (i, l) in report.epoch_loss.iter().enumerate() {
        println!("epoch {i}: loss {l:.4}");
    }
    println!("held-out accuracy: {:.2}%", 100.0 * acc);
    save_checkpoint(&model, &a.out)?;
    println!("theta sha256: {}", hex_digest(&model.hash_params()));
    println!("wrote {}", a.out.display());
    Ok(())
}

fn adapt(a: &ExperimentArgs) -> Result<()> {
    let cfg = a.config()?;
    let result = run_experiment(&cfg)?;
    write_outputs(&cfg, &result)?;
    print!("{}", text_report(&parse_metrics(&buffer_tta::harness::metrics_csv(&result.records()))?));
    println!("wrote {}", cfg.output.join("metrics.csv").display());
    Ok(())
}

fn sweep(kind: &str, a: &ExperimentArgs) -> Result<()> {
    let mut cfg = a.config()?;
    cfg.scenario = match kind {
        "module" => Scenario::AblationModule,
        "placement" => Scenario::AblationPlacement,
        _ => Scenario::AblationAlpha,
    };
    let base = load_checkpoint(&cfg.checkpoint)?;
    let rows = run_sweep(&cfg, &base)?;
    let csv = sweep_csv(&rows);
    let path = cfg.output.join(format!("sweep_{kind}.csv"));
    write(&path, &csv)?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(())
}

fn probe(ckpt: &PathBuf, protocol: &str, size: usize, bs: usize, seed: u64) -> Result<()> {
    let protocol: ProbeProtocol = protocol.parse()?;
    let mut model = load_checkpoint(ckpt)?;
    let set = generate_source(size.max(1), model.config.num_classes, seed.wrapping_add(buffer_tta::harness::run::PROBE_SEED));
    let err = forgetting_probe(&mut model, &set, protocol, bs)?;
    println!("source error ({protocol}): {:.2}%", 100.0 * err);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn stats(
    ckpt: &PathBuf,
    layer: &str,
    n: usize,
    corruption: &Option<String>,
    severity: u8,
    mode: &str,
    seed: u64,
    out: &Option<PathBuf>,
) -> Result<()> {
    let mut model = load_checkpoint(ckpt)?;
    let mut images = generate_source(n.max(1), model.config.num_classes, seed.wrapping_add(buffer_tta::harness::run::POOL_SEED));
    if let Some(kind) = corruption {
        let kind: CorruptionKind = kind.parse()?;
        images = images
            .iter()
            .enumerate()
            .map(|(i, im)| Ok(corrupt(im, &CorruptionSpec::new(kind, severity, seed ^ i as u64)?)))
            .collect::<Result<Vec<LabeledImage>>>()?;
    }
    model.norms.set_mode(mode.parse::<NormMode>()?);
    let refs: Vec<&LabeledImage> = images.iter().collect();
    let x = to_batch(&refs, &model.standardizer)?;
    let csv = feature_stats_csv(&feature_stats(&mut model, &x, layer)?);
    match out {
        Some(p) => write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn report(metrics: &PathBuf, svg: &Option<PathBuf>) -> Result<()> {
    let text = std::fs::read_to_string(metrics).map_err(|e| Error::io(metrics, e))?;
    let rows = parse_metrics(&text)?;
    print!("{}", text_report(&rows));
    if let Some(p) = svg {
        write(p, &svg_report(&rows))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Adapt(a) => adapt(a),
        Command::Sweep { kind, exp } => sweep(kind, exp),
        Command::Probe { ckpt, protocol, size, bs, seed } => probe(ckpt, protocol, *size, *bs, *seed),
        Command::Stats { ckpt, layer, n, corruption, severity, mode, seed, out } => {
            stats(ckpt, layer, *n, corruption, *severity, mode, *seed, out)
        }
        Command::Report { metrics, svg } => report(metrics, svg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
