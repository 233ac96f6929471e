//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Trend criteria (6–8) run the pretrained stand-in model on real streams and
//! take several minutes. Their failures are reported but only abort the run
//! when `BTTA_ACCEPTANCE_STRICT=1`; every other criterion is fatal.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use buffer_tta::adapt::{eata_loss, tent_loss, AdaptConfig, EataConfig, EataState, Engine, Method};
use buffer_tta::autodiff::norm::batch_norm;
use buffer_tta::autodiff::ops::{entropy, softmax_entropy};
use buffer_tta::autodiff::Graph;
use buffer_tta::buffer::{attach_buffers, detach_buffers, BufferSpec, Design};
use buffer_tta::checkpoint::{load_checkpoint, save_checkpoint};
use buffer_tta::data::{
    build_stream, corrupt, encode_cifar10, generate_source, load_cifar10, parse_cifar10,
    write_cifar10, CorruptionKind, CorruptionSpec, StreamPlan,
};
use buffer_tta::harness::{
    run_with_model, sweep_alpha, sweep_csv, sweep_module_design, sweep_placement, ArmResult,
    ExperimentConfig, ExperimentResult, Scenario,
};
use buffer_tta::model::{Backbone, BackboneConfig};
use buffer_tta::norm_stats::{NormKind, NormLayer, NormMode, NormTable};
use buffer_tta::optim::{Adam, AdamConfig};
use buffer_tta::pretrain::{evaluate, pretrain_source, PretrainConfig};
use buffer_tta::Tensor;
use common::*;

const SEEDS: [u64; 3] = [0, 1, 2];
const SOURCE_SAMPLES: usize = 3000;
const HOLDOUT_SAMPLES: usize = 1000;
/// Per-domain length of the continual stream used by criteria 7 and 8.
const CONTINUAL_PER_DOMAIN: usize = 500;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn checkpoint_path() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!(
        "acceptance-source-{}-{SOURCE_SAMPLES}x{}.btta",
        env!("CARGO_PKG_VERSION"),
        PretrainConfig::default().epochs
    ))
}

/// The default pretrained stand-in (same recipe as `btta pretrain`), cached
/// between runs.
fn source_model() -> &'static Backbone {
    static MODEL: OnceLock<Backbone> = OnceLock::new();
    MODEL.get_or_init(|| {
        let path = checkpoint_path();
        if let Ok(m) = load_checkpoint(&path) {
            return m;
        }
        let mut m = Backbone::build(BackboneConfig::default(), 0).unwrap();
        let train = generate_source(SOURCE_SAMPLES, 10, 0);
        pretrain_source(&mut m, &train, &PretrainConfig::default()).unwrap();
        save_checkpoint(&m, &path).unwrap();
        m
    })
}

fn bitwise_rows(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.bit_eq(b)
}

fn pretraining_gate() -> Outcome {
    let mut m = source_model().clone();
    let holdout = generate_source(HOLDOUT_SAMPLES, 10, 1 << 32);
    let acc = evaluate(&mut m, &holdout, 100).unwrap();
    ensure(acc >= 0.9, format!("held-out clean accuracy {:.2}% (gate 90%)", 100.0 * acc))
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut checks = vec![
        ("conv2d", check_conv()),
        ("batchnorm2d", check_batch_norm()),
        ("groupnorm", check_group_norm()),
        ("linear", check_linear()),
        ("softmax+cross_entropy", check_cross_entropy()),
        ("entropy", check_entropy()),
    ];
    for d in Design::ALL {
        checks.push((["buffer-1", "buffer-2", "buffer-3", "buffer-4"][d.number() as usize - 1], check_buffer_in_backbone(d)));
    }
    let secs = t.elapsed().as_secs_f64();
    let (worst_name, worst) = checks
        .iter()
        .copied()
        .fold(("", 0.0), |acc, c| if c.1 > acc.1 { c } else { acc });
    ensure(
        worst < MAX_REL_ERR && secs < 60.0,
        format!(
            "{} gradient checks, h = {FD_STEP:e}, worst rel err {worst:.2e} ({worst_name}), {secs:.1}s",
            checks.len()
        ),
    )
}

fn criterion_2() -> Outcome {
    let base = source_model();
    let x = random(&[100, 3, 32, 32], 2024);
    let mut frozen = base.clone();
    let mut adapted = base.clone();
    attach_buffers(&mut adapted, &BufferSpec::default_for_batch_size(16).with_scales(0.0, 0.0), 7).unwrap();
    let mut deep = base.clone();
    let all_stages = BufferSpec {
        selection: buffer_tta::buffer::Selection::Stages(vec![0, 1, 2]),
        ..BufferSpec::default()
    };
    attach_buffers(&mut deep, &all_stages.with_scales(0.0, 0.0), 8).unwrap();
    let mut same = true;
    for mode in [NormMode::SourceFrozen, NormMode::TargetBatch] {
        let want = frozen.predict_with_mode(&x, mode).unwrap();
        same &= bitwise_rows(&want, &adapted.predict_with_mode(&x, mode).unwrap());
        same &= bitwise_rows(&want, &deep.predict_with_mode(&x, mode).unwrap());
    }
    ensure(same, "100 random inputs, source-frozen and target-batch modes, bitwise".into())
}

fn criterion_3() -> Outcome {
    let base = source_model();
    let pool = Arc::new(generate_source(2000, 10, 11));
    let probe = random(&[32, 3, 32, 32], 33);
    let mut lines = Vec::new();
    let mut ok = true;
    for bs in [2usize, 16] {
        let mut m = base.clone();
        let theta = m.hash_params();
        let norm = m.norms.hash_source_state();
        let spec = BufferSpec::default_for_batch_size(bs);
        attach_buffers(&mut m, &spec, 0).unwrap();
        let alpha0 = m.bank().unwrap().buffers[0].params.tensor(&format!("buffer.{}.alpha", m.bank().unwrap().buffers[0].point)).unwrap().item();
        let method: Method = "tent@buffer".parse().unwrap();
        let mut engine = Engine::new(&mut m, AdaptConfig { batch_size: bs, ..AdaptConfig::for_method(method) }, None).unwrap();
        let plan = StreamPlan::continual(5, bs * 1000 / 8, bs, 0);
        let mut steps = 0;
        for batch in build_stream(&plan, pool.clone(), &m.standardizer).unwrap() {
            engine.step(&mut m, &batch.x).unwrap();
            steps += 1;
        }
        let bank = m.bank().unwrap();
        let alpha1 = bank.buffers[0].params.tensor(&format!("buffer.{}.alpha", bank.buffers[0].point)).unwrap().item();
        let moved = alpha1 != alpha0;
        let hashes = m.hash_params() == theta && m.norms.hash_source_state() == norm;
        detach_buffers(&mut m).unwrap();
        let mut reference = base.clone();
        let restored = [NormMode::SourceFrozen, NormMode::TargetBatch].iter().all(|&mode| {
            bitwise_rows(
                &m.predict_with_mode(&probe, mode).unwrap(),
                &reference.predict_with_mode(&probe, mode).unwrap(),
            )
        });
        ok &= steps == 1000 && moved && hashes && restored && engine.skips() == 0;
        lines.push(format!(
            "BS{bs}: {steps} steps, alpha {alpha0:.0e}->{alpha1:.3e}, hashes {}, detach {}",
            if hashes { "unchanged" } else { "CHANGED" },
            if restored { "bitwise" } else { "DIFFERS" }
        ));
    }
    ensure(ok, lines.join("; "))
}

/// Independent per-channel mean and biased variance.
fn naive_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        mean[ch] = m;
        var[ch] = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
    }
    (mean, var)
}

fn criterion_4() -> Outcome {
    let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
    let (y, _, _) = batch_norm(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), None, 0.0).unwrap();
    let bn_err = (y.data()[0] + 1.0).abs().max((y.data()[1] - 1.0).abs());
    let (y5, _, _) = batch_norm(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), None, 1e-5).unwrap();
    let eps_err = (y5.data()[1] - 1.0 / (1.0f64 + 1e-5).sqrt()).abs();

    let c = 3;
    let mut layer = NormLayer::new("l", c);
    layer.mu_run = vec![0.5, -1.0, 2.0];
    layer.var_run = vec![1.0, 0.25, 4.0];
    let (mut mu, mut var) = (layer.mu_run.clone(), layer.var_run.clone());
    let mut table = NormTable::new(NormKind::Batch, vec![layer]);
    table.set_mode(NormMode::MovingUpdate);
    let m = table.momentum;
    let mut batches = Vec::new();
    for t in 0..10 {
        let b = random(&[4, c, 3, 3], 400 + t).map(|v| v * (1.0 + t as f64) + t as f64);
        table.statistics_for(0, &b).unwrap();
        batches.push(naive_stats(&b));
    }
    for ch in 0..c {
        let steps = batches.len() as i32;
        mu[ch] *= (1.0 - m).powi(steps);
        var[ch] *= (1.0 - m).powi(steps);
        for (t, (bm, bv)) in batches.iter().enumerate() {
            let w = m * (1.0 - m).powi(steps - 1 - t as i32);
            mu[ch] += w * bm[ch];
            var[ch] += w * bv[ch];
        }
    }
    let l = &table.layers[0];
    let moving_err = (0..c)
        .map(|ch| (l.mu_run[ch] - mu[ch]).abs().max((l.var_run[ch] - var[ch]).abs()))
        .fold(0.0, f64::max);

    let mut model = source_model().clone();
    let batch = random(&[8, 3, 32, 32], 4040);
    let full = model.predict_with_mode(&batch, NormMode::SourceFrozen).unwrap();
    let mut invariant = true;
    for (picks, shift) in [(vec![3usize], 0.0), (vec![5, 1, 3], 0.0), (vec![3, 0], 10.0)] {
        let mut items: Vec<Tensor> = picks.iter().map(|&i| batch.select(i)).collect();
        if shift != 0.0 {
            items[1] = items[1].map(|v| v + shift);
        }
        let out = model.predict_with_mode(&Tensor::stack(&items).unwrap(), NormMode::SourceFrozen).unwrap();
        let pos = picks.iter().position(|&i| i == 3).unwrap();
        invariant &= out.select(pos).bit_eq(&full.select(3));
    }
    ensure(
        bn_err < 1e-9 && eps_err < 1e-15 && moving_err < 1e-9 && invariant,
        format!(
            "BN {{1,3}} err {bn_err:.1e} (eps 1e-5 variant {eps_err:.1e}), moving closed form err {moving_err:.1e} over 10 steps, source-frozen composition {}",
            if invariant { "bitwise invariant" } else { "VARIES" }
        ),
    )
}

fn naive_entropy(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row.iter()
        .map(|v| {
            let p = (v - max).exp() / z;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

fn criterion_5() -> Outcome {
    let k = 10;
    let ln10 = (k as f64).ln();
    let uniform = entropy(&Tensor::full(&[1, k], 0.1)).unwrap().item();
    let (from_logits, _) = softmax_entropy(&Tensor::zeros(&[1, k])).unwrap();
    let h_err = (uniform - ln10).abs().max((from_logits.item() - ln10).abs());

    let state = EataState::new(Default::default(), Default::default(), k, &EataConfig::default());
    let thr_err = (state.threshold - 0.4 * ln10).abs();
    let n = 24;
    let logits = Tensor::new(
        vec![n, k],
        (0..n)
            .flat_map(|i| (0..k).map(move |j| if j == i % k { 0.35 * i as f64 } else { 0.01 * j as f64 }))
            .collect(),
    )
    .unwrap();
    let brute: Vec<bool> = logits.data().chunks(k).map(|r| naive_entropy(r) < 0.4 * ln10).collect();
    let mut g = Graph::new();
    let z = g.leaf(logits.clone(), true);
    let (_, mask, _) = eata_loss(&mut g, z, &state).unwrap();
    let selected = brute.iter().filter(|&&m| m).count();
    let mask_ok = mask == brute && selected > 0 && selected < n;

    let wide = EataConfig { margin: f64::INFINITY, fisher_strength: 0.0, weighting: false, ..Default::default() };
    let plain = EataState::new(Default::default(), Default::default(), k, &wide);
    let mut worst_eq = 0.0f64;
    for seed in 0..5 {
        let x = random(&[16, k], 500 + seed).map(|v| 4.0 * v);
        let mut g = Graph::new();
        let z = g.leaf(x, true);
        let t = tent_loss(&mut g, z).unwrap();
        let (e, _, _) = eata_loss(&mut g, z, &plain).unwrap();
        worst_eq = worst_eq.max((g.value(t).item() - g.value(e).item()).abs());
    }

    let cfg = AdamConfig::default();
    let mut adam = Adam::new(cfg).unwrap();
    let mut p = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
    let mut reference = p.data().to_vec();
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    for t in 1..=10 {
        let grad: Vec<f64> = (0..3).map(|j| ((t * 7 + j * 3) as f64).sin() * (j + 1) as f64).collect();
        adam.step("p", &mut p, &Tensor::new(vec![3], grad.clone()).unwrap()).unwrap();
        for j in 0..3 {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
            let mh = m[j] / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v[j] / (1.0 - cfg.beta2.powi(t as i32));
            reference[j] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    let adam_err = p.data().iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(
        h_err < 1e-12 && thr_err < 1e-12 && mask_ok && worst_eq < 1e-12 && adam_err < 1e-12,
        format!(
            "H(uniform) err {h_err:.1e}, threshold err {thr_err:.1e}, mask {selected}/{n} {}, EATA-TENT gap {worst_eq:.1e}, Adam 10-step err {adam_err:.1e}",
            if mask_ok { "matches" } else { "MISMATCH" }
        ),
    )
}

fn experiment(scenario: Scenario, arms: &str, bs: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { scenario, seed, ..Default::default() };
    cfg.set("arms", arms).unwrap();
    cfg.set("adapt.bs", &bs.to_string()).unwrap();
    cfg
}

fn arm<'a>(r: &'a ExperimentResult, tag: &str) -> &'a ArmResult {
    r.arm(tag.parse().unwrap()).unwrap()
}

fn criterion_6() -> Outcome {
    let base = source_model();
    let t = Instant::now();
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let mut small = experiment(Scenario::Single, "tent@buffer,tent@bn", 2, seed);
        small.set("stream.order", "gaussian_noise").unwrap();
        let mut large = experiment(Scenario::Single, "source,tent@buffer", 16, seed);
        large.set("stream.order", "gaussian_noise").unwrap();
        let s = run_with_model(&small, base).unwrap();
        let l = run_with_model(&large, base).unwrap();
        let (buf2, bn2) = (arm(&s, "tent@buffer").mean_err(), arm(&s, "tent@bn").mean_err());
        let (buf16, src16) = (arm(&l, "tent@buffer").mean_err(), arm(&l, "source").mean_err());
        ok &= buf2 < bn2 && buf16 < src16;
        lines.push(format!(
            "seed {seed}: BS2 buffer {:.2}% vs bn {:.2}%, BS16 buffer {:.2}% vs source {:.2}%",
            100.0 * buf2,
            100.0 * bn2,
            100.0 * buf16,
            100.0 * src16
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    lines.push(format!("{secs:.0}s"));
    ensure(ok && secs < 600.0, lines.join("; "))
}

/// Continual BS16 runs with moving-protocol probes, shared by criteria 7
/// and 8.
fn continual_runs() -> &'static Vec<ExperimentResult> {
    static RUNS: OnceLock<Vec<ExperimentResult>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = experiment(Scenario::Forgetting, "source,tent@buffer,tent@bn", 16, seed);
                cfg.per_domain = CONTINUAL_PER_DOMAIN;
                cfg.set("probe.every", "20").unwrap();
                cfg.set("probe.protocol", "moving").unwrap();
                run_with_model(&cfg, source_model()).unwrap()
            })
            .collect()
    })
}

fn criterion_7() -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for (seed, r) in SEEDS.iter().zip(continual_runs()) {
        let (buf, src, bn) = (arm(r, "tent@buffer"), arm(r, "source"), arm(r, "tent@bn"));
        ok &= buf.mean_err() < src.mean_err() && buf.final_domain_err() < bn.final_domain_err();
        lines.push(format!(
            "seed {seed}: mean buffer {:.2}% vs source {:.2}% (bn {:.2}%), final domain buffer {:.2}% vs bn {:.2}%",
            100.0 * buf.mean_err(),
            100.0 * src.mean_err(),
            100.0 * bn.mean_err(),
            100.0 * buf.final_domain_err(),
            100.0 * bn.final_domain_err()
        ));
    }
    ensure(ok, lines.join("; "))
}

fn criterion_8() -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for (seed, r) in SEEDS.iter().zip(continual_runs()) {
        let (buf, bn) = (arm(r, "tent@buffer"), arm(r, "tent@bn"));
        let initial = buf.probes[0].src_err;
        let peak = buf.probes.iter().map(|p| p.src_err).fold(f64::NEG_INFINITY, f64::max);
        let buf_final = buf.probes.last().unwrap().src_err;
        let bn_final = bn.probes.last().unwrap().src_err;
        ok &= peak - initial <= 0.05 && buf_final < bn_final;
        lines.push(format!(
            "seed {seed}: buffer src err {:.2}% -> peak {:.2}% final {:.2}% ({} probes), bn final {:.2}%",
            100.0 * initial,
            100.0 * peak,
            100.0 * buf_final,
            buf.probes.len(),
            100.0 * bn_final
        ));
    }
    ensure(ok, lines.join("; "))
}

fn criterion_9() -> Outcome {
    let base = source_model();
    let mut cfg = experiment(Scenario::AblationModule, "tent@buffer", 16, 0);
    cfg.per_domain = 64;
    cfg.set("stream.order", "gaussian_noise").unwrap();
    let module = sweep_module_design(&cfg, base).unwrap();
    let placement = sweep_placement(&cfg, base).unwrap();
    let alpha = sweep_alpha(&cfg, base).unwrap();
    let reproducible = sweep_csv(&module) == sweep_csv(&sweep_module_design(&cfg, base).unwrap())
        && sweep_csv(&placement) == sweep_csv(&sweep_placement(&cfg, base).unwrap())
        && sweep_csv(&alpha) == sweep_csv(&sweep_alpha(&cfg, base).unwrap());
    let control = alpha.iter().find(|r| r.alpha == 0.0);
    let control_ok = control.is_some_and(|r| Some(r.step0_err) == r.ref_step0_err);
    let grid: Vec<f64> = alpha.iter().filter(|r| r.alpha != 0.0).map(|r| r.alpha).collect();
    ensure(
        module.len() == 12
            && placement.len() == 7
            && grid == [1e-5, 1e-4, 1e-3, 1e-2, 1e-1]
            && control_ok
            && reproducible,
        format!(
            "module {} cells, placement {} cells, alpha {} + control (step-0 {}), CSVs {}",
            module.len(),
            placement.len(),
            grid.len(),
            if control_ok { "matches source" } else { "MISMATCH" },
            if reproducible { "byte-identical" } else { "DIFFER" }
        ),
    )
}

fn criterion_10() -> Outcome {
    let mut bytes = Vec::new();
    for i in 0..5u8 {
        bytes.push(i * 2);
        bytes.extend((0..3072u32).map(|p| ((p * 31 + i as u32 * 17) % 256) as u8));
    }
    let images = parse_cifar10(&bytes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("fixture.bin");
    write_cifar10(&fixture, &images).unwrap();
    let cifar_ok = encode_cifar10(&images).unwrap() == bytes
        && std::fs::read(&fixture).unwrap() == bytes
        && load_cifar10(&fixture).unwrap() == images;

    let seeded = generate_source(100, 10, 1234);
    let mut monotone = true;
    for kind in CorruptionKind::ALL {
        let d: Vec<f64> = (1..=5)
            .map(|sev| {
                seeded
                    .iter()
                    .enumerate()
                    .map(|(i, im)| {
                        let out = corrupt(im, &CorruptionSpec::new(kind, sev, i as u64).unwrap());
                        out.pixels.data().iter().zip(im.pixels.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                    })
                    .sum()
            })
            .collect();
        monotone &= d[0] > 0.0 && d.windows(2).all(|w| w[1] >= w[0]);
    }

    let ckpt = checkpoint_path();
    source_model();
    let run = |out: &std::path::Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_btta"))
            .env("BTTA_THREADS", "1")
            .args(["adapt", "--scenario", "continual", "--method", "source,tent@buffer,eata@bn"])
            .args(["--bs", "8", "--per-domain", "16", "--seed", "3", "--set", "adapt.eata.fisher_samples=64"])
            .arg("--ckpt")
            .arg(&ckpt)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    let csv_ok = a == b && a.iter().filter(|&&c| c == b'\n').count() == 1 + 3 * 16;
    ensure(
        cifar_ok && monotone && csv_ok,
        format!(
            "CIFAR fixture {}, severity monotone for 8 kinds over 100 images: {}, metrics CSV {}",
            if cifar_ok { "round-trips" } else { "DIFFERS" },
            monotone,
            if csv_ok { "byte-identical" } else { "DIFFERS" }
        ),
    )
}

fn main() {
    let strict = std::env::var("BTTA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [(&str, bool, fn() -> Outcome); 11] = [
        ("pretraining gate", false, pretraining_gate),
        ("criterion 1", false, criterion_1),
        ("criterion 2", false, criterion_2),
        ("criterion 3", false, criterion_3),
        ("criterion 4", false, criterion_4),
        ("criterion 5", false, criterion_5),
        ("criterion 6", true, criterion_6),
        ("criterion 7", true, criterion_7),
        ("criterion 8", true, criterion_8),
        ("criterion 9", false, criterion_9),
        ("criterion 10", false, criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut fatal = 0;
    let mut trend_fail = 0;
    for (name, trend, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                println!("[FAIL] {name}: {detail}");
                if trend && !strict {
                    trend_fail += 1;
                } else {
                    fatal += 1;
                }
            }
        }
    }
    println!("acceptance: {fatal} fatal failure(s), {trend_fail} trend failure(s) reported");
    if fatal > 0 {
        std::process::exit(1);
    }
}
