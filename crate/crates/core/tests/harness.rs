use buffer_tta::adapt::Method;
use buffer_tta::data::generate_source;
use buffer_tta::harness::{
    feature_stats, forgetting_probe, metrics_csv, run_with_model, sweep_alpha, sweep_csv,
    sweep_module_design, sweep_placement, ExperimentConfig, ProbeProtocol, Scenario,
};
use buffer_tta::model::{Backbone, BackboneConfig};
use buffer_tta::pretrain::{pretrain_source, PretrainConfig};
use buffer_tta::Error;

fn small_model() -> Backbone {
    let cfg = BackboneConfig {
        base_channels: 4,
        blocks_per_stage: 1,
        ..BackboneConfig::default()
    };
    let mut m = Backbone::build(cfg, 3).unwrap();
    let data = generate_source(96, 10, 4);
    pretrain_source(&mut m, &data, &PretrainConfig { epochs: 1, batch_size: 32, ..Default::default() }).unwrap();
    m
}

fn small_config(scenario: Scenario, arms: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        scenario,
        per_domain: 24,
        pool_size: 48,
        ..Default::default()
    };
    cfg.set("arms", arms).unwrap();
    cfg.set("adapt.bs", "8").unwrap();
    cfg.set("adapt.eata.fisher_samples", "16").unwrap();
    cfg
}

#[test]
fn identical_config_gives_identical_csv() {
    let base = small_model();
    let cfg = small_config(Scenario::Single, "source,tent@buffer,eata@bn");
    let a = metrics_csv(&run_with_model(&cfg, &base).unwrap().records());
    let b = metrics_csv(&run_with_model(&cfg, &base).unwrap().records());
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 1 + 3 * 3);
}

#[test]
fn arms_do_not_share_state() {
    let base = small_model();
    let together = run_with_model(&small_config(Scenario::Single, "tent@bn,tent@buffer"), &base).unwrap();
    let alone = run_with_model(&small_config(Scenario::Single, "tent@buffer"), &base).unwrap();
    let m: Method = "tent@buffer".parse().unwrap();
    assert_eq!(together.arm(m).unwrap().records, alone.arm(m).unwrap().records);
}

#[test]
fn cumulative_error_matches_wrong_counts() {
    let base = small_model();
    let mut cfg = small_config(Scenario::Continual, "tent@buffer");
    cfg.per_domain = 8;
    let res = run_with_model(&cfg, &base).unwrap();
    let recs = &res.arms[0].records;
    assert_eq!(recs.len(), 8);
    let (mut wrong, mut seen) = (0, 0);
    for r in recs {
        wrong += r.wrong;
        seen += r.bs;
        assert_eq!(r.cum_err, wrong as f64 / seen as f64);
    }
    let arm = &res.arms[0];
    assert_eq!(arm.theta_hash_start, arm.theta_hash_end);
    assert!(recs.iter().all(|r| r.theta_hash == arm.theta_hash_start));
    assert_eq!(arm.source_state_start, arm.source_state_end);
}

#[test]
fn probes_land_on_schedule() {
    let base = small_model();
    let mut cfg = small_config(Scenario::Forgetting, "tent@buffer");
    cfg.per_domain = 8;
    cfg.set("probe.every", "3").unwrap();
    cfg.set("probe.size", "16").unwrap();
    let res = run_with_model(&cfg, &base).unwrap();
    let seen: Vec<usize> = res.arms[0].probes.iter().map(|p| p.batches_seen).collect();
    assert_eq!(seen, vec![0, 3, 6, 8]);
    let rows: Vec<usize> = res.arms[0]
        .records
        .iter()
        .filter(|r| r.src_err.is_some())
        .map(|r| r.step + 1)
        .collect();
    assert_eq!(rows, vec![3, 6]);
}

#[test]
fn probe_leaves_model_untouched() {
    let mut m = small_model();
    let probe = generate_source(20, 10, 9);
    let norms = m.norms.clone();
    let hash = m.hash_params();
    for protocol in [ProbeProtocol::Moving, ProbeProtocol::Fixed] {
        let e = forgetting_probe(&mut m, &probe, protocol, 8).unwrap();
        assert!((0.0..=1.0).contains(&e));
        assert_eq!(m.norms, norms);
        assert_eq!(m.hash_params(), hash);
    }
}

#[test]
fn feature_stats_reports_every_channel() {
    let mut m = small_model();
    let x = buffer_tta::Tensor::full(&[2, 3, 32, 32], 0.25);
    let layer = m.tap_names()[0].clone();
    let rows = feature_stats(&mut m, &x, &layer).unwrap();
    assert_eq!(rows.len(), m.point_channels(&layer).unwrap());
    assert!(rows.iter().all(|r| r.var >= 0.0));
    assert!(matches!(feature_stats(&mut m, &x, "nowhere"), Err(Error::UnknownPoint(_))));
}

#[test]
fn sweeps_cover_their_grids_reproducibly() {
    let base = small_model();
    let mut cfg = small_config(Scenario::AblationModule, "tent@buffer");
    cfg.per_domain = 16;
    let module = sweep_module_design(&cfg, &base).unwrap();
    assert_eq!(module.len(), 12);
    let placement = sweep_placement(&cfg, &base).unwrap();
    assert_eq!(placement.len(), 7);
    let alpha = sweep_alpha(&cfg, &base).unwrap();
    assert_eq!(alpha.len(), 6);
    let control = alpha.iter().find(|r| r.alpha == 0.0).unwrap();
    assert_eq!(Some(control.step0_err), control.ref_step0_err);
    assert_eq!(sweep_csv(&alpha), sweep_csv(&sweep_alpha(&cfg, &base).unwrap()));
}

#[test]
fn config_text_round_trips() {
    let mut cfg = small_config(Scenario::Mixed, "source,eata@bn+buffer");
    cfg.set("buffer.design", "2").unwrap();
    cfg.set("probe.protocol", "fixed").unwrap();
    cfg.set("sweep.bs", "2,4").unwrap();
    let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    assert!(matches!(cfg.set("adapt.lr", "fast"), Err(Error::Config { .. })));
    assert!(matches!(cfg.set("nonsense", "1"), Err(Error::Config { .. })));
}
