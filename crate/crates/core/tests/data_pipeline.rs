use std::sync::Arc;

use buffer_tta::data::{
    build_stream, corrupt, encode_cifar10, fit_standardizer, generate_source, load_cifar10,
    parse_cifar10, write_cifar10, CorruptionKind, CorruptionSpec, StreamPlan,
};

/// Mean squared per-pixel change over the images.
fn distortion(kind: CorruptionKind, severity: u8, n: usize) -> f64 {
    let images = generate_source(n, 10, 77);
    let mut total = 0.0;
    for (i, im) in images.iter().enumerate() {
        let out = corrupt(im, &CorruptionSpec::new(kind, severity, 1000 + i as u64).unwrap());
        total += out
            .pixels
            .data()
            .iter()
            .zip(im.pixels.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / im.pixels.len() as f64;
    }
    total / n as f64
}

#[test]
fn severity_is_monotone_for_every_kind() {
    for kind in CorruptionKind::ALL {
        let d: Vec<f64> = (1..=5).map(|s| distortion(kind, s, 100)).collect();
        assert!(d[0] > 0.0, "{kind}: severity 1 changes nothing");
        assert!(d.windows(2).all(|w| w[1] >= w[0]), "{kind}: {d:?}");
    }
}

#[test]
fn cifar_fixture_round_trips() {
    let mut bytes = Vec::new();
    for (label, fill) in [(3u8, 0u8), (9, 255)] {
        bytes.push(label);
        bytes.extend((0..3072).map(|i| fill.wrapping_add((i % 7) as u8)));
    }
    let images = parse_cifar10(&bytes).unwrap();
    assert_eq!(images.len(), 2);
    assert_eq!(images[0].label, 3);
    assert_eq!(images[1].label, 9);
    assert_eq!(images[0].pixels.data()[1], 1.0 / 255.0);
    assert_eq!(images[0].pixels.data()[1024], (1024 % 7) as f64 / 255.0);
    assert_eq!(encode_cifar10(&images).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch.bin");
    write_cifar10(&path, &images).unwrap();
    let back = load_cifar10(&path).unwrap();
    assert_eq!(back, images);
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn truncated_cifar_is_rejected() {
    let bytes = vec![0u8; 3073 + 100];
    assert!(parse_cifar10(&bytes).is_err());
    let mut bad = vec![0u8; 3073];
    bad[0] = 10;
    assert!(parse_cifar10(&bad).is_err());
}

#[test]
fn standardized_stream_uses_source_statistics() {
    let source = generate_source(300, 10, 5);
    let std = fit_standardizer(&source).unwrap();
    let images: Vec<&_> = source.iter().collect();
    let x = buffer_tta::data::to_batch(&images, &std).unwrap();
    let plane = 1024;
    for c in 0..3 {
        let mut sum = 0.0;
        for n in 0..300 {
            let base = (n * 3 + c) * plane;
            sum += x.data()[base..base + plane].iter().sum::<f64>();
        }
        assert!((sum / (300 * plane) as f64).abs() < 1e-6);
    }
}

#[test]
fn continual_plan_follows_default_order() {
    let pool = Arc::new(generate_source(32, 10, 0));
    let plan = StreamPlan::continual(5, 16, 8, 1);
    let domains: Vec<String> = build_stream(&plan, pool, &Default::default())
        .unwrap()
        .map(|b| b.domain)
        .collect();
    let expect: Vec<String> = [
        "gaussian_noise",
        "shot_noise",
        "impulse_noise",
        "defocus_blur",
        "brightness",
        "contrast",
        "pixelate",
        "saturate",
    ]
    .iter()
    .flat_map(|d| [d.to_string(), d.to_string()])
    .collect();
    assert_eq!(domains, expect);
}

#[test]
fn stream_clones_replay_identically() {
    let pool = Arc::new(generate_source(32, 10, 0));
    let plan = StreamPlan::single(CorruptionKind::ShotNoise, 5, 24, 8, 2);
    let s = build_stream(&plan, pool, &Default::default()).unwrap();
    let a: Vec<Vec<u8>> = s.clone().map(|b| b.x.to_le_bytes()).collect();
    let b: Vec<Vec<u8>> = s.map(|b| b.x.to_le_bytes()).collect();
    assert_eq!(a, b);
}
