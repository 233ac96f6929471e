//! Finite-difference gradient oracle shared by the gradient and acceptance
//! suites.
#![allow(dead_code)]

use buffer_tta::adapt::tent_loss;
use buffer_tta::autodiff::{Graph, NodeId};
use buffer_tta::buffer::{attach_buffers, BufferSpec, Design, Selection};
use buffer_tta::model::{Backbone, BackboneConfig};
use buffer_tta::norm_stats::NormMode;
use buffer_tta::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const MAX_REL_ERR: f64 = 1e-4;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Builds `loss = f(leaves)` and compares every trainable leaf's analytic
/// gradient to central differences. Returns the worst relative error.
pub fn check(inputs: &[(Tensor, bool)], f: impl Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals
            .iter()
            .zip(inputs)
            .map(|(v, (_, t))| g.leaf(v.clone(), *t))
            .collect();
        let out = f(&mut g, &ids);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|(v, t)| g.leaf(v.clone(), *t)).collect();
    let out = f(&mut g, &ids);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, (val, trainable)) in inputs.iter().enumerate() {
        if !*trainable {
            assert!(grads.get(ids[k]).is_none(), "frozen input {k} received a gradient");
            continue;
        }
        let analytic = grads.get(ids[k]).expect("trainable input has a gradient");
        for j in 0..val.len() {
            let mut vals: Vec<Tensor> = inputs.iter().map(|(v, _)| v.clone()).collect();
            vals[k].data_mut()[j] += FD_STEP;
            let up = eval(&vals);
            vals[k].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&vals);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// carries a distinct upstream gradient.
pub fn probe_loss(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let n = g.value(x).len();
    let w = random(&[n], seed).into_data();
    g.weighted_sum(x, w, 1.0).unwrap()
}

pub fn check_conv() -> f64 {
    let mut worst: f64 = 0.0;
    for (stride, padding) in [(1, 1), (2, 0), (2, 1)] {
        let inputs = [
            (random(&[2, 3, 5, 5], 1), true),
            (random(&[4, 3, 3, 3], 2), true),
            (random(&[4], 3), true),
        ];
        worst = worst.max(check(&inputs, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), stride, padding).unwrap();
            probe_loss(g, y, 4)
        }));
    }
    worst
}

pub fn check_batch_norm() -> f64 {
    let inputs = [
        (random(&[3, 2, 3, 3], 5), true),
        (random(&[2], 6).map(|v| 1.0 + 0.5 * v), true),
        (random(&[2], 7), true),
    ];
    let batch = check(&inputs, |g, ids| {
        let (y, _) = g.batch_norm(ids[0], ids[1], ids[2], None, 1e-5).unwrap();
        probe_loss(g, y, 8)
    });
    let fixed = buffer_tta::autodiff::ChannelStats {
        mean: vec![0.3, -0.2],
        var: vec![0.7, 1.9],
    };
    let frozen = check(&inputs, |g, ids| {
        let (y, _) = g.batch_norm(ids[0], ids[1], ids[2], Some(&fixed), 1e-5).unwrap();
        probe_loss(g, y, 9)
    });
    batch.max(frozen)
}

pub fn check_group_norm() -> f64 {
    let inputs = [
        (random(&[2, 4, 3, 3], 10), true),
        (random(&[4], 11).map(|v| 1.0 + 0.5 * v), true),
        (random(&[4], 12), true),
    ];
    check(&inputs, |g, ids| {
        let y = g.group_norm(ids[0], 2, ids[1], ids[2], 1e-5).unwrap();
        probe_loss(g, y, 13)
    })
}

pub fn check_linear() -> f64 {
    let inputs = [
        (random(&[3, 5], 14), true),
        (random(&[4, 5], 15), true),
        (random(&[4], 16), true),
    ];
    check(&inputs, |g, ids| {
        let y = g.linear(ids[0], ids[1], ids[2]).unwrap();
        probe_loss(g, y, 17)
    })
}

pub fn check_cross_entropy() -> f64 {
    let inputs = [(random(&[4, 6], 18).map(|v| 3.0 * v), true)];
    check(&inputs, |g, ids| g.cross_entropy(ids[0], &[0, 5, 2, 2]).unwrap())
}

pub fn check_entropy() -> f64 {
    let inputs = [(random(&[4, 6], 19).map(|v| 3.0 * v), true)];
    check(&inputs, |g, ids| tent_loss(g, ids[0]).unwrap())
}

/// Small backbone with buffers of `design` attached at stages a and b,
/// scales away from zero so every φ entry carries gradient.
pub fn buffered_model(design: Design) -> Backbone {
    let cfg = BackboneConfig {
        base_channels: 2,
        blocks_per_stage: 1,
        input_shape: [3, 8, 8],
        ..BackboneConfig::default()
    };
    let mut m = Backbone::build(cfg, 21).unwrap();
    m.freeze_backbone();
    m.norms.set_mode(NormMode::TargetBatch);
    let spec = BufferSpec {
        design,
        selection: Selection::Stages(vec![0, 1]),
        ..BufferSpec::default()
    }
    .with_scales(0.3, -0.2);
    attach_buffers(&mut m, &spec, 22).unwrap();
    m
}

fn model_loss(m: &mut Backbone, x: &Tensor) -> f64 {
    let mut g = Graph::new();
    let pass = m.forward(&mut g, x, false).unwrap();
    let l = tent_loss(&mut g, pass.logits).unwrap();
    g.value(l).item()
}

/// φ gradients of the TENT loss through the full backbone.
pub fn check_buffer_in_backbone(design: Design) -> f64 {
    let mut m = buffered_model(design);
    let x = random(&[3, 3, 8, 8], 23);
    let mut g = Graph::new();
    let pass = m.forward(&mut g, &x, false).unwrap();
    let loss = tent_loss(&mut g, pass.logits).unwrap();
    let grads = g.backward(loss).unwrap();
    for (name, _) in grads.named() {
        assert!(name.starts_with("buffer."), "frozen parameter {name} got a gradient");
    }
    let mut worst: f64 = 0.0;
    for name in m.bank().unwrap().param_names() {
        let analytic = grads.by_name(&name).unwrap().clone();
        for j in 0..analytic.len() {
            let orig = m.param(&name).unwrap().data()[j];
            m.param_mut(&name).unwrap().data_mut()[j] = orig + FD_STEP;
            let up = model_loss(&mut m, &x);
            m.param_mut(&name).unwrap().data_mut()[j] = orig - FD_STEP;
            let down = model_loss(&mut m, &x);
            m.param_mut(&name).unwrap().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}
