mod common;

use buffer_tta::buffer::Design;
use common::*;

#[test]
fn conv2d_matches_finite_differences() {
    assert!(check_conv() < MAX_REL_ERR);
}

#[test]
fn batch_norm_matches_finite_differences() {
    assert!(check_batch_norm() < MAX_REL_ERR);
}

#[test]
fn group_norm_matches_finite_differences() {
    assert!(check_group_norm() < MAX_REL_ERR);
}

#[test]
fn linear_matches_finite_differences() {
    assert!(check_linear() < MAX_REL_ERR);
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    assert!(check_cross_entropy() < MAX_REL_ERR);
}

#[test]
fn entropy_matches_finite_differences() {
    let e = check_entropy();
    assert!(e < 1e-6, "{e}");
}

#[test]
fn buffer_gradients_through_backbone() {
    for design in Design::ALL {
        let e = check_buffer_in_backbone(design);
        assert!(e < MAX_REL_ERR, "design {design}: {e}");
    }
}

#[test]
fn relu_and_pooling_chain() {
    let inputs = [(random(&[2, 2, 4, 4], 40).map(|v| v + 0.05), true)];
    let e = check(&inputs, |g, ids| {
        let r = g.relu(ids[0]);
        let p = g.avg_pool2d(r, 2).unwrap();
        let q = g.global_avg_pool(p).unwrap();
        probe_loss(g, q, 41)
    });
    assert!(e < MAX_REL_ERR, "{e}");
}

#[test]
fn eata_penalty_gradient() {
    let anchor = random(&[5], 50);
    let weights = random(&[5], 51).map(f64::abs);
    let inputs = [(random(&[5], 52), true)];
    let e = check(&inputs, |g, ids| {
        g.quadratic_penalty(ids[0], weights.clone(), anchor.clone()).unwrap()
    });
    assert!(e < MAX_REL_ERR);
}
