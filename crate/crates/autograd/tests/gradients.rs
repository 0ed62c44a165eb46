use std::rc::Rc;

use ltgsr_autograd::check::max_gradient_error;
use ltgsr_autograd::{Mat, ResamplePlan, SpatialPlan, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Fixed random weighting so every output element matters.
fn readout<'t>(y: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let w = random(y.shape(), seed);
    y.mul_const(Rc::new(w)).sum()
}

#[test]
fn elementwise_ops() {
    let a = random([2, 3, 4, 4], 1);
    let b = random([2, 3, 4, 4], 2).map(|v| v + 2.5);
    let err = max_gradient_error(&[a, b], STEP, |_, v| {
        let y = (v[0] * v[1] - v[1].scale(0.3)).add_scalar(0.7) + v[0].square();
        readout(y.relu() + v[1].sqrt() + v[1].recip(), 3)
    });
    assert!(err < TOL, "err {err}");
}

#[test]
fn conv_bias_pool_chain() {
    let x = random([2, 2, 8, 8], 4);
    let w = random([3, 2, 3, 3], 5);
    let b = random([1, 3, 1, 1], 6);
    let w2 = random([2, 3, 3, 3], 7);
    let err = max_gradient_error(&[x, w, b, w2], STEP, |_, v| {
        let h = v[0].conv2d(v[1], 1, 1).add_bias(v[2]).leaky_relu(0.2).max_pool2();
        readout(h.conv2d(v[3], 2, 1), 8)
    });
    assert!(err < TOL, "err {err}");
}

#[test]
fn resample_spatial_concat_slice() {
    let x = random([1, 2, 4, 3], 9);
    let y = random([1, 1, 6, 5], 10);
    let rows = Mat {
        rows: 6,
        cols: 4,
        data: random([6, 4, 1, 1], 11).into_vec(),
    };
    let cols = Mat {
        rows: 5,
        cols: 3,
        data: random([5, 3, 1, 1], 12).into_vec(),
    };
    let plan = Rc::new(ResamplePlan::new(rows, cols));
    let spatial = Rc::new(SpatialPlan {
        in_hw: (6, 5),
        out_hw: (6, 5),
        entries: (0..30u32).map(|o| (o, (o * 7) % 30, 0.5 + o as f64 * 0.01)).collect(),
    });
    let err = max_gradient_error(&[x, y], STEP, |_, v| {
        let up = v[0].resample(plan.clone());
        let cat = Var::concat(&[up, v[1].spatial_map(spatial.clone())]);
        readout(cat.slice_channels(1, 2).abs() + cat.slice_channels(0, 2), 13)
    });
    assert!(err < TOL, "err {err}");
}

#[test]
fn matmul_all_transpose_variants() {
    let a = random([3, 4, 1, 1], 14);
    let b = random([4, 2, 1, 1], 15);
    let err = max_gradient_error(&[a, b], STEP, |_, v| {
        let at = v[0].reshape([3, 4, 1, 1]);
        let p = at.matmul(v[1], false, false);
        let q = v[1].matmul(v[0], true, true); // [2,3]
        let r = v[0].matmul(p, true, false); // [4,2]
        readout(p, 16) + readout(q, 17) + readout(r, 18)
    });
    assert!(err < TOL, "err {err}");
}

#[test]
fn per_sample_reductions() {
    let x = random([3, 2, 2, 2], 19);
    let err = max_gradient_error(&[x], STEP, |_, v| {
        let s = v[0].square().sum_per_sample().add_scalar(0.5).sqrt();
        readout(s.expand_per_sample([3, 1, 2, 1]), 20) + v[0].mean()
    });
    assert!(err < TOL, "err {err}");
}

/// Gradient-penalty shaped objective: differentiates through an input gradient.
#[test]
fn second_order_through_conv_critic() {
    let x = random([2, 1, 8, 8], 21);
    let w1 = random([3, 1, 3, 3], 22);
    let b1 = random([1, 3, 1, 1], 23);
    let w2 = random([2, 3, 3, 3], 24);
    let wd = random([1, 8, 1, 1], 26);
    let err = max_gradient_error(&[x, w1, b1, w2, wd], STEP, |tape, v| {
        let h = v[0].conv2d(v[1], 2, 1).add_bias(v[2]).leaky_relu(0.2); // [2,3,4,4]
        let h = h.conv2d(v[3], 2, 1).leaky_relu(0.2); // [2,2,2,2]
        let flat = h.reshape([2, 8, 1, 1]);
        let score = flat.matmul(v[4], false, true).sum();
        let gx = tape.grad(score, &[v[0]], true)[0];
        let norms = gx.square().sum_per_sample().sqrt();
        norms.add_scalar(-1.0).square().mean()
    });
    assert!(err < 1e-5, "err {err}");
}

#[test]
fn inference_tape_records_nothing() {
    let t = Tape::<f64>::inference();
    let x = t.leaf(random([1, 1, 2, 2], 25));
    let y = x.square().sum();
    assert!(!y.requires_grad());
    let g = t.grad(y, &[x], false);
    assert_eq!(g[0].value().sum(), 0.0);
}

#[test]
fn detach_blocks_gradient() {
    let t = Tape::<f64>::new();
    let x = t.leaf(Tensor::scalar(3.0));
    let y = x * x.detach();
    let g = t.grad_values(y, &[x]);
    assert_eq!(g[0].item(), 3.0);
}
