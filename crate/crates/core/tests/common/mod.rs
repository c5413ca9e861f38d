//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use capsule_detector::capsule::{CapsuleNet, CapsuleNetConfig};
use capsule_detector::gradcheck::{finite_difference_at, relative_error};
use capsule_detector::ops::BnMode;
use capsule_detector::pipeline::{self, Manifest, Preprocess, Split, Unit};
use capsule_detector::{Mode, Result, RngStream, Tape, Tensor, Var};

/// Finite-difference step for f64 checks.
pub const STEP: f64 = 1e-6;
/// Denominator floor of the relative error; gradients below it are
/// compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn normal(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, std)).collect()).unwrap()
}

pub fn uniform(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect()).unwrap()
}

/// Values bounded away from zero, so relu kinks are out of step range.
pub fn off_zero(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = 0.05 + rng.uniform();
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Distinct well-separated values, so max-pool winners do not change
/// within a step.
pub fn separated(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    rng.shuffle(&mut v);
    Tensor::from_vec(shape.to_vec(), v).unwrap()
}

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Largest relative error between tape and finite-difference gradients of
/// `Σ out ⊙ R` over every element of every input, `R` a fixed random
/// tensor.
pub fn check_op(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let weights = |shape: &[usize]| normal(&mut RngStream::new(seed ^ 0x5eed), shape, 1.0);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let r = weights(&probe);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.input(vars[k]).unwrap();
        let f = |t: &Tensor<f64>| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| tape.constant(if j == k { t.clone() } else { x.clone() }))
                .collect();
            let out = build(&mut tape, &vars).unwrap();
            tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let idx: Vec<usize> = (0..x.len()).collect();
        let numeric = finite_difference_at(f, x, STEP, &idx).unwrap();
        for (a, n) in analytic.data().iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n, FLOOR));
        }
    }
    worst
}

/// Every differentiable tape operation with its gradient check. Returns
/// `(name, max relative error)`.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let mut rng = RngStream::new(2024);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor<f64>>, build: Box<Build>| {
        out.push((name, check_op(&inputs, &*build, name.len() as u64)));
    };

    run(
        "conv2d s1 p1",
        vec![normal(&mut rng, &[2, 3, 5, 5], 1.0), normal(&mut rng, &[4, 3, 3, 3], 0.5), normal(&mut rng, &[4], 0.5)],
        Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, 1)),
    );
    run(
        "conv2d s2 p0",
        vec![normal(&mut rng, &[1, 2, 7, 6], 1.0), normal(&mut rng, &[3, 2, 3, 3], 0.5), normal(&mut rng, &[3], 0.5)],
        Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2, 0)),
    );
    run(
        "conv1d s2",
        vec![normal(&mut rng, &[2, 2, 16], 1.0), normal(&mut rng, &[3, 2, 5], 0.5), normal(&mut rng, &[3], 0.5)],
        Box::new(|t, v| t.conv1d(v[0], v[1], v[2], 2)),
    );
    run(
        "maxpool2d",
        vec![separated(&mut rng, &[2, 2, 6, 5])],
        Box::new(|t, v| t.maxpool2d(v[0], 2, 2)),
    );
    run("relu", vec![off_zero(&mut rng, &[3, 7])], Box::new(|t, v| t.relu(v[0])));
    run(
        "batch_norm train",
        vec![normal(&mut rng, &[4, 3, 2, 3], 1.5), uniform(&mut rng, &[3], 0.5, 1.5), normal(&mut rng, &[3], 0.5)],
        Box::new(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0)),
    );
    let (mean, var) = (vec![0.3, -0.2, 0.1], vec![0.8, 1.7, 0.4]);
    run(
        "batch_norm infer",
        vec![normal(&mut rng, &[3, 3, 5], 1.0), uniform(&mut rng, &[3], 0.5, 1.5), normal(&mut rng, &[3], 0.5)],
        Box::new(move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Infer { mean: &mean, var: &var })?.0)),
    );
    run("softmax axis 1", vec![normal(&mut rng, &[2, 4, 3], 1.0)], Box::new(|t, v| t.softmax(v[0], 1)));
    run("softmax axis 2", vec![normal(&mut rng, &[2, 3, 5], 1.0)], Box::new(|t, v| t.softmax(v[0], 2)));
    run(
        "statistical_pool",
        vec![normal(&mut rng, &[2, 3, 4, 5], 1.0)],
        Box::new(|t, v| t.statistical_pool(v[0])),
    );
    run("squash", vec![normal(&mut rng, &[2, 3, 4], 0.8)], Box::new(|t, v| t.squash(v[0])));
    run(
        "route_predict",
        vec![normal(&mut rng, &[3, 2, 4, 4], 0.5), normal(&mut rng, &[2, 3, 4], 1.0)],
        Box::new(|t, v| t.route_predict(v[0], v[1])),
    );
    run(
        "weighted_sum",
        vec![uniform(&mut rng, &[2, 3, 2], 0.0, 1.0), normal(&mut rng, &[2, 3, 2, 4], 1.0)],
        Box::new(|t, v| t.weighted_sum(v[0], v[1])),
    );
    run(
        "agreement",
        vec![normal(&mut rng, &[2, 3, 2, 4], 1.0), normal(&mut rng, &[2, 2, 4], 1.0)],
        Box::new(|t, v| t.agreement(v[0], v[1])),
    );
    run("mean_axis", vec![normal(&mut rng, &[2, 3, 4], 1.0)], Box::new(|t, v| t.mean_axis(v[0], 2)));
    run(
        "cross_entropy",
        vec![uniform(&mut rng, &[4, 3], 0.05, 0.95)],
        Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])),
    );
    run(
        "add",
        vec![normal(&mut rng, &[3, 4], 1.0), normal(&mut rng, &[3, 4], 1.0)],
        Box::new(|t, v| t.add(v[0], v[1])),
    );
    run(
        "mul",
        vec![normal(&mut rng, &[3, 4], 1.0), normal(&mut rng, &[3, 4], 1.0)],
        Box::new(|t, v| t.mul(v[0], v[1])),
    );
    run("scale", vec![normal(&mut rng, &[5], 1.0)], Box::new(|t, v| t.scale(v[0], -1.7)));
    run("sum", vec![normal(&mut rng, &[2, 3], 1.0)], Box::new(|t, v| t.sum(v[0])));
    run(
        "concat",
        vec![normal(&mut rng, &[2, 1, 4], 1.0), normal(&mut rng, &[2, 3, 4], 1.0)],
        Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
    );
    run("reshape", vec![normal(&mut rng, &[2, 6], 1.0)], Box::new(|t, v| t.reshape(v[0], &[3, 4])));
    run(
        "dropout",
        vec![normal(&mut rng, &[4, 5], 1.0)],
        Box::new(|t, v| t.dropout(v[0], 0.3, &mut RngStream::new(77))),
    );
    out
}

/// End-to-end check of the training loss of a two-capsule network on
/// `[2,256,8,8]` features in f64, train mode with noise and dropout.
/// Parameters are sampled `per_tensor` entries at a time; returns the
/// largest relative error and the number of entries checked.
pub fn end_to_end(per_tensor: usize) -> (f64, usize) {
    let mut rng = RngStream::new(31);
    let net = CapsuleNet::<f64>::new(
        CapsuleNetConfig {
            capsules: 2,
            ..CapsuleNetConfig::light(2)
        },
        &mut rng,
    )
    .unwrap();
    let features = normal(&mut rng, &[2, 256, 8, 8], 1.0);
    let labels = [0usize, 1];
    let loss_of = |net: &CapsuleNet<f64>, x: &Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let f = tape.constant(x.clone());
        let mut r = RngStream::new(5);
        let out = net.record_forward(&mut tape, f, Mode::Train, Some(&mut r), false).unwrap();
        let l = tape.cross_entropy(out.probs, &labels).unwrap();
        tape.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let f = tape.input(features.clone()).unwrap();
    let mut r = RngStream::new(5);
    let out = net.record_forward(&mut tape, f, Mode::Train, Some(&mut r), true).unwrap();
    let l = tape.cross_entropy(out.probs, &labels).unwrap();
    let grads = tape.backward(l).unwrap();

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut pick = RngStream::new(8);
    let names: Vec<String> = net.store().trainable().map(|e| e.name.clone()).collect();
    for name in &names {
        let value = net.store().get(name).unwrap().clone();
        let g = grads.param(name).unwrap();
        let idx: Vec<usize> = (0..per_tensor.min(value.len())).map(|_| pick.below(value.len())).collect();
        let numeric = finite_difference_at(
            |t: &Tensor<f64>| {
                let mut n = net.clone();
                *n.store_mut().get_mut(name).unwrap() = t.clone();
                loss_of(&n, &features)
            },
            &value,
            STEP,
            &idx,
        )
        .unwrap();
        for (&i, n) in idx.iter().zip(&numeric) {
            worst = worst.max(relative_error(g.data()[i], *n, FLOOR));
        }
        checked += idx.len();
    }
    let g = grads.input(f).unwrap();
    let idx: Vec<usize> = (0..4 * per_tensor).map(|_| pick.below(features.len())).collect();
    let numeric = finite_difference_at(|t: &Tensor<f64>| loss_of(&net, t), &features, STEP, &idx).unwrap();
    for (&i, n) in idx.iter().zip(&numeric) {
        worst = worst.max(relative_error(g.data()[i], *n, FLOOR));
    }
    checked += idx.len();
    (worst, checked)
}

/// Brute-force per-channel mean and `n − 1` variance of `[K,H,W]`.
pub fn stat_pool_oracle(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (k, hw) = (s[0], s[1] * s[2]);
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for c in 0..k {
        let mut sum = 0.0;
        for i in 0..hw {
            sum += x.data()[c * hw + i];
        }
        let m = sum / hw as f64;
        let mut sq = 0.0;
        for i in 0..hw {
            let d = x.data()[c * hw + i] - m;
            sq += d * d;
        }
        means.push(m);
        vars.push(sq / (hw as f64 - 1.0));
    }
    (means, vars)
}

/// Load one split of a manifest through the pipeline.
pub fn load_split(manifest: &Manifest, split: Split, frames: usize, classes: &[String], prep: &Preprocess) -> Vec<Unit> {
    let sel = pipeline::build_split(manifest, split, frames, true);
    assert!(sel.skipped.is_empty(), "{:?}", sel.skipped);
    let loaded = pipeline::load_units(manifest, &sel, classes, prep).unwrap();
    assert!(loaded.skipped.is_empty(), "{:?}", loaded.skipped);
    loaded.units
}
