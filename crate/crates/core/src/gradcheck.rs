//! Central finite differences against the reverse-mode gradients, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{IKres, IKresConfig, Task};
use crate::tensor::{BatchNormStats, Graph, Padding, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Values bounded away from zero and pairwise distinct, so relu and max
/// pooling are differentiable at every point within [`STEP`].
fn away_from_kinks(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (0.2 + 0.05 * i as f64) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - n| / max(|a|, |n|)` over the whole gradient vector.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Relative error between the analytic and numeric gradient of
/// `loss(inputs)` with respect to every input.
pub fn check(inputs: &[Tensor<f64>], loss: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |ts: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let l = loss(&mut g, &vs);
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let l = loss(&mut g, &vs);
    let grads = g.backward(l).expect("scalar loss");
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = inputs.to_vec();
    for (i, v) in vs.iter().enumerate() {
        analytic.extend_from_slice(grads.get(*v).expect("input on tape").data());
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = x0 - STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

/// Contracts an output with a fixed random tensor so every element carries a
/// distinct weight.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let r = g.input(random(&shape, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = g.mul(y, r).expect("same shape");
    g.sum(p)
}

/// Relative gradient error of every primitive the network uses.
pub fn primitive_suite() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::new();

    let inputs = [random(&[2, 3, 11], &mut rng), random(&[4, 3, 5], &mut rng), random(&[4], &mut rng)];
    out.push((
        "conv1d stride 1",
        check(&inputs, |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], 1, Padding::same(11, 5, 1)).unwrap();
            project(g, y, 9)
        }),
    ));

    let inputs = [random(&[2, 2, 13], &mut rng), random(&[3, 2, 4], &mut rng), random(&[3], &mut rng)];
    out.push((
        "conv1d stride 2",
        check(&inputs, |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], 2, Padding::same(13, 4, 2)).unwrap();
            project(g, y, 10)
        }),
    ));

    let inputs = [random(&[3, 2, 5], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
    out.push((
        "batchnorm1d train [b,c,l]",
        check(&inputs, |g, v| {
            let mut stats = BatchNormStats::new(2);
            let y = g.batchnorm1d(v[0], v[1], v[2], &mut stats, true).unwrap();
            project(g, y, 11)
        }),
    ));

    let inputs = [random(&[5, 3], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)];
    out.push((
        "batchnorm1d train [b,c]",
        check(&inputs, |g, v| {
            let mut stats = BatchNormStats::new(3);
            let y = g.batchnorm1d(v[0], v[1], v[2], &mut stats, true).unwrap();
            project(g, y, 12)
        }),
    ));

    let inputs = [random(&[2, 2, 4], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
    out.push((
        "batchnorm1d eval",
        check(&inputs, |g, v| {
            let mut stats = BatchNormStats::new(2);
            stats.update(&[0.3, -0.2], &[1.5, 0.7]);
            let y = g.batchnorm1d(v[0], v[1], v[2], &mut stats, false).unwrap();
            project(g, y, 13)
        }),
    ));

    let inputs = [away_from_kinks(&[3, 7], &mut rng)];
    out.push((
        "relu",
        check(&inputs, |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 14)
        }),
    ));

    let inputs = [away_from_kinks(&[2, 2, 9], &mut rng)];
    out.push((
        "maxpool1d",
        check(&inputs, |g, v| {
            let y = g.maxpool1d(v[0], 2, 2, true).unwrap();
            project(g, y, 15)
        }),
    ));

    let inputs = [random(&[2, 3, 6], &mut rng)];
    out.push((
        "avgpool_global",
        check(&inputs, |g, v| {
            let y = g.avgpool_global(v[0]).unwrap();
            project(g, y, 16)
        }),
    ));

    let inputs = [random(&[4, 5], &mut rng), random(&[3, 5], &mut rng), random(&[3], &mut rng)];
    out.push((
        "dense",
        check(&inputs, |g, v| {
            let y = g.dense(v[0], v[1], v[2]).unwrap();
            project(g, y, 17)
        }),
    ));

    let inputs = [random(&[6], &mut rng)];
    out.push((
        "sigmoid",
        check(&inputs, |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, 18)
        }),
    ));

    let inputs = [random(&[2, 3], &mut rng), random(&[2, 3], &mut rng)];
    out.push((
        "add",
        check(&inputs, |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            project(g, y, 19)
        }),
    ));
    out.push((
        "mul",
        check(&inputs, |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            project(g, y, 20)
        }),
    ));

    let inputs = [random(&[4, 2], &mut rng)];
    out.push((
        "sum",
        check(&inputs, |g, v| {
            let sq = g.mul(v[0], v[0]).unwrap();
            g.sum(sq)
        }),
    ));

    let inputs = [random(&[4, 2], &mut rng), random(&[4, 2], &mut rng)];
    out.push(("mse_loss", check(&inputs, |g, v| g.mse_loss(v[0], v[1]).unwrap())));

    let probs: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..0.9)).collect();
    let inputs = [Tensor::new(vec![6, 1], probs).expect("shape matches")];
    let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let weights = [1.0, 0.4, 1.0, 1.0, 0.4, 0.4];
    out.push(("weighted_bce_loss", check(&inputs, |g, v| g.weighted_bce_loss(v[0], &labels, &weights).unwrap())));
    out
}

fn ikres_loss(model: &IKres<f64>, x: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let mut bn = model.bn_stats().to_vec();
    let fp = model.forward_with_stats(&mut g, xv, &mut bn, true).expect("valid input");
    let t = g.input(target.clone());
    let l = g.mse_loss(fp.output, t).expect("matching shapes");
    g.value(l).data()[0]
}

/// Relative error of the parameter gradient of a small full network on one
/// `1 x 100` input in train mode, and the number of parameters checked.
pub fn composed_ikres() -> (f64, usize) {
    let cfg = IKresConfig { ingest_filters: 3, block_filters: vec![4, 4, 5, 6], kernel: 5, input_len: 100, head_hidden: 4 };
    let model = IKres::<f64>::new(cfg, Task::Qt, 21).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.17).sin() + 0.3 * rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new(vec![1, 1, 100], x).expect("shape matches");
    let target = Tensor::new(vec![1, 2], vec![0.7, -1.3]).expect("shape matches");

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let mut bn = model.bn_stats().to_vec();
    let fp = model.forward_with_stats(&mut g, xv, &mut bn, true).expect("valid input");
    let t = g.input(target.clone());
    let l = g.mse_loss(fp.output, t).expect("matching shapes");
    let grads = g.backward(l).expect("scalar loss");

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = model.clone();
    for (i, v) in fp.params.iter().enumerate() {
        analytic.extend_from_slice(grads.get(*v).expect("param on tape").data());
        for j in 0..model.params()[i].len() {
            let p0 = model.params()[i].data()[j];
            work.params_mut()[i].data_mut()[j] = p0 + STEP;
            let up = ikres_loss(&work, &x, &target);
            work.params_mut()[i].data_mut()[j] = p0 - STEP;
            let down = ikres_loss(&work, &x, &target);
            work.params_mut()[i].data_mut()[j] = p0;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    (rel_error(&analytic, &numeric), analytic.len())
}
