#![allow(dead_code)]

use lesionforge::rng::{normal, rng_from};
use lesionforge::tensornet::{Parameterized, Tensor};
use rand::Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const PROBES: usize = 50;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_from(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal(&mut rng)).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares analytic parameter and input gradients of `sum(out * probe)`
/// against central differences. Returns the worst relative error seen and
/// the name of where it occurred.
pub fn gradcheck<M, F, B>(model: &mut M, input: &Tensor<f64>, forward: F, backward: B, seed: u64) -> (f64, String)
where
    M: Parameterized<f64>,
    F: Fn(&mut M, &Tensor<f64>) -> Tensor<f64>,
    B: Fn(&mut M, &Tensor<f64>) -> Tensor<f64>,
{
    let out = forward(model, input);
    let probe = random_tensor(out.shape(), seed ^ 0x5eed);
    let objective =
        |m: &mut M, x: &Tensor<f64>| -> f64 { forward(m, x).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum() };
    model.zero_grad();
    forward(model, input);
    let input_grad = backward(model, &probe);
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.data().to_vec()).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();

    let mut rng = rng_from(seed);
    let mut worst = (0.0, String::new());
    for (pi, name) in names.iter().enumerate() {
        let len = analytic[pi].len();
        for _ in 0..PROBES.min(len) {
            let k = rng.random_range(0..len);
            let orig = model.params()[pi].value.data()[k];
            model.params_mut()[pi].value.data_mut()[k] = orig + STEP;
            let up = objective(model, input);
            model.params_mut()[pi].value.data_mut()[k] = orig - STEP;
            let down = objective(model, input);
            model.params_mut()[pi].value.data_mut()[k] = orig;
            let e = rel_err(analytic[pi][k], (up - down) / (2.0 * STEP));
            if e > worst.0 {
                worst = (e, format!("{name}[{k}]"));
            }
        }
    }
    let mut x = input.clone();
    for _ in 0..PROBES.min(x.len()) {
        let k = rng.random_range(0..x.len());
        let orig = x.data()[k];
        x.data_mut()[k] = orig + STEP;
        let up = objective(model, &x);
        x.data_mut()[k] = orig - STEP;
        let down = objective(model, &x);
        x.data_mut()[k] = orig;
        let e = rel_err(input_grad.data()[k], (up - down) / (2.0 * STEP));
        if e > worst.0 {
            worst = (e, format!("input[{k}]"));
        }
    }
    worst
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// 101-point interpolated AP over a list already in descending score order:
/// at each recall level take the best precision reached at that recall or beyond.
pub fn envelope_ap(hits: &[bool], total_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (n, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        points.push((tp as f64 / total_gt as f64, tp as f64 / (n + 1) as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}
