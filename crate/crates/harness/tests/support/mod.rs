#![allow(dead_code)]

use mapunetr_core::rng::{stream, Purpose};
use mapunetr_core::{no_grad, Tensor};
use rand::Rng as _;

pub const STEP: f64 = 1e-5;

/// Relative error with a floor so that near-zero pairs are compared absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn leaf(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut stream(seed, Purpose::Synth)).requires_grad()
}

pub fn constant(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut stream(seed ^ 0xface, Purpose::Synth))
}

/// Reduces any output to a scalar through fixed random weights so every
/// output element contributes a distinct amount.
pub fn weighted_sum(out: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    out.mul(&constant(out.shape(), seed)).unwrap().sum()
}

/// Max relative error between backprop and central differences over the
/// entries of `inputs`. With `per_tensor = Some(k)`, only `k` seeded random
/// entries of each tensor are probed.
pub fn check(
    inputs: &[Tensor<f64>],
    per_tensor: Option<usize>,
    f: impl Fn() -> Tensor<f64>,
) -> f64 {
    for t in inputs {
        t.zero_grad();
    }
    f().backward().unwrap();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().expect("input reached by loss"))
        .collect();
    let eval = || no_grad(|| f().item().unwrap());
    let mut pick = stream(99, Purpose::Synth);
    let mut worst: f64 = 0.0;
    for (t, grad) in inputs.iter().zip(&analytic) {
        let n = t.numel();
        let idx: Vec<usize> = match per_tensor {
            Some(k) if k < n => (0..k).map(|_| pick.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in idx {
            let x = t.data()[i];
            t.data_mut()[i] = x + STEP;
            let up = eval();
            t.data_mut()[i] = x - STEP;
            let down = eval();
            t.data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(grad[i], numeric));
        }
    }
    worst
}
