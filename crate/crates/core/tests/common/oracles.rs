//! Independent reference implementations used only by tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::oracle_imports::*;

/// Tolerance on the norm-relative gradient error.
pub const FD_REL_TOL: f64 = 1e-3;
/// Central-difference step.
pub const FD_STEP: f32 = 1e-3;

/// Naive `i, j, p` triple loop in f64.
pub fn triple_loop_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

fn weighted_sum(out: &Tensor, weights: &[f32]) -> f64 {
    out.data().iter().zip(weights).map(|(&a, &w)| a as f64 * w as f64).sum()
}

/// Compares tape gradients of `sum(build(inputs) * R)` (R a fixed random
/// weighting) against central finite differences with step [`FD_STEP`].
/// Returns the worst norm-relative error over all inputs.
pub fn fd_check(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var, seed: u64) -> f64 {
    fd_check_stencil(inputs, build, seed, FD_STEP, false)
}

/// Step for [`fd_check_wide`].
pub const FD_WIDE_STEP: f32 = 1e-2;

/// Same comparison with the fourth-order central stencil at
/// [`FD_WIDE_STEP`]. Deep compositions (a whole block) evaluated in f32 lose
/// too many digits to cancellation at the narrow step; the wider stencil keeps
/// truncation error below f32 rounding noise.
pub fn fd_check_wide(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var, seed: u64) -> f64 {
    fd_check_stencil(inputs, build, seed, FD_WIDE_STEP, true)
}

fn fd_check_stencil(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    seed: u64,
    step: f32,
    fourth_order: bool,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let out_shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = Tensor::uniform(&mut rng, &out_shape, -1.0, 1.0);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.numel()], |g| g.data().to_vec()))
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        weighted_sum(tape.value(out), weights.data())
    };

    let mut worst = 0.0f64;
    for (idx, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0f64; input.numel()];
        for e in 0..input.numel() {
            let mut xs = inputs.to_vec();
            let mut at = |k: f32| {
                xs[idx].data_mut()[e] = input.data()[e] + k * step;
                eval(&xs)
            };
            let h = step as f64;
            numeric[e] = if fourth_order {
                (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * h)
            } else {
                (at(1.0) - at(-1.0)) / (2.0 * h)
            };
        }
        worst = worst.max(norm_rel_err(&analytic[idx], &numeric));
    }
    worst
}

/// `||a - n|| / max(||a||, ||n||)`, or the absolute difference norm when
/// both gradients are essentially zero.
pub fn norm_rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n.powi(2)).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}
