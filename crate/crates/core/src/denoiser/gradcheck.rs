use rand::seq::index::sample;
use rand::Rng;

use crate::rng::RngState;

use super::{batch_loss_grad, DenoiserModel, Plan};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Parameters probed at most by [`gradient_check`].
const MAX_PROBES: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Largest `|a - n| / max(|a|, |n|, 1e-12)` over `indices`, where `n` is the
/// central difference of `f` at `x`.
pub fn check_gradients<F>(x: &[f64], analytic: &[f64], indices: &[usize], step: f64, f: F) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    worst
}

fn unflatten(plan: &Plan, flat: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(plan.specs.len());
    let mut at = 0;
    for s in &plan.specs {
        out.push(flat[at..at + s.numel()].to_vec());
        at += s.numel();
    }
    out
}

/// Compares the analytic gradient of the training loss with central
/// differences, in double precision, on a random two-example batch. Every
/// parameter is probed for small models, a random subsample otherwise.
pub fn gradient_check(model: &DenoiserModel, tolerance: f64, seed: u64) -> GradCheckReport {
    let plan = &model.plan;
    let arch = &plan.arch;
    let mut rng = RngState::new(seed);
    let pixels = arch.width * arch.height;
    let batch: Vec<(Vec<f64>, usize, Vec<f64>)> = (0..2)
        .map(|_| {
            let x = (0..pixels).map(|_| rng.normal()).collect();
            let t = rng.random_range(1..=1000);
            let eps = (0..pixels).map(|_| rng.normal()).collect();
            (x, t, eps)
        })
        .collect();

    let params = model.params_f64();
    let (_, grads) = batch_loss_grad(plan, &params, &batch);
    let flat: Vec<f64> = params.concat();
    let analytic: Vec<f64> = grads.concat();
    let indices: Vec<usize> = if flat.len() <= MAX_PROBES {
        (0..flat.len()).collect()
    } else {
        let mut v = sample(&mut rng, flat.len(), MAX_PROBES).into_vec();
        v.sort_unstable();
        v
    };
    let max_rel_error = check_gradients(&flat, &analytic, &indices, FD_STEP, |p| {
        batch_loss_grad(plan, &unflatten(plan, p), &batch).0
    });
    GradCheckReport {
        max_rel_error,
        checked: indices.len(),
        tolerance,
        passed: max_rel_error < tolerance,
    }
}
