//! Central finite-difference verification of the analytic loss gradients.
//!
//! Only loss *values* are evaluated here; the analytic gradients are compared
//! against numerical ones. The error measure is the norm-wise relative error
//! `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`.

use rand::Rng;
use serde::Serialize;

use crate::losses::{lsgan_discriminator_loss, lsgan_generator_loss, patchnce_loss};
use crate::seed::{derive_seed, rng_from_seed};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn flatten(vs: &[Vec<f64>]) -> Vec<f64> {
    vs.iter().flatten().copied().collect()
}

fn unflatten(flat: &[f64], m: usize, d: usize) -> Vec<Vec<f64>> {
    (0..m).map(|i| flat[i * d..(i + 1) * d].to_vec()).collect()
}

/// Worst relative error seen for one loss term.
#[derive(Debug, Clone, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub instances: usize,
    pub max_relative_error: f64,
}

pub fn check_lsgan_discriminator(instances: usize, seed: u64) -> CheckSummary {
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = rng_from_seed(derive_seed(seed, &[1, t as u64]));
        let nr = rng.gen_range(1..16);
        let nf = rng.gen_range(1..16);
        let real: Vec<f64> = (0..nr).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let fake: Vec<f64> = (0..nf).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let loss = lsgan_discriminator_loss(&real, &fake).expect("valid scores");
        let num_real = numeric_gradient(
            |r| lsgan_discriminator_loss(r, &fake).unwrap().value,
            &real,
            DEFAULT_STEP,
        );
        let num_fake = numeric_gradient(
            |f| lsgan_discriminator_loss(&real, f).unwrap().value,
            &fake,
            DEFAULT_STEP,
        );
        worst = worst
            .max(relative_error(&loss.grad_real, &num_real))
            .max(relative_error(&loss.grad_fake, &num_fake));
    }
    CheckSummary {
        name: "lsgan_discriminator".into(),
        instances,
        max_relative_error: worst,
    }
}

pub fn check_lsgan_generator(instances: usize, seed: u64) -> CheckSummary {
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = rng_from_seed(derive_seed(seed, &[2, t as u64]));
        let n = rng.gen_range(1..16);
        let fake: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, grad) = lsgan_generator_loss(&fake).expect("valid scores");
        let num = numeric_gradient(|f| lsgan_generator_loss(f).unwrap().0, &fake, DEFAULT_STEP);
        worst = worst.max(relative_error(&grad, &num));
    }
    CheckSummary {
        name: "lsgan_generator".into(),
        instances,
        max_relative_error: worst,
    }
}

/// PatchNCE gradient check on random `M = 8`, `d = 16` instances.
pub fn check_patchnce(instances: usize, temperature: f64, seed: u64) -> CheckSummary {
    const M: usize = 8;
    const D: usize = 16;
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = rng_from_seed(derive_seed(seed, &[3, t as u64, temperature.to_bits()]));
        let q: Vec<Vec<f64>> = (0..M)
            .map(|_| (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let k: Vec<Vec<f64>> = (0..M)
            .map(|_| (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let loss = patchnce_loss(&q, &k, temperature).expect("valid instance");
        let num_q = numeric_gradient(
            |flat| patchnce_loss(&unflatten(flat, M, D), &k, temperature).unwrap().value,
            &flatten(&q),
            DEFAULT_STEP,
        );
        let num_k = numeric_gradient(
            |flat| patchnce_loss(&q, &unflatten(flat, M, D), temperature).unwrap().value,
            &flatten(&k),
            DEFAULT_STEP,
        );
        worst = worst
            .max(relative_error(&flatten(&loss.grad_queries), &num_q))
            .max(relative_error(&flatten(&loss.grad_keys), &num_k));
    }
    CheckSummary {
        name: format!("patchnce(tau={temperature})"),
        instances,
        max_relative_error: worst,
    }
}

/// The full suite: both adversarial terms and PatchNCE at τ ∈ {0.07, 1.0}.
pub fn run_suite(instances: usize, seed: u64) -> Vec<CheckSummary> {
    vec![
        check_lsgan_discriminator(instances, seed),
        check_lsgan_generator(instances, seed),
        check_patchnce(instances, 0.07, seed),
        check_patchnce(instances, 1.0, seed),
    ]
}
