//! Objective terms of the frozen-to-paraffin translation model: least-squares
//! adversarial losses and the patch-wise contrastive (PatchNCE) loss, each
//! with analytic gradients.
//!
//! Network parameters are out of scope; the encoder/projection outputs enter
//! as plain query and key vectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty input")]
    EmptyInput,
    #[error("need at least 2 patches, got {0}")]
    TooFewPatches(usize),
    #[error("zero-norm vector at index {0}")]
    ZeroVector(usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("negative loss component or weight: {0}")]
    NegativeComponent(String),
}

fn check_finite(v: &[f64]) -> Result<(), LossError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFinite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorLoss {
    pub value: f64,
    pub grad_real: Vec<f64>,
    pub grad_fake: Vec<f64>,
}

/// `½·mean((real − 1)²) + ½·mean(fake²)`.
pub fn lsgan_discriminator_loss(real: &[f64], fake: &[f64]) -> Result<DiscriminatorLoss, LossError> {
    if real.is_empty() || fake.is_empty() {
        return Err(LossError::EmptyInput);
    }
    check_finite(real)?;
    check_finite(fake)?;
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let value = 0.5 * real.iter().map(|r| (r - 1.0).powi(2)).sum::<f64>() / nr
        + 0.5 * fake.iter().map(|f| f * f).sum::<f64>() / nf;
    Ok(DiscriminatorLoss {
        value,
        grad_real: real.iter().map(|r| (r - 1.0) / nr).collect(),
        grad_fake: fake.iter().map(|f| f / nf).collect(),
    })
}

/// `½·mean((fake − 1)²)`, returned with its gradient.
pub fn lsgan_generator_loss(fake: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    if fake.is_empty() {
        return Err(LossError::EmptyInput);
    }
    check_finite(fake)?;
    let n = fake.len() as f64;
    let value = 0.5 * fake.iter().map(|f| (f - 1.0).powi(2)).sum::<f64>() / n;
    Ok((value, fake.iter().map(|f| (f - 1.0) / n).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchNceLoss {
    pub value: f64,
    pub grad_queries: Vec<Vec<f64>>,
    pub grad_keys: Vec<Vec<f64>>,
}

fn normalize_all(vs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>), LossError> {
    let mut units = Vec::with_capacity(vs.len());
    let mut norms = Vec::with_capacity(vs.len());
    for (i, v) in vs.iter().enumerate() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(LossError::ZeroVector(i));
        }
        units.push(v.iter().map(|x| x / norm).collect());
        norms.push(norm);
    }
    Ok((units, norms))
}

/// Backpropagates through `u = v / ‖v‖`: `(g − (g·u) u) / ‖v‖`.
fn through_normalization(grad_unit: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    let proj: f64 = grad_unit.iter().zip(unit).map(|(g, u)| g * u).sum();
    grad_unit.iter().zip(unit).map(|(g, u)| (g - proj * u) / norm).collect()
}

/// Contrastive loss over `M` corresponding patches. For query `i` the
/// positive is key `i` and the other keys are negatives:
/// `mean_i −log(exp(s_ii/τ) / Σ_j exp(s_ij/τ))`, with `s_ij` the cosine
/// similarity of query `i` and key `j`.
pub fn patchnce_loss(queries: &[Vec<f64>], keys: &[Vec<f64>], temperature: f64) -> Result<PatchNceLoss, LossError> {
    let m = queries.len();
    if m < 2 {
        return Err(LossError::TooFewPatches(m));
    }
    if keys.len() != m {
        return Err(LossError::ShapeMismatch(format!("{m} queries but {} keys", keys.len())));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(LossError::InvalidTemperature(temperature));
    }
    let d = queries[0].len();
    if queries.iter().chain(keys).any(|v| v.len() != d) {
        return Err(LossError::ShapeMismatch("vectors differ in dimension".into()));
    }
    for v in queries.iter().chain(keys) {
        check_finite(v)?;
    }
    let (q, q_norm) = normalize_all(queries)?;
    let (k, k_norm) = normalize_all(keys).map_err(|e| match e {
        LossError::ZeroVector(i) => LossError::ZeroVector(m + i),
        other => other,
    })?;

    let mut value = 0.0;
    // dL/ds_ij
    let mut ds = vec![vec![0.0; m]; m];
    for i in 0..m {
        let logits: Vec<f64> = (0..m)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / temperature)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        value += log_z - logits[i];
        for j in 0..m {
            let p = (logits[j] - log_z).exp();
            let target = if i == j { 1.0 } else { 0.0 };
            ds[i][j] = (p - target) / (temperature * m as f64);
        }
    }
    value /= m as f64;

    let mut grad_queries = Vec::with_capacity(m);
    for i in 0..m {
        let mut g = vec![0.0; d];
        for j in 0..m {
            for (gi, kj) in g.iter_mut().zip(&k[j]) {
                *gi += ds[i][j] * kj;
            }
        }
        grad_queries.push(through_normalization(&g, &q[i], q_norm[i]));
    }
    let mut grad_keys = Vec::with_capacity(m);
    for j in 0..m {
        let mut g = vec![0.0; d];
        for i in 0..m {
            for (gj, qi) in g.iter_mut().zip(&q[i]) {
                *gj += ds[i][j] * qi;
            }
        }
        grad_keys.push(through_normalization(&g, &k[j], k_norm[j]));
    }
    Ok(PatchNceLoss {
        value,
        grad_queries,
        grad_keys,
    })
}

/// Components of the translation objective and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_gan: f64,
    pub l_nce_source: f64,
    pub l_nce_target: f64,
    pub lambda_f: f64,
    pub lambda_g: f64,
    pub total: f64,
}

/// `l_gan + lambda_f·l_nce_source + lambda_g·l_nce_target`.
pub fn total_objective(
    l_gan: f64,
    l_nce_source: f64,
    l_nce_target: f64,
    lambda_f: f64,
    lambda_g: f64,
) -> Result<LossBreakdown, LossError> {
    let named = [
        ("l_gan", l_gan),
        ("l_nce_source", l_nce_source),
        ("l_nce_target", l_nce_target),
        ("lambda_f", lambda_f),
        ("lambda_g", lambda_g),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(LossError::NonFinite);
        }
        if v < 0.0 {
            return Err(LossError::NegativeComponent(format!("{name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        l_gan,
        l_nce_source,
        l_nce_target,
        lambda_f,
        lambda_g,
        total: l_gan + lambda_f * l_nce_source + lambda_g * l_nce_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discriminator_examples() {
        assert_eq!(
            lsgan_discriminator_loss(&[1.0, 1.0], &[0.0, 0.0, 0.0]).unwrap().value,
            0.0
        );
        assert_eq!(lsgan_discriminator_loss(&[0.0; 4], &[1.0; 2]).unwrap().value, 1.0);
        assert_eq!(
            lsgan_discriminator_loss(&[], &[1.0]).unwrap_err(),
            LossError::EmptyInput
        );
        assert_eq!(
            lsgan_discriminator_loss(&[f64::NAN], &[1.0]).unwrap_err(),
            LossError::NonFinite
        );
    }

    #[test]
    fn generator_examples() {
        assert_eq!(lsgan_generator_loss(&[1.0; 3]).unwrap().0, 0.0);
        assert_eq!(lsgan_generator_loss(&[0.0; 5]).unwrap().0, 0.5);
        assert_eq!(lsgan_generator_loss(&[]).unwrap_err(), LossError::EmptyInput);
    }

    #[test]
    fn patchnce_two_orthogonal_keys() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = patchnce_loss(&v, &v, 1.0).unwrap().value;
        let e = 1f64.exp();
        assert!((l - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn patchnce_four_orthogonal() {
        // Rotated orthonormal frame.
        let (c, s) = (0.6f64, 0.8f64);
        let v = vec![
            vec![c, s, 0.0, 0.0],
            vec![-s, c, 0.0, 0.0],
            vec![0.0, 0.0, c, -s],
            vec![0.0, 0.0, s, c],
        ];
        let l = patchnce_loss(&v, &v, 1.0).unwrap().value;
        let e = 1f64.exp();
        assert!((l - (-(e / (e + 3.0)).ln())).abs() < 1e-12);
        assert!((l - 0.743668).abs() < 1e-6);
    }

    #[test]
    fn patchnce_uniform_is_log_m() {
        for m in 2..10 {
            let v = vec![vec![0.3, -1.2, 2.0]; m];
            let l = patchnce_loss(&v, &v, 0.07).unwrap().value;
            assert!((l - (m as f64).ln()).abs() <= 1e-9);
        }
    }

    #[test]
    fn patchnce_errors() {
        let one = vec![vec![1.0]];
        assert_eq!(patchnce_loss(&one, &one, 1.0).unwrap_err(), LossError::TooFewPatches(1));
        let q = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let k = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(patchnce_loss(&q, &k, 1.0).unwrap_err(), LossError::ZeroVector(1));
        assert_eq!(patchnce_loss(&k, &q, 1.0).unwrap_err(), LossError::ZeroVector(3));
        assert!(matches!(
            patchnce_loss(&k, &k, 0.0),
            Err(LossError::InvalidTemperature(_))
        ));
        assert!(matches!(
            patchnce_loss(&k, &k[..1], 1.0),
            Err(LossError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn patchnce_scale_invariant() {
        let q = vec![vec![0.2, 1.0, -0.4], vec![1.5, -0.3, 0.1], vec![-0.7, 0.2, 0.9]];
        let k = vec![vec![0.1, 0.8, -0.2], vec![1.0, 0.3, 0.0], vec![-0.5, -0.4, 1.1]];
        let base = patchnce_loss(&q, &k, 0.07).unwrap().value;
        for lambda in [1e-3, 0.5, 7.0, 1e4] {
            let sq: Vec<Vec<f64>> = q.iter().map(|v| v.iter().map(|x| x * lambda).collect()).collect();
            let sk: Vec<Vec<f64>> = k.iter().map(|v| v.iter().map(|x| x * lambda).collect()).collect();
            assert!((patchnce_loss(&sq, &sk, 0.07).unwrap().value - base).abs() <= 1e-10);
        }
    }

    #[test]
    fn objective_examples() {
        let b = total_objective(0.5, 0.3, 0.2, 1.0, 1.0).unwrap();
        assert!((b.total - 1.0).abs() < 1e-15);
        assert_eq!(total_objective(0.0, 0.0, 0.0, 1.0, 1.0).unwrap().total, 0.0);
        assert_eq!(total_objective(0.4, 2.0, 3.0, 0.0, 0.0).unwrap().total, 0.4);
        assert!(matches!(
            total_objective(0.4, -1.0, 0.0, 1.0, 1.0),
            Err(LossError::NegativeComponent(_))
        ));
        assert!(matches!(
            total_objective(0.4, 1.0, 0.0, -1.0, 1.0),
            Err(LossError::NegativeComponent(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn losses_are_non_negative(
            real in proptest::collection::vec(-5.0f64..5.0, 1..10),
            fake in proptest::collection::vec(-5.0f64..5.0, 1..10),
            q in proptest::collection::vec(proptest::collection::vec(0.1f64..3.0, 3), 2..6),
            tau in 0.05f64..2.0,
        ) {
            proptest::prop_assert!(lsgan_discriminator_loss(&real, &fake).unwrap().value >= 0.0);
            proptest::prop_assert!(lsgan_generator_loss(&fake).unwrap().0 >= 0.0);
            let keys: Vec<Vec<f64>> = q.iter().rev().cloned().collect();
            proptest::prop_assert!(patchnce_loss(&q, &keys, tau).unwrap().value >= 0.0);
        }
    }
}
