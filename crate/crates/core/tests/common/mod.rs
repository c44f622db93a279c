#![allow(dead_code)]

use histobof::features::{extract_records_features, FeatureStore};
use histobof::manifest::{Label, Manifest, Modality, WsiRecord};
use histobof::patches::SamplingParams;
use histobof::seed::{derive_seed, rng_from_seed};
use histobof::synth::{generate_wsi, wsi_id, CorpusSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Exact maximum of the SVM dual by enumerating every assignment of each
/// multiplier to {0, C, free} and solving the equality-constrained
/// stationarity system on the free set.
pub fn brute_force_dual(gram: &[Vec<f64>], y: &[f64], c: f64) -> f64 {
    let n = y.len();
    let mut best = f64::NEG_INFINITY;
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut state = vec![0u8; n];
        let mut rest = code;
        for s in state.iter_mut() {
            *s = (rest % 3) as u8;
            rest /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mut alpha: Vec<f64> = state.iter().map(|&s| if s == 1 { c } else { 0.0 }).collect();
        if !free.is_empty() {
            let m = free.len();
            let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
            let mut rhs = DVector::<f64>::zeros(m + 1);
            for (r, &i) in free.iter().enumerate() {
                for (s, &j) in free.iter().enumerate() {
                    a[(r, s)] = y[i] * y[j] * gram[i][j];
                }
                a[(r, m)] = y[i];
                a[(m, r)] = y[i];
                let fixed: f64 = (0..n)
                    .filter(|&j| state[j] != 2)
                    .map(|j| y[i] * y[j] * gram[i][j] * alpha[j])
                    .sum();
                rhs[r] = 1.0 - fixed;
            }
            rhs[m] = -(0..n).filter(|&j| state[j] != 2).map(|j| y[j] * alpha[j]).sum::<f64>();
            let svd = a.clone().svd(true, true);
            let Ok(sol) = svd.solve(&rhs, 1e-12) else { continue };
            if (&a * &sol - &rhs).norm() > 1e-8 * (1.0 + rhs.norm()) {
                continue;
            }
            for (r, &i) in free.iter().enumerate() {
                alpha[i] = sol[r];
            }
        }
        let feasible = alpha.iter().all(|&a| a >= -1e-10 && a <= c + 1e-10)
            && alpha.iter().zip(y).map(|(a, t)| a * t).sum::<f64>().abs() < 1e-9 * (1.0 + c);
        if !feasible {
            continue;
        }
        let value = histobof::svm::dual_objective(gram, y, &alpha);
        best = best.max(value);
    }
    best
}

/// Largest KKT violation of a dual solution, measured on the margins
/// `y_i f(x_i)` with `f = Σ α_j y_j K_ij + b`.
pub fn kkt_violation(gram: &[Vec<f64>], y: &[f64], c: f64, alpha: &[f64], bias: f64) -> f64 {
    let n = y.len();
    let mut worst: f64 = alpha.iter().zip(y).map(|(a, t)| a * t).sum::<f64>().abs();
    for i in 0..n {
        let a = alpha[i];
        worst = worst.max(-a).max(a - c);
        let f: f64 = (0..n).map(|j| alpha[j] * y[j] * gram[i][j]).sum::<f64>() + bias;
        let margin = y[i] * f;
        let v = if a <= 0.0 {
            (1.0 - margin).max(0.0)
        } else if a >= c {
            (margin - 1.0).max(0.0)
        } else {
            (margin - 1.0).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Random labelled points with both classes present.
pub fn random_points(seed: u64, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = rng_from_seed(seed);
    loop {
        let y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        if !(y.contains(&1.0) && y.contains(&-1.0)) {
            continue;
        }
        let x = y
            .iter()
            .map(|&t| (0..dim).map(|_| rng.gen_range(-1.0..1.0) + 0.5 * t).collect())
            .collect();
        return (x, y);
    }
}

fn record(modality: Modality, label: Label, i: usize) -> WsiRecord {
    let id = wsi_id(label, modality, i);
    WsiRecord {
        image_path: format!("images/{id}.png").into(),
        wsi_id: id,
        modality,
        label,
    }
}

/// A manifest of `n_per_class` slides per class for each modality and a
/// store of Gaussian descriptors whose mean shifts with the class by
/// `separation` along every dimension.
pub fn gaussian_corpus(
    modalities: &[Modality],
    n_per_class: usize,
    n_patches: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> (Manifest, FeatureStore) {
    let mut records = Vec::new();
    for &m in modalities {
        for label in Label::ALL {
            for i in 0..n_per_class {
                records.push(record(m, label, i));
            }
        }
    }
    let mut store = FeatureStore::new(dim);
    let noise = Normal::new(0.0, 1.0).unwrap();
    for (w, r) in records.iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(seed, &[w as u64]));
        let shift = if r.label == Label::Papillary { separation } else { 0.0 };
        let vectors = (0..n_patches)
            .map(|_| (0..dim).map(|_| noise.sample(&mut rng) + shift).collect())
            .collect();
        store.push_wsi(&r.wsi_id, vectors).unwrap();
    }
    (Manifest::new(".", records).unwrap(), store)
}

/// Renders the synthetic corpus in memory and extracts `n_patches`
/// descriptors per slide.
pub fn synthetic_corpus(
    spec: &CorpusSpec,
    modalities: &[Modality],
    n_patches: usize,
    base_seed: u64,
) -> (Manifest, FeatureStore) {
    let mut records = Vec::new();
    for &m in modalities {
        for label in Label::ALL {
            for i in 0..spec.n_per_class_per_modality {
                records.push(record(m, label, i));
            }
        }
    }
    let refs: Vec<&WsiRecord> = records.iter().collect();
    let index = |r: &WsiRecord| r.wsi_id.rsplit('_').next().unwrap().parse::<usize>().unwrap();
    let store = extract_records_features(
        &refs,
        &|r| Ok(generate_wsi(r.label, r.modality, spec, index(r)).expect("valid spec")),
        &SamplingParams::with_count(n_patches),
        base_seed,
        &|_| Ok(()),
    )
    .expect("feature extraction");
    (Manifest::new(".", records).unwrap(), store)
}
