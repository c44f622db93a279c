//! Binary soft-margin SVM trained by sequential minimal optimization, plus
//! cost selection by inner cross-validation.
//!
//! The solver works on the dual in minimization form
//! `min ½ αᵀQα − eᵀα  s.t.  0 ≤ α ≤ C,  yᵀα = 0` with `Q_ij = y_i y_j K(x_i, x_j)`.
//! Each step updates the pair chosen by maximal KKT violation for the first
//! index and largest second-order gain for the second. Optimization stops
//! once the violation gap `m(α) − M(α)` drops to `tol`.

use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, rng_from_seed};

/// Inner cross-validation cost grid.
pub const COST_GRID: [f64; 5] = [0.1, 1.0, 10.0, 100.0, 1000.0];
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_TOL: f64 = 1e-3;
/// Coefficients at or below this magnitude are not kept as support vectors.
const SV_EPS: f64 = 1e-12;
const TAU: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("training data holds a single class")]
    SingleClassInput,
    #[error("SMO did not converge within {} iterations", .0.training_meta.as_ref().map_or(0, |m| m.iterations))]
    NoConvergence(Box<SvmModel>),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("too few samples: {n} samples for {folds} folds")]
    TooFewSamples { n: usize, folds: usize },
    #[error("all training points are identical; RBF gamma is undefined")]
    ZeroVariance,
    #[error("invalid SVM input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Linear => f.write_str("linear"),
            Kernel::Rbf { gamma } => write!(f, "rbf(gamma={gamma})"),
        }
    }
}

pub fn dot(x: &[f64], z: &[f64]) -> f64 {
    x.iter().zip(z).map(|(a, b)| a * b).sum()
}

impl Kernel {
    fn apply(&self, x: &[f64], z: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => dot(x, z),
            Kernel::Rbf { gamma } => {
                let d2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                (-gamma * d2).exp()
            }
        }
    }

    pub fn eval(&self, x: &[f64], z: &[f64]) -> Result<f64, SvmError> {
        if x.len() != z.len() {
            return Err(SvmError::DimensionMismatch {
                expected: x.len(),
                found: z.len(),
            });
        }
        if let Kernel::Rbf { gamma } = self {
            if !(*gamma > 0.0) {
                return Err(SvmError::InvalidInput(format!(
                    "RBF gamma must be positive, got {gamma}"
                )));
            }
        }
        Ok(self.apply(x, z))
    }
}

pub fn kernel_eval(kernel: &Kernel, x: &[f64], z: &[f64]) -> Result<f64, SvmError> {
    kernel.eval(x, z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub iterations: usize,
    pub final_dual_objective: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    #[serde(flatten)]
    pub kernel: Kernel,
    #[serde(rename = "C")]
    pub c: f64,
    pub bias: f64,
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` per support vector.
    #[serde(rename = "coefficients")]
    pub alphas_times_labels: Vec<f64>,
    #[serde(skip)]
    pub training_meta: Option<TrainingMeta>,
}

impl SvmModel {
    pub fn dimension(&self) -> Option<usize> {
        self.support_vectors.first().map(Vec::len)
    }

    /// `Σ (alpha_i y_i) K(sv_i, x) + bias`.
    pub fn decision_value(&self, x: &[f64]) -> Result<f64, SvmError> {
        if let Some(d) = self.dimension() {
            if d != x.len() {
                return Err(SvmError::DimensionMismatch {
                    expected: d,
                    found: x.len(),
                });
            }
        }
        Ok(self
            .support_vectors
            .iter()
            .zip(&self.alphas_times_labels)
            .map(|(sv, a)| a * self.kernel.apply(sv, x))
            .sum::<f64>()
            + self.bias)
    }

    /// Sign of the decision value, with `sign(0) = +1`.
    pub fn predict(&self, x: &[f64]) -> Result<f64, SvmError> {
        Ok(if self.decision_value(x)? >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Full dual solution over the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoParams {
    pub c: f64,
    pub tol: f64,
    /// Iteration budget in units of `n` pair updates; `None` means `10·n`.
    pub max_passes: Option<usize>,
    pub seed: u64,
}

impl SmoParams {
    pub fn new(c: f64) -> Self {
        Self {
            c,
            tol: DEFAULT_TOL,
            max_passes: None,
            seed: 0,
        }
    }
}

/// Dual objective `Σα − ½ αᵀQα` (maximization form).
pub fn dual_objective(gram: &[Vec<f64>], y: &[f64], alpha: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * gram[i][j];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

pub fn gram_matrix<V: AsRef<[f64]> + Sync>(kernel: &Kernel, x: &[V]) -> Vec<Vec<f64>> {
    x.par_iter()
        .map(|a| x.iter().map(|b| kernel.apply(a.as_ref(), b.as_ref())).collect())
        .collect()
}

/// SMO on a precomputed kernel matrix.
pub fn solve_dual(gram: &[Vec<f64>], y: &[f64], params: &SmoParams) -> DualSolution {
    let n = y.len();
    let c = params.c;
    let max_iter = params.max_passes.unwrap_or(10 * n).saturating_mul(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(params.seed));

    let mut alpha = vec![0.0; n];
    // Gradient of the minimization objective: G = Qα − e.
    let mut grad = vec![-1.0; n];
    let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let in_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    let mut iterations = 0;
    let mut converged = false;
    loop {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        let mut gmin = f64::INFINITY;
        for &t in &order {
            let v = -y[t] * grad[t];
            if in_up(alpha[t], y[t]) && v > gmax {
                gmax = v;
                i = t;
            }
            if in_low(alpha[t], y[t]) && v < gmin {
                gmin = v;
            }
        }
        if i == usize::MAX || gmax - gmin <= params.tol {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }

        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for &t in &order {
            if !in_low(alpha[t], y[t]) {
                continue;
            }
            let b = gmax + y[t] * grad[t];
            if b > 0.0 {
                let a = gram[i][i] + gram[t][t] - 2.0 * gram[i][t];
                let a = if a > 0.0 { a } else { TAU };
                let gain = -(b * b) / a;
                if gain < best {
                    best = gain;
                    j = t;
                }
            }
        }
        if j == usize::MAX {
            converged = true;
            break;
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let quad = (gram[i][i] + gram[j][j] - 2.0 * gram[i][j]).max(TAU);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * gram[t][i] * di + y[j] * gram[t][j] * dj);
        }
    }

    // Bias from free vectors when any exist, otherwise the midpoint of the feasible interval.
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let (mut free_sum, mut free_n) = (0.0, 0usize);
    for t in 0..n {
        let v = -y[t] * grad[t];
        let at_upper = alpha[t] >= c;
        let at_lower = alpha[t] <= 0.0;
        if !at_upper && !at_lower {
            free_sum += v;
            free_n += 1;
        } else if (y[t] > 0.0 && at_lower) || (y[t] < 0.0 && at_upper) {
            // Only in I_up: constraint b >= v.
            lb = lb.max(v);
        } else {
            ub = ub.min(v);
        }
    }
    let bias = if free_n > 0 {
        free_sum / free_n as f64
    } else if lb.is_finite() && ub.is_finite() {
        0.5 * (lb + ub)
    } else if lb.is_finite() {
        lb
    } else if ub.is_finite() {
        ub
    } else {
        0.0
    };
    let dual = -0.5 * alpha.iter().zip(&grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>();
    DualSolution {
        alpha,
        bias,
        dual_objective: dual,
        iterations,
        converged,
    }
}

fn validate_training<V: AsRef<[f64]>>(x: &[V], y: &[f64], c: f64) -> Result<usize, SvmError> {
    if x.len() != y.len() {
        return Err(SvmError::InvalidInput(format!(
            "{} samples but {} labels",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(SvmError::InvalidInput("need at least two samples".into()));
    }
    if !(c > 0.0) {
        return Err(SvmError::InvalidInput(format!("C must be positive, got {c}")));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(SvmError::InvalidInput("labels must be +1 or -1".into()));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(SvmError::SingleClassInput);
    }
    let d = x[0].as_ref().len();
    if let Some(v) = x.iter().find(|v| v.as_ref().len() != d) {
        return Err(SvmError::DimensionMismatch {
            expected: d,
            found: v.as_ref().len(),
        });
    }
    Ok(d)
}

/// Trains and returns the model together with the full dual solution.
pub fn svm_train_with_solution<V: AsRef<[f64]> + Sync>(
    x: &[V],
    y: &[f64],
    kernel: Kernel,
    params: &SmoParams,
) -> Result<(SvmModel, DualSolution), SvmError> {
    validate_training(x, y, params.c)?;
    if let Kernel::Rbf { gamma } = kernel {
        if !(gamma > 0.0) {
            return Err(SvmError::InvalidInput(format!(
                "RBF gamma must be positive, got {gamma}"
            )));
        }
    }
    let gram = gram_matrix(&kernel, x);
    let sol = solve_dual(&gram, y, params);
    let mut support_vectors = Vec::new();
    let mut coefficients = Vec::new();
    for (i, &a) in sol.alpha.iter().enumerate() {
        if a > SV_EPS {
            support_vectors.push(x[i].as_ref().to_vec());
            coefficients.push(a * y[i]);
        }
    }
    let model = SvmModel {
        kernel,
        c: params.c,
        bias: sol.bias,
        support_vectors,
        alphas_times_labels: coefficients,
        training_meta: Some(TrainingMeta {
            iterations: sol.iterations,
            final_dual_objective: sol.dual_objective,
            converged: sol.converged,
        }),
    };
    Ok((model, sol))
}

/// Trains a model; a non-converged run is reported as
/// [`SvmError::NoConvergence`] carrying the best model found.
pub fn svm_train<V: AsRef<[f64]> + Sync>(
    x: &[V],
    y: &[f64],
    kernel: Kernel,
    params: &SmoParams,
) -> Result<SvmModel, SvmError> {
    let (model, sol) = svm_train_with_solution(x, y, kernel, params)?;
    if sol.converged {
        Ok(model)
    } else {
        Err(SvmError::NoConvergence(Box::new(model)))
    }
}

/// Like [`svm_train`] but accepts the best-so-far model of a run that hit
/// its iteration budget.
pub fn svm_train_lenient<V: AsRef<[f64]> + Sync>(
    x: &[V],
    y: &[f64],
    kernel: Kernel,
    params: &SmoParams,
) -> Result<SvmModel, SvmError> {
    match svm_train(x, y, kernel, params) {
        Err(SvmError::NoConvergence(model)) => Ok(*model),
        other => other,
    }
}

pub fn svm_predict(model: &SvmModel, x: &[f64]) -> Result<f64, SvmError> {
    model.predict(x)
}

/// `1 / (d · mean per-dimension population variance)`.
pub fn rbf_gamma_default<V: AsRef<[f64]>>(x: &[V]) -> Result<f64, SvmError> {
    if x.len() < 2 {
        return Err(SvmError::InvalidInput("need at least two samples".into()));
    }
    let d = x[0].as_ref().len();
    let n = x.len() as f64;
    let mut total_var = 0.0;
    for j in 0..d {
        let mean = x.iter().map(|v| v.as_ref()[j]).sum::<f64>() / n;
        total_var += x.iter().map(|v| (v.as_ref()[j] - mean).powi(2)).sum::<f64>() / n;
    }
    if !(total_var > 0.0) {
        return Err(SvmError::ZeroVariance);
    }
    // d · (total_var / d)
    Ok(1.0 / total_var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub grid: Vec<f64>,
    pub folds: usize,
    /// Mean fold accuracy per grid value.
    pub accuracies: Vec<f64>,
    pub chosen_c: f64,
}

/// Assigns each group to a fold after a seeded shuffle of the distinct groups.
pub fn fold_assignment(groups: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut distinct: Vec<usize> = groups.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    distinct.shuffle(&mut rng_from_seed(seed));
    let fold_of = |g: usize| distinct.iter().position(|&d| d == g).expect("group present") % folds;
    groups.iter().map(|&g| fold_of(g)).collect()
}

/// Chooses C by `folds`-fold cross-validation. Samples sharing a group id are
/// kept in the same fold. The fold partition is drawn once and reused for
/// every grid value. Ties in mean accuracy go to the smallest C.
pub fn select_c<V: AsRef<[f64]> + Sync>(
    x: &[V],
    y: &[f64],
    groups: Option<&[usize]>,
    grid: &[f64],
    folds: usize,
    kernel: Kernel,
    seed: u64,
) -> Result<CvSelection, SvmError> {
    if grid.is_empty() {
        return Err(SvmError::InvalidInput("empty C grid".into()));
    }
    let own_groups: Vec<usize>;
    let groups = match groups {
        Some(g) => {
            if g.len() != x.len() {
                return Err(SvmError::InvalidInput("group ids must match samples".into()));
            }
            g
        }
        None => {
            own_groups = (0..x.len()).collect();
            &own_groups
        }
    };
    let n_groups = {
        let mut g = groups.to_vec();
        g.sort_unstable();
        g.dedup();
        g.len()
    };
    if folds < 2 || n_groups < folds {
        return Err(SvmError::TooFewSamples { n: n_groups, folds });
    }
    if y.len() != x.len() {
        return Err(SvmError::InvalidInput(format!(
            "{} samples but {} labels",
            x.len(),
            y.len()
        )));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(SvmError::InvalidInput("labels must be +1 or -1".into()));
    }
    if let Some(v) = x.iter().find(|v| v.as_ref().len() != x[0].as_ref().len()) {
        return Err(SvmError::DimensionMismatch {
            expected: x[0].as_ref().len(),
            found: v.as_ref().len(),
        });
    }
    let fold_of = fold_assignment(groups, folds, derive_seed(seed, &[0]));
    let gram = gram_matrix(&kernel, x);

    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..folds).map(move |f| (g, f))).collect();
    let fold_acc: Vec<f64> = jobs
        .par_iter()
        .map(|&(gi, f)| {
            let train_idx: Vec<usize> = (0..x.len()).filter(|&i| fold_of[i] != f).collect();
            let test_idx: Vec<usize> = (0..x.len()).filter(|&i| fold_of[i] == f).collect();
            let yt: Vec<f64> = train_idx.iter().map(|&i| y[i]).collect();
            let correct = if yt.iter().all(|&v| v == yt[0]) {
                // Single-class training fold: predict that class.
                test_idx.iter().filter(|&&i| y[i] == yt[0]).count()
            } else {
                let sub: Vec<Vec<f64>> = train_idx
                    .iter()
                    .map(|&a| train_idx.iter().map(|&b| gram[a][b]).collect())
                    .collect();
                let params = SmoParams {
                    seed: derive_seed(seed, &[1, f as u64]),
                    ..SmoParams::new(grid[gi])
                };
                let sol = solve_dual(&sub, &yt, &params);
                test_idx
                    .iter()
                    .filter(|&&i| {
                        let score: f64 = train_idx
                            .iter()
                            .zip(&sol.alpha)
                            .filter(|(_, &a)| a > SV_EPS)
                            .map(|(&j, &a)| a * y[j] * gram[i][j])
                            .sum::<f64>()
                            + sol.bias;
                        let label = if score >= 0.0 { 1.0 } else { -1.0 };
                        label == y[i]
                    })
                    .count()
            };
            correct as f64 / test_idx.len() as f64
        })
        .collect();

    let mut accuracies = vec![0.0; grid.len()];
    for (&(gi, _), acc) in jobs.iter().zip(fold_acc) {
        accuracies[gi] += acc / folds as f64;
    }
    let mut best = 0;
    for gi in 1..grid.len() {
        let better = accuracies[gi] > accuracies[best] + 1e-12;
        let tie_smaller = (accuracies[gi] - accuracies[best]).abs() <= 1e-12 && grid[gi] < grid[best];
        if better || tie_smaller {
            best = gi;
        }
    }
    Ok(CvSelection {
        grid: grid.to_vec(),
        folds,
        accuracies,
        chosen_c: grid[best],
    })
}
