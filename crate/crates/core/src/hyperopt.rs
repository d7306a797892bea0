//! Cross-validated Bayesian hyperparameter search.
//!
//! A squared-exponential Gaussian-process surrogate is fit to the observed
//! (hyperparameters, score) pairs; candidates are proposed by maximizing
//! expected improvement over random draws after a Latin-hypercube warmup.

use crate::gbdt::{self, GbdtError, TrainConfig};
use crate::matrix::Matrix;
use crate::metrics::{roc_auc, MetricsError, ScoredSet};
use crate::stats::{normal_cdf, normal_pdf};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HyperoptError {
    #[error("parameter space is empty")]
    EmptySpace,
    #[error("parameter {name}: lower bound {lower} must be below upper bound {upper}")]
    BadBounds { name: String, lower: f64, upper: f64 },
    #[error("parameter {0}: log scale requires positive bounds")]
    LogScaleNeedsPositive(String),
    #[error("budget {0} is below the minimum of 5")]
    BudgetTooSmall(usize),
    #[error("kernel matrix singular even after jitter escalation")]
    SingularKernel,
    #[error("surrogate needs at least one observation")]
    NoObservations,
    #[error("cross-validation needs k >= 2, got {0}")]
    BadFoldCount(usize),
    #[error("data has a single class")]
    SingleClass,
    #[error("every fold was skipped (single-class held-out sets)")]
    AllFoldsSkipped,
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
    pub integer: bool,
}

impl ParamSpec {
    pub fn linear(name: &str, lower: f64, upper: f64) -> Self {
        ParamSpec { name: name.to_string(), lower, upper, scale: Scale::Linear, integer: false }
    }

    pub fn log(name: &str, lower: f64, upper: f64) -> Self {
        ParamSpec { name: name.to_string(), lower, upper, scale: Scale::Log, integer: false }
    }

    pub fn integer(name: &str, lower: f64, upper: f64) -> Self {
        ParamSpec { name: name.to_string(), lower, upper, scale: Scale::Linear, integer: true }
    }
}

/// Box-bounded hyperparameter space with per-dimension scale.
#[derive(Debug, Clone)]
pub struct ParamSpace {
    params: Vec<ParamSpec>,
}

impl ParamSpace {
    pub fn new(params: Vec<ParamSpec>) -> Result<Self, HyperoptError> {
        if params.is_empty() {
            return Err(HyperoptError::EmptySpace);
        }
        for p in &params {
            if !(p.lower < p.upper) {
                return Err(HyperoptError::BadBounds {
                    name: p.name.clone(),
                    lower: p.lower,
                    upper: p.upper,
                });
            }
            if p.scale == Scale::Log && p.lower <= 0.0 {
                return Err(HyperoptError::LogScaleNeedsPositive(p.name.clone()));
            }
        }
        Ok(ParamSpace { params })
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Map a point from the unit cube into the space (no integer rounding).
    fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.params
            .iter()
            .zip(u)
            .map(|(p, &t)| match p.scale {
                Scale::Linear => p.lower + t * (p.upper - p.lower),
                Scale::Log => (p.lower.ln() + t * (p.upper.ln() - p.lower.ln())).exp(),
            })
            .collect()
    }

    /// Round integer dimensions in place (used at evaluation time; the
    /// surrogate itself works on the continuous relaxation).
    pub fn round_integers(&self, x: &mut [f64]) {
        for (p, v) in self.params.iter().zip(x.iter_mut()) {
            if p.integer {
                *v = v.round().clamp(p.lower.ceil(), p.upper.floor());
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.params
            .iter()
            .zip(x)
            .all(|(p, &v)| v >= p.lower - 1e-12 && v <= p.upper + 1e-12)
    }
}

/// Squared-exponential kernel with per-dimension length-scales.
#[derive(Debug, Clone)]
pub struct SquaredExponential {
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
}

impl SquaredExponential {
    pub fn isotropic(dim: usize, length_scale: f64, signal_variance: f64) -> Self {
        SquaredExponential { length_scales: vec![length_scale; dim], signal_variance }
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.length_scales)
            .map(|((x, y), l)| {
                let d = (x - y) / l;
                d * d
            })
            .sum();
        self.signal_variance * (-0.5 * r2).exp()
    }
}

/// Gaussian-process posterior over observed (point, value) pairs.
#[derive(Debug, Clone)]
pub struct GpSurrogate {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub kernel: SquaredExponential,
    pub noise_variance: f64,
    chol: Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    log_marginal_likelihood: f64,
}

impl GpSurrogate {
    /// Fit the zero-mean GP; the kernel matrix gets escalating jitter until
    /// its Cholesky factorization succeeds.
    pub fn fit(
        points: Vec<Vec<f64>>,
        values: Vec<f64>,
        kernel: SquaredExponential,
        noise_variance: f64,
    ) -> Result<Self, HyperoptError> {
        let n = points.len();
        if n == 0 || values.len() != n {
            return Err(HyperoptError::NoObservations);
        }
        let base = DMatrix::from_fn(n, n, |i, j| kernel.eval(&points[i], &points[j]));
        let scale = kernel.signal_variance.max(1e-12);
        let mut chol = None;
        for jitter in [0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4] {
            let k = &base + DMatrix::identity(n, n) * (noise_variance + jitter * scale);
            if let Some(c) = Cholesky::new(k) {
                chol = Some(c);
                break;
            }
        }
        let chol = chol.ok_or(HyperoptError::SingularKernel)?;
        let y = DVector::from_column_slice(&values);
        let alpha = chol.solve(&y);
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        let log_marginal_likelihood =
            -0.5 * y.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(GpSurrogate {
            points,
            values,
            kernel,
            noise_variance,
            chol,
            alpha,
            log_marginal_likelihood,
        })
    }

    /// Posterior mean and variance at a query point.
    pub fn posterior(&self, query: &[f64]) -> (f64, f64) {
        let n = self.points.len();
        let k_star = DVector::from_fn(n, |i, _| self.kernel.eval(&self.points[i], query));
        let mean = k_star.dot(&self.alpha);
        let v = self.chol.solve(&k_star);
        let var = self.kernel.eval(query, query) - k_star.dot(&v);
        (mean, var.max(0.0))
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }
}

/// Posterior (mean, variance) of a surrogate at a query point.
pub fn gp_posterior(surrogate: &GpSurrogate, query: &[f64]) -> (f64, f64) {
    surrogate.posterior(query)
}

/// Expected improvement over `best` at posterior (mean, variance).
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sigma = variance.sqrt();
    if sigma < 1e-12 {
        return (mean - best).max(0.0);
    }
    let z = (mean - best) / sigma;
    (mean - best) * normal_cdf(z) + sigma * normal_pdf(z)
}

/// Reproducible k-fold assignment: shuffled indices dealt into folds whose
/// sizes differ by at most one.
pub fn fold_indices(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (pos, idx) in order.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    folds
}

/// Mean held-out AUC over a k-fold cross-validation. Folds whose held-out
/// set has a single class are skipped with a warning.
pub fn kfold_cv_auc(
    features: &Matrix,
    labels: &[f64],
    config: &TrainConfig,
    k: usize,
    seed: u64,
) -> Result<f64, HyperoptError> {
    if k < 2 {
        return Err(HyperoptError::BadFoldCount(k));
    }
    let n = features.n_rows();
    let has_pos = labels.iter().any(|&y| y == 1.0);
    let has_neg = labels.iter().any(|&y| y == 0.0);
    if !has_pos || !has_neg {
        return Err(HyperoptError::SingleClass);
    }

    let folds = fold_indices(n, k, seed);
    let mut aucs = Vec::new();
    for (fold_id, fold) in folds.iter().enumerate() {
        let held_labels: Vec<u8> = fold.iter().map(|&i| labels[i] as u8).collect();
        if held_labels.iter().all(|&y| y == 0) || held_labels.iter().all(|&y| y == 1) {
            log::warn!("fold {fold_id} has a single class; skipping");
            continue;
        }
        let in_fold = {
            let mut mask = vec![false; n];
            for &i in fold {
                mask[i] = true;
            }
            mask
        };
        let train_idx: Vec<usize> = (0..n).filter(|&i| !in_fold[i]).collect();
        let train_features = features.select_rows(&train_idx);
        let train_labels: Vec<f64> = train_idx.iter().map(|&i| labels[i]).collect();
        let model = gbdt::train(&train_features, &train_labels, config)?;
        let held_features = features.select_rows(fold);
        let preds = model.predict_many(&held_features)?;
        let auc = roc_auc(&ScoredSet::new(preds, held_labels)?)?.auc;
        aucs.push(auc);
    }
    if aucs.is_empty() {
        return Err(HyperoptError::AllFoldsSkipped);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// One evaluated point in the search trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    pub params: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct BayesOptResult {
    pub best_params: Vec<f64>,
    pub best_score: f64,
    pub trace: Vec<TraceRow>,
}

fn latin_hypercube(rng: &mut ChaCha12Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for _ in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        columns.push(
            strata
                .into_iter()
                .map(|s| (s as f64 + rng.gen::<f64>()) / n as f64)
                .collect(),
        );
    }
    (0..n).map(|i| columns.iter().map(|c| c[i]).collect()).collect()
}

const CANDIDATE_DRAWS: usize = 1024;
const LENGTH_SCALE_GRID: [f64; 7] = [0.05, 0.1, 0.2, 0.35, 0.5, 1.0, 2.0];

/// Maximize a black-box objective over the space within `budget` evaluations:
/// a Latin-hypercube warmup of `max(5, 2*dim)` points, then expected-
/// improvement proposals from a GP surrogate refit each iteration (kernel
/// length-scale picked by marginal likelihood over a fixed grid). Non-finite
/// objective values are recorded as the worst score seen so far.
pub fn bayes_opt(
    space: &ParamSpace,
    mut objective: impl FnMut(&[f64]) -> f64,
    budget: usize,
    seed: u64,
) -> Result<BayesOptResult, HyperoptError> {
    if budget < 5 {
        return Err(HyperoptError::BudgetTooSmall(budget));
    }
    let dim = space.dim();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut unit_points: Vec<Vec<f64>> = Vec::with_capacity(budget);
    let mut scores: Vec<f64> = Vec::with_capacity(budget);
    let mut trace: Vec<TraceRow> = Vec::with_capacity(budget);

    let evaluate = |unit: Vec<f64>,
                        unit_points: &mut Vec<Vec<f64>>,
                        scores: &mut Vec<f64>,
                        trace: &mut Vec<TraceRow>,
                        objective: &mut dyn FnMut(&[f64]) -> f64| {
        let mut params = space.from_unit(&unit);
        space.round_integers(&mut params);
        let raw = objective(&params);
        let score = if raw.is_finite() {
            raw
        } else {
            let worst = scores.iter().copied().fold(f64::INFINITY, f64::min);
            if worst.is_finite() {
                worst
            } else {
                0.0
            }
        };
        trace.push(TraceRow { iteration: trace.len(), params, score });
        unit_points.push(unit);
        scores.push(score);
    };

    let n_warmup = (2 * dim).max(5).min(budget);
    for unit in latin_hypercube(&mut rng, n_warmup, dim) {
        evaluate(unit, &mut unit_points, &mut scores, &mut trace, &mut objective);
    }

    while scores.len() < budget {
        let mean_y = scores.iter().sum::<f64>() / scores.len() as f64;
        let centered: Vec<f64> = scores.iter().map(|y| y - mean_y).collect();
        let signal =
            (centered.iter().map(|y| y * y).sum::<f64>() / centered.len() as f64).max(1e-12);

        // Length-scale by marginal likelihood over the grid.
        let mut best_gp: Option<GpSurrogate> = None;
        for &ls in &LENGTH_SCALE_GRID {
            let kernel = SquaredExponential::isotropic(dim, ls, signal);
            let gp =
                GpSurrogate::fit(unit_points.clone(), centered.clone(), kernel, 1e-6 * signal)?;
            if best_gp
                .as_ref()
                .map_or(true, |b| gp.log_marginal_likelihood() > b.log_marginal_likelihood())
            {
                best_gp = Some(gp);
            }
        }
        let gp = best_gp.expect("length-scale grid is nonempty");

        let best_centered = centered.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut best_candidate: Option<(f64, Vec<f64>)> = None;
        for _ in 0..CANDIDATE_DRAWS {
            let unit: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
            let (mu, var) = gp.posterior(&unit);
            let ei = expected_improvement(mu, var, best_centered);
            if best_candidate.as_ref().map_or(true, |(b, _)| ei > *b) {
                best_candidate = Some((ei, unit));
            }
        }
        let (_, unit) = best_candidate.expect("candidate draws are nonempty");
        evaluate(unit, &mut unit_points, &mut scores, &mut trace, &mut objective);
    }

    let best_idx = (0..scores.len())
        .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
        .expect("at least one evaluation");
    Ok(BayesOptResult {
        best_params: trace[best_idx].params.clone(),
        best_score: scores[best_idx],
        trace,
    })
}
