//! Shared statistical machinery: least squares, F/t/chi-square/KS tests,
//! and a few scalar helpers used across the crate.

use crate::matrix::Matrix;
use nalgebra::{Cholesky, DMatrix, DVector, SVD};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use statrs::function::gamma::gamma_lr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("design matrix is empty")]
    EmptyDesign,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("least-squares solve failed even with pseudo-inverse")]
    SingularSystem,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; NaN for fewer than two points.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Upper-tail probability of an F(df_num, df_den) variate, computed via the
/// regularized incomplete beta function.
pub fn f_test_p_value(f: f64, df_num: f64, df_den: f64) -> f64 {
    if !f.is_finite() || f <= 0.0 {
        return 1.0;
    }
    beta_reg(df_den / 2.0, df_num / 2.0, df_den / (df_den + df_num * f))
}

/// Two-sided p-value of a Student-t statistic with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

#[derive(Debug, Clone, Copy)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Welch two-sample t-test (unequal variances). Returns `None` when either
/// sample has fewer than two points or both variances are zero.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Option<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_variance(a), sample_variance(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 <= 0.0 {
        // Identical constant samples: no evidence of difference.
        return Some(WelchTest { t: 0.0, df: na + nb - 2.0, p_value: 1.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    Some(WelchTest { t, df, p_value: student_t_two_sided_p(t, df) })
}

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Sum of squared residuals.
    pub ssr: f64,
    /// True when the normal equations were singular and the solution came
    /// from an SVD pseudo-inverse.
    pub used_pseudo_inverse: bool,
}

impl OlsFit {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.coefficients).map(|(x, c)| x * c).sum()
    }
}

/// Ordinary least squares on an explicit design matrix (include an intercept
/// column yourself). Falls back to the SVD pseudo-inverse when the normal
/// equations are singular.
pub fn ols_fit(design: &Matrix, y: &[f64]) -> Result<OlsFit, StatsError> {
    let n = design.n_rows();
    let p = design.n_cols();
    if n == 0 || p == 0 {
        return Err(StatsError::EmptyDesign);
    }
    if y.len() != n {
        return Err(StatsError::DimensionMismatch(format!(
            "{} rows vs {} responses",
            n,
            y.len()
        )));
    }
    let x = DMatrix::from_fn(n, p, |i, j| design.get(i, j));
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &yv;

    let (beta, used_pseudo_inverse) = match Cholesky::new(xtx.clone()) {
        Some(chol) => (chol.solve(&xty), false),
        None => {
            log::warn!("ols_fit: singular normal equations, using pseudo-inverse");
            let svd = SVD::new(x.clone(), true, true);
            let beta = svd
                .solve(&yv, 1e-12)
                .map_err(|_| StatsError::SingularSystem)?;
            (beta, true)
        }
    };
    let fitted_v = &x * &beta;
    let ssr = (&yv - &fitted_v).norm_squared();
    Ok(OlsFit {
        coefficients: beta.iter().copied().collect(),
        fitted: fitted_v.iter().copied().collect(),
        ssr,
        used_pseudo_inverse,
    })
}

/// One-sample Kolmogorov-Smirnov statistic against Uniform(0,1).
pub fn ks_statistic_uniform(xs: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let cdf = x.clamp(0.0, 1.0);
        let hi = (i + 1) as f64 / n - cdf;
        let lo = cdf - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    d
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut sa: Vec<f64> = a.to_vec();
    let mut sb: Vec<f64> = b.to_vec();
    sa.sort_by(|x, y| x.total_cmp(y));
    sb.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let mut d: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Survival function of the Kolmogorov distribution,
/// `Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..101 {
        let term = (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Approximate p-value for the one-sample KS statistic vs Uniform(0,1)
/// (Stephens' small-sample correction).
pub fn ks_uniform_p_value(xs: &[f64]) -> f64 {
    let d = ks_statistic_uniform(xs);
    let n = xs.len() as f64;
    let sn = n.sqrt();
    kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)
}

/// Critical value for the two-sample KS statistic at significance `alpha`:
/// `c(alpha) * sqrt((n+m)/(n*m))` with `c(alpha) = sqrt(-ln(alpha/2)/2)`.
pub fn ks_two_sample_critical(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Pearson chi-square test of independence on a contingency table
/// (rows x columns of counts). Zero-margin rows/columns are dropped.
pub fn chi_square_independence(table: &[Vec<f64>]) -> Option<ChiSquareTest> {
    let n_rows = table.len();
    let n_cols = table.first()?.len();
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<f64> =
        (0..n_cols).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let total: f64 = row_sums.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let live_rows = row_sums.iter().filter(|&&s| s > 0.0).count();
    let live_cols = col_sums.iter().filter(|&&s| s > 0.0).count();
    if live_rows < 2 || live_cols < 2 {
        return None;
    }
    let mut stat = 0.0;
    for i in 0..n_rows {
        for j in 0..n_cols {
            if row_sums[i] <= 0.0 || col_sums[j] <= 0.0 {
                continue;
            }
            let expected = row_sums[i] * col_sums[j] / total;
            let diff = table[i][j] - expected;
            stat += diff * diff / expected;
        }
    }
    let df = ((live_rows - 1) * (live_cols - 1)) as f64;
    // Upper-tail chi-square via the regularized lower incomplete gamma.
    let p = if stat <= 0.0 { 1.0 } else { 1.0 - gamma_lr(df / 2.0, stat / 2.0) };
    Some(ChiSquareTest { statistic: stat, df, p_value: p })
}
