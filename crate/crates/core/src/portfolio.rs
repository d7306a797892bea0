//! Machine-vs-crowd portfolio comparisons.
//!
//! Comparison 1 ranks loans by a risk score and grows a portfolio under an
//! investment budget, tracing NPV/IRR against investment. Comparison 2 is the
//! contraction method: loans are stratified into conditioning cells, monthly
//! crowds are grouped into risk-tolerance quintiles by portfolio return
//! variance, a randomization F-test checks that listing quality is unrelated
//! to the quintiles, and the machine then shrinks the riskiest quintile's
//! portfolio to match each safer quintile's variance.

use crate::dataset::{Cell, ListingRecord, LoanRecord};
use crate::finance::{
    cashflows, cashflows_truncated, irr, npv, schedule, Annualization, CashflowSeries,
    FinanceError,
};
use crate::matrix::Matrix;
use crate::metrics::{quantile_bin, MetricsError};
use crate::stats::{f_test_p_value, ols_fit, StatsError};
use chrono::Datelike;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PortfolioError {
    #[error("no loans supplied")]
    EmptyInput,
    #[error("scores and loans must be aligned: {loans} loans vs {scores} scores")]
    ScoreMismatch { loans: usize, scores: usize },
    #[error("loan {0} has no score")]
    MissingScore(u64),
    #[error("loan {0} has no return variance")]
    MissingVariance(u64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Finance(#[from] FinanceError),
}

/// A set of funded loans with its aggregate investment and returns.
#[derive(Debug, Clone)]
pub struct Portfolio {
    pub loan_ids: Vec<u64>,
    pub investment: f64,
    pub npv: f64,
    /// Annualized IRR of the pooled cashflows; None for portfolios that are
    /// empty or fail the minimum-size gate.
    pub irr: Option<f64>,
    /// Sum of member return variances when they were supplied.
    pub variance: Option<f64>,
}

fn ascending_score_order(loans: &[LoanRecord], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..loans.len()).collect();
    // Ties broken by stable loan id order.
    order.sort_by(|&a, &b| {
        scores[a].total_cmp(&scores[b]).then(loans[a].id().cmp(&loans[b].id()))
    });
    order
}

fn portfolio_irr(series: &CashflowSeries) -> Option<f64> {
    if series.outflow <= 0.0 {
        return None;
    }
    irr(series, Annualization::Compound).ok().map(|r| r.annualized)
}

/// Budget-ranked portfolio: add loans in ascending risk-score order while the
/// cumulative amount stays within `budget`, stopping at the first loan that
/// would exceed it.
pub fn rank_portfolio(
    loans: &[LoanRecord],
    scores: &[f64],
    budget: f64,
    monthly_discount: f64,
) -> Result<Portfolio, PortfolioError> {
    if loans.len() != scores.len() {
        return Err(PortfolioError::ScoreMismatch { loans: loans.len(), scores: scores.len() });
    }
    let order = ascending_score_order(loans, scores);
    let mut ids = Vec::new();
    let mut series_list = Vec::new();
    let mut invested = 0.0;
    for &i in &order {
        let amount = loans[i].listing.amount;
        if invested + amount > budget {
            break;
        }
        invested += amount;
        ids.push(loans[i].id());
        series_list.push(cashflows(&loans[i]));
    }
    let total = CashflowSeries::aggregate(series_list.iter());
    let value = if ids.is_empty() { 0.0 } else { npv(&total, monthly_discount) };
    Ok(Portfolio {
        loan_ids: ids,
        investment: invested,
        npv: value,
        irr: portfolio_irr(&total),
        variance: None,
    })
}

/// One point of a return-investment curve.
#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub size: usize,
    pub investment: f64,
    pub npv: f64,
    pub irr: Option<f64>,
}

/// Return-investment curve: one point per loan added in ascending score
/// order; the final point is the full market portfolio. IRR values are
/// suppressed for portfolios smaller than `min_irr_size`.
pub fn return_curve(
    loans: &[LoanRecord],
    scores: &[f64],
    monthly_discount: f64,
    min_irr_size: usize,
) -> Result<Vec<CurvePoint>, PortfolioError> {
    if loans.is_empty() {
        return Err(PortfolioError::EmptyInput);
    }
    if loans.len() != scores.len() {
        return Err(PortfolioError::ScoreMismatch { loans: loans.len(), scores: scores.len() });
    }
    let order = ascending_score_order(loans, scores);
    let mut points = Vec::with_capacity(loans.len());
    let mut invested = 0.0;
    let mut value = 0.0;
    let mut pooled = CashflowSeries { outflow: 0.0, inflows: Vec::new() };
    for (step, &i) in order.iter().enumerate() {
        let series = cashflows(&loans[i]);
        invested += loans[i].listing.amount;
        value += npv(&series, monthly_discount);
        pooled.outflow += series.outflow;
        if series.inflows.len() > pooled.inflows.len() {
            pooled.inflows.resize(series.inflows.len(), 0.0);
        }
        for (acc, w) in pooled.inflows.iter_mut().zip(&series.inflows) {
            *acc += w;
        }
        let size = step + 1;
        let irr_value = if size >= min_irr_size { portfolio_irr(&pooled) } else { None };
        points.push(CurvePoint { size, investment: invested, npv: value, irr: irr_value });
    }
    Ok(points)
}

/// Estimate each loan's true default probability as its score-quantile bin's
/// empirical default rate. Binning by machine score or by risk premium is the
/// caller's choice of `scores`.
pub fn estimate_default_prob(
    loans: &[LoanRecord],
    scores: &[f64],
    n_bins: usize,
) -> Result<Vec<f64>, PortfolioError> {
    if loans.len() != scores.len() {
        return Err(PortfolioError::ScoreMismatch { loans: loans.len(), scores: scores.len() });
    }
    let bins = quantile_bin(scores, n_bins)?;
    let mut count = vec![0usize; n_bins];
    let mut defaults = vec![0usize; n_bins];
    for (loan, &b) in loans.iter().zip(&bins) {
        count[b] += 1;
        defaults[b] += loan.default_label as usize;
    }
    Ok(bins.iter().map(|&b| defaults[b] as f64 / count[b] as f64).collect())
}

/// Two-point return variance of a loan: NPV if repaid in full versus NPV if
/// it defaults after `default_payment_months` on-time payments, weighted by
/// the default probability.
pub fn loan_return_variance(
    loan: &LoanRecord,
    p_default: f64,
    monthly_discount: f64,
    default_payment_months: u32,
) -> f64 {
    debug_assert!((0.0..=1.0).contains(&p_default));
    let sched = schedule(loan.listing.amount, loan.final_rate, loan.term_months);
    let full = cashflows_truncated(loan.listing.amount, &sched, loan.term_months);
    let cut = cashflows_truncated(loan.listing.amount, &sched, default_payment_months);
    let r_paid = npv(&full, monthly_discount);
    let r_default = npv(&cut, monthly_discount);
    let spread = r_paid - r_default;
    p_default * (1.0 - p_default) * spread * spread
}

/// Crowd identifier: the (year, month) of loan origination.
pub type CrowdId = (i32, u32);

pub fn crowd_id_of(date: chrono::NaiveDate) -> CrowdId {
    (date.year(), date.month())
}

/// The investors active in one calendar month, represented by the loans they
/// funded and the summed return variance of that portfolio.
#[derive(Debug, Clone)]
pub struct Crowd {
    pub id: CrowdId,
    pub member_ids: Vec<u64>,
    pub variance: f64,
}

/// Group funded loans into monthly crowds. Loans whose listing did not start
/// and end in the same calendar month are excluded (they cannot be attributed
/// to a single crowd). `variance_of` fills each crowd's portfolio variance;
/// missing entries count zero.
pub fn assign_crowds(loans: &[LoanRecord], variance_of: &BTreeMap<u64, f64>) -> Vec<Crowd> {
    let mut members: BTreeMap<CrowdId, Vec<u64>> = BTreeMap::new();
    for loan in loans {
        let start = crowd_id_of(loan.listing.creation_date);
        let end = crowd_id_of(loan.origination_date);
        if start != end {
            continue;
        }
        members.entry(end).or_default().push(loan.id());
    }
    members
        .into_iter()
        .map(|(id, mut member_ids)| {
            member_ids.sort_unstable();
            let variance =
                member_ids.iter().map(|m| variance_of.get(m).copied().unwrap_or(0.0)).sum();
            Crowd { id, member_ids, variance }
        })
        .collect()
}

/// Map from funded loan id to its crowd, honoring the same-month exclusion.
pub fn crowd_membership(loans: &[LoanRecord]) -> BTreeMap<u64, CrowdId> {
    let mut map = BTreeMap::new();
    for loan in loans {
        let start = crowd_id_of(loan.listing.creation_date);
        let end = crowd_id_of(loan.origination_date);
        if start == end {
            map.insert(loan.id(), end);
        }
    }
    map
}

/// Per-cell risk-tolerance quintiles of crowds (1 = least risk-tolerant,
/// 5 = most), ordered by each crowd's within-cell portfolio return variance.
#[derive(Debug, Clone)]
pub struct CellQuintiles {
    pub cell_id: usize,
    pub crowd_quintile: BTreeMap<CrowdId, usize>,
    /// Funded loan ids per quintile (index 0 = quintile 1).
    pub funded_by_quintile: [Vec<u64>; 5],
}

/// Build the quintile grouping for one cell, or None when fewer than five
/// crowds funded loans there. Remainder crowds go to the lower quintiles
/// first.
pub fn cell_quintiles(
    cell: &Cell,
    crowd_of: &BTreeMap<u64, CrowdId>,
    variance_of: &BTreeMap<u64, f64>,
) -> Option<CellQuintiles> {
    let mut per_crowd: BTreeMap<CrowdId, (f64, Vec<u64>)> = BTreeMap::new();
    for id in &cell.member_ids {
        if let Some(crowd) = crowd_of.get(id) {
            let v = variance_of.get(id).copied().unwrap_or(0.0);
            let entry = per_crowd.entry(*crowd).or_default();
            entry.0 += v;
            entry.1.push(*id);
        }
    }
    if per_crowd.len() < 5 {
        return None;
    }
    let mut crowds: Vec<(CrowdId, f64, Vec<u64>)> =
        per_crowd.into_iter().map(|(id, (v, m))| (id, v, m)).collect();
    crowds.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let n = crowds.len();
    let base = n / 5;
    let remainder = n % 5;
    let mut crowd_quintile = BTreeMap::new();
    let mut funded_by_quintile: [Vec<u64>; 5] = Default::default();
    let mut taken = 0;
    for q in 0..5 {
        let size = base + usize::from(q < remainder);
        for (id, _, members) in &crowds[taken..taken + size] {
            crowd_quintile.insert(*id, q + 1);
            funded_by_quintile[q].extend(members.iter().copied());
        }
        taken += size;
    }
    for members in &mut funded_by_quintile {
        members.sort_unstable();
    }
    Some(CellQuintiles { cell_id: cell.cell_id, crowd_quintile, funded_by_quintile })
}

/// F-test of the joint significance of quintile indicators (quintile 5 is
/// the baseline) for an index regressed within one cell:
/// `F = ((SSR_r - SSR_u)/4) / (SSR_u/(n-5))`. Returns None when n <= 5.
pub fn quintile_f_test(
    index_values: &[f64],
    quintile_of: &[usize],
) -> Result<Option<(f64, f64, bool)>, PortfolioError> {
    let n = index_values.len();
    if n <= 5 {
        return Ok(None);
    }
    // Restricted model: intercept only.
    let mean = index_values.iter().sum::<f64>() / n as f64;
    let ssr_restricted: f64 = index_values.iter().map(|y| (y - mean) * (y - mean)).sum();

    // Unrestricted: intercept plus indicators for quintiles 1..4.
    let mut design = Matrix::new(5);
    for &q in quintile_of {
        let mut row = [0.0; 5];
        row[0] = 1.0;
        if (1..=4).contains(&q) {
            row[q] = 1.0;
        }
        design.push_row(&row);
    }
    let fit = ols_fit(&design, index_values)?;
    let ssr_unrestricted = fit.ssr;

    let df_den = (n - 5) as f64;
    let f = ((ssr_restricted - ssr_unrestricted) / 4.0) / (ssr_unrestricted / df_den);
    let f = f.max(0.0);
    let p = f_test_p_value(f, 4.0, df_den);
    Ok(Some((f, p, fit.used_pseudo_inverse)))
}

/// Funded loans plus a sample of unfunded listings; the substrate of the
/// randomization check.
#[derive(Debug)]
pub struct EvaluationSet<'a> {
    pub funded: &'a [LoanRecord],
    pub unfunded: &'a [ListingRecord],
}

#[derive(Debug, Clone)]
pub struct CellCheck {
    pub cell_id: usize,
    /// Listings entering the within-cell regression.
    pub n: usize,
    pub f_statistic: f64,
    pub p_value: f64,
    pub used_pseudo_inverse: bool,
}

/// Random-assignment check. Stage 1 regresses the default label on all
/// features over the funded loans and extends the fitted index to every
/// listing; stage 2 tests, per cell, whether the index is jointly related to
/// the crowd risk-tolerance quintiles. Cells with five or fewer usable
/// listings are skipped.
pub fn randomization_check(
    cells: &[Cell],
    quintiles: &BTreeMap<usize, CellQuintiles>,
    evaluation: &EvaluationSet,
) -> Result<Vec<CellCheck>, PortfolioError> {
    if evaluation.funded.is_empty() {
        return Err(PortfolioError::EmptyInput);
    }
    let n_features = evaluation.funded[0].listing.features.len();
    let mut design = Matrix::new(n_features + 1);
    let mut labels = Vec::with_capacity(evaluation.funded.len());
    for loan in evaluation.funded {
        let mut row = Vec::with_capacity(n_features + 1);
        row.push(1.0);
        row.extend_from_slice(&loan.listing.features);
        design.push_row(&row);
        labels.push(loan.default_label as f64);
    }
    let stage1 = ols_fit(&design, &labels)?;

    // Fitted index and exposure month for every listing in the evaluation set.
    let listing_index = |listing: &ListingRecord| {
        let mut row = Vec::with_capacity(n_features + 1);
        row.push(1.0);
        row.extend_from_slice(&listing.features);
        stage1.predict_row(&row)
    };
    let mut index_of: BTreeMap<u64, (f64, CrowdId)> = BTreeMap::new();
    for loan in evaluation.funded {
        index_of.insert(
            loan.id(),
            (listing_index(&loan.listing), crowd_id_of(loan.listing.creation_date)),
        );
    }
    for listing in evaluation.unfunded {
        index_of.insert(
            listing.listing_id,
            (listing_index(listing), crowd_id_of(listing.creation_date)),
        );
    }

    let mut checks = Vec::new();
    for cell in cells {
        let Some(cq) = quintiles.get(&cell.cell_id) else { continue };
        let mut values = Vec::new();
        let mut quintile = Vec::new();
        for id in &cell.member_ids {
            let Some((index, month)) = index_of.get(id) else { continue };
            // Listings exposed to a crowd that funded nothing in this cell
            // have no quintile and drop out of the regression.
            let Some(&q) = cq.crowd_quintile.get(month) else { continue };
            values.push(*index);
            quintile.push(q);
        }
        if let Some((f, p, pinv)) = quintile_f_test(&values, &quintile)? {
            checks.push(CellCheck {
                cell_id: cell.cell_id,
                n: values.len(),
                f_statistic: f,
                p_value: p,
                used_pseudo_inverse: pinv,
            });
        }
    }
    Ok(checks)
}

#[derive(Debug, Clone)]
pub struct ContractionPoint {
    pub size: usize,
    pub variance: f64,
    pub npv: f64,
    pub irr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct QuintileReference {
    pub quintile: usize,
    pub size: usize,
    pub variance: f64,
    pub npv: f64,
    pub irr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ContractionResult {
    /// Starting point (the pooled quintile-5 portfolio) followed by one point
    /// per removal, down to the empty portfolio.
    pub curve: Vec<ContractionPoint>,
    /// Pooled quintile 1..4 reference portfolios.
    pub references: Vec<QuintileReference>,
}

fn pooled_portfolio_metrics(
    ids: &BTreeSet<u64>,
    loans_by_id: &BTreeMap<u64, &LoanRecord>,
    variance_of: &BTreeMap<u64, f64>,
    monthly_discount: f64,
) -> (f64, f64, Option<f64>) {
    let series: Vec<CashflowSeries> = ids.iter().map(|id| cashflows(loans_by_id[id])).collect();
    let pooled = CashflowSeries::aggregate(series.iter());
    let variance: f64 = ids.iter().map(|id| variance_of.get(id).copied().unwrap_or(0.0)).sum();
    let value = if ids.is_empty() { 0.0 } else { npv(&pooled, monthly_discount) };
    (variance, value, portfolio_irr(&pooled))
}

/// Contraction: pool the quintile-5 portfolios of all cells, then repeatedly
/// remove the member with the highest machine-predicted risk, recording
/// (variance, NPV, IRR) after each removal; quintile 1-4 pooled portfolios
/// are emitted as reference points.
pub fn contraction(
    quintiles: &[CellQuintiles],
    loans_by_id: &BTreeMap<u64, &LoanRecord>,
    machine_score: &BTreeMap<u64, f64>,
    variance_of: &BTreeMap<u64, f64>,
    monthly_discount: f64,
) -> Result<ContractionResult, PortfolioError> {
    let mut q5: BTreeSet<u64> = BTreeSet::new();
    for cq in quintiles {
        q5.extend(cq.funded_by_quintile[4].iter().copied());
    }
    if q5.is_empty() {
        return Err(PortfolioError::EmptyInput);
    }
    for id in &q5 {
        if !machine_score.contains_key(id) {
            return Err(PortfolioError::MissingScore(*id));
        }
        if !variance_of.contains_key(id) {
            return Err(PortfolioError::MissingVariance(*id));
        }
    }

    // Removal order: highest machine risk first, ties by id.
    let mut order: Vec<u64> = q5.iter().copied().collect();
    order.sort_by(|a, b| machine_score[b].total_cmp(&machine_score[a]).then(a.cmp(b)));

    let mut variance: f64 = q5.iter().map(|id| variance_of[id]).sum();
    let start_series: Vec<CashflowSeries> =
        q5.iter().map(|id| cashflows(loans_by_id[id])).collect();
    let mut pooled = CashflowSeries::aggregate(start_series.iter());
    let mut value = npv(&pooled, monthly_discount);
    let mut size = q5.len();

    let mut curve = Vec::with_capacity(size + 1);
    curve.push(ContractionPoint { size, variance, npv: value, irr: portfolio_irr(&pooled) });
    for id in order {
        let series = cashflows(loans_by_id[&id]);
        variance -= variance_of[&id];
        value -= npv(&series, monthly_discount);
        pooled.outflow -= series.outflow;
        for (acc, w) in pooled.inflows.iter_mut().zip(&series.inflows) {
            *acc -= w;
        }
        size -= 1;
        if size == 0 {
            // Exact zero endpoint for the empty portfolio.
            curve.push(ContractionPoint { size: 0, variance: 0.0, npv: 0.0, irr: None });
        } else {
            curve.push(ContractionPoint {
                size,
                variance: variance.max(0.0),
                npv: value,
                irr: portfolio_irr(&pooled),
            });
        }
    }

    let mut references = Vec::new();
    for q in 0..4 {
        let mut ids: BTreeSet<u64> = BTreeSet::new();
        for cq in quintiles {
            ids.extend(cq.funded_by_quintile[q].iter().copied());
        }
        let (variance, value, irr_value) =
            pooled_portfolio_metrics(&ids, loans_by_id, variance_of, monthly_discount);
        references.push(QuintileReference {
            quintile: q + 1,
            size: ids.len(),
            variance,
            npv: value,
            irr: irr_value,
        });
    }

    Ok(ContractionResult { curve, references })
}

/// Curve return at a target variance, linearly interpolated between the two
/// adjacent contraction points bracketing it. None when the target lies
/// outside the curve's variance range.
pub fn curve_npv_at_variance(curve: &[ContractionPoint], variance: f64) -> Option<f64> {
    interpolate(curve, variance, |p| p.npv)
}

pub fn curve_irr_at_variance(curve: &[ContractionPoint], variance: f64) -> Option<f64> {
    // Interpolate only across points where the IRR is defined.
    let defined: Vec<ContractionPoint> =
        curve.iter().filter(|p| p.irr.is_some()).cloned().collect();
    interpolate(&defined, variance, |p| p.irr.unwrap())
}

fn interpolate(
    curve: &[ContractionPoint],
    variance: f64,
    value: impl Fn(&ContractionPoint) -> f64,
) -> Option<f64> {
    // Variances are non-increasing along the curve.
    for w in curve.windows(2) {
        let (hi, lo) = (&w[0], &w[1]);
        if variance <= hi.variance && variance >= lo.variance {
            let width = hi.variance - lo.variance;
            if width <= 0.0 {
                return Some(value(lo));
            }
            let t = (variance - lo.variance) / width;
            return Some(value(lo) + t * (value(hi) - value(lo)));
        }
    }
    None
}

/// One point of the borrower-profile curves: cumulative borrower traits of
/// the portfolio as loans are added in ascending score order.
#[derive(Debug, Clone)]
pub struct ProfilePoint {
    pub size: usize,
    pub mean_scorex: f64,
    pub homeowner_fraction: f64,
    pub mean_credit_history_days: f64,
}

/// Cumulative borrower-profile means along one score ordering. `is_homeowner`
/// is aligned with `loans`; loans without a ScoreX bin contribute 0 levels.
pub fn borrower_profile_curve(
    loans: &[LoanRecord],
    scores: &[f64],
    is_homeowner: &[bool],
) -> Result<Vec<ProfilePoint>, PortfolioError> {
    if loans.is_empty() {
        return Err(PortfolioError::EmptyInput);
    }
    if loans.len() != scores.len() {
        return Err(PortfolioError::ScoreMismatch { loans: loans.len(), scores: scores.len() });
    }
    let order = ascending_score_order(loans, scores);
    let mut points = Vec::with_capacity(loans.len());
    let mut scorex_sum = 0.0;
    let mut homeowner_sum = 0.0;
    let mut history_sum = 0.0;
    for (step, &i) in order.iter().enumerate() {
        scorex_sum += loans[i].listing.scorex_bin.unwrap_or(0) as f64;
        homeowner_sum += is_homeowner[i] as u8 as f64;
        history_sum += loans[i].listing.credit_history_days as f64;
        let size = (step + 1) as f64;
        points.push(ProfilePoint {
            size: step + 1,
            mean_scorex: scorex_sum / size,
            homeowner_fraction: homeowner_sum / size,
            mean_credit_history_days: history_sum / size,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CreditGrade, ListingRecord, LoanStatus};
    use crate::finance::RateTable;
    use crate::stats;
    use approx::assert_relative_eq;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn loan(id: u64, amount: f64, rate: f64, day: NaiveDate, defaulted: bool) -> LoanRecord {
        let sched = schedule(amount, rate, 36);
        let principal_paid = if defaulted { sched.cumulative_principal(12) } else { amount };
        LoanRecord {
            listing: ListingRecord {
                listing_id: id,
                amount,
                max_borrower_rate: 0.35,
                creation_date: day,
                credit_grade: CreditGrade::C,
                scorex_bin: Some(5),
                credit_history_days: 3000,
                occupation: None,
                location: None,
                features: vec![],
            },
            final_rate: rate,
            origination_date: day,
            term_months: 36,
            principal_paid,
            interest_paid: 0.0,
            status: if defaulted { LoanStatus::Defaulted } else { LoanStatus::Completed },
            default_label: defaulted as u8,
        }
    }

    /// The five-loan worked example: amounts and the two risk orderings.
    fn sample_market() -> (Vec<LoanRecord>, Vec<f64>, Vec<f64>) {
        let d = date(2007, 5, 1);
        let loans = vec![
            loan(1, 1000.0, 0.19, d, false),
            loan(2, 2500.0, 0.25, d, false),
            loan(3, 2000.0, 0.15, d, false),
            loan(4, 1000.0, 0.21, d, false),
            loan(5, 2500.0, 0.20, d, false),
        ];
        let machine = vec![0.25, 0.15, 0.18, 0.19, 0.20];
        let premium = vec![0.19, 0.25, 0.15, 0.21, 0.20];
        (loans, machine, premium)
    }

    #[test]
    fn rank_portfolio_reproduces_worked_example() {
        let (loans, machine, premium) = sample_market();
        let by_machine = rank_portfolio(&loans, &machine, 5500.0, 0.028 / 12.0).unwrap();
        assert_eq!(by_machine.loan_ids, vec![2, 3, 4]);
        assert_eq!(by_machine.investment, 5500.0);
        let by_crowd = rank_portfolio(&loans, &premium, 5500.0, 0.028 / 12.0).unwrap();
        assert_eq!(by_crowd.loan_ids, vec![3, 1, 5]);
        assert_eq!(by_crowd.investment, 5500.0);
    }

    #[test]
    fn zero_budget_gives_empty_portfolio() {
        let (loans, machine, _) = sample_market();
        let p = rank_portfolio(&loans, &machine, 0.0, 0.002).unwrap();
        assert!(p.loan_ids.is_empty());
        assert_eq!(p.npv, 0.0);
        assert!(p.irr.is_none());
    }

    #[test]
    fn full_budget_gives_market_portfolio() {
        let (loans, machine, premium) = sample_market();
        let a = rank_portfolio(&loans, &machine, 1e9, 0.002).unwrap();
        let b = rank_portfolio(&loans, &premium, 1e9, 0.002).unwrap();
        assert_eq!(a.loan_ids.len(), 5);
        assert_eq!(b.loan_ids.len(), 5);
        assert_relative_eq!(a.npv, b.npv, epsilon = 1e-9);
        assert_eq!(a.investment, 9000.0);
    }

    #[test]
    fn rank_portfolio_is_nested_in_budget() {
        let (loans, machine, _) = sample_market();
        let mut previous: Vec<u64> = vec![];
        for budget in [0.0, 1500.0, 3000.0, 4500.0, 6000.0, 9000.0] {
            let p = rank_portfolio(&loans, &machine, budget, 0.002).unwrap();
            assert!(
                previous.iter().all(|id| p.loan_ids.contains(id)),
                "budget {budget}: {previous:?} not within {:?}",
                p.loan_ids
            );
            previous = p.loan_ids;
        }
    }

    #[test]
    fn portfolio_npv_is_sum_of_member_npvs() {
        let (loans, machine, _) = sample_market();
        let p = rank_portfolio(&loans, &machine, 9000.0, 0.028 / 12.0).unwrap();
        let expected: f64 = loans.iter().map(|l| npv(&cashflows(l), 0.028 / 12.0)).sum();
        assert_relative_eq!(p.npv, expected, max_relative = 1e-6);
    }

    #[test]
    fn return_curve_reaches_market_point() {
        let (loans, machine, _) = sample_market();
        let curve = return_curve(&loans, &machine, 0.028 / 12.0, 1).unwrap();
        assert_eq!(curve.len(), 5);
        let last = curve.last().unwrap();
        assert_relative_eq!(last.investment, 9000.0);
        let market = rank_portfolio(&loans, &machine, 1e9, 0.028 / 12.0).unwrap();
        assert_relative_eq!(last.npv, market.npv, epsilon = 1e-9);
        // IRR gate.
        let gated = return_curve(&loans, &machine, 0.028 / 12.0, 3).unwrap();
        assert!(gated[0].irr.is_none() && gated[1].irr.is_none());
        assert!(gated[2].irr.is_some());
    }

    #[test]
    fn random_order_curves_average_to_linear_interpolation() {
        // Mean NPV at step k over random orderings = k/n * market NPV.
        let d = date(2007, 5, 1);
        let loans: Vec<LoanRecord> = (0..30)
            .map(|i| loan(i + 1, 1000.0, 0.15 + 0.003 * i as f64, d, i % 3 == 0))
            .collect();
        let market_npv: f64 = loans.iter().map(|l| npv(&cashflows(l), 0.002)).sum();
        let n = loans.len();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let reps = 400;
        let mut mean_at_step = vec![0.0; n];
        for _ in 0..reps {
            let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let curve = return_curve(&loans, &scores, 0.002, usize::MAX).unwrap();
            for (k, point) in curve.iter().enumerate() {
                mean_at_step[k] += point.npv / reps as f64;
            }
        }
        for (k, &mean) in mean_at_step.iter().enumerate() {
            let expected = market_npv * (k + 1) as f64 / n as f64;
            assert!(
                (mean - expected).abs() < 0.08 * market_npv.abs().max(1000.0),
                "step {k}: mean {mean} vs linear {expected}"
            );
        }
    }

    #[test]
    fn scorex_ordering_adds_best_bins_first() {
        let d = date(2007, 5, 1);
        let mut loans: Vec<LoanRecord> =
            (0..6).map(|i| loan(i + 1, 1000.0, 0.2, d, false)).collect();
        for (i, l) in loans.iter_mut().enumerate() {
            l.listing.scorex_bin = Some((i + 3) as u8);
        }
        // Best bin first = ascending (negated level) score.
        let scores: Vec<f64> =
            loans.iter().map(|l| -(l.listing.scorex_bin.unwrap() as f64)).collect();
        let curve = return_curve(&loans, &scores, 0.002, usize::MAX).unwrap();
        assert_eq!(curve[0].size, 1);
        let first = rank_portfolio(&loans, &scores, 1000.0, 0.002).unwrap();
        assert_eq!(first.loan_ids, vec![6]); // highest scorex level
    }

    #[test]
    fn default_prob_is_bin_rate() {
        let d = date(2007, 5, 1);
        let loans: Vec<LoanRecord> = (0..10).map(|i| loan(i + 1, 1000.0, 0.2, d, i < 4)).collect();
        let scores: Vec<f64> = (0..10).map(|i| i as f64).collect();
        // One bin: every loan gets the pooled rate 0.4.
        let probs = estimate_default_prob(&loans, &scores, 1).unwrap();
        assert!(probs.iter().all(|&p| (p - 0.4).abs() < 1e-12));
        // Valid probabilities under any binning score.
        let probs = estimate_default_prob(&loans, &scores, 5).unwrap();
        assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn default_prob_recovers_generator_rates() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let d = date(2007, 5, 1);
        let n = 20_000;
        let mut loans = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        for i in 0..n {
            let p: f64 = rng.gen();
            loans.push(loan(i as u64 + 1, 1000.0, 0.2, d, rng.gen_bool(p)));
            scores.push(p);
        }
        let probs = estimate_default_prob(&loans, &scores, 100).unwrap();
        let mean_gap: f64 =
            probs.iter().zip(&scores).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        assert!(mean_gap <= 0.05, "mean gap {mean_gap}");
    }

    #[test]
    fn return_variance_endpoints() {
        let d = date(2007, 5, 1);
        let l = loan(1, 5000.0, 0.162, d, false);
        assert_eq!(loan_return_variance(&l, 0.0, 0.028 / 12.0, 12), 0.0);
        assert_eq!(loan_return_variance(&l, 1.0, 0.028 / 12.0, 12), 0.0);
        // Two-point variance at p = 0.5 with the reference loan's endpoints.
        let v = loan_return_variance(&l, 0.5, 0.028 / 12.0, 12);
        let expected = 0.25 * (1080.06f64 - (-2916.37f64)).powi(2);
        assert_relative_eq!(v, expected, max_relative = 1e-3);
        assert_relative_eq!(v, 3.993e6, max_relative = 1e-3);
    }

    #[test]
    fn crowds_are_monthly_with_same_month_rule() {
        let mut loans = Vec::new();
        let mut id = 0;
        for m in 0..19u32 {
            let (y, mo) = (2007 + (2 + m) as i32 / 12, (2 + m) % 12 + 1);
            for k in 0..3 {
                id += 1;
                loans.push(loan(id, 1000.0, 0.2, date(y, mo, 5 + k), false));
            }
        }
        let crowds = assign_crowds(&loans, &BTreeMap::new());
        assert_eq!(crowds.len(), 19);

        // A loan listed in one month but originated in the next is excluded.
        let mut crossing = loan(999, 1000.0, 0.2, date(2007, 5, 28), false);
        crossing.origination_date = date(2007, 6, 3);
        loans.push(crossing);
        let crowds = assign_crowds(&loans, &BTreeMap::new());
        assert!(crowds.iter().all(|c| !c.member_ids.contains(&999)));
        let membership = crowd_membership(&loans);
        assert!(!membership.contains_key(&999));
    }

    #[test]
    fn single_month_gives_one_crowd() {
        let loans: Vec<LoanRecord> = (0..5)
            .map(|i| loan(i + 1, 1000.0, 0.2, date(2007, 5, 1 + i as u32), false))
            .collect();
        let variances: BTreeMap<u64, f64> = (1..=5u64).map(|i| (i, i as f64)).collect();
        let crowds = assign_crowds(&loans, &variances);
        assert_eq!(crowds.len(), 1);
        assert_eq!(crowds[0].variance, 15.0);
    }

    #[test]
    fn quintile_split_puts_remainder_low_and_orders_by_variance() {
        // 7 crowds in one cell: sizes should be 2,2,1,1,1 by ascending
        // within-cell variance.
        let mut loans = Vec::new();
        let mut variance_of = BTreeMap::new();
        for m in 0..7u32 {
            for k in 0..2 {
                let id = (m * 2 + k + 1) as u64;
                loans.push(loan(id, 1000.0, 0.2, date(2007, 3 + m, 3), false));
                variance_of.insert(id, (m as f64 + 1.0) * 10.0 + k as f64);
            }
        }
        let crowd_of = crowd_membership(&loans);
        let cell = Cell {
            cell_id: 0,
            amount_bin: 0,
            history_bins: vec![0],
            rate_bin: 0,
            grade: CreditGrade::C,
            member_ids: loans.iter().map(|l| l.id()).collect(),
        };
        let cq = cell_quintiles(&cell, &crowd_of, &variance_of).unwrap();
        let sizes: Vec<usize> =
            (0..5).map(|q| cq.crowd_quintile.values().filter(|&&v| v == q + 1).count()).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
        // Quintile 5 holds the highest-variance crowd (September).
        assert_eq!(cq.crowd_quintile[&(2007, 9)], 5);
        assert_eq!(cq.crowd_quintile[&(2007, 3)], 1);
        assert_eq!(cq.funded_by_quintile[4], vec![13, 14]);
    }

    #[test]
    fn quintiles_need_five_crowds() {
        let loans: Vec<LoanRecord> = (0..4)
            .map(|m| loan(m as u64 + 1, 1000.0, 0.2, date(2007, 3 + m as u32, 3), false))
            .collect();
        let crowd_of = crowd_membership(&loans);
        let cell = Cell {
            cell_id: 0,
            amount_bin: 0,
            history_bins: vec![0],
            rate_bin: 0,
            grade: CreditGrade::C,
            member_ids: loans.iter().map(|l| l.id()).collect(),
        };
        assert!(cell_quintiles(&cell, &crowd_of, &BTreeMap::new()).is_none());
    }

    #[test]
    fn f_test_matches_explicit_ssr_arithmetic() {
        // 12 observations over quintiles with a hand-computable ANOVA.
        let values = vec![
            1.0, 2.0, 3.0, // q1
            2.0, 4.0, // q2
            5.0, 5.0, // q3
            4.0, 6.0, // q4
            7.0, 8.0, 9.0, // q5
        ];
        let quintiles = vec![1, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 5];
        let (f, p, pinv) = quintile_f_test(&values, &quintiles).unwrap().unwrap();
        assert!(!pinv);

        // Oracle: group means give SSR_u, the grand mean gives SSR_r.
        let groups: Vec<Vec<f64>> = (1..=5)
            .map(|q| {
                values
                    .iter()
                    .zip(&quintiles)
                    .filter(|(_, &g)| g == q)
                    .map(|(v, _)| *v)
                    .collect()
            })
            .collect();
        let grand = values.iter().sum::<f64>() / values.len() as f64;
        let ssr_r: f64 = values.iter().map(|v| (v - grand) * (v - grand)).sum();
        let ssr_u: f64 = groups
            .iter()
            .flat_map(|g| {
                let m = g.iter().sum::<f64>() / g.len() as f64;
                g.iter().map(move |v| (v - m) * (v - m))
            })
            .sum();
        let f_oracle = ((ssr_r - ssr_u) / 4.0) / (ssr_u / (values.len() as f64 - 5.0));
        assert_relative_eq!(f, f_oracle, epsilon = 1e-9);
        assert_relative_eq!(
            p,
            stats::f_test_p_value(f_oracle, 4.0, values.len() as f64 - 5.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn f_test_detects_perfect_signal_and_skips_small_cells() {
        let values: Vec<f64> = (0..50).map(|i| (i % 5) as f64 * 10.0).collect();
        let quintiles: Vec<usize> = (0..50).map(|i| i % 5 + 1).collect();
        let (_, p, _) = quintile_f_test(&values, &quintiles).unwrap().unwrap();
        assert!(p < 1e-12);
        assert!(quintile_f_test(&values[..5], &quintiles[..5]).unwrap().is_none());
    }

    #[test]
    fn f_test_null_p_values_are_uniform() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut p_values = Vec::new();
        for _ in 0..300 {
            let n = rng.gen_range(30..80);
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    let u1: f64 = rng.gen::<f64>().max(1e-12);
                    let u2: f64 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            let quintiles: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=5)).collect();
            if let Some((_, p, _)) = quintile_f_test(&values, &quintiles).unwrap() {
                p_values.push(p);
            }
        }
        let ks_p = stats::ks_uniform_p_value(&p_values);
        assert!(ks_p > 0.01, "KS p-value {ks_p}");
    }

    fn toy_quintiles(loans: &[LoanRecord], variance_of: &BTreeMap<u64, f64>) -> CellQuintiles {
        let crowd_of = crowd_membership(loans);
        let cell = Cell {
            cell_id: 0,
            amount_bin: 0,
            history_bins: vec![0],
            rate_bin: 0,
            grade: CreditGrade::C,
            member_ids: loans.iter().map(|l| l.id()).collect(),
        };
        cell_quintiles(&cell, &crowd_of, variance_of).unwrap()
    }

    #[test]
    fn contraction_walks_to_empty_portfolio() {
        let mut loans = Vec::new();
        let mut variance_of = BTreeMap::new();
        let mut machine_score = BTreeMap::new();
        for m in 0..5u32 {
            for k in 0..3 {
                let id = (m * 3 + k + 1) as u64;
                loans.push(loan(id, 1000.0, 0.2, date(2007, 3 + m, 3), k == 2));
                variance_of.insert(id, (m as f64 + 1.0) * 100.0);
                machine_score.insert(id, k as f64 / 3.0);
            }
        }
        let cq = toy_quintiles(&loans, &variance_of);
        let loans_by_id: BTreeMap<u64, &LoanRecord> = loans.iter().map(|l| (l.id(), l)).collect();
        let result = contraction(&[cq], &loans_by_id, &machine_score, &variance_of, 0.002).unwrap();
        // Quintile 5 pooled portfolio has 3 loans: 1 start point + 3 removals.
        assert_eq!(result.curve.len(), 4);
        let last = result.curve.last().unwrap();
        assert_eq!(last.size, 0);
        assert_eq!(last.variance, 0.0);
        assert_eq!(last.npv, 0.0);
        assert!(last.irr.is_none());
        // Variance is non-increasing along removals.
        for w in result.curve.windows(2) {
            assert!(w[1].variance <= w[0].variance + 1e-9);
        }
        // References cover quintiles 1..4.
        let qs: Vec<usize> = result.references.iter().map(|r| r.quintile).collect();
        assert_eq!(qs, vec![1, 2, 3, 4]);
    }

    #[test]
    fn zero_variance_members_leave_variance_flat() {
        let mut loans = Vec::new();
        let mut variance_of = BTreeMap::new();
        let mut machine_score = BTreeMap::new();
        // Five crowds; the richest crowd holds two loans, one of them
        // zero-variance and riskiest by machine score.
        for m in 0..5u32 {
            let id = m as u64 + 1;
            loans.push(loan(id, 1000.0, 0.2, date(2007, 3 + m, 3), false));
            variance_of.insert(id, (m as f64 + 1.0) * 50.0);
            machine_score.insert(id, 0.1);
        }
        loans.push(loan(99, 1000.0, 0.2, date(2007, 7, 9), false));
        variance_of.insert(99, 0.0);
        machine_score.insert(99, 0.9);
        let cq = toy_quintiles(&loans, &variance_of);
        let loans_by_id: BTreeMap<u64, &LoanRecord> = loans.iter().map(|l| (l.id(), l)).collect();
        let result = contraction(&[cq], &loans_by_id, &machine_score, &variance_of, 0.002).unwrap();
        // First removal is the zero-variance loan 99.
        assert_eq!(result.curve[0].size, 2);
        assert_relative_eq!(result.curve[1].variance, result.curve[0].variance);
        assert!(result.curve[1].npv < result.curve[0].npv);
    }

    #[test]
    fn interpolation_between_curve_points() {
        let curve = vec![
            ContractionPoint { size: 2, variance: 10.0, npv: 100.0, irr: Some(0.10) },
            ContractionPoint { size: 1, variance: 4.0, npv: 40.0, irr: Some(0.04) },
            ContractionPoint { size: 0, variance: 0.0, npv: 0.0, irr: None },
        ];
        assert_relative_eq!(curve_npv_at_variance(&curve, 7.0).unwrap(), 70.0);
        assert_relative_eq!(curve_npv_at_variance(&curve, 4.0).unwrap(), 40.0);
        assert_relative_eq!(curve_npv_at_variance(&curve, 2.0).unwrap(), 20.0);
        assert!(curve_npv_at_variance(&curve, 11.0).is_none());
        assert_relative_eq!(curve_irr_at_variance(&curve, 7.0).unwrap(), 0.07);
    }

    #[test]
    fn profile_curve_first_and_last_points() {
        let d = date(2007, 5, 1);
        let mut loans: Vec<LoanRecord> =
            (0..4).map(|i| loan(i + 1, 1000.0, 0.2, d, false)).collect();
        for (i, l) in loans.iter_mut().enumerate() {
            l.listing.scorex_bin = Some((i + 2) as u8);
            l.listing.credit_history_days = 1000 * (i as u32 + 1);
        }
        let homeowner = vec![true, false, true, false];
        let machine = vec![0.1, 0.4, 0.3, 0.2];
        let premium = vec![0.9, 0.1, 0.5, 0.3];

        let by_machine = borrower_profile_curve(&loans, &machine, &homeowner).unwrap();
        // First step is the single safest loan's own profile (loan 1).
        assert_eq!(by_machine[0].mean_scorex, 2.0);
        assert_eq!(by_machine[0].homeowner_fraction, 1.0);
        assert_eq!(by_machine[0].mean_credit_history_days, 1000.0);

        let by_premium = borrower_profile_curve(&loans, &premium, &homeowner).unwrap();
        let last_m = by_machine.last().unwrap();
        let last_p = by_premium.last().unwrap();
        assert_relative_eq!(last_m.mean_scorex, last_p.mean_scorex);
        assert_relative_eq!(last_m.homeowner_fraction, last_p.homeowner_fraction);
        assert_relative_eq!(last_m.mean_credit_history_days, last_p.mean_credit_history_days);
        assert_relative_eq!(last_m.mean_scorex, (2.0 + 3.0 + 4.0 + 5.0) / 4.0);
    }

    #[test]
    fn machine_profile_tracks_safe_low_scorex_borrowers() {
        // Constructed so low-ScoreX borrowers are the safe ones: the machine
        // (using true risk) reaches them earlier than the premium ordering,
        // which here mistakenly trusts ScoreX.
        let d = date(2007, 5, 1);
        let n = 40;
        let mut loans = Vec::new();
        let mut machine = Vec::new();
        let mut premium = Vec::new();
        for i in 0..n {
            let scorex = 1 + (i % 11) as u8;
            let p_true = 0.05 + 0.5 * (scorex as f64 - 1.0) / 10.0; // high scorex = risky
            let mut l = loan(i as u64 + 1, 1000.0, 0.2, d, false);
            l.listing.scorex_bin = Some(scorex);
            loans.push(l);
            machine.push(p_true);
            premium.push(0.1 + 0.3 * (11.0 - scorex as f64) / 10.0); // trusts scorex
        }
        let homeowner = vec![false; n];
        let by_machine = borrower_profile_curve(&loans, &machine, &homeowner).unwrap();
        let by_premium = borrower_profile_curve(&loans, &premium, &homeowner).unwrap();
        // Over the mid-range inclusion the machine portfolio carries a lower
        // mean ScoreX level.
        for k in (n / 4)..(3 * n / 4) {
            assert!(
                by_machine[k].mean_scorex <= by_premium[k].mean_scorex,
                "step {k}: machine {} vs premium {}",
                by_machine[k].mean_scorex,
                by_premium[k].mean_scorex
            );
        }
    }

    #[test]
    fn risk_premium_rank_vs_rate_rank_under_dated_rates() {
        // Comparison-1 inputs: under a dated table the premium ordering can
        // differ from the raw rate ordering.
        let rates =
            RateTable::dated(vec![(date(2007, 1, 1), 0.02), (date(2007, 7, 1), 0.05)]).unwrap();
        let a = loan(1, 1000.0, 0.18, date(2007, 2, 1), false);
        let b = loan(2, 1000.0, 0.20, date(2007, 8, 1), false);
        let pa = crate::finance::risk_premium(a.final_rate, a.origination_date, &rates).unwrap();
        let pb = crate::finance::risk_premium(b.final_rate, b.origination_date, &rates).unwrap();
        assert!(a.final_rate < b.final_rate);
        assert!(pa > pb);
    }
}
