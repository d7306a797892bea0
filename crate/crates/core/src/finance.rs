//! Repayment schedules, cashflows, NPV/IRR, and risk premium.
//!
//! Loan cashflows are reconstructed from the amount, rate, and term as a
//! level-payment annuity at `annual_rate / 12` per month; defaulted loans pay
//! the scheduled amount through the month implied by the repaid principal and
//! nothing afterwards.

use crate::dataset::{LoanRecord, LoanStatus};
use chrono::NaiveDate;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FinanceError {
    #[error("cashflow series has no positive outflow at t=0")]
    NoInvestment,
    #[error("cashflow series has a negative inflow at month {0}")]
    NegativeInflow(usize),
    #[error("IRR bracket found no sign change in [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },
    #[error("rate table has no entry on or before {0}")]
    RateNotCovered(NaiveDate),
    #[error("rate {0} outside [0, 0.2]")]
    RateOutOfRange(f64),
}

/// Level-payment amortization of a loan.
#[derive(Debug, Clone)]
pub struct AmortizationSchedule {
    pub monthly_payment: f64,
    /// Principal component of each monthly payment, months 1..=term.
    pub principal: Vec<f64>,
    /// Interest component of each monthly payment.
    pub interest: Vec<f64>,
}

impl AmortizationSchedule {
    pub fn term_months(&self) -> u32 {
        self.principal.len() as u32
    }

    /// Scheduled principal repaid through month `m` (inclusive).
    pub fn cumulative_principal(&self, m: u32) -> f64 {
        self.principal.iter().take(m as usize).sum()
    }
}

/// Build the repayment schedule for `amount` at `annual_rate` over
/// `term_months`, using a monthly rate of `annual_rate / 12`.
pub fn schedule(amount: f64, annual_rate: f64, term_months: u32) -> AmortizationSchedule {
    assert!(amount > 0.0 && annual_rate >= 0.0 && term_months >= 1);
    let t = term_months as usize;
    let m = annual_rate / 12.0;
    let payment = if m == 0.0 {
        amount / t as f64
    } else {
        amount * m / (1.0 - (1.0 + m).powi(-(t as i32)))
    };
    let mut principal = Vec::with_capacity(t);
    let mut interest = Vec::with_capacity(t);
    let mut balance = amount;
    for _ in 0..t {
        let i = balance * m;
        let p = payment - i;
        interest.push(i);
        principal.push(p);
        balance -= p;
    }
    AmortizationSchedule { monthly_payment: payment, principal, interest }
}

/// Largest month count whose cumulative scheduled principal does not exceed
/// `principal_paid` (floor convention; partial payments are discarded).
pub fn infer_default_month(sched: &AmortizationSchedule, principal_paid: f64) -> u32 {
    let mut cum = 0.0;
    let mut month = 0u32;
    // Small slack so "paid exactly m months" survives float accumulation.
    let slack = 1e-6 * sched.monthly_payment.max(1.0);
    for (i, p) in sched.principal.iter().enumerate() {
        cum += p;
        if cum <= principal_paid + slack {
            month = (i + 1) as u32;
        } else {
            break;
        }
    }
    month
}

/// Monthly cashflows of a loan or portfolio: one funding outflow at t=0
/// followed by nonnegative inflows for months 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct CashflowSeries {
    /// Amount funded at t=0 (stored positive).
    pub outflow: f64,
    pub inflows: Vec<f64>,
}

impl CashflowSeries {
    pub fn total_inflow(&self) -> f64 {
        self.inflows.iter().sum()
    }

    /// Pool several series into one: outflows add, inflows add per month.
    pub fn aggregate<'a>(series: impl IntoIterator<Item = &'a CashflowSeries>) -> CashflowSeries {
        let mut outflow = 0.0;
        let mut inflows: Vec<f64> = Vec::new();
        for s in series {
            outflow += s.outflow;
            if s.inflows.len() > inflows.len() {
                inflows.resize(s.inflows.len(), 0.0);
            }
            for (acc, w) in inflows.iter_mut().zip(&s.inflows) {
                *acc += w;
            }
        }
        CashflowSeries { outflow, inflows }
    }
}

/// Cashflows of a schedule in which the first `months_paid` payments are made
/// on time and nothing is paid afterwards.
pub fn cashflows_truncated(
    amount: f64,
    sched: &AmortizationSchedule,
    months_paid: u32,
) -> CashflowSeries {
    let term = sched.term_months() as usize;
    let paid = (months_paid as usize).min(term);
    let mut inflows = vec![0.0; term];
    for w in inflows.iter_mut().take(paid) {
        *w = sched.monthly_payment;
    }
    CashflowSeries { outflow: amount, inflows }
}

/// Reconstruct the cashflows of a funded loan. Completed loans pay the full
/// schedule; defaulted loans pay through the month implied by the repaid
/// principal.
pub fn cashflows(loan: &LoanRecord) -> CashflowSeries {
    let sched = schedule(loan.listing.amount, loan.final_rate, loan.term_months);
    let months = match loan.status {
        LoanStatus::Completed => loan.term_months,
        LoanStatus::Defaulted => infer_default_month(&sched, loan.principal_paid),
    };
    cashflows_truncated(loan.listing.amount, &sched, months)
}

/// Net present value at the given monthly discount rate.
pub fn npv(series: &CashflowSeries, monthly_discount: f64) -> f64 {
    assert!(monthly_discount > -1.0);
    let mut pv = 0.0;
    let mut discount = 1.0;
    for w in &series.inflows {
        discount *= 1.0 + monthly_discount;
        pv += w / discount;
    }
    pv - series.outflow
}

/// How a monthly IRR is converted to the reported annual figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Annualization {
    /// `(1 + monthly)^12 - 1`
    #[default]
    Compound,
    /// `12 * monthly`
    Times12,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrrResult {
    pub monthly: f64,
    pub annualized: f64,
}

/// Internal rate of return of a series with a single t=0 outflow and
/// nonnegative inflows, solved by bisection on the strictly decreasing NPV.
/// A series with zero total inflow returns the -100% sentinel.
pub fn irr(series: &CashflowSeries, annualization: Annualization) -> Result<IrrResult, FinanceError> {
    if series.outflow <= 0.0 {
        return Err(FinanceError::NoInvestment);
    }
    if let Some(t) = series.inflows.iter().position(|w| *w < 0.0) {
        return Err(FinanceError::NegativeInflow(t + 1));
    }
    if series.total_inflow() == 0.0 {
        return Ok(IrrResult { monthly: -1.0, annualized: -1.0 });
    }
    if npv(series, 0.0) == 0.0 {
        return Ok(IrrResult { monthly: 0.0, annualized: 0.0 });
    }

    let mut lo = -0.9999999;
    let mut hi = 1.0;
    // NPV is strictly decreasing; widen the right edge until it goes negative.
    let mut widen = 0;
    while npv(series, hi) > 0.0 {
        hi *= 4.0;
        widen += 1;
        if widen > 20 {
            return Err(FinanceError::NoSignChange { lo, hi });
        }
    }
    if npv(series, lo) < 0.0 {
        return Err(FinanceError::NoSignChange { lo, hi });
    }

    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let v = npv(series, mid);
        if v == 0.0 || hi - lo < 1e-14 {
            break;
        }
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let annualized = match annualization {
        Annualization::Compound => (1.0 + mid).powi(12) - 1.0,
        Annualization::Times12 => 12.0 * mid,
    };
    Ok(IrrResult { monthly: mid, annualized })
}

/// Annualized risk-free rates, either dated (looked up at the nearest prior
/// date) or a single fixed value.
#[derive(Debug, Clone, PartialEq)]
pub enum RateTable {
    Dated(BTreeMap<NaiveDate, f64>),
    Fixed(f64),
}

impl RateTable {
    pub fn dated(entries: impl IntoIterator<Item = (NaiveDate, f64)>) -> Result<Self, FinanceError> {
        let map: BTreeMap<NaiveDate, f64> = entries.into_iter().collect();
        for &rate in map.values() {
            if !(0.0..=0.2).contains(&rate) {
                return Err(FinanceError::RateOutOfRange(rate));
            }
        }
        Ok(RateTable::Dated(map))
    }

    pub fn fixed(rate: f64) -> Result<Self, FinanceError> {
        if !(0.0..=0.2).contains(&rate) {
            return Err(FinanceError::RateOutOfRange(rate));
        }
        Ok(RateTable::Fixed(rate))
    }

    /// Risk-free rate in force on `date`.
    pub fn rate_at(&self, date: NaiveDate) -> Result<f64, FinanceError> {
        match self {
            RateTable::Fixed(r) => Ok(*r),
            RateTable::Dated(map) => map
                .range(..=date)
                .next_back()
                .map(|(_, r)| *r)
                .ok_or(FinanceError::RateNotCovered(date)),
        }
    }
}

/// Risk premium of a funded loan: final rate minus the risk-free rate at
/// origination. Under a fixed rate table this is a constant shift, so the
/// premium ordering equals the raw-rate ordering.
pub fn risk_premium(
    final_rate: f64,
    origination_date: NaiveDate,
    rates: &RateTable,
) -> Result<f64, FinanceError> {
    Ok(final_rate - rates.rate_at(origination_date)?)
}
