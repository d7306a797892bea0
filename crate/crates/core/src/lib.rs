//! Credit-risk scoring, portfolio evaluation, and fairness toolkit for
//! crowd-lending data.
//!
//! The crate covers the full pipeline for comparing machine default
//! predictions against crowd investment decisions on peer-to-peer loan data:
//!
//! * [`dataset`] — loan/listing ingestion, demographic proxy groups, splits,
//!   and the conditioning cells used by the contraction comparison.
//! * [`gbdt`] — a regularized gradient-boosted regression-tree classifier.
//! * [`hyperopt`] — cross-validated Bayesian hyperparameter search.
//! * [`metrics`] — ROC/AUC and calibration diagnostics.
//! * [`finance`] — amortization schedules, cashflows, NPV/IRR, risk premium.
//! * [`portfolio`] — budget-ranked portfolio comparison and the contraction
//!   method with crowd quintiles and the randomization F-test.
//! * [`fairness`] — fairness auditing and distribution-matching feature
//!   debiasing.
//! * [`synth`] — seeded synthetic loan populations with known ground truth.
//!
//! All operations are deterministic given their inputs and seeds.

pub mod dataset;
pub mod fairness;
pub mod finance;
pub mod gbdt;
pub mod hyperopt;
pub mod matrix;
pub mod metrics;
pub mod portfolio;
pub mod stats;
pub mod synth;

pub use matrix::Matrix;
