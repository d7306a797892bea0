//! Subcommand definitions, shared pipeline plumbing, and dispatch.

mod data;
mod fair;
mod invest;
mod model;

use crate::context::RunContext;
use anyhow::{Context, Result};
use clap::Subcommand;
use crowdlend_core::dataset::{self, FeatureSchema, LoanRecord};
use crowdlend_core::finance::{risk_premium, RateTable};
use crowdlend_core::gbdt::BoostedModel;
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug)]
pub enum CommandError {
    /// Bad flags or config; exits with status 2.
    Usage(String),
    /// Failure while running; exits with status 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CommandError {
    fn from(err: anyhow::Error) -> Self {
        CommandError::Runtime(err)
    }
}

pub fn usage(message: impl Into<String>) -> CommandError {
    CommandError::Usage(message.into())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic loan population with known ground truth.
    Synth(data::SynthArgs),
    /// Validate a loan CSV against a schema and summarize it.
    Ingest(data::IngestArgs),
    /// Train a boosted-tree default model and write it as text.
    Train(model::TrainArgs),
    /// Bayesian-optimize hyperparameters under k-fold cross-validation.
    Tune(model::TuneArgs),
    /// ROC/AUC and calibration for machine and crowd scores.
    Evaluate(model::EvaluateArgs),
    /// Budget-ranked return-investment curves (machine vs crowd vs ScoreX).
    Compare(invest::CompareArgs),
    /// Contraction comparison: cells, crowd quintiles, F-tests, curve.
    Contract(invest::ContractArgs),
    /// Borrower-profile curves along the machine and crowd orderings.
    Profile(invest::ProfileArgs),
    /// Fairness audit of model predictions across proxy groups.
    Audit(fair::AuditArgs),
    /// Remove sensitive-attribute dependence from the feature matrix.
    Debias(fair::DebiasArgs),
}

pub fn run(ctx: &RunContext, command: Command) -> Result<(), CommandError> {
    ctx.ensure_out_dir()?;
    match command {
        Command::Synth(args) => data::synth(ctx, args),
        Command::Ingest(args) => data::ingest(ctx, args),
        Command::Train(args) => model::train(ctx, args),
        Command::Tune(args) => model::tune(ctx, args),
        Command::Evaluate(args) => model::evaluate(ctx, args),
        Command::Compare(args) => invest::compare(ctx, args),
        Command::Contract(args) => invest::contract(ctx, args),
        Command::Profile(args) => invest::profile(ctx, args),
        Command::Audit(args) => fair::audit(ctx, args),
        Command::Debias(args) => fair::debias(ctx, args),
    }
}

// ---------------------------------------------------------------------------
// Shared pipeline plumbing
// ---------------------------------------------------------------------------

pub(crate) struct LoanSet {
    pub loans: Vec<LoanRecord>,
    pub schema: FeatureSchema,
}

pub(crate) fn require<T>(value: Option<T>, flag: &str) -> Result<T, CommandError> {
    value.ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

pub(crate) fn load_loan_set(input: &Path, schema_path: &Path) -> Result<LoanSet> {
    let schema = FeatureSchema::load(schema_path)
        .with_context(|| format!("cannot load schema {}", schema_path.display()))?;
    let loaded = dataset::load_loans(input, &schema)
        .with_context(|| format!("cannot load loans {}", input.display()))?;
    for rejected in &loaded.rejected {
        log::warn!("row {} rejected: {}", rejected.row, rejected.reason);
    }
    if !loaded.rejected.is_empty() {
        log::warn!("{} rows rejected at ingest", loaded.rejected.len());
    }
    Ok(LoanSet { loans: loaded.loans, schema: loaded.schema })
}

pub(crate) fn load_model(path: &Path) -> Result<BoostedModel> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read model {}", path.display()))?;
    BoostedModel::from_text(&text).with_context(|| format!("cannot parse model {}", path.display()))
}

/// Rate table from `--rates <csv>` (date,rate rows) or `--fixed-rf <rate>`.
pub(crate) fn rate_table(
    rates: Option<&Path>,
    fixed_rf: Option<f64>,
) -> Result<RateTable, CommandError> {
    match (rates, fixed_rf) {
        (Some(_), Some(_)) => Err(usage("--rates and --fixed-rf are mutually exclusive")),
        (None, Some(rate)) => Ok(RateTable::fixed(rate).map_err(anyhow::Error::from)?),
        (Some(path), None) => {
            let file = std::fs::File::open(path)
                .with_context(|| format!("cannot read rates {}", path.display()))
                .map_err(CommandError::Runtime)?;
            let mut reader = csv::Reader::from_reader(file);
            let mut entries = Vec::new();
            for record in reader.records() {
                let record = record.context("bad rates csv")?;
                let date = chrono::NaiveDate::parse_from_str(
                    record.get(0).unwrap_or("").trim(),
                    "%Y-%m-%d",
                )
                .context("bad date in rates csv")?;
                let rate: f64 =
                    record.get(1).unwrap_or("").trim().parse().context("bad rate in rates csv")?;
                entries.push((date, rate));
            }
            Ok(RateTable::dated(entries).map_err(anyhow::Error::from)?)
        }
        (None, None) => Err(usage("need --rates <csv> or --fixed-rf <rate>")),
    }
}

pub(crate) fn premiums(loans: &[LoanRecord], rates: &RateTable) -> Result<Vec<f64>> {
    loans
        .iter()
        .map(|l| {
            risk_premium(l.final_rate, l.origination_date, rates)
                .with_context(|| format!("loan {}", l.id()))
        })
        .collect()
}

pub(crate) fn predictions(model: &BoostedModel, set: &LoanSet) -> Result<Vec<f64>> {
    let features = dataset::feature_matrix(&set.loans, &set.schema);
    Ok(model.predict_many(&features)?)
}

/// Split file: loan_id,role rows written by `train`.
pub(crate) fn write_split(
    path: &Path,
    loans: &[LoanRecord],
    train_idx: &[usize],
) -> Result<()> {
    let train: BTreeSet<usize> = train_idx.iter().copied().collect();
    let mut out = crate::output::CsvWriter::new(&["loan_id", "role"]);
    for (i, loan) in loans.iter().enumerate() {
        let role = if train.contains(&i) { "train" } else { "test" };
        out.row(&[loan.id().to_string(), role.to_string()]);
    }
    out.finish(path)
}

/// Keep the loans whose split role matches (loans absent from the file are
/// kept only when no file is given).
pub(crate) fn filter_split(
    set: LoanSet,
    split: Option<&Path>,
    role: &str,
) -> Result<LoanSet> {
    let Some(path) = split else { return Ok(set) };
    let file = std::fs::File::open(path)
        .with_context(|| format!("cannot read split {}", path.display()))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut wanted: BTreeSet<u64> = BTreeSet::new();
    for record in reader.records() {
        let record = record.context("bad split csv")?;
        if record.get(1).unwrap_or("").trim() == role {
            wanted.insert(
                record.get(0).unwrap_or("").trim().parse().context("bad loan id in split csv")?,
            );
        }
    }
    let loans = set.loans.into_iter().filter(|l| wanted.contains(&l.id())).collect();
    Ok(LoanSet { loans, schema: set.schema })
}
