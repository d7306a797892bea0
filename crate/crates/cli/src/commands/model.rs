//! `train`, `tune`, and `evaluate`.

use super::{usage, CommandError, LoanSet};
use crate::context::RunContext;
use crate::output::{f, opt_f, CsvWriter};
use anyhow::{Context, Result};
use clap::Args;
use crowdlend_core::dataset::{self, LoanRecord};
use crowdlend_core::gbdt::{self, TrainConfig};
use crowdlend_core::hyperopt::{self, ParamSpace, ParamSpec};
use crowdlend_core::metrics::{calibration_table, quantile_bin, roc_auc, RocCurve, ScoredSet};
use std::path::PathBuf;

/// Boosting hyperparameters shared by the model-fitting commands.
#[derive(Debug, Args, Clone)]
pub struct ModelParams {
    /// Number of boosting rounds [default: 100].
    #[arg(long)]
    trees: Option<usize>,
    /// Maximum tree depth [default: 4].
    #[arg(long)]
    max_depth: Option<usize>,
    /// Shrinkage per round [default: 0.1].
    #[arg(long)]
    learning_rate: Option<f64>,
    /// L2 penalty on leaf weights [default: 1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Per-leaf penalty [default: 0].
    #[arg(long)]
    gamma: Option<f64>,
    /// Row subsample fraction per tree [default: 0.9].
    #[arg(long)]
    row_subsample: Option<f64>,
    /// Column subsample fraction per tree [default: 1].
    #[arg(long)]
    col_subsample: Option<f64>,
}

impl ModelParams {
    pub fn resolve(&self, ctx: &RunContext) -> Result<TrainConfig> {
        Ok(TrainConfig {
            n_trees: ctx.resolve(self.trees, "trees", 100)?,
            max_depth: ctx.resolve(self.max_depth, "max-depth", 4)?,
            learning_rate: ctx.resolve(self.learning_rate, "learning-rate", 0.1)?,
            lambda: ctx.resolve(self.lambda, "lambda", 1.0)?,
            gamma: ctx.resolve(self.gamma, "gamma", 0.0)?,
            row_subsample: ctx.resolve(self.row_subsample, "row-subsample", 0.9)?,
            col_subsample: ctx.resolve(self.col_subsample, "col-subsample", 1.0)?,
            seed: ctx.seed,
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Loan CSV with outcomes.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Feature schema file.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Fraction of loans used for training [default: 0.6].
    #[arg(long)]
    train_fraction: Option<f64>,
    #[command(flatten)]
    params: ModelParams,
}

pub fn train(ctx: &RunContext, args: TrainArgs) -> Result<(), CommandError> {
    let input = super::require(ctx.resolve_opt(args.input, "input")?, "input")?;
    let schema = super::require(ctx.resolve_opt(args.schema, "schema")?, "schema")?;
    let fraction = ctx.resolve(args.train_fraction, "train-fraction", 0.6)?;
    let config = args.params.resolve(ctx)?;

    let set = super::load_loan_set(&input, &schema)?;
    let (train_idx, test_idx) =
        dataset::split_train_test(set.loans.len(), fraction, ctx.seed)
            .map_err(anyhow::Error::from)?;
    let features = dataset::feature_matrix(&set.loans, &set.schema);
    let labels = dataset::default_labels(&set.loans);

    let train_labels: Vec<f64> = train_idx.iter().map(|&i| labels[i]).collect();
    let model = gbdt::train(&features.select_rows(&train_idx), &train_labels, &config)
        .map_err(anyhow::Error::from)?;

    std::fs::write(ctx.out_path("model.txt"), model.to_text()).context("writing model.txt")?;
    super::write_split(&ctx.out_path("split.csv"), &set.loans, &train_idx)?;

    let auc_on = |idx: &[usize]| -> Result<f64> {
        let preds = model.predict_many(&features.select_rows(idx))?;
        let ys: Vec<u8> = idx.iter().map(|&i| labels[i] as u8).collect();
        Ok(roc_auc(&ScoredSet::new(preds, ys)?)?.auc)
    };
    let train_auc = auc_on(&train_idx)?;
    let test_auc = auc_on(&test_idx)?;
    let metrics = serde_json::json!({
        "n_train": train_idx.len(),
        "n_test": test_idx.len(),
        "train_auc": train_auc,
        "test_auc": test_auc,
    });
    std::fs::write(
        ctx.out_path("train_metrics.json"),
        serde_json::to_string_pretty(&metrics).context("metrics json")?,
    )
    .context("writing train_metrics.json")?;

    ctx.write_manifest("train", &format!("train {config:?} fraction={fraction} seed={}", ctx.seed))?;
    println!("train: {} loans, train AUC {train_auc:.4}, test AUC {test_auc:.4}", set.loans.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Total objective evaluations [default: 50].
    #[arg(long)]
    budget: Option<usize>,
    /// Cross-validation folds [default: 5].
    #[arg(long)]
    folds: Option<usize>,
}

pub fn tune(ctx: &RunContext, args: TuneArgs) -> Result<(), CommandError> {
    let input = super::require(ctx.resolve_opt(args.input, "input")?, "input")?;
    let schema = super::require(ctx.resolve_opt(args.schema, "schema")?, "schema")?;
    let budget = ctx.resolve(args.budget, "budget", 50)?;
    let folds = ctx.resolve(args.folds, "folds", 5)?;

    let set = super::load_loan_set(&input, &schema)?;
    let features = dataset::feature_matrix(&set.loans, &set.schema);
    let labels = dataset::default_labels(&set.loans);

    let space = ParamSpace::new(vec![
        ParamSpec::integer("trees", 20.0, 300.0),
        ParamSpec::integer("max_depth", 2.0, 8.0),
        ParamSpec::log("learning_rate", 0.02, 0.5),
        ParamSpec::log("lambda", 0.1, 10.0),
        ParamSpec::linear("gamma", 0.0, 2.0),
        ParamSpec::linear("row_subsample", 0.5, 1.0),
        ParamSpec::linear("col_subsample", 0.5, 1.0),
    ])
    .map_err(anyhow::Error::from)?;

    let seed = ctx.seed;
    let objective = |p: &[f64]| -> f64 {
        let config = TrainConfig {
            n_trees: p[0] as usize,
            max_depth: p[1] as usize,
            learning_rate: p[2],
            lambda: p[3],
            gamma: p[4],
            row_subsample: p[5],
            col_subsample: p[6],
            seed,
        };
        match hyperopt::kfold_cv_auc(&features, &labels, &config, folds, seed) {
            Ok(auc) => auc,
            Err(err) => {
                log::warn!("objective failed: {err}");
                f64::NAN
            }
        }
    };
    let result =
        hyperopt::bayes_opt(&space, objective, budget, ctx.seed).map_err(anyhow::Error::from)?;

    let mut trace = CsvWriter::new(&[
        "iteration",
        "trees",
        "max_depth",
        "learning_rate",
        "lambda",
        "gamma",
        "row_subsample",
        "col_subsample",
        "score",
    ]);
    for row in &result.trace {
        let mut fields = vec![row.iteration.to_string()];
        fields.extend(row.params.iter().map(|v| f(*v)));
        fields.push(f(row.score));
        trace.row(&fields);
    }
    trace.finish(&ctx.out_path("tune_trace.csv"))?;

    let best = TrainConfig {
        n_trees: result.best_params[0] as usize,
        max_depth: result.best_params[1] as usize,
        learning_rate: result.best_params[2],
        lambda: result.best_params[3],
        gamma: result.best_params[4],
        row_subsample: result.best_params[5],
        col_subsample: result.best_params[6],
        seed: ctx.seed,
    };
    std::fs::write(
        ctx.out_path("best_config.json"),
        serde_json::to_string_pretty(&best).context("config json")?,
    )
    .context("writing best_config.json")?;

    ctx.write_manifest("tune", &format!("tune budget={budget} folds={folds} seed={}", ctx.seed))?;
    println!("tune: best CV AUC {:.4} at {:?}", result.best_score, result.best_params);
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Trained model file (required unless --rolling or --periods retrain).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Split file from `train`; evaluation restricts to its test rows.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Dated risk-free rate CSV for the crowd premium baseline.
    #[arg(long)]
    rates: Option<PathBuf>,
    /// Fixed annualized risk-free rate instead of --rates.
    #[arg(long)]
    fixed_rf: Option<f64>,
    /// Calibration quantile bins [default: 100].
    #[arg(long)]
    n_bins: Option<usize>,
    /// Rolling-window mode: train per target on loans from the prior window.
    #[arg(long)]
    rolling: Option<u32>,
    /// Time-period mode: split the span into n equal periods, train each.
    #[arg(long)]
    periods: Option<usize>,
    #[command(flatten)]
    params: ModelParams,
}

fn roc_csv(out: &mut CsvWriter, source: &str, curve: &RocCurve) {
    for (fpr, tpr) in &curve.points {
        out.row(&[source.to_string(), f(*fpr), f(*tpr)]);
    }
}

pub fn evaluate(ctx: &RunContext, mut args: EvaluateArgs) -> Result<(), CommandError> {
    let input = super::require(ctx.resolve_opt(args.input.take(), "input")?, "input")?;
    let schema = super::require(ctx.resolve_opt(args.schema.take(), "schema")?, "schema")?;
    let rolling = ctx.resolve_opt(args.rolling, "rolling")?;
    let periods = ctx.resolve_opt(args.periods, "periods")?;
    if rolling.is_some() && periods.is_some() {
        return Err(usage("--rolling and --periods are mutually exclusive"));
    }
    let set = super::load_loan_set(&input, &schema)?;
    let rates = super::rate_table(
        ctx.resolve_opt(args.rates.take(), "rates")?.as_deref(),
        ctx.resolve_opt(args.fixed_rf, "fixed-rf")?,
    )?;

    if let Some(window) = rolling {
        return evaluate_rolling(ctx, set, window, &args, &rates);
    }
    if let Some(n) = periods {
        return evaluate_periods(ctx, set, n, &args, &rates);
    }

    let model_path = super::require(ctx.resolve_opt(args.model.take(), "model")?, "model")?;
    let split = ctx.resolve_opt(args.split.take(), "split")?;
    let set = super::filter_split(set, split.as_deref(), "test")?;
    if set.loans.is_empty() {
        return Err(CommandError::Runtime(anyhow::anyhow!("no loans to evaluate")));
    }
    let n_bins = ctx.resolve(args.n_bins, "n-bins", 100)?;
    let model = super::load_model(&model_path)?;
    let preds = super::predictions(&model, &set)?;
    let premiums = super::premiums(&set.loans, &rates)?;
    let labels: Vec<u8> = set.loans.iter().map(|l| l.default_label).collect();

    let machine = roc_auc(&ScoredSet::new(preds.clone(), labels.clone()).map_err(anyhow::Error::from)?)
        .map_err(anyhow::Error::from)?;
    let crowd = roc_auc(&ScoredSet::new(premiums.clone(), labels.clone()).map_err(anyhow::Error::from)?)
        .map_err(anyhow::Error::from)?;

    let mut roc = CsvWriter::new(&["source", "fpr", "tpr"]);
    roc_csv(&mut roc, "machine", &machine);
    roc_csv(&mut roc, "crowd", &crowd);
    roc.finish(&ctx.out_path("roc.csv"))?;

    // Calibration: actual default rate and mean premium per predicted-risk
    // quantile bin.
    let bins = quantile_bin(&preds, n_bins.min(set.loans.len())).map_err(anyhow::Error::from)?;
    let scored = ScoredSet::new(preds, labels).map_err(anyhow::Error::from)?;
    let mut calibration =
        CsvWriter::new(&["bin", "count", "mean_predicted", "default_rate", "mean_premium"]);
    for row in calibration_table(&scored, &bins, Some(&premiums)) {
        calibration.row(&[
            row.bin.to_string(),
            row.count.to_string(),
            f(row.mean_score),
            f(row.default_rate),
            opt_f(row.mean_companion),
        ]);
    }
    calibration.finish(&ctx.out_path("calibration.csv"))?;

    let metrics = serde_json::json!({
        "n": set.loans.len(),
        "machine_auc": machine.auc,
        "crowd_auc": crowd.auc,
    });
    std::fs::write(
        ctx.out_path("evaluate_metrics.json"),
        serde_json::to_string_pretty(&metrics).context("metrics json")?,
    )
    .context("writing evaluate_metrics.json")?;

    ctx.write_manifest("evaluate", &format!("evaluate bins={n_bins} seed={}", ctx.seed))?;
    println!(
        "evaluate: {} loans, machine AUC {:.4}, crowd AUC {:.4}",
        set.loans.len(),
        machine.auc,
        crowd.auc
    );
    Ok(())
}

/// Rolling-window evaluation: each loan is scored by a model trained only on
/// loans originated within the window before it. Loans sharing an
/// origination date share one model.
fn evaluate_rolling(
    ctx: &RunContext,
    set: LoanSet,
    window_days: u32,
    args: &EvaluateArgs,
    rates: &crowdlend_core::finance::RateTable,
) -> Result<(), CommandError> {
    let config = args.params.resolve(ctx)?;
    let features = dataset::feature_matrix(&set.loans, &set.schema);
    let labels = dataset::default_labels(&set.loans);
    let windows = dataset::rolling_window_split(&set.loans, window_days);

    // One model per distinct origination date.
    let mut by_date: std::collections::BTreeMap<chrono::NaiveDate, Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, loan) in set.loans.iter().enumerate() {
        by_date.entry(loan.origination_date).or_default().push(i);
    }

    let mut scored: Vec<(usize, f64)> = Vec::new();
    let mut skipped = 0usize;
    for (_, targets) in by_date {
        let train_idx = &windows[targets[0]];
        let train_labels: Vec<f64> = train_idx.iter().map(|&i| labels[i]).collect();
        let has_both = train_labels.iter().any(|&y| y == 1.0)
            && train_labels.iter().any(|&y| y == 0.0);
        if train_idx.is_empty() || !has_both {
            skipped += targets.len();
            continue;
        }
        let model = gbdt::train(&features.select_rows(train_idx), &train_labels, &config)
            .map_err(anyhow::Error::from)?;
        for &t in &targets {
            let p = model.predict_proba(features.row(t)).map_err(anyhow::Error::from)?;
            scored.push((t, p));
        }
    }
    if scored.is_empty() {
        return Err(CommandError::Runtime(anyhow::anyhow!(
            "no loans had a usable training window"
        )));
    }

    let mut out = CsvWriter::new(&["loan_id", "origination_date", "prediction", "label"]);
    for &(i, p) in &scored {
        let loan = &set.loans[i];
        out.row(&[
            loan.id().to_string(),
            loan.origination_date.format("%Y-%m-%d").to_string(),
            f(p),
            loan.default_label.to_string(),
        ]);
    }
    out.finish(&ctx.out_path("rolling_predictions.csv"))?;

    let preds: Vec<f64> = scored.iter().map(|&(_, p)| p).collect();
    let ys: Vec<u8> = scored.iter().map(|&(i, _)| set.loans[i].default_label).collect();
    let machine_auc =
        roc_auc(&ScoredSet::new(preds, ys.clone()).map_err(anyhow::Error::from)?)
            .map_err(anyhow::Error::from)?
            .auc;
    let premium_scores: Vec<f64> = {
        let subset: Vec<LoanRecord> = scored.iter().map(|&(i, _)| set.loans[i].clone()).collect();
        super::premiums(&subset, rates)?
    };
    let crowd_auc = roc_auc(&ScoredSet::new(premium_scores, ys).map_err(anyhow::Error::from)?)
        .map_err(anyhow::Error::from)?
        .auc;

    let metrics = serde_json::json!({
        "window_days": window_days,
        "n_scored": scored.len(),
        "n_skipped": skipped,
        "machine_auc": machine_auc,
        "crowd_auc": crowd_auc,
    });
    std::fs::write(
        ctx.out_path("evaluate_metrics.json"),
        serde_json::to_string_pretty(&metrics).context("metrics json")?,
    )
    .context("writing evaluate_metrics.json")?;
    ctx.write_manifest(
        "evaluate",
        &format!("evaluate rolling={window_days} {config:?} seed={}", ctx.seed),
    )?;
    println!(
        "evaluate --rolling {window_days}: scored {} loans ({skipped} skipped), machine AUC {machine_auc:.4}, crowd AUC {crowd_auc:.4}",
        scored.len()
    );
    Ok(())
}

/// Time-period evaluation: equal calendar periods, a fresh train/test split
/// and model per period.
fn evaluate_periods(
    ctx: &RunContext,
    set: LoanSet,
    n_periods: usize,
    args: &EvaluateArgs,
    rates: &crowdlend_core::finance::RateTable,
) -> Result<(), CommandError> {
    let config = args.params.resolve(ctx)?;
    let fraction = 0.6;
    let periods = dataset::time_period_split(&set.loans, n_periods).map_err(anyhow::Error::from)?;
    let bounds =
        dataset::time_period_boundaries(&set.loans, n_periods).map_err(anyhow::Error::from)?;
    let features = dataset::feature_matrix(&set.loans, &set.schema);
    let labels = dataset::default_labels(&set.loans);

    let mut out = CsvWriter::new(&[
        "period",
        "start",
        "end",
        "n_loans",
        "default_rate",
        "mean_rate",
        "machine_auc",
        "crowd_auc",
    ]);
    for (p, members) in periods.iter().enumerate() {
        let (start, end) = bounds[p];
        if members.len() < 10 {
            log::warn!("period {} has only {} loans; skipping", p + 1, members.len());
            continue;
        }
        let default_rate =
            members.iter().map(|&i| labels[i]).sum::<f64>() / members.len() as f64;
        let mean_rate =
            members.iter().map(|&i| set.loans[i].final_rate).sum::<f64>() / members.len() as f64;
        let (train_local, test_local) =
            dataset::split_train_test(members.len(), fraction, ctx.seed)
                .map_err(anyhow::Error::from)?;
        let train_idx: Vec<usize> = train_local.iter().map(|&i| members[i]).collect();
        let test_idx: Vec<usize> = test_local.iter().map(|&i| members[i]).collect();
        let train_labels: Vec<f64> = train_idx.iter().map(|&i| labels[i]).collect();
        let test_labels: Vec<u8> = test_idx.iter().map(|&i| labels[i] as u8).collect();
        let single_class =
            test_labels.iter().all(|&y| y == 0) || test_labels.iter().all(|&y| y == 1);
        if single_class
            || train_labels.iter().all(|&y| y == 0.0)
            || train_labels.iter().all(|&y| y == 1.0)
        {
            log::warn!("period {} is single-class; skipping", p + 1);
            continue;
        }
        let model = gbdt::train(&features.select_rows(&train_idx), &train_labels, &config)
            .map_err(anyhow::Error::from)?;
        let preds = model
            .predict_many(&features.select_rows(&test_idx))
            .map_err(anyhow::Error::from)?;
        let machine_auc =
            roc_auc(&ScoredSet::new(preds, test_labels.clone()).map_err(anyhow::Error::from)?)
                .map_err(anyhow::Error::from)?
                .auc;
        let subset: Vec<LoanRecord> = test_idx.iter().map(|&i| set.loans[i].clone()).collect();
        let prem = super::premiums(&subset, rates)?;
        let crowd_auc =
            roc_auc(&ScoredSet::new(prem, test_labels).map_err(anyhow::Error::from)?)
                .map_err(anyhow::Error::from)?
                .auc;
        out.row(&[
            (p + 1).to_string(),
            start.format("%Y-%m-%d").to_string(),
            end.format("%Y-%m-%d").to_string(),
            members.len().to_string(),
            f(default_rate),
            f(mean_rate),
            f(machine_auc),
            f(crowd_auc),
        ]);
    }
    out.finish(&ctx.out_path("periods.csv"))?;
    ctx.write_manifest(
        "evaluate",
        &format!("evaluate periods={n_periods} {config:?} seed={}", ctx.seed),
    )?;
    println!("evaluate --periods {n_periods}: wrote periods.csv");
    Ok(())
}
