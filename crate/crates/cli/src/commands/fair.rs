//! `audit` and `debias`.

use super::{usage, CommandError};
use crate::context::{parse_cutoffs, RunContext};
use crate::output::{f, CsvWriter};
use anyhow::Context;
use clap::Args;
use crowdlend_core::dataset::{self, Group, GroupSource};
use crowdlend_core::fairness::{self, MetricComparison};
use std::path::PathBuf;

fn group_source(ctx: &RunContext, flag: Option<String>) -> Result<GroupSource, CommandError> {
    match ctx.resolve(flag, "group-source", "occupation".to_string())?.as_str() {
        "occupation" => Ok(GroupSource::Occupation),
        "location" => Ok(GroupSource::Location),
        other => Err(usage(format!("unknown group source {other:?}"))),
    }
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Split file from `train`; the audit restricts to its test rows.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Label -> concentration mapping file.
    #[arg(long)]
    group_map: Option<PathBuf>,
    /// Concentration cutoffs as `high,low` [default: 0.75,0.25].
    #[arg(long)]
    cutoffs: Option<String>,
    /// Listing label the mapping applies to [default: occupation].
    #[arg(long)]
    group_source: Option<String>,
}

fn report_row(out: &mut CsvWriter, metric: &str, comparison: &Option<MetricComparison>) {
    match comparison {
        Some(c) => out.row(&[
            metric.to_string(),
            f(c.group0),
            f(c.group1),
            f(c.difference),
            c.p_value.map(f).unwrap_or_default(),
        ]),
        None => out.row(&[metric.to_string(), String::new(), String::new(), String::new(), String::new()]),
    }
}

pub fn audit(ctx: &RunContext, args: AuditArgs) -> Result<(), CommandError> {
    let input = super::require(ctx.resolve_opt(args.input, "input")?, "input")?;
    let schema = super::require(ctx.resolve_opt(args.schema, "schema")?, "schema")?;
    let model_path = super::require(ctx.resolve_opt(args.model, "model")?, "model")?;
    let map_path = super::require(ctx.resolve_opt(args.group_map, "group-map")?, "group-map")?;
    let split = ctx.resolve_opt(args.split, "split")?;
    let cutoffs_raw = ctx.resolve(args.cutoffs, "cutoffs", "0.75,0.25".to_string())?;
    let (high, low) = parse_cutoffs(&cutoffs_raw).map_err(|e| usage(e.to_string()))?;
    let source = group_source(ctx, args.group_source)?;

    let set = super::load_loan_set(&input, &schema)?;
    let set = super::filter_split(set, split.as_deref(), "test")?;
    if set.loans.is_empty() {
        return Err(CommandError::Runtime(anyhow::anyhow!("no loans to audit")));
    }
    let mapping = dataset::load_group_mapping(&map_path).map_err(anyhow::Error::from)?;
    let assignment = dataset::assign_groups(&set.loans, &mapping, source, high, low)
        .map_err(anyhow::Error::from)?;
    let model = super::load_model(&model_path)?;

    // Favorable direction: predicted payback score and payback labels.
    let default_preds = super::predictions(&model, &set)?;
    let scores: Vec<f64> = default_preds.iter().map(|p| 1.0 - p).collect();
    let labels: Vec<u8> = set.loans.iter().map(|l| 1 - l.default_label).collect();
    let groups: Vec<Group> =
        set.loans.iter().map(|l| assignment.group_of(l.id())).collect();

    // Fund as many loans as are expected to pay back, among assigned rows.
    let assigned: Vec<usize> =
        (0..set.loans.len()).filter(|&i| groups[i] != Group::Unassigned).collect();
    let assigned_scores: Vec<f64> = assigned.iter().map(|&i| scores[i]).collect();
    let expected_paybacks = assigned.iter().filter(|&&i| labels[i] == 1).count();
    let threshold = fairness::funding_threshold(&assigned_scores, expected_paybacks)
        .map_err(anyhow::Error::from)?;

    let report = fairness::fairness_report(&scores, &labels, &groups, threshold)
        .map_err(anyhow::Error::from)?;

    let mut out = CsvWriter::new(&["metric", "group0", "group1", "difference", "p_value"]);
    out.row(&[
        "n_observations".to_string(),
        report.n_group0.to_string(),
        report.n_group1.to_string(),
        (report.n_group0 + report.n_group1).to_string(),
        String::new(),
    ]);
    out.row(&[
        "auc".to_string(),
        report.auc.map(f).unwrap_or_default(),
        String::new(),
        String::new(),
        String::new(),
    ]);
    report_row(&mut out, "prob_funded", &report.funding_rate);
    report_row(&mut out, "true_positive_rate", &report.true_positive_rate);
    report_row(&mut out, "false_positive_rate", &report.false_positive_rate);
    report_row(&mut out, "mean_score_positive_class", &report.positive_class_score);
    report_row(&mut out, "mean_score_negative_class", &report.negative_class_score);
    out.finish(&ctx.out_path("fairness_report.csv"))?;

    ctx.write_manifest(
        "audit",
        &format!("audit cutoffs={cutoffs_raw} source={source:?} seed={}", ctx.seed),
    )?;
    println!(
        "audit: {} + {} grouped loans, threshold {:.4}",
        report.n_group0, report.n_group1, threshold
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct DebiasArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    group_map: Option<PathBuf>,
    #[arg(long)]
    cutoffs: Option<String>,
    #[arg(long)]
    group_source: Option<String>,
}

pub fn debias(ctx: &RunContext, args: DebiasArgs) -> Result<(), CommandError> {
    let input = super::require(ctx.resolve_opt(args.input, "input")?, "input")?;
    let schema = super::require(ctx.resolve_opt(args.schema, "schema")?, "schema")?;
    let map_path = super::require(ctx.resolve_opt(args.group_map, "group-map")?, "group-map")?;
    let cutoffs_raw = ctx.resolve(args.cutoffs, "cutoffs", "0.75,0.25".to_string())?;
    let (high, low) = parse_cutoffs(&cutoffs_raw).map_err(|e| usage(e.to_string()))?;
    let source = group_source(ctx, args.group_source)?;

    let set = super::load_loan_set(&input, &schema)?;
    let mapping = dataset::load_group_mapping(&map_path).map_err(anyhow::Error::from)?;
    let assignment = dataset::assign_groups(&set.loans, &mapping, source, high, low)
        .map_err(anyhow::Error::from)?;

    // Only rows with an assigned group enter the debias subset.
    let kept: Vec<usize> = (0..set.loans.len())
        .filter(|&i| assignment.group_of(set.loans[i].id()) != Group::Unassigned)
        .collect();
    if kept.is_empty() {
        return Err(CommandError::Runtime(anyhow::anyhow!("no loans with an assigned group")));
    }
    let groups01: Vec<u8> = kept
        .iter()
        .map(|&i| (assignment.group_of(set.loans[i].id()) == Group::Group1) as u8)
        .collect();
    let features = dataset::feature_matrix(&set.loans, &set.schema).select_rows(&kept);

    let (fit, out) = fairness::debias_matrix(&features, &set.schema, &groups01, ctx.seed)
        .map_err(anyhow::Error::from)?;

    let mut header: Vec<&str> = vec!["loan_id", "group", "default_label"];
    header.extend(out.column_names.iter().map(String::as_str));
    let mut csv = CsvWriter::new(&header);
    for (row, &i) in kept.iter().enumerate() {
        let loan = &set.loans[i];
        let mut fields = vec![
            loan.id().to_string(),
            groups01[row].to_string(),
            loan.default_label.to_string(),
        ];
        fields.extend(out.matrix.row(row).iter().map(|v| f(*v)));
        csv.row(&fields);
    }
    csv.finish(&ctx.out_path("debiased.csv"))?;

    std::fs::write(
        ctx.out_path("debias_fit.json"),
        serde_json::to_string(&fit).context("fit json")?,
    )
    .context("writing debias_fit.json")?;

    ctx.write_manifest(
        "debias",
        &format!("debias cutoffs={cutoffs_raw} source={source:?} seed={}", ctx.seed),
    )?;
    println!(
        "debias: {} grouped loans, {} output columns",
        kept.len(),
        out.column_names.len()
    );
    Ok(())
}
