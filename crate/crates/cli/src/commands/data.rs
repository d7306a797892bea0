//! `synth` and `ingest`.

use super::{usage, CommandError};
use crate::context::{parse_cutoffs, RunContext};
use crate::output::{f, CsvWriter};
use anyhow::Context;
use clap::Args;
use crowdlend_core::dataset::{self, Group, GroupSource};
use crowdlend_core::finance::RateTable;
use crowdlend_core::synth::{generate, GeneratorConfig};
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of listings to generate [default: 5000].
    #[arg(long)]
    n: Option<usize>,
    /// Calendar months spanned by listing creation dates [default: 19].
    #[arg(long)]
    months: Option<u32>,
    /// Crowd risk-perception noise scale [default: 0.95].
    #[arg(long)]
    noise: Option<f64>,
    /// One-sided crowd errors (risk underestimates persist) [default: true].
    #[arg(long)]
    one_sided: Option<bool>,
    /// Feature shift applied to sensitive-attribute group 1 [default: 0].
    #[arg(long)]
    bias_strength: Option<f64>,
}

pub fn synth(ctx: &RunContext, args: SynthArgs) -> Result<(), CommandError> {
    let n = ctx.resolve(args.n, "n", 5000)?;
    let months = ctx.resolve(args.months, "months", 19)?;
    let noise = ctx.resolve(args.noise, "noise", 0.95)?;
    let one_sided = ctx.resolve(args.one_sided, "one-sided", true)?;
    let bias_strength = ctx.resolve(args.bias_strength, "bias-strength", 0.0)?;

    let config = GeneratorConfig {
        n_listings: n,
        seed: ctx.seed,
        months_span: months,
        crowd_noise: noise,
        one_sided_crowd_error: one_sided,
        sensitive_shift: bias_strength,
        ..GeneratorConfig::default()
    };
    let out = generate(&config);

    dataset::write_loans_csv(&ctx.out_path("loans.csv"), &out.loans, &out.schema)
        .context("writing loans.csv")?;
    dataset::write_listings_csv(&ctx.out_path("listings.csv"), &out.listings, &out.schema)
        .context("writing listings.csv")?;
    std::fs::write(ctx.out_path("schema.txt"), out.schema.to_text())
        .context("writing schema.txt")?;

    let mut rates = CsvWriter::new(&["date", "rate"]);
    if let RateTable::Dated(entries) = &out.rate_table {
        for (date, rate) in entries {
            rates.row(&[date.format("%Y-%m-%d").to_string(), f(*rate)]);
        }
    }
    rates.finish(&ctx.out_path("rates.csv"))?;

    let mut mapping = CsvWriter::new(&["label", "concentration"]);
    for (label, concentration) in &out.group_mapping {
        mapping.row(&[label.clone(), f(*concentration)]);
    }
    mapping.finish(&ctx.out_path("group_map.csv"))?;

    // Ground truth sidecar; never read by training code.
    let mut truth = CsvWriter::new(&["listing_id", "p_star", "sensitive", "premium"]);
    for listing in &out.listings {
        let id = listing.listing_id;
        truth.row(&[
            id.to_string(),
            f(out.truth.p_star[&id]),
            out.truth.sensitive[&id].to_string(),
            f(out.truth.premium[&id]),
        ]);
    }
    truth.finish(&ctx.out_path("truth.csv"))?;

    let resolved = format!(
        "synth n={n} months={months} noise={noise} one_sided={one_sided} bias={bias_strength} seed={}",
        ctx.seed
    );
    ctx.write_manifest("synth", &resolved)?;
    println!(
        "synth: {} listings, {} funded loans -> {}",
        out.listings.len(),
        out.loans.len(),
        ctx.out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Loan CSV to validate.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Feature schema file.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Optional label -> concentration mapping for group assignment.
    #[arg(long)]
    group_map: Option<PathBuf>,
    /// Concentration cutoffs as `high,low` [default: 0.75,0.25].
    #[arg(long)]
    cutoffs: Option<String>,
    /// Listing label the mapping applies to [default: occupation].
    #[arg(long)]
    group_source: Option<String>,
}

pub fn ingest(ctx: &RunContext, args: IngestArgs) -> Result<(), CommandError> {
    let input = super::require(ctx.resolve_opt(args.input, "input")?, "input")?;
    let schema = super::require(ctx.resolve_opt(args.schema, "schema")?, "schema")?;
    let set = super::load_loan_set(&input, &schema)?;

    let loaded = dataset::load_loans(&input, &set.schema).map_err(anyhow::Error::from)?;
    let mut rejected = CsvWriter::new(&["row", "reason"]);
    for r in &loaded.rejected {
        rejected.row(&[r.row.to_string(), r.reason.clone()]);
    }
    rejected.finish(&ctx.out_path("rejected.csv"))?;

    let n = set.loans.len();
    let defaults = set.loans.iter().filter(|l| l.default_label == 1).count();
    let summary = serde_json::json!({
        "loans": n,
        "rejected": loaded.rejected.len(),
        "default_rate": if n > 0 { defaults as f64 / n as f64 } else { 0.0 },
        "features": set.schema.len(),
    });

    let group_map = ctx.resolve_opt(args.group_map, "group-map")?;
    if let Some(map_path) = group_map {
        let mapping =
            dataset::load_group_mapping(&map_path).map_err(anyhow::Error::from)?;
        let cutoffs_raw = ctx.resolve(args.cutoffs, "cutoffs", "0.75,0.25".to_string())?;
        let (high, low) = parse_cutoffs(&cutoffs_raw).map_err(|e| usage(e.to_string()))?;
        let source = match ctx.resolve(args.group_source, "group-source", "occupation".into())?.as_str()
        {
            "occupation" => GroupSource::Occupation,
            "location" => GroupSource::Location,
            other => return Err(usage(format!("unknown group source {other:?}"))),
        };
        let assignment = dataset::assign_groups(&set.loans, &mapping, source, high, low)
            .map_err(anyhow::Error::from)?;
        let mut out = CsvWriter::new(&["loan_id", "group"]);
        for (id, group) in assignment.iter() {
            let label = match group {
                Group::Group0 => "group0",
                Group::Group1 => "group1",
                Group::Unassigned => "unassigned",
            };
            out.row(&[id.to_string(), label.to_string()]);
        }
        out.finish(&ctx.out_path("groups.csv"))?;
    }

    std::fs::write(
        ctx.out_path("ingest_summary.json"),
        serde_json::to_string_pretty(&summary).context("summary json")?,
    )
    .context("writing ingest_summary.json")?;
    ctx.write_manifest("ingest", &format!("ingest input={}", input.display()))?;
    println!("ingest: {n} loans ok, {} rejected", loaded.rejected.len());
    Ok(())
}
