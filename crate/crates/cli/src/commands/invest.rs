//! `compare`, `contract`, and `profile`.

use super::{usage, CommandError};
use crate::context::RunContext;
use crate::output::{f, opt_f, CsvWriter};
use clap::Args;
use crowdlend_core::dataset::{self, FeatureSchema, ListingRecord};
use crowdlend_core::portfolio::{self, CurvePoint, EvaluationSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Split file from `train`; comparison restricts to its test rows.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    rates: Option<PathBuf>,
    #[arg(long)]
    fixed_rf: Option<f64>,
    /// Annual discount rate for NPV [default: 0.028].
    #[arg(long)]
    discount: Option<f64>,
    /// Comma-separated investment amounts, or `auto` for 12 even points.
    #[arg(long)]
    budget_grid: Option<String>,
    /// Smallest portfolio size whose IRR is reported [default: 200].
    #[arg(long)]
    min_portfolio_irr: Option<usize>,
}

fn curve_rows(out: &mut CsvWriter, ordering: &str, curve: &[CurvePoint]) {
    for point in curve {
        out.row(&[
            ordering.to_string(),
            point.size.to_string(),
            f(point.investment),
            f(point.npv),
            opt_f(point.irr),
        ]);
    }
}

/// Portfolio at budget Q = the last curve point whose investment fits in Q.
fn point_at_budget(curve: &[CurvePoint], budget: f64) -> Option<&CurvePoint> {
    curve.iter().take_while(|p| p.investment <= budget).last()
}

pub fn compare(ctx: &RunContext, args: CompareArgs) -> Result<(), CommandError> {
    let input = super::require(ctx.resolve_opt(args.input, "input")?, "input")?;
    let schema = super::require(ctx.resolve_opt(args.schema, "schema")?, "schema")?;
    let model_path = super::require(ctx.resolve_opt(args.model, "model")?, "model")?;
    let split = ctx.resolve_opt(args.split, "split")?;
    let discount_annual = ctx.resolve(args.discount, "discount", 0.028)?;
    let discount = discount_annual / 12.0;
    let min_irr_size = ctx.resolve(args.min_portfolio_irr, "min-portfolio-irr", 200)?;

    let set = super::load_loan_set(&input, &schema)?;
    let set = super::filter_split(set, split.as_deref(), "test")?;
    if set.loans.is_empty() {
        return Err(CommandError::Runtime(anyhow::anyhow!("no loans to compare")));
    }
    let rates = super::rate_table(
        ctx.resolve_opt(args.rates, "rates")?.as_deref(),
        ctx.resolve_opt(args.fixed_rf, "fixed-rf")?,
    )?;
    let model = super::load_model(&model_path)?;

    let machine_scores = super::predictions(&model, &set)?;
    let premium_scores = super::premiums(&set.loans, &rates)?;
    // Best credit bin first; missing bins sort last.
    let scorex_scores: Vec<f64> = set
        .loans
        .iter()
        .map(|l| -(l.listing.scorex_bin.unwrap_or(0) as f64))
        .collect();
    let random_scores: Vec<f64> = {
        let mut order: Vec<usize> = (0..set.loans.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(ctx.seed);
        order.shuffle(&mut rng);
        let mut scores = vec![0.0; set.loans.len()];
        for (rank, &i) in order.iter().enumerate() {
            scores[i] = rank as f64;
        }
        scores
    };

    let orderings: [(&str, &[f64]); 4] = [
        ("machine", &machine_scores),
        ("premium", &premium_scores),
        ("scorex", &scorex_scores),
        ("random", &random_scores),
    ];
    let mut curves_csv = CsvWriter::new(&["ordering", "size", "investment", "npv", "irr"]);
    let mut curves: BTreeMap<&str, Vec<CurvePoint>> = BTreeMap::new();
    for (name, scores) in orderings {
        let curve = portfolio::return_curve(&set.loans, scores, discount, min_irr_size)
            .map_err(anyhow::Error::from)?;
        curve_rows(&mut curves_csv, name, &curve);
        curves.insert(name, curve);
    }
    curves_csv.finish(&ctx.out_path("compare_curves.csv"))?;

    let total: f64 = set.loans.iter().map(|l| l.listing.amount).sum();
    let grid_raw = ctx.resolve(args.budget_grid, "budget-grid", "auto".to_string())?;
    let grid: Vec<f64> = if grid_raw == "auto" {
        (1..=12).map(|i| total * i as f64 / 12.0).collect()
    } else {
        grid_raw
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| usage(format!("bad budget {s:?}"))))
            .collect::<Result<_, _>>()?
    };

    // Investment-amount table: machine and premium NPV/IRR per budget point.
    let mut table = CsvWriter::new(&[
        "investment",
        "machine_npv",
        "machine_irr",
        "premium_npv",
        "premium_irr",
    ]);
    for budget in &grid {
        let machine = point_at_budget(&curves["machine"], *budget);
        let premium = point_at_budget(&curves["premium"], *budget);
        table.row(&[
            f(*budget),
            machine.map(|p| f(p.npv)).unwrap_or_default(),
            machine.map(|p| opt_f(p.irr)).unwrap_or_default(),
            premium.map(|p| f(p.npv)).unwrap_or_default(),
            premium.map(|p| opt_f(p.irr)).unwrap_or_default(),
        ]);
    }
    table.finish(&ctx.out_path("compare_table.csv"))?;

    let market = curves["machine"].last().expect("nonempty curve");
    ctx.write_manifest(
        "compare",
        &format!("compare discount={discount_annual} grid={grid_raw} min_irr={min_irr_size} seed={}", ctx.seed),
    )?;
    println!(
        "compare: {} loans, market investment {:.2}, market NPV {:.2}",
        set.loans.len(),
        market.investment,
        market.npv
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ContractArgs {
    /// Funded loans CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// All listings CSV (funded and unfunded) for cells and the F-test.
    #[arg(long)]
    listings: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    rates: Option<PathBuf>,
    #[arg(long)]
    fixed_rf: Option<f64>,
    #[arg(long)]
    discount: Option<f64>,
    /// Score used for the default-probability bins: machine or premium.
    #[arg(long)]
    bins: Option<String>,
    /// Quantile bins for the default-probability estimate [default: 100].
    #[arg(long)]
    n_bins: Option<usize>,
    /// Minimum distinct crowds per kept cell [default: 5].
    #[arg(long)]
    min_crowds: Option<usize>,
    /// Assumed on-time payments before a default [default: 12].
    #[arg(long)]
    default_months: Option<u32>,
}

pub fn contract(ctx: &RunContext, args: ContractArgs) -> Result<(), CommandError> {
    let input = super::require(ctx.resolve_opt(args.input, "input")?, "input")?;
    let listings_path = super::require(ctx.resolve_opt(args.listings, "listings")?, "listings")?;
    let schema_path = super::require(ctx.resolve_opt(args.schema, "schema")?, "schema")?;
    let model_path = super::require(ctx.resolve_opt(args.model, "model")?, "model")?;
    let split = ctx.resolve_opt(args.split, "split")?;
    let discount = ctx.resolve(args.discount, "discount", 0.028)? / 12.0;
    let bins_mode = ctx.resolve(args.bins, "bins", "machine".to_string())?;
    let n_bins = ctx.resolve(args.n_bins, "n-bins", 100)?;
    let min_crowds = ctx.resolve(args.min_crowds, "min-crowds", 5)?;
    let default_months = ctx.resolve(args.default_months, "default-months", 12)?;

    let set = super::load_loan_set(&input, &schema_path)?;
    let set = super::filter_split(set, split.as_deref(), "test")?;
    if set.loans.is_empty() {
        return Err(CommandError::Runtime(anyhow::anyhow!("no funded loans")));
    }
    let schema = FeatureSchema::load(&schema_path).map_err(anyhow::Error::from)?;
    let loaded = dataset::load_listings(&listings_path, &schema).map_err(anyhow::Error::from)?;
    let rates = super::rate_table(
        ctx.resolve_opt(args.rates, "rates")?.as_deref(),
        ctx.resolve_opt(args.fixed_rf, "fixed-rf")?,
    )?;
    let model = super::load_model(&model_path)?;

    let machine_scores = super::predictions(&model, &set)?;
    let binning_scores = match bins_mode.as_str() {
        "machine" => machine_scores.clone(),
        "premium" => super::premiums(&set.loans, &rates)?,
        other => return Err(usage(format!("--bins must be machine or premium, got {other:?}"))),
    };

    let n_bins = n_bins.min(set.loans.len());
    let probs = portfolio::estimate_default_prob(&set.loans, &binning_scores, n_bins)
        .map_err(anyhow::Error::from)?;
    let variance_of: BTreeMap<u64, f64> = set
        .loans
        .iter()
        .zip(&probs)
        .map(|(l, &p)| {
            (l.id(), portfolio::loan_return_variance(l, p, discount, default_months))
        })
        .collect();
    let crowd_of = portfolio::crowd_membership(&set.loans);
    let score_of: BTreeMap<u64, f64> =
        set.loans.iter().zip(&machine_scores).map(|(l, &s)| (l.id(), s)).collect();

    // Cells over every listing in the evaluation universe: the funded test
    // loans plus all unfunded listings.
    let funded_ids: std::collections::BTreeSet<u64> =
        set.loans.iter().map(|l| l.id()).collect();
    let mut universe: Vec<ListingRecord> =
        set.loans.iter().map(|l| l.listing.clone()).collect();
    let unfunded: Vec<ListingRecord> = loaded
        .listings
        .into_iter()
        .filter(|l| !funded_ids.contains(&l.listing_id))
        .collect();
    universe.extend(unfunded.iter().cloned());
    let cells = dataset::build_cells(&universe).map_err(anyhow::Error::from)?;
    let kept = dataset::filter_cells(&cells, &crowd_of, &variance_of, min_crowds);

    let mut cells_csv =
        CsvWriter::new(&["cell_id", "amount_bin", "history_bins", "rate_bin", "grade", "listings"]);
    for cell in &kept {
        let bins: Vec<String> = cell.history_bins.iter().map(|b| b.to_string()).collect();
        cells_csv.row(&[
            cell.cell_id.to_string(),
            cell.amount_bin.to_string(),
            bins.join("|"),
            cell.rate_bin.to_string(),
            cell.grade.to_string(),
            cell.member_ids.len().to_string(),
        ]);
    }
    cells_csv.finish(&ctx.out_path("cells.csv"))?;

    let mut quintiles = BTreeMap::new();
    for cell in &kept {
        if let Some(cq) = portfolio::cell_quintiles(cell, &crowd_of, &variance_of) {
            quintiles.insert(cell.cell_id, cq);
        }
    }
    if quintiles.is_empty() {
        return Err(CommandError::Runtime(anyhow::anyhow!(
            "no cell kept at least {min_crowds} crowds; cannot run the contraction"
        )));
    }

    let checks = portfolio::randomization_check(
        &kept,
        &quintiles,
        &EvaluationSet { funded: &set.loans, unfunded: &unfunded },
    )
    .map_err(anyhow::Error::from)?;
    let mut pvalues = CsvWriter::new(&["cell_id", "n", "f_statistic", "p_value"]);
    for check in &checks {
        pvalues.row(&[
            check.cell_id.to_string(),
            check.n.to_string(),
            f(check.f_statistic),
            f(check.p_value),
        ]);
    }
    pvalues.finish(&ctx.out_path("randomization_pvalues.csv"))?;

    let loans_by_id: BTreeMap<u64, &dataset::LoanRecord> =
        set.loans.iter().map(|l| (l.id(), l)).collect();
    let cell_quintiles: Vec<_> = quintiles.into_values().collect();
    let result =
        portfolio::contraction(&cell_quintiles, &loans_by_id, &score_of, &variance_of, discount)
            .map_err(anyhow::Error::from)?;

    let mut curve = CsvWriter::new(&["size", "variance", "npv", "irr"]);
    for point in &result.curve {
        curve.row(&[point.size.to_string(), f(point.variance), f(point.npv), opt_f(point.irr)]);
    }
    curve.finish(&ctx.out_path("contraction_curve.csv"))?;

    let mut refs = CsvWriter::new(&[
        "quintile",
        "size",
        "variance",
        "npv",
        "irr",
        "curve_npv_at_variance",
        "curve_irr_at_variance",
    ]);
    for r in &result.references {
        refs.row(&[
            r.quintile.to_string(),
            r.size.to_string(),
            f(r.variance),
            f(r.npv),
            opt_f(r.irr),
            opt_f(portfolio::curve_npv_at_variance(&result.curve, r.variance)),
            opt_f(portfolio::curve_irr_at_variance(&result.curve, r.variance)),
        ]);
    }
    refs.finish(&ctx.out_path("quintile_references.csv"))?;

    ctx.write_manifest(
        "contract",
        &format!(
            "contract bins={bins_mode} n_bins={n_bins} min_crowds={min_crowds} default_months={default_months} seed={}",
            ctx.seed
        ),
    )?;
    println!(
        "contract: {} cells kept, {} F-tests, curve of {} points",
        kept.len(),
        checks.len(),
        result.curve.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    rates: Option<PathBuf>,
    #[arg(long)]
    fixed_rf: Option<f64>,
    /// Categorical feature whose level 2 means "homeowner"
    /// [default: homeowner].
    #[arg(long)]
    homeowner_feature: Option<String>,
}

pub fn profile(ctx: &RunContext, args: ProfileArgs) -> Result<(), CommandError> {
    let input = super::require(ctx.resolve_opt(args.input, "input")?, "input")?;
    let schema = super::require(ctx.resolve_opt(args.schema, "schema")?, "schema")?;
    let model_path = super::require(ctx.resolve_opt(args.model, "model")?, "model")?;
    let split = ctx.resolve_opt(args.split, "split")?;
    let homeowner_feature =
        ctx.resolve(args.homeowner_feature, "homeowner-feature", "homeowner".to_string())?;

    let set = super::load_loan_set(&input, &schema)?;
    let set = super::filter_split(set, split.as_deref(), "test")?;
    if set.loans.is_empty() {
        return Err(CommandError::Runtime(anyhow::anyhow!("no loans to profile")));
    }
    let rates = super::rate_table(
        ctx.resolve_opt(args.rates, "rates")?.as_deref(),
        ctx.resolve_opt(args.fixed_rf, "fixed-rf")?,
    )?;
    let model = super::load_model(&model_path)?;
    let machine_scores = super::predictions(&model, &set)?;
    let premium_scores = super::premiums(&set.loans, &rates)?;

    let homeowner_idx = set
        .schema
        .index_of(&homeowner_feature)
        .ok_or_else(|| usage(format!("schema has no feature {homeowner_feature:?}")))?;
    let is_homeowner: Vec<bool> =
        set.loans.iter().map(|l| l.listing.features[homeowner_idx] == 2.0).collect();

    let mut out = CsvWriter::new(&[
        "ordering",
        "size",
        "mean_scorex",
        "homeowner_fraction",
        "mean_credit_history_days",
    ]);
    for (name, scores) in [("machine", &machine_scores), ("premium", &premium_scores)] {
        let curve = portfolio::borrower_profile_curve(&set.loans, scores, &is_homeowner)
            .map_err(anyhow::Error::from)?;
        for point in curve {
            out.row(&[
                name.to_string(),
                point.size.to_string(),
                f(point.mean_scorex),
                f(point.homeowner_fraction),
                f(point.mean_credit_history_days),
            ]);
        }
    }
    out.finish(&ctx.out_path("profile_curves.csv"))?;

    ctx.write_manifest("profile", &format!("profile homeowner={homeowner_feature} seed={}", ctx.seed))?;
    println!("profile: {} loans across two orderings", set.loans.len());
    Ok(())
}
