//! Seeded synthetic loan populations with known ground truth.
//!
//! Listings carry a latent risk factor `z`; the true default probability is
//! `p* = sigmoid(risk_slope * z + risk_intercept)` and features are noisy
//! views of `z`. The crowd perceives `p*` with an error whose scale grows
//! with `p*` and prices a premium `g(p) = premium_base + premium_slope * p`;
//! with one-sided errors enabled only downward (risk-underestimating) errors
//! survive, mimicking an auction where overpriced listings get bid back down
//! while underpriced ones stay cheap. Month-level funding caps give crowds
//! different risk tolerances. Everything is reproducible per seed.

use crate::dataset::{
    CreditGrade, FeatureKind, FeatureSchema, ListingRecord, LoanRecord, LoanStatus,
};
use crate::finance::{schedule, RateTable};
use crate::stats::sigmoid;
use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub n_listings: usize,
    pub seed: u64,
    /// First listing creation date.
    pub start: NaiveDate,
    /// Calendar months covered by listing creation dates.
    pub months_span: u32,
    pub term_months: u32,

    /// Continuous features of the form `z + N(0, feature_noise)`.
    pub n_informative: usize,
    /// Pure-noise continuous features.
    pub n_noise: usize,
    pub feature_noise: f64,

    /// True default model `p* = sigmoid(risk_slope * z + risk_intercept)`.
    pub risk_slope: f64,
    pub risk_intercept: f64,

    /// Scale of the crowd's risk perception error; the error s.d. for a
    /// listing is `crowd_noise * p*`, so risky listings are mispriced more.
    pub crowd_noise: f64,
    /// Keep only downward perception errors (risk underestimates).
    pub one_sided_crowd_error: bool,
    /// Premium map `g(p) = premium_base + premium_slope * p`.
    pub premium_base: f64,
    pub premium_slope: f64,

    /// Range of month-level funding caps in perceived-risk units; risk-
    /// tolerant months fund riskier listings.
    pub month_cap_lo: f64,
    pub month_cap_hi: f64,

    /// Additive shift applied to the first `n_shifted` informative columns
    /// for sensitive-attribute group 1.
    pub sensitive_shift: f64,
    pub n_shifted: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_listings: 5000,
            seed: 0,
            start: NaiveDate::from_ymd_opt(2007, 3, 1).unwrap(),
            months_span: 19,
            term_months: 36,
            n_informative: 6,
            n_noise: 2,
            feature_noise: 0.8,
            risk_slope: 3.2,
            risk_intercept: -1.0,
            crowd_noise: 0.95,
            one_sided_crowd_error: true,
            premium_base: 0.05,
            premium_slope: 0.35,
            month_cap_lo: 0.35,
            month_cap_hi: 0.98,
            sensitive_shift: 0.0,
            n_shifted: 2,
        }
    }
}

/// Per-listing ground truth, keyed by listing id. `premium` is the crowd's
/// priced premium for every listing, funded or not.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub p_star: BTreeMap<u64, f64>,
    pub sensitive: BTreeMap<u64, u8>,
    pub premium: BTreeMap<u64, f64>,
}

#[derive(Debug)]
pub struct SynthOutput {
    /// Every generated listing, funded or not.
    pub listings: Vec<ListingRecord>,
    /// The funded subset with repayment outcomes.
    pub loans: Vec<LoanRecord>,
    pub schema: FeatureSchema,
    pub rate_table: RateTable,
    /// Occupation label -> concentration fraction, for group assignment.
    pub group_mapping: BTreeMap<String, f64>,
    pub truth: GroundTruth,
}

/// Occupations with their group-1 concentration; drawn conditionally on the
/// sensitive attribute so the proxy assignment approximately recovers it.
const OCCUPATIONS: [(&str, f64); 5] = [
    ("occ_a", 0.92),
    ("occ_b", 0.81),
    ("occ_c", 0.52),
    ("occ_d", 0.18),
    ("occ_e", 0.07),
];

pub fn feature_schema(config: &GeneratorConfig) -> FeatureSchema {
    let mut features = Vec::new();
    for j in 0..config.n_informative {
        features.push((format!("signal_{j}"), FeatureKind::Continuous));
    }
    for j in 0..config.n_noise {
        features.push((format!("noise_{j}"), FeatureKind::Continuous));
    }
    features.push(("employment".to_string(), FeatureKind::Categorical { levels: 4 }));
    features.push(("homeowner".to_string(), FeatureKind::Categorical { levels: 2 }));
    let ranges: Vec<(f64, f64)> = (1..=11).map(|t| (t as f64 - 0.5, t as f64 + 0.5)).collect();
    features.push(("score_level".to_string(), FeatureKind::Ordinal { ranges }));
    features.push(("prior_balance".to_string(), FeatureKind::Mixed { point_mass: 0.0 }));
    FeatureSchema::new(features).expect("generator schema is valid")
}

fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn month_start(base: NaiveDate, offset: u32) -> NaiveDate {
    let year = base.format("%Y").to_string().parse::<i32>().unwrap();
    let month = base.format("%m").to_string().parse::<u32>().unwrap();
    let total = year * 12 + (month - 1) as i32 + offset as i32;
    NaiveDate::from_ymd_opt(total.div_euclid(12), total.rem_euclid(12) as u32 + 1, 1).unwrap()
}

fn days_in_month(d: NaiveDate) -> i64 {
    (month_start(d, 1) - d).num_days()
}

/// Generate the listing population, crowd pricing, funding outcomes, and
/// repayment performance for the funded subset.
pub fn generate(config: &GeneratorConfig) -> SynthOutput {
    assert!(config.n_informative >= 1);
    assert!(config.n_shifted <= config.n_informative);
    assert!(config.months_span >= 1);
    assert!(config.month_cap_lo <= config.month_cap_hi);

    let schema = feature_schema(config);

    // Monthly risk-free rates around 2.8%.
    let mut rates_rng = ChaCha12Rng::seed_from_u64(config.seed);
    rates_rng.set_stream(u64::MAX);
    let mut rate_entries = Vec::new();
    for m in 0..config.months_span {
        let wobble = 0.006 * ((m as f64) / 3.0).sin() + 0.002 * (rates_rng.gen::<f64>() - 0.5);
        let rf = (0.028 + wobble).clamp(0.02, 0.05);
        rate_entries.push((month_start(config.start, m), rf));
    }
    let rate_table = RateTable::dated(rate_entries).expect("rates in range");

    // Month-level funding caps: the crowd active in a risk-tolerant month
    // funds listings up to a higher perceived risk.
    let mut caps_rng = ChaCha12Rng::seed_from_u64(config.seed);
    caps_rng.set_stream(u64::MAX - 1);
    let month_caps: Vec<f64> = (0..config.months_span)
        .map(|_| caps_rng.gen_range(config.month_cap_lo..=config.month_cap_hi))
        .collect();

    let mut listings = Vec::with_capacity(config.n_listings);
    let mut loans = Vec::new();
    let mut p_star = BTreeMap::new();
    let mut sensitive = BTreeMap::new();
    let mut premium_truth = BTreeMap::new();

    for i in 0..config.n_listings {
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        let listing_id = i as u64 + 1;

        let z = gaussian(&mut rng);
        let a = rng.gen_bool(0.5) as u8;
        let p = sigmoid(config.risk_slope * z + config.risk_intercept);

        // Model features.
        let mut features = Vec::with_capacity(schema.len());
        for j in 0..config.n_informative {
            let shift =
                if a == 1 && j < config.n_shifted { config.sensitive_shift } else { 0.0 };
            features.push(z + config.feature_noise * gaussian(&mut rng) + shift);
        }
        for _ in 0..config.n_noise {
            features.push(gaussian(&mut rng));
        }
        // Employment status: mildly tilted by the latent factor.
        let employment = {
            let u: f64 = rng.gen();
            let tilt = 0.1 * z;
            if u < 0.55 - tilt {
                1.0
            } else if u < 0.80 - tilt {
                2.0
            } else if u < 0.95 {
                3.0
            } else {
                4.0
            }
        };
        features.push(employment);
        // Homeownership: 2 = owner; safer borrowers own more often.
        let homeowner = 1.0 + rng.gen_bool(sigmoid(0.4 - 0.6 * z)) as u8 as f64;
        features.push(homeowner);
        // Bucketed credit score, 1 (worst) to 11 (best): safe borrowers high.
        let score_level = (6.0 - 2.0 * z + 1.5 * gaussian(&mut rng)).round().clamp(1.0, 11.0);
        features.push(score_level);
        // Censored balance with a point mass at zero.
        let prior_balance = if rng.gen_bool(0.45) {
            0.0
        } else {
            (8.0 + 0.4 * z + 0.8 * gaussian(&mut rng)).exp().min(2.0e5)
        };
        features.push(prior_balance);

        // Structural listing fields.
        let amount = (8.6 + 0.45 * gaussian(&mut rng)).exp().clamp(1000.0, 25000.0);
        let credit_history_days =
            (4900.0 - 700.0 * z + 1400.0 * gaussian(&mut rng)).clamp(200.0, 12000.0) as u32;
        let grade_idx =
            ((z + 0.6 * gaussian(&mut rng) + 3.0) / 6.0 * 7.0).floor().clamp(0.0, 6.0);
        let credit_grade = CreditGrade::ALL[grade_idx as usize];
        let occupation = {
            let u: f64 = rng.gen();
            let idx = if a == 1 {
                if u < 0.45 {
                    0
                } else if u < 0.80 {
                    1
                } else if u < 0.92 {
                    2
                } else {
                    3
                }
            } else if u < 0.45 {
                4
            } else if u < 0.80 {
                3
            } else if u < 0.92 {
                2
            } else {
                1
            };
            OCCUPATIONS[idx].0.to_string()
        };
        let location = Some(if a == 1 { "area_hi" } else { "area_lo" }.to_string());

        let month = rng.gen_range(0..config.months_span);
        let month_first = month_start(config.start, month);
        let creation_date =
            month_first + Duration::days(rng.gen_range(0..days_in_month(month_first)));
        let origination_date = creation_date + Duration::days(rng.gen_range(0..=10));
        let rf = rate_table.rate_at(creation_date).expect("rates cover the span");

        // Crowd pricing: the perception error scales with the true risk, so
        // risky listings are the ones priced badly.
        let eps = config.crowd_noise * p * gaussian(&mut rng);
        let perception_error = if config.one_sided_crowd_error { -eps.max(0.0) } else { eps };
        let perceived = (p + perception_error).clamp(0.001, 0.999);
        let premium = config.premium_base + config.premium_slope * perceived;
        let final_rate = (rf + premium).clamp(0.01, 0.35);

        // Borrower's cap sits near the fair premium; the auction only closes
        // when the priced rate is acceptable.
        let fair_premium = config.premium_base + config.premium_slope * p;
        let max_borrower_rate =
            (rf + fair_premium + rng.gen_range(-0.02..0.10)).clamp(0.01, 0.35);

        let listing = ListingRecord {
            listing_id,
            amount,
            max_borrower_rate,
            creation_date,
            credit_grade,
            scorex_bin: Some(score_level as u8),
            credit_history_days,
            occupation: Some(occupation),
            location,
            features,
        };

        p_star.insert(listing_id, p);
        sensitive.insert(listing_id, a);
        premium_truth.insert(listing_id, premium);

        let funded =
            final_rate <= max_borrower_rate && perceived <= month_caps[month as usize];
        if funded {
            let defaulted = rng.gen_bool(p);
            let sched = schedule(amount, final_rate, config.term_months);
            let (status, default_label, principal_paid, interest_paid) = if defaulted {
                let months_paid = (12.0 + 4.0 * gaussian(&mut rng))
                    .round()
                    .clamp(0.0, config.term_months as f64 - 1.0) as u32;
                let principal = sched.cumulative_principal(months_paid);
                let paid_total = sched.monthly_payment * months_paid as f64;
                (LoanStatus::Defaulted, 1u8, principal, paid_total - principal)
            } else {
                let total = sched.monthly_payment * config.term_months as f64;
                (LoanStatus::Completed, 0u8, amount, total - amount)
            };
            loans.push(LoanRecord {
                listing: listing.clone(),
                final_rate,
                origination_date,
                term_months: config.term_months,
                principal_paid: principal_paid.min(amount),
                interest_paid,
                status,
                default_label,
            });
        }
        listings.push(listing);
    }

    let group_mapping: BTreeMap<String, f64> =
        OCCUPATIONS.iter().map(|(name, c)| (name.to_string(), *c)).collect();

    SynthOutput {
        listings,
        loans,
        schema,
        rate_table,
        group_mapping,
        truth: GroundTruth { p_star, sensitive, premium: premium_truth },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset;
    use crate::metrics::{roc_auc, ScoredSet};

    #[test]
    fn empty_config_gives_empty_output() {
        let config = GeneratorConfig { n_listings: 0, ..GeneratorConfig::default() };
        let out = generate(&config);
        assert!(out.listings.is_empty());
        assert!(out.loans.is_empty());
    }

    #[test]
    fn generation_is_reproducible() {
        let config = GeneratorConfig { n_listings: 300, ..GeneratorConfig::default() };
        let a = generate(&config);
        let b = generate(&config);
        assert_eq!(a.listings, b.listings);
        assert_eq!(a.loans, b.loans);
    }

    #[test]
    fn zero_noise_premium_preserves_risk_order() {
        let config =
            GeneratorConfig { n_listings: 500, crowd_noise: 0.0, ..GeneratorConfig::default() };
        let out = generate(&config);
        let mut pairs: Vec<(f64, f64)> = out
            .listings
            .iter()
            .map(|l| (out.truth.p_star[&l.listing_id], out.truth.premium[&l.listing_id]))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            assert!(w[1].1 >= w[0].1, "premium must be monotone in p*");
        }
    }

    #[test]
    fn default_rate_converges_to_mean_p_star() {
        let config = GeneratorConfig { n_listings: 50_000, ..GeneratorConfig::default() };
        let out = generate(&config);
        // Compare on the funded subset, whose labels exist.
        let mean_p: f64 =
            out.loans.iter().map(|l| out.truth.p_star[&l.id()]).sum::<f64>() / out.loans.len() as f64;
        let rate: f64 =
            out.loans.iter().map(|l| l.default_label as f64).sum::<f64>() / out.loans.len() as f64;
        assert!((rate - mean_p).abs() <= 0.01, "default rate {rate} vs mean p* {mean_p}");
    }

    #[test]
    fn generated_loans_pass_dataset_invariants() {
        let config = GeneratorConfig { n_listings: 2000, ..GeneratorConfig::default() };
        let out = generate(&config);
        assert!(!out.loans.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loans.csv");
        dataset::write_loans_csv(&path, &out.loans, &out.schema).unwrap();
        let loaded = dataset::load_loans(&path, &out.schema).unwrap();
        assert!(loaded.rejected.is_empty(), "rejected: {:?}", loaded.rejected);
        assert_eq!(loaded.loans.len(), out.loans.len());
    }

    #[test]
    fn one_sided_error_hurts_high_risk_ranking_most() {
        // Crowd AUC restricted to the riskier half should fall below the AUC
        // on the safer half, averaged over seeds.
        let mut hi_total = 0.0;
        let mut lo_total = 0.0;
        let mut n_seeds = 0.0;
        for seed in 0..20 {
            let config = GeneratorConfig {
                n_listings: 6000,
                seed,
                one_sided_crowd_error: true,
                ..GeneratorConfig::default()
            };
            let out = generate(&config);
            let median = {
                let mut ps: Vec<f64> =
                    out.loans.iter().map(|l| out.truth.p_star[&l.id()]).collect();
                ps.sort_by(|a, b| a.total_cmp(b));
                ps[ps.len() / 2]
            };
            let mut risky: Vec<(f64, u8)> = Vec::new();
            let mut safe: Vec<(f64, u8)> = Vec::new();
            for loan in &out.loans {
                let premium = out.truth.premium[&loan.id()];
                if out.truth.p_star[&loan.id()] > median {
                    risky.push((premium, loan.default_label));
                } else {
                    safe.push((premium, loan.default_label));
                }
            }
            let auc_of = |v: &[(f64, u8)]| {
                let set = ScoredSet::new(
                    v.iter().map(|(s, _)| *s).collect(),
                    v.iter().map(|(_, y)| *y).collect(),
                )
                .unwrap();
                roc_auc(&set).map(|c| c.auc)
            };
            if let (Ok(hi), Ok(lo)) = (auc_of(&risky), auc_of(&safe)) {
                hi_total += hi;
                lo_total += lo;
                n_seeds += 1.0;
            }
        }
        assert!(n_seeds >= 15.0);
        assert!(
            hi_total / n_seeds < lo_total / n_seeds,
            "risky-half AUC {} should fall below safe-half AUC {}",
            hi_total / n_seeds,
            lo_total / n_seeds
        );
    }
}
