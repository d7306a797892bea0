//! Loan and listing ingestion, demographic proxy groups, train/test and
//! time-based splits, and the conditioning cells used by the contraction
//! comparison.
//!
//! The CSV layout is one loan (or listing) per row with a fixed set of
//! structural columns followed by the model feature columns declared in a
//! schema file. Dates are ISO-8601.

use crate::matrix::Matrix;
use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("header mismatch: expected column {expected:?} at position {position}, found {found:?}")]
    HeaderMismatch {
        expected: String,
        found: String,
        position: usize,
    },
    #[error("row {row}: cannot parse {field}: {value:?}")]
    Parse {
        row: usize,
        field: String,
        value: String,
    },
    #[error("mapping concentration {0} outside [0, 1]")]
    BadConcentration(f64),
    #[error("cutoffs must satisfy high > low, got ({high}, {low})")]
    BadCutoffs { high: f64, low: f64 },
    #[error("train fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("need at least 2 records, got {0}")]
    TooFewRecords(usize),
    #[error("all records share one origination date")]
    DegenerateDateSpan,
    #[error("empty input")]
    EmptyInput,
}

/// Prosper-style letter grade, best (`AA`) to worst (`HR`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CreditGrade {
    AA,
    A,
    B,
    C,
    D,
    E,
    HR,
}

impl CreditGrade {
    pub fn parse(s: &str) -> Option<CreditGrade> {
        match s {
            "AA" => Some(CreditGrade::AA),
            "A" => Some(CreditGrade::A),
            "B" => Some(CreditGrade::B),
            "C" => Some(CreditGrade::C),
            "D" => Some(CreditGrade::D),
            "E" => Some(CreditGrade::E),
            "HR" => Some(CreditGrade::HR),
            _ => None,
        }
    }

    pub const ALL: [CreditGrade; 7] = [
        CreditGrade::AA,
        CreditGrade::A,
        CreditGrade::B,
        CreditGrade::C,
        CreditGrade::D,
        CreditGrade::E,
        CreditGrade::HR,
    ];
}

impl fmt::Display for CreditGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CreditGrade::AA => "AA",
            CreditGrade::A => "A",
            CreditGrade::B => "B",
            CreditGrade::C => "C",
            CreditGrade::D => "D",
            CreditGrade::E => "E",
            CreditGrade::HR => "HR",
        };
        f.write_str(s)
    }
}

/// Kind of a model feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureKind {
    Continuous,
    /// Nominal with levels 1..=k.
    Categorical { levels: usize },
    /// Ordered levels with explicit (low, high) jitter ranges per level.
    Ordinal { ranges: Vec<(f64, f64)> },
    /// Continuous with a point mass at `point_mass` (missing/censored).
    Mixed { point_mass: f64 },
}

/// Declares the name and kind of every model feature column, in CSV order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    features: Vec<(String, FeatureKind)>,
}

impl FeatureSchema {
    pub fn new(features: Vec<(String, FeatureKind)>) -> Result<Self, DatasetError> {
        let mut seen = BTreeSet::new();
        for (name, kind) in &features {
            if !seen.insert(name.clone()) {
                return Err(DatasetError::Schema(format!("duplicate feature {name:?}")));
            }
            match kind {
                FeatureKind::Categorical { levels } if *levels < 2 => {
                    return Err(DatasetError::Schema(format!(
                        "categorical feature {name:?} needs at least 2 levels"
                    )));
                }
                FeatureKind::Ordinal { ranges } => {
                    if ranges.is_empty() {
                        return Err(DatasetError::Schema(format!(
                            "ordinal feature {name:?} has no level ranges"
                        )));
                    }
                    for w in ranges.windows(2) {
                        if w[0].1 > w[1].0 {
                            return Err(DatasetError::Schema(format!(
                                "ordinal feature {name:?} has overlapping or unordered ranges"
                            )));
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(FeatureSchema { features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|(n, _)| n.as_str())
    }

    pub fn kinds(&self) -> impl Iterator<Item = &FeatureKind> {
        self.features.iter().map(|(_, k)| k)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FeatureKind)> {
        self.features.iter().map(|(n, k)| (n.as_str(), k))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|(n, _)| n == name)
    }

    pub fn kind(&self, index: usize) -> &FeatureKind {
        &self.features[index].1
    }

    /// Replace the kind of one column (used when ingest promotes a continuous
    /// column with missing values to mixed).
    fn set_kind(&mut self, index: usize, kind: FeatureKind) {
        self.features[index].1 = kind;
    }

    /// Parse the key-value schema text format:
    ///
    /// ```text
    /// income = continuous
    /// employment = categorical(4)
    /// score_level = ordinal(0.5..1.5, 1.5..2.5)
    /// prior_balance = mixed(0)
    /// ```
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut features = Vec::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, decl) = line.split_once('=').ok_or_else(|| {
                DatasetError::Schema(format!("line {}: expected `name = kind`", line_no + 1))
            })?;
            let name = name.trim().to_string();
            let decl = decl.trim();
            let kind = if decl == "continuous" {
                FeatureKind::Continuous
            } else if let Some(args) = decl.strip_prefix("categorical(").and_then(|s| s.strip_suffix(')')) {
                let levels = args.trim().parse::<usize>().map_err(|_| {
                    DatasetError::Schema(format!("line {}: bad level count {args:?}", line_no + 1))
                })?;
                FeatureKind::Categorical { levels }
            } else if let Some(args) = decl.strip_prefix("ordinal(").and_then(|s| s.strip_suffix(')')) {
                let mut ranges = Vec::new();
                for part in args.split(',') {
                    let (lo, hi) = part.trim().split_once("..").ok_or_else(|| {
                        DatasetError::Schema(format!("line {}: bad range {part:?}", line_no + 1))
                    })?;
                    let lo = lo.trim().parse::<f64>().map_err(|_| {
                        DatasetError::Schema(format!("line {}: bad range low {lo:?}", line_no + 1))
                    })?;
                    let hi = hi.trim().parse::<f64>().map_err(|_| {
                        DatasetError::Schema(format!("line {}: bad range high {hi:?}", line_no + 1))
                    })?;
                    ranges.push((lo, hi));
                }
                FeatureKind::Ordinal { ranges }
            } else if let Some(args) = decl.strip_prefix("mixed(").and_then(|s| s.strip_suffix(')')) {
                let point_mass = args.trim().parse::<f64>().map_err(|_| {
                    DatasetError::Schema(format!("line {}: bad point mass {args:?}", line_no + 1))
                })?;
                FeatureKind::Mixed { point_mass }
            } else {
                return Err(DatasetError::Schema(format!(
                    "line {}: unknown kind {decl:?}",
                    line_no + 1
                )));
            };
            features.push((name, kind));
        }
        FeatureSchema::new(features)
    }

    /// Inverse of [`FeatureSchema::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, kind) in &self.features {
            let decl = match kind {
                FeatureKind::Continuous => "continuous".to_string(),
                FeatureKind::Categorical { levels } => format!("categorical({levels})"),
                FeatureKind::Ordinal { ranges } => {
                    let parts: Vec<String> =
                        ranges.iter().map(|(lo, hi)| format!("{lo}..{hi}")).collect();
                    format!("ordinal({})", parts.join(", "))
                }
                FeatureKind::Mixed { point_mass } => format!("mixed({point_mass})"),
            };
            out.push_str(&format!("{name} = {decl}\n"));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        FeatureSchema::parse(&text)
    }
}

/// A loan request as shown to investors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListingRecord {
    pub listing_id: u64,
    pub amount: f64,
    pub max_borrower_rate: f64,
    pub creation_date: NaiveDate,
    pub credit_grade: CreditGrade,
    /// Bucketed credit score, 1 (worst) to 11 (best).
    pub scorex_bin: Option<u8>,
    pub credit_history_days: u32,
    pub occupation: Option<String>,
    pub location: Option<String>,
    /// Model feature values aligned with the schema.
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoanStatus {
    Completed,
    Defaulted,
}

impl LoanStatus {
    pub fn parse(s: &str) -> Option<LoanStatus> {
        match s {
            "Completed" => Some(LoanStatus::Completed),
            "Defaulted" => Some(LoanStatus::Defaulted),
            _ => None,
        }
    }
}

impl fmt::Display for LoanStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoanStatus::Completed => f.write_str("Completed"),
            LoanStatus::Defaulted => f.write_str("Defaulted"),
        }
    }
}

/// A funded listing with its observed repayment outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoanRecord {
    pub listing: ListingRecord,
    pub final_rate: f64,
    pub origination_date: NaiveDate,
    pub term_months: u32,
    pub principal_paid: f64,
    pub interest_paid: f64,
    pub status: LoanStatus,
    /// 1 = default.
    pub default_label: u8,
}

impl LoanRecord {
    pub fn id(&self) -> u64 {
        self.listing.listing_id
    }
}

/// Demographic proxy group produced by the concentration cutoffs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Group0,
    Group1,
    Unassigned,
}

/// Which listing label the concentration mapping applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSource {
    Occupation,
    Location,
}

#[derive(Debug, Clone)]
pub struct GroupAssignment {
    labels: BTreeMap<u64, Group>,
    pub high: f64,
    pub low: f64,
}

impl GroupAssignment {
    pub fn group_of(&self, loan_id: u64) -> Group {
        self.labels.get(&loan_id).copied().unwrap_or(Group::Unassigned)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, Group)> + '_ {
        self.labels.iter().map(|(id, g)| (*id, *g))
    }
}

/// Assign each record to `Group1` when its label's concentration is at least
/// `high`, `Group0` when at most `low`, and `Unassigned` otherwise (including
/// labels absent from the mapping). Unassigned records are kept but excluded
/// from fairness computations downstream.
pub fn assign_groups(
    records: &[LoanRecord],
    mapping: &BTreeMap<String, f64>,
    source: GroupSource,
    high: f64,
    low: f64,
) -> Result<GroupAssignment, DatasetError> {
    if high <= low {
        return Err(DatasetError::BadCutoffs { high, low });
    }
    for &c in mapping.values() {
        if !(0.0..=1.0).contains(&c) {
            return Err(DatasetError::BadConcentration(c));
        }
    }
    let mut labels = BTreeMap::new();
    for r in records {
        let label = match source {
            GroupSource::Occupation => r.listing.occupation.as_deref(),
            GroupSource::Location => r.listing.location.as_deref(),
        };
        let group = match label.and_then(|l| mapping.get(l)) {
            Some(&c) if c >= high => Group::Group1,
            Some(&c) if c <= low => Group::Group0,
            _ => Group::Unassigned,
        };
        labels.insert(r.id(), group);
    }
    Ok(GroupAssignment { labels, high, low })
}

/// Reproducible index split into (train, test); train gets
/// `round(train_fraction * n)` records.
pub fn split_train_test(
    n_records: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(DatasetError::BadFraction(train_fraction));
    }
    if n_records < 2 {
        return Err(DatasetError::TooFewRecords(n_records));
    }
    let mut order: Vec<usize> = (0..n_records).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (train_fraction * n_records as f64).round() as usize;
    let n_train = n_train.clamp(1, n_records - 1);
    let test = order.split_off(n_train);
    let mut train = order;
    train.sort_unstable();
    let mut test = test;
    test.sort_unstable();
    Ok((train, test))
}

/// Partition records into `n_periods` contiguous, equal-length calendar
/// intervals spanning the origination dates. Period length counts days
/// inclusively; boundary dates belong to the later period (half-open
/// intervals).
pub fn time_period_split(
    records: &[LoanRecord],
    n_periods: usize,
) -> Result<Vec<Vec<usize>>, DatasetError> {
    assert!(n_periods >= 1);
    if records.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    let min = records.iter().map(|r| r.origination_date).min().unwrap();
    let max = records.iter().map(|r| r.origination_date).max().unwrap();
    if min == max && n_periods > 1 {
        return Err(DatasetError::DegenerateDateSpan);
    }
    // Inclusive day count; the final half-open interval then covers max.
    let total = (max - min).num_days() + 1;
    let boundaries: Vec<NaiveDate> = (0..=n_periods as i64)
        .map(|i| min + Duration::days(i * total / n_periods as i64))
        .collect();
    let mut periods = vec![Vec::new(); n_periods];
    for (idx, r) in records.iter().enumerate() {
        let d = r.origination_date;
        for j in 0..n_periods {
            if d >= boundaries[j] && d < boundaries[j + 1] {
                periods[j].push(idx);
                break;
            }
        }
    }
    Ok(periods)
}

/// Inclusive (start, end) dates of the periods [`time_period_split`] uses.
pub fn time_period_boundaries(
    records: &[LoanRecord],
    n_periods: usize,
) -> Result<Vec<(NaiveDate, NaiveDate)>, DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    let min = records.iter().map(|r| r.origination_date).min().unwrap();
    let max = records.iter().map(|r| r.origination_date).max().unwrap();
    let total = (max - min).num_days() + 1;
    Ok((0..n_periods as i64)
        .map(|i| {
            let start = min + Duration::days(i * total / n_periods as i64);
            let end = min + Duration::days((i + 1) * total / n_periods as i64 - 1);
            (start, end)
        })
        .collect())
}

/// For each record, the indices of loans originated within `window_days`
/// strictly before it: `[target - window, target)`. Targets never appear in
/// their own window, and same-day loans do not train each other.
pub fn rolling_window_split(records: &[LoanRecord], window_days: u32) -> Vec<Vec<usize>> {
    assert!(window_days > 0);
    let mut by_date: Vec<(NaiveDate, usize)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.origination_date, i))
        .collect();
    by_date.sort();
    let mut windows = vec![Vec::new(); records.len()];
    let window = Duration::days(window_days as i64);
    let mut lo = 0usize;
    for (pos, &(date, idx)) in by_date.iter().enumerate() {
        while lo < pos && by_date[lo].0 < date - window {
            lo += 1;
        }
        let mut train: Vec<usize> = by_date[lo..pos]
            .iter()
            .filter(|(d, _)| *d >= date - window && *d < date)
            .map(|&(_, i)| i)
            .collect();
        train.sort_unstable();
        windows[idx] = train;
    }
    windows
}

/// Bin identity of one listing: amount sextile, credit-history quintile,
/// max-rate bin of width 0.04, and credit grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub amount_bin: usize,
    pub history_bin: usize,
    pub rate_bin: usize,
    pub grade: CreditGrade,
}

/// A stratum of listings sharing all four conditioning bins. After merging,
/// `history_bins` may span several adjacent credit-history bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub cell_id: usize,
    pub amount_bin: usize,
    pub history_bins: Vec<usize>,
    pub rate_bin: usize,
    pub grade: CreditGrade,
    pub member_ids: Vec<u64>,
}

/// Quantile bin index per value. Bin edges are the empirical quantiles of a
/// stable sort of the values; assignment compares values against the edges,
/// so equal values always share a bin.
fn quantile_bins(values: &[f64], n_bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let edges: Vec<f64> = (1..n_bins).map(|k| sorted[k * n / n_bins]).collect();
    values
        .iter()
        .map(|v| edges.iter().filter(|&&e| e <= *v).count())
        .collect()
}

/// The bin tuple of every listing (parallel to the input).
pub fn cell_keys(listings: &[ListingRecord]) -> Vec<CellKey> {
    let amounts: Vec<f64> = listings.iter().map(|l| l.amount).collect();
    let histories: Vec<f64> = listings.iter().map(|l| l.credit_history_days as f64).collect();
    let amount_bins = quantile_bins(&amounts, 6);
    let history_bins = quantile_bins(&histories, 5);
    listings
        .iter()
        .enumerate()
        .map(|(i, l)| CellKey {
            amount_bin: amount_bins[i],
            history_bin: history_bins[i],
            rate_bin: (l.max_borrower_rate / 0.04).floor() as usize,
            grade: l.credit_grade,
        })
        .collect()
}

/// Partition listings into cells by (amount sextile, credit-history quintile,
/// 0.04-wide max-rate bin, credit grade).
pub fn build_cells(listings: &[ListingRecord]) -> Result<Vec<Cell>, DatasetError> {
    if listings.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    let keys = cell_keys(listings);
    let mut by_key: BTreeMap<CellKey, Vec<u64>> = BTreeMap::new();
    for (listing, key) in listings.iter().zip(&keys) {
        by_key.entry(*key).or_default().push(listing.listing_id);
    }
    Ok(by_key
        .into_iter()
        .enumerate()
        .map(|(cell_id, (key, mut member_ids))| {
            member_ids.sort_unstable();
            Cell {
                cell_id,
                amount_bin: key.amount_bin,
                history_bins: vec![key.history_bin],
                rate_bin: key.rate_bin,
                grade: key.grade,
                member_ids,
            }
        })
        .collect())
}

/// Keep cells whose funded members span at least `min_crowds` crowds with
/// pairwise-distinct portfolio return variances. `crowd_of` maps funded loan
/// ids to their crowd; listings absent from it are unfunded and do not count.
pub fn filter_cells<K: Ord>(
    cells: &[Cell],
    crowd_of: &BTreeMap<u64, K>,
    variance_of: &BTreeMap<u64, f64>,
    min_crowds: usize,
) -> Vec<Cell> {
    cells
        .iter()
        .filter(|cell| {
            let mut per_crowd: BTreeMap<&K, f64> = BTreeMap::new();
            for id in &cell.member_ids {
                if let Some(crowd) = crowd_of.get(id) {
                    let v = variance_of.get(id).copied().unwrap_or(0.0);
                    *per_crowd.entry(crowd).or_insert(0.0) += v;
                }
            }
            let mut variances: Vec<f64> = per_crowd.values().copied().collect();
            variances.sort_by(|a, b| a.total_cmp(b));
            variances.dedup();
            variances.len() >= min_crowds
        })
        .cloned()
        .collect()
}

/// Merge cells that differ only in credit-history bin into one larger cell
/// whenever the merged cell still satisfies `can_merge` (the random-assignment
/// check). Cells whose merge fails the check are kept as they were.
pub fn merge_cells_across_history(
    cells: &[Cell],
    can_merge: impl Fn(&Cell) -> bool,
) -> Vec<Cell> {
    let mut groups: BTreeMap<(usize, usize, CreditGrade), Vec<&Cell>> = BTreeMap::new();
    for cell in cells {
        groups
            .entry((cell.amount_bin, cell.rate_bin, cell.grade))
            .or_default()
            .push(cell);
    }
    let mut out = Vec::new();
    for ((amount_bin, rate_bin, grade), members) in groups {
        if members.len() == 1 {
            out.push(members[0].clone());
            continue;
        }
        let mut history_bins: Vec<usize> =
            members.iter().flat_map(|c| c.history_bins.iter().copied()).collect();
        history_bins.sort_unstable();
        history_bins.dedup();
        let mut member_ids: Vec<u64> =
            members.iter().flat_map(|c| c.member_ids.iter().copied()).collect();
        member_ids.sort_unstable();
        let merged = Cell {
            cell_id: 0,
            amount_bin,
            history_bins,
            rate_bin,
            grade,
            member_ids,
        };
        if can_merge(&merged) {
            out.push(merged);
        } else {
            out.extend(members.into_iter().cloned());
        }
    }
    for (i, cell) in out.iter_mut().enumerate() {
        cell.cell_id = i;
    }
    out
}

/// A row rejected at ingest, with its 1-based data row number.
#[derive(Debug, Clone)]
pub struct RejectedRow {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct LoadedLoans {
    pub loans: Vec<LoanRecord>,
    /// Schema actually in force: continuous columns containing missing values
    /// are promoted to mixed with a point mass at [`MISSING_SENTINEL`].
    pub schema: FeatureSchema,
    pub rejected: Vec<RejectedRow>,
}

#[derive(Debug)]
pub struct LoadedListings {
    pub listings: Vec<ListingRecord>,
    pub schema: FeatureSchema,
    pub rejected: Vec<RejectedRow>,
}

/// Point-mass value substituted for missing cells in promoted columns.
pub const MISSING_SENTINEL: f64 = -1.0e9;

const LISTING_COLUMNS: [&str; 9] = [
    "listing_id",
    "amount",
    "max_borrower_rate",
    "creation_date",
    "credit_grade",
    "scorex_bin",
    "credit_history_days",
    "occupation",
    "location",
];

const LOAN_COLUMNS: [&str; 7] = [
    "final_rate",
    "origination_date",
    "term_months",
    "principal_paid",
    "interest_paid",
    "status",
    "default_label",
];

fn check_header(
    header: &csv::StringRecord,
    fixed: &[&str],
    schema: &FeatureSchema,
) -> Result<(), DatasetError> {
    let expected: Vec<String> = fixed
        .iter()
        .map(|s| s.to_string())
        .chain(schema.names().map(|s| s.to_string()))
        .collect();
    for (i, want) in expected.iter().enumerate() {
        let found = header.get(i).unwrap_or("");
        if found != want {
            return Err(DatasetError::HeaderMismatch {
                expected: want.clone(),
                found: found.to_string(),
                position: i,
            });
        }
    }
    if header.len() != expected.len() {
        return Err(DatasetError::HeaderMismatch {
            expected: "<end of header>".to_string(),
            found: header.get(expected.len()).unwrap_or("").to_string(),
            position: expected.len(),
        });
    }
    Ok(())
}

struct FieldReader<'a> {
    record: &'a csv::StringRecord,
    row: usize,
}

impl<'a> FieldReader<'a> {
    fn raw(&self, idx: usize, name: &str) -> Result<&'a str, DatasetError> {
        self.record.get(idx).ok_or_else(|| DatasetError::Parse {
            row: self.row,
            field: name.to_string(),
            value: "<missing>".to_string(),
        })
    }

    fn parse<T: std::str::FromStr>(&self, idx: usize, name: &str) -> Result<T, DatasetError> {
        let raw = self.raw(idx, name)?;
        raw.trim().parse::<T>().map_err(|_| DatasetError::Parse {
            row: self.row,
            field: name.to_string(),
            value: raw.to_string(),
        })
    }

    fn date(&self, idx: usize, name: &str) -> Result<NaiveDate, DatasetError> {
        let raw = self.raw(idx, name)?;
        NaiveDate::parse_from_str(raw.trim(), "%Y-%m-%d").map_err(|_| DatasetError::Parse {
            row: self.row,
            field: name.to_string(),
            value: raw.to_string(),
        })
    }

    fn optional(&self, idx: usize, name: &str) -> Result<Option<&'a str>, DatasetError> {
        let raw = self.raw(idx, name)?.trim();
        Ok(if raw.is_empty() { None } else { Some(raw) })
    }
}

fn parse_listing(
    fields: &FieldReader,
    schema: &FeatureSchema,
    feature_offset: usize,
) -> Result<(ListingRecord, Vec<usize>), DatasetError> {
    let listing_id: u64 = fields.parse(0, "listing_id")?;
    let amount: f64 = fields.parse(1, "amount")?;
    let max_borrower_rate: f64 = fields.parse(2, "max_borrower_rate")?;
    let creation_date = fields.date(3, "creation_date")?;
    let grade_raw = fields.raw(4, "credit_grade")?;
    let credit_grade = CreditGrade::parse(grade_raw.trim()).ok_or_else(|| DatasetError::Parse {
        row: fields.row,
        field: "credit_grade".to_string(),
        value: grade_raw.to_string(),
    })?;
    let scorex_bin: Option<u8> = match fields.optional(5, "scorex_bin")? {
        Some(raw) => Some(raw.parse::<u8>().map_err(|_| DatasetError::Parse {
            row: fields.row,
            field: "scorex_bin".to_string(),
            value: raw.to_string(),
        })?),
        None => None,
    };
    let credit_history_days: u32 = fields.parse(6, "credit_history_days")?;
    let occupation = fields.optional(7, "occupation")?.map(str::to_string);
    let location = fields.optional(8, "location")?.map(str::to_string);

    let mut features = Vec::with_capacity(schema.len());
    let mut missing = Vec::new();
    for (j, _) in schema.iter().enumerate() {
        let idx = feature_offset + j;
        match fields.optional(idx, "feature")? {
            Some(raw) => {
                let v: f64 = raw.parse().map_err(|_| DatasetError::Parse {
                    row: fields.row,
                    field: schema.names().nth(j).unwrap().to_string(),
                    value: raw.to_string(),
                })?;
                features.push(v);
            }
            None => {
                missing.push(j);
                features.push(f64::NAN);
            }
        }
    }
    Ok((
        ListingRecord {
            listing_id,
            amount,
            max_borrower_rate,
            creation_date,
            credit_grade,
            scorex_bin,
            credit_history_days,
            occupation,
            location,
            features,
        },
        missing,
    ))
}

fn listing_invariant_violation(l: &ListingRecord) -> Option<String> {
    if l.amount <= 0.0 {
        return Some(format!("amount {} must be positive", l.amount));
    }
    if !(0.0..=0.35).contains(&l.max_borrower_rate) {
        return Some(format!("max_borrower_rate {} outside [0, 0.35]", l.max_borrower_rate));
    }
    if let Some(s) = l.scorex_bin {
        if !(1..=11).contains(&s) {
            return Some(format!("scorex_bin {s} outside 1..=11"));
        }
    }
    None
}

fn loan_invariant_violation(r: &LoanRecord) -> Option<String> {
    if let Some(v) = listing_invariant_violation(&r.listing) {
        return Some(v);
    }
    if r.final_rate > r.listing.max_borrower_rate {
        return Some(format!(
            "final_rate {} exceeds max_borrower_rate {}",
            r.final_rate, r.listing.max_borrower_rate
        ));
    }
    if r.principal_paid > r.listing.amount + 0.01 {
        return Some(format!(
            "principal_paid {} exceeds amount {}",
            r.principal_paid, r.listing.amount
        ));
    }
    if r.status == LoanStatus::Completed && r.default_label != 0 {
        return Some("status Completed but default_label is 1".to_string());
    }
    if r.default_label > 1 {
        return Some(format!("default_label {} not binary", r.default_label));
    }
    if r.term_months == 0 {
        return Some("term_months must be positive".to_string());
    }
    None
}

/// Promote continuous columns containing missing values to mixed and
/// substitute the sentinel.
fn resolve_missing(
    schema: &mut FeatureSchema,
    rows: &mut [Vec<f64>],
    missing_cols: &BTreeSet<usize>,
) -> Result<(), DatasetError> {
    for &j in missing_cols {
        match schema.kind(j) {
            FeatureKind::Continuous => {
                schema.set_kind(j, FeatureKind::Mixed { point_mass: MISSING_SENTINEL });
                for row in rows.iter_mut() {
                    if row[j].is_nan() {
                        row[j] = MISSING_SENTINEL;
                    }
                }
            }
            FeatureKind::Mixed { point_mass } => {
                let pm = *point_mass;
                for row in rows.iter_mut() {
                    if row[j].is_nan() {
                        row[j] = pm;
                    }
                }
            }
            _ => {
                let name = schema.names().nth(j).unwrap().to_string();
                return Err(DatasetError::Schema(format!(
                    "feature {name:?} has missing values but is not continuous or mixed"
                )));
            }
        }
    }
    Ok(())
}

/// Load funded loans from CSV. Structural problems (missing file, header
/// mismatch, unparseable fields) are hard errors; rows that parse but violate
/// record invariants are returned in `rejected` with their row numbers.
pub fn load_loans(path: &Path, schema: &FeatureSchema) -> Result<LoadedLoans, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let fixed: Vec<&str> = LISTING_COLUMNS.iter().chain(LOAN_COLUMNS.iter()).copied().collect();
    check_header(reader.headers()?, &fixed, schema)?;

    let feature_offset = fixed.len();
    let loan_offset = LISTING_COLUMNS.len();
    let mut loans = Vec::new();
    let mut rejected = Vec::new();
    let mut missing_cols: BTreeSet<usize> = BTreeSet::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let fields = FieldReader { record: &record, row };
        let (listing, missing) = parse_listing(&fields, schema, feature_offset)?;
        missing_cols.extend(missing);
        let status_raw = fields.raw(loan_offset + 5, "status")?;
        let status = LoanStatus::parse(status_raw.trim()).ok_or_else(|| DatasetError::Parse {
            row,
            field: "status".to_string(),
            value: status_raw.to_string(),
        })?;
        let loan = LoanRecord {
            listing,
            final_rate: fields.parse(loan_offset, "final_rate")?,
            origination_date: fields.date(loan_offset + 1, "origination_date")?,
            term_months: fields.parse(loan_offset + 2, "term_months")?,
            principal_paid: fields.parse(loan_offset + 3, "principal_paid")?,
            interest_paid: fields.parse(loan_offset + 4, "interest_paid")?,
            status,
            default_label: fields.parse(loan_offset + 6, "default_label")?,
        };
        match loan_invariant_violation(&loan) {
            Some(reason) => rejected.push(RejectedRow { row, reason }),
            None => loans.push(loan),
        }
    }

    let mut schema = schema.clone();
    let mut rows: Vec<Vec<f64>> = loans.iter().map(|l| l.listing.features.clone()).collect();
    resolve_missing(&mut schema, &mut rows, &missing_cols)?;
    for (loan, row) in loans.iter_mut().zip(rows) {
        loan.listing.features = row;
    }
    Ok(LoadedLoans { loans, schema, rejected })
}

/// Load listings (funded or not) from CSV; same conventions as [`load_loans`].
pub fn load_listings(path: &Path, schema: &FeatureSchema) -> Result<LoadedListings, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    check_header(reader.headers()?, &LISTING_COLUMNS, schema)?;

    let mut listings = Vec::new();
    let mut rejected = Vec::new();
    let mut missing_cols: BTreeSet<usize> = BTreeSet::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let fields = FieldReader { record: &record, row };
        let (listing, missing) = parse_listing(&fields, schema, LISTING_COLUMNS.len())?;
        missing_cols.extend(missing);
        match listing_invariant_violation(&listing) {
            Some(reason) => rejected.push(RejectedRow { row, reason }),
            None => listings.push(listing),
        }
    }

    let mut schema = schema.clone();
    let mut rows: Vec<Vec<f64>> = listings.iter().map(|l| l.features.clone()).collect();
    resolve_missing(&mut schema, &mut rows, &missing_cols)?;
    for (listing, row) in listings.iter_mut().zip(rows) {
        listing.features = row;
    }
    Ok(LoadedListings { listings, schema, rejected })
}

fn write_listing_fields(record: &mut Vec<String>, l: &ListingRecord) {
    record.push(l.listing_id.to_string());
    record.push(l.amount.to_string());
    record.push(l.max_borrower_rate.to_string());
    record.push(l.creation_date.format("%Y-%m-%d").to_string());
    record.push(l.credit_grade.to_string());
    record.push(l.scorex_bin.map(|s| s.to_string()).unwrap_or_default());
    record.push(l.credit_history_days.to_string());
    record.push(l.occupation.clone().unwrap_or_default());
    record.push(l.location.clone().unwrap_or_default());
}

/// Write funded loans in the layout [`load_loans`] reads.
pub fn write_loans_csv(
    path: &Path,
    loans: &[LoanRecord],
    schema: &FeatureSchema,
) -> Result<(), DatasetError> {
    let mut writer = csv::Writer::from_path(path)?;
    let header: Vec<String> = LISTING_COLUMNS
        .iter()
        .chain(LOAN_COLUMNS.iter())
        .map(|s| s.to_string())
        .chain(schema.names().map(|s| s.to_string()))
        .collect();
    writer.write_record(&header)?;
    for loan in loans {
        let mut record = Vec::with_capacity(header.len());
        write_listing_fields(&mut record, &loan.listing);
        record.push(loan.final_rate.to_string());
        record.push(loan.origination_date.format("%Y-%m-%d").to_string());
        record.push(loan.term_months.to_string());
        record.push(loan.principal_paid.to_string());
        record.push(loan.interest_paid.to_string());
        record.push(loan.status.to_string());
        record.push(loan.default_label.to_string());
        for v in &loan.listing.features {
            record.push(v.to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Write listings in the layout [`load_listings`] reads.
pub fn write_listings_csv(
    path: &Path,
    listings: &[ListingRecord],
    schema: &FeatureSchema,
) -> Result<(), DatasetError> {
    let mut writer = csv::Writer::from_path(path)?;
    let header: Vec<String> = LISTING_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(schema.names().map(|s| s.to_string()))
        .collect();
    writer.write_record(&header)?;
    for listing in listings {
        let mut record = Vec::with_capacity(header.len());
        write_listing_fields(&mut record, listing);
        for v in &listing.features {
            record.push(v.to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Load a two-column (label, concentration) mapping file.
pub fn load_group_mapping(path: &Path) -> Result<BTreeMap<String, f64>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let mut mapping = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let label = record.get(0).unwrap_or("").trim().to_string();
        let raw = record.get(1).unwrap_or("");
        let concentration: f64 = raw.trim().parse().map_err(|_| DatasetError::Parse {
            row,
            field: "concentration".to_string(),
            value: raw.to_string(),
        })?;
        mapping.insert(label, concentration);
    }
    Ok(mapping)
}

/// Feature rows of the given loans as a matrix aligned with the schema.
pub fn feature_matrix(loans: &[LoanRecord], schema: &FeatureSchema) -> Matrix {
    let mut m = Matrix::new(schema.len());
    for loan in loans {
        m.push_row(&loan.listing.features);
    }
    m
}

pub fn default_labels(loans: &[LoanRecord]) -> Vec<f64> {
    loans.iter().map(|l| l.default_label as f64).collect()
}
