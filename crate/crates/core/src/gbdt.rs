//! Regularized gradient-boosted regression trees for binary default
//! prediction.
//!
//! Trees are fit greedily to the gradient/hessian of the logistic loss at the
//! current margins, with exact split search over sorted feature values. The
//! split gain is the second-order criterion
//! `0.5 * (GL^2/(HL+lambda) + GR^2/(HR+lambda) - G^2/(H+lambda)) - gamma`,
//! leaf weights are `-G/(H+lambda)`, and each tree is shrunk by the learning
//! rate when added to the model. Missing values (`NaN`) follow a per-split
//! default branch chosen by gain.

use crate::matrix::Matrix;
use crate::stats::{logit, sigmoid};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GbdtError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training data is empty")]
    EmptyInput,
    #[error("label {0} is not binary")]
    NonBinaryLabel(f64),
    #[error("row has {got} features, model expects {expected}")]
    FeatureWidthMismatch { expected: usize, got: usize },
    #[error("model parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of boosting rounds (K).
    pub n_trees: usize,
    /// Per-leaf complexity penalty.
    pub gamma: f64,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Shrinkage applied when a tree is added to the model.
    pub learning_rate: f64,
    pub max_depth: usize,
    /// Fraction of rows sampled per tree, in (0, 1].
    pub row_subsample: f64,
    /// Fraction of feature columns sampled per tree, in (0, 1].
    pub col_subsample: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_trees: 200,
            gamma: 0.0,
            lambda: 1.0,
            learning_rate: 0.1,
            max_depth: 8,
            row_subsample: 1.0,
            col_subsample: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GbdtError> {
        if self.gamma < 0.0 {
            return Err(GbdtError::InvalidConfig(format!("gamma {} < 0", self.gamma)));
        }
        if self.lambda < 0.0 {
            return Err(GbdtError::InvalidConfig(format!("lambda {} < 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.learning_rate) || self.learning_rate == 0.0 {
            return Err(GbdtError::InvalidConfig(format!(
                "learning_rate {} outside (0, 1]",
                self.learning_rate
            )));
        }
        if self.max_depth == 0 {
            return Err(GbdtError::InvalidConfig("max_depth must be positive".into()));
        }
        for (name, v) in [("row_subsample", self.row_subsample), ("col_subsample", self.col_subsample)] {
            if !(0.0..=1.0).contains(&v) || v == 0.0 {
                return Err(GbdtError::InvalidConfig(format!("{name} {v} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Losses of the boosted classifier:
/// `y ln(1+e^-m) + (1-y) ln(1+e^m)`, evaluated stably for |m| up to ~700.
pub fn logistic_loss(margin: f64, label: u8) -> f64 {
    debug_assert!(label <= 1);
    fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
    label as f64 * softplus(-margin) + (1.0 - label as f64) * softplus(margin)
}

/// First and second derivative of [`logistic_loss`] in the margin:
/// `g = sigma(m) - y`, `h = sigma(m)(1 - sigma(m))`, with `h` kept strictly
/// positive.
pub fn grad_hess(margin: f64, label: u8) -> (f64, f64) {
    debug_assert!(label <= 1);
    let p = sigmoid(margin);
    let g = p - label as f64;
    let h = (p * (1.0 - p)).max(1e-16);
    (g, h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Where missing values go.
        default_left: bool,
    },
    Leaf {
        weight: f64,
    },
}

/// One regression tree; nodes are stored in preorder with node 0 as root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    /// Raw (unshrunk) leaf value for a row.
    pub fn value(&self, row: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { weight } => return *weight,
                Node::Split { feature, threshold, left, right, default_left } => {
                    let v = row[*feature];
                    idx = if v.is_nan() {
                        if *default_left {
                            *left
                        } else {
                            *right
                        }
                    } else if v < *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Longest root-to-leaf edge count.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], idx: usize) -> usize {
            match &nodes[idx] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Complexity penalty `gamma * T + 0.5 * lambda * sum(w^2)`.
    pub fn penalty(&self, gamma: f64, lambda: f64) -> f64 {
        let mut t = 0usize;
        let mut w2 = 0.0;
        for n in &self.nodes {
            if let Node::Leaf { weight } = n {
                t += 1;
                w2 += weight * weight;
            }
        }
        gamma * t as f64 + 0.5 * lambda * w2
    }
}

/// An additive ensemble of regression trees over a fixed feature width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub trees: Vec<RegressionTree>,
    pub base_margin: f64,
    pub config: TrainConfig,
    pub n_features: usize,
}

const PROBA_EPS: f64 = 1e-12;

impl BoostedModel {
    /// Additive margin: `base + sum_k learning_rate * tree_k(row)`.
    pub fn margin(&self, row: &[f64]) -> f64 {
        let mut m = self.base_margin;
        for tree in &self.trees {
            m += self.config.learning_rate * tree.value(row);
        }
        m
    }

    /// Predicted default probability, strictly inside (0, 1).
    pub fn predict_proba(&self, row: &[f64]) -> Result<f64, GbdtError> {
        if row.len() != self.n_features {
            return Err(GbdtError::FeatureWidthMismatch {
                expected: self.n_features,
                got: row.len(),
            });
        }
        Ok(sigmoid(self.margin(row)).clamp(PROBA_EPS, 1.0 - PROBA_EPS))
    }

    pub fn predict_many(&self, features: &Matrix) -> Result<Vec<f64>, GbdtError> {
        features.rows().map(|row| self.predict_proba(row)).collect()
    }
}

struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_left: bool,
}

fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    -g / (h + lambda)
}

fn half_score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

/// Best split for one feature over the given sample, or None when the feature
/// cannot separate the sample.
fn best_feature_split(
    features: &Matrix,
    sample: &[usize],
    grads: &[f64],
    hesss: &[f64],
    feature: usize,
    config: &TrainConfig,
) -> Option<SplitCandidate> {
    let mut present: Vec<(f64, f64, f64)> = Vec::with_capacity(sample.len());
    let (mut g_miss, mut h_miss) = (0.0, 0.0);
    let (mut g_total, mut h_total) = (0.0, 0.0);
    for (pos, &i) in sample.iter().enumerate() {
        let v = features.get(i, feature);
        let (g, h) = (grads[pos], hesss[pos]);
        g_total += g;
        h_total += h;
        if v.is_nan() {
            g_miss += g;
            h_miss += h;
        } else {
            present.push((v, g, h));
        }
    }
    if present.len() < 2 {
        return None;
    }
    present.sort_by(|a, b| a.0.total_cmp(&b.0));

    let parent = half_score(g_total, h_total, config.lambda);
    let mut best: Option<SplitCandidate> = None;
    let (mut g_left, mut h_left) = (0.0, 0.0);
    for i in 0..present.len() - 1 {
        g_left += present[i].1;
        h_left += present[i].2;
        if present[i].0 == present[i + 1].0 {
            continue;
        }
        let threshold = 0.5 * (present[i].0 + present[i + 1].0);
        let g_right = g_total - g_miss - g_left;
        let h_right = h_total - h_miss - h_left;
        for default_left in [true, false] {
            let (gl, hl, gr, hr) = if default_left {
                (g_left + g_miss, h_left + h_miss, g_right, h_right)
            } else {
                (g_left, h_left, g_right + g_miss, h_right + h_miss)
            };
            let gain = 0.5
                * (half_score(gl, hl, config.lambda) + half_score(gr, hr, config.lambda) - parent)
                - config.gamma;
            if gain > best.as_ref().map_or(0.0, |b| b.gain) {
                best = Some(SplitCandidate { gain, feature, threshold, default_left });
            }
        }
    }
    best
}

fn build_node(
    features: &Matrix,
    sample: &[usize],
    grads: &[f64],
    hesss: &[f64],
    columns: &[usize],
    config: &TrainConfig,
    depth: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let g_total: f64 = grads.iter().sum();
    let h_total: f64 = hesss.iter().sum();

    let split = if depth < config.max_depth {
        columns
            .iter()
            .filter_map(|&f| best_feature_split(features, sample, grads, hesss, f, config))
            .fold(None::<SplitCandidate>, |best, cand| match best {
                Some(b) if b.gain >= cand.gain => Some(b),
                _ => Some(cand),
            })
    } else {
        None
    };

    let Some(split) = split else {
        let idx = nodes.len();
        nodes.push(Node::Leaf { weight: leaf_weight(g_total, h_total, config.lambda) });
        return idx;
    };

    let mut left_sample = Vec::new();
    let mut left_grads = Vec::new();
    let mut left_hesss = Vec::new();
    let mut right_sample = Vec::new();
    let mut right_grads = Vec::new();
    let mut right_hesss = Vec::new();
    for (pos, &i) in sample.iter().enumerate() {
        let v = features.get(i, split.feature);
        let goes_left = if v.is_nan() { split.default_left } else { v < split.threshold };
        if goes_left {
            left_sample.push(i);
            left_grads.push(grads[pos]);
            left_hesss.push(hesss[pos]);
        } else {
            right_sample.push(i);
            right_grads.push(grads[pos]);
            right_hesss.push(hesss[pos]);
        }
    }

    let idx = nodes.len();
    nodes.push(Node::Leaf { weight: 0.0 }); // placeholder
    let left = build_node(features, &left_sample, &left_grads, &left_hesss, columns, config, depth + 1, nodes);
    let right = build_node(features, &right_sample, &right_grads, &right_hesss, columns, config, depth + 1, nodes);
    nodes[idx] = Node::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
        default_left: split.default_left,
    };
    idx
}

/// Fit one regression tree to the given gradients/hessians by exact greedy
/// split search. `sample` indexes rows of `features`; `grads`/`hesss` are
/// aligned with `sample`.
pub fn fit_tree(
    features: &Matrix,
    sample: &[usize],
    grads: &[f64],
    hesss: &[f64],
    columns: &[usize],
    config: &TrainConfig,
) -> Result<RegressionTree, GbdtError> {
    if sample.is_empty() {
        return Err(GbdtError::EmptyInput);
    }
    assert_eq!(sample.len(), grads.len());
    assert_eq!(sample.len(), hesss.len());
    let mut nodes = Vec::new();
    build_node(features, sample, grads, hesss, columns, config, 0, &mut nodes);
    Ok(RegressionTree { nodes })
}

/// Train a boosted model. The base margin is the logit of the label mean;
/// each round fits a tree to the current gradients on a row/column subsample
/// and adds it scaled by the learning rate.
pub fn train(features: &Matrix, labels: &[f64], config: &TrainConfig) -> Result<BoostedModel, GbdtError> {
    config.validate()?;
    let n = features.n_rows();
    if n == 0 || labels.len() != n {
        return Err(GbdtError::EmptyInput);
    }
    for &y in labels {
        if y != 0.0 && y != 1.0 {
            return Err(GbdtError::NonBinaryLabel(y));
        }
    }

    let mean = labels.iter().sum::<f64>() / n as f64;
    let base_margin = logit(mean.clamp(1e-12, 1.0 - 1e-12));
    let mut margins = vec![base_margin; n];
    let mut trees = Vec::with_capacity(config.n_trees);

    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..features.n_cols()).collect();

    for k in 0..config.n_trees {
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        rng.set_stream(k as u64 + 1);

        let sample: Vec<usize> = if config.row_subsample < 1.0 {
            let n_sample = ((config.row_subsample * n as f64).round() as usize).clamp(1, n);
            let mut chosen: Vec<usize> =
                all_rows.choose_multiple(&mut rng, n_sample).copied().collect();
            chosen.sort_unstable();
            chosen
        } else {
            all_rows.clone()
        };
        let columns: Vec<usize> = if config.col_subsample < 1.0 {
            let d = features.n_cols();
            let n_cols = ((config.col_subsample * d as f64).round() as usize).clamp(1, d);
            let mut chosen: Vec<usize> =
                all_cols.choose_multiple(&mut rng, n_cols).copied().collect();
            chosen.sort_unstable();
            chosen
        } else {
            all_cols.clone()
        };

        let mut grads = Vec::with_capacity(sample.len());
        let mut hesss = Vec::with_capacity(sample.len());
        for &i in &sample {
            let (g, h) = grad_hess(margins[i], labels[i] as u8);
            grads.push(g);
            hesss.push(h);
        }

        let tree = fit_tree(features, &sample, &grads, &hesss, &columns, config)?;
        for (i, margin) in margins.iter_mut().enumerate() {
            *margin += config.learning_rate * tree.value(features.row(i));
        }
        trees.push(tree);
    }

    Ok(BoostedModel { trees, base_margin, config: config.clone(), n_features: features.n_cols() })
}

/// Training objective `sum_i l(margin_i, y_i) + sum_k Omega(f_k)` of a model
/// on a dataset.
pub fn objective(model: &BoostedModel, features: &Matrix, labels: &[f64]) -> f64 {
    let loss: f64 = features
        .rows()
        .zip(labels)
        .map(|(row, &y)| logistic_loss(model.margin(row), y as u8))
        .sum();
    let penalty: f64 = model
        .trees
        .iter()
        .map(|t| t.penalty(model.config.gamma, model.config.lambda))
        .sum();
    loss + penalty
}

mod serialize_text {
    //! Versioned text serialization: header, config, base margin, then each
    //! tree as a preorder node list. Floats use Rust's shortest round-trip
    //! formatting, so weights survive a round trip bit-exactly.

    use super::*;

    pub fn to_text(model: &BoostedModel) -> String {
        let mut out = String::new();
        out.push_str("crowdlend-gbdt v1\n");
        let c = &model.config;
        out.push_str(&format!(
            "config n_trees={} gamma={} lambda={} learning_rate={} max_depth={} row_subsample={} col_subsample={} seed={}\n",
            c.n_trees, c.gamma, c.lambda, c.learning_rate, c.max_depth, c.row_subsample, c.col_subsample, c.seed
        ));
        out.push_str(&format!("n_features {}\n", model.n_features));
        out.push_str(&format!("base_margin {}\n", model.base_margin));
        for tree in &model.trees {
            out.push_str(&format!("tree {}\n", tree.nodes.len()));
            for node in &tree.nodes {
                match node {
                    Node::Split { feature, threshold, left, right, default_left } => {
                        out.push_str(&format!(
                            "split feature={feature} threshold={threshold} left={left} right={right} default={}\n",
                            if *default_left { "left" } else { "right" }
                        ));
                    }
                    Node::Leaf { weight } => {
                        out.push_str(&format!("leaf weight={weight}\n"));
                    }
                }
            }
        }
        out.push_str("end\n");
        out
    }

    fn field<'a>(token: Option<&'a str>, key: &str, line: usize) -> Result<&'a str, GbdtError> {
        match token.and_then(|t| t.strip_prefix(key).and_then(|t| t.strip_prefix('='))) {
            Some(v) => Ok(v),
            None => Err(GbdtError::Parse {
                line,
                message: format!("expected {key}=<value>, got {token:?}"),
            }),
        }
    }

    fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, GbdtError> {
        s.parse().map_err(|_| GbdtError::Parse { line, message: format!("bad number {s:?}") })
    }

    pub fn from_text(text: &str) -> Result<BoostedModel, GbdtError> {
        let mut lines = text.lines().enumerate();
        let (ln, header) = lines
            .next()
            .ok_or(GbdtError::Parse { line: 0, message: "empty model file".into() })?;
        if header.trim() != "crowdlend-gbdt v1" {
            return Err(GbdtError::Parse { line: ln + 1, message: format!("bad header {header:?}") });
        }

        let (ln, config_line) = lines
            .next()
            .ok_or(GbdtError::Parse { line: 1, message: "missing config".into() })?;
        let line_no = ln + 1;
        let mut tokens = config_line.split_whitespace();
        if tokens.next() != Some("config") {
            return Err(GbdtError::Parse { line: line_no, message: "expected config line".into() });
        }
        let config = TrainConfig {
            n_trees: parse_num(field(tokens.next(), "n_trees", line_no)?, line_no)?,
            gamma: parse_num(field(tokens.next(), "gamma", line_no)?, line_no)?,
            lambda: parse_num(field(tokens.next(), "lambda", line_no)?, line_no)?,
            learning_rate: parse_num(field(tokens.next(), "learning_rate", line_no)?, line_no)?,
            max_depth: parse_num(field(tokens.next(), "max_depth", line_no)?, line_no)?,
            row_subsample: parse_num(field(tokens.next(), "row_subsample", line_no)?, line_no)?,
            col_subsample: parse_num(field(tokens.next(), "col_subsample", line_no)?, line_no)?,
            seed: parse_num(field(tokens.next(), "seed", line_no)?, line_no)?,
        };

        let (ln, nf_line) = lines
            .next()
            .ok_or(GbdtError::Parse { line: line_no, message: "missing n_features".into() })?;
        let nf_value = nf_line.strip_prefix("n_features ").ok_or(GbdtError::Parse {
            line: ln + 1,
            message: "expected n_features".into(),
        })?;
        let n_features = parse_num(nf_value.trim(), ln + 1)?;

        let (ln, base_line) = lines
            .next()
            .ok_or(GbdtError::Parse { line: line_no, message: "missing base_margin".into() })?;
        let base_value = base_line.strip_prefix("base_margin ").ok_or(GbdtError::Parse {
            line: ln + 1,
            message: "expected base_margin".into(),
        })?;
        let base_margin = parse_num(base_value.trim(), ln + 1)?;

        let mut trees = Vec::new();
        loop {
            let (ln, line) = lines
                .next()
                .ok_or(GbdtError::Parse { line: 0, message: "missing end marker".into() })?;
            let line_no = ln + 1;
            let line = line.trim();
            if line == "end" {
                break;
            }
            let count: usize = match line.strip_prefix("tree ") {
                Some(v) => parse_num(v.trim(), line_no)?,
                None => {
                    return Err(GbdtError::Parse {
                        line: line_no,
                        message: format!("expected `tree <n>` or `end`, got {line:?}"),
                    })
                }
            };
            let mut nodes = Vec::with_capacity(count);
            for _ in 0..count {
                let (ln, node_line) = lines
                    .next()
                    .ok_or(GbdtError::Parse { line: line_no, message: "truncated tree".into() })?;
                let line_no = ln + 1;
                let mut tokens = node_line.split_whitespace();
                match tokens.next() {
                    Some("split") => {
                        let feature = parse_num(field(tokens.next(), "feature", line_no)?, line_no)?;
                        let threshold = parse_num(field(tokens.next(), "threshold", line_no)?, line_no)?;
                        let left = parse_num(field(tokens.next(), "left", line_no)?, line_no)?;
                        let right = parse_num(field(tokens.next(), "right", line_no)?, line_no)?;
                        let default_left = match field(tokens.next(), "default", line_no)? {
                            "left" => true,
                            "right" => false,
                            other => {
                                return Err(GbdtError::Parse {
                                    line: line_no,
                                    message: format!("bad default branch {other:?}"),
                                })
                            }
                        };
                        nodes.push(Node::Split { feature, threshold, left, right, default_left });
                    }
                    Some("leaf") => {
                        let weight = parse_num(field(tokens.next(), "weight", line_no)?, line_no)?;
                        nodes.push(Node::Leaf { weight });
                    }
                    other => {
                        return Err(GbdtError::Parse {
                            line: line_no,
                            message: format!("expected split/leaf, got {other:?}"),
                        })
                    }
                }
            }
            trees.push(RegressionTree { nodes });
        }
        Ok(BoostedModel { trees, base_margin, config, n_features })
    }
}

impl BoostedModel {
    pub fn to_text(&self) -> String {
        serialize_text::to_text(self)
    }

    pub fn from_text(text: &str) -> Result<BoostedModel, GbdtError> {
        serialize_text::from_text(text)
    }
}
