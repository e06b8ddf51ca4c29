//! Multi-class gradient-boosted trees with a softmax objective.
//!
//! Each round fits one regression tree per class to the first and second
//! derivatives of the multinomial log-loss at the current margins. Splits
//! are found by exact greedy enumeration over the sorted distinct values of
//! every feature, level by level. Missing values (NaN) are routed to the
//! side with the larger gain, learned per split.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::{Error, Result};

pub const MODEL_FORMAT: &str = "lvef-gbt";
pub const MODEL_VERSION: u32 = 1;

/// Smallest class prior used for the base score, so that a class absent
/// from training still has a finite margin.
pub const MIN_PRIOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GbtError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("training matrix has no rows or no columns")]
    EmptyMatrix,
    #[error("non-finite value {value} in feature {feature:?}, row {row}")]
    NonFiniteFeature {
        feature: String,
        row: usize,
        value: f64,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} outside 0..{n_classes}")]
    InvalidLabel { label: usize, n_classes: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("corrupt model: {0}")]
    CorruptModel(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtParams {
    pub learning_rate: f64,
    pub max_depth: usize,
    /// Minimum hessian sum in each child.
    pub min_child_weight: f64,
    pub n_rounds: usize,
    pub l2_lambda: f64,
    pub n_classes: usize,
    /// Stop after this many rounds without a validation improvement.
    pub early_stopping_rounds: Option<usize>,
    pub seed: u64,
    /// Row fraction sampled per tree.
    pub subsample: f64,
    /// Per-class multipliers of gradients and hessians.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.08,
            max_depth: 7,
            min_child_weight: 5.0,
            n_rounds: 200,
            l2_lambda: 1.0,
            n_classes: 4,
            early_stopping_rounds: Some(20),
            seed: 0,
            subsample: 1.0,
            class_weights: None,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<(), GbtError> {
        let bad = |m: &str| Err(GbtError::InvalidParams(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must be in (0, 1]");
        }
        if self.max_depth < 1 {
            return bad("max_depth must be >= 1");
        }
        if !(self.min_child_weight >= 0.0) {
            return bad("min_child_weight must be >= 0");
        }
        if !(self.l2_lambda >= 0.0) {
            return bad("l2_lambda must be >= 0");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must be in (0, 1]");
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.n_classes || w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad("class_weights needs one positive weight per class");
            }
        }
        Ok(())
    }
}

/// A regression tree node. Rows with `x[feature] < threshold` go left;
/// missing values follow `default_left`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        gain: f64,
        cover: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        weight: f64,
        cover: f64,
    },
}

impl TreeNode {
    pub fn cover(&self) -> f64 {
        match self {
            TreeNode::Split { cover, .. } | TreeNode::Leaf { cover, .. } => *cover,
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { weight, .. } => return *weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                    ..
                } => {
                    let x = row[*feature];
                    let go_left = if x.is_nan() { *default_left } else { x < *threshold };
                    node = if go_left { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Visits every node depth-first, parents before children.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a TreeNode)) {
        f(self);
        if let TreeNode::Split { left, right, .. } = self {
            left.walk(f);
            right.walk(f);
        }
    }

    fn max_feature(&self) -> Option<usize> {
        let mut m = None;
        self.walk(&mut |n| {
            if let TreeNode::Split { feature, .. } = n {
                m = Some(m.map_or(*feature, |v: usize| v.max(*feature)));
            }
        });
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLoss {
    pub round: usize,
    pub train: f64,
    pub val: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub format: String,
    pub version: u32,
    pub params: GbtParams,
    pub base_score: Vec<f64>,
    pub feature_names: Vec<String>,
    /// Round-major: the tree for round `r` and class `k` is
    /// `trees[r * n_classes + k]`.
    pub trees: Vec<TreeNode>,
    pub history: Vec<RoundLoss>,
    /// Rounds kept after early stopping, if it triggered.
    pub best_round: Option<usize>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

pub fn softmax(margins: &[f64]) -> Vec<f64> {
    let m = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = margins.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean negative log-probability of the true class, with probabilities
/// clipped to `[1e-15, 1]`.
pub fn mlogloss(proba: &[Vec<f64>], y: &[usize]) -> Result<f64, GbtError> {
    if proba.len() != y.len() {
        return Err(GbtError::DimensionMismatch {
            expected: proba.len(),
            got: y.len(),
        });
    }
    if y.is_empty() {
        return Err(GbtError::EmptyMatrix);
    }
    let mut s = 0.0;
    for (p, &label) in proba.iter().zip(y) {
        let v = *p.get(label).ok_or(GbtError::InvalidLabel {
            label,
            n_classes: p.len(),
        })?;
        s -= v.clamp(1e-15, 1.0).ln();
    }
    Ok(s / y.len() as f64)
}

impl GbtModel {
    pub fn n_classes(&self) -> usize {
        self.base_score.len()
    }

    pub fn n_rounds(&self) -> usize {
        self.trees.len() / self.n_classes().max(1)
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn class_trees(&self, class: usize) -> impl Iterator<Item = &TreeNode> {
        self.trees.iter().skip(class).step_by(self.n_classes())
    }

    pub fn predict_margin(&self, row: &[f64]) -> Result<Vec<f64>, GbtError> {
        if row.len() != self.n_features() {
            return Err(GbtError::DimensionMismatch {
                expected: self.n_features(),
                got: row.len(),
            });
        }
        let k = self.n_classes();
        let mut m = self.base_score.clone();
        for (i, tree) in self.trees.iter().enumerate() {
            m[i % k] += tree.predict(row);
        }
        Ok(m)
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<Vec<f64>, GbtError> {
        Ok(softmax(&self.predict_margin(row)?))
    }

    fn check_columns(&self, x: &FeatureMatrix) -> Result<(), GbtError> {
        if x.n_cols() != self.n_features() {
            return Err(GbtError::DimensionMismatch {
                expected: self.n_features(),
                got: x.n_cols(),
            });
        }
        if let Some(i) = (0..x.n_cols()).find(|&i| x.columns[i].name != self.feature_names[i]) {
            return Err(GbtError::CorruptModel(format!(
                "column {i} is {:?}, model expects {:?}",
                x.columns[i].name, self.feature_names[i]
            )));
        }
        Ok(())
    }

    /// Probabilities for every row; the matrix columns must match the
    /// model's feature names in order.
    pub fn predict_proba_matrix(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>, GbtError> {
        self.check_columns(x)?;
        x.rows().map(|r| self.predict_proba(r)).collect()
    }

    pub fn predict_margin_matrix(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>, GbtError> {
        self.check_columns(x)?;
        x.rows().map(|r| self.predict_margin(r)).collect()
    }

    /// Structural checks applied after loading.
    pub fn validate(&self) -> Result<(), GbtError> {
        let corrupt = |m: String| Err(GbtError::CorruptModel(m));
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return corrupt(format!(
                "unsupported model format {} v{}",
                self.format, self.version
            ));
        }
        let k = self.n_classes();
        if k < 2 || k != self.params.n_classes {
            return corrupt(format!("base score has {k} classes"));
        }
        if self.trees.len() % k != 0 {
            return corrupt(format!("{} trees for {k} classes", self.trees.len()));
        }
        if let Some(f) = self.trees.iter().filter_map(TreeNode::max_feature).max() {
            if f >= self.n_features() {
                return corrupt(format!("feature index {f} out of range"));
            }
        }
        Ok(())
    }
}

pub fn save_model(model: &GbtModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string(model).expect("model serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<GbtModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model: GbtModel =
        serde_json::from_str(&text).map_err(|e| GbtError::CorruptModel(e.to_string()))?;
    model.validate()?;
    Ok(model)
}

const INACTIVE: u32 = u32::MAX;
const GAIN_EPS: f64 = 1e-12;

/// Column-major training data with per-feature sorted row lists.
struct Columns {
    cols: Vec<Vec<f64>>,
    /// Non-missing (value, row) pairs sorted by value, then row index.
    order: Vec<Vec<(f64, u32)>>,
    missing: Vec<Vec<u32>>,
}

impl Columns {
    fn new(x: &FeatureMatrix) -> Result<Self, GbtError> {
        let cols: Vec<Vec<f64>> = (0..x.n_cols()).map(|c| x.column(c)).collect();
        let mut order = Vec::with_capacity(cols.len());
        let mut missing = Vec::with_capacity(cols.len());
        for (c, col) in cols.iter().enumerate() {
            if let Some(row) = col.iter().position(|v| v.is_infinite()) {
                return Err(GbtError::NonFiniteFeature {
                    feature: x.columns[c].name.clone(),
                    row,
                    value: col[row],
                });
            }
            let mut o: Vec<(f64, u32)> = (0..col.len() as u32)
                .filter(|&r| !col[r as usize].is_nan())
                .map(|r| (col[r as usize], r))
                .collect();
            o.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            missing.push((0..col.len() as u32).filter(|&r| col[r as usize].is_nan()).collect());
            order.push(o);
        }
        Ok(Self { cols, order, missing })
    }

    fn n_rows(&self) -> usize {
        self.cols.first().map_or(0, Vec::len)
    }

    fn row(&self, r: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend(self.cols.iter().map(|c| c[r]));
    }
}

#[derive(Clone, Copy)]
struct Split {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_left: bool,
    left: (f64, f64),
}

struct BuildNode {
    g: f64,
    h: f64,
    split: Option<Split>,
    children: Option<(usize, usize)>,
}

fn leaf_objective(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

#[derive(Clone, Copy, Default)]
struct ScanState {
    g: f64,
    h: f64,
    last: f64,
    seen: bool,
}

struct RowScan {
    slot: u32,
    g: f64,
    h: f64,
}

struct SlotScan {
    total: (f64, f64),
    parent: f64,
    best_gain: f64,
    best: Option<Split>,
    state: ScanState,
    miss: (f64, f64, bool),
}

impl SlotScan {
    /// The screen of [`SplitCandidate::evaluate`] for the common case of a
    /// node without missing values, where only one routing exists. Nodes
    /// with missing values always go to the full evaluation.
    #[inline]
    fn worth_evaluating(&self, p: &GbtParams) -> bool {
        if self.miss.2 {
            return true;
        }
        let st = &self.state;
        let (g, h) = self.total;
        let rh = h - st.h;
        if rh < p.min_child_weight {
            return false;
        }
        let (dl, dr) = (st.h + p.l2_lambda, rh + p.l2_lambda);
        let rg = g - st.g;
        let bar = 2.0 * self.best_gain + self.parent;
        st.g * st.g * dr + rg * rg * dl > bar * dl * dr * (1.0 - 1e-9)
    }
}

struct TreeBuilder<'a> {
    data: &'a Columns,
    params: &'a GbtParams,
    order: Vec<Vec<(f64, u32)>>,
}

impl<'a> TreeBuilder<'a> {
    fn build(&mut self, grad: &[f64], hess: &[f64], sampled: &[bool]) -> TreeNode {
        let p = self.params;
        let n = self.data.n_rows();
        let mut rows: Vec<RowScan> = grad
            .iter()
            .zip(hess)
            .map(|(&g, &h)| RowScan { slot: INACTIVE, g, h })
            .collect();
        // node of each row; INACTIVE once the row can no longer move
        let mut pos: Vec<u32> = (0..n).map(|i| if sampled[i] { 0 } else { INACTIVE }).collect();
        let (g0, h0) = (0..n)
            .filter(|&i| sampled[i])
            .fold((0.0, 0.0), |acc, i| (acc.0 + rows[i].g, acc.1 + rows[i].h));
        let mut nodes = vec![BuildNode {
            g: g0,
            h: h0,
            split: None,
            children: None,
        }];
        let mut frontier = vec![0usize];
        let mut active = n;
        // the shared sorted lists serve until the first compaction
        let mut compacted = false;
        let mut slot = vec![INACTIVE; n];

        for _depth in 0..p.max_depth {
            frontier.retain(|&id| nodes[id].h >= 2.0 * p.min_child_weight && nodes[id].h > 0.0);
            if frontier.is_empty() {
                break;
            }
            let mut slot_of = vec![INACTIVE; nodes.len()];
            for (s, &id) in frontier.iter().enumerate() {
                slot_of[id] = s as u32;
            }
            let mut still = 0;
            for r in 0..n {
                if pos[r] != INACTIVE {
                    slot[r] = slot_of[pos[r] as usize];
                    if slot[r] == INACTIVE {
                        pos[r] = INACTIVE;
                    } else {
                        still += 1;
                    }
                }
            }
            if still * 2 < active {
                self.compact(&pos, compacted);
                compacted = true;
                active = still;
            }

            for r in 0..n {
                rows[r].slot = if pos[r] == INACTIVE { INACTIVE } else { slot[r] };
            }
            let mut slots: Vec<SlotScan> = frontier
                .iter()
                .map(|&id| SlotScan {
                    total: (nodes[id].g, nodes[id].h),
                    parent: leaf_objective(nodes[id].g, nodes[id].h, p.l2_lambda),
                    best_gain: GAIN_EPS,
                    best: None,
                    state: ScanState::default(),
                    miss: (0.0, 0.0, false),
                })
                .collect();
            for f in 0..self.data.cols.len() {
                for sl in slots.iter_mut() {
                    sl.miss = (0.0, 0.0, false);
                    sl.state = ScanState::default();
                }
                for &r in &self.data.missing[f] {
                    let ri = &rows[r as usize];
                    if ri.slot != INACTIVE {
                        let m = &mut slots[ri.slot as usize].miss;
                        *m = (m.0 + ri.g, m.1 + ri.h, true);
                    }
                }
                let order = if compacted { &self.order[f] } else { &self.data.order[f] };
                for &(v, r) in order {
                    let ri = &rows[r as usize];
                    if ri.slot == INACTIVE {
                        continue;
                    }
                    let sl = &mut slots[ri.slot as usize];
                    let st = &sl.state;
                    if st.seen && v != st.last && st.h + sl.miss.1 >= p.min_child_weight && sl.worth_evaluating(p) {
                        let cand = SplitCandidate {
                            state: st,
                            next: v,
                            total: sl.total,
                            parent: sl.parent,
                            miss: sl.miss,
                            feature: f,
                        };
                        if let Some(c) = cand.evaluate(p, sl.best_gain) {
                            sl.best_gain = c.gain;
                            sl.best = Some(c);
                        }
                    }
                    let st = &mut sl.state;
                    st.g += ri.g;
                    st.h += ri.h;
                    st.last = v;
                    st.seen = true;
                }
            }
            let best: Vec<Option<Split>> = slots.iter().map(|sl| sl.best).collect();

            let mut next = Vec::new();
            for (s, &id) in frontier.iter().enumerate() {
                let Some(split) = best[s] else { continue };
                let (lg, lh) = split.left;
                let l = nodes.len();
                nodes.push(BuildNode {
                    g: lg,
                    h: lh,
                    split: None,
                    children: None,
                });
                nodes.push(BuildNode {
                    g: nodes[id].g - lg,
                    h: nodes[id].h - lh,
                    split: None,
                    children: None,
                });
                nodes[id].split = Some(split);
                nodes[id].children = Some((l, l + 1));
                next.push(l);
                next.push(l + 1);
            }
            // move rows to children; rows of nodes that stay leaves retire
            for r in 0..n {
                let node = pos[r];
                if node == INACTIVE {
                    continue;
                }
                let b = &nodes[node as usize];
                match (b.split, b.children) {
                    (Some(sp), Some((l, rt))) => {
                        let x = self.data.cols[sp.feature][r];
                        let left = if x.is_nan() { sp.default_left } else { x < sp.threshold };
                        pos[r] = if left { l as u32 } else { rt as u32 };
                    }
                    _ => pos[r] = INACTIVE,
                }
            }
            frontier = next;
        }
        assemble(&nodes, 0, p)
    }

    /// Drops retired rows from the sorted lists.
    fn compact(&mut self, pos: &[u32], compacted: bool) {
        if !compacted {
            self.order.resize_with(self.data.order.len(), Vec::new);
            for (o, full) in self.order.iter_mut().zip(&self.data.order) {
                o.clear();
                o.extend(full.iter().filter(|&&(_, r)| pos[r as usize] != INACTIVE));
            }
            return;
        }
        for o in self.order.iter_mut() {
            o.retain(|&(_, r)| pos[r as usize] != INACTIVE);
        }
    }
}

struct SplitCandidate<'s> {
    state: &'s ScanState,
    next: f64,
    total: (f64, f64),
    parent: f64,
    miss: (f64, f64, bool),
    feature: usize,
}

impl SplitCandidate<'_> {
    /// Best of the two missing-value routings for a threshold between the
    /// last scanned value and `next`, if it beats `floor`.
    fn evaluate(&self, p: &GbtParams, floor: f64) -> Option<Split> {
        let (g, h) = self.total;
        let st = self.state;
        let lambda = p.l2_lambda;
        let mut best: Option<(f64, bool, (f64, f64))> = None;
        let mut floor = floor;
        let options: &[bool] = if self.miss.2 { &[false, true] } else { &[false] };
        for &default_left in options {
            let (lg, lh) = if default_left {
                (st.g + self.miss.0, st.h + self.miss.1)
            } else {
                (st.g, st.h)
            };
            let (rg, rh) = (g - lg, h - lh);
            if lh < p.min_child_weight || rh < p.min_child_weight {
                continue;
            }
            // division-free screen, slightly loose; survivors get the exact test
            let (dl, dr) = (lh + lambda, rh + lambda);
            let bar = 2.0 * floor + self.parent;
            if lg * lg * dr + rg * rg * dl <= bar * dl * dr * (1.0 - 1e-9) {
                continue;
            }
            let gain = 0.5 * (leaf_objective(lg, lh, lambda) + leaf_objective(rg, rh, lambda) - self.parent);
            if gain > floor {
                floor = gain;
                best = Some((gain, default_left, (lg, lh)));
            }
        }
        let (gain, default_left, left) = best?;
        let mut threshold = 0.5 * (st.last + self.next);
        if threshold <= st.last {
            threshold = self.next;
        }
        Some(Split {
            gain,
            feature: self.feature,
            threshold,
            default_left,
            left,
        })
    }
}

fn assemble(nodes: &[BuildNode], id: usize, p: &GbtParams) -> TreeNode {
    let b = &nodes[id];
    match (b.split, b.children) {
        (Some(s), Some((l, r))) => TreeNode::Split {
            feature: s.feature,
            threshold: s.threshold,
            default_left: s.default_left,
            gain: s.gain,
            cover: b.h,
            left: Box::new(assemble(nodes, l, p)),
            right: Box::new(assemble(nodes, r, p)),
        },
        _ => TreeNode::Leaf {
            weight: -b.g / (b.h + p.l2_lambda) * p.learning_rate,
            cover: b.h,
        },
    }
}

fn check_labels(y: &[usize], k: usize) -> Result<(), GbtError> {
    match y.iter().find(|&&l| l >= k) {
        Some(&label) => Err(GbtError::InvalidLabel { label, n_classes: k }),
        None => Ok(()),
    }
}

/// Trains a model. With a validation set and `early_stopping_rounds`, the
/// ensemble is truncated to the round with the lowest validation loss.
pub fn train(
    x: &FeatureMatrix,
    y: &[usize],
    params: &GbtParams,
    val: Option<(&FeatureMatrix, &[usize])>,
) -> Result<GbtModel, GbtError> {
    params.validate()?;
    let k = params.n_classes;
    if x.n_rows() == 0 || x.n_cols() == 0 {
        return Err(GbtError::EmptyMatrix);
    }
    if x.n_rows() != y.len() {
        return Err(GbtError::DimensionMismatch {
            expected: x.n_rows(),
            got: y.len(),
        });
    }
    check_labels(y, k)?;
    if y.iter().all(|&l| l == y[0]) {
        return Err(GbtError::SingleClass);
    }
    if let Some((vx, vy)) = val {
        if vx.n_cols() != x.n_cols() || vx.n_rows() != vy.len() {
            return Err(GbtError::DimensionMismatch {
                expected: x.n_cols(),
                got: vx.n_cols(),
            });
        }
        check_labels(vy, k)?;
    }
    let data = Columns::new(x)?;
    let n = data.n_rows();

    let mut counts = vec![0usize; k];
    for &l in y {
        counts[l] += 1;
    }
    let base_score: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / n as f64).max(MIN_PRIOR).ln())
        .collect();
    let weights: Vec<f64> = match &params.class_weights {
        Some(w) => y.iter().map(|&l| w[l]).collect(),
        None => vec![1.0; n],
    };

    let mut model = GbtModel {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        params: params.clone(),
        base_score: base_score.clone(),
        feature_names: x.names(),
        trees: Vec::new(),
        history: Vec::new(),
        best_round: None,
        provenance: BTreeMap::new(),
    };

    let mut margins: Vec<Vec<f64>> = vec![base_score.clone(); n];
    let val_rows: Vec<&[f64]> = val.map(|(vx, _)| vx.rows().collect()).unwrap_or_default();
    let mut val_margins: Vec<Vec<f64>> = vec![base_score.clone(); val_rows.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut builder = TreeBuilder {
        data: &data,
        params,
        order: Vec::new(),
    };
    let (mut best_val, mut best_round, mut stale) = (f64::INFINITY, 0usize, 0usize);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut row = Vec::with_capacity(x.n_cols());

    for round in 0..params.n_rounds {
        let proba: Vec<Vec<f64>> = margins.iter().map(|m| softmax(m)).collect();
        let sampled: Vec<bool> = if params.subsample < 1.0 {
            (0..n).map(|_| rng.gen_bool(params.subsample)).collect()
        } else {
            vec![true; n]
        };
        let mut round_trees = Vec::with_capacity(k);
        for class in 0..k {
            for i in 0..n {
                let pk = proba[i][class];
                let target = if y[i] == class { 1.0 } else { 0.0 };
                grad[i] = (pk - target) * weights[i];
                hess[i] = (pk * (1.0 - pk)).max(1e-16) * weights[i];
            }
            round_trees.push(builder.build(&grad, &hess, &sampled));
        }
        for (i, m) in margins.iter_mut().enumerate() {
            data.row(i, &mut row);
            for (class, t) in round_trees.iter().enumerate() {
                m[class] += t.predict(&row);
            }
        }
        for (vm, vr) in val_margins.iter_mut().zip(&val_rows) {
            for (class, t) in round_trees.iter().enumerate() {
                vm[class] += t.predict(vr);
            }
        }
        model.trees.extend(round_trees);

        let train_loss = mlogloss(&margins.iter().map(|m| softmax(m)).collect::<Vec<_>>(), y)?;
        let val_loss = match val {
            Some((_, vy)) if !vy.is_empty() => {
                Some(mlogloss(&val_margins.iter().map(|m| softmax(m)).collect::<Vec<_>>(), vy)?)
            }
            _ => None,
        };
        model.history.push(RoundLoss {
            round: round + 1,
            train: train_loss,
            val: val_loss,
        });
        if let (Some(v), Some(patience)) = (val_loss, params.early_stopping_rounds) {
            if v < best_val {
                best_val = v;
                best_round = round + 1;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    model.trees.truncate(best_round * k);
                    model.best_round = Some(best_round);
                    break;
                }
            }
        }
    }
    Ok(model)
}
