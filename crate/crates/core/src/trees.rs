//! Regression trees grown against per-sample gradients and hessians, and the
//! additive ensembles built from them.
//!
//! A tree is grown by exact greedy split search on the second-order objective:
//! a split of a node into children with gradient/hessian sums (GL,HL), (GR,HR)
//! scores
//!
//! ```text
//! gain = 1/2 [ GL^2/(HL+lambda) + GR^2/(HR+lambda) - G^2/(H+lambda) ] - gamma
//! ```
//!
//! and is accepted only with strictly positive gain and both child hessian
//! sums at least `min_child_weight`. Candidate thresholds are midpoints
//! between consecutive distinct feature values; rows route left when
//! `x[feature] < threshold`. Leaf weights minimize the per-leaf penalized
//! objective: `w* = -sum(G) / (sum(H) + lambda)`.
//!
//! `lambda` is not part of the displayed complexity penalty of the reference
//! construction (`gamma` per leaf); it is kept because `gamma` alone cannot
//! regularize leaf magnitudes, and setting `lambda = 0` recovers the plain
//! objective exactly.
//!
//! Split search parallelizes across features; per-feature scans accumulate in
//! a fixed order and the cross-feature winner is chosen under a total order
//! (gain desc, feature asc, threshold asc), so grown trees are bit-identical
//! regardless of thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::losses::LossKind;
use crate::{Error, Result};

/// Cross-validated early stopping configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvParams {
    /// Number of folds.
    pub folds: usize,
    /// Stop once the mean held-out loss has not improved for this many rounds.
    pub patience: usize,
}

impl Default for CvParams {
    fn default() -> Self {
        Self {
            folds: 10,
            patience: 20,
        }
    }
}

/// Boosting hyperparameters.
///
/// `n_rounds` is the round budget; with `cv` set it acts as an upper bound
/// and the used round count is chosen by cross-validated early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoostParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    /// Per-leaf complexity penalty (minimum loss reduction for a split).
    pub gamma: f64,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    pub max_depth: usize,
    /// Minimum hessian sum allowed in a child.
    pub min_child_weight: f64,
    /// Row sampling rate per tree, without replacement.
    pub subsample: f64,
    /// Column sampling rate per tree.
    pub colsample: f64,
    pub seed: u64,
    pub cv: Option<CvParams>,
}

impl BoostParams {
    /// First-stage defaults (main-effect fit): depth 6, eta 0.1, gamma 4,
    /// colsample 0.7, subsample 0.6, min_child_weight 2.
    pub fn stage1_defaults() -> Self {
        Self {
            n_rounds: 300,
            learning_rate: 0.1,
            gamma: 4.0,
            lambda: 1.0,
            max_depth: 6,
            min_child_weight: 2.0,
            subsample: 0.6,
            colsample: 0.7,
            seed: 0,
            cv: Some(CvParams::default()),
        }
    }

    /// Second-stage defaults (effect fit): eta 0.01, depth 4, gamma 8,
    /// min_child_weight 12, colsample 0.7, subsample 0.6.
    pub fn stage2_defaults() -> Self {
        Self {
            n_rounds: 1000,
            learning_rate: 0.01,
            gamma: 8.0,
            lambda: 1.0,
            max_depth: 4,
            min_child_weight: 12.0,
            subsample: 0.6,
            colsample: 0.7,
            seed: 0,
            cv: Some(CvParams::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParam(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!(
                "learning_rate must lie in (0,1], got {}",
                self.learning_rate
            ));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.max_depth == 0 {
            return bad("max_depth must be >= 1".into());
        }
        if !(self.min_child_weight >= 0.0) {
            return bad(format!(
                "min_child_weight must be >= 0, got {}",
                self.min_child_weight
            ));
        }
        for (name, v) in [("subsample", self.subsample), ("colsample", self.colsample)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must lie in (0,1], got {v}"));
            }
        }
        if let Some(cv) = &self.cv {
            if cv.folds < 2 {
                return bad("cv folds must be >= 2".into());
            }
            if cv.patience == 0 {
                return bad("cv patience must be >= 1".into());
            }
        }
        Ok(())
    }
}

/// Tree node; children are stored by index into the tree's node vector and
/// always come after their parent.
///
/// Serialized as arrays: a split is `[feature, threshold, left, right, gain]`
/// and a leaf is `[weight]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NodeRepr", from = "NodeRepr")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        gain: f64,
    },
    Leaf {
        weight: f64,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NodeRepr {
    Split(usize, f64, usize, usize, f64),
    Leaf([f64; 1]),
}

impl From<Node> for NodeRepr {
    fn from(n: Node) -> Self {
        match n {
            Node::Split {
                feature,
                threshold,
                left,
                right,
                gain,
            } => NodeRepr::Split(feature, threshold, left, right, gain),
            Node::Leaf { weight } => NodeRepr::Leaf([weight]),
        }
    }
}

impl From<NodeRepr> for Node {
    fn from(r: NodeRepr) -> Self {
        match r {
            NodeRepr::Split(feature, threshold, left, right, gain) => Node::Split {
                feature,
                threshold,
                left,
                right,
                gain,
            },
            NodeRepr::Leaf([weight]) => Node::Leaf { weight },
        }
    }
}

/// Axis-aligned binary regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    /// Single-leaf tree.
    pub fn leaf(weight: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { weight }],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], id: usize) -> usize {
            match &nodes[id] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Largest feature index referenced by any split.
    pub fn max_feature_index(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }

    /// Check structural soundness of a deserialized tree (children in range
    /// and strictly after their parent, so traversal terminates).
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::ModelFormat("tree has no nodes".into()));
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if let Node::Split {
                left,
                right,
                threshold,
                ..
            } = node
            {
                if *left <= id || *right <= id || *left >= self.nodes.len()
                    || *right >= self.nodes.len()
                {
                    return Err(Error::ModelFormat(format!(
                        "node {id}: children {left}/{right} out of order"
                    )));
                }
                if !threshold.is_finite() {
                    return Err(Error::ModelFormat(format!(
                        "node {id}: non-finite threshold"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn predict_unchecked(&self, x_row: &[f64]) -> f64 {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { weight } => return *weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    id = if x_row[*feature] < *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }
}

/// Leaf weight at `q(x_row)`.
pub fn predict_tree(tree: &RegressionTree, x_row: &[f64]) -> Result<f64> {
    if let Some(max) = tree.max_feature_index() {
        if max >= x_row.len() {
            return Err(Error::DimensionMismatch(format!(
                "tree references feature {max} but the row has {} entries",
                x_row.len()
            )));
        }
    }
    Ok(tree.predict_unchecked(x_row))
}

/// `base + learning_rate * sum_k tree_k(x_row)`.
pub fn predict_ensemble(
    trees: &[RegressionTree],
    learning_rate: f64,
    base: f64,
    x_row: &[f64],
) -> Result<f64> {
    let mut sum = 0.0;
    for tree in trees {
        sum += predict_tree(tree, x_row)?;
    }
    Ok(base + learning_rate * sum)
}

/// A fitted additive ensemble: shrinkage is applied at prediction time, so
/// stored leaf weights are the raw per-tree minimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub trees: Vec<RegressionTree>,
    pub learning_rate: f64,
    pub base: f64,
    pub n_features: usize,
    /// Identifier of the loss this ensemble was fit under.
    pub loss: LossKind,
}

impl Ensemble {
    pub fn empty(n_features: usize, loss: LossKind) -> Self {
        Self {
            trees: Vec::new(),
            learning_rate: 1.0,
            base: 0.0,
            n_features,
            loss,
        }
    }

    pub fn n_rounds(&self) -> usize {
        self.trees.len()
    }

    pub fn predict(&self, x_row: &[f64]) -> Result<f64> {
        if x_row.len() != self.n_features {
            return Err(Error::DimensionMismatch(format!(
                "row has {} covariates, model expects {}",
                x_row.len(),
                self.n_features
            )));
        }
        Ok(self.predict_unchecked(x_row))
    }

    #[inline]
    pub(crate) fn predict_unchecked(&self, x_row: &[f64]) -> f64 {
        let mut sum = 0.0;
        for tree in &self.trees {
            sum += tree.predict_unchecked(x_row);
        }
        self.base + self.learning_rate * sum
    }

    pub fn validate(&self) -> Result<()> {
        for tree in &self.trees {
            tree.validate()?;
            if let Some(max) = tree.max_feature_index() {
                if max >= self.n_features {
                    return Err(Error::ModelFormat(format!(
                        "tree references feature {max}, ensemble has {}",
                        self.n_features
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Growing
// ---------------------------------------------------------------------------

/// Row indices pre-sorted by each feature's value (ties by row index), built
/// once per training matrix and shared across all trees of a fit.
pub(crate) struct FeatureCache {
    sorted: Vec<Vec<u32>>,
}

impl FeatureCache {
    pub(crate) fn build(x: &Matrix) -> Self {
        let sorted = (0..x.n_cols())
            .into_par_iter()
            .map(|f| {
                let mut idx: Vec<u32> = (0..x.n_rows() as u32).collect();
                idx.sort_unstable_by(|&a, &b| {
                    x.get(a as usize, f)
                        .partial_cmp(&x.get(b as usize, f))
                        .expect("finite covariates")
                        .then(a.cmp(&b))
                });
                idx
            })
            .collect();
        Self { sorted }
    }
}

#[derive(Clone, Copy)]
struct FrontierNode {
    node_id: usize,
    g_sum: f64,
    h_sum: f64,
    n_rows: usize,
}

#[derive(Clone, Copy)]
struct SplitCand {
    feature: usize,
    threshold: f64,
    gain: f64,
    g_left: f64,
    h_left: f64,
    n_left: usize,
}

/// Is `a` strictly preferable to `b`? Ties in gain break toward the lower
/// feature index, then the lower threshold.
fn cand_better(a: &SplitCand, b: &SplitCand) -> bool {
    if a.gain != b.gain {
        return a.gain > b.gain;
    }
    if a.feature != b.feature {
        return a.feature < b.feature;
    }
    a.threshold < b.threshold
}

#[allow(clippy::too_many_arguments)]
fn split_gain(
    g_left: f64,
    h_left: f64,
    g_right: f64,
    h_right: f64,
    g_parent: f64,
    h_parent: f64,
    lambda: f64,
    gamma: f64,
) -> Option<f64> {
    let (dl, dr, dp) = (h_left + lambda, h_right + lambda, h_parent + lambda);
    if dl <= 0.0 || dr <= 0.0 || dp <= 0.0 {
        return None;
    }
    Some(0.5 * (g_left * g_left / dl + g_right * g_right / dr - g_parent * g_parent / dp) - gamma)
}

fn leaf_weight(g_sum: f64, h_sum: f64, lambda: f64) -> f64 {
    let denom = h_sum + lambda;
    if denom > 0.0 {
        -g_sum / denom
    } else {
        0.0 // no curvature in this leaf; contribute nothing
    }
}

/// Grow a single tree from per-sample gradients and hessians.
///
/// `g`, `h`, and `x` are row-aligned; all hessians must be nonnegative.
/// Subsampling (rows then columns, in that order) draws from `rng`.
pub fn grow_tree<R: Rng>(
    g: &[f64],
    h: &[f64],
    x: &Matrix,
    params: &BoostParams,
    rng: &mut R,
) -> Result<RegressionTree> {
    params.validate()?;
    if g.is_empty() {
        return Err(Error::InvalidData("empty input".into()));
    }
    if g.len() != h.len() || g.len() != x.n_rows() {
        return Err(Error::DimensionMismatch(format!(
            "g has {} entries, h has {}, x has {} rows",
            g.len(),
            h.len(),
            x.n_rows()
        )));
    }
    for (i, &hi) in h.iter().enumerate() {
        if !(hi >= 0.0) || !g[i].is_finite() || !hi.is_finite() {
            return Err(Error::InvalidData(format!(
                "row {i}: hessian must be finite and >= 0 (g={}, h={})",
                g[i], hi
            )));
        }
    }
    let cache = FeatureCache::build(x);
    let rows: Vec<usize> = (0..x.n_rows()).collect();
    grow_tree_on_rows(g, h, x, &cache, &rows, params, rng)
}

/// Grow a tree restricted to `rows` (sorted ascending), reusing a prebuilt
/// sort cache. `g`/`h` are full-length arrays indexed by row.
pub(crate) fn grow_tree_on_rows<R: Rng>(
    g: &[f64],
    h: &[f64],
    x: &Matrix,
    cache: &FeatureCache,
    rows: &[usize],
    params: &BoostParams,
    rng: &mut R,
) -> Result<RegressionTree> {
    if rows.is_empty() {
        return Err(Error::InvalidData("empty input".into()));
    }

    // Row subsample, then column subsample; both sorted for scan order.
    let sampled: Vec<usize> = if params.subsample < 1.0 {
        let k = ((rows.len() as f64 * params.subsample).round() as usize).max(1);
        let mut s: Vec<usize> = rand::seq::index::sample(rng, rows.len(), k.min(rows.len()))
            .iter()
            .map(|i| rows[i])
            .collect();
        s.sort_unstable();
        s
    } else {
        rows.to_vec()
    };
    let n_feat = x.n_cols();
    let features: Vec<usize> = if params.colsample < 1.0 {
        let k = ((n_feat as f64 * params.colsample).round() as usize).max(1);
        let mut f: Vec<usize> = rand::seq::index::sample(rng, n_feat, k.min(n_feat))
            .iter()
            .collect();
        f.sort_unstable();
        f
    } else {
        (0..n_feat).collect()
    };

    let mut node_of_row: Vec<i32> = vec![-1; x.n_rows()];
    let (mut g_root, mut h_root) = (0.0, 0.0);
    for &r in &sampled {
        node_of_row[r] = 0;
        g_root += g[r];
        h_root += h[r];
    }

    let mut nodes = vec![Node::Leaf { weight: 0.0 }];
    let mut frontier = vec![FrontierNode {
        node_id: 0,
        g_sum: g_root,
        h_sum: h_root,
        n_rows: sampled.len(),
    }];

    for _depth in 0..params.max_depth {
        if frontier.is_empty() {
            break;
        }
        let mut slot_of_node = vec![-1i32; nodes.len()];
        for (slot, fr) in frontier.iter().enumerate() {
            slot_of_node[fr.node_id] = slot as i32;
        }

        // Best candidate per frontier node, per feature; scans are serial
        // within a feature and merged in ascending feature order.
        let per_feature: Vec<Vec<Option<SplitCand>>> = features
            .par_iter()
            .map(|&f| {
                scan_feature(
                    f,
                    g,
                    h,
                    x,
                    &cache.sorted[f],
                    &node_of_row,
                    &slot_of_node,
                    &frontier,
                    params,
                )
            })
            .collect();
        let mut best: Vec<Option<SplitCand>> = vec![None; frontier.len()];
        for cands in &per_feature {
            for (slot, cand) in cands.iter().enumerate() {
                if let Some(c) = cand {
                    match &best[slot] {
                        Some(b) if !cand_better(c, b) => {}
                        _ => best[slot] = Some(*c),
                    }
                }
            }
        }

        let mut next = Vec::new();
        let mut any_split = false;
        for (slot, fr) in frontier.iter().enumerate() {
            match &best[slot] {
                Some(c) => {
                    any_split = true;
                    let left = nodes.len();
                    let right = left + 1;
                    nodes.push(Node::Leaf { weight: 0.0 });
                    nodes.push(Node::Leaf { weight: 0.0 });
                    nodes[fr.node_id] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right,
                        gain: c.gain,
                    };
                    next.push(FrontierNode {
                        node_id: left,
                        g_sum: c.g_left,
                        h_sum: c.h_left,
                        n_rows: c.n_left,
                    });
                    next.push(FrontierNode {
                        node_id: right,
                        g_sum: fr.g_sum - c.g_left,
                        h_sum: fr.h_sum - c.h_left,
                        n_rows: fr.n_rows - c.n_left,
                    });
                }
                None => {
                    nodes[fr.node_id] = Node::Leaf {
                        weight: leaf_weight(fr.g_sum, fr.h_sum, params.lambda),
                    };
                }
            }
        }
        if any_split {
            for &r in &sampled {
                let nid = node_of_row[r] as usize;
                if let Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } = nodes[nid]
                {
                    node_of_row[r] = if x.get(r, feature) < threshold {
                        left as i32
                    } else {
                        right as i32
                    };
                }
            }
        }
        frontier = next;
    }

    for fr in &frontier {
        nodes[fr.node_id] = Node::Leaf {
            weight: leaf_weight(fr.g_sum, fr.h_sum, params.lambda),
        };
    }

    Ok(RegressionTree { nodes })
}

#[derive(Clone, Copy, Default)]
struct ScanState {
    g_acc: f64,
    h_acc: f64,
    n_acc: usize,
    prev: f64,
}

#[allow(clippy::too_many_arguments)]
fn scan_feature(
    feature: usize,
    g: &[f64],
    h: &[f64],
    x: &Matrix,
    sorted: &[u32],
    node_of_row: &[i32],
    slot_of_node: &[i32],
    frontier: &[FrontierNode],
    params: &BoostParams,
) -> Vec<Option<SplitCand>> {
    let mut state = vec![ScanState::default(); frontier.len()];
    let mut best: Vec<Option<SplitCand>> = vec![None; frontier.len()];
    for &r32 in sorted {
        let r = r32 as usize;
        let nid = node_of_row[r];
        if nid < 0 {
            continue;
        }
        let slot = slot_of_node[nid as usize];
        if slot < 0 {
            continue;
        }
        let slot = slot as usize;
        let v = x.get(r, feature);
        let s = &mut state[slot];
        if s.n_acc > 0 && v > s.prev {
            let threshold = 0.5 * (s.prev + v);
            // adjacent floats can collapse the midpoint onto the left value
            if threshold > s.prev {
                let fr = &frontier[slot];
                let (gl, hl) = (s.g_acc, s.h_acc);
                let (gr, hr) = (fr.g_sum - gl, fr.h_sum - hl);
                if hl >= params.min_child_weight && hr >= params.min_child_weight {
                    if let Some(gain) =
                        split_gain(gl, hl, gr, hr, fr.g_sum, fr.h_sum, params.lambda, params.gamma)
                    {
                        if gain > 0.0 {
                            let cand = SplitCand {
                                feature,
                                threshold,
                                gain,
                                g_left: gl,
                                h_left: hl,
                                n_left: s.n_acc,
                            };
                            match &best[slot] {
                                Some(b) if !cand_better(&cand, b) => {}
                                _ => best[slot] = Some(cand),
                            }
                        }
                    }
                }
            }
        }
        s.g_acc += g[r];
        s.h_acc += h[r];
        s.n_acc += 1;
        s.prev = v;
    }
    best
}
