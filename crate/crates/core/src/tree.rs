//! Binary decision trees with curve-valued leaves.
//!
//! Each tree routes observations by covariate rules; each leaf carries a
//! curve (one value per target-grid point) with the GP prior from
//! [`crate::kernel`]. Trees move through grow/prune Metropolis proposals
//! whose acceptance ratio combines the split prior, the proposal
//! probabilities, and the leaf marginal likelihood with the leaf means
//! integrated out. The rule prior equals the proposal distribution over
//! rules, so rule-selection probabilities cancel from both ratios.

use nalgebra::DVector;

use crate::data::{Column, CovMatrix};
use crate::error::{Error, Result};
use crate::kernel::{build_kernel, FactoredKernel, KernelSpec, DEFAULT_JITTER};
use crate::rngs::RngStream;
use rand::RngCore as _;

/// Split probability at a given depth: η·(1+depth)^(−β).
pub fn split_probability(eta: f64, beta: f64, depth: u32) -> f64 {
    eta * (1.0 + depth as f64).powf(-beta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitPrior {
    pub eta: f64,
    pub beta: f64,
}

impl SplitPrior {
    pub fn prob(&self, depth: u32) -> f64 {
        split_probability(self.eta, self.beta, depth)
    }

    /// log of p_split(d)·(1−p_split(d+1))² / (1−p_split(d)), the structural
    /// part of the prior ratio for growing a leaf at depth d.
    fn grow_log_prior(&self, depth: u32) -> f64 {
        let pd = self.prob(depth);
        let pd1 = self.prob(depth + 1);
        pd.ln() + 2.0 * (1.0 - pd1).ln() - (1.0 - pd).ln()
    }
}

/// A decision rule at an internal node.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRule {
    pub col: usize,
    pub split: SplitValue,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitValue {
    /// Rows with value strictly below the threshold go left.
    Threshold(f64),
    /// Rows whose level bit is set go left.
    LevelSet(u64),
}

impl DecisionRule {
    pub fn goes_left(&self, design: &CovMatrix, row: usize) -> bool {
        match (&self.split, design.cols[self.col].as_ref()) {
            (SplitValue::Threshold(thr), Column::Continuous { values, .. }) => values[row] < *thr,
            (SplitValue::LevelSet(mask), Column::Categorical { codes, .. }) => {
                (mask >> codes[row]) & 1 == 1
            }
            _ => panic!("rule kind does not match column kind"),
        }
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Internal {
        rule: DecisionRule,
        left: usize,
        right: usize,
    },
    Leaf {
        curve: Vec<f64>,
    },
    /// Tombstone left behind by a prune.
    Free,
}

#[derive(Debug, Clone)]
pub struct Node {
    parent: Option<usize>,
    depth: u32,
    kind: NodeKind,
}

#[derive(Debug, Clone)]
pub struct Tree {
    nodes: Vec<Node>,
    root: usize,
}

impl Tree {
    pub fn new_root(t_len: usize) -> Self {
        Tree {
            nodes: vec![Node {
                parent: None,
                depth: 0,
                kind: NodeKind::Leaf {
                    curve: vec![0.0; t_len],
                },
            }],
            root: 0,
        }
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, NodeKind::Leaf { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Leaf { .. }))
            .count()
    }

    fn is_leaf(&self, id: usize) -> bool {
        matches!(self.nodes[id].kind, NodeKind::Leaf { .. })
    }

    pub fn is_root_only(&self) -> bool {
        self.is_leaf(self.root)
    }

    /// Internal nodes whose children are both leaves.
    pub fn prunable(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| match n.kind {
                NodeKind::Internal { left, right, .. } => {
                    self.is_leaf(left) && self.is_leaf(right)
                }
                _ => false,
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Prunable count after hypothetically splitting `leaf`.
    fn n_prunable_after_grow(&self, leaf: usize) -> usize {
        let mut count = 1; // the newly split node
        for node in &self.nodes {
            if let NodeKind::Internal { left, right, .. } = node.kind {
                if left != leaf && right != leaf && self.is_leaf(left) && self.is_leaf(right) {
                    count += 1;
                }
            }
        }
        count
    }

    pub fn depth_of(&self, id: usize) -> u32 {
        self.nodes[id].depth
    }

    pub fn curve(&self, id: usize) -> &[f64] {
        match &self.nodes[id].kind {
            NodeKind::Leaf { curve } => curve,
            _ => panic!("node {id} is not a leaf"),
        }
    }

    fn set_curve(&mut self, id: usize, curve: Vec<f64>) {
        match &mut self.nodes[id].kind {
            NodeKind::Leaf { curve: c } => *c = curve,
            _ => panic!("node {id} is not a leaf"),
        }
    }

    /// Leaf reached by a row of `design`.
    pub fn route(&self, design: &CovMatrix, row: usize) -> usize {
        let mut id = self.root;
        loop {
            match &self.nodes[id].kind {
                NodeKind::Leaf { .. } => return id,
                NodeKind::Internal { rule, left, right } => {
                    id = if rule.goes_left(design, row) {
                        *left
                    } else {
                        *right
                    };
                }
                NodeKind::Free => panic!("routed into a freed node"),
            }
        }
    }

    /// Fitted value for a row at grid index `t`.
    pub fn evaluate(&self, design: &CovMatrix, row: usize, t: usize) -> f64 {
        self.curve(self.route(design, row))[t]
    }

    /// Depths of all leaves (for prior-recovery checks).
    pub fn leaf_depths(&self) -> Vec<u32> {
        self.leaves().iter().map(|&l| self.nodes[l].depth).collect()
    }

    fn split_leaf(&mut self, leaf: usize, rule: DecisionRule, t_len: usize) -> (usize, usize) {
        let depth = self.nodes[leaf].depth;
        let left = self.nodes.len();
        self.nodes.push(Node {
            parent: Some(leaf),
            depth: depth + 1,
            kind: NodeKind::Leaf {
                curve: vec![0.0; t_len],
            },
        });
        let right = self.nodes.len();
        self.nodes.push(Node {
            parent: Some(leaf),
            depth: depth + 1,
            kind: NodeKind::Leaf {
                curve: vec![0.0; t_len],
            },
        });
        self.nodes[leaf].kind = NodeKind::Internal { rule, left, right };
        (left, right)
    }

    fn prune_node(&mut self, id: usize, t_len: usize) {
        let (left, right) = match self.nodes[id].kind {
            NodeKind::Internal { left, right, .. } => (left, right),
            _ => panic!("pruning a non-internal node"),
        };
        self.nodes[left].kind = NodeKind::Free;
        self.nodes[right].kind = NodeKind::Free;
        self.nodes[id].kind = NodeKind::Leaf {
            curve: vec![0.0; t_len],
        };
    }
}

/// Per-grid-point sufficient statistics for one leaf's routed observations.
///
/// Observations with zero precision carry no information and are excluded.
#[derive(Debug, Clone)]
pub struct LeafSuffStats {
    pub t_len: usize,
    /// Observation count per grid point.
    pub n_t: Vec<u32>,
    /// Σω per grid point.
    pub sw: Vec<f64>,
    /// Σω·r per grid point.
    pub swr: Vec<f64>,
    /// Σω·r² over the leaf.
    pub swr2: f64,
    /// Informative observation count.
    pub n: usize,
    /// Σ log ω over informative observations.
    pub sum_log_w: f64,
}

impl LeafSuffStats {
    pub fn empty(t_len: usize) -> Self {
        Self {
            t_len,
            n_t: vec![0; t_len],
            sw: vec![0.0; t_len],
            swr: vec![0.0; t_len],
            swr2: 0.0,
            n: 0,
            sum_log_w: 0.0,
        }
    }

    pub fn add(&mut self, t: usize, r: f64, omega: f64) {
        if omega <= 0.0 {
            return;
        }
        self.n_t[t] += 1;
        self.sw[t] += omega;
        self.swr[t] += omega * r;
        self.swr2 += omega * r * r;
        self.n += 1;
        self.sum_log_w += omega.ln();
    }

    pub fn from_obs(
        obs: &[usize],
        t_idx: &[usize],
        resid: &[f64],
        omega: &[f64],
        t_len: usize,
    ) -> Self {
        let mut s = Self::empty(t_len);
        for &i in obs {
            s.add(t_idx[i], resid[i], omega[i]);
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        self.swr2.is_finite()
            && self.sum_log_w.is_finite()
            && self.sw.iter().all(|v| v.is_finite())
            && self.swr.iter().all(|v| v.is_finite())
    }
}

/// Posterior precision C = K + diag(sw) pieces shared by the marginal
/// likelihoods and the leaf-curve draw. Returns (log|C|, bᵀC⁻¹b, chol(C)).
enum PosteriorFactor {
    Smooth {
        logdet_c: f64,
        quad: f64,
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        b: DVector<f64>,
    },
    Scalar {
        precision: f64,
        b: f64,
        t_len: usize,
    },
}

fn posterior_factor(stats: &LeafSuffStats, kernel: &FactoredKernel) -> Result<PosteriorFactor> {
    match kernel {
        FactoredKernel::Smooth { k, .. } => {
            let t = stats.t_len;
            let mut c = k.clone();
            for i in 0..t {
                c[(i, i)] += stats.sw[i];
            }
            let chol = c.cholesky().ok_or(Error::SingularKernel)?;
            let logdet_c = 2.0 * (0..t).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
            let b = DVector::from_column_slice(&stats.swr);
            let solved = chol.solve(&b);
            let quad = b.dot(&solved);
            Ok(PosteriorFactor::Smooth {
                logdet_c,
                quad,
                chol,
                b,
            })
        }
        FactoredKernel::Constant { v, t_len } => {
            let precision = 1.0 / v + stats.sw.iter().sum::<f64>();
            let b = stats.swr.iter().sum::<f64>();
            Ok(PosteriorFactor::Scalar {
                precision,
                b,
                t_len: *t_len,
            })
        }
    }
}

impl PosteriorFactor {
    fn logdet_c(&self) -> f64 {
        match self {
            PosteriorFactor::Smooth { logdet_c, .. } => *logdet_c,
            PosteriorFactor::Scalar { precision, .. } => precision.ln(),
        }
    }

    fn quad(&self) -> f64 {
        match self {
            PosteriorFactor::Smooth { quad, .. } => *quad,
            PosteriorFactor::Scalar { precision, b, .. } => b * b / precision,
        }
    }
}

const LN_2PI: f64 = 1.8378770664093453;

/// Marginal log-likelihood of a leaf under homoskedastic noise σ².
///
/// `stats` must have been accumulated with ω ≡ 1/σ².
pub fn marginal_loglik_homoskedastic(
    stats: &LeafSuffStats,
    sigma2: f64,
    kernel: &FactoredKernel,
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument("sigma2 must be positive".into()));
    }
    let f = posterior_factor(stats, kernel)?;
    Ok(-0.5 * stats.n as f64 * (LN_2PI + sigma2.ln()) + 0.5 * kernel.logdet_k()
        - 0.5 * f.logdet_c()
        - 0.5 * (stats.swr2 - f.quad()))
}

/// Marginal log-likelihood of a leaf under per-observation precisions ω.
pub fn marginal_loglik_heteroskedastic(
    stats: &LeafSuffStats,
    kernel: &FactoredKernel,
) -> Result<f64> {
    let f = posterior_factor(stats, kernel)?;
    Ok(-0.5 * stats.n as f64 * LN_2PI
        + 0.5 * (stats.sum_log_w + kernel.logdet_k() - f.logdet_c() - (stats.swr2 - f.quad())))
}

/// Draws a leaf curve from N(C⁻¹b, C⁻¹); an empty leaf draws from the prior.
pub fn sample_leaf_curve(
    stats: &LeafSuffStats,
    kernel: &FactoredKernel,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    match posterior_factor(stats, kernel)? {
        PosteriorFactor::Smooth { chol, b, .. } => {
            let mean = chol.solve(&b);
            let t = mean.len();
            let z = DVector::from_fn(t, |_, _| rng.standard_normal());
            // C = LLᵀ, so mean + L⁻ᵀz has covariance C⁻¹.
            let noise = chol
                .l()
                .tr_solve_lower_triangular(&z)
                .ok_or(Error::SingularKernel)?;
            Ok((mean + noise).as_slice().to_vec())
        }
        PosteriorFactor::Scalar {
            precision,
            b,
            t_len,
            ..
        } => {
            let mean = b / precision;
            let val = mean + rng.standard_normal() / precision.sqrt();
            Ok(vec![val; t_len])
        }
    }
}

/// Working response and per-observation precisions for one backfitting sweep.
#[derive(Debug, Clone)]
pub struct WorkingData {
    pub w: Vec<f64>,
    pub omega: Vec<f64>,
    /// Homoskedastic effective variance, if the precisions are constant.
    pub sigma2: Option<f64>,
}

impl WorkingData {
    pub fn homoskedastic(w: Vec<f64>, sigma2: f64) -> Self {
        let omega = vec![1.0 / sigma2; w.len()];
        Self {
            w,
            omega,
            sigma2: Some(sigma2),
        }
    }

    pub fn heteroskedastic(w: Vec<f64>, omega: Vec<f64>) -> Self {
        Self {
            w,
            omega,
            sigma2: None,
        }
    }

    fn loglik(&self, stats: &LeafSuffStats, kernel: &FactoredKernel) -> Result<f64> {
        match self.sigma2 {
            Some(s2) => marginal_loglik_homoskedastic(stats, s2, kernel),
            None => marginal_loglik_heteroskedastic(stats, kernel),
        }
    }
}

/// Outcome of one Metropolis tree move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Grow,
    Prune,
}

#[derive(Debug, Clone, Copy)]
pub struct MoveOutcome {
    pub kind: MoveKind,
    pub accepted: bool,
}

/// Columns with at least two distinct values/levels among `obs`.
fn valid_split_columns(design: &CovMatrix, obs: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for (c, col) in design.cols.iter().enumerate() {
        let valid = match col.as_ref() {
            Column::Continuous { values, .. } => obs
                .iter()
                .any(|&i| values[i] != values[obs[0]]),
            Column::Categorical { codes, .. } => {
                obs.iter().any(|&i| codes[i] != codes[obs[0]])
            }
        };
        if valid {
            out.push(c);
        }
    }
    out
}

/// Draws a rule for `col` uniformly over valid candidates at `obs`.
fn draw_rule(design: &CovMatrix, obs: &[usize], col: usize, rng: &mut RngStream) -> DecisionRule {
    match design.cols[col].as_ref() {
        Column::Continuous { values, .. } => {
            let mut vals: Vec<f64> = obs.iter().map(|&i| values[i]).collect();
            vals.sort_by(|a, b| a.total_cmp(b));
            vals.dedup();
            // Thresholds sit on observed values v2..vk so both children are
            // non-empty at creation.
            let thr = vals[1 + rng.below(vals.len() - 1)];
            DecisionRule {
                col,
                split: SplitValue::Threshold(thr),
            }
        }
        Column::Categorical { codes, .. } => {
            let mut seen: Vec<u32> = obs.iter().map(|&i| codes[i]).collect();
            seen.sort_unstable();
            seen.dedup();
            let l = seen.len();
            let full: u64 = if l == 64 { u64::MAX } else { (1u64 << l) - 1 };
            let bits = loop {
                let b = rng.next_u64() & full;
                if b != 0 && b != full {
                    break b;
                }
            };
            let mut mask = 0u64;
            for (pos, &code) in seen.iter().enumerate() {
                if (bits >> pos) & 1 == 1 {
                    mask |= 1u64 << code;
                }
            }
            DecisionRule {
                col,
                split: SplitValue::LevelSet(mask),
            }
        }
    }
}

/// A planned grow move with its log acceptance ratio.
pub struct GrowPlan {
    pub leaf: usize,
    pub rule: DecisionRule,
    pub left_obs: Vec<usize>,
    pub right_obs: Vec<usize>,
    pub log_accept: f64,
}

/// A planned prune move with its log acceptance ratio.
pub struct PrunePlan {
    pub node: usize,
    pub merged_obs: Vec<usize>,
    pub log_accept: f64,
}

/// An ordered ensemble sharing one kernel, one split prior, and a fit cache
/// over the training rows.
#[derive(Debug, Clone)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub spec: KernelSpec,
    pub kernel: FactoredKernel,
    /// Kernel at Δ = 1, used for the shrinkage update's quadratic forms.
    pub base_kernel: FactoredKernel,
    pub split_prior: SplitPrior,
    design: CovMatrix,
    t_idx: Vec<usize>,
    fit: Vec<f64>,
    /// Per tree, per node id: routed observation indices (leaves only).
    routing: Vec<Vec<Vec<usize>>>,
    pub proposals: u64,
    pub accepts: u64,
}

impl Forest {
    pub fn new(
        spec: KernelSpec,
        split_prior: SplitPrior,
        design: CovMatrix,
        t_idx: Vec<usize>,
    ) -> Result<Self> {
        let kernel = build_kernel(&spec, DEFAULT_JITTER)?;
        let base_kernel = build_kernel(&spec.with_delta(1.0), DEFAULT_JITTER)?;
        let n = t_idx.len();
        let t_len = kernel.t_len();
        let n_trees = spec.n_trees;
        let trees: Vec<Tree> = (0..n_trees).map(|_| Tree::new_root(t_len)).collect();
        let routing = (0..n_trees)
            .map(|_| vec![(0..n).collect::<Vec<usize>>()])
            .collect();
        Ok(Self {
            trees,
            spec,
            kernel,
            base_kernel,
            split_prior,
            design,
            t_idx,
            fit: vec![0.0; n],
            routing,
            proposals: 0,
            accepts: 0,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.t_idx.len()
    }

    pub fn t_len(&self) -> usize {
        self.kernel.t_len()
    }

    pub fn design(&self) -> &CovMatrix {
        &self.design
    }

    /// Cached per-observation forest fit (sum of leaf curves).
    pub fn fit(&self) -> &[f64] {
        &self.fit
    }

    /// Rebuilds the fit from scratch; the cache must agree within 1e-10.
    pub fn recompute_fit(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_obs()];
        for (j, tree) in self.trees.iter().enumerate() {
            for (node, obs) in self.routing[j].iter().enumerate() {
                if obs.is_empty() {
                    continue;
                }
                if !tree.is_leaf(node) {
                    continue;
                }
                let curve = tree.curve(node);
                for &i in obs {
                    out[i] += curve[self.t_idx[i]];
                }
            }
        }
        out
    }

    pub fn fit_cache_error(&self) -> f64 {
        self.recompute_fit()
            .iter()
            .zip(&self.fit)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Tree j's contribution to each observation's fit.
    pub fn tree_contribution(&self, j: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.n_obs()];
        let tree = &self.trees[j];
        for (node, obs) in self.routing[j].iter().enumerate() {
            if obs.is_empty() || !tree.is_leaf(node) {
                continue;
            }
            let curve = tree.curve(node);
            for &i in obs {
                g[i] = curve[self.t_idx[i]];
            }
        }
        g
    }

    /// Partial residuals for tree j: working response minus every other
    /// tree's contribution, O(n) through the fit cache.
    pub fn partial_residuals(&self, working: &[f64], j: usize) -> Vec<f64> {
        let g = self.tree_contribution(j);
        working
            .iter()
            .zip(&self.fit)
            .zip(&g)
            .map(|((w, f), gj)| w - (f - gj))
            .collect()
    }

    /// Updates the shrinkage and rebuilds the cached kernel.
    pub fn set_delta(&mut self, delta: f64) -> Result<()> {
        self.spec.delta = delta;
        self.kernel = build_kernel(&self.spec, DEFAULT_JITTER)?;
        Ok(())
    }

    pub fn n_leaves_total(&self) -> usize {
        self.trees.iter().map(|t| t.n_leaves()).sum()
    }

    /// Σ over leaves of mᵀK₀m in the Δ=1 kernel precision.
    pub fn ssq_base(&self) -> f64 {
        let mut ssq = 0.0;
        for tree in &self.trees {
            for leaf in tree.leaves() {
                ssq += self.base_kernel.quad_form(tree.curve(leaf));
            }
        }
        ssq
    }

    fn stats_for(&self, obs: &[usize], resid: &[f64], omega: &[f64]) -> LeafSuffStats {
        LeafSuffStats::from_obs(obs, &self.t_idx, resid, omega, self.t_len())
    }

    /// Plans a grow move for tree j; `None` when the drawn leaf admits no
    /// valid split (which counts as a rejected proposal).
    pub fn plan_grow(
        &self,
        j: usize,
        resid: &[f64],
        work: &WorkingData,
        rng: &mut RngStream,
    ) -> Result<Option<GrowPlan>> {
        let tree = &self.trees[j];
        let leaves = tree.leaves();
        let leaf = leaves[rng.below(leaves.len())];
        let obs = &self.routing[j][leaf];
        if obs.is_empty() {
            return Ok(None);
        }
        let cols = valid_split_columns(&self.design, obs);
        if cols.is_empty() {
            return Ok(None);
        }
        let col = cols[rng.below(cols.len())];
        let rule = draw_rule(&self.design, obs, col, rng);

        let mut left_obs = Vec::with_capacity(obs.len());
        let mut right_obs = Vec::with_capacity(obs.len());
        for &i in obs {
            if rule.goes_left(&self.design, i) {
                left_obs.push(i);
            } else {
                right_obs.push(i);
            }
        }

        let ll_parent = work.loglik(&self.stats_for(obs, resid, &work.omega), &self.kernel)?;
        let ll_left = work.loglik(&self.stats_for(&left_obs, resid, &work.omega), &self.kernel)?;
        let ll_right =
            work.loglik(&self.stats_for(&right_obs, resid, &work.omega), &self.kernel)?;

        let depth = tree.depth_of(leaf);
        let log_prior = self.split_prior.grow_log_prior(depth);
        let p_grow: f64 = if tree.is_root_only() { 1.0 } else { 0.5 };
        // The grown tree always admits both moves.
        let p_prune_after = 0.5f64;
        let n_prunable_after = tree.n_prunable_after_grow(leaf);
        let log_prop = p_prune_after.ln() - (n_prunable_after as f64).ln() - p_grow.ln()
            + (leaves.len() as f64).ln();

        Ok(Some(GrowPlan {
            leaf,
            rule,
            left_obs,
            right_obs,
            log_accept: log_prior + log_prop + ll_left + ll_right - ll_parent,
        }))
    }

    /// Plans a prune move for tree j; `None` for a root-only tree.
    pub fn plan_prune(
        &self,
        j: usize,
        resid: &[f64],
        work: &WorkingData,
        rng: &mut RngStream,
    ) -> Result<Option<PrunePlan>> {
        let tree = &self.trees[j];
        let prunable = tree.prunable();
        if prunable.is_empty() {
            return Ok(None);
        }
        let node = prunable[rng.below(prunable.len())];
        let (left, right) = match tree.nodes[node].kind {
            NodeKind::Internal { left, right, .. } => (left, right),
            _ => unreachable!(),
        };
        let mut merged: Vec<usize> = self.routing[j][left].clone();
        merged.extend_from_slice(&self.routing[j][right]);
        merged.sort_unstable();

        let ll_left =
            work.loglik(&self.stats_for(&self.routing[j][left], resid, &work.omega), &self.kernel)?;
        let ll_right = work.loglik(
            &self.stats_for(&self.routing[j][right], resid, &work.omega),
            &self.kernel,
        )?;
        let ll_merged = work.loglik(&self.stats_for(&merged, resid, &work.omega), &self.kernel)?;

        let depth = tree.depth_of(node);
        let log_prior = self.split_prior.grow_log_prior(depth);
        // After the prune the tree may be root-only, making grow certain.
        let n_leaves_after = tree.n_leaves() - 1;
        let p_grow_after = if n_leaves_after == 1 { 1.0f64 } else { 0.5 };
        let p_prune = 0.5f64;
        let log_prop = p_grow_after.ln() - (n_leaves_after as f64).ln() - p_prune.ln()
            + (prunable.len() as f64).ln();

        Ok(Some(PrunePlan {
            node,
            merged_obs: merged,
            log_accept: -log_prior + log_prop + ll_merged - ll_left - ll_right,
        }))
    }

    fn apply_grow(&mut self, j: usize, plan: GrowPlan) {
        let t_len = self.t_len();
        let (left, right) = self.trees[j].split_leaf(plan.leaf, plan.rule, t_len);
        let routing = &mut self.routing[j];
        routing[plan.leaf] = Vec::new();
        while routing.len() < right + 1 {
            routing.push(Vec::new());
        }
        routing[left] = plan.left_obs;
        routing[right] = plan.right_obs;
    }

    fn apply_prune(&mut self, j: usize, plan: PrunePlan) {
        let t_len = self.t_len();
        let (left, right) = match self.trees[j].nodes[plan.node].kind {
            NodeKind::Internal { left, right, .. } => (left, right),
            _ => unreachable!(),
        };
        self.trees[j].prune_node(plan.node, t_len);
        self.routing[j][left] = Vec::new();
        self.routing[j][right] = Vec::new();
        self.routing[j][plan.node] = plan.merged_obs;
    }

    /// One Metropolis move on tree j's structure against the given partial
    /// residuals. Grow and prune are proposed with probability ½ each when
    /// both are available; a root-only tree always proposes grow.
    pub fn propose_move(
        &mut self,
        j: usize,
        resid: &[f64],
        work: &WorkingData,
        rng: &mut RngStream,
    ) -> Result<MoveOutcome> {
        let grow = self.trees[j].is_root_only() || rng.uniform() < 0.5;
        self.proposals += 1;
        if grow {
            match self.plan_grow(j, resid, work, rng)? {
                Some(plan) if rng.uniform().ln() < plan.log_accept => {
                    self.apply_grow(j, plan);
                    self.accepts += 1;
                    Ok(MoveOutcome {
                        kind: MoveKind::Grow,
                        accepted: true,
                    })
                }
                _ => Ok(MoveOutcome {
                    kind: MoveKind::Grow,
                    accepted: false,
                }),
            }
        } else {
            match self.plan_prune(j, resid, work, rng)? {
                Some(plan) if rng.uniform().ln() < plan.log_accept => {
                    self.apply_prune(j, plan);
                    self.accepts += 1;
                    Ok(MoveOutcome {
                        kind: MoveKind::Prune,
                        accepted: true,
                    })
                }
                _ => Ok(MoveOutcome {
                    kind: MoveKind::Prune,
                    accepted: false,
                }),
            }
        }
    }

    /// Redraws every leaf curve of tree j from its full conditional and
    /// refreshes the fit cache. `g_old` is the tree's previous contribution.
    pub fn redraw_leaves(
        &mut self,
        j: usize,
        resid: &[f64],
        work: &WorkingData,
        g_old: &[f64],
        rng: &mut RngStream,
    ) -> Result<()> {
        let leaves = self.trees[j].leaves();
        for leaf in leaves {
            let stats = self.stats_for(&self.routing[j][leaf], resid, &work.omega);
            let curve = sample_leaf_curve(&stats, &self.kernel, rng)?;
            self.trees[j].set_curve(leaf, curve);
        }
        let g_new = self.tree_contribution(j);
        for i in 0..self.fit.len() {
            self.fit[i] += g_new[i] - g_old[i];
        }
        Ok(())
    }

    /// Full backfitting pass for tree j: partial residuals, one structural
    /// move, then leaf redraws.
    pub fn update_tree(
        &mut self,
        j: usize,
        work: &WorkingData,
        rng: &mut RngStream,
    ) -> Result<MoveOutcome> {
        let g_old = self.tree_contribution(j);
        let resid: Vec<f64> = work
            .w
            .iter()
            .zip(&self.fit)
            .zip(&g_old)
            .map(|((w, f), g)| w - (f - g))
            .collect();
        let outcome = self.propose_move(j, &resid, work, rng)?;
        self.redraw_leaves(j, &resid, work, &g_old, rng)?;
        Ok(outcome)
    }

    /// Evaluates the ensemble on arbitrary rows of a compatible design.
    pub fn predict(&self, design: &CovMatrix, t_idx: &[usize]) -> Vec<f64> {
        evaluate_trees(&self.trees, design, t_idx)
    }
}

#[cfg(test)]
impl Tree {
    pub fn set_curve_for_test(&mut self, id: usize, curve: Vec<f64>) {
        self.set_curve(id, curve);
    }
}

#[cfg(test)]
impl Forest {
    pub fn refresh_fit_for_test(&mut self) {
        self.fit = self.recompute_fit();
    }
}

/// Sum-of-trees evaluation on arbitrary data.
pub fn evaluate_trees(trees: &[Tree], design: &CovMatrix, t_idx: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; t_idx.len()];
    for tree in trees {
        for (row, &t) in t_idx.iter().enumerate() {
            out[row] += tree.evaluate(design, row, t);
        }
    }
    out
}

/// Simulates a tree from the split prior: each node at depth d splits with
/// probability η(1+d)^(−β) when a valid rule exists, rules drawn exactly as
/// the grow proposal draws them, leaf curves from the kernel prior.
pub fn simulate_tree_from_prior(
    design: &CovMatrix,
    obs: Vec<usize>,
    t_len: usize,
    split_prior: SplitPrior,
    kernel: Option<&FactoredKernel>,
    rng: &mut RngStream,
) -> Tree {
    let mut tree = Tree::new_root(t_len);
    let mut stack: Vec<(usize, Vec<usize>)> = vec![(0, obs)];
    while let Some((node, obs)) = stack.pop() {
        let depth = tree.depth_of(node);
        let split = !obs.is_empty() && rng.uniform() < split_prior.prob(depth);
        if split {
            let cols = valid_split_columns(design, &obs);
            if !cols.is_empty() {
                let col = cols[rng.below(cols.len())];
                let rule = draw_rule(design, &obs, col, rng);
                let (mut lo, mut ro) = (Vec::new(), Vec::new());
                for &i in &obs {
                    if rule.goes_left(design, i) {
                        lo.push(i);
                    } else {
                        ro.push(i);
                    }
                }
                let (l, r) = tree.split_leaf(node, rule, t_len);
                // Deterministic order: left subtree first.
                stack.push((r, ro));
                stack.push((l, lo));
                continue;
            }
        }
        if let Some(kern) = kernel {
            let curve = kern.prior_draw(rng);
            tree.set_curve(node, curve);
        }
    }
    tree
}

// ---------------------------------------------------------------------------
// Text serialization: `node <id> parent=<p> ...` lines, ids compacted in
// pre-order with the left child written first.
// ---------------------------------------------------------------------------

fn write_curve(out: &mut String, curve: &[f64]) {
    for (i, v) in curve.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("{v}"));
    }
}

/// Serializes an ensemble with its kernel spec and split prior.
pub fn ensemble_to_text(trees: &[Tree], spec: &KernelSpec, split_prior: &SplitPrior) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "forest v1 trees={} t_len={}\n",
        trees.len(),
        spec.grid.len()
    ));
    out.push_str(&format!(
        "kernel s2={} n_trees={} delta={} lengthscale={} kappa={} grid=",
        spec.s2, spec.n_trees, spec.delta, spec.lengthscale, spec.kappa
    ));
    for (i, v) in spec.grid.values().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("{v}"));
    }
    out.push('\n');
    out.push_str(&format!(
        "split_prior eta={} beta={}\n",
        split_prior.eta, split_prior.beta
    ));
    for (ti, tree) in trees.iter().enumerate() {
        // Compact ids in pre-order.
        let mut order = Vec::new();
        let mut stack = vec![tree.root];
        while let Some(id) = stack.pop() {
            order.push(id);
            if let NodeKind::Internal { left, right, .. } = tree.nodes[id].kind {
                stack.push(right);
                stack.push(left);
            }
        }
        let compact: std::collections::HashMap<usize, usize> =
            order.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        out.push_str(&format!("tree {ti} nodes={}\n", order.len()));
        for &id in &order {
            let node = &tree.nodes[id];
            let parent = match node.parent {
                Some(p) => compact[&p].to_string(),
                None => "-".to_string(),
            };
            match &node.kind {
                NodeKind::Leaf { curve } => {
                    out.push_str(&format!("node {} parent={parent} leaf curve=", compact[&id]));
                    write_curve(&mut out, curve);
                    out.push('\n');
                }
                NodeKind::Internal { rule, .. } => match &rule.split {
                    SplitValue::Threshold(thr) => {
                        out.push_str(&format!(
                            "node {} parent={parent} split col={} thr={thr}\n",
                            compact[&id], rule.col
                        ));
                    }
                    SplitValue::LevelSet(mask) => {
                        out.push_str(&format!(
                            "node {} parent={parent} split col={} set={mask}\n",
                            compact[&id], rule.col
                        ));
                    }
                },
                NodeKind::Free => unreachable!("pre-order never visits freed nodes"),
            }
        }
    }
    out
}

fn text_err(msg: impl Into<String>) -> Error {
    Error::Parse {
        path: "<ensemble text>".into(),
        message: msg.into(),
    }
}

fn kv<'a>(token: &'a str, key: &str) -> Result<&'a str> {
    token
        .strip_prefix(key)
        .and_then(|s| s.strip_prefix('='))
        .ok_or_else(|| text_err(format!("expected `{key}=...`, got `{token}`")))
}

/// Parses the output of [`ensemble_to_text`].
pub fn ensemble_from_text(text: &str) -> Result<(Vec<Tree>, KernelSpec, SplitPrior)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| text_err("empty input"))?;
    let mut head = header.split_whitespace();
    if head.next() != Some("forest") || head.next() != Some("v1") {
        return Err(text_err("bad header"));
    }
    let n_trees_decl: usize = kv(head.next().unwrap_or(""), "trees")?
        .parse()
        .map_err(|_| text_err("bad tree count"))?;
    let t_len: usize = kv(head.next().unwrap_or(""), "t_len")?
        .parse()
        .map_err(|_| text_err("bad t_len"))?;

    let kernel_line = lines.next().ok_or_else(|| text_err("missing kernel"))?;
    let mut kt = kernel_line.split_whitespace();
    if kt.next() != Some("kernel") {
        return Err(text_err("missing kernel line"));
    }
    let s2: f64 = kv(kt.next().unwrap_or(""), "s2")?.parse().map_err(|_| text_err("s2"))?;
    let n_trees: usize = kv(kt.next().unwrap_or(""), "n_trees")?
        .parse()
        .map_err(|_| text_err("n_trees"))?;
    let delta: f64 = kv(kt.next().unwrap_or(""), "delta")?
        .parse()
        .map_err(|_| text_err("delta"))?;
    let lengthscale: f64 = kv(kt.next().unwrap_or(""), "lengthscale")?
        .parse()
        .map_err(|_| text_err("lengthscale"))?;
    let kappa: f64 = kv(kt.next().unwrap_or(""), "kappa")?
        .parse()
        .map_err(|_| text_err("kappa"))?;
    let grid_vals: Vec<f64> = kv(kt.next().unwrap_or(""), "grid")?
        .split(',')
        .map(|v| v.parse().map_err(|_| text_err("grid value")))
        .collect::<Result<_>>()?;
    let spec = KernelSpec {
        grid: crate::data::TargetGrid::new(grid_vals)?,
        s2,
        n_trees,
        delta,
        lengthscale,
        kappa,
    };

    let sp_line = lines.next().ok_or_else(|| text_err("missing split prior"))?;
    let mut st = sp_line.split_whitespace();
    if st.next() != Some("split_prior") {
        return Err(text_err("missing split_prior line"));
    }
    let eta: f64 = kv(st.next().unwrap_or(""), "eta")?.parse().map_err(|_| text_err("eta"))?;
    let beta: f64 = kv(st.next().unwrap_or(""), "beta")?
        .parse()
        .map_err(|_| text_err("beta"))?;
    let split_prior = SplitPrior { eta, beta };

    let mut trees = Vec::with_capacity(n_trees_decl);
    let mut rest = lines.peekable();
    while let Some(line) = rest.next() {
        let mut tt = line.split_whitespace();
        if tt.next() != Some("tree") {
            return Err(text_err(format!("expected tree line, got `{line}`")));
        }
        let _idx = tt.next();
        let n_nodes: usize = kv(tt.next().unwrap_or(""), "nodes")?
            .parse()
            .map_err(|_| text_err("node count"))?;
        let mut nodes: Vec<Node> = Vec::with_capacity(n_nodes);
        let mut pending_children: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
        for _ in 0..n_nodes {
            let line = rest.next().ok_or_else(|| text_err("truncated tree"))?;
            let mut nt = line.split_whitespace();
            if nt.next() != Some("node") {
                return Err(text_err(format!("expected node line, got `{line}`")));
            }
            let id: usize = nt
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| text_err("node id"))?;
            if id != nodes.len() {
                return Err(text_err("node ids must be sequential"));
            }
            let parent_tok = kv(nt.next().unwrap_or(""), "parent")?;
            let parent = if parent_tok == "-" {
                None
            } else {
                Some(parent_tok.parse::<usize>().map_err(|_| text_err("parent id"))?)
            };
            let depth = parent.map_or(0, |p| nodes[p].depth + 1);
            if let Some(p) = parent {
                pending_children[p].push(id);
            }
            let kind_tok = nt.next().ok_or_else(|| text_err("node kind"))?;
            let kind = match kind_tok {
                "leaf" => {
                    let curve: Vec<f64> = kv(nt.next().unwrap_or(""), "curve")?
                        .split(',')
                        .map(|v| v.parse().map_err(|_| text_err("curve value")))
                        .collect::<Result<_>>()?;
                    if curve.len() != t_len {
                        return Err(text_err("curve length mismatch"));
                    }
                    NodeKind::Leaf { curve }
                }
                "split" => {
                    let col: usize = kv(nt.next().unwrap_or(""), "col")?
                        .parse()
                        .map_err(|_| text_err("col"))?;
                    let tok = nt.next().unwrap_or("");
                    let split = if let Ok(thr) = kv(tok, "thr") {
                        SplitValue::Threshold(thr.parse().map_err(|_| text_err("thr"))?)
                    } else {
                        let mask = kv(tok, "set")?;
                        SplitValue::LevelSet(mask.parse().map_err(|_| text_err("set"))?)
                    };
                    // Children filled in below.
                    NodeKind::Internal {
                        rule: DecisionRule { col, split },
                        left: usize::MAX,
                        right: usize::MAX,
                    }
                }
                other => return Err(text_err(format!("unknown node kind `{other}`"))),
            };
            nodes.push(Node {
                parent,
                depth,
                kind,
            });
        }
        for (p, children) in pending_children.iter().enumerate() {
            if children.is_empty() {
                continue;
            }
            if children.len() != 2 {
                return Err(text_err("internal node must have exactly two children"));
            }
            if let NodeKind::Internal { left, right, .. } = &mut nodes[p].kind {
                *left = children[0];
                *right = children[1];
            } else {
                return Err(text_err("leaf node listed with children"));
            }
        }
        for node in &nodes {
            if let NodeKind::Internal { left, right, .. } = node.kind {
                if left == usize::MAX || right == usize::MAX {
                    return Err(text_err("internal node missing children"));
                }
            }
        }
        trees.push(Tree { nodes, root: 0 });
    }
    if trees.len() != n_trees_decl {
        return Err(text_err("tree count mismatch"));
    }
    Ok((trees, spec, split_prior))
}

#[cfg(test)]
mod tests;
