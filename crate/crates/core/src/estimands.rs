//! Causal post-processing of posterior draws.
//!
//! Relative risk is the ratio of success probabilities under treatment and
//! control, Φ(f(z=1))/Φ(f(z=0)), drawn per unit per MCMC iteration. Number
//! needed to treat is the reciprocal risk difference, positive when
//! treatment is less effective. Subgroup discovery fits a CART tree to the
//! per-unit posterior-mean relative risk ("fit the fit") and queries the
//! posterior for each node.

use crate::data::{Column, CovMatrix, Dataset};
use crate::error::{Error, Result};
use crate::mathutil::{equal_tailed_interval, mean, phi, quantile};
use crate::sampler::{DrawMatrix, PosteriorDraws};

/// Per-draw per-unit relative risks with their counterfactual success
/// probabilities.
#[derive(Debug, Clone)]
pub struct RRDraws {
    pub rr: DrawMatrix,
    pub p0: DrawMatrix,
    pub p1: DrawMatrix,
}

impl RRDraws {
    pub fn n_draws(&self) -> usize {
        self.rr.n_draws
    }

    pub fn n_units(&self) -> usize {
        self.rr.n_units
    }

    /// Posterior-mean relative risk per unit.
    pub fn unit_means(&self) -> Vec<f64> {
        (0..self.n_units())
            .map(|i| mean(&self.rr.column(i)))
            .collect()
    }

    /// Equal-tailed credible interval per unit.
    pub fn unit_intervals(&self, level: f64) -> Vec<(f64, f64)> {
        (0..self.n_units())
            .map(|i| equal_tailed_interval(&self.rr.column(i), level))
            .collect()
    }

    pub fn unit_mean_p0(&self) -> Vec<f64> {
        (0..self.n_units())
            .map(|i| mean(&self.p0.column(i)))
            .collect()
    }

    pub fn unit_mean_p1(&self) -> Vec<f64> {
        (0..self.n_units())
            .map(|i| mean(&self.p1.column(i)))
            .collect()
    }
}

/// Elementwise Φ-ratio of the stored counterfactual fits.
pub fn rr_draws(draws: &PosteriorDraws) -> RRDraws {
    let (n_draws, n) = (draws.n_draws(), draws.n_units());
    let mut rr = DrawMatrix::zeros(n_draws, n);
    let mut p0 = DrawMatrix::zeros(n_draws, n);
    let mut p1 = DrawMatrix::zeros(n_draws, n);
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = crate::exec::map_indexed(n_draws, |b| {
        let f0 = draws.f0.row(b);
        let f1 = draws.f1.row(b);
        let mut r = vec![0.0; n];
        let mut q0 = vec![0.0; n];
        let mut q1 = vec![0.0; n];
        for i in 0..n {
            q0[i] = phi(f0[i]);
            q1[i] = phi(f1[i]);
            r[i] = q1[i] / q0[i];
        }
        (r, q0, q1)
    });
    for (b, (r, q0, q1)) in rows.into_iter().enumerate() {
        rr.set_row(b, &r);
        p0.set_row(b, &q0);
        p1.set_row(b, &q1);
    }
    RRDraws { rr, p0, p1 }
}

/// Posterior summary at one target-grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSummary {
    pub t: f64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    /// Draws excluded from the summary (infinite NNT sentinels).
    pub n_excluded: usize,
}

fn units_by_grid_point(t_idx: &[usize], t_len: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); t_len];
    for (i, &t) in t_idx.iter().enumerate() {
        groups[t].push(i);
    }
    groups
}

/// Per-grid-point posterior mean and 95% interval of the unit-averaged
/// relative risk. Grid points with no units are dropped (returned
/// separately).
pub fn rr_by_target(
    rr: &RRDraws,
    t_idx: &[usize],
    grid_values: &[f64],
) -> (Vec<TargetSummary>, Vec<usize>) {
    let groups = units_by_grid_point(t_idx, grid_values.len());
    let mut out = Vec::new();
    let mut dropped = Vec::new();
    for (t, members) in groups.iter().enumerate() {
        if members.is_empty() {
            dropped.push(t);
            continue;
        }
        let per_draw: Vec<f64> = (0..rr.n_draws())
            .map(|b| {
                let row = rr.rr.row(b);
                members.iter().map(|&i| row[i]).sum::<f64>() / members.len() as f64
            })
            .collect();
        let (lo, hi) = equal_tailed_interval(&per_draw, 0.95);
        out.push(TargetSummary {
            t: grid_values[t],
            mean: mean(&per_draw),
            lo,
            hi,
            n_excluded: 0,
        });
    }
    (out, dropped)
}

/// Number needed to treat: 1/(p₀ − p₁). Positive when treatment is less
/// effective, negative when more effective, infinite when the risks tie.
pub fn nnt(p0: f64, p1: f64) -> f64 {
    if p0 == p1 {
        f64::INFINITY
    } else {
        1.0 / (p0 - p1)
    }
}

/// Per-grid-point NNT summaries from the subgroup-mean success
/// probabilities, draw by draw. Infinite draws are excluded and counted.
pub fn nnt_by_target(
    rr: &RRDraws,
    t_idx: &[usize],
    grid_values: &[f64],
) -> Vec<TargetSummary> {
    let groups = units_by_grid_point(t_idx, grid_values.len());
    let mut out = Vec::new();
    for (t, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut finite = Vec::with_capacity(rr.n_draws());
        let mut excluded = 0usize;
        for b in 0..rr.n_draws() {
            let p0 = members.iter().map(|&i| rr.p0.get(b, i)).sum::<f64>() / members.len() as f64;
            let p1 = members.iter().map(|&i| rr.p1.get(b, i)).sum::<f64>() / members.len() as f64;
            let v = nnt(p0, p1);
            if v.is_finite() {
                finite.push(v);
            } else {
                excluded += 1;
            }
        }
        if finite.is_empty() {
            excluded = rr.n_draws();
            out.push(TargetSummary {
                t: grid_values[t],
                mean: f64::INFINITY,
                lo: f64::INFINITY,
                hi: f64::INFINITY,
                n_excluded: excluded,
            });
            continue;
        }
        let (lo, hi) = equal_tailed_interval(&finite, 0.95);
        out.push(TargetSummary {
            t: grid_values[t],
            mean: mean(&finite),
            lo,
            hi,
            n_excluded: excluded,
        });
    }
    out
}

/// Per-draw mean relative risk over a unit subset.
pub fn subgroup_posterior(rr: &RRDraws, members: &[usize]) -> Result<Vec<f64>> {
    if members.is_empty() {
        return Err(Error::EmptySelection("empty subgroup".into()));
    }
    Ok((0..rr.n_draws())
        .map(|b| {
            let row = rr.rr.row(b);
            members.iter().map(|&i| row[i]).sum::<f64>() / members.len() as f64
        })
        .collect())
}

/// Per-draw difference of subgroup-average NNTs, group A minus group B.
/// Sentinel (infinite) values propagate into the returned vector.
pub fn nnt_difference_distribution(
    rr: &RRDraws,
    group_a: &[usize],
    group_b: &[usize],
) -> Result<Vec<f64>> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::EmptySelection("empty NNT comparison group".into()));
    }
    let avg = |b: usize, members: &[usize], m: &DrawMatrix| {
        members.iter().map(|&i| m.get(b, i)).sum::<f64>() / members.len() as f64
    };
    Ok((0..rr.n_draws())
        .map(|b| {
            let nnt_a = nnt(avg(b, group_a, &rr.p0), avg(b, group_a, &rr.p1));
            let nnt_b = nnt(avg(b, group_b, &rr.p0), avg(b, group_b, &rr.p1));
            nnt_a - nnt_b
        })
        .collect())
}

/// Summary of a draw vector that may carry sentinels: finite mean/interval
/// plus the excluded count.
pub fn summarize_with_sentinels(draws: &[f64]) -> (f64, f64, f64, usize) {
    let finite: Vec<f64> = draws.iter().copied().filter(|v| v.is_finite()).collect();
    let excluded = draws.len() - finite.len();
    if finite.is_empty() {
        return (f64::INFINITY, f64::INFINITY, f64::INFINITY, excluded);
    }
    let (lo, hi) = equal_tailed_interval(&finite, 0.95);
    (mean(&finite), lo, hi, excluded)
}

/// Per-draw excess observed failures among treated units relative to their
/// expected failures under control, per 1000 treated patients.
pub fn treated_failure_excess(draws: &PosteriorDraws, d: &Dataset) -> Result<Vec<f64>> {
    let treated: Vec<usize> = (0..d.n()).filter(|&i| d.z[i] == 1).collect();
    if treated.is_empty() {
        return Err(Error::EmptySelection("no treated units".into()));
    }
    let observed_failures: f64 = treated.iter().map(|&i| (1 - d.y[i]) as f64).sum();
    let n_treated = treated.len() as f64;
    Ok((0..draws.n_draws())
        .map(|b| {
            let expected: f64 = treated
                .iter()
                .map(|&i| 1.0 - phi(draws.f0.get(b, i)))
                .sum();
            (observed_failures - expected) * 1000.0 / n_treated
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Fit-the-fit CART
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum CartRule {
    /// Members with value < threshold go left.
    Threshold(f64),
    /// Members whose level bit is set go left.
    Levels(u64),
}

#[derive(Debug, Clone)]
pub struct CartNode {
    pub members: Vec<usize>,
    pub mean_response: f64,
    /// Fraction of all observations in this node.
    pub share: f64,
    /// NNT from the node's mean posterior success probabilities.
    pub nnt: f64,
    pub depth: usize,
    pub split: Option<(usize, CartRule)>,
    pub left: Option<usize>,
    pub right: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CartTree {
    pub nodes: Vec<CartNode>,
    pub max_depth: usize,
    pub min_leaf: usize,
}

struct BestSplit {
    col: usize,
    rule: CartRule,
    left: Vec<usize>,
    right: Vec<usize>,
}

/// Centered within-node sum of squared deviations; exactly zero for a
/// constant response.
fn node_sse(resp: &[f64], members: &[usize]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let m = members.iter().map(|&i| resp[i]).sum::<f64>() / members.len() as f64;
    members.iter().map(|&i| (resp[i] - m).powi(2)).sum()
}

/// Exhaustive single-split search minimizing within-node SSE. Continuous
/// columns scan every observed threshold; categorical columns scan level
/// prefixes ordered by mean response (optimal for SSE). Candidates are
/// ranked by a fast prefix-sum estimate; the winner's reduction is then
/// recomputed with centered arithmetic, so a constant response never splits
/// on rounding noise.
fn best_split(
    resp: &[f64],
    x: &CovMatrix,
    members: &[usize],
    min_leaf: usize,
) -> Option<BestSplit> {
    let total: f64 = members.iter().map(|&i| resp[i]).sum();
    let n = members.len();
    // Resolution floor: a node whose SSE is at rounding scale is constant.
    let ss_scale: f64 = members.iter().map(|&i| resp[i] * resp[i]).sum();
    let parent_sse = node_sse(resp, members);
    if parent_sse <= ss_scale * 1e-20 {
        return None;
    }
    let mut candidate: Option<(usize, CartRule, f64)> = None;
    let mut push = |col: usize, rule: CartRule, gain: f64| {
        if candidate.as_ref().is_none_or(|c| gain > c.2) {
            candidate = Some((col, rule, gain));
        }
    };

    for (col, column) in x.cols.iter().enumerate() {
        match column.as_ref() {
            Column::Continuous { values, .. } => {
                let mut order: Vec<usize> = members.to_vec();
                order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
                let mut left_sum = 0.0;
                for k in 0..n - 1 {
                    left_sum += resp[order[k]];
                    if values[order[k]] == values[order[k + 1]] {
                        continue;
                    }
                    if k + 1 < min_leaf || n - k - 1 < min_leaf {
                        continue;
                    }
                    let k1 = (k + 1) as f64;
                    let gain = left_sum * left_sum / k1
                        + (total - left_sum).powi(2) / (n as f64 - k1)
                        - total * total / n as f64;
                    push(col, CartRule::Threshold(values[order[k + 1]]), gain);
                }
            }
            Column::Categorical { codes, .. } => {
                // Order observed levels by mean response, then scan prefixes.
                let mut level_sum: Vec<(u32, f64, usize)> = Vec::new();
                for &i in members {
                    let code = codes[i];
                    match level_sum.iter_mut().find(|(c, _, _)| *c == code) {
                        Some((_, s, cnt)) => {
                            *s += resp[i];
                            *cnt += 1;
                        }
                        None => level_sum.push((code, resp[i], 1)),
                    }
                }
                if level_sum.len() < 2 {
                    continue;
                }
                level_sum.sort_by(|a, b| (a.1 / a.2 as f64).total_cmp(&(b.1 / b.2 as f64)));
                let mut mask = 0u64;
                let mut left_sum = 0.0;
                let mut left_n = 0usize;
                for k in 0..level_sum.len() - 1 {
                    mask |= 1u64 << level_sum[k].0;
                    left_sum += level_sum[k].1;
                    left_n += level_sum[k].2;
                    if left_n < min_leaf || n - left_n < min_leaf {
                        continue;
                    }
                    let gain = left_sum * left_sum / left_n as f64
                        + (total - left_sum).powi(2) / (n - left_n) as f64
                        - total * total / n as f64;
                    push(col, CartRule::Levels(mask), gain);
                }
            }
        }
    }

    let (col, rule, _) = candidate?;
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for &i in members {
        let goes_left = match (&rule, x.cols[col].as_ref()) {
            (CartRule::Threshold(thr), Column::Continuous { values, .. }) => values[i] < *thr,
            (CartRule::Levels(mask), Column::Categorical { codes, .. }) => {
                (mask >> codes[i]) & 1 == 1
            }
            _ => unreachable!("rule kind matches column kind"),
        };
        if goes_left {
            left.push(i);
        } else {
            right.push(i);
        }
    }
    if left.len() < min_leaf || right.len() < min_leaf {
        return None;
    }
    let reduction = parent_sse - node_sse(resp, &left) - node_sse(resp, &right);
    if reduction <= 0.0 {
        return None;
    }
    Some(BestSplit {
        col,
        rule,
        left,
        right,
    })
}

/// Greedy binary recursive partitioning of per-unit posterior-mean relative
/// risk. `p0_mean`/`p1_mean` annotate each node's NNT; splits require a
/// strict SSE reduction and both children at least `min_leaf`.
pub fn fit_the_fit(
    resp: &[f64],
    x: &CovMatrix,
    p0_mean: &[f64],
    p1_mean: &[f64],
    max_depth: usize,
    min_leaf: usize,
) -> Result<CartTree> {
    let n = resp.len();
    if n < 2 * min_leaf.max(1) {
        return Err(Error::InvalidArgument(format!(
            "need at least {} units for min_leaf {min_leaf}",
            2 * min_leaf.max(1)
        )));
    }
    if x.n_rows() != n || p0_mean.len() != n || p1_mean.len() != n {
        return Err(Error::DimensionMismatch("fit-the-fit inputs".into()));
    }

    let mut tree = CartTree {
        nodes: Vec::new(),
        max_depth,
        min_leaf,
    };
    let annotate = |members: &[usize]| -> (f64, f64) {
        let m = members.len() as f64;
        let p0 = members.iter().map(|&i| p0_mean[i]).sum::<f64>() / m;
        let p1 = members.iter().map(|&i| p1_mean[i]).sum::<f64>() / m;
        let mr = members.iter().map(|&i| resp[i]).sum::<f64>() / m;
        (mr, nnt(p0, p1))
    };

    let all: Vec<usize> = (0..n).collect();
    let (mr, node_nnt) = annotate(&all);
    tree.nodes.push(CartNode {
        members: all,
        mean_response: mr,
        share: 1.0,
        nnt: node_nnt,
        depth: 0,
        split: None,
        left: None,
        right: None,
    });

    let mut frontier = vec![0usize];
    while let Some(id) = frontier.pop() {
        if tree.nodes[id].depth >= max_depth {
            continue;
        }
        let Some(split) = best_split(resp, x, &tree.nodes[id].members, min_leaf) else {
            continue;
        };
        let make_node = |members: Vec<usize>, depth: usize| -> CartNode {
            let (mr, node_nnt) = annotate(&members);
            CartNode {
                share: members.len() as f64 / n as f64,
                members,
                mean_response: mr,
                nnt: node_nnt,
                depth,
                split: None,
                left: None,
                right: None,
            }
        };
        let depth = tree.nodes[id].depth + 1;
        let left_id = tree.nodes.len();
        tree.nodes.push(make_node(split.left, depth));
        let right_id = tree.nodes.len();
        tree.nodes.push(make_node(split.right, depth));
        tree.nodes[id].split = Some((split.col, split.rule));
        tree.nodes[id].left = Some(left_id);
        tree.nodes[id].right = Some(right_id);
        frontier.push(left_id);
        frontier.push(right_id);
    }
    Ok(tree)
}

impl CartTree {
    pub fn leaf_ids(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].split.is_none())
            .collect()
    }

    pub fn sse(&self, resp: &[f64]) -> f64 {
        self.leaf_ids()
            .iter()
            .map(|&l| node_sse(resp, &self.nodes[l].members))
            .sum()
    }

    /// Leaf reached by always taking the left child.
    pub fn leftmost_leaf(&self) -> usize {
        let mut id = 0;
        while let Some(l) = self.nodes[id].left {
            id = l;
        }
        id
    }

    pub fn rightmost_leaf(&self) -> usize {
        let mut id = 0;
        while let Some(r) = self.nodes[id].right {
            id = r;
        }
        id
    }

    /// Plain-text rendering with per-node mean, share, and leaf NNT.
    pub fn render(&self, x: &CovMatrix) -> String {
        let mut out = String::new();
        self.render_node(0, "", x, &mut out);
        out
    }

    fn render_node(&self, id: usize, indent: &str, x: &CovMatrix, out: &mut String) {
        let node = &self.nodes[id];
        let label = match &node.split {
            Some((col, CartRule::Threshold(thr))) => {
                format!("{} < {thr}", x.cols[*col].name())
            }
            Some((col, CartRule::Levels(mask))) => {
                let name = x.cols[*col].name();
                match x.cols[*col].as_ref() {
                    Column::Categorical { levels, .. } => {
                        let set: Vec<&str> = levels
                            .iter()
                            .enumerate()
                            .filter(|(c, _)| (mask >> c) & 1 == 1)
                            .map(|(_, l)| l.as_str())
                            .collect();
                        format!("{name} in {{{}}}", set.join(","))
                    }
                    _ => format!("{name} in set {mask}"),
                }
            }
            None => "leaf".to_string(),
        };
        out.push_str(&format!(
            "{indent}[{label}] mean_rr={:.4} share={:.1}%",
            node.mean_response,
            node.share * 100.0
        ));
        if node.split.is_none() {
            if node.nnt.is_finite() {
                out.push_str(&format!(" nnt={:.1}", node.nnt));
            } else {
                out.push_str(" nnt=inf");
            }
        }
        out.push('\n');
        let child_indent = format!("{indent}  ");
        if let Some(l) = self.nodes[id].left {
            self.render_node(l, &child_indent, x, out);
        }
        if let Some(r) = self.nodes[id].right {
            self.render_node(r, &child_indent, x, out);
        }
    }
}

// ---------------------------------------------------------------------------
// Targeted-selection diagnostic
// ---------------------------------------------------------------------------

/// McFadden pseudo-R² of a logistic regression of the outcome on an
/// intercept plus the propensity estimate, fit by Newton-Raphson.
pub fn targeted_selection_pseudo_r2(y: &[u8], pi_hat: &[f64]) -> Result<f64> {
    let n = y.len();
    if n == 0 || pi_hat.len() != n {
        return Err(Error::DimensionMismatch("pseudo-R² inputs".into()));
    }
    if pi_hat.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::InvalidArgument(
            "propensity values must lie in (0,1)".into(),
        ));
    }
    let ybar = y.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    if ybar == 0.0 || ybar == 1.0 {
        return Err(Error::InvalidArgument("outcome is constant".into()));
    }
    let pi_mean = mean(pi_hat);
    if pi_hat.iter().all(|&p| (p - pi_mean).abs() < 1e-12) {
        // Constant covariate carries no information beyond the intercept.
        return Ok(0.0);
    }

    let ll = |b0: f64, b1: f64| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            let eta = b0 + b1 * pi_hat[i];
            // log σ(η) = -log(1+e^{-η}), log(1-σ(η)) = -log(1+e^{η}).
            acc += if y[i] == 1 {
                -(1.0 + (-eta).exp()).ln()
            } else {
                -(1.0 + eta.exp()).ln()
            };
        }
        acc
    };
    let ll_null = (n as f64) * (ybar * ybar.ln() + (1.0 - ybar) * (1.0 - ybar).ln());

    let mut b = [ybar.ln() - (1.0 - ybar).ln(), 0.0];
    let mut converged = false;
    for _ in 0..100 {
        let mut g = [0.0f64; 2];
        let mut h = [[0.0f64; 2]; 2];
        for i in 0..n {
            let eta = b[0] + b[1] * pi_hat[i];
            let p = 1.0 / (1.0 + (-eta).exp());
            let r = y[i] as f64 - p;
            let w = p * (1.0 - p);
            g[0] += r;
            g[1] += r * pi_hat[i];
            h[0][0] += w;
            h[0][1] += w * pi_hat[i];
            h[1][1] += w * pi_hat[i] * pi_hat[i];
        }
        h[1][0] = h[0][1];
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::NonConvergence(
                "singular hessian in the logistic fit (quasi-separation)".into(),
            ));
        }
        let step = [
            (h[1][1] * g[0] - h[0][1] * g[1]) / det,
            (h[0][0] * g[1] - h[1][0] * g[0]) / det,
        ];
        b[0] += step[0];
        b[1] += step[1];
        if g[0].abs().max(g[1].abs()) < 1e-8 {
            converged = true;
            break;
        }
        if !b[0].is_finite() || !b[1].is_finite() || b[1].abs() > 1e8 {
            return Err(Error::NonConvergence(format!(
                "logistic fit diverged (separation?): coefficients ({}, {})",
                b[0], b[1]
            )));
        }
    }
    if !converged {
        return Err(Error::NonConvergence(
            "logistic fit did not reach tolerance 1e-8 in 100 iterations".into(),
        ));
    }
    Ok(1.0 - ll(b[0], b[1]) / ll_null)
}

/// Per-group-by-target posterior summaries (grouped projection of relative
/// risk over the target covariate).
pub fn grouped_rr_projection(
    rr: &RRDraws,
    t_idx: &[usize],
    grid_values: &[f64],
    groups: &[(String, Vec<usize>)],
) -> Vec<(String, TargetSummary)> {
    let mut out = Vec::new();
    for (label, members) in groups {
        let mut by_t = vec![Vec::new(); grid_values.len()];
        for &i in members {
            by_t[t_idx[i]].push(i);
        }
        for (t, cell) in by_t.iter().enumerate() {
            if cell.is_empty() {
                continue;
            }
            let per_draw: Vec<f64> = (0..rr.n_draws())
                .map(|b| {
                    let row = rr.rr.row(b);
                    cell.iter().map(|&i| row[i]).sum::<f64>() / cell.len() as f64
                })
                .collect();
            let (lo, hi) = equal_tailed_interval(&per_draw, 0.95);
            out.push((
                label.clone(),
                TargetSummary {
                    t: grid_values[t],
                    mean: mean(&per_draw),
                    lo,
                    hi,
                    n_excluded: 0,
                },
            ));
        }
    }
    out
}

/// Convenience: median split of a draw vector, used by a few reports.
pub fn draw_median(draws: &[f64]) -> f64 {
    quantile(draws, 0.5)
}
