//! Optimal assignment between true and predicted starts.
//!
//! For one behavior with `N` true starts and `M` predicted starts the
//! assignment is solved on an `(N+M) x (N+M)` matrix: rows are the true starts
//! followed by `M` false-positive slots, columns are the predicted starts
//! followed by `N` false-negative slots. Slot-to-slot cells cost nothing, so
//! the optimal assignment cost is exactly
//! `sum |s - s_hat| over matched pairs + tau * (#FN + #FP)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{Start, StartSet};

/// Largest per-behavior start count accepted by [`brute_force_matching`].
pub const BRUTE_FORCE_LIMIT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub tau: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { tau: 10 }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::InvalidSpec("tau must be >= 1".into()));
        }
        Ok(())
    }

    /// Strict `|i - j| < tau`.
    pub fn within(&self, a: usize, b: usize) -> bool {
        a.abs_diff(b) < self.tau
    }

    /// Cost of a label/prediction pair that may not be matched; strictly worse
    /// than leaving both unmatched (`2 tau`).
    pub fn prohibitive(&self) -> f64 {
        (2 * self.tau + 1) as f64
    }
}

/// Square, non-negative assignment cost matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    size: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let size = rows.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != size) {
            return Err(Error::invalid(format!(
                "cost matrix must be square: row {i} has {} entries, expected {size}",
                r.len()
            )));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        if data.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::invalid(
                "cost matrix entries must be finite and non-negative",
            ));
        }
        Ok(CostMatrix { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data
            .chunks(self.size.max(1))
            .map(<[f64]>::to_vec)
            .collect()
    }
}

/// A permutation `row -> column` and its total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<usize>,
    pub cost: f64,
}

/// Builds the assignment matrix for one behavior.
///
/// - label `n` / prediction `m`: `|s_n - s_hat_m|` if within tau, else `2 tau + 1`
/// - false-positive slot / prediction `m`: `tau`
/// - label `n` / false-negative slot: `tau`
/// - slot / slot: `0`
pub fn build_cost_matrix(labels: &[Start], preds: &[Start], cfg: &MatchConfig) -> CostMatrix {
    let (n, m) = (labels.len(), preds.len());
    let size = n + m;
    let tau = cfg.tau as f64;
    let mut data = vec![0.0; size * size];
    for row in 0..size {
        for col in 0..size {
            data[row * size + col] = match (row < n, col < m) {
                (true, true) => {
                    let (s, p) = (labels[row].frame, preds[col].frame);
                    if cfg.within(s, p) {
                        s.abs_diff(p) as f64
                    } else {
                        cfg.prohibitive()
                    }
                }
                (false, true) | (true, false) => tau,
                (false, false) => 0.0,
            };
        }
    }
    CostMatrix { size, data }
}

/// Minimum-cost perfect assignment on a square matrix, `O(n^3)`.
///
/// Shortest-augmenting-path Hungarian method with row/column potentials.
pub fn hungarian_solve(rows: &[Vec<f64>]) -> Result<Assignment> {
    Ok(solve(&CostMatrix::from_rows(rows)?))
}

pub fn solve(costs: &CostMatrix) -> Assignment {
    let n = costs.size;
    if n == 0 {
        return Assignment {
            row_to_col: Vec::new(),
            cost: 0.0,
        };
    }
    // 1-based potentials; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut min_slack = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];

    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        min_slack.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    let cost = row_to_col
        .iter()
        .enumerate()
        .map(|(r, &c)| costs.get(r, c))
        .sum();
    Assignment { row_to_col, cost }
}

/// Matching of one behavior's starts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(label frame, predicted frame)`, sorted by label frame.
    pub pairs: Vec<(usize, usize)>,
    /// False negatives: label frames without a prediction.
    pub unmatched_labels: Vec<usize>,
    /// False positives: predicted frames without a label.
    pub unmatched_preds: Vec<usize>,
    pub total_cost: f64,
}

impl MatchResult {
    fn finish(mut self, tau: usize) -> Self {
        self.pairs.sort_unstable();
        self.unmatched_labels.sort_unstable();
        self.unmatched_preds.sort_unstable();
        let dist: usize = self.pairs.iter().map(|&(s, p)| s.abs_diff(p)).sum();
        let slack = self.unmatched_labels.len() + self.unmatched_preds.len();
        self.total_cost = (dist + tau * slack) as f64;
        self
    }

    pub fn true_positives(&self) -> usize {
        self.pairs.len()
    }

    pub fn false_negatives(&self) -> usize {
        self.unmatched_labels.len()
    }

    pub fn false_positives(&self) -> usize {
        self.unmatched_preds.len()
    }
}

/// Optimal matching of a single behavior's label and prediction lists.
pub fn match_behavior(labels: &[Start], preds: &[Start], cfg: &MatchConfig) -> MatchResult {
    let (n, m) = (labels.len(), preds.len());
    let assignment = solve(&build_cost_matrix(labels, preds, cfg));
    let mut result = MatchResult::default();
    let mut pred_taken = vec![false; m];
    for (row, &col) in assignment.row_to_col.iter().enumerate().take(n) {
        let s = labels[row].frame;
        if col < m && cfg.within(s, preds[col].frame) {
            result.pairs.push((s, preds[col].frame));
            pred_taken[col] = true;
        } else {
            result.unmatched_labels.push(s);
        }
    }
    result.unmatched_preds = preds
        .iter()
        .zip(&pred_taken)
        .filter(|(_, &taken)| !taken)
        .map(|(p, _)| p.frame)
        .collect();
    result.finish(cfg.tau)
}

fn check_behaviors(labels: &StartSet, preds: &StartSet) -> Result<()> {
    if labels.behaviors() != preds.behaviors() {
        return Err(Error::invalid(format!(
            "labels have {} behaviors, predictions {}",
            labels.behaviors(),
            preds.behaviors()
        )));
    }
    Ok(())
}

/// Per-behavior optimal matchings.
pub fn optimal_matching(
    labels: &StartSet,
    preds: &StartSet,
    cfg: &MatchConfig,
) -> Result<Vec<MatchResult>> {
    cfg.validate()?;
    check_behaviors(labels, preds)?;
    Ok(labels
        .iter()
        .zip(preds.iter())
        .map(|(l, p)| match_behavior(l, p, cfg))
        .collect())
}

/// `sum over behaviors` of FN * tau + matched distances + FP * tau at the
/// optimal matching.
pub fn structured_error(labels: &StartSet, preds: &StartSet, cfg: &MatchConfig) -> Result<f64> {
    Ok(optimal_matching(labels, preds, cfg)?
        .iter()
        .map(|r| r.total_cost)
        .sum())
}

/// Exhaustive search over every partial injective matching that respects the
/// tau constraint. Test oracle for [`optimal_matching`]; one result per behavior.
pub fn brute_force_matching(
    labels: &StartSet,
    preds: &StartSet,
    cfg: &MatchConfig,
) -> Result<Vec<MatchResult>> {
    cfg.validate()?;
    check_behaviors(labels, preds)?;
    labels
        .iter()
        .zip(preds.iter())
        .map(|(l, p)| brute_force_behavior(l, p, cfg))
        .collect()
}

fn brute_force_behavior(
    labels: &[Start],
    preds: &[Start],
    cfg: &MatchConfig,
) -> Result<MatchResult> {
    if labels.len() > BRUTE_FORCE_LIMIT || preds.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeLimit(format!(
            "{} labels / {} predictions, limit is {BRUTE_FORCE_LIMIT} each",
            labels.len(),
            preds.len()
        )));
    }
    let labels: Vec<usize> = labels.iter().map(|s| s.frame).collect();
    let preds: Vec<usize> = preds.iter().map(|s| s.frame).collect();
    let mut best: Option<(usize, Vec<Option<usize>>)> = None;
    let mut current = Vec::with_capacity(labels.len());
    let mut used = vec![false; preds.len()];
    search(&labels, &preds, cfg, &mut current, &mut used, &mut best);

    let (_, choice) = best.expect("the empty matching is always feasible");
    let mut result = MatchResult::default();
    for (s, c) in labels.iter().zip(&choice) {
        match c {
            Some(j) => result.pairs.push((*s, preds[*j])),
            None => result.unmatched_labels.push(*s),
        }
    }
    result.unmatched_preds = preds
        .iter()
        .enumerate()
        .filter(|(j, _)| !choice.contains(&Some(*j)))
        .map(|(_, &p)| p)
        .collect();
    Ok(result.finish(cfg.tau))
}

fn search(
    labels: &[usize],
    preds: &[usize],
    cfg: &MatchConfig,
    current: &mut Vec<Option<usize>>,
    used: &mut [bool],
    best: &mut Option<(usize, Vec<Option<usize>>)>,
) {
    let i = current.len();
    if i == labels.len() {
        let matched = current.iter().flatten().count();
        let dist: usize = current
            .iter()
            .zip(labels)
            .filter_map(|(c, s)| c.map(|j| s.abs_diff(preds[j])))
            .sum();
        let cost = dist + cfg.tau * (labels.len() + preds.len() - 2 * matched);
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            *best = Some((cost, current.clone()));
        }
        return;
    }
    current.push(None);
    search(labels, preds, cfg, current, used, best);
    current.pop();
    for j in 0..preds.len() {
        if !used[j] && cfg.within(labels[i], preds[j]) {
            used[j] = true;
            current.push(Some(j));
            search(labels, preds, cfg, current, used, best);
            current.pop();
            used[j] = false;
        }
    }
}
