//! Bipartite assignment between predicted regions and target regions.
//!
//! [`hungarian`] is the production path (O(n³) potentials/augmenting-path
//! form, rectangular inputs padded square with a sentinel internally);
//! [`brute_force_assignment`] is the exhaustive oracle the tests hold it
//! against. [`matching_cost`] builds the Dice-based cost matrix used by the
//! bootstrap branch's segmentation loss and keeps its entries in `[0, 1]`.

use crate::attention::MaskStack;
use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;

pub const DICE_EPS: f64 = 1e-8;

/// Pair-wise cost grid: `rows` predictions by `cols` targets.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>, // row-major
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::input("cost matrix must be non-empty"));
        }
        if costs.len() != rows * cols {
            return Err(Error::input(format!(
                "cost matrix data length {} != {rows}x{cols}",
                costs.len()
            )));
        }
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::input("cost matrix contains non-finite entries"));
        }
        Ok(CostMatrix { rows, cols, costs })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut costs = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                costs.push(f(i, j));
            }
        }
        Self::new(rows, cols, costs)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.cols + j]
    }
}

/// An injective map from target index to prediction index, together with
/// the summed cost of the matched pairs. Exactly `min(rows, cols)` targets
/// are matched; with fewer predictions than targets the excess targets are
/// `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingResult {
    pub assignment: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl MatchingResult {
    /// Prediction channel matched to a target, if any.
    pub fn prediction_for(&self, target: usize) -> Option<usize> {
        self.assignment.get(target).copied().flatten()
    }

    pub fn matched_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(t, p)| p.map(|p| (t, p)))
    }
}

/// Minimum-total-cost injective assignment over `min(rows, cols)` pairs.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchingResult> {
    // Invariant of CostMatrix: finite entries. Pad to square; the padding
    // constant is irrelevant to the argmin (every completion uses the same
    // number of padded cells) but a finite sentinel keeps potentials tame.
    let n = cost.rows.max(cost.cols);
    let max_abs = cost.costs.iter().fold(0.0f64, |acc, c| acc.max(c.abs()));
    let sentinel = 2.0 * max_abs + 1.0;
    let at = |i: usize, j: usize| -> f64 {
        if i < cost.rows && j < cost.cols {
            cost.get(i, j)
        } else {
            sentinel
        }
    };

    // Potentials form with 1-based virtual indices.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row (1-based) matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; cost.cols];
    let mut total = 0.0;
    for j in 1..=n {
        let i = p[j]; // 1-based row
        if i == 0 {
            continue;
        }
        let (row, col) = (i - 1, j - 1);
        if row < cost.rows && col < cost.cols {
            assignment[col] = Some(row);
            total += cost.get(row, col);
        }
    }
    Ok(MatchingResult {
        assignment,
        total_cost: total,
    })
}

/// Exhaustive minimum over all injective assignments of the smaller side;
/// ties broken by the lexicographically smallest assignment vector (a
/// matched target sorts before an unmatched one). Refuses instances with
/// `min(rows, cols) > 8`.
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<MatchingResult> {
    if cost.rows.min(cost.cols) > 8 {
        return Err(Error::input(format!(
            "brute-force matching refused: min side {} > 8",
            cost.rows.min(cost.cols)
        )));
    }
    let need = cost.rows.min(cost.cols);
    let mut best: Option<(f64, Vec<Option<usize>>)> = None;
    let mut current: Vec<Option<usize>> = vec![None; cost.cols];
    let mut used_rows = vec![false; cost.rows];

    // Depth-first over target columns, choosing rows in increasing order and
    // `Some` before `None`, so candidates are visited in lexicographic
    // order of the assignment vector; strict `<` keeps the first (smallest)
    // among cost ties.
    fn recurse(
        cost: &CostMatrix,
        col: usize,
        matched: usize,
        need: usize,
        acc: f64,
        current: &mut Vec<Option<usize>>,
        used_rows: &mut Vec<bool>,
        best: &mut Option<(f64, Vec<Option<usize>>)>,
    ) {
        let remaining_cols = cost.cols - col;
        if matched + remaining_cols < need {
            return; // cannot reach the required number of matches
        }
        if col == cost.cols {
            if matched == need {
                match best {
                    Some((bc, _)) if acc >= *bc => {}
                    _ => *best = Some((acc, current.clone())),
                }
            }
            return;
        }
        if matched < need {
            for row in 0..cost.rows {
                if used_rows[row] {
                    continue;
                }
                used_rows[row] = true;
                current[col] = Some(row);
                recurse(
                    cost,
                    col + 1,
                    matched + 1,
                    need,
                    acc + cost.get(row, col),
                    current,
                    used_rows,
                    best,
                );
                current[col] = None;
                used_rows[row] = false;
            }
        }
        // leave this target unmatched
        recurse(cost, col + 1, matched, need, acc, current, used_rows, best);
    }

    recurse(
        cost,
        0,
        0,
        need,
        0.0,
        &mut current,
        &mut used_rows,
        &mut best,
    );
    let (total_cost, assignment) = best.expect("at least one assignment exists");
    Ok(MatchingResult {
        assignment,
        total_cost,
    })
}

/// Dice dissimilarity between each soft predicted mask and each hard target
/// region: `cost[i, j] = 1 - 2 Σ aᵢ·1[t=j] / (Σ aᵢ + Σ 1[t=j] + ε)`.
/// Targets are the labels `0..=max_label` of the hard map.
pub fn matching_cost(
    pred_alphas: &MaskStack,
    target_labels: &SegmentationMask,
) -> Result<CostMatrix> {
    if pred_alphas.height() != target_labels.height()
        || pred_alphas.width() != target_labels.width()
    {
        return Err(Error::input(format!(
            "mask grids differ: {}x{} vs {}x{}",
            pred_alphas.height(),
            pred_alphas.width(),
            target_labels.height(),
            target_labels.width()
        )));
    }
    let labels = target_labels.labels();
    let n_targets = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let k = pred_alphas.count();
    let alphas = pred_alphas.location_major();

    let mut pred_sums = vec![0.0; k];
    let mut target_sums = vec![0.0; n_targets];
    let mut inter = vec![0.0; k * n_targets];
    for (loc, &label) in labels.iter().enumerate() {
        let t = label as usize;
        target_sums[t] += 1.0;
        let row = alphas.row(loc);
        for (i, &a) in row.iter().enumerate() {
            pred_sums[i] += a;
            inter[i * n_targets + t] += a;
        }
    }
    CostMatrix::from_fn(k, n_targets, |i, j| {
        let dice = 2.0 * inter[i * n_targets + j] / (pred_sums[i] + target_sums[j] + DICE_EPS);
        1.0 - dice
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: usize, cols: usize, data: &[f64]) -> CostMatrix {
        CostMatrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matrix_matches_diagonal() {
        let res = hungarian(&cm(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(res.assignment, vec![Some(0), Some(1)]);
        assert_eq!(res.total_cost, 0.0);
    }

    #[test]
    fn anti_diagonal_cost_swaps() {
        let res = hungarian(&cm(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(res.assignment, vec![Some(1), Some(0)]);
        assert_eq!(res.total_cost, 0.0);
    }

    #[test]
    fn brute_force_singleton() {
        let res = brute_force_assignment(&cm(1, 1, &[4.25])).unwrap();
        assert_eq!(res.assignment, vec![Some(0)]);
        assert_eq!(res.total_cost, 4.25);
    }

    #[test]
    fn brute_force_tie_break_is_lexicographic() {
        let res = brute_force_assignment(&cm(3, 3, &[1.0; 9])).unwrap();
        assert_eq!(res.assignment, vec![Some(0), Some(1), Some(2)]);
        // wide: 1 row, 2 cols, all equal: match the first target
        let res = brute_force_assignment(&cm(1, 2, &[1.0, 1.0])).unwrap();
        assert_eq!(res.assignment, vec![Some(0), None]);
    }

    #[test]
    fn rejects_non_finite_costs() {
        assert!(CostMatrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(CostMatrix::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let big = CostMatrix::from_fn(9, 9, |i, j| (i * j) as f64).unwrap();
        assert!(brute_force_assignment(&big).is_err());
    }

    #[test]
    fn rectangular_matches_min_side() {
        // 2 predictions, 3 targets: one target stays unmatched
        let c = cm(2, 3, &[0.1, 5.0, 5.0, 5.0, 0.2, 5.0]);
        let res = hungarian(&c).unwrap();
        assert_eq!(res.assignment, vec![Some(0), Some(1), None]);
        assert!((res.total_cost - 0.3).abs() < 1e-12);
        // 3 predictions, 2 targets: all targets matched
        let c = cm(3, 2, &[5.0, 0.1, 0.2, 5.0, 5.0, 5.0]);
        let res = hungarian(&c).unwrap();
        assert_eq!(res.assignment, vec![Some(1), Some(0)]);
        assert!((res.total_cost - 0.3).abs() < 1e-12);
    }

    #[test]
    fn hungarian_equals_brute_force_on_negatives() {
        let c = cm(3, 3, &[-1.0, 2.0, 0.5, 0.0, -3.0, 1.0, 2.0, 2.0, -0.5]);
        let h = hungarian(&c).unwrap();
        let b = brute_force_assignment(&c).unwrap();
        assert!((h.total_cost - b.total_cost).abs() < 1e-12);
    }
}
