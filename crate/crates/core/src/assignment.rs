//! Minimum-cost bipartite assignment and the span matching costs built on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generalized_temporal_iou, MomentSpan};

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "cost matrix shape mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn transposed(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }
}

/// A one-to-one pairing of cost-matrix rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Weights of the span matching costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub lambda_l1: f64,
    pub lambda_iou: f64,
    pub lambda_c: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 10.0,
            lambda_iou: 1.0,
            lambda_c: 4.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_l1, self.lambda_iou, self.lambda_c]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("cost weights must be nonnegative: {self:?}")))
        }
    }

    /// `λ_l1·L1 + λ_iou·(1 − gIoU)` between two spans.
    pub fn span_cost(&self, a: &MomentSpan, b: &MomentSpan) -> f64 {
        let giou = generalized_temporal_iou(a, b).giou;
        self.lambda_l1 * a.l1(b) + self.lambda_iou * (1.0 - giou)
    }
}

/// Solves the rectangular assignment problem, matching `min(rows, cols)`
/// pairs at minimum total cost.
///
/// Shortest augmenting paths with dual potentials, `O(n²m)` for `n ≤ m`.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    for r in 0..cost.rows {
        for c in 0..cost.cols {
            if !cost.get(r, c).is_finite() {
                return Err(Error::InvalidCost { row: r, col: c });
            }
        }
    }
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    if cost.rows > cost.cols {
        let t = hungarian(&cost.transposed())?;
        let mut pairs: Vec<_> = t.pairs.into_iter().map(|(r, c)| (c, r)).collect();
        pairs.sort_unstable();
        let total_cost = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
        return Ok(Assignment { pairs, total_cost });
    }

    let (n, m) = (cost.rows, cost.cols);
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for c in 1..=m {
                if used[c] {
                    continue;
                }
                let reduced = cost.get(r0 - 1, c - 1) - u[r0] - v[c];
                if reduced < minv[c] {
                    minv[c] = reduced;
                    way[c] = col0;
                }
                if minv[c] < delta {
                    delta = minv[c];
                    col1 = c;
                }
            }
            for c in 0..=m {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&c| owner[c] != 0)
        .map(|c| (owner[c] - 1, c - 1))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Event matching cost: rows are pseudo events, columns predicted spans.
pub fn event_cost_matrix(pseudo: &[MomentSpan], predicted: &[MomentSpan], weights: &CostWeights) -> CostMatrix {
    CostMatrix::from_fn(pseudo.len(), predicted.len(), |i, j| {
        weights.span_cost(&pseudo[i], &predicted[j])
    })
}

/// Moment matching cost: rows are ground-truth moments, columns predicted
/// queries with their confidences.
pub fn moment_cost_matrix(
    gt: &[MomentSpan],
    predicted: &[MomentSpan],
    confidence: &[f64],
    weights: &CostWeights,
) -> Result<CostMatrix> {
    if predicted.len() != confidence.len() {
        return Err(Error::Config(format!(
            "{} predicted spans but {} confidences",
            predicted.len(),
            confidence.len()
        )));
    }
    if gt.len() > predicted.len() {
        log::warn!(
            "{} ground-truth moments exceed {} queries; matching rectangularly",
            gt.len(),
            predicted.len()
        );
    }
    Ok(CostMatrix::from_fn(gt.len(), predicted.len(), |i, j| {
        -weights.lambda_c * confidence[j] + weights.span_cost(&gt[i], &predicted[j])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum over all injective maps from the smaller side into the larger.
    pub(crate) fn brute_force(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.rows() {
                *best = best.min(acc);
                return;
            }
            for c in 0..cost.cols() {
                if !used[c] {
                    used[c] = true;
                    rec(cost, row + 1, used, acc + cost.get(row, c), best);
                    used[c] = false;
                }
            }
        }
        let cost = if cost.rows() > cost.cols() {
            cost.transposed()
        } else {
            cost.clone()
        };
        let mut best = f64::INFINITY;
        rec(&cost, 0, &mut vec![false; cost.cols()], 0.0, &mut best);
        best
    }

    fn span(c: f64, w: f64) -> MomentSpan {
        MomentSpan::new(c, w).unwrap()
    }

    #[test]
    fn zero_diagonal_is_identity() {
        let cost = CostMatrix::from_fn(3, 3, |r, c| if r == c { 0.0 } else { 1.0 });
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.total_cost, 0.0);

        let cost = CostMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(hungarian(&cost).unwrap().pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn random_5x5_matches_all_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let cost = CostMatrix::from_fn(5, 5, |_, _| rng.random_range(0..20) as f64);
            assert_eq!(hungarian(&cost).unwrap().total_cost, brute_force(&cost));
        }
    }

    #[test]
    fn rectangular_shapes_cover_smaller_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (r, c) in [(2, 5), (5, 2), (1, 4), (4, 1), (3, 6)] {
            let cost = CostMatrix::from_fn(r, c, |_, _| rng.random::<f64>());
            let a = hungarian(&cost).unwrap();
            assert_eq!(a.pairs.len(), r.min(c));
            let mut rows: Vec<_> = a.pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = a.pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            assert_eq!(rows.len(), r.min(c));
            assert_eq!(cols.len(), r.min(c));
            assert!((a.total_cost - brute_force(&cost)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_shift_keeps_cost_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cost = CostMatrix::from_fn(4, 4, |_, _| rng.random_range(0..10) as f64);
        let shifted = CostMatrix::from_fn(4, 4, |r, c| cost.get(r, c) + 7.0);
        let a = hungarian(&cost).unwrap();
        let b = hungarian(&shifted).unwrap();
        let b_on_original: f64 = b.pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
        assert_eq!(a.total_cost, b_on_original);
    }

    #[test]
    fn non_finite_cost_is_rejected() {
        let cost = CostMatrix::new(1, 2, vec![0.0, f64::NAN]);
        assert!(matches!(hungarian(&cost), Err(Error::InvalidCost { row: 0, col: 1 })));
    }

    #[test]
    fn event_cost_examples() {
        let w = CostWeights::default();
        let s = span(0.4, 0.3);
        assert_eq!(event_cost_matrix(&[s], &[s], &w).get(0, 0), 0.0);

        let c = event_cost_matrix(&[span(0.25, 0.5)], &[span(0.75, 0.5)], &w).get(0, 0);
        assert!((c - 6.0).abs() < 1e-12);

        let pseudo = [span(0.25, 0.5), span(0.75, 0.5)];
        let pred = [span(0.7, 0.5), span(0.5, 0.1), span(0.3, 0.5)];
        let m = event_cost_matrix(&pseudo, &pred, &w);
        assert_eq!((m.rows(), m.cols()), (2, 3));
        let a = hungarian(&m).unwrap();
        assert_eq!(a.pairs, vec![(0, 2), (1, 0)]);
    }

    #[test]
    fn moment_cost_examples() {
        let w = CostWeights::default();
        let s = span(0.5, 0.2);
        assert_eq!(moment_cost_matrix(&[s], &[s], &[1.0], &w).unwrap().get(0, 0), -4.0);
        assert_eq!(moment_cost_matrix(&[s], &[s], &[0.5], &w).unwrap().get(0, 0), -2.0);
        assert!(moment_cost_matrix(&[s], &[s], &[0.5, 0.2], &w).is_err());

        let gt = [span(0.2, 0.2), span(0.7, 0.3)];
        let pred = [span(0.65, 0.3), span(0.25, 0.1), span(0.5, 0.9)];
        let m = moment_cost_matrix(&gt, &pred, &[0.3, 0.9, 0.6], &w).unwrap();
        let a = hungarian(&m).unwrap();
        assert!((a.total_cost - brute_force(&m)).abs() < 1e-12);
    }
}
