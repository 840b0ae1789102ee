//! Unsupervised event boundaries from the temporal self-similarity matrix.
//!
//! The pipeline is parameter-free: cosine self-similarity between frames, a
//! fixed 5×5 contrastive kernel slid along the diagonal, a mean threshold and
//! a width-3 max filter. Surviving indices start new events.

use crate::error::{Error, Result};
use crate::geometry::MomentSpan;
use crate::tensor::{Matrix, Real};

/// Side length of the contrastive kernel.
pub const KERNEL_SIZE: usize = 5;

/// Contrastive kernel mimicking the block pattern at an event boundary.
pub const CONTRASTIVE_KERNEL: [[f64; KERNEL_SIZE]; KERNEL_SIZE] = [
    [1.0, 1.0, 0.0, -1.0, -1.0],
    [1.0, 1.0, 0.0, -1.0, -1.0],
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [-1.0, -1.0, 0.0, 1.0, 1.0],
    [-1.0, -1.0, 0.0, 1.0, 1.0],
];

/// Pairwise cosine similarities between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TsMatrix {
    values: Matrix<f64>,
}

impl TsMatrix {
    /// Wraps a precomputed similarity matrix without checks.
    pub fn from_matrix(values: Matrix<f64>) -> Self {
        assert_eq!(values.rows(), values.cols(), "similarity matrix must be square");
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn values(&self) -> &Matrix<f64> {
        &self.values
    }
}

/// Per-frame boundary responses and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryScores {
    pub scores: Vec<f64>,
    pub mean: f64,
}

impl BoundaryScores {
    pub fn new(scores: Vec<f64>) -> Self {
        let mean = if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        Self { scores, mean }
    }
}

/// Cosine self-similarity of the rows of `features`.
pub fn build_tsm<F: Real>(features: &Matrix<F>) -> Result<TsMatrix> {
    let rows: Vec<Vec<f64>> = (0..features.rows())
        .map(|r| features.row(r).iter().map(|v| v.to_f64()).collect())
        .collect();
    let mut unit = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm <= 0.0 {
            return Err(Error::DegenerateFeature { row: r });
        }
        unit.push(row.iter().map(|v| v / norm).collect::<Vec<_>>());
    }
    let n = unit.len();
    let mut values = Matrix::zeros(n, n);
    for i in 0..n {
        values.set(i, i, 1.0);
        for j in i + 1..n {
            let cos = unit[i]
                .iter()
                .zip(&unit[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .clamp(-1.0, 1.0);
            values.set(i, j, cos);
            values.set(j, i, cos);
        }
    }
    Ok(TsMatrix { values })
}

/// Slides the contrastive kernel along the diagonal. Centers without a full
/// window score zero.
pub fn boundary_scores(tsm: &TsMatrix) -> Result<BoundaryScores> {
    let n = tsm.len();
    if n < KERNEL_SIZE {
        return Err(Error::SequenceTooShort {
            len: n,
            min: KERNEL_SIZE,
        });
    }
    let half = KERNEL_SIZE / 2;
    let mut scores = vec![0.0; n];
    for (center, score) in scores.iter_mut().enumerate().take(n - half).skip(half) {
        let base = center - half;
        let mut acc = 0.0;
        for (a, krow) in CONTRASTIVE_KERNEL.iter().enumerate() {
            for (b, &k) in krow.iter().enumerate() {
                if k != 0.0 {
                    acc += k * tsm.get(base + a, base + b);
                }
            }
        }
        *score = acc;
    }
    Ok(BoundaryScores::new(scores))
}

/// Indices that start a new event: scores below the mean are dropped, then a
/// width-3 max filter keeps local maxima. Within a run of tied maxima only
/// the last index survives. Index 0 never starts a new event.
pub fn boundary_indices(b: &BoundaryScores) -> Vec<usize> {
    let n = b.scores.len();
    let thresholded: Vec<f64> = b.scores.iter().map(|&s| if s < b.mean { 0.0 } else { s }).collect();
    let scale = thresholded.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    // Scores are sums of the same similarities in different orders.
    let tol = 1e-9 * scale.max(1.0);
    (1..n)
        .filter(|&i| {
            let s = thresholded[i];
            let left = thresholded[i - 1];
            let right = if i + 1 < n {
                thresholded[i + 1]
            } else {
                f64::NEG_INFINITY
            };
            s > 0.0 && s >= left - tol && s > right + tol
        })
        .collect()
}

/// Converts event start indices into normalized spans tiling `[0, 1]`.
pub fn spans_from_boundaries(boundaries: &[usize], len: usize) -> Vec<MomentSpan> {
    let mut starts = vec![0usize];
    starts.extend(boundaries.iter().copied().filter(|&b| b > 0 && b < len));
    starts.sort_unstable();
    starts.dedup();
    let mut ends: Vec<usize> = starts[1..].to_vec();
    ends.push(len);
    starts
        .iter()
        .zip(ends)
        .map(|(&s, e)| {
            MomentSpan::from_interval(s as f64 / len as f64, e as f64 / len as f64).expect("non-empty frame range")
        })
        .collect()
}

/// Thresholds and filters boundary scores, returning the event spans.
pub fn extract_events(b: &BoundaryScores, len: usize) -> Vec<MomentSpan> {
    assert_eq!(b.scores.len(), len, "score length must match sequence length");
    spans_from_boundaries(&boundary_indices(b), len)
}

/// Full pipeline from frame features to pseudo events. Sequences shorter
/// than the kernel yield a single whole-video event.
pub fn pseudo_events<F: Real>(features: &Matrix<F>) -> Result<Vec<MomentSpan>> {
    let tsm = build_tsm(features)?;
    match boundary_scores(&tsm) {
        Ok(b) => Ok(extract_events(&b, tsm.len())),
        Err(Error::SequenceTooShort { .. }) => Ok(vec![MomentSpan::new(0.5, 1.0)?]),
        Err(e) => Err(e),
    }
}

/// Boundary indices for the full pipeline; empty for short sequences.
pub fn pseudo_boundaries<F: Real>(features: &Matrix<F>) -> Result<Vec<usize>> {
    let tsm = build_tsm(features)?;
    match boundary_scores(&tsm) {
        Ok(b) => Ok(boundary_indices(&b)),
        Err(Error::SequenceTooShort { .. }) => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}
