//! Grounding evaluation: Recall1@IoU and mean average precision over IoU
//! thresholds.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};
use crate::geometry::{temporal_iou, MomentSpan};

/// Ranked predictions for one sample, highest confidence first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedPredictions(pub Vec<(MomentSpan, f64)>);

impl RankedPredictions {
    pub fn new(mut preds: Vec<(MomentSpan, f64)>) -> Self {
        preds.sort_by(|a, b| b.1.total_cmp(&a.1));
        Self(preds)
    }

    pub fn top(&self) -> Option<&(MomentSpan, f64)> {
        self.0.first()
    }
}

/// Predictions for a whole evaluation set.
pub type PredictionSet = [RankedPredictions];

/// IoU thresholds 0.5, 0.55, …, 0.95.
pub fn default_map_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Best IoU between the top-ranked prediction and any ground truth.
pub fn top1_iou(preds: &RankedPredictions, gts: &[MomentSpan]) -> Option<f64> {
    let (span, _) = preds.top()?;
    Some(gts.iter().map(|g| temporal_iou(span, g)).fold(0.0, f64::max))
}

/// Fraction of samples whose top prediction overlaps some ground truth with
/// IoU strictly above `m`.
pub fn recall1_at_iou(preds: &PredictionSet, gts: &[Vec<MomentSpan>], m: f64) -> f64 {
    assert_eq!(preds.len(), gts.len(), "one prediction list per sample");
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| match top1_iou(p, g) {
            Some(iou) => iou > m,
            None => {
                log::warn!("sample without predictions counted as a miss");
                false
            }
        })
        .count();
    hits as f64 / preds.len() as f64
}

/// Average precision at one IoU threshold, all-point interpolated.
///
/// Predictions from every sample are ranked together by confidence. Each is
/// greedily matched to the unmatched ground truth of its own sample with the
/// highest IoU, provided that IoU reaches `threshold`.
pub fn average_precision(preds: &PredictionSet, gts: &[Vec<MomentSpan>], threshold: f64) -> f64 {
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, p)| (0..p.0.len()).map(move |k| (s, k)))
        .collect();
    ranked.sort_by(|a, b| preds[b.0].0[b.1].1.total_cmp(&preds[a.0].0[a.1].1));

    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for &(s, k) in &ranked {
        let span = &preds[s].0[k].0;
        let best = gts[s]
            .iter()
            .enumerate()
            .filter(|(g, _)| !taken[s][*g])
            .map(|(g, gt)| (g, temporal_iou(span, gt)))
            .filter(|&(_, iou)| iou >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((g, _)) = best {
            taken[s][g] = true;
            tp_flags.push(true);
        } else {
            tp_flags.push(false);
        }
    }

    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &flag) in tp_flags.iter().enumerate() {
        tp += flag as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = tp_flags
        .iter()
        .zip(&precision)
        .filter(|(f, _)| **f)
        .fold(0.0, |acc, (_, p)| acc + p);
    sum / total_gt as f64
}

/// Per-threshold AP and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    pub per_threshold: Vec<(f64, f64)>,
    pub mean: f64,
}

pub fn mean_ap(preds: &PredictionSet, gts: &[Vec<MomentSpan>], thresholds: &[f64]) -> MeanAp {
    let per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| (t, average_precision(preds, gts, t)))
        .collect();
    let mean = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().fold(0.0, |acc, p| acc + p.1) / per_threshold.len() as f64
    };
    MeanAp { per_threshold, mean }
}

/// Headline grounding metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    #[serde(rename = "R1@0.5")]
    pub r1_05: f64,
    #[serde(rename = "R1@0.7")]
    pub r1_07: f64,
    #[serde(rename = "mAP@0.5")]
    pub map_05: f64,
    #[serde(rename = "mAP@0.75")]
    pub map_075: f64,
    #[serde(rename = "mAP_avg")]
    pub map_avg: f64,
}

pub fn evaluate(preds: &PredictionSet, gts: &[Vec<MomentSpan>]) -> GroundingReport {
    GroundingReport {
        r1_05: recall1_at_iou(preds, gts, 0.5),
        r1_07: recall1_at_iou(preds, gts, 0.7),
        map_05: average_precision(preds, gts, 0.5),
        map_075: average_precision(preds, gts, 0.75),
        map_avg: mean_ap(preds, gts, &default_map_thresholds()).mean,
    }
}

/// Writes the report JSON.
pub fn write_report(path: impl AsRef<Path>, report: &GroundingReport) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

/// Writes `vid,qid,top1_iou` rows.
pub fn write_top1_csv(
    path: impl AsRef<Path>,
    ids: &[(String, u64)],
    preds: &PredictionSet,
    gts: &[Vec<MomentSpan>],
) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "vid,qid,top1_iou")?;
        for ((vid, qid), (p, g)) in ids.iter().zip(preds.iter().zip(gts)) {
            let iou = top1_iou(p, g).unwrap_or(0.0);
            writeln!(out, "{vid},{qid},{iou:.6}")?;
        }
        out.flush()
    };
    write().map_err(io_err(path))
}
