//! Training objectives: the saliency margin loss, the Hungarian-matched
//! event and moment losses, and their weighted sum.
//!
//! Each loss has a plain `f64` evaluator and a differentiable version on
//! the autodiff graph; both compute the same quantity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{event_cost_matrix, hungarian, moment_cost_matrix, CostWeights};
use crate::autograd::{Graph, Var};
use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::geometry::MomentSpan;
use crate::model::{spans_from_matrix, ForwardOutput};
use crate::moment_reasoning::Prediction;
use crate::pseudo_events::pseudo_events;
use crate::tensor::{Matrix, Real};

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Weights of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_sal: f64,
    pub lambda_event: f64,
    /// Saliency margin.
    pub alpha: f64,
    pub cost: CostWeights,
    /// Weight of `−log(1 − p)` for queries left unmatched.
    pub background_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sal: 1.0,
            lambda_event: 2.0,
            alpha: 0.2,
            cost: CostWeights::default(),
            background_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        self.cost.validate()?;
        let ok = [self.lambda_sal, self.lambda_event, self.alpha, self.background_weight]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")))
        }
    }
}

/// Scalar loss components of one sample or batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub moment: f64,
    pub saliency: f64,
    pub event: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        [self.moment, self.saliency, self.event, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L_moment + λ_sal·L_sal + λ_event·L_event`.
pub fn overall_loss(moment: f64, saliency: f64, event: f64, weights: &LossWeights) -> f64 {
    moment + weights.lambda_sal * saliency + weights.lambda_event * event
}

/// `max(0, α + out − in)`.
pub fn saliency_hinge(inside: f64, outside: f64, alpha: f64) -> f64 {
    (alpha + (outside - inside)).max(0.0)
}

/// Marks frames whose midpoint lies inside any ground-truth interval.
pub fn frames_inside(gt: &[MomentSpan], len: usize) -> Vec<bool> {
    (0..len)
        .map(|i| {
            let t = (i as f64 + 0.5) / len as f64;
            gt.iter().any(|s| {
                let (a, b) = s.interval();
                t >= a && t <= b
            })
        })
        .collect()
}

/// Draws one frame inside and one outside the ground truth, or `None` when
/// either set is empty.
pub fn sample_saliency_pair(inside: &[bool], rng: &mut impl Rng) -> Option<(usize, usize)> {
    let ins: Vec<usize> = (0..inside.len()).filter(|&i| inside[i]).collect();
    let outs: Vec<usize> = (0..inside.len()).filter(|&i| !inside[i]).collect();
    if ins.is_empty() || outs.is_empty() {
        return None;
    }
    let i = ins[rng.random_range(0..ins.len())];
    let o = outs[rng.random_range(0..outs.len())];
    Some((i, o))
}

/// Event loss: total matched span cost between predicted and pseudo spans.
pub fn event_loss_value(predicted: &[MomentSpan], pseudo: &[MomentSpan], weights: &CostWeights) -> Result<f64> {
    if pseudo.is_empty() || predicted.is_empty() {
        return Ok(0.0);
    }
    Ok(hungarian(&event_cost_matrix(pseudo, predicted, weights))?.total_cost)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Moment loss with the background term for unmatched queries.
pub fn moment_loss_value(
    moments: &[MomentSpan],
    confidence: &[f64],
    gt: &[MomentSpan],
    weights: &CostWeights,
    background_weight: f64,
) -> Result<f64> {
    let assignment = hungarian(&moment_cost_matrix(gt, moments, confidence, weights)?)?;
    let mut matched = vec![false; moments.len()];
    let mut loss = 0.0;
    for &(i, j) in &assignment.pairs {
        matched[j] = true;
        loss += -weights.lambda_c * clamp_prob(confidence[j]).ln() + weights.span_cost(&gt[i], &moments[j]);
    }
    for (j, _) in matched.iter().enumerate().filter(|(_, m)| !**m) {
        loss += background_weight * -(1.0 - clamp_prob(confidence[j])).ln();
    }
    Ok(loss)
}

fn scalar<F: Real>(g: &mut Graph<F>, v: f64) -> Var {
    g.input(Matrix::filled(1, 1, F::from_f64(v)))
}

/// Differentiable saliency hinge on two frames of the `L × 1` score column.
pub fn saliency_loss<F: Real>(g: &mut Graph<F>, scores: Var, inside: usize, outside: usize, alpha: f64) -> Var {
    let s_in = g.slice_rows(scores, inside, 1);
    let s_out = g.slice_rows(scores, outside, 1);
    let diff = g.sub(s_out, s_in);
    let shifted = g.affine(diff, F::ONE, F::from_f64(alpha));
    g.relu(shifted)
}

/// `Σ λ_l1·|p − t|₁ + λ_iou·(1 − gIoU)` over `(target, prediction)` pairs,
/// using clamped intervals as the geometry module does.
pub fn matched_span_cost<F: Real>(
    g: &mut Graph<F>,
    predicted: Var,
    pairs: &[(usize, usize)],
    targets: &[MomentSpan],
    weights: &CostWeights,
) -> Var {
    if pairs.is_empty() {
        return scalar(g, 0.0);
    }
    let idx: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let pred = g.gather_rows(predicted, &idx);
    let col = |f: &dyn Fn(&MomentSpan) -> f64| -> Matrix<F> {
        Matrix::from_fn(pairs.len(), 1, |r, _| F::from_f64(f(&targets[pairs[r].0])))
    };
    let target = Matrix::from_fn(pairs.len(), 2, |r, c| {
        let t = &targets[pairs[r].0];
        F::from_f64(if c == 0 { t.center() } else { t.width() })
    });
    let target = g.input(target);
    let diff = g.sub(pred, target);
    let abs = g.abs(diff);
    let l1 = g.sum(abs);

    let c = g.slice_cols(pred, 0, 1);
    let w = g.slice_cols(pred, 1, 1);
    let half = g.scale(w, F::from_f64(0.5));
    let s = g.sub(c, half);
    let s = g.clamp(s, F::ZERO, F::ONE);
    let e = g.add(c, half);
    let e = g.clamp(e, F::ZERO, F::ONE);
    let ts = g.input(col(&|t| t.interval().0));
    let te = g.input(col(&|t| t.interval().1));

    let lo = g.maximum(s, ts);
    let hi = g.minimum(e, te);
    let gap = g.sub(hi, lo);
    let inter = g.relu(gap);
    let len_p = g.sub(e, s);
    let len_t = g.sub(te, ts);
    let lens = g.add(len_p, len_t);
    let union = g.sub(lens, inter);
    let outer_hi = g.maximum(e, te);
    let outer_lo = g.minimum(s, ts);
    let enclosure = g.sub(outer_hi, outer_lo);
    // 1 − gIoU = 2 − inter/union − union/enclosure
    let iou = g.div(inter, union);
    let fill = g.div(union, enclosure);
    let both = g.add(iou, fill);
    let one_minus = g.affine(both, -F::ONE, F::from_f64(2.0));
    let giou_term = g.sum(one_minus);

    let a = g.scale(l1, F::from_f64(weights.lambda_l1));
    let b = g.scale(giou_term, F::from_f64(weights.lambda_iou));
    g.add(a, b)
}

/// Differentiable event loss on `N × 2` positions against pseudo events.
pub fn event_loss<F: Real>(
    g: &mut Graph<F>,
    positions: Var,
    pseudo: &[MomentSpan],
    weights: &CostWeights,
) -> Result<Var> {
    let predicted = spans_from_matrix(g.value(positions));
    if pseudo.is_empty() || predicted.is_empty() {
        return Ok(scalar(g, 0.0));
    }
    let assignment = hungarian(&event_cost_matrix(pseudo, &predicted, weights))?;
    Ok(matched_span_cost(g, positions, &assignment.pairs, pseudo, weights))
}

/// Differentiable moment loss of one decoder layer's predictions.
pub fn moment_loss<F: Real>(
    g: &mut Graph<F>,
    prediction: &Prediction,
    gt: &[MomentSpan],
    weights: &CostWeights,
    background_weight: f64,
) -> Result<Var> {
    let moments = spans_from_matrix(g.value(prediction.spans));
    let conf: Vec<f64> = g
        .value(prediction.confidence)
        .data()
        .iter()
        .map(|v| v.to_f64())
        .collect();
    let assignment = hungarian(&moment_cost_matrix(gt, &moments, &conf, weights)?)?;
    let span_cost = matched_span_cost(g, prediction.spans, &assignment.pairs, gt, weights);

    let eps = F::from_f64(PROB_EPS);
    let p = g.clamp(prediction.confidence, eps, F::ONE - eps);
    let log_p = g.ln(p);
    let not_p = g.affine(p, -F::ONE, F::ONE);
    let log_not_p = g.ln(not_p);
    let mut matched_mask = Matrix::zeros(moments.len(), 1);
    for &(_, j) in &assignment.pairs {
        matched_mask.set(j, 0, F::ONE);
    }
    let background_mask = matched_mask.map(|m| F::ONE - m);
    let fg = g.mul_const(log_p, matched_mask);
    let fg = g.sum(fg);
    let fg = g.scale(fg, F::from_f64(-weights.lambda_c));
    let bg = g.mul_const(log_not_p, background_mask);
    let bg = g.sum(bg);
    let bg = g.scale(bg, F::from_f64(-background_weight));
    Ok(g.add_all(&[span_cost, fg, bg]))
}

/// Which loss terms participate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Sum the moment loss over every decoder layer.
    pub aux_loss: bool,
    /// Supervise event-unit positions with pseudo events.
    pub event_loss: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            aux_loss: true,
            event_loss: true,
        }
    }
}

/// Loss of one sample: the differentiable total plus logged components.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub total: Var,
    pub components: LossComponents,
    /// Set when the saliency term was skipped because the ground truth
    /// covers all frames or none.
    pub saliency_skipped: bool,
    pub pseudo_events: Vec<MomentSpan>,
}

/// Pseudo events from the projected video features of the valid frames.
pub fn sample_pseudo_events<F: Real>(g: &Graph<F>, out: &ForwardOutput, include_pe: bool) -> Result<Vec<MomentSpan>> {
    let source = if include_pe {
        out.encoded.video
    } else {
        out.encoded.video_content
    };
    let valid: Vec<usize> = (0..out.encoded.video_mask.len())
        .filter(|&i| out.encoded.video_mask[i])
        .collect();
    pseudo_events(&g.value(source).select_rows(&valid))
}

/// Overall objective of one forward pass.
pub fn sample_loss<F: Real>(
    g: &mut Graph<F>,
    out: &ForwardOutput,
    sample: &GroundingSample,
    weights: &LossWeights,
    options: LossOptions,
    tsm_include_pe: bool,
    rng: &mut impl Rng,
) -> Result<SampleLoss> {
    let layers: &[Prediction] = if options.aux_loss {
        &out.predictions
    } else {
        std::slice::from_ref(out.last())
    };
    let mut moment_terms = Vec::with_capacity(layers.len());
    for p in layers {
        moment_terms.push(moment_loss(
            g,
            p,
            &sample.gt_moments,
            &weights.cost,
            weights.background_weight,
        )?);
    }
    let moment = g.add_all(&moment_terms);

    let inside = frames_inside(&sample.gt_moments, sample.video.valid_len());
    let pair = sample_saliency_pair(&inside, rng);
    let saliency = match pair {
        Some((i, o)) => saliency_loss(g, out.encoded.saliency, i, o, weights.alpha),
        None => scalar(g, 0.0),
    };

    let (event, pseudo) = match (&out.events, options.event_loss) {
        (Some(events), true) => {
            let pseudo = sample_pseudo_events(g, out, tsm_include_pe)?;
            (event_loss(g, events.positions, &pseudo, &weights.cost)?, pseudo)
        }
        _ => (scalar(g, 0.0), Vec::new()),
    };

    let sal_w = g.scale(saliency, F::from_f64(weights.lambda_sal));
    let ev_w = g.scale(event, F::from_f64(weights.lambda_event));
    let total = g.add_all(&[moment, sal_w, ev_w]);
    let components = LossComponents {
        moment: g.scalar(moment).to_f64(),
        saliency: g.scalar(saliency).to_f64(),
        event: g.scalar(event).to_f64(),
        total: g.scalar(total).to_f64(),
    };
    Ok(SampleLoss {
        total,
        components,
        saliency_skipped: pair.is_none(),
        pseudo_events: pseudo,
    })
}
