//! Event reasoning: iterative slot attention over video frames turns a set
//! of learned slots into event units, which become the initial content and
//! positional moment queries.

use crate::autograd::{Graph, Var};
use crate::layers::{Initializer, LayerNorm, Linear};
use crate::params::ParamId;
use crate::tensor::Real;

/// Denominator guard of the per-slot frame normalization.
pub const SLOT_NORM_EPS: f64 = 1e-8;

/// Standard deviation of the initial slot parameters.
pub const SLOT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct EventParams {
    /// Initial slots `N × d`.
    pub slots: ParamId,
    pub video_norm: LayerNorm,
    pub slot_norm: LayerNorm,
    pub update_norm: LayerNorm,
    pub video_key: Linear,
    pub slot_query: Linear,
    pub video_value: Linear,
    pub update: Linear,
    pub span: Linear,
}

impl EventParams {
    pub fn new<F: Real>(init: &mut Initializer<F>, num_slots: usize, dim: usize) -> Self {
        Self {
            slots: init.normal("events.slots", num_slots, dim, SLOT_INIT_STD),
            video_norm: LayerNorm::new(init, "events.video_norm", dim),
            slot_norm: LayerNorm::new(init, "events.slot_norm", dim),
            update_norm: LayerNorm::new(init, "events.update_norm", dim),
            video_key: Linear::no_bias(init, "events.video_key", dim, dim),
            slot_query: Linear::no_bias(init, "events.slot_query", dim, dim),
            video_value: Linear::no_bias(init, "events.video_value", dim, dim),
            update: Linear::no_bias(init, "events.update", dim, dim),
            span: Linear::new(init, "events.span", dim, 2),
        }
    }
}

/// Video projections reused by every slot-attention iteration.
#[derive(Debug, Clone, Copy)]
pub struct SlotContext {
    /// `LN(h_v)·W1`
    pub keys: Var,
    /// `h_v·W3`
    pub values: Var,
}

impl SlotContext {
    pub fn new<F: Real>(g: &mut Graph<F>, params: &EventParams, video: Var) -> Self {
        let normed = params.video_norm.forward(g, video);
        let keys = params.video_key.forward(g, normed);
        let values = params.video_value.forward(g, video);
        Self { keys, values }
    }
}

/// Output of one slot-attention iteration.
#[derive(Debug, Clone, Copy)]
pub struct SlotStep {
    pub slots: Var,
    /// Frame-to-slot attention `L_v × N`, softmax over slots.
    pub attention: Var,
    /// Attention normalized over valid frames per slot.
    pub weights: Var,
}

/// One slot-attention update with shared projections.
pub fn slot_attention_step<F: Real>(
    g: &mut Graph<F>,
    params: &EventParams,
    ctx: &SlotContext,
    slots: Var,
    frame_mask: &[bool],
) -> SlotStep {
    let dim = g.shape(slots).1;
    let normed = params.slot_norm.forward(g, slots);
    let queries = params.slot_query.forward(g, normed);
    let logits = g.matmul_nt(ctx.keys, queries);
    let logits = g.scale(logits, F::from_f64(1.0 / (dim as f64).sqrt()));
    let attention = g.softmax_rows(logits, None);
    let weights = g.normalize_cols(attention, Some(frame_mask), F::from_f64(SLOT_NORM_EPS));
    let gathered = g.matmul_tn(weights, ctx.values);
    let u = g.add(gathered, slots);
    let normed_u = params.update_norm.forward(g, u);
    let delta = params.update.forward(g, normed_u);
    let slots = g.add(delta, u);
    SlotStep {
        slots,
        attention,
        weights,
    }
}

/// Initial moment queries derived from event units.
#[derive(Debug, Clone)]
pub struct MomentQuerySet {
    /// Content queries `N × d`.
    pub content: Var,
    /// Positional queries `N × 2` as `(center, width)` in `(0, 1)`.
    pub positions: Var,
    pub steps: Vec<SlotStep>,
}

/// Maps slots to `(center, width)` through a sigmoid.
pub fn slot_positions<F: Real>(g: &mut Graph<F>, params: &EventParams, slots: Var) -> Var {
    let raw = params.span.forward(g, slots);
    g.sigmoid(raw)
}

/// Runs `iterations` slot-attention steps from the learned initial slots.
pub fn event_reasoning<F: Real>(
    g: &mut Graph<F>,
    params: &EventParams,
    video: Var,
    frame_mask: &[bool],
    iterations: usize,
) -> MomentQuerySet {
    let ctx = SlotContext::new(g, params, video);
    let mut slots = g.param(params.slots);
    let mut steps = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let step = slot_attention_step(g, params, &ctx, slots, frame_mask);
        slots = step.slots;
        steps.push(step);
    }
    let positions = slot_positions(g, params, slots);
    MomentQuerySet {
        content: slots,
        positions,
        steps,
    }
}
