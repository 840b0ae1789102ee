//! Model configuration, parameter layout and the full forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::FeatureSequence;
use crate::encoder::{encode_pair, EncodedPair, EncoderParams};
use crate::error::{Error, Result};
use crate::event_reasoning::{event_reasoning, EventParams, MomentQuerySet};
use crate::geometry::MomentSpan;
use crate::layers::Initializer;
use crate::moment_reasoning::{decode, memory_positions, predict_heads, DecoderMemory, DecoderParams, Prediction};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Matrix, Real};

/// Architecture hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub video_dim: usize,
    pub sentence_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Encoder and decoder depth.
    pub layers: usize,
    pub num_queries: usize,
    pub slot_iterations: usize,
    pub ffn_multiplier: usize,
    pub dropout: f64,
    /// Initialize queries from slot-attention event units; otherwise the
    /// queries are input-agnostic learned anchors with zero content.
    pub event_reasoning: bool,
    /// Use the gated fusion layer as the first decoder layer.
    pub gated_fusion: bool,
    /// Build the similarity matrix for pseudo events from features that
    /// include the frame positional encoding.
    pub tsm_include_pe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            video_dim: 64,
            sentence_dim: 64,
            hidden: 256,
            heads: 8,
            layers: 3,
            num_queries: 10,
            slot_iterations: 3,
            ffn_multiplier: 4,
            dropout: 0.1,
            event_reasoning: true,
            gated_fusion: true,
            tsm_include_pe: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.video_dim == 0 || self.sentence_dim == 0 {
            return fail("input feature dimensions must be positive".into());
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return fail(format!("hidden size must be even and positive, got {}", self.hidden));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.layers == 0 || self.num_queries == 0 || self.slot_iterations == 0 || self.ffn_multiplier == 0 {
            return fail("layers, num_queries, slot_iterations and ffn_multiplier must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Where the initial queries come from.
#[derive(Debug, Clone, Copy)]
pub enum QuerySource {
    Events(EventParams),
    /// Learned `N × 2` logits of `(center, width)`.
    Anchors(ParamId),
}

/// Parameter handles of every model component.
#[derive(Debug, Clone)]
pub struct Layout {
    pub encoder: EncoderParams,
    pub queries: QuerySource,
    pub decoder: DecoderParams,
}

impl Layout {
    pub fn build<F: Real>(config: &ModelConfig, init: &mut Initializer<F>) -> Self {
        let d = config.hidden;
        let ffn = d * config.ffn_multiplier;
        let encoder = EncoderParams::new(
            init,
            config.video_dim,
            config.sentence_dim,
            d,
            config.heads,
            ffn,
            config.layers,
        );
        let queries = if config.event_reasoning {
            QuerySource::Events(EventParams::new(init, config.num_queries, d))
        } else {
            QuerySource::Anchors(init.uniform("queries.anchors", config.num_queries, 2, -2.0, 2.0))
        };
        let decoder = DecoderParams::new(init, d, config.heads, ffn, config.layers, config.gated_fusion);
        Self {
            encoder,
            queries,
            decoder,
        }
    }
}

/// Model configuration, parameters and their layout.
#[derive(Debug, Clone)]
pub struct ModelState<F: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub layout: Layout,
}

impl<F: Real> ModelState<F> {
    /// Deterministically initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = {
            let mut init = Initializer {
                store: &mut params,
                rng: ChaCha8Rng::seed_from_u64(seed),
            };
            Layout::build(&config, &mut init)
        };
        Ok(Self { config, params, layout })
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<G: Real>(&self) -> ModelState<G> {
        ModelState {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Replaces parameters, checking names and shapes against the layout.
    pub fn with_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for ((_, name, value), (_, other_name, other)) in fresh.params.iter().zip(params.iter()) {
            if name != other_name || value.shape() != other.shape() {
                return Err(Error::Config(format!(
                    "parameter `{other_name}` {:?} does not match expected `{name}` {:?}",
                    other.shape(),
                    value.shape()
                )));
            }
        }
        Ok(Self {
            config: fresh.config,
            params,
            layout: fresh.layout,
        })
    }
}

/// Everything a forward pass produces for one sample.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub encoded: EncodedPair,
    /// Event-unit queries when event reasoning is enabled.
    pub events: Option<MomentQuerySet>,
    /// Initial positional queries `N × 2`.
    pub initial_positions: Var,
    /// Per decoder layer predictions; the last entry is the final output.
    pub predictions: Vec<Prediction>,
    /// Cross-attention nodes per decoder layer; see [`Graph::attention_probs`].
    pub cross_attention: Vec<Var>,
    pub gates: Option<Var>,
}

impl ForwardOutput {
    pub fn last(&self) -> &Prediction {
        self.predictions.last().expect("at least one decoder layer")
    }
}

/// Full forward pass for one video–sentence pair.
pub fn forward<F: Real>(
    g: &mut Graph<F>,
    model: &ModelState<F>,
    video: &FeatureSequence,
    sentence: &FeatureSequence,
) -> Result<ForwardOutput> {
    let config = &model.config;
    let layout = &model.layout;
    let d = config.hidden;
    let encoded = encode_pair(g, &layout.encoder, video, sentence)?;

    let (events, content, positions) = match &layout.queries {
        QuerySource::Events(params) => {
            let q = event_reasoning(g, params, encoded.video, &encoded.video_mask, config.slot_iterations);
            let (c, p) = (q.content, q.positions);
            (Some(q), c, p)
        }
        QuerySource::Anchors(anchors) => {
            let content = g.input(Matrix::zeros(config.num_queries, d));
            let a = g.param(*anchors);
            (None, content, g.sigmoid(a))
        }
    };

    let global_sentence = g.max_pool_rows(encoded.sentence, Some(&encoded.sentence_mask));
    let pos = memory_positions(video.len(), video.valid_len(), sentence.len(), d);
    let memory = DecoderMemory {
        features: encoded.joint,
        positions: g.input(pos),
        mask: encoded.joint_mask.clone(),
    };
    let decoded = decode(g, &layout.decoder, content, positions, &memory, global_sentence);
    let predictions = decoded
        .states
        .iter()
        .map(|s| predict_heads(g, &layout.decoder, s))
        .collect();
    Ok(ForwardOutput {
        encoded,
        events,
        initial_positions: positions,
        predictions,
        cross_attention: decoded.states.iter().map(|s| s.cross_attention).collect(),
        gates: decoded.gates,
    })
}

/// Decoder diagnostics of one sample in evaluation mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionDump {
    /// Per decoder layer, the head-averaged `N × (L_v + L_s)` cross-attention.
    pub cross_attention: Vec<Vec<Vec<f64>>>,
    /// Per-query sentence gates of the gated fusion layer.
    pub gates: Option<Vec<Vec<f64>>>,
}

fn matrix_rows<F: Real>(m: &Matrix<F>) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|v| v.to_f64()).collect())
        .collect()
}

fn head_average<F: Real>(g: &Graph<F>, att: Var) -> Vec<Vec<f64>> {
    let probs = g.attention_probs(att).expect("cross-attention node");
    let (n, m) = (probs[0].rows(), probs[0].cols());
    let heads = probs.len() as f64;
    (0..n)
        .map(|r| {
            (0..m)
                .map(|c| probs.iter().map(|p| p.get(r, c).to_f64()).sum::<f64>() / heads)
                .collect()
        })
        .collect()
}

/// Cross-attention maps and fusion gates of one sample.
pub fn attention_dump<F: Real>(
    model: &ModelState<F>,
    video: &FeatureSequence,
    sentence: &FeatureSequence,
) -> Result<AttentionDump> {
    let mut g = Graph::new(&model.params);
    let out = forward(&mut g, model, video, sentence)?;
    Ok(AttentionDump {
        cross_attention: out.cross_attention.iter().map(|&a| head_average(&g, a)).collect(),
        gates: out.gates.map(|v| matrix_rows(g.value(v))),
    })
}

/// Converts an `N × 2` span matrix to valid spans.
pub fn spans_from_matrix<F: Real>(m: &Matrix<F>) -> Vec<MomentSpan> {
    (0..m.rows())
        .map(|r| MomentSpan::from_prediction(m.get(r, 0).to_f64(), m.get(r, 1).to_f64()))
        .collect()
}

/// Ranked `(span, confidence)` predictions of one sample in evaluation mode.
pub fn predict<F: Real>(
    model: &ModelState<F>,
    video: &FeatureSequence,
    sentence: &FeatureSequence,
) -> Result<Vec<(MomentSpan, f64)>> {
    let mut g = Graph::new(&model.params);
    let out = forward(&mut g, model, video, sentence)?;
    let last = out.last();
    let spans = spans_from_matrix(g.value(last.spans));
    let conf = g.value(last.confidence);
    let mut preds: Vec<(MomentSpan, f64)> = spans
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, conf.get(i, 0).to_f64()))
        .collect();
    preds.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(preds)
}
