//! Moment reasoning: gated fusion of the queries with the sentence, decoder
//! refinement of the positional queries and the span/confidence heads.

use crate::autograd::{Graph, Var};
use crate::geometry::COORD_TEMPERATURE;
use crate::layers::{
    position_table, residual_norm, FeedForward, Initializer, LayerNorm, Linear, Mlp, MultiHeadAttention,
};
use crate::tensor::{Matrix, Real};

/// Clamp used before the inverse sigmoid.
pub const LOGIT_EPS: f64 = 1e-5;

/// `MLP(concat(PE(c), PE(w)))`, `2d → d → d`.
#[derive(Debug, Clone)]
pub struct PositionEmbedding {
    pub mlp: Mlp,
}

impl PositionEmbedding {
    pub fn new<F: Real>(init: &mut Initializer<F>, dim: usize) -> Self {
        Self {
            mlp: Mlp::new(init, "decoder.position_mlp", &[2 * dim, dim, dim], false),
        }
    }
}

/// Sinusoidal encoding of each query center, `N × d`.
pub fn center_encoding<F: Real>(g: &mut Graph<F>, positions: Var, dim: usize) -> Var {
    let c = g.slice_cols(positions, 0, 1);
    g.sinusoid(c, dim, COORD_TEMPERATURE)
}

/// Embeds `(center, width)` rows into `d` dimensions.
pub fn embed_positional_query<F: Real>(g: &mut Graph<F>, emb: &PositionEmbedding, positions: Var, dim: usize) -> Var {
    let c = g.slice_cols(positions, 0, 1);
    let w = g.slice_cols(positions, 1, 1);
    let pc = g.sinusoid(c, dim, COORD_TEMPERATURE);
    let pw = g.sinusoid(w, dim, COORD_TEMPERATURE);
    let cat = g.concat_cols(&[pc, pw]);
    emb.mlp.forward(g, cat)
}

/// Key positions of the decoder memory: sinusoidal encoding of each video
/// frame's normalized midpoint, zeros for sentence tokens.
pub fn memory_positions<F: Real>(video_len: usize, video_valid: usize, sentence_len: usize, dim: usize) -> Matrix<F> {
    let denom = video_valid.max(1) as f64;
    let video: Matrix<F> = position_table((0..video_len).map(|i| (i as f64 + 0.5) / denom), dim, COORD_TEMPERATURE);
    let mut data = video.into_vec();
    data.resize((video_len + sentence_len) * dim, F::ZERO);
    Matrix::from_vec(video_len + sentence_len, dim, data)
}

/// Cross-attention whose scores add a content term and a positional term:
/// queries concatenate projected content with the scaled center encoding,
/// keys concatenate projected memory with the memory positions.
#[derive(Debug, Clone, Copy)]
pub struct ModulatedCrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    /// Content-conditioned per-dimension scale of the center encoding.
    pub position_scale: Linear,
    pub heads: usize,
}

impl ModulatedCrossAttention {
    pub fn new<F: Real>(init: &mut Initializer<F>, name: &str, dim: usize, heads: usize) -> Self {
        let position_scale = Linear {
            weight: init.constant(&format!("{name}.position_scale.weight"), dim, dim, 0.0),
            bias: Some(init.constant(&format!("{name}.position_scale.bias"), 1, dim, 1.0)),
        };
        Self {
            query: Linear::new(init, &format!("{name}.query"), dim, dim),
            key: Linear::new(init, &format!("{name}.key"), dim, dim),
            value: Linear::new(init, &format!("{name}.value"), dim, dim),
            output: Linear::new(init, &format!("{name}.output"), dim, dim),
            position_scale,
            heads,
        }
    }

    /// Returns the projected output and the attention node.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        content: Var,
        center_pe: Var,
        memory: &DecoderMemory,
    ) -> (Var, Var) {
        let q = self.query.forward(g, content);
        let k = self.key.forward(g, memory.features);
        let v = self.value.forward(g, memory.features);
        let scale = self.position_scale.forward(g, content);
        let q_pos = g.mul(center_pe, scale);
        let att = g.attention(&[(q, k), (q_pos, memory.positions)], v, self.heads, Some(&memory.mask));
        (self.output.forward(g, att), att)
    }
}

/// Encoder output seen by the decoder.
#[derive(Debug, Clone)]
pub struct DecoderMemory {
    pub features: Var,
    pub positions: Var,
    pub mask: Vec<bool>,
}

/// Self-attention, modulated cross-attention and feed-forward, each
/// followed by a residual connection and layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_attention: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attention: ModulatedCrossAttention,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl DecoderLayer {
    pub fn new<F: Real>(init: &mut Initializer<F>, name: &str, dim: usize, heads: usize, ffn: usize) -> Self {
        Self {
            self_attention: MultiHeadAttention::new(init, &format!("{name}.self_attention"), dim, heads),
            self_norm: LayerNorm::new(init, &format!("{name}.self_norm"), dim),
            cross_attention: ModulatedCrossAttention::new(init, &format!("{name}.cross_attention"), dim, heads),
            cross_norm: LayerNorm::new(init, &format!("{name}.cross_norm"), dim),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), dim, ffn),
            ffn_norm: LayerNorm::new(init, &format!("{name}.ffn_norm"), dim),
        }
    }

    fn cross_and_ffn<F: Real>(
        &self,
        g: &mut Graph<F>,
        content: Var,
        center_pe: Var,
        memory: &DecoderMemory,
    ) -> (Var, Var) {
        let (cross, att) = self.cross_attention.forward(g, content, center_pe, memory);
        let content = residual_norm(g, &self.cross_norm, content, cross);
        let ff = self.ffn.forward(g, content);
        (residual_norm(g, &self.ffn_norm, content, ff), att)
    }

    /// Plain decoder layer: `q = k = C + P_emb`, `v = C`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        content: Var,
        query_pos: Var,
        center_pe: Var,
        memory: &DecoderMemory,
    ) -> (Var, Var) {
        let qk = g.add(content, query_pos);
        let (sa, _) = self.self_attention.forward(g, qk, qk, content, None);
        let content = residual_norm(g, &self.self_norm, content, sa);
        self.cross_and_ffn(g, content, center_pe, memory)
    }
}

/// Extra parameters of the gated fusion layer on top of a decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct GatedFusion {
    pub sentence_attention: MultiHeadAttention,
    pub fusion_attention: MultiHeadAttention,
    pub fusion_output: Linear,
}

impl GatedFusion {
    pub fn new<F: Real>(init: &mut Initializer<F>, dim: usize, heads: usize) -> Self {
        Self {
            sentence_attention: MultiHeadAttention::new(init, "decoder.gate.sentence_attention", dim, heads),
            fusion_attention: MultiHeadAttention::new(init, "decoder.gate.fusion_attention", dim, heads),
            fusion_output: Linear::new(init, "decoder.gate.fusion_output", dim, dim),
        }
    }
}

/// Result of the gated fusion stage before memory attention.
#[derive(Debug, Clone, Copy)]
pub struct GateOutput {
    /// Fused queries `C′`.
    pub content: Var,
    /// Gates `N × 1`.
    pub gates: Var,
    /// Aggregated sentence representation `N × d`.
    pub sentence: Var,
}

/// `C′ = MHSA(C + P_emb)`, `Ĉ = MHCA(C′, h_gs, h_gs)`, `g = σ(c′·ĉ)`,
/// `C′ ← Linear(g ⊙ MHSA(C′ + Ĉ)) + C′`.
pub fn gated_fusion<F: Real>(
    g: &mut Graph<F>,
    layer: &DecoderLayer,
    gate: &GatedFusion,
    content: Var,
    query_pos: Var,
    global_sentence: Var,
) -> GateOutput {
    let x = g.add(content, query_pos);
    let (sa, _) = layer.self_attention.forward(g, x, x, x, None);
    let enhanced = residual_norm(g, &layer.self_norm, content, sa);
    let (sentence, _) = gate
        .sentence_attention
        .forward(g, enhanced, global_sentence, global_sentence, None);
    let agreement = g.mul(enhanced, sentence);
    let dim = g.shape(enhanced).1;
    let ones = g.input(Matrix::filled(dim, 1, F::ONE));
    let dots = g.matmul(agreement, ones);
    let gates = g.sigmoid(dots);
    let fused_in = g.add(enhanced, sentence);
    let (fused, _) = gate.fusion_attention.forward(g, fused_in, fused_in, fused_in, None);
    let gated = g.mul_rows(fused, gates);
    let projected = gate.fusion_output.forward(g, gated);
    let content = g.add(projected, enhanced);
    GateOutput {
        content,
        gates,
        sentence,
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub position_embedding: PositionEmbedding,
    pub layers: Vec<DecoderLayer>,
    pub gate: Option<GatedFusion>,
    /// Offset heads after layers `1..T−1`.
    pub offsets: Vec<Mlp>,
    pub span_head: Mlp,
    pub confidence: Linear,
}

impl DecoderParams {
    pub fn new<F: Real>(
        init: &mut Initializer<F>,
        dim: usize,
        heads: usize,
        ffn: usize,
        layers: usize,
        gated: bool,
    ) -> Self {
        Self {
            position_embedding: PositionEmbedding::new(init, dim),
            layers: (0..layers)
                .map(|i| DecoderLayer::new(init, &format!("decoder.layer{i}"), dim, heads, ffn))
                .collect(),
            gate: gated.then(|| GatedFusion::new(init, dim, heads)),
            offsets: (0..layers.saturating_sub(1))
                .map(|i| Mlp::new(init, &format!("decoder.offset{i}"), &[dim, dim, 2], true))
                .collect(),
            span_head: Mlp::new(init, "decoder.span_head", &[dim, dim, dim, 2], true),
            confidence: Linear::new(init, "decoder.confidence", dim, 1),
        }
    }
}

/// State after one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub content: Var,
    /// Positional queries that entered this layer, `N × 2`.
    pub positions: Var,
    /// Cross-attention node into the memory.
    pub cross_attention: Var,
    pub layer: usize,
}

/// Decoder pass; layer 1 uses gated fusion when configured.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub states: Vec<DecoderState>,
    pub gates: Option<Var>,
}

/// `sigmoid(logit(p) + Δ)`.
pub fn refine_positions<F: Real>(g: &mut Graph<F>, positions: Var, delta: Var) -> Var {
    let logit = g.logit(positions, F::from_f64(LOGIT_EPS));
    let moved = g.add(logit, delta);
    g.sigmoid(moved)
}

pub fn decode<F: Real>(
    g: &mut Graph<F>,
    params: &DecoderParams,
    content: Var,
    positions: Var,
    memory: &DecoderMemory,
    global_sentence: Var,
) -> DecodeOutput {
    let dim = g.shape(content).1;
    let mut states = Vec::with_capacity(params.layers.len());
    let mut gates = None;
    let (mut content, mut positions) = (content, positions);
    for (l, layer) in params.layers.iter().enumerate() {
        let query_pos = embed_positional_query(g, &params.position_embedding, positions, dim);
        let center_pe = center_encoding(g, positions, dim);
        let (next, att) = match (&params.gate, l) {
            (Some(gate), 0) => {
                let out = gated_fusion(g, layer, gate, content, query_pos, global_sentence);
                gates = Some(out.gates);
                layer.cross_and_ffn(g, out.content, center_pe, memory)
            }
            _ => layer.forward(g, content, query_pos, center_pe, memory),
        };
        states.push(DecoderState {
            content: next,
            positions,
            cross_attention: att,
            layer: l + 1,
        });
        content = next;
        if let Some(head) = params.offsets.get(l) {
            let delta = head.forward(g, content);
            positions = refine_positions(g, positions, delta);
        }
    }
    DecodeOutput { states, gates }
}

/// Span and confidence predictions of one decoder state.
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    /// `N × 2` `(center, width)` in `(0, 1)`.
    pub spans: Var,
    /// `N × 1` in `(0, 1)`.
    pub confidence: Var,
}

/// Span head refines the state's positional queries in logit space; the
/// confidence head is a linear map followed by a sigmoid.
pub fn predict_heads<F: Real>(g: &mut Graph<F>, params: &DecoderParams, state: &DecoderState) -> Prediction {
    let delta = params.span_head.forward(g, state.content);
    let spans = refine_positions(g, state.positions, delta);
    let logit = params.confidence.forward(g, state.content);
    let confidence = g.sigmoid(logit);
    Prediction { spans, confidence }
}
