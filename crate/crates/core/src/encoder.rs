//! Joint video–sentence transformer encoder and the saliency head.

use crate::autograd::{Graph, Var};
use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::geometry::FRAME_TEMPERATURE;
use crate::layers::{position_table, residual_norm, FeedForward, Initializer, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamId;
use crate::tensor::{Matrix, Real};

pub const TOKEN_TYPE_INIT_STD: f64 = 1.0;

/// Post-norm encoder layer: self-attention then feed-forward. Positions are
/// added to queries and keys only.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    pub fn new<F: Real>(init: &mut Initializer<F>, name: &str, dim: usize, heads: usize, ffn: usize) -> Self {
        Self {
            attention: MultiHeadAttention::new(init, &format!("{name}.attention"), dim, heads),
            attention_norm: LayerNorm::new(init, &format!("{name}.attention_norm"), dim),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), dim, ffn),
            ffn_norm: LayerNorm::new(init, &format!("{name}.ffn_norm"), dim),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var, positions: Var, mask: &[bool]) -> Var {
        let qk = g.add(x, positions);
        let (att, _) = self.attention.forward(g, qk, qk, x, Some(mask));
        let x = residual_norm(g, &self.attention_norm, x, att);
        let ff = self.ffn.forward(g, x);
        residual_norm(g, &self.ffn_norm, x, ff)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub video_norm: LayerNorm,
    pub sentence_norm: LayerNorm,
    pub video_proj: Linear,
    pub sentence_proj: Linear,
    /// Learned modality embeddings: row 0 for sentence tokens, row 1 for video.
    pub token_type: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub saliency: Linear,
}

impl EncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        init: &mut Initializer<F>,
        video_dim: usize,
        sentence_dim: usize,
        dim: usize,
        heads: usize,
        ffn: usize,
        layers: usize,
    ) -> Self {
        Self {
            video_norm: LayerNorm::new(init, "encoder.video_norm", video_dim),
            sentence_norm: LayerNorm::new(init, "encoder.sentence_norm", sentence_dim),
            video_proj: Linear::new(init, "encoder.video_proj", video_dim, dim),
            sentence_proj: Linear::new(init, "encoder.sentence_proj", sentence_dim, dim),
            token_type: init.normal("encoder.token_type", 2, dim, TOKEN_TYPE_INIT_STD),
            layers: (0..layers)
                .map(|i| EncoderLayer::new(init, &format!("encoder.layer{i}"), dim, heads, ffn))
                .collect(),
            saliency: Linear::new(init, "encoder.saliency", dim, 1),
        }
    }
}

/// Encoder outputs for one video–sentence pair.
#[derive(Debug, Clone)]
pub struct EncodedPair {
    /// `(L_v + L_s) × d`, video rows first.
    pub joint: Var,
    pub video_part: Var,
    pub sentence_part: Var,
    /// `L_v × 1` saliency scores.
    pub saliency: Var,
    /// Projected video features before the frame positional encoding.
    pub video_content: Var,
    /// Projected video features with the frame positional encoding.
    pub video: Var,
    /// Projected sentence features (no positional encoding).
    pub sentence: Var,
    pub video_mask: Vec<bool>,
    pub sentence_mask: Vec<bool>,
    pub joint_mask: Vec<bool>,
}

/// Frame-index sinusoidal table `L × d`.
pub fn frame_positions<F: Real>(len: usize, dim: usize) -> Matrix<F> {
    position_table((0..len).map(|i| i as f64), dim, FRAME_TEMPERATURE)
}

fn check_dim(seq: &FeatureSequence, expected: usize, what: &str) -> Result<()> {
    if seq.dim() != expected {
        return Err(Error::Config(format!(
            "{what} features have dimension {}, model expects {expected}",
            seq.dim()
        )));
    }
    Ok(())
}

/// Normalizes and projects both modalities and runs the joint encoder with
/// frame positions on the video queries and keys.
pub fn encode_pair<F: Real>(
    g: &mut Graph<F>,
    params: &EncoderParams,
    video: &FeatureSequence,
    sentence: &FeatureSequence,
) -> Result<EncodedPair> {
    let dim = g.params().get(params.video_proj.weight).cols();
    check_dim(video, g.params().get(params.video_proj.weight).rows(), "video")?;
    check_dim(sentence, g.params().get(params.sentence_proj.weight).rows(), "sentence")?;

    let v_in = g.input(video.tokens().cast());
    let s_in = g.input(sentence.tokens().cast());
    let v_in = params.video_norm.forward(g, v_in);
    let video_content = params.video_proj.forward(g, v_in);
    let pe = g.input(frame_positions(video.len(), dim));
    let h_v = g.add(video_content, pe);
    let s_in = params.sentence_norm.forward(g, s_in);
    let h_s = params.sentence_proj.forward(g, s_in);

    let mut joint_mask = video.mask().to_vec();
    joint_mask.extend_from_slice(sentence.mask());
    let token_type = g.param(params.token_type);
    let sentence_type = g.slice_rows(token_type, 0, 1);
    let video_type = g.slice_rows(token_type, 1, 1);
    let typed_video = g.add_bias(video_content, video_type);
    let typed_sentence = g.add_bias(h_s, sentence_type);
    let mut x = g.concat_rows(&[typed_video, typed_sentence]);
    x = g.dropout(x);
    let sentence_pe = g.input(Matrix::zeros(sentence.len(), dim));
    let positions = g.concat_rows(&[pe, sentence_pe]);
    for layer in &params.layers {
        x = layer.forward(g, x, positions, &joint_mask);
    }
    let video_part = g.slice_rows(x, 0, video.len());
    let sentence_part = g.slice_rows(x, video.len(), sentence.len());
    let saliency = saliency_scores(g, params, video_part);
    Ok(EncodedPair {
        joint: x,
        video_part,
        sentence_part,
        saliency,
        video_content,
        video: h_v,
        sentence: h_s,
        video_mask: video.mask().to_vec(),
        sentence_mask: sentence.mask().to_vec(),
        joint_mask,
    })
}

/// One linear score per encoded video frame.
pub fn saliency_scores<F: Real>(g: &mut Graph<F>, params: &EncoderParams, video_part: Var) -> Var {
    params.saliency.forward(g, video_part)
}
