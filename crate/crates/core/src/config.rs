//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    /// Fixed answer vocabulary: one fused `K`-way score head.
    #[default]
    ClosedSet,
    /// Per-question candidate sequences, each scored to a scalar.
    MultipleChoice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Raw video feature width.
    pub d_video: usize,
    /// Raw question (and candidate) token width.
    pub d_question: usize,
    pub d_model: usize,
    pub heads: usize,
    pub n_self_layers: usize,
    pub n_cross_layers: usize,
    /// Anchor scales as denominators: `m` stands for scale `1/m`.
    pub anchor_scales: Vec<u32>,
    pub fusion_rank: usize,
    /// Number of answers `K`.
    pub num_answers: usize,
    pub answer_mode: AnswerMode,
    pub dropout: f64,
    pub use_position_embedding: bool,
    pub max_video_len: usize,
    pub max_question_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_video: 16,
            d_question: 16,
            d_model: 32,
            heads: 8,
            n_self_layers: 2,
            n_cross_layers: 1,
            anchor_scales: vec![1, 2, 3, 4, 5],
            fusion_rank: 16,
            num_answers: 5,
            answer_mode: AnswerMode::ClosedSet,
            dropout: 0.1,
            use_position_embedding: true,
            max_video_len: 64,
            max_question_len: 16,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_video", self.d_video),
            ("d_question", self.d_question),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("n_self_layers", self.n_self_layers),
            ("n_cross_layers", self.n_cross_layers),
            ("fusion_rank", self.fusion_rank),
            ("num_answers", self.num_answers),
            ("max_video_len", self.max_video_len),
            ("max_question_len", self.max_question_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be a positive integer"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("{} does not divide d_model = {}", self.heads, self.d_model),
            ));
        }
        validate_scales(&self.anchor_scales)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub(crate) fn validate_scales(scales: &[u32]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::config("anchor_scales", "must not be empty"));
    }
    for (i, &m) in scales.iter().enumerate() {
        if m == 0 {
            return Err(Error::config("anchor_scales", "denominator 0 is not a scale"));
        }
        if scales[..i].contains(&m) {
            return Err(Error::config("anchor_scales", format!("duplicate scale 1/{m}")));
        }
    }
    Ok(())
}
