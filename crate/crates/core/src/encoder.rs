//! Per-modality projection and stacked self-attention encoding.
//!
//! Blocks are post-norm transformer layers:
//! `x = LN(x + MHA(x, kv, kv))`, then `x = LN(x + Dropout(FFN(x)))`, where the
//! feed-forward is `Linear(d, 4d) → ReLU → Linear(4d, d)`. Dropout is applied to
//! attention weights and to the feed-forward output.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Question,
}

/// A `length × dim` sequence of token features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    tokens: Matrix,
    modality: Modality,
}

impl FeatureSequence {
    pub fn new(tokens: Matrix, modality: Modality) -> Result<Self> {
        if tokens.rows() == 0 || tokens.cols() == 0 {
            return Err(Error::RejectedInput(format!(
                "{modality:?} sequence must have length >= 1 and dim >= 1, got {}x{}",
                tokens.rows(),
                tokens.cols()
            )));
        }
        if !tokens.all_finite() {
            return Err(Error::RejectedInput(format!(
                "{modality:?} sequence contains non-finite entries"
            )));
        }
        Ok(Self { tokens, modality })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn into_tokens(self) -> Matrix {
        self.tokens
    }
}

/// Forward-pass mode. Training mode carries the dropout RNG.
pub struct Mode<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
    rate: f64,
}

impl<'a> Mode<'a> {
    pub fn eval() -> Self {
        Self { rng: None, rate: 0.0 }
    }

    pub fn train(rng: &'a mut ChaCha8Rng, rate: f64) -> Self {
        Self {
            rng: Some(rng),
            rate,
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => x,
        }
    }
}

/// Affine map `x·W + b` with `W: in × out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), group, input, output, input, rng);
        let bias = store.add_uniform(format!("{name}.bias"), group, 1, output, input, rng);
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Matrix::filled(1, width, 1.0)),
            beta: store.add(format!("{name}.beta"), group, Matrix::zeros(1, width)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Attention output together with the per-head `N_q × N_kv` weight matrices.
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), group, d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.k"), group, d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.v"), group, d_model, d_model, rng),
            out: Linear::new(store, &format!("{name}.o"), group, d_model, d_model, rng),
            heads,
        }
    }

    /// `softmax(Q(s_q) K(s_k)ᵀ / sqrt(d_model / h)) V(s_v)` per head, concatenated and
    /// output-projected.
    pub fn forward(
        &self,
        g: &mut Graph,
        s_q: Var,
        s_k: Var,
        s_v: Var,
        mode: &mut Mode,
    ) -> Result<Attended> {
        let d_model = self.query.input;
        let (lk, dk_in) = g.shape(s_k);
        let (lv, dv_in) = g.shape(s_v);
        let dq_in = g.shape(s_q).1;
        if lk != lv {
            return Err(Error::RejectedInput(format!(
                "key length {lk} differs from value length {lv}"
            )));
        }
        if dq_in != d_model || dk_in != d_model || dv_in != d_model {
            return Err(Error::RejectedInput(format!(
                "attention inputs must have width {d_model}, got {dq_in}/{dk_in}/{dv_in}"
            )));
        }
        let q = self.query.forward(g, s_q);
        let k = self.key.forward(g, s_k);
        let v = self.value.forward(g, s_v);
        let dh = d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi), g.slice_cols(k, lo, hi), g.slice_cols(v, lo, hi))
            };
            let logits = g.matmul_t(qh, kh);
            let logits = g.scale(logits, scale);
            let w = g.softmax_rows(logits);
            weights.push(w);
            let w = mode.dropout(g, w);
            outs.push(g.matmul(w, vh));
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        Ok(Attended {
            output: self.out.forward(g, cat),
            weights,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), group, d_model, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), group, hidden, d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

/// One attention + feed-forward layer. Self-attention when `kv == x`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.d_model;
        Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), group, d, cfg.heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), group, d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), group, d, cfg.ffn_hidden(), rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), group, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, kv: Var, mode: &mut Mode) -> Result<Var> {
        Ok(self.forward_traced(g, x, kv, mode)?.output)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        x: Var,
        kv: Var,
        mode: &mut Mode,
    ) -> Result<Attended> {
        let att = self.attention.forward(g, x, kv, kv, mode)?;
        let h = g.add(x, att.output);
        let h = self.norm1.forward(g, h);
        let f = self.ffn.forward(g, h);
        let f = mode.dropout(g, f);
        let out = g.add(h, f);
        let out = self.norm2.forward(g, out);
        Ok(Attended {
            output: out,
            weights: att.weights,
        })
    }
}

/// Affine projection of one modality to `d_model`, plus an optional learned
/// position table added after projection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Projection {
    pub modality: Modality,
    pub linear: Linear,
    pub position: Option<ParamId>,
    pub max_len: usize,
}

impl Projection {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        modality: Modality,
        raw_dim: usize,
        d_model: usize,
        max_len: usize,
        use_position: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let group = ParamGroup::Encoder;
        let linear = Linear::new(store, &format!("{name}.proj"), group, raw_dim, d_model, rng);
        let position = use_position.then(|| {
            store.add_uniform(format!("{name}.position"), group, max_len, d_model, d_model, rng)
        });
        Self {
            modality,
            linear,
            position,
            max_len,
        }
    }

    pub fn forward(&self, g: &mut Graph, seq: &FeatureSequence) -> Result<Var> {
        if seq.dim() != self.linear.input {
            return Err(Error::RejectedInput(format!(
                "{:?} features have dim {} but the model expects {}",
                self.modality,
                seq.dim(),
                self.linear.input
            )));
        }
        let x = g.constant(seq.tokens().clone());
        let h = self.linear.forward(g, x);
        match self.position {
            Some(table) => {
                if seq.len() > self.max_len {
                    return Err(Error::RejectedInput(format!(
                        "{:?} length {} exceeds the position table size {}",
                        self.modality,
                        seq.len(),
                        self.max_len
                    )));
                }
                let t = g.param(table);
                let t = g.slice_rows(t, 0, seq.len());
                Ok(g.add(h, t))
            }
            None => Ok(h),
        }
    }
}

/// Uni-modal encoder for both streams. No information crosses modalities here.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelfEncoder {
    pub video: Projection,
    pub question: Projection,
    pub video_layers: Vec<EncoderBlock>,
    pub question_layers: Vec<EncoderBlock>,
}

impl SelfEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let pe = cfg.use_position_embedding;
        let video = Projection::new(store, "video", Modality::Video, cfg.d_video, d, cfg.max_video_len, pe, rng);
        let question = Projection::new(
            store,
            "question",
            Modality::Question,
            cfg.d_question,
            d,
            cfg.max_question_len,
            pe,
            rng,
        );
        let video_layers = (0..cfg.n_self_layers)
            .map(|i| EncoderBlock::new(store, &format!("video.self{i}"), ParamGroup::Encoder, cfg, rng))
            .collect();
        let question_layers = (0..cfg.n_self_layers)
            .map(|i| EncoderBlock::new(store, &format!("question.self{i}"), ParamGroup::Encoder, cfg, rng))
            .collect();
        Self {
            video,
            question,
            video_layers,
            question_layers,
        }
    }

    pub fn encode_stream(
        layers: &[EncoderBlock],
        g: &mut Graph,
        mut x: Var,
        mode: &mut Mode,
    ) -> Result<Var> {
        for layer in layers {
            x = layer.forward(g, x, x, mode)?;
        }
        Ok(x)
    }

    /// Encodes already-projected question and video streams.
    pub fn self_encode(&self, g: &mut Graph, q: Var, v: Var, mode: &mut Mode) -> Result<(Var, Var)> {
        let q_self = Self::encode_stream(&self.question_layers, g, q, mode)?;
        let v_self = Self::encode_stream(&self.video_layers, g, v, mode)?;
        Ok((q_self, v_self))
    }

    /// Projects and self-encodes a question-side sequence (questions and answer
    /// candidates share these weights).
    pub fn encode_question(&self, g: &mut Graph, seq: &FeatureSequence, mode: &mut Mode) -> Result<Var> {
        let q = self.question.forward(g, seq)?;
        Self::encode_stream(&self.question_layers, g, q, mode)
    }

    pub fn encode_video(&self, g: &mut Graph, seq: &FeatureSequence, mode: &mut Mode) -> Result<Var> {
        let v = self.video.forward(g, seq)?;
        Self::encode_stream(&self.video_layers, g, v, mode)
    }
}
