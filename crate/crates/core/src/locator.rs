//! Question locator: cross-modal encoding, pooled bilinear fusion to proposal
//! scores, and the soft temporal-attention alternative.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::encoder::{EncoderBlock, Mode};
use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::argmax;

/// Low-rank bilinear fusion with tanh gating:
/// `out_j = w_j · (tanh(U_j a) ⊙ tanh(V_j b)) + c_j`, with `U_j, V_j ∈ R^{r×d}`.
///
/// The factors of all outputs are stacked, so `u` and `v` are `(out·r) × d`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bilinear {
    pub u: ParamId,
    pub v: ParamId,
    pub w: ParamId,
    pub c: ParamId,
    pub out_dim: usize,
    pub rank: usize,
}

impl Bilinear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        out_dim: usize,
        rank: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let stacked = out_dim * rank;
        Self {
            u: store.add_uniform(format!("{name}.u"), group, stacked, d_model, d_model, rng),
            v: store.add_uniform(format!("{name}.v"), group, stacked, d_model, d_model, rng),
            w: store.add_uniform(format!("{name}.w"), group, 1, stacked, rank, rng),
            c: store.add_uniform(format!("{name}.c"), group, 1, out_dim, rank, rng),
            out_dim,
            rank,
        }
    }

    /// Fuses two `1 × d` rows into a `1 × out_dim` row.
    pub fn forward(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        let u = g.param(self.u);
        let v = g.param(self.v);
        let w = g.param(self.w);
        let c = g.param(self.c);
        let ua = g.matmul_t(a, u);
        let ua = g.tanh(ua);
        let vb = g.matmul_t(b, v);
        let vb = g.tanh(vb);
        let gated = g.mul(ua, vb);
        let weighted = g.mul(gated, w);
        let summed = g.group_sum(weighted, self.rank);
        g.add(summed, c)
    }
}

/// One symmetric cross-modal layer: question attends to video and video
/// attends to question, both from the previous layer's states.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossLayer {
    pub to_question: EncoderBlock,
    pub to_video: EncoderBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocatorOutput {
    pub score_ql: Vec<f64>,
    /// Lowest index attaining the maximum score.
    pub selected: usize,
}

impl LocatorOutput {
    pub fn from_scores(score_ql: Vec<f64>) -> Self {
        let selected = argmax(&score_ql);
        Self { score_ql, selected }
    }
}

/// Soft temporal localization: softmax over frames of a learned compatibility
/// `(q̄ W) · v_t / sqrt(d)`, then the weighted average of video tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SoftLocalizer {
    pub compat: ParamId,
    pub d_model: usize,
}

impl SoftLocalizer {
    pub fn new(store: &mut ParamStore, d_model: usize, rng: &mut impl Rng) -> Self {
        Self {
            compat: store.add_uniform("locator.soft.compat", ParamGroup::Locator, d_model, d_model, d_model, rng),
            d_model,
        }
    }

    /// Returns the `1 × d` pooled video token and the `1 × L_v` frame weights.
    pub fn forward(&self, g: &mut Graph, q_pool: Var, v_cross: Var) -> (Var, Var) {
        let w = g.param(self.compat);
        let u = g.matmul(q_pool, w);
        let s = g.matmul_t(u, v_cross);
        let s = g.scale(s, 1.0 / (self.d_model as f64).sqrt());
        let weights = g.softmax_rows(s);
        (g.matmul(weights, v_cross), weights)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Locator {
    pub cross: Vec<CrossLayer>,
    /// Proposal-scoring fusion; absent when the variant has no hard locator.
    pub fusion: Option<Bilinear>,
    pub soft: Option<SoftLocalizer>,
}

impl Locator {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        num_proposals: Option<usize>,
        with_soft: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let group = ParamGroup::Locator;
        let cross = (0..cfg.n_cross_layers)
            .map(|i| CrossLayer {
                to_question: EncoderBlock::new(store, &format!("cross{i}.q_from_v"), group, cfg, rng),
                to_video: EncoderBlock::new(store, &format!("cross{i}.v_from_q"), group, cfg, rng),
            })
            .collect();
        let fusion = num_proposals
            .map(|n| Bilinear::new(store, "locator.fusion", group, cfg.d_model, n, cfg.fusion_rank, rng));
        let soft = with_soft.then(|| SoftLocalizer::new(store, cfg.d_model, rng));
        Self { cross, fusion, soft }
    }

    /// `q_cross = Attn(q_self, v_self, v_self)`, `v_cross = Attn(v_self, q_self, q_self)`
    /// per layer, each dressed with residual, norm and feed-forward.
    pub fn cross_encode(
        &self,
        g: &mut Graph,
        q_self: Var,
        v_self: Var,
        mode: &mut Mode,
    ) -> Result<(Var, Var)> {
        let (mut q, mut v) = (q_self, v_self);
        for layer in &self.cross {
            let nq = layer.to_question.forward(g, q, v, mode)?;
            let nv = layer.to_video.forward(g, v, q, mode)?;
            (q, v) = (nq, nv);
        }
        Ok((q, v))
    }

    /// Proposal scores from max-pooled cross-encoded streams.
    pub fn score_proposals(
        &self,
        g: &mut Graph,
        q_cross: Var,
        v_cross: Var,
    ) -> Option<(Var, LocatorOutput)> {
        let q_pool = g.max_rows(q_cross);
        self.score_pooled(g, q_pool, v_cross)
    }

    /// As [`Locator::score_proposals`] with the question stream already pooled.
    pub fn score_pooled(&self, g: &mut Graph, q_pool: Var, v_cross: Var) -> Option<(Var, LocatorOutput)> {
        let fusion = self.fusion.as_ref()?;
        let v_pool = g.max_rows(v_cross);
        let scores = fusion.forward(g, q_pool, v_pool);
        let out = LocatorOutput::from_scores(g.value(scores).row(0).to_vec());
        Some((scores, out))
    }
}
