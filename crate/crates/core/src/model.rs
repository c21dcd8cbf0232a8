//! The full locate-then-answer model and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answerer::{slice_segment, AnswerHead, AnswerOutput, QaSample};
use crate::autograd::{Graph, Var};
use crate::config::{AnswerMode, ModelConfig};
use crate::encoder::{Mode, SelfEncoder};
use crate::error::{Error, Result};
use crate::locator::{Locator, LocatorOutput};
use crate::params::ParamStore;
use crate::proposals::{Proposal, ProposalSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Variant {
    /// Hard proposal localization trained with the pseudo-label locator loss.
    #[default]
    #[serde(rename = "full")]
    Full,
    /// No locator: the answer head always sees the whole video.
    #[serde(rename = "no_ql", alias = "no_QL")]
    NoQl,
    /// Full structure, trained with the answer loss only.
    #[serde(rename = "no_lql", alias = "no_LQL")]
    NoLql,
    /// Soft temporal attention in place of hard slicing.
    #[serde(rename = "soft_ql", alias = "soft_QL")]
    SoftQl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoQl, Variant::NoLql, Variant::SoftQl];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoQl => "no_ql",
            Variant::NoLql => "no_lql",
            Variant::SoftQl => "soft_ql",
        }
    }

    /// Variants that score proposals and slice the video.
    pub fn has_hard_locator(self) -> bool {
        matches!(self, Variant::Full | Variant::NoLql)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => Ok(Variant::Full),
            "no_ql" => Ok(Variant::NoQl),
            "no_lql" => Ok(Variant::NoLql),
            "soft_ql" => Ok(Variant::SoftQl),
            _ => Err(Error::config(
                "variant",
                format!("unknown variant `{s}` (expected full, no_ql, no_lql or soft_ql)"),
            )),
        }
    }
}

/// Encoded streams of one sample inside a graph.
pub struct Encoded {
    pub q_self: Var,
    pub v_self: Var,
    pub q_cross: Var,
    pub v_cross: Var,
    pub q_pool: Var,
    pub candidate_pools: Option<Vec<Var>>,
    pub video_len: usize,
}

/// Eval-mode prediction for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer: AnswerOutput,
    pub locator: Option<LocatorOutput>,
    /// Segment the answer head consumed; `None` for soft localization.
    pub segment: Option<Proposal>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub store: ParamStore,
    pub encoder: SelfEncoder,
    pub locator: Locator,
    pub answer: AnswerHead,
}

impl Model {
    pub fn new(cfg: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = SelfEncoder::new(&mut store, &cfg, &mut rng);
        let n: usize = cfg.anchor_scales.iter().map(|&m| m as usize).sum();
        let locator = Locator::new(
            &mut store,
            &cfg,
            variant.has_hard_locator().then_some(n),
            variant == Variant::SoftQl,
            &mut rng,
        );
        let answer = AnswerHead::new(&mut store, &cfg, &mut rng);
        Ok(Self {
            cfg,
            variant,
            store,
            encoder,
            locator,
            answer,
        })
    }

    /// Rebuilds a model around existing parameters; names, groups and shapes must match.
    pub fn from_store(cfg: ModelConfig, variant: Variant, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(cfg, variant, 0)?;
        if !model.store.same_layout(&store) {
            return Err(Error::Incompatible(
                "parameter layout does not match the model configuration".into(),
            ));
        }
        model.store = store;
        Ok(model)
    }

    /// Same architecture under another variant, copying every parameter whose
    /// name and shape exist in both.
    pub fn with_variant(&self, variant: Variant, seed: u64) -> Result<Self> {
        let mut other = Self::new(self.cfg.clone(), variant, seed)?;
        let ids: Vec<_> = other.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            if let Some((_, src)) = self.store.iter().find(|(_, p)| p.name == name) {
                if src.value.shape() == other.store.get(id).shape() {
                    *other.store.get_mut(id) = src.value.clone();
                }
            }
        }
        Ok(other)
    }

    pub fn num_proposals(&self) -> usize {
        self.cfg.anchor_scales.iter().map(|&m| m as usize).sum()
    }

    pub fn proposals(&self, video_len: usize) -> Result<ProposalSet> {
        ProposalSet::generate(video_len, &self.cfg.anchor_scales)
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.store)
    }

    pub fn encode(&self, g: &mut Graph, sample: &QaSample, mode: &mut Mode) -> Result<Encoded> {
        sample.validate(self.cfg.num_answers)?;
        let q = self.encoder.question.forward(g, &sample.question)?;
        let v = self.encoder.video.forward(g, &sample.video)?;
        let (q_self, v_self) = self.encoder.self_encode(g, q, v, mode)?;
        let (q_cross, v_cross) = self.locator.cross_encode(g, q_self, v_self, mode)?;
        let q_pool = g.max_rows(q_cross);
        let candidate_pools = match self.cfg.answer_mode {
            AnswerMode::ClosedSet => None,
            AnswerMode::MultipleChoice => {
                let cands = sample.candidates.as_ref().ok_or_else(|| {
                    Error::RejectedInput("multiple-choice model needs candidate sequences".into())
                })?;
                let mut pools = Vec::with_capacity(cands.len());
                for c in cands {
                    let enc = self.encoder.encode_question(g, c, mode)?;
                    pools.push(g.max_rows(enc));
                }
                Some(pools)
            }
        };
        Ok(Encoded {
            q_self,
            v_self,
            q_cross,
            v_cross,
            q_pool,
            candidate_pools,
            video_len: sample.video.len(),
        })
    }

    /// Proposal scores; `None` for variants without a hard locator.
    pub fn locate(&self, g: &mut Graph, enc: &Encoded) -> Option<(Var, LocatorOutput)> {
        self.locator.score_pooled(g, enc.q_pool, enc.v_cross)
    }

    /// Answer scores computed on `segment` of the cross-encoded video.
    pub fn answer_on(&self, g: &mut Graph, enc: &Encoded, segment: Proposal) -> Result<(Var, AnswerOutput)> {
        let seg = slice_segment(g, enc.v_cross, segment)?;
        let v_pool = g.max_rows(seg);
        self.answer
            .score_pooled(g, enc.q_pool, v_pool, enc.candidate_pools.as_deref())
    }

    /// Answer scores on the soft-attention pooled video token.
    pub fn answer_soft(&self, g: &mut Graph, enc: &Encoded) -> Result<(Var, AnswerOutput, Var)> {
        let soft = self
            .locator
            .soft
            .as_ref()
            .ok_or_else(|| Error::RejectedInput("model has no soft localizer".into()))?;
        let (token, weights) = soft.forward(g, enc.q_pool, enc.v_cross);
        let (scores, out) = self
            .answer
            .score_pooled(g, enc.q_pool, token, enc.candidate_pools.as_deref())?;
        Ok((scores, out, weights))
    }

    /// The variant's own answer path: locate-and-slice, whole video, or soft.
    /// Returns answer scores, the locator output (if any) and the segment used.
    pub fn answer_path(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        proposals: &ProposalSet,
    ) -> Result<AnswerPath> {
        match self.variant {
            Variant::Full | Variant::NoLql => {
                let (ql_scores, ql) = self.locate(g, enc).expect("hard-locator variant");
                let segment = proposals.get(ql.selected);
                let (scores, answer) = self.answer_on(g, enc, segment)?;
                Ok(AnswerPath {
                    scores,
                    answer,
                    locator: Some((ql_scores, ql)),
                    segment: Some(segment),
                })
            }
            Variant::NoQl => {
                let segment = Proposal::whole(enc.video_len);
                let (scores, answer) = self.answer_on(g, enc, segment)?;
                Ok(AnswerPath {
                    scores,
                    answer,
                    locator: None,
                    segment: Some(segment),
                })
            }
            Variant::SoftQl => {
                let (scores, answer, _) = self.answer_soft(g, enc)?;
                Ok(AnswerPath {
                    scores,
                    answer,
                    locator: None,
                    segment: None,
                })
            }
        }
    }

    pub fn predict(&self, sample: &QaSample) -> Result<Prediction> {
        let proposals = self.proposals(sample.video.len())?;
        let mut g = self.graph();
        let enc = self.encode(&mut g, sample, &mut Mode::eval())?;
        let path = self.answer_path(&mut g, &enc, &proposals)?;
        Ok(Prediction {
            answer: path.answer,
            locator: path.locator.map(|(_, l)| l),
            segment: path.segment,
        })
    }

    /// Eval-mode answer output with the segment forced to proposal `index`.
    pub fn predict_on_proposal(&self, sample: &QaSample, index: usize) -> Result<AnswerOutput> {
        let proposals = self.proposals(sample.video.len())?;
        if index >= proposals.len() {
            return Err(Error::RejectedInput(format!(
                "proposal index {index} out of range for {} proposals",
                proposals.len()
            )));
        }
        let mut g = self.graph();
        let enc = self.encode(&mut g, sample, &mut Mode::eval())?;
        Ok(self.answer_on(&mut g, &enc, proposals.get(index))?.1)
    }
}

pub struct AnswerPath {
    pub scores: Var,
    pub answer: AnswerOutput,
    pub locator: Option<(Var, LocatorOutput)>,
    pub segment: Option<Proposal>,
}
