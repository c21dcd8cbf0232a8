//! Answer predictor: segment slicing, pooled fusion to answer scores, and the
//! answer cross-entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{AnswerMode, ModelConfig};
use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::locator::Bilinear;
use crate::params::{ParamGroup, ParamStore};
use crate::proposals::Proposal;
use crate::tensor::{argmax, log_sum_exp};

/// One question-answer item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaSample {
    pub video: FeatureSequence,
    pub question: FeatureSequence,
    /// Candidate answer sequences in multiple-choice mode.
    pub candidates: Option<Vec<FeatureSequence>>,
    pub answer_index: usize,
    /// Ground-truth evidence interval, when known.
    pub gt_segment: Option<Proposal>,
}

impl QaSample {
    pub fn validate(&self, num_answers: usize) -> Result<()> {
        if self.answer_index >= num_answers {
            return Err(Error::RejectedInput(format!(
                "answer index {} out of range for K = {num_answers}",
                self.answer_index
            )));
        }
        if let Some(c) = &self.candidates {
            if c.len() != num_answers {
                return Err(Error::RejectedInput(format!(
                    "{} candidates given, expected K = {num_answers}",
                    c.len()
                )));
            }
        }
        if let Some(gt) = self.gt_segment {
            gt.validate(self.video.len())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerOutput {
    pub score_ap: Vec<f64>,
    /// Lowest index attaining the maximum score.
    pub predicted: usize,
}

impl AnswerOutput {
    pub fn from_scores(score_ap: Vec<f64>) -> Self {
        let predicted = argmax(&score_ap);
        Self { score_ap, predicted }
    }
}

/// Rows `st..ed` of the cross-encoded video.
pub fn slice_segment(g: &mut Graph, v_cross: Var, p: Proposal) -> Result<Var> {
    p.validate(g.shape(v_cross).0)?;
    Ok(g.slice_rows(v_cross, p.st, p.ed))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerHead {
    pub fusion: Bilinear,
    pub mode: AnswerMode,
    pub num_answers: usize,
}

impl AnswerHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let out_dim = match cfg.answer_mode {
            AnswerMode::ClosedSet => cfg.num_answers,
            AnswerMode::MultipleChoice => 1,
        };
        Self {
            fusion: Bilinear::new(
                store,
                "answer.fusion",
                ParamGroup::Answerer,
                cfg.d_model,
                out_dim,
                cfg.fusion_rank,
                rng,
            ),
            mode: cfg.answer_mode,
            num_answers: cfg.num_answers,
        }
    }

    /// Answer scores from the question stream and a video segment.
    /// `candidate_pools` holds the max-pooled encoded candidates in
    /// multiple-choice mode.
    pub fn score_answers(
        &self,
        g: &mut Graph,
        q_cross: Var,
        v_segment: Var,
        candidate_pools: Option<&[Var]>,
    ) -> Result<(Var, AnswerOutput)> {
        if g.shape(v_segment).0 == 0 {
            return Err(Error::RejectedInput("empty video segment".into()));
        }
        let q_pool = g.max_rows(q_cross);
        let v_pool = g.max_rows(v_segment);
        self.score_pooled(g, q_pool, v_pool, candidate_pools)
    }

    pub fn score_pooled(
        &self,
        g: &mut Graph,
        q_pool: Var,
        v_pool: Var,
        candidate_pools: Option<&[Var]>,
    ) -> Result<(Var, AnswerOutput)> {
        let scores = match self.mode {
            AnswerMode::ClosedSet => self.fusion.forward(g, q_pool, v_pool),
            AnswerMode::MultipleChoice => {
                let cands = candidate_pools.ok_or_else(|| {
                    Error::RejectedInput("multiple-choice scoring needs candidates".into())
                })?;
                if cands.len() != self.num_answers {
                    return Err(Error::RejectedInput(format!(
                        "{} candidates given, expected K = {}",
                        cands.len(),
                        self.num_answers
                    )));
                }
                let per: Vec<Var> = cands
                    .iter()
                    .map(|&c| {
                        let joint = g.mul(q_pool, c);
                        self.fusion.forward(g, joint, v_pool)
                    })
                    .collect();
                g.concat_cols(&per)
            }
        };
        let out = AnswerOutput::from_scores(g.value(scores).row(0).to_vec());
        Ok((scores, out))
    }
}

/// Softmax cross-entropy of a score row against the correct index.
pub fn answer_loss(g: &mut Graph, score_ap: Var, answer_index: usize) -> Var {
    g.cross_entropy(score_ap, answer_index)
}

/// Plain-value softmax cross-entropy.
pub fn cross_entropy(scores: &[f64], target: usize) -> f64 {
    log_sum_exp(scores) - scores[target]
}
