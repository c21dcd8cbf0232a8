//! Answer accuracy and localization metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answerer::QaSample;
use crate::error::Result;
use crate::model::{Model, Prediction};
use crate::proposals::{temporal_iou, Proposal};

/// Anything that answers (and optionally localizes) a sample.
pub trait QaPredictor: Sync {
    fn predict(&self, sample: &QaSample) -> Result<Prediction>;
}

impl QaPredictor for Model {
    fn predict(&self, sample: &QaSample) -> Result<Prediction> {
        Model::predict(self, sample)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub index: usize,
    pub predicted: usize,
    pub answer_index: usize,
    pub correct: bool,
    pub selected_proposal: Option<usize>,
    pub segment: Option<Proposal>,
    pub gt_segment: Option<Proposal>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Mean IoU of the consumed segment against ground truth, over samples that have both.
    pub mean_iou: Option<f64>,
    /// Fraction of those samples with IoU ≥ 0.5.
    pub loc_at_05: Option<f64>,
}

impl EvalReport {
    /// Recomputes the summary from per-sample records.
    pub fn from_records(records: &[PredictionRecord]) -> Self {
        let correct = records.iter().filter(|r| r.correct).count();
        let ious: Vec<f64> = records.iter().filter_map(|r| r.iou).collect();
        let (mean_iou, loc_at_05) = if ious.is_empty() {
            (None, None)
        } else {
            let n = ious.len() as f64;
            (
                Some(ious.iter().sum::<f64>() / n),
                Some(ious.iter().filter(|&&v| v >= 0.5).count() as f64 / n),
            )
        };
        Self {
            samples: records.len(),
            correct,
            accuracy: if records.is_empty() {
                0.0
            } else {
                correct as f64 / records.len() as f64
            },
            mean_iou,
            loc_at_05,
        }
    }
}

pub fn predict_all<P: QaPredictor + ?Sized>(predictor: &P, samples: &[QaSample]) -> Result<Vec<PredictionRecord>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            let p = predictor.predict(s)?;
            let iou = match (p.segment, s.gt_segment) {
                (Some(seg), Some(gt)) => Some(temporal_iou(seg, gt)),
                _ => None,
            };
            Ok(PredictionRecord {
                index,
                predicted: p.answer.predicted,
                answer_index: s.answer_index,
                correct: p.answer.predicted == s.answer_index,
                selected_proposal: p.locator.map(|l| l.selected),
                segment: p.segment,
                gt_segment: s.gt_segment,
                iou,
            })
        })
        .collect()
}

pub fn evaluate<P: QaPredictor + ?Sized>(predictor: &P, samples: &[QaSample]) -> Result<EvalReport> {
    Ok(EvalReport::from_records(&predict_all(predictor, samples)?))
}
