//! Segment-localized video question answering.
//!
//! A question is first localized to one of a fixed set of temporal proposals,
//! then answered from the cross-encoded features of that segment only. The
//! locator is trained from pseudo labels: the proposal on which the answer head
//! assigns the highest probability to the correct answer.

pub mod answerer;
pub mod autograd;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod proposals;
pub mod synthbench;
pub mod tensor;
pub mod training;

pub use answerer::{AnswerOutput, QaSample};
pub use config::{AnswerMode, ModelConfig};
pub use encoder::{FeatureSequence, Modality, Mode};
pub use error::{Error, Result};
pub use locator::LocatorOutput;
pub use model::{Model, Prediction, Variant};
pub use params::{GroupChecksums, ParamGroup, ParamStore};
pub use proposals::{temporal_iou, Proposal, ProposalSet};
pub use tensor::Matrix;
pub use synthbench::{DatasetManifest, SynthConfig, SynthDataset};
pub use eval::{evaluate, EvalReport, PredictionRecord, QaPredictor};
pub use training::{Checkpoint, Phase, TrainMode, TrainSchedule, TrainSummary};

pub mod locator;
