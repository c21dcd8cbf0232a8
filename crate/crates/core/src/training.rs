//! Pseudo temporal labels, the locator and bundled losses, decoupled
//! alternating epochs, and the training loop.
//!
//! Alternating training runs odd epochs (1, 3, …) on the answer loss with the
//! locator group frozen, and even epochs on the locator loss with everything
//! else frozen. Bundled training steps all parameters on
//! `L_AP + λ·L_QL` every batch.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answerer::{answer_loss, QaSample};
use crate::autograd::{Graph, Var};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{Model, Variant};
use crate::params::{GroupChecksums, Grads, ParamGroup, ParamStore};
use crate::proposals::ProposalSet;
use crate::tensor::{argmax, softmax, Matrix};
use crate::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Decoupled alternating epochs.
    #[default]
    Da,
    Bundled,
}

/// How "highest score on the correct answer" is read when picking pseudo labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelRule {
    /// Post-softmax probability of the correct answer.
    #[default]
    Probability,
    /// Raw logit of the correct answer.
    Logit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub mode: TrainMode,
    /// Locator-loss weight; bundled mode only.
    pub lambda: f64,
    pub base_lr: f64,
    /// Epochs without validation improvement before the learning rate is decayed.
    pub plateau_patience: usize,
    pub lr_decay_factor: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before training stops.
    pub convergence_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pseudo_label_rule: PseudoLabelRule,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            mode: TrainMode::Da,
            lambda: 0.05,
            base_lr: 1e-3,
            plateau_patience: 3,
            lr_decay_factor: 0.5,
            max_epochs: 20,
            convergence_patience: 8,
            batch_size: 8,
            seed: 0,
            pseudo_label_rule: PseudoLabelRule::Probability,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be a finite non-negative number"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be a finite non-negative number"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::config("lr_decay_factor", "must lie in (0, 1)"));
        }
        if self.plateau_patience == 0 {
            return Err(Error::config("plateau_patience", "must be positive"));
        }
        if self.convergence_patience == 0 {
            return Err(Error::config("convergence_patience", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// What one epoch optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Answer loss; locator group frozen.
    #[serde(rename = "AP")]
    Answer,
    /// Locator loss; only the locator group moves.
    #[serde(rename = "QL")]
    Locator,
    /// All parameters on `L_AP + λ·L_QL` (λ absent for variants without a locator loss).
    #[serde(rename = "joint")]
    Joint,
}

impl Phase {
    /// Phase of 1-based epoch `epoch` under `mode` for `variant`.
    pub fn for_epoch(epoch: usize, mode: TrainMode, variant: Variant) -> Phase {
        match (variant, mode) {
            (Variant::Full, TrainMode::Da) if epoch % 2 == 1 => Phase::Answer,
            (Variant::Full, TrainMode::Da) => Phase::Locator,
            _ => Phase::Joint,
        }
    }

    fn trains(self, group: ParamGroup) -> bool {
        match self {
            Phase::Answer => !group.is_locator(),
            Phase::Locator => group.is_locator(),
            Phase::Joint => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub proposal_index: usize,
    /// Correct-answer probability (or logit, per rule) reached on that proposal.
    pub confidence: f64,
}

/// Runs the answer head on every proposal in eval mode and returns the one
/// scoring the correct answer highest, lowest index on ties.
pub fn generate_pseudo_label(
    model: &Model,
    sample: &QaSample,
    proposals: &ProposalSet,
    rule: PseudoLabelRule,
) -> Result<PseudoLabel> {
    let mut g = model.graph();
    let enc = model.encode(&mut g, sample, &mut Mode::eval())?;
    let mut scores = Vec::with_capacity(proposals.len());
    for &p in proposals.as_slice() {
        let (_, out) = model.answer_on(&mut g, &enc, p)?;
        scores.push(match rule {
            PseudoLabelRule::Probability => softmax(&out.score_ap)[sample.answer_index],
            PseudoLabelRule::Logit => out.score_ap[sample.answer_index],
        });
    }
    let proposal_index = argmax(&scores);
    Ok(PseudoLabel {
        proposal_index,
        confidence: scores[proposal_index],
    })
}

/// Cross-entropy of proposal scores against the (detached) pseudo label.
pub fn locator_loss(g: &mut Graph, score_ql: Var, pseudo: &PseudoLabel) -> Var {
    g.cross_entropy(score_ql, pseudo.proposal_index)
}

/// `L_AP + λ·L_QL`
pub fn bundled_loss(g: &mut Graph, l_ap: Var, l_ql: Var, lambda: f64) -> Var {
    let weighted = g.scale(l_ql, lambda);
    g.add(l_ap, weighted)
}

/// The λ grid used for sensitivity sweeps; includes both collapse points.
pub const LAMBDA_GRID: [f64; 7] = [0.01, 0.03, 0.05, 0.07, 0.1, 0.5, 0.9];

/// Gradients and losses from a single sample.
#[derive(Clone, Debug)]
pub struct SampleStep {
    pub grads: Grads,
    pub answer_loss: Option<f64>,
    pub locator_loss: Option<f64>,
}

/// One sample's forward and backward pass for `phase`. Gradients of groups the
/// phase does not train are zeroed.
pub fn sample_step(
    model: &Model,
    sample: &QaSample,
    phase: Phase,
    lambda: f64,
    rule: PseudoLabelRule,
    rng: &mut ChaCha8Rng,
) -> Result<SampleStep> {
    let proposals = model.proposals(sample.video.len())?;
    let pseudo = if model.variant == Variant::Full && phase != Phase::Answer {
        Some(generate_pseudo_label(model, sample, &proposals, rule)?)
    } else {
        None
    };

    let mut g = model.graph();
    let dropout = model.cfg.dropout;
    let enc = model.encode(&mut g, sample, &mut Mode::train(rng, dropout))?;

    let (loss, answer_value, locator_value) = match phase {
        Phase::Locator => {
            let (scores, _) = model
                .locate(&mut g, &enc)
                .ok_or_else(|| Error::RejectedInput("locator phase needs a hard locator".into()))?;
            let l = locator_loss(&mut g, scores, pseudo.as_ref().expect("pseudo label"));
            (l, None, Some(g.value(l).item()))
        }
        Phase::Answer | Phase::Joint => {
            let path = model.answer_path(&mut g, &enc, &proposals)?;
            let l_ap = answer_loss(&mut g, path.scores, sample.answer_index);
            let ap = g.value(l_ap).item();
            match (phase, pseudo, path.locator) {
                (Phase::Joint, Some(p), Some((scores, _))) => {
                    let l_ql = locator_loss(&mut g, scores, &p);
                    let ql = g.value(l_ql).item();
                    (bundled_loss(&mut g, l_ap, l_ql, lambda), Some(ap), Some(ql))
                }
                _ => (l_ap, Some(ap), None),
            }
        }
    };

    let mut grads = g.backward(loss);
    grads.retain_groups(&model.store, |grp| phase.trains(grp));
    Ok(SampleStep {
        grads,
        answer_loss: answer_value,
        locator_loss: locator_value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamSlot {
    m: Matrix,
    v: Matrix,
    step: u64,
}

/// Adam with per-parameter step counts; frozen parameters are skipped entirely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    layout: Vec<(String, ParamGroup, (usize, usize))>,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            layout: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.group, p.value.shape()))
                .collect(),
            slots: store
                .iter()
                .map(|(_, p)| AdamSlot {
                    m: Matrix::zeros(p.value.rows(), p.value.cols()),
                    v: Matrix::zeros(p.value.rows(), p.value.cols()),
                    step: 0,
                })
                .collect(),
        }
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        if self.layout.len() != store.len() {
            return Err(Error::OptimizerMismatch(format!(
                "optimizer tracks {} parameters, model has {}",
                self.layout.len(),
                store.len()
            )));
        }
        for ((name, group, shape), (_, p)) in self.layout.iter().zip(store.iter()) {
            if *name != p.name || *group != p.group || *shape != p.value.shape() {
                return Err(Error::OptimizerMismatch(format!(
                    "slot `{name}` ({group:?}, {shape:?}) vs parameter `{}` ({:?}, {:?})",
                    p.name,
                    p.group,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Grads,
        lr: f64,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        self.check(store)?;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((id, p), slot) in store.iter_mut().zip(self.slots.iter_mut()) {
            if !trainable(p.group) {
                continue;
            }
            slot.step += 1;
            let bc1 = 1.0 - b1.powi(slot.step as i32);
            let bc2 = 1.0 - b2.powi(slot.step as i32);
            let g = grads.get(id).as_slice();
            let m = slot.m.as_mut_slice();
            let v = slot.v.as_mut_slice();
            for (k, w) in p.value.as_mut_slice().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Halves (by `factor`) the learning rate after `patience` epochs without a
/// new best validation accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauDecay {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauDecay {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::NEG_INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, metric: f64) {
        if metric > self.best {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_answer_loss: Option<f64>,
    pub mean_locator_loss: Option<f64>,
    pub checksums_before: GroupChecksums,
    pub checksums_after: GroupChecksums,
}

pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the three words
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One training epoch. `epoch` is 1-based; the phase follows from the
/// schedule's mode and the model's variant.
pub fn run_epoch(
    model: &mut Model,
    data: &[QaSample],
    epoch: usize,
    optimizer: &mut Adam,
    schedule: &TrainSchedule,
    lr: f64,
) -> Result<EpochStats> {
    optimizer.check(&model.store)?;
    let phase = Phase::for_epoch(epoch, schedule.mode, model.variant);
    let lambda = match schedule.mode {
        TrainMode::Bundled => schedule.lambda,
        TrainMode::Da => 0.0,
    };
    let checksums_before = model.store.checksums();

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(schedule.seed, epoch as u64, u64::MAX)));

    let (mut ap_sum, mut ap_n, mut ql_sum, mut ql_n) = (0.0, 0usize, 0.0, 0usize);
    for (batch_idx, batch) in order.chunks(schedule.batch_size).enumerate() {
        let frozen: &Model = model;
        let steps: Vec<Result<SampleStep>> = batch
            .par_iter()
            .map(|&i| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(schedule.seed, epoch as u64, i as u64));
                sample_step(frozen, &data[i], phase, lambda, schedule.pseudo_label_rule, &mut rng)
            })
            .collect();
        let mut total = Grads::zeros_like(&model.store);
        for step in steps {
            let step = step?;
            let bad = |v: Option<f64>| v.is_some_and(|x| !x.is_finite());
            if bad(step.answer_loss) || bad(step.locator_loss) || !step.grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    answer_loss: step.answer_loss.unwrap_or(f64::NAN),
                    locator_loss: step.locator_loss,
                });
            }
            if let Some(v) = step.answer_loss {
                ap_sum += v;
                ap_n += 1;
            }
            if let Some(v) = step.locator_loss {
                ql_sum += v;
                ql_n += 1;
            }
            total.accumulate(&step.grads);
        }
        total.scale(1.0 / batch.len() as f64);
        optimizer.step(&mut model.store, &total, lr, |g| phase.trains(g))?;
    }

    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok(EpochStats {
        epoch,
        phase,
        mean_answer_loss: mean(ap_sum, ap_n),
        mean_locator_loss: mean(ql_sum, ql_n),
        checksums_before,
        checksums_after: model.store.checksums(),
    })
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub train_answer_loss: Option<f64>,
    pub train_locator_loss: Option<f64>,
    pub val_accuracy: f64,
    pub val_mean_iou: Option<f64>,
    pub val_loc_at_05: Option<f64>,
    pub checksums: GroupChecksums,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub mode: TrainMode,
    /// Present for bundled training only.
    pub lambda: Option<f64>,
    pub epochs_run: usize,
    pub best_val_accuracy: f64,
    /// First epoch reaching the best validation accuracy; 0 when nothing ran.
    pub convergence_epoch: usize,
    pub best_val_mean_iou: Option<f64>,
    pub best_val_loc_at_05: Option<f64>,
    pub phases: Vec<Phase>,
    pub final_checksums: GroupChecksums,
}

pub struct TrainOutcome {
    /// Parameters from the best validation epoch (initial parameters when no epoch ran).
    pub best: Model,
    pub last: Model,
    pub history: Vec<EpochRecord>,
    pub summary: TrainSummary,
    pub best_report: Option<EvalReport>,
}

/// Trains until `max_epochs` or until `convergence_patience` epochs pass
/// without a new best validation accuracy.
pub fn train_loop(
    mut model: Model,
    train: &[QaSample],
    val: &[QaSample],
    schedule: &TrainSchedule,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    schedule.validate()?;
    let mut optimizer = Adam::new(&model.store);
    let mut plateau = PlateauDecay::new(schedule.base_lr, schedule.lr_decay_factor, schedule.plateau_patience);
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_report = None;

    for epoch in 1..=schedule.max_epochs {
        let lr = plateau.lr;
        let stats = run_epoch(&mut model, train, epoch, &mut optimizer, schedule, lr)?;
        let report = evaluate(&model, val)?;
        let record = EpochRecord {
            epoch,
            phase: stats.phase,
            lr,
            train_answer_loss: stats.mean_answer_loss,
            train_locator_loss: stats.mean_locator_loss,
            val_accuracy: report.accuracy,
            val_mean_iou: report.mean_iou,
            val_loc_at_05: report.loc_at_05,
            checksums: stats.checksums_after,
        };
        on_epoch(&record);
        history.push(record);
        plateau.observe(report.accuracy);
        if report.accuracy > best_acc {
            best_acc = report.accuracy;
            best_epoch = epoch;
            best = model.clone();
            best_report = Some(report);
        } else if epoch - best_epoch >= schedule.convergence_patience {
            break;
        }
    }

    let summary = TrainSummary {
        variant: model.variant,
        mode: schedule.mode,
        lambda: (schedule.mode == TrainMode::Bundled).then_some(schedule.lambda),
        epochs_run: history.len(),
        best_val_accuracy: if history.is_empty() { 0.0 } else { best_acc },
        convergence_epoch: best_epoch,
        best_val_mean_iou: best_report.as_ref().and_then(|r| r.mean_iou),
        best_val_loc_at_05: best_report.as_ref().and_then(|r| r.loc_at_05),
        phases: history.iter().map(|r| r.phase).collect(),
        final_checksums: best.store.checksums(),
    };
    Ok(TrainOutcome {
        best,
        last: model,
        history,
        summary,
        best_report,
    })
}

pub const CHECKPOINT_FORMAT: &str = "segqa-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Seed plus progress; per-epoch and per-sample streams are derived from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epochs_completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub variant: Variant,
    pub schedule: TrainSchedule,
    pub rng: RngState,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &Model, schedule: &TrainSchedule, epochs_completed: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: model.cfg.clone(),
            variant: model.variant,
            schedule: schedule.clone(),
            rng: RngState {
                seed: schedule.seed,
                epochs_completed,
            },
            params: model.store.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::load(path, format!("malformed checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::load(path, format!("not a checkpoint (format `{}`)", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::load(
                path,
                format!("unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})", ck.version),
            ));
        }
        Ok(ck)
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_store(self.model, self.variant, self.params)
    }
}
