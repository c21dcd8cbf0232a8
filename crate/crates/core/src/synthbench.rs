//! Synthetic long-video QA with known evidence segments, plus the raw-feature
//! manifest format shared with precomputed real features.
//!
//! Every video is a run of `n_segments` blocks. Each block carries a key
//! concept; the question names one key, and the answer is the attribute
//! concept carried by that key's block. Other blocks carry wrong attributes at
//! `distractor_strength`, so pooling over the whole video is misleading while
//! the evidence block alone is not.
//!
//! On disk a split is a pretty-printed JSON manifest next to a `features/`
//! directory of raw little-endian `f32` row-major tensors, one file per tensor.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::answerer::QaSample;
use crate::config::{AnswerMode, ModelConfig};
use crate::encoder::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::proposals::{Proposal, ProposalSet};
use crate::tensor::Matrix;
use crate::training::mix;

pub const MANIFEST_FORMAT: &str = "segqa-features";
pub const MANIFEST_VERSION: u32 = 1;
pub const DTYPE_F32LE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub video_len: usize,
    pub n_segments: usize,
    /// Size of the key vocabulary each video draws its `n_segments` keys from.
    pub n_keys: usize,
    /// Frames per block that carry the key alone; the other frames carry the
    /// attribute alone. 0 puts key and attribute on every frame.
    pub key_frames: usize,
    pub d_video: usize,
    pub d_question: usize,
    pub question_len: usize,
    pub num_answers: usize,
    pub answer_mode: AnswerMode,
    pub noise_std: f64,
    pub distractor_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 500,
            video_len: 20,
            n_segments: 5,
            n_keys: 5,
            key_frames: 2,
            d_video: 16,
            d_question: 16,
            question_len: 4,
            num_answers: 5,
            answer_mode: AnswerMode::ClosedSet,
            noise_std: 0.2,
            distractor_strength: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.video_len == 0 {
            return Err(Error::config("video_len", "must be positive"));
        }
        if self.n_segments == 0 {
            return Err(Error::config("n_segments", "must be positive"));
        }
        if self.n_segments > self.video_len {
            return Err(Error::config(
                "n_segments",
                format!("{} segments do not fit in {} frames", self.n_segments, self.video_len),
            ));
        }
        if self.n_keys < self.n_segments {
            return Err(Error::config(
                "n_keys",
                format!("need at least n_segments = {} distinct keys", self.n_segments),
            ));
        }
        let shortest = self.video_len / self.n_segments;
        if self.key_frames > 0 && self.key_frames >= shortest {
            return Err(Error::config(
                "key_frames",
                format!("must leave an attribute frame in every block (shortest block has {shortest} frames)"),
            ));
        }
        if self.num_answers < 2 {
            return Err(Error::config("num_answers", "must be at least 2"));
        }
        if self.d_video == 0 {
            return Err(Error::config("d_video", "must be positive"));
        }
        if self.d_question == 0 {
            return Err(Error::config("d_question", "must be positive"));
        }
        if self.question_len == 0 {
            return Err(Error::config("question_len", "must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be a finite non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.distractor_strength) {
            return Err(Error::config("distractor_strength", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Model configuration whose input dims and answer space match this task.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_video: self.d_video,
            d_question: self.d_question,
            num_answers: self.num_answers,
            answer_mode: self.answer_mode,
            max_video_len: self.video_len.max(1),
            max_question_len: self.question_len.max(1),
            // Desk-scale model sized for the default task.
            d_model: 32,
            heads: 2,
            n_self_layers: 1,
            n_cross_layers: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    /// Frame interval of block `s`.
    pub fn segment(&self, s: usize) -> Proposal {
        Proposal::new(s * self.video_len / self.n_segments, (s + 1) * self.video_len / self.n_segments)
    }
}

/// Concept prototypes shared by every sample of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    /// Key concepts in video space (`n_keys × d_video`).
    pub video_keys: Matrix,
    /// Attribute (answer) concepts in video space (`K × d_video`).
    pub video_attrs: Matrix,
    /// Key concepts in question space.
    pub question_keys: Matrix,
    /// Per-position template words in question space.
    pub question_words: Matrix,
    /// Answer concepts in question space, used as multiple-choice candidates.
    pub question_attrs: Matrix,
}

/// Unit vectors; orthonormal when `count ≤ dim`.
fn unit_vectors(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() < dim {
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

fn stack(rows: Vec<Vec<f64>>, dim: usize) -> Matrix {
    let n = rows.len();
    Matrix::from_vec(n, dim, rows.concat()).expect("rectangular rows")
}

impl Prototypes {
    /// Video-space and question-space concepts each come out of one
    /// orthonormal draw when the dimension allows it.
    pub fn generate(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x5EED, 0));
        let mut video = unit_vectors(cfg.n_keys + cfg.num_answers, cfg.d_video, &mut rng);
        let video_attrs = video.split_off(cfg.n_keys);
        let mut question = unit_vectors(
            cfg.n_keys + cfg.question_len + cfg.num_answers,
            cfg.d_question,
            &mut rng,
        );
        let question_attrs = question.split_off(cfg.n_keys + cfg.question_len);
        let question_words = question.split_off(cfg.n_keys);
        Self {
            video_keys: stack(video, cfg.d_video),
            video_attrs: stack(video_attrs, cfg.d_video),
            question_keys: stack(question, cfg.d_question),
            question_words: stack(question_words, cfg.d_question),
            question_attrs: stack(question_attrs, cfg.d_question),
        }
    }
}

/// Per-sample generation facts, kept alongside the samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    /// Block index holding the evidence.
    pub evidence_slot: usize,
    /// Key of each block, in order.
    pub keys: Vec<usize>,
    /// Attribute shown in each block (the answer concept for the evidence block).
    pub attrs: Vec<usize>,
    /// Answer concept, independent of candidate order.
    pub answer_concept: usize,
    /// Best IoU of the evidence block against the default proposals.
    pub best_proposal_iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: String,
    pub samples: Vec<QaSample>,
    pub info: Vec<SampleInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub prototypes: Prototypes,
    pub train: Split,
    pub val: Split,
}

impl SynthDataset {
    /// Smallest best-proposal IoU over all samples of both splits.
    pub fn min_best_iou(&self) -> f64 {
        self.train
            .info
            .iter()
            .chain(&self.val.info)
            .map(|i| i.best_proposal_iou)
            .fold(f64::INFINITY, f64::min)
    }
}

fn round_f32(m: Matrix) -> Matrix {
    m.map(|x| x as f32 as f64)
}

fn noisy_row(base: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    base.iter()
        .map(|&b| {
            if noise > 0.0 {
                b + noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                b
            }
        })
        .collect()
}

fn generate_split(cfg: &SynthConfig, protos: &Prototypes, name: &str, split_id: u64, n: usize) -> Split {
    let k = cfg.num_answers;
    let proposals = ProposalSet::generate(cfg.video_len, &ModelConfig::default().anchor_scales).ok();

    // Round-robin answers and evidence slots, shuffled independently, keep both balanced.
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, split_id, u64::MAX));
    let mut answers: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut slots: Vec<usize> = (0..n).map(|i| i % cfg.n_segments).collect();
    answers.shuffle(&mut order_rng);
    slots.shuffle(&mut order_rng);

    let mut samples = Vec::with_capacity(n);
    let mut info = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, split_id, i as u64));
        let answer_concept = answers[i];
        let evidence_slot = slots[i];

        let mut key_pool: Vec<usize> = (0..cfg.n_keys).collect();
        key_pool.shuffle(&mut rng);
        let keys = key_pool[..cfg.n_segments].to_vec();
        let attrs: Vec<usize> = (0..cfg.n_segments)
            .map(|s| {
                if s == evidence_slot {
                    answer_concept
                } else {
                    let w = rng.random_range(0..k - 1);
                    if w >= answer_concept {
                        w + 1
                    } else {
                        w
                    }
                }
            })
            .collect();

        let mut video = Vec::with_capacity(cfg.video_len * cfg.d_video);
        for s in 0..cfg.n_segments {
            let strength = if s == evidence_slot { 1.0 } else { cfg.distractor_strength };
            let key = protos.video_keys.row(keys[s]);
            let attr = protos.video_attrs.row(attrs[s]);
            let len = cfg.segment(s).len();
            let mut is_cue = vec![cfg.key_frames == 0; len];
            if cfg.key_frames > 0 {
                let mut idx: Vec<usize> = (0..len).collect();
                idx.shuffle(&mut rng);
                idx[..cfg.key_frames].iter().for_each(|&i| is_cue[i] = true);
            }
            for cue in is_cue {
                let base: Vec<f64> = key
                    .iter()
                    .zip(attr)
                    .map(|(k, a)| match (cfg.key_frames, cue) {
                        (0, _) => k + strength * a,
                        (_, true) => *k,
                        (_, false) => strength * a,
                    })
                    .collect();
                video.extend(noisy_row(&base, cfg.noise_std, &mut rng));
            }
        }
        let video = round_f32(Matrix::from_vec(cfg.video_len, cfg.d_video, video).expect("video shape"));

        let query = keys[evidence_slot];
        let mut question = Vec::with_capacity(cfg.question_len * cfg.d_question);
        for t in 0..cfg.question_len {
            let base: Vec<f64> = protos
                .question_words
                .row(t)
                .iter()
                .zip(protos.question_keys.row(query))
                .map(|(a, b)| a + b)
                .collect();
            question.extend(noisy_row(&base, cfg.noise_std, &mut rng));
        }
        let question =
            round_f32(Matrix::from_vec(cfg.question_len, cfg.d_question, question).expect("question shape"));

        let (candidates, answer_index) = match cfg.answer_mode {
            AnswerMode::ClosedSet => (None, answer_concept),
            AnswerMode::MultipleChoice => {
                let mut perm: Vec<usize> = (0..k).collect();
                perm.shuffle(&mut rng);
                let cands = perm
                    .iter()
                    .map(|&c| {
                        let row = noisy_row(protos.question_attrs.row(c), cfg.noise_std, &mut rng);
                        let m = round_f32(Matrix::row_vector(row));
                        FeatureSequence::new(m, Modality::Question).expect("finite candidate")
                    })
                    .collect();
                let idx = perm.iter().position(|&c| c == answer_concept).expect("answer among candidates");
                (Some(cands), idx)
            }
        };

        let gt = cfg.segment(evidence_slot);
        samples.push(QaSample {
            video: FeatureSequence::new(video, Modality::Video).expect("finite video"),
            question: FeatureSequence::new(question, Modality::Question).expect("finite question"),
            candidates,
            answer_index,
            gt_segment: Some(gt),
        });
        info.push(SampleInfo {
            evidence_slot,
            keys,
            attrs,
            answer_concept,
            best_proposal_iou: proposals.as_ref().map_or(0.0, |p| p.best_match(gt).1),
        });
    }
    Split {
        name: name.into(),
        samples,
        info,
    }
}

/// Pure function of the configuration.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let prototypes = Prototypes::generate(cfg);
    Ok(SynthDataset {
        config: cfg.clone(),
        train: generate_split(cfg, &prototypes, "train", 1, cfg.n_train),
        val: generate_split(cfg, &prototypes, "val", 2, cfg.n_val),
        prototypes,
    })
}

/// A tensor file reference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRef {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub video: TensorRef,
    pub question: TensorRef,
    #[serde(default)]
    pub candidates: Option<Vec<TensorRef>>,
    pub answer_index: usize,
    #[serde(default)]
    pub gt_segment: Option<Proposal>,
    pub num_answers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub count: usize,
    pub dtype: String,
    pub d_video: usize,
    pub d_question: usize,
    pub num_answers: usize,
    pub samples: Vec<SampleRecord>,
}

fn write_tensor(root: &Path, rel: PathBuf, m: &Matrix) -> Result<TensorRef> {
    let bytes: Vec<u8> = m.as_slice().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    let path = root.join(&rel);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(TensorRef {
        path: rel,
        shape: [m.rows(), m.cols()],
    })
}

/// Writes `split` under `dir` (`dir/manifest.json`, `dir/features/*.f32`) and
/// returns the manifest path.
pub fn write_split(split: &Split, dir: &Path, d_video: usize, d_question: usize, num_answers: usize) -> Result<PathBuf> {
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    let mut records = Vec::with_capacity(split.samples.len());
    for (i, s) in split.samples.iter().enumerate() {
        let video = write_tensor(dir, PathBuf::from(format!("features/{i:06}_video.f32")), s.video.tokens())?;
        let question = write_tensor(dir, PathBuf::from(format!("features/{i:06}_question.f32")), s.question.tokens())?;
        let candidates = match &s.candidates {
            None => None,
            Some(cs) => Some(
                cs.iter()
                    .enumerate()
                    .map(|(k, c)| write_tensor(dir, PathBuf::from(format!("features/{i:06}_cand{k}.f32")), c.tokens()))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        records.push(SampleRecord {
            video,
            question,
            candidates,
            answer_index: s.answer_index,
            gt_segment: s.gt_segment,
            num_answers,
        });
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        split: split.name.clone(),
        count: records.len(),
        dtype: DTYPE_F32LE.into(),
        d_video,
        d_question,
        num_answers,
        samples: records,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes both splits under `out/train` and `out/val`; returns the manifest paths.
pub fn write_dataset(ds: &SynthDataset, out: &Path) -> Result<Vec<PathBuf>> {
    let c = &ds.config;
    [&ds.train, &ds.val]
        .into_iter()
        .map(|s| write_split(s, &out.join(&s.name), c.d_video, c.d_question, c.num_answers))
        .collect()
}

fn read_tensor(root: &Path, r: &TensorRef, width: usize, what: &str, modality: Modality) -> Result<FeatureSequence> {
    let path = root.join(&r.path);
    let [rows, cols] = r.shape;
    if cols != width {
        return Err(Error::load(
            &path,
            format!("{what} shape mismatch: manifest declares width {width}, record shape is [{rows}, {cols}]"),
        ));
    }
    let bytes = fs::read(&path).map_err(|e| Error::load(&path, format!("cannot read {what} tensor: {e}")))?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        let actual = if rows > 0 && bytes.len() % (rows * 4) == 0 {
            format!("[{rows}, {}]", bytes.len() / (rows * 4))
        } else {
            format!("{} bytes", bytes.len())
        };
        return Err(Error::load(
            &path,
            format!("{what} shape mismatch: expected [{rows}, {cols}] ({expected} bytes), file holds {actual}"),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let m = Matrix::from_vec(rows, cols, data)?;
    FeatureSequence::new(m, modality).map_err(|e| Error::load(&path, e.to_string()))
}

/// Loads a manifest and every tensor it references, validating shapes.
pub fn load_feature_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<QaSample>)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::load(manifest_path, format!("cannot read manifest: {e}")))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::load(manifest_path, format!("malformed manifest: {e}")))?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::load(manifest_path, format!("unknown format `{}`", m.format)));
    }
    if m.version != MANIFEST_VERSION {
        return Err(Error::load(manifest_path, format!("unsupported manifest version {}", m.version)));
    }
    if m.dtype != DTYPE_F32LE {
        return Err(Error::load(manifest_path, format!("unsupported dtype `{}` (expected {DTYPE_F32LE})", m.dtype)));
    }
    if m.count != m.samples.len() {
        return Err(Error::load(
            manifest_path,
            format!("count {} does not match {} sample records", m.count, m.samples.len()),
        ));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(m.samples.len());
    for (i, r) in m.samples.iter().enumerate() {
        let at = |e: Error| match e {
            Error::Load { path, reason } => Error::load(path, format!("sample {i}: {reason}")),
            other => other,
        };
        let video = read_tensor(root, &r.video, m.d_video, "video", Modality::Video).map_err(at)?;
        let question = read_tensor(root, &r.question, m.d_question, "question", Modality::Question).map_err(at)?;
        let candidates = match &r.candidates {
            None => None,
            Some(cs) => Some(
                cs.iter()
                    .map(|c| read_tensor(root, c, m.d_question, "candidate", Modality::Question).map_err(at))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let sample = QaSample {
            video,
            question,
            candidates,
            answer_index: r.answer_index,
            gt_segment: r.gt_segment,
        };
        sample
            .validate(r.num_answers)
            .map_err(|e| Error::load(manifest_path, format!("sample {i}: {e}")))?;
        samples.push(sample);
    }
    Ok((m, samples))
}

/// Reads the evidence the way the generator wrote it: find the block whose key
/// matches the question's key, then take that block's nearest attribute.
/// Used as a hand-built reference predictor.
pub fn nearest_prototype_answer(protos: &Prototypes, cfg: &SynthConfig, sample: &QaSample) -> (usize, Proposal) {
    let mean_row = |m: &Matrix, r: std::ops::Range<usize>| -> Vec<f64> {
        let n = r.len() as f64;
        let mut acc = vec![0.0; m.cols()];
        for i in r {
            acc.iter_mut().zip(m.row(i)).for_each(|(a, b)| *a += b / n);
        }
        acc
    };
    let nearest = |protos: &Matrix, v: &[f64]| -> usize {
        let scores: Vec<f64> = (0..protos.rows())
            .map(|i| protos.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
        crate::tensor::argmax(&scores)
    };
    let q = sample.question.tokens();
    let qmean = mean_row(q, 0..q.rows());
    let query = nearest(&protos.question_keys, &qmean);
    let v = sample.video.tokens();
    let blocks: Vec<Proposal> = (0..cfg.n_segments).map(|s| cfg.segment(s)).collect();
    let key_scores: Vec<f64> = blocks
        .iter()
        .map(|b| {
            let m = mean_row(v, b.st..b.ed);
            protos.video_keys.row(query).iter().zip(&m).map(|(a, b)| a * b).sum()
        })
        .collect();
    let block = blocks[crate::tensor::argmax(&key_scores)];
    let concept = nearest(&protos.video_attrs, &mean_row(v, block.st..block.ed));
    let answer = match &sample.candidates {
        None => concept,
        Some(cs) => {
            let scores: Vec<f64> = cs
                .iter()
                .map(|c| {
                    let t = c.tokens();
                    let m = mean_row(t, 0..t.rows());
                    protos.question_attrs.row(concept).iter().zip(&m).map(|(a, b)| a * b).sum()
                })
                .collect();
            crate::tensor::argmax(&scores)
        }
    };
    (answer, block)
}
