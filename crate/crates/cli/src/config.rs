//! Run configuration files.
//!
//! A run is described by one TOML file:
//!
//! ```toml
//! variant = "full"            # full | no_ql | no_lql | soft_ql
//! out = "runs/full"           # optional; --out and SEGQA_OUT take precedence
//!
//! [synth]                     # synthetic task, used when [data] names no manifests
//! n_train = 2000
//!
//! [data]                      # feature manifests, relative to this file
//! train_manifest = "data/train/manifest.json"
//! val_manifest = "data/val/manifest.json"
//!
//! [model]                     # overrides on top of the data-derived model config
//! d_model = 32
//!
//! [train]
//! mode = "da"                 # da | bundled
//! ```
//!
//! Every section rejects unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segqa::synthbench::{self, DatasetManifest};
use segqa::{AnswerMode, ModelConfig, QaSample, SynthConfig, TrainSchedule, Variant};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Partial [`ModelConfig`]; merged in [`RunConfig::model_config`].
    #[serde(default)]
    pub model: toml::Table,
    #[serde(default)]
    pub train: TrainSchedule,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_manifest: Option<PathBuf>,
}

impl RunConfig {
    /// Parses a config file; relative manifest paths are resolved against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train_manifest, &mut cfg.data.val_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("invalid configuration: {e}")))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    pub fn validate_synth(&self) -> CliResult<()> {
        self.synth.validate().map_err(|e| CliError::in_section("synth", e))
    }

    pub fn validate_train(&self) -> CliResult<()> {
        self.train.validate().map_err(|e| CliError::in_section("train", e))
    }

    /// Model config: the synthetic task's base config, input dims taken from
    /// the loaded data, then the `[model]` overrides.
    pub fn model_config(&self, data: &Data) -> CliResult<ModelConfig> {
        let mut base = self.synth.model_config();
        if let Some(m) = &data.manifest {
            base.d_video = m.d_video;
            base.d_question = m.d_question;
            base.num_answers = m.num_answers;
            base.answer_mode = data.answer_mode();
            base.max_video_len = data.max_video_len();
            base.max_question_len = data.max_question_len();
        }
        let mut table = to_table(&base)?;
        for (k, v) in &self.model {
            table.insert(k.clone(), v.clone());
        }
        let cfg: ModelConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Validation(format!("invalid configuration: [model]: {e}")))?;
        cfg.validate().map_err(|e| CliError::in_section("model", e))?;
        Ok(cfg)
    }
}

pub(crate) fn to_table(cfg: &ModelConfig) -> CliResult<toml::Table> {
    match toml::Value::try_from(cfg) {
        Ok(toml::Value::Table(t)) => Ok(t),
        Ok(_) => unreachable!("a struct serializes to a table"),
        Err(e) => Err(CliError::Runtime(format!("cannot serialize model config: {e}"))),
    }
}

/// Names every field on which two model configs disagree, with both values.
pub fn config_mismatches(expected: &ModelConfig, actual: &ModelConfig) -> CliResult<Vec<String>> {
    let (a, b) = (to_table(expected)?, to_table(actual)?);
    Ok(a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| match b.get(k) {
            Some(w) => format!("{k} (config {v}, checkpoint {w})"),
            None => format!("{k} (missing from checkpoint)"),
        })
        .collect())
}

/// Training and validation samples for one run.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: Vec<QaSample>,
    pub val: Vec<QaSample>,
    /// Present when loaded from feature files.
    pub manifest: Option<DatasetManifest>,
}

impl Data {
    pub fn load(cfg: &RunConfig) -> CliResult<Self> {
        match (&cfg.data.train_manifest, &cfg.data.val_manifest) {
            (None, None) => {
                cfg.validate_synth()?;
                let ds = synthbench::generate(&cfg.synth).map_err(|e| CliError::in_section("synth", e))?;
                Ok(Self {
                    train: ds.train.samples,
                    val: ds.val.samples,
                    manifest: None,
                })
            }
            (Some(train), Some(val)) => {
                let (tm, train) = synthbench::load_feature_dataset(train)?;
                let (vm, val) = synthbench::load_feature_dataset(val)?;
                let mut diff = Vec::new();
                for (key, a, b) in [
                    ("d_video", tm.d_video, vm.d_video),
                    ("d_question", tm.d_question, vm.d_question),
                    ("num_answers", tm.num_answers, vm.num_answers),
                ] {
                    if a != b {
                        diff.push(format!("{key} (train {a}, val {b})"));
                    }
                }
                if !diff.is_empty() {
                    return Err(CliError::Validation(format!(
                        "train and val manifests disagree on {}",
                        diff.join(", ")
                    )));
                }
                Ok(Self {
                    train,
                    val,
                    manifest: Some(tm),
                })
            }
            (Some(_), None) => Err(missing("data.val_manifest")),
            (None, Some(_)) => Err(missing("data.train_manifest")),
        }
    }

    fn all(&self) -> impl Iterator<Item = &QaSample> {
        self.train.iter().chain(&self.val)
    }

    fn answer_mode(&self) -> AnswerMode {
        answer_mode_of(&self.train)
    }

    fn max_video_len(&self) -> usize {
        self.all().map(|s| s.video.len()).max().unwrap_or(1)
    }

    fn max_question_len(&self) -> usize {
        self.all().map(max_text_len).max().unwrap_or(1)
    }
}

pub(crate) fn answer_mode_of(samples: &[QaSample]) -> AnswerMode {
    if samples.iter().any(|s| s.candidates.is_some()) {
        AnswerMode::MultipleChoice
    } else {
        AnswerMode::ClosedSet
    }
}

pub(crate) fn max_text_len(s: &QaSample) -> usize {
    let cands = s.candidates.iter().flatten().map(|c| c.len());
    cands.chain([s.question.len()]).max().unwrap_or(0)
}

fn missing(key: &str) -> CliError {
    CliError::Validation(format!(
        "invalid configuration: `{key}` is required when the other manifest is given"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_in_every_section() {
        for text in [
            "colour = 1",
            "[synth]\nn_segmnts = 3",
            "[data]\ntrain = \"x\"",
            "[train]\nlearning_rate = 0.1",
            "[extra]\nx = 1",
        ] {
            let e = RunConfig::parse(text).unwrap_err();
            assert_eq!(e.exit_code(), 1);
            assert!(e.message().contains("unknown"), "{text}: {e}");
        }
        let c = RunConfig::parse("[model]\nd_modle = 8").unwrap();
        let data = Data {
            train: vec![],
            val: vec![],
            manifest: None,
        };
        let e = c.model_config(&data).unwrap_err();
        assert!(e.message().contains("d_modle"), "{e}");
    }

    #[test]
    fn variant_names_accept_both_spellings() {
        for (text, v) in [
            ("variant = \"full\"", Variant::Full),
            ("variant = \"no_QL\"", Variant::NoQl),
            ("variant = \"no_lql\"", Variant::NoLql),
            ("variant = \"soft_QL\"", Variant::SoftQl),
        ] {
            assert_eq!(RunConfig::parse(text).unwrap().variant, v);
        }
        assert!(RunConfig::parse("variant = \"half\"").is_err());
    }

    #[test]
    fn model_overrides_merge_over_the_task_config() {
        let c = RunConfig::parse("[synth]\nd_video = 7\n[model]\nd_model = 16\nheads = 4").unwrap();
        let data = Data {
            train: vec![],
            val: vec![],
            manifest: None,
        };
        let m = c.model_config(&data).unwrap();
        assert_eq!((m.d_video, m.d_model, m.heads), (7, 16, 4));
        assert_eq!(m.n_cross_layers, c.synth.model_config().n_cross_layers);

        let bad = RunConfig::parse("[model]\nd_model = 10\nheads = 4").unwrap();
        let e = bad.model_config(&data).unwrap_err();
        assert!(e.message().contains("`model.heads`"), "{e}");
    }

    #[test]
    fn synth_errors_name_the_section_and_key() {
        let c = RunConfig::parse("[synth]\nvideo_len = 4\nn_segments = 6").unwrap();
        let e = c.validate_synth().unwrap_err();
        assert!(e.message().contains("`synth.n_segments`"), "{e}");
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::parse("variant = \"no_ql\"\n[model]\nd_model = 16\n[train]\nlambda = 0.07").unwrap();
        c.data.train_manifest = Some("/tmp/t.json".into());
        c.data.val_manifest = Some("/tmp/v.json".into());
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn mismatches_name_fields() {
        let a = SynthConfig::default().model_config();
        let b = ModelConfig {
            d_model: 64,
            fusion_rank: 3,
            ..a.clone()
        };
        let m = config_mismatches(&a, &b).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.iter().any(|s| s.starts_with("d_model")));
        assert!(m.iter().any(|s| s.starts_with("fusion_rank")));
        assert!(config_mismatches(&a, &a).unwrap().is_empty());
    }
}
