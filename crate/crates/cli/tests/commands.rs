use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segqa::eval::predict_all;
use segqa::synthbench::{self, load_feature_dataset, nearest_prototype_answer, Prototypes};
use segqa::training::{EpochRecord, Phase};
use segqa::{
    AnswerOutput, Checkpoint, EvalReport, Model, Prediction, PredictionRecord, QaPredictor, QaSample, SynthConfig,
    TrainMode, TrainSchedule, TrainSummary, Variant,
};
use segqa_cli::{
    cmd_eval, cmd_generate, cmd_sweep, cmd_train, EvalOptions, RunConfig, RunOptions, Runner, SweepOptions,
};
use tempfile::TempDir;

const TINY: &str = r#"
[synth]
n_train = 24
n_val = 12
video_len = 8
n_segments = 2
n_keys = 2
key_frames = 0
d_video = 4
d_question = 4
question_len = 2
num_answers = 3

[model]
d_model = 8
heads = 2
fusion_rank = 4
anchor_scales = [1, 2, 3]
n_self_layers = 1
n_cross_layers = 1

[train]
max_epochs = 4
convergence_patience = 10
batch_size = 4
base_lr = 0.01
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn segqa(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_segqa"));
    cmd.args(args).env_remove("SEGQA_OUT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn opts(config: &Path, out: &Path) -> RunOptions {
    RunOptions {
        config: Some(config.into()),
        out: Some(out.into()),
        quiet: true,
        ..Default::default()
    }
}

fn read_history(dir: &Path) -> Vec<EpochRecord> {
    fs::read_to_string(dir.join("history.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generate_minimal_config_prints_existing_manifests() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "gen.toml", "[synth]\nn_train = 4\nn_val = 2\n");
    let out = tmp.path().join("data");
    let o = segqa(&["generate", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed: Vec<PathBuf> = String::from_utf8(o.stdout).unwrap().lines().map(PathBuf::from).collect();
    assert_eq!(printed, vec![out.join("train/manifest.json"), out.join("val/manifest.json")]);
    for p in &printed {
        let (m, samples) = load_feature_dataset(p).unwrap();
        assert_eq!(samples.len(), m.count);
    }
}

#[test]
fn generate_rejects_bad_configs_with_exit_1_naming_the_key() {
    let tmp = TempDir::new().unwrap();
    for (text, key) in [
        ("[synth]\nvideo_len = 4\nn_segments = 6\n", "synth.n_segments"),
        ("[synth]\nn_segmnts = 3\n", "n_segmnts"),
        ("[synth]\nnoise_std = -1.0\n", "synth.noise_std"),
    ] {
        let cfg = write_config(tmp.path(), "bad.toml", text);
        let o = segqa(&["generate", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))], &[]);
        assert_eq!(o.status.code(), Some(1), "{text}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(key), "{text}: {err}");
    }
    let o = segqa(&["generate", "--bogus-flag"], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn default_generate_round_trips_through_the_loader() {
    let tmp = TempDir::new().unwrap();
    let paths = cmd_generate(&RunOptions {
        out: Some(tmp.path().into()),
        ..Default::default()
    })
    .unwrap();
    let ds = synthbench::generate(&SynthConfig::default()).unwrap();
    let as_f32 = |m: &segqa::Matrix| m.as_slice().iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
    for (path, split) in paths.iter().zip([&ds.train, &ds.val]) {
        let (m, loaded) = load_feature_dataset(path).unwrap();
        assert_eq!((m.d_video, m.d_question, m.num_answers), (16, 16, 5));
        assert_eq!(loaded.len(), split.samples.len());
        for (a, b) in loaded.iter().zip(&split.samples) {
            assert_eq!(a.video.tokens().as_slice(), as_f32(b.video.tokens()).as_slice());
            assert_eq!(a.question.tokens().as_slice(), as_f32(b.question.tokens()).as_slice());
            assert_eq!((a.answer_index, a.gt_segment), (b.answer_index, b.gt_segment));
        }
    }
}

#[test]
fn da_training_logs_alternating_phases_and_writes_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TINY);
    let out = tmp.path().join("run");
    let r = cmd_train(&opts(&cfg, &out)).unwrap();
    assert_eq!(r.summary.phases, [Phase::Answer, Phase::Locator, Phase::Answer, Phase::Locator]);
    assert_eq!(r.summary.mode, TrainMode::Da);
    assert_eq!(r.summary.lambda, None);
    assert!(r.summary.best_val_loc_at_05.is_some());

    assert_eq!(read_history(&out), r.history);
    let summary: TrainSummary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary, r.summary);
    let model = Checkpoint::load(&out.join("checkpoint.json")).unwrap().into_model().unwrap();
    assert_eq!(model.store.checksums(), r.summary.final_checksums);
    let resolved = RunConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(resolved.train, r_schedule(&cfg));
}

fn r_schedule(cfg: &Path) -> TrainSchedule {
    RunConfig::load(cfg).unwrap().train
}

#[test]
fn ablation_variants_train_on_the_answer_loss_only() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TINY);
    for v in [Variant::NoQl, Variant::NoLql, Variant::SoftQl] {
        let out = tmp.path().join(v.as_str());
        let r = cmd_train(&RunOptions {
            variant: Some(v),
            ..opts(&cfg, &out)
        })
        .unwrap();
        assert_eq!(r.summary.variant, v);
        assert!(r.summary.phases.iter().all(|&p| p == Phase::Joint), "{v}");
        assert!(r.history.iter().all(|e| e.train_locator_loss.is_none()), "{v}");
    }

    // no_ql never scores proposals; it answers from the whole video.
    let gen = RunOptions {
        config: Some(cfg.clone()),
        out: Some(tmp.path().join("data")),
        ..Default::default()
    };
    let manifests = cmd_generate(&gen).unwrap();
    let ev = cmd_eval(&EvalOptions {
        checkpoint: tmp.path().join("no_ql/checkpoint.json"),
        manifest: manifests[1].clone(),
        ..Default::default()
    })
    .unwrap();
    for r in &ev.records {
        assert_eq!(r.selected_proposal, None);
        assert_eq!(r.segment, Some(segqa::Proposal::new(0, 8)));
    }
}

#[test]
fn variant_flag_parses_table_row_names() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &TINY.replace("max_epochs = 4", "max_epochs = 1"));
    let out = tmp.path().join("o");
    let o = segqa(&["train", "-q", "--config", s(&cfg), "--out", s(&out), "--variant", "no_QL"], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: TrainSummary = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary.variant, Variant::NoQl);
    let o = segqa(&["train", "--config", s(&cfg), "--out", s(&out), "--variant", "nope"], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn non_finite_loss_aborts_with_exit_2() {
    let tmp = TempDir::new().unwrap();
    let text = TINY.replace("base_lr = 0.01", "base_lr = 1e300");
    let cfg = write_config(tmp.path(), "run.toml", &text);
    let out = tmp.path().join("o");
    let o = segqa(&["train", "-q", "--config", s(&cfg), "--out", s(&out)], &[]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(2), "{err}");
    assert!(err.contains("non-finite loss at epoch"), "{err}");
}

#[test]
fn train_reads_manifests_relative_to_the_config() {
    let tmp = TempDir::new().unwrap();
    let gen_cfg = write_config(tmp.path(), "run.toml", TINY);
    cmd_generate(&RunOptions {
        config: Some(gen_cfg),
        out: Some(tmp.path().join("data")),
        ..Default::default()
    })
    .unwrap();
    let text = format!("{TINY}\n[data]\ntrain_manifest = \"data/train/manifest.json\"\nval_manifest = \"data/val/manifest.json\"\n");
    let cfg = write_config(tmp.path(), "files.toml", &text);
    let r = cmd_train(&opts(&cfg, &tmp.path().join("o"))).unwrap();
    assert_eq!(r.history.len(), 4);

    let one = write_config(tmp.path(), "one.toml", "[data]\ntrain_manifest = \"data/train/manifest.json\"\n");
    let e = cmd_train(&opts(&one, &tmp.path().join("p"))).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.message().contains("data.val_manifest"), "{e}");
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &TINY.replace("max_epochs = 4", "max_epochs = 1"));
    let root = tmp.path().join("env_root");
    let o = segqa(&["train", "-q", "--config", s(&cfg)], &[("SEGQA_OUT", &root)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("summary.json").exists());
}

fn trained(tmp: &TempDir) -> (PathBuf, Vec<PathBuf>) {
    let cfg = write_config(tmp.path(), "run.toml", TINY);
    cmd_train(&opts(&cfg, &tmp.path().join("run"))).unwrap();
    let manifests = cmd_generate(&RunOptions {
        config: Some(cfg),
        out: Some(tmp.path().join("data")),
        ..Default::default()
    })
    .unwrap();
    (tmp.path().join("run/checkpoint.json"), manifests)
}

#[test]
fn eval_is_deterministic_and_recounts_to_its_accuracy() {
    let tmp = TempDir::new().unwrap();
    let (ck, manifests) = trained(&tmp);
    let run = |out: &str| {
        segqa(
            &["eval", "--checkpoint", s(&ck), "--manifest", s(&manifests[0]), "--out", s(&tmp.path().join(out))],
            &[],
        )
    };
    let (a, b) = (run("e1"), run("e2"));
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    for f in ["eval.json", "predictions.jsonl"] {
        assert_eq!(fs::read(tmp.path().join("e1").join(f)).unwrap(), fs::read(tmp.path().join("e2").join(f)).unwrap());
    }

    let report: EvalReport = serde_json::from_slice(&a.stdout).unwrap();
    let records: Vec<PredictionRecord> = fs::read_to_string(tmp.path().join("e1/predictions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 24);
    let correct = records.iter().filter(|r| r.predicted == r.answer_index).count();
    assert_eq!(report.correct, correct);
    assert_eq!(report.accuracy, correct as f64 / records.len() as f64);
    let ious: Vec<f64> = records.iter().map(|r| r.iou.unwrap()).collect();
    let loc = ious.iter().filter(|&&v| v >= 0.5).count() as f64 / ious.len() as f64;
    assert_eq!(report.loc_at_05, Some(loc));
}

#[test]
fn eval_names_mismatched_fields() {
    let tmp = TempDir::new().unwrap();
    let (ck, _) = trained(&tmp);

    let other = write_config(tmp.path(), "other.toml", &TINY.replace("d_video = 4", "d_video = 6"));
    let manifests = cmd_generate(&RunOptions {
        config: Some(other),
        out: Some(tmp.path().join("other")),
        ..Default::default()
    })
    .unwrap();
    let o = segqa(&["eval", "--checkpoint", s(&ck), "--manifest", s(&manifests[1])], &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("d_video (checkpoint 4, dataset 6)"), "{err}");

    let own = tmp.path().join("data/val/manifest.json");
    let cfg = write_config(
        tmp.path(),
        "wider.toml",
        &TINY.replace("d_model = 8", "d_model = 16").replace("fusion_rank = 4", "fusion_rank = 2"),
    );
    let e = cmd_eval(&EvalOptions {
        checkpoint: ck.clone(),
        manifest: own.clone(),
        config: Some(cfg),
        out: None,
    })
    .unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.message().contains("d_model") && e.message().contains("fusion_rank"), "{e}");

    let o = segqa(&["eval", "--checkpoint", s(&own), "--manifest", s(&own)], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn random_model_scores_at_chance() {
    let tmp = TempDir::new().unwrap();
    let synth = SynthConfig::default();
    let manifests = cmd_generate(&RunOptions {
        out: Some(tmp.path().into()),
        ..Default::default()
    })
    .unwrap();
    let model = Model::new(synth.model_config(), Variant::Full, 11).unwrap();
    let ck = tmp.path().join("random.json");
    Checkpoint::new(&model, &TrainSchedule::default(), 0).save(&ck).unwrap();
    let r = cmd_eval(&EvalOptions {
        checkpoint: ck,
        manifest: manifests[1].clone(),
        ..Default::default()
    })
    .unwrap();
    // 500 samples, p = 0.2: a 4-sigma band is ±0.072.
    assert!((r.report.accuracy - 0.2).abs() < 0.072, "{}", r.report.accuracy);
}

struct Oracle {
    protos: Prototypes,
    cfg: SynthConfig,
}

impl QaPredictor for Oracle {
    fn predict(&self, sample: &QaSample) -> segqa::Result<Prediction> {
        let (answer, block) = nearest_prototype_answer(&self.protos, &self.cfg, sample);
        let mut scores = vec![0.0; self.cfg.num_answers];
        scores[answer] = 1.0;
        Ok(Prediction {
            answer: AnswerOutput {
                score_ap: scores,
                predicted: answer,
            },
            locator: None,
            segment: Some(block),
        })
    }
}

#[test]
fn evidence_reading_oracle_is_perfect_on_noiseless_files() {
    let tmp = TempDir::new().unwrap();
    let text = "[synth]\nn_train = 50\nn_val = 50\nnoise_std = 0.0\ndistractor_strength = 0.0\n";
    let cfg_path = write_config(tmp.path(), "clean.toml", text);
    let manifests = cmd_generate(&RunOptions {
        config: Some(cfg_path.clone()),
        out: Some(tmp.path().join("d")),
        ..Default::default()
    })
    .unwrap();
    let cfg = RunConfig::load(&cfg_path).unwrap().synth;
    let oracle = Oracle {
        protos: Prototypes::generate(&cfg),
        cfg,
    };
    let (_, samples) = load_feature_dataset(&manifests[1]).unwrap();
    let report = EvalReport::from_records(&predict_all(&oracle, &samples).unwrap());
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.mean_iou, Some(1.0));
}

#[test]
fn sweep_rows_and_the_zero_lambda_reduction() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TINY);
    let root = tmp.path().join("sweep");
    let rows = cmd_sweep(&SweepOptions {
        run: opts(&cfg, &root),
        lambda_grid: vec![0.0],
        runner: Runner::Sequential,
    })
    .unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].mode, rows[0].lambda), (TrainMode::Bundled, Some(0.0)));
    assert_eq!((rows[1].mode, rows[1].lambda), (TrainMode::Da, None));

    let jsonl = fs::read_to_string(root.join("sweep.jsonl")).unwrap();
    let da: BTreeMap<String, serde_json::Value> = serde_json::from_str(jsonl.lines().nth(1).unwrap()).unwrap();
    assert_eq!(da["lambda"], serde_json::Value::Null);
    assert!(fs::read_to_string(root.join("sweep.txt")).unwrap().lines().nth(2).unwrap().starts_with("da"));

    let no_lql = cmd_train(&RunOptions {
        variant: Some(Variant::NoLql),
        ..opts(&cfg, &tmp.path().join("no_lql"))
    })
    .unwrap();
    assert_eq!(rows[0].best_val_accuracy, no_lql.summary.best_val_accuracy);
    assert_eq!(rows[0].convergence_epoch, no_lql.summary.convergence_epoch);
    assert_eq!(rows[0].best_val_loc_at_05, no_lql.summary.best_val_loc_at_05);
    assert_eq!(rows[0].epochs_run, no_lql.summary.epochs_run);
    assert_eq!(
        read_history(&root.join("lambda_0"))
            .iter()
            .map(|r| (r.val_accuracy, r.checksums.clone()))
            .collect::<Vec<_>>(),
        no_lql.history.iter().map(|r| (r.val_accuracy, r.checksums.clone())).collect::<Vec<_>>()
    );

    let e = cmd_sweep(&SweepOptions {
        run: RunOptions {
            variant: Some(Variant::NoQl),
            ..opts(&cfg, &root)
        },
        ..Default::default()
    })
    .unwrap_err();
    assert!(e.message().contains("`variant`"), "{e}");
}

#[test]
fn parallel_sweep_matches_sequential() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &TINY.replace("max_epochs = 4", "max_epochs = 2"));
    let seq = tmp.path().join("seq");
    let par = tmp.path().join("par");
    let a = segqa(&["sweep", "-q", "--config", s(&cfg), "--out", s(&seq), "--lambda-grid", "0.05,0.5"], &[]);
    let b = segqa(
        &["sweep", "-q", "--config", s(&cfg), "--out", s(&par), "--lambda-grid", "0.05,0.5", "--parallel", "--jobs", "2"],
        &[],
    );
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8(a.stdout).unwrap().lines().count(), 4);
    for run in ["lambda_0.05", "lambda_0.5", "da"] {
        for f in ["history.jsonl", "summary.json", "checkpoint.json"] {
            assert_eq!(fs::read(seq.join(run).join(f)).unwrap(), fs::read(par.join(run).join(f)).unwrap(), "{run}/{f}");
        }
    }
}

#[test]
fn fixed_seed_training_is_reproducible_file_for_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = segqa(&["train", "-q", "--config", s(&cfg), "--seed", "42", "--out", s(out)], &[]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["config.toml", "history.jsonl", "summary.json", "checkpoint.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ck = Checkpoint::load(&a.join("checkpoint.json")).unwrap();
    assert_eq!(ck.schedule.seed, 42);
}
