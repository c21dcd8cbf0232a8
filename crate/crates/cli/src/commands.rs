use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use segqa::eval::predict_all;
use segqa::synthbench::{self, load_feature_dataset};
use segqa::training::{train_loop, EpochRecord, LAMBDA_GRID};
use segqa::Phase;
use segqa::{Checkpoint, EvalReport, Model, PredictionRecord, TrainMode, TrainSummary, Variant};

use crate::config::{answer_mode_of, config_mismatches, max_text_len, Data, RunConfig};
use crate::error::{CliError, CliResult};

/// Flags shared by the config-driven commands.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub quiet: bool,
}

impl RunOptions {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        Ok(cfg)
    }

    /// `--out` (or its env var), then the config's `out`, then `default`.
    fn out_dir(&self, cfg: &RunConfig, default: &str) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from(default))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, &text)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_file(path, &text)
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Writes the synthetic task's train and val splits; returns the manifest paths.
pub fn cmd_generate(opts: &RunOptions) -> CliResult<Vec<PathBuf>> {
    let mut cfg = opts.load()?;
    if let Some(s) = opts.seed {
        cfg.synth.seed = s;
    }
    cfg.validate_synth()?;
    let out = opts.out_dir(&cfg, "data");
    let ds = synthbench::generate(&cfg.synth).map_err(|e| CliError::in_section("synth", e))?;
    Ok(synthbench::write_dataset(&ds, &out)?)
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub out: PathBuf,
    pub history: Vec<EpochRecord>,
    pub summary: TrainSummary,
}

/// Files a training run leaves in its output directory.
pub const CONFIG_FILE: &str = "config.toml";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn cmd_train(opts: &RunOptions) -> CliResult<TrainResult> {
    let mut cfg = opts.load()?;
    if let Some(s) = opts.seed {
        cfg.train.seed = s;
    }
    let out = opts.out_dir(&cfg, &format!("runs/{}", cfg.variant));
    train_run(&cfg, &out, opts.quiet)
}

/// One training run: writes the resolved config, per-epoch history, the
/// best-validation checkpoint and a summary under `out`.
pub fn train_run(cfg: &RunConfig, out: &Path, quiet: bool) -> CliResult<TrainResult> {
    cfg.validate_train()?;
    let data = Data::load(cfg)?;
    let model_cfg = cfg.model_config(&data)?;
    let model = Model::new(model_cfg.clone(), cfg.variant, cfg.train.seed)?;

    create_dir(out)?;
    let mut resolved = cfg.clone();
    resolved.out = None;
    resolved.model = crate::config::to_table(&model_cfg)?;
    for p in [&mut resolved.data.train_manifest, &mut resolved.data.val_manifest].into_iter().flatten() {
        *p = absolute(p);
    }
    write_file(&out.join(CONFIG_FILE), &resolved.to_toml()?)?;

    let history_path = out.join(HISTORY_FILE);
    let mut history = BufWriter::new(File::create(&history_path).map_err(|e| CliError::io(&history_path, e))?);
    let mut write_err = None;
    let start = Instant::now();
    let outcome = train_loop(model, &data.train, &data.val, &cfg.train, |r| {
        let line = serde_json::to_string(r).expect("epoch records serialize");
        if let Err(e) = writeln!(history, "{line}").and_then(|_| history.flush()) {
            write_err.get_or_insert(e);
        }
        if !quiet {
            eprintln!(
                "epoch {:>3} {:<5} lr {:.2e}  L_AP {:>7}  L_QL {:>7}  val acc {:.4}  loc@0.5 {}  ({:.0?})",
                r.epoch,
                match r.phase {
                    Phase::Answer => "AP",
                    Phase::Locator => "QL",
                    Phase::Joint => "joint",
                },
                r.lr,
                fmt_opt(r.train_answer_loss, 4),
                fmt_opt(r.train_locator_loss, 4),
                r.val_accuracy,
                fmt_opt(r.val_loc_at_05, 3),
                start.elapsed(),
            );
        }
    });
    drop(history);
    if let Some(e) = write_err {
        return Err(CliError::io(&history_path, e));
    }
    let outcome = outcome?;

    Checkpoint::new(&outcome.best, &cfg.train, outcome.summary.epochs_run).save(&out.join(CHECKPOINT_FILE))?;
    write_json(&out.join(SUMMARY_FILE), &outcome.summary)?;
    Ok(TrainResult {
        out: out.to_path_buf(),
        history: outcome.history,
        summary: outcome.summary,
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    /// When given, its resolved model config must match the checkpoint's.
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub report: EvalReport,
    pub records: Vec<PredictionRecord>,
}

pub const REPORT_FILE: &str = "eval.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

pub fn cmd_eval(opts: &EvalOptions) -> CliResult<EvalResult> {
    let ck = Checkpoint::load(&opts.checkpoint)?;
    let (manifest, samples) = load_feature_dataset(&opts.manifest)?;

    let m = &ck.model;
    let mut diff = Vec::new();
    for (key, want, have) in [
        ("d_video", m.d_video, manifest.d_video),
        ("d_question", m.d_question, manifest.d_question),
        ("num_answers", m.num_answers, manifest.num_answers),
    ] {
        if want != have {
            diff.push(format!("{key} (checkpoint {want}, dataset {have})"));
        }
    }
    let mode = answer_mode_of(&samples);
    if !samples.is_empty() && mode != m.answer_mode {
        diff.push(format!("answer_mode (checkpoint {:?}, dataset {:?})", m.answer_mode, mode));
    }
    let longest_video = samples.iter().map(|s| s.video.len()).max().unwrap_or(0);
    if longest_video > m.max_video_len {
        diff.push(format!("max_video_len (checkpoint {}, dataset needs {longest_video})", m.max_video_len));
    }
    let longest_text = samples.iter().map(max_text_len).max().unwrap_or(0);
    if longest_text > m.max_question_len {
        diff.push(format!("max_question_len (checkpoint {}, dataset needs {longest_text})", m.max_question_len));
    }
    if !diff.is_empty() {
        return Err(CliError::Validation(format!(
            "checkpoint {} is incompatible with dataset {}: {}",
            opts.checkpoint.display(),
            opts.manifest.display(),
            diff.join(", ")
        )));
    }

    if let Some(path) = &opts.config {
        let cfg = RunConfig::load(path)?;
        let data = Data {
            train: samples.clone(),
            val: Vec::new(),
            manifest: Some(manifest.clone()),
        };
        let mut diff = config_mismatches(&cfg.model_config(&data)?, &ck.model)?;
        if cfg.variant != ck.variant {
            diff.push(format!("variant (config {}, checkpoint {})", cfg.variant, ck.variant));
        }
        if !diff.is_empty() {
            return Err(CliError::Validation(format!(
                "checkpoint {} does not match config {}: {}",
                opts.checkpoint.display(),
                path.display(),
                diff.join(", ")
            )));
        }
    }

    let model = ck.into_model()?;
    let records = predict_all(&model, &samples)?;
    let report = EvalReport::from_records(&records);
    if let Some(out) = &opts.out {
        create_dir(out)?;
        write_json(&out.join(REPORT_FILE), &report)?;
        write_jsonl(&out.join(PREDICTIONS_FILE), &records)?;
    }
    Ok(EvalResult { report, records })
}

/// Where sweep runs execute.
#[derive(Clone, Debug, Default)]
pub enum Runner {
    /// One after another inside this process.
    #[default]
    Sequential,
    /// Each run as a child `train` process of `exe`, at most `jobs` at a time.
    Processes { exe: PathBuf, jobs: usize },
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    pub run: RunOptions,
    /// Bundled-loss weights; empty means the built-in grid.
    pub lambda_grid: Vec<f64>,
    pub runner: Runner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: TrainMode,
    /// `None` on the alternating-training row.
    pub lambda: Option<f64>,
    pub best_val_accuracy: f64,
    pub convergence_epoch: usize,
    pub epochs_run: usize,
    pub best_val_loc_at_05: Option<f64>,
}

impl From<&TrainSummary> for SweepRow {
    fn from(s: &TrainSummary) -> Self {
        Self {
            mode: s.mode,
            lambda: s.lambda,
            best_val_accuracy: s.best_val_accuracy,
            convergence_epoch: s.convergence_epoch,
            epochs_run: s.epochs_run,
            best_val_loc_at_05: s.best_val_loc_at_05,
        }
    }
}

pub const SWEEP_FILE: &str = "sweep.jsonl";
pub const SWEEP_TABLE_FILE: &str = "sweep.txt";

/// One bundled run per λ plus one alternating run, each in its own
/// subdirectory of the output root; rows come back in that order.
pub fn cmd_sweep(opts: &SweepOptions) -> CliResult<Vec<SweepRow>> {
    let mut base = opts.run.load()?;
    if let Some(s) = opts.run.seed {
        base.train.seed = s;
    }
    if base.variant != Variant::Full {
        return Err(CliError::Validation(format!(
            "invalid configuration: `variant`: sweeps train the full model, got {}",
            base.variant
        )));
    }
    let grid = if opts.lambda_grid.is_empty() {
        LAMBDA_GRID.to_vec()
    } else {
        opts.lambda_grid.clone()
    };
    let root = opts.run.out_dir(&base, "runs/sweep");

    let mut runs = Vec::new();
    for &lambda in &grid {
        let mut cfg = base.clone();
        cfg.train.mode = TrainMode::Bundled;
        cfg.train.lambda = lambda;
        cfg.validate_train()?;
        runs.push((root.join(format!("lambda_{lambda}")), cfg));
    }
    let mut da = base.clone();
    da.train.mode = TrainMode::Da;
    runs.push((root.join("da"), da));

    let summaries = match &opts.runner {
        Runner::Sequential => runs
            .iter()
            .map(|(dir, cfg)| train_run(cfg, dir, opts.run.quiet).map(|r| r.summary))
            .collect::<CliResult<Vec<_>>>()?,
        Runner::Processes { exe, jobs } => run_processes(exe, (*jobs).max(1), &runs, opts.run.quiet)?,
    };

    let rows: Vec<SweepRow> = summaries.iter().map(SweepRow::from).collect();
    create_dir(&root)?;
    write_jsonl(&root.join(SWEEP_FILE), &rows)?;
    write_file(&root.join(SWEEP_TABLE_FILE), &format_table(&rows))?;
    Ok(rows)
}

fn run_processes(exe: &Path, jobs: usize, runs: &[(PathBuf, RunConfig)], quiet: bool) -> CliResult<Vec<TrainSummary>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let per_child = (threads / jobs).max(1);
    for chunk in runs.chunks(jobs) {
        let mut children = Vec::new();
        for (dir, cfg) in chunk {
            create_dir(dir)?;
            let mut cfg = cfg.clone();
            cfg.out = None;
            for p in [&mut cfg.data.train_manifest, &mut cfg.data.val_manifest].into_iter().flatten() {
                *p = absolute(p);
            }
            let path = dir.join("sweep_config.toml");
            write_file(&path, &cfg.to_toml()?)?;
            let mut cmd = Command::new(exe);
            cmd.arg("train").arg("--config").arg(&path).arg("--out").arg(dir);
            if quiet {
                cmd.arg("--quiet");
            }
            cmd.env("RAYON_NUM_THREADS", per_child.to_string()).stdout(Stdio::null());
            let child = cmd
                .spawn()
                .map_err(|e| CliError::Runtime(format!("cannot start {}: {e}", exe.display())))?;
            children.push((dir, child));
        }
        for (dir, mut child) in children {
            let status = child
                .wait()
                .map_err(|e| CliError::Runtime(format!("waiting for run in {}: {e}", dir.display())))?;
            if !status.success() {
                let msg = format!("run in {} failed ({status})", dir.display());
                return Err(match status.code() {
                    Some(1) => CliError::Validation(msg),
                    _ => CliError::Runtime(msg),
                });
            }
        }
    }
    runs.iter()
        .map(|(dir, _)| {
            let path = dir.join(SUMMARY_FILE);
            let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

pub fn format_table(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:<8} {:>8} {:>9} {:>11} {:>7} {:>8}\n",
        "mode", "lambda", "best_acc", "conv_epoch", "epochs", "loc@0.5"
    );
    for r in rows {
        let mode = match r.mode {
            TrainMode::Da => "da",
            TrainMode::Bundled => "bundled",
        };
        s.push_str(&format!(
            "{:<8} {:>8} {:>9.4} {:>11} {:>7} {:>8}\n",
            mode,
            r.lambda.map_or_else(|| "-".into(), |l| l.to_string()),
            r.best_val_accuracy,
            r.convergence_epoch,
            r.epochs_run,
            fmt_opt(r.best_val_loc_at_05, 3),
        ));
    }
    s
}
