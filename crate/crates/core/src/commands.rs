//! The work behind each CLI subcommand. Every function takes a resolved
//! `RunConfig` plus explicit artifact paths, writes its outputs (always
//! including the resolved config itself, so the run can be replayed from
//! the output directory alone), and returns a summary for the binary to
//! print. `CommandError::exit_code` fixes the process exit codes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{format_config, ConfigError, RunConfig};
use crate::fusion::read_trace;
use crate::policy::{FusionMode, Policy, PolicyError, TrainLogRow, Trainer};
use crate::simenv::{
    evaluate, generate_demos, read_dataset, windows, write_dataset, DemoDataset, EvalOptions,
    EvalReport, RolloutActor, SimError,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const DATASET_FILE: &str = "demos.adpd";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "policy.adpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TRACES_DIR: &str = "traces";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const PHASE_CSV: &str = "phase_alpha.csv";
pub const PHASE_JSON: &str = "attn_summary.json";

pub const TRAIN_LOG_HEADER: &str = "step,loss,loss_pi,loss_ffp,mean_alpha_tac";

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("cannot write {path}: {why}")]
    Unwritable { path: PathBuf, why: String },
    #[error("dataset {path} is unusable: {why}")]
    BadDataset { path: PathBuf, why: String },
    #[error("checkpoint {path} is missing or unusable: {why}")]
    BadCheckpoint { path: PathBuf, why: String },
    #[error("no attention traces under {0}")]
    MissingTraces(PathBuf),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl CommandError {
    /// Stable process exit codes: 2 unwritable output, 3 bad dataset,
    /// 4 bad checkpoint, 5 missing traces, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Unwritable { .. } => 2,
            CommandError::BadDataset { .. } => 3,
            CommandError::BadCheckpoint { .. } => 4,
            CommandError::MissingTraces(_) => 5,
            _ => 1,
        }
    }
}

fn unwritable(path: &Path, err: impl std::fmt::Display) -> CommandError {
    CommandError::Unwritable {
        path: path.to_path_buf(),
        why: err.to_string(),
    }
}

/// Create the output directory and drop the resolved config into it.
fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<(), CommandError> {
    fs::create_dir_all(out).map_err(|e| unwritable(out, e))?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, format_config(cfg)).map_err(|e| unwritable(&path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CommandError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CommandError::Invalid(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| unwritable(path, e))
}

fn load_dataset(path: &Path) -> Result<DemoDataset, CommandError> {
    read_dataset(path).map_err(|e| CommandError::BadDataset {
        path: path.to_path_buf(),
        why: e.to_string(),
    })
}

/// The dataset must have been recorded with the geometry the policy will
/// consume; silently training across a mismatch would corrupt the action
/// layout.
fn check_schema(ds: &DemoDataset, cfg: &RunConfig, path: &Path) -> Result<(), CommandError> {
    let mismatch = |why: String| CommandError::BadDataset {
        path: path.to_path_buf(),
        why,
    };
    if ds.joints != cfg.policy.joints {
        return Err(mismatch(format!(
            "recorded with {} joints, policy expects {}",
            ds.joints, cfg.policy.joints
        )));
    }
    if ds.sensors != cfg.policy.sensors {
        return Err(mismatch(format!(
            "recorded with {} sensors, policy expects {}",
            ds.sensors, cfg.policy.sensors
        )));
    }
    Ok(())
}

fn format_train_log(rows: &[TrainLogRow]) -> String {
    let mut out = String::with_capacity(48 * (rows.len() + 1));
    out.push_str(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss, r.loss_pi, r.loss_ffp, r.mean_alpha_tac
        ));
    }
    out
}

/// Parse a CSV written by `format_train_log`. Float formatting uses the
/// shortest roundtrip form, so parsed values are bit-identical to the run.
pub fn parse_train_log(text: &str) -> Result<Vec<TrainLogRow>, CommandError> {
    let mut lines = text.lines();
    if lines.next() != Some(TRAIN_LOG_HEADER) {
        return Err(CommandError::Invalid("bad training log header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CommandError::Invalid(format!(
                "training log line {}: want 5 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| {
            CommandError::Invalid(format!("training log line {}: bad {what}", i + 2))
        };
        rows.push(TrainLogRow {
            step: fields[0].parse().map_err(|_| bad("step"))?,
            loss: fields[1].parse().map_err(|_| bad("loss"))?,
            loss_pi: fields[2].parse().map_err(|_| bad("loss_pi"))?,
            loss_ffp: fields[3].parse().map_err(|_| bad("loss_ffp"))?,
            mean_alpha_tac: fields[4].parse().map_err(|_| bad("mean_alpha_tac"))?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct GenDemosSummary {
    pub dataset: PathBuf,
    pub episodes: usize,
    pub attempts: usize,
    pub expert_success_rate: f64,
    pub total_steps: usize,
    pub mean_episode_length: f64,
    /// Training windows the recorded episodes can be cut into.
    pub windows: usize,
    pub bytes: u64,
}

pub fn cmd_gen_demos(cfg: &RunConfig, out: &Path) -> Result<GenDemosSummary, CommandError> {
    prepare_out(cfg, out)?;
    let batch = generate_demos(
        &cfg.env,
        cfg.demos,
        cfg.seed,
        cfg.policy.history,
        cfg.policy.horizon,
    )?;
    let path = out.join(DATASET_FILE);
    write_dataset(&path, &batch.dataset).map_err(|e| unwritable(&path, e))?;
    let ds = &batch.dataset;
    let episodes = ds.episodes.len();
    let total_steps = ds.step_count();
    let summary = GenDemosSummary {
        dataset: path.clone(),
        episodes,
        attempts: batch.attempts,
        expert_success_rate: batch.expert_success_rate(),
        total_steps,
        mean_episode_length: total_steps as f64 / episodes.max(1) as f64,
        windows: windows(ds, cfg.policy.history, cfg.policy.horizon).len(),
        bytes: fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
    };
    write_json(&out.join(MANIFEST_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub samples: usize,
    /// Steps run by this invocation.
    pub steps: usize,
    /// Step counter after training; larger than `steps` on resumed runs.
    pub final_step: usize,
    pub final_loss: f64,
    pub snapshots: usize,
}

pub fn cmd_train(
    cfg: &RunConfig,
    dataset: &Path,
    resume: Option<&Path>,
    out: &Path,
) -> Result<TrainSummary, CommandError> {
    prepare_out(cfg, out)?;
    let ds = load_dataset(dataset)?;
    check_schema(&ds, cfg, dataset)?;
    let samples = windows(&ds, cfg.policy.history, cfg.policy.horizon);
    if samples.is_empty() {
        return Err(CommandError::BadDataset {
            path: dataset.to_path_buf(),
            why: format!(
                "no episode is long enough for history {} + horizon {}",
                cfg.policy.history, cfg.policy.horizon
            ),
        });
    }

    let mut trainer = match resume {
        Some(ckpt) => {
            let (policy, opt_records) = load_policy(ckpt)?;
            if policy.cfg != cfg.policy {
                return Err(CommandError::BadCheckpoint {
                    path: ckpt.to_path_buf(),
                    why: "checkpoint was trained with a different policy config".into(),
                });
            }
            Trainer::resume(policy, &opt_records, &cfg.train, cfg.seed)
        }
        None => Trainer::new(&samples, cfg.policy.clone(), &cfg.train, cfg.seed)?,
    };

    let mut rows: Vec<TrainLogRow> = Vec::with_capacity(cfg.train.steps);
    let mut snapshots = 0usize;
    let mut done = 0usize;
    while done < cfg.train.steps {
        let seg = if cfg.snapshot_every == 0 {
            cfg.train.steps
        } else {
            cfg.snapshot_every
        }
        .min(cfg.train.steps - done);
        trainer.run(&samples, cfg.train.batch, seg, |r| rows.push(*r))?;
        done += seg;
        if cfg.snapshot_every != 0 && done < cfg.train.steps {
            let snap = out.join(format!("policy_step_{:06}.adpt", trainer.step));
            trainer
                .policy
                .save(&snap, Some(&trainer.opt))
                .map_err(|e| unwritable(&snap, e))?;
            snapshots += 1;
        }
    }

    let log = out.join(TRAIN_LOG_FILE);
    fs::write(&log, format_train_log(&rows)).map_err(|e| unwritable(&log, e))?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    trainer
        .policy
        .save(&checkpoint, Some(&trainer.opt))
        .map_err(|e| unwritable(&checkpoint, e))?;

    Ok(TrainSummary {
        checkpoint,
        log,
        samples: samples.len(),
        steps: done,
        final_step: trainer.step,
        final_loss: rows.last().map(|r| r.loss).unwrap_or(f64::NAN),
        snapshots,
    })
}

fn load_policy(path: &Path) -> Result<(Policy, BTreeMap<String, crate::numerics::Tensor>), CommandError> {
    Policy::load(path).map_err(|e| CommandError::BadCheckpoint {
        path: path.to_path_buf(),
        why: e.to_string(),
    })
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
) -> Result<EvalReport, CommandError> {
    prepare_out(cfg, out)?;
    let (policy, _) = load_policy(checkpoint)?;
    if policy.cfg.joints != cfg.env.joints() {
        return Err(CommandError::Invalid(format!(
            "policy drives {} joints but the environment has {}",
            policy.cfg.joints,
            cfg.env.joints()
        )));
    }
    let traces = out.join(TRACES_DIR);
    fs::create_dir_all(&traces).map_err(|e| unwritable(&traces, e))?;
    let opts = EvalOptions {
        episodes: cfg.eval_episodes,
        seed: cfg.seed,
        exec_horizon: cfg.exec_horizon,
        trace_dir: Some(traces),
    };
    let report = evaluate(&cfg.env, &RolloutActor::Policy(&policy), &opts)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct AblateRow {
    pub mode: String,
    pub success_rate: f64,
    pub avg_episode_length: f64,
    /// Mean tactile attention over every traced step; absent for wirings
    /// without attention.
    pub mean_alpha_tac: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct AblateSummary {
    pub episodes_per_mode: usize,
    pub rows: Vec<AblateRow>,
    /// Whole-episode tactile attention, full minus no_ffpg. Positive means
    /// the force-prediction head pulls attention toward touch.
    pub alpha_tac_gap_full_minus_no_ffpg: Option<f64>,
}

/// Train and evaluate every fusion wiring on the same dataset with the
/// same seeds: identical parameter init streams, batch order, and eval
/// episodes, so any score difference comes from the wiring alone.
pub fn cmd_ablate(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
) -> Result<AblateSummary, CommandError> {
    prepare_out(cfg, out)?;
    let ds = load_dataset(dataset)?;
    let mut rows = Vec::new();
    let mut alpha_by_mode: BTreeMap<String, Option<f64>> = BTreeMap::new();
    for mode in FusionMode::ALL {
        let mut mode_cfg = cfg.clone();
        mode_cfg.policy.mode = mode;
        check_schema(&ds, &mode_cfg, dataset)?;
        let sub = out.join(mode.as_str());
        fs::create_dir_all(&sub).map_err(|e| unwritable(&sub, e))?;

        let samples = windows(&ds, mode_cfg.policy.history, mode_cfg.policy.horizon);
        if samples.is_empty() {
            return Err(CommandError::BadDataset {
                path: dataset.to_path_buf(),
                why: "no full training windows".into(),
            });
        }
        let mut trainer =
            Trainer::new(&samples, mode_cfg.policy.clone(), &mode_cfg.train, mode_cfg.seed)?;
        let mut log_rows = Vec::with_capacity(mode_cfg.train.steps);
        trainer.run(&samples, mode_cfg.train.batch, mode_cfg.train.steps, |r| {
            log_rows.push(*r)
        })?;
        let log = sub.join(TRAIN_LOG_FILE);
        fs::write(&log, format_train_log(&log_rows)).map_err(|e| unwritable(&log, e))?;
        let ckpt = sub.join(CHECKPOINT_FILE);
        trainer
            .policy
            .save(&ckpt, None)
            .map_err(|e| unwritable(&ckpt, e))?;

        let traces = sub.join(TRACES_DIR);
        fs::create_dir_all(&traces).map_err(|e| unwritable(&traces, e))?;
        let opts = EvalOptions {
            episodes: cfg.eval_episodes,
            seed: cfg.seed,
            exec_horizon: cfg.exec_horizon,
            trace_dir: Some(traces.clone()),
        };
        let report = evaluate(&cfg.env, &RolloutActor::Policy(&trainer.policy), &opts)?;
        write_json(&sub.join(REPORT_FILE), &report)?;

        let mean_alpha = mean_alpha_tac_of_traces(&traces)?;
        alpha_by_mode.insert(mode.as_str().to_string(), mean_alpha);
        rows.push(AblateRow {
            mode: mode.as_str().to_string(),
            success_rate: report.success_rate,
            avg_episode_length: report.avg_episode_length,
            mean_alpha_tac: mean_alpha,
        });
    }

    let gap = match (alpha_by_mode.get("full"), alpha_by_mode.get("no_ffpg")) {
        (Some(Some(f)), Some(Some(n))) => Some(f - n),
        _ => None,
    };
    let summary = AblateSummary {
        episodes_per_mode: cfg.eval_episodes,
        rows,
        alpha_tac_gap_full_minus_no_ffpg: gap,
    };
    write_json(&out.join(ABLATION_JSON), &summary)?;
    let mut csv = String::from("mode,success_rate,avg_episode_length,mean_alpha_tac\n");
    for r in &summary.rows {
        let alpha = r.mean_alpha_tac.map(|a| a.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.mode, r.success_rate, r.avg_episode_length, alpha
        ));
    }
    let csv_path = out.join(ABLATION_CSV);
    fs::write(&csv_path, csv).map_err(|e| unwritable(&csv_path, e))?;
    Ok(summary)
}

/// Trace files an evaluation left in `dir`, sorted by name.
fn trace_files(dir: &Path) -> Vec<PathBuf> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("trace_") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    files
}

fn mean_alpha_tac_of_traces(dir: &Path) -> Result<Option<f64>, CommandError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for file in trace_files(dir) {
        for r in read_trace(&file).map_err(SimError::from)? {
            if r.alpha_tac >= 0.0 {
                sum += r.alpha_tac;
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[derive(Debug, Serialize)]
pub struct PhaseStat {
    pub phase: String,
    pub rows: usize,
    pub mean_alpha_tac: f64,
}

#[derive(Debug, Serialize)]
pub struct PhaseSummary {
    pub files: usize,
    /// Steps carrying real attention weights.
    pub rows: usize,
    /// Steps skipped because the wiring had no attention.
    pub sentinel_rows: usize,
    pub per_phase: Vec<PhaseStat>,
    /// Mean tactile attention during flip minus during reach, when both
    /// phases were visited.
    pub reach_to_flip_delta: Option<f64>,
}

/// Phase labels every trace row already carries its simulator phase, so
/// the join is a grouped mean over files.
pub fn cmd_attn_trace(
    cfg: &RunConfig,
    traces: &Path,
    out: &Path,
) -> Result<PhaseSummary, CommandError> {
    let files = trace_files(traces);
    if files.is_empty() {
        return Err(CommandError::MissingTraces(traces.to_path_buf()));
    }
    prepare_out(cfg, out)?;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut rows = 0usize;
    let mut sentinel_rows = 0usize;
    for file in &files {
        for r in read_trace(file).map_err(SimError::from)? {
            if r.alpha_tac < 0.0 {
                sentinel_rows += 1;
                continue;
            }
            rows += 1;
            let e = sums.entry(r.phase.clone()).or_insert((0.0, 0));
            e.0 += r.alpha_tac;
            e.1 += 1;
        }
    }
    // Canonical phase order first, anything unexpected after.
    let order = ["reach", "press", "flip", "retreat"];
    let mut per_phase: Vec<PhaseStat> = Vec::new();
    for name in order {
        if let Some((s, n)) = sums.remove(name) {
            per_phase.push(PhaseStat {
                phase: name.to_string(),
                rows: n,
                mean_alpha_tac: s / n as f64,
            });
        }
    }
    for (name, (s, n)) in sums {
        per_phase.push(PhaseStat {
            phase: name,
            rows: n,
            mean_alpha_tac: s / n as f64,
        });
    }
    let mean_of = |label: &str| {
        per_phase
            .iter()
            .find(|p| p.phase == label)
            .map(|p| p.mean_alpha_tac)
    };
    let delta = match (mean_of("reach"), mean_of("flip")) {
        (Some(r), Some(f)) => Some(f - r),
        _ => None,
    };
    let summary = PhaseSummary {
        files: files.len(),
        rows,
        sentinel_rows,
        per_phase,
        reach_to_flip_delta: delta,
    };
    write_json(&out.join(PHASE_JSON), &summary)?;
    let mut csv = String::from("phase,rows,mean_alpha_tac\n");
    for p in &summary.per_phase {
        csv.push_str(&format!("{},{},{}\n", p.phase, p.rows, p.mean_alpha_tac));
    }
    let csv_path = out.join(PHASE_CSV);
    fs::write(&csv_path, csv).map_err(|e| unwritable(&csv_path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    /// Small nets, short episodes, few steps: enough to exercise every
    /// artifact without a real training run.
    fn tiny_run() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.demos = 1;
        cfg.eval_episodes = 2;
        cfg.seed = 11;
        cfg.train.steps = 4;
        cfg.train.batch = 2;
        cfg.policy.embed_dim = 8;
        cfg.policy.pc_point_widths = vec![8];
        cfg.policy.pc_feat = 8;
        cfg.policy.tac_taxel_widths = vec![8];
        cfg.policy.tac_feat = 8;
        cfg.policy.force_hidden = vec![];
        cfg.policy.force_head_hidden = vec![8];
        cfg.policy.action_head_hidden = vec![8];
        cfg.policy.temb_dim = 4;
        cfg.policy.t_train = 5;
        cfg.policy.t_infer = 2;
        cfg.policy.n_max_points = 32;
        cfg
    }

    #[test]
    fn gen_demos_manifest_matches_a_recount_of_the_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("demos");
        let cfg = tiny_run();
        let s = cmd_gen_demos(&cfg, &out).unwrap();
        assert_eq!(s.episodes, 1);
        assert!(s.attempts >= 1);
        assert!(s.expert_success_rate > 0.0 && s.expert_success_rate <= 1.0);

        let ds = read_dataset(&s.dataset).unwrap();
        assert_eq!(ds.episodes.len(), s.episodes);
        assert_eq!(ds.step_count(), s.total_steps);
        assert_eq!(
            windows(&ds, cfg.policy.history, cfg.policy.horizon).len(),
            s.windows
        );
        assert_eq!(fs::metadata(&s.dataset).unwrap().len(), s.bytes);

        // The resolved config replays to the exact same RunConfig.
        let text = fs::read_to_string(out.join(CONFIG_FILE)).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
        assert!(out.join(MANIFEST_FILE).exists());
    }

    #[test]
    fn train_eval_and_phase_summary_chain_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run();
        let demos = cmd_gen_demos(&cfg, &dir.path().join("demos")).unwrap();

        let train_out = dir.path().join("train");
        let t = cmd_train(&cfg, &demos.dataset, None, &train_out).unwrap();
        assert_eq!(t.steps, 4);
        assert_eq!(t.final_step, 4);
        assert!(t.final_loss.is_finite());
        let rows = parse_train_log(&fs::read_to_string(&t.log).unwrap()).unwrap();
        assert_eq!(rows.len(), 4);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.step, i);
            let alpha = cfg.policy.force_loss_weight;
            assert!((r.loss - (r.loss_pi + r.loss_ffp * alpha)).abs() < 1e-12);
        }

        let mut eval_cfg = cfg.clone();
        eval_cfg.env.max_steps = 30;
        let eval_out = dir.path().join("eval");
        let report = cmd_eval(&eval_cfg, &t.checkpoint, &eval_out).unwrap();
        assert_eq!(report.episodes, 2);
        assert!(eval_out.join(REPORT_FILE).exists());

        let summary =
            cmd_attn_trace(&cfg, &eval_out.join(TRACES_DIR), &dir.path().join("attn")).unwrap();
        assert_eq!(summary.files, 2);
        assert!(summary.rows > 0);
        let traced: usize = summary.per_phase.iter().map(|p| p.rows).sum();
        assert_eq!(traced, summary.rows);
        for p in &summary.per_phase {
            assert!(p.mean_alpha_tac >= 0.0 && p.mean_alpha_tac <= 1.0);
        }
    }

    #[test]
    fn resumed_training_continues_the_step_counter() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run();
        let demos = cmd_gen_demos(&cfg, &dir.path().join("demos")).unwrap();

        cfg.snapshot_every = 2;
        let first = cmd_train(&cfg, &demos.dataset, None, &dir.path().join("a")).unwrap();
        assert_eq!(first.snapshots, 1);
        assert!(dir.path().join("a/policy_step_000002.adpt").exists());

        cfg.snapshot_every = 0;
        cfg.train.steps = 3;
        let second = cmd_train(
            &cfg,
            &demos.dataset,
            Some(&first.checkpoint),
            &dir.path().join("b"),
        )
        .unwrap();
        assert_eq!(second.steps, 3);
        assert_eq!(second.final_step, 7);
        let rows =
            parse_train_log(&fs::read_to_string(&second.log).unwrap()).unwrap();
        assert_eq!(rows.first().unwrap().step, 4);
        assert_eq!(rows.last().unwrap().step, 6);
    }

    #[test]
    fn exit_codes_separate_the_failure_classes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run();

        // Output path blocked by a regular file.
        let blocker = dir.path().join("blocked");
        fs::write(&blocker, b"file").unwrap();
        let err = cmd_gen_demos(&cfg, &blocker.join("sub")).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        // Dataset that cannot decode.
        let junk = dir.path().join("junk.adpd");
        fs::write(&junk, b"not a dataset").unwrap();
        let err = cmd_train(&cfg, &junk, None, &dir.path().join("t")).unwrap_err();
        assert_eq!(err.exit_code(), 3);

        // Dataset recorded for a different joint count.
        let demos = cmd_gen_demos(&cfg, &dir.path().join("demos")).unwrap();
        let mut narrow = cfg.clone();
        narrow.policy.joints = 1;
        let err = cmd_train(&narrow, &demos.dataset, None, &dir.path().join("t2")).unwrap_err();
        assert_eq!(err.exit_code(), 3);

        // Missing checkpoint.
        let err = cmd_eval(&cfg, &dir.path().join("nope.adpt"), &dir.path().join("e"))
            .unwrap_err();
        assert_eq!(err.exit_code(), 4);

        // Missing traces.
        let err = cmd_attn_trace(&cfg, &dir.path().join("no_traces"), &dir.path().join("s"))
            .unwrap_err();
        assert_eq!(err.exit_code(), 5);
    }

    #[test]
    fn ablation_covers_every_mode_with_shared_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run();
        cfg.eval_episodes = 1;
        cfg.train.steps = 2;
        let demos = cmd_gen_demos(&cfg, &dir.path().join("demos")).unwrap();
        // Evaluation episodes stay short; the recorded demos keep the full
        // step budget the expert needs.
        cfg.env.max_steps = 25;

        let out = dir.path().join("ablate");
        let summary = cmd_ablate(&cfg, &demos.dataset, &out).unwrap();
        let modes: Vec<&str> = summary.rows.iter().map(|r| r.mode.as_str()).collect();
        assert_eq!(modes, ["full", "no_ffpg", "no_fgaf", "ofp_ofg"]);
        for r in &summary.rows {
            let sub = out.join(&r.mode);
            assert!(sub.join(CHECKPOINT_FILE).exists());
            assert!(sub.join(TRAIN_LOG_FILE).exists());
            assert!(sub.join(REPORT_FILE).exists());
            if r.mode == "no_fgaf" {
                assert!(r.mean_alpha_tac.is_none());
            } else {
                assert!(r.mean_alpha_tac.is_some());
            }
        }
        assert!(summary.alpha_tac_gap_full_minus_no_ffpg.is_some());
        assert!(out.join(ABLATION_JSON).exists());
        assert!(out.join(ABLATION_CSV).exists());
    }
}
