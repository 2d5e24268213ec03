//! Flat key = value run configuration.
//!
//! One file drives every command: run-level scalars sit at the top level,
//! policy, environment, and trainer fields live under dotted prefixes.
//! Parsing is strict so a resolved config written next to an output
//! directory reproduces the run exactly: unknown keys, duplicate keys,
//! and malformed values are all hard errors, and `format_config` emits a
//! file that parses back to the same struct bit for bit.

use thiserror::Error;

use crate::policy::{FusionMode, PolicyConfig, TrainOptions};
use crate::simenv::EnvConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected \"key = value\", got {got:?}")]
    Shape { line: usize, got: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: {key}: {msg}")]
    BadValue {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("override {0:?}: expected \"key=value\"")]
    BadOverride(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Successful expert episodes to record.
    pub demos: usize,
    /// Evaluation episodes per actor.
    pub eval_episodes: usize,
    /// Actions executed per predicted chunk before re-planning.
    pub exec_horizon: usize,
    /// Save an intermediate checkpoint every this many training steps
    /// (0 disables snapshots; the final checkpoint is always written).
    pub snapshot_every: usize,
    pub policy: PolicyConfig,
    pub env: EnvConfig,
    pub train: TrainOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            demos: 30,
            eval_episodes: 10,
            exec_horizon: 4,
            snapshot_every: 0,
            policy: PolicyConfig::default(),
            env: EnvConfig::default(),
            train: TrainOptions::default(),
        }
    }
}

fn parse_usize(v: &str) -> Result<usize, String> {
    v.trim().parse().map_err(|_| format!("bad integer {v:?}"))
}

fn parse_u64(v: &str) -> Result<u64, String> {
    v.trim().parse().map_err(|_| format!("bad integer {v:?}"))
}

fn parse_f64(v: &str) -> Result<f64, String> {
    let x: f64 = v.trim().parse().map_err(|_| format!("bad number {v:?}"))?;
    if !x.is_finite() {
        return Err(format!("{v:?} is not finite"));
    }
    Ok(x)
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("bad boolean {other:?}, want true or false")),
    }
}

fn parse_usize_list(v: &str) -> Result<Vec<usize>, String> {
    let t = v.trim();
    if t.is_empty() {
        return Ok(Vec::new());
    }
    t.split(',').map(parse_usize).collect()
}

fn parse_vec3(v: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = v
        .trim()
        .split(',')
        .map(parse_f64)
        .collect::<Result<_, _>>()?;
    if parts.len() != 3 {
        return Err(format!("want 3 comma-separated numbers, got {}", parts.len()));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn parse_mode(v: &str) -> Result<FusionMode, String> {
    v.trim().parse().map_err(|_| {
        format!("bad mode {v:?}, want full | no_ffpg | no_fgaf | ofp_ofg")
    })
}

fn fmt_list(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_vec3(v: &[f64; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

/// Assign one key. Shared by file parsing and flag overrides.
pub fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), String> {
    let p = &mut cfg.policy;
    let e = &mut cfg.env;
    let t = &mut cfg.train;
    match key {
        "seed" => cfg.seed = parse_u64(value)?,
        "demos" => cfg.demos = parse_usize(value)?,
        "eval_episodes" => cfg.eval_episodes = parse_usize(value)?,
        "exec_horizon" => cfg.exec_horizon = parse_usize(value)?,
        "snapshot_every" => cfg.snapshot_every = parse_usize(value)?,

        "policy.mode" => p.mode = parse_mode(value)?,
        "policy.history" => p.history = parse_usize(value)?,
        "policy.horizon" => p.horizon = parse_usize(value)?,
        "policy.joints" => p.joints = parse_usize(value)?,
        "policy.sensors" => p.sensors = parse_usize(value)?,
        "policy.embed_dim" => p.embed_dim = parse_usize(value)?,
        "policy.heads" => p.heads = parse_usize(value)?,
        "policy.force_loss_weight" => p.force_loss_weight = parse_f64(value)?,
        "policy.teacher_forced" => p.teacher_forced = parse_bool(value)?,
        "policy.teacher_noise" => p.teacher_noise = parse_f64(value)?,
        "policy.concat_query" => p.concat_query = parse_bool(value)?,
        "policy.pc_point_widths" => p.pc_point_widths = parse_usize_list(value)?,
        "policy.pc_feat" => p.pc_feat = parse_usize(value)?,
        "policy.tac_taxel_widths" => p.tac_taxel_widths = parse_usize_list(value)?,
        "policy.tac_feat" => p.tac_feat = parse_usize(value)?,
        "policy.force_hidden" => p.force_hidden = parse_usize_list(value)?,
        "policy.force_head_hidden" => p.force_head_hidden = parse_usize_list(value)?,
        "policy.action_head_hidden" => p.action_head_hidden = parse_usize_list(value)?,
        "policy.temb_dim" => p.temb_dim = parse_usize(value)?,
        "policy.t_train" => p.t_train = parse_usize(value)?,
        "policy.t_infer" => p.t_infer = parse_usize(value)?,
        "policy.beta_start" => p.beta_start = parse_f64(value)?,
        "policy.beta_end" => p.beta_end = parse_f64(value)?,
        "policy.n_max_points" => p.n_max_points = parse_usize(value)?,
        "policy.voxel" => p.voxel = parse_f64(value)?,
        "policy.workspace_min" => p.workspace.min = parse_vec3(value)?,
        "policy.workspace_max" => p.workspace.max = parse_vec3(value)?,

        "env.max_steps" => e.max_steps = parse_usize(value)?,
        "env.dt" => e.dt = parse_f64(value)?,
        "env.workspace_min" => e.workspace.min = parse_vec3(value)?,
        "env.workspace_max" => e.workspace.max = parse_vec3(value)?,
        "env.cloud_noise" => e.cloud_noise = parse_f64(value)?,
        "env.tactile_noise" => e.tactile_noise = parse_f64(value)?,
        "env.cloud_object_points" => e.cloud_object_points = parse_usize(value)?,
        "env.cloud_table_points" => e.cloud_table_points = parse_usize(value)?,
        "env.cloud_gripper_points" => e.cloud_gripper_points = parse_usize(value)?,
        "env.sensor_rows" => e.sensor_rows = parse_usize(value)?,
        "env.sensor_cols" => e.sensor_cols = parse_usize(value)?,
        "env.stiffness_min" => e.stiffness.0 = parse_f64(value)?,
        "env.stiffness_max" => e.stiffness.1 = parse_f64(value)?,
        "env.friction" => e.friction = parse_f64(value)?,
        "env.crush_force" => e.crush_force = parse_f64(value)?,
        "env.recover_force" => e.recover_force = parse_f64(value)?,
        "env.force_saturation" => e.force_saturation = parse_f64(value)?,
        "env.flip_rate" => e.flip_rate = parse_f64(value)?,
        "env.settle_rate" => e.settle_rate = parse_f64(value)?,
        "env.fall_rate" => e.fall_rate = parse_f64(value)?,
        "env.hold_fraction" => e.hold_fraction = parse_f64(value)?,
        "env.object_half" => e.object_half = parse_f64(value)?,
        "env.object_height" => e.object_height = parse_f64(value)?,
        "env.object_mass" => e.object_mass = parse_f64(value)?,
        "env.max_translation" => e.max_translation = parse_f64(value)?,
        "env.max_yaw_step" => e.max_yaw_step = parse_f64(value)?,
        "env.max_joint_step" => e.max_joint_step = parse_f64(value)?,
        "env.tip_z0" => e.tip_z0 = parse_f64(value)?,
        "env.q_max" => e.q_max = parse_f64(value)?,
        "env.pad_offset" => e.pad_offset = parse_f64(value)?,
        "env.spread_max" => e.spread_max = parse_f64(value)?,
        "env.footprint_sigma" => e.footprint_sigma = parse_f64(value)?,
        "env.spawn_min" => e.spawn.0 = parse_f64(value)?,
        "env.spawn_max" => e.spawn.1 = parse_f64(value)?,
        "env.gripper_spawn_min" => e.gripper_spawn.0 = parse_f64(value)?,
        "env.gripper_spawn_max" => e.gripper_spawn.1 = parse_f64(value)?,
        "env.theta_range" => e.theta_range = parse_f64(value)?,

        "train.steps" => t.steps = parse_usize(value)?,
        "train.batch" => t.batch = parse_usize(value)?,
        "train.lr" => t.lr = parse_f64(value)?,

        _ => return Err("unknown".into()),
    }
    Ok(())
}

/// Every key with its current value, in the canonical file order.
pub fn entries(cfg: &RunConfig) -> Vec<(&'static str, String)> {
    let p = &cfg.policy;
    let e = &cfg.env;
    let t = &cfg.train;
    vec![
        ("seed", cfg.seed.to_string()),
        ("demos", cfg.demos.to_string()),
        ("eval_episodes", cfg.eval_episodes.to_string()),
        ("exec_horizon", cfg.exec_horizon.to_string()),
        ("snapshot_every", cfg.snapshot_every.to_string()),
        ("policy.mode", p.mode.as_str().to_string()),
        ("policy.history", p.history.to_string()),
        ("policy.horizon", p.horizon.to_string()),
        ("policy.joints", p.joints.to_string()),
        ("policy.sensors", p.sensors.to_string()),
        ("policy.embed_dim", p.embed_dim.to_string()),
        ("policy.heads", p.heads.to_string()),
        ("policy.force_loss_weight", p.force_loss_weight.to_string()),
        ("policy.teacher_forced", p.teacher_forced.to_string()),
        ("policy.teacher_noise", p.teacher_noise.to_string()),
        ("policy.concat_query", p.concat_query.to_string()),
        ("policy.pc_point_widths", fmt_list(&p.pc_point_widths)),
        ("policy.pc_feat", p.pc_feat.to_string()),
        ("policy.tac_taxel_widths", fmt_list(&p.tac_taxel_widths)),
        ("policy.tac_feat", p.tac_feat.to_string()),
        ("policy.force_hidden", fmt_list(&p.force_hidden)),
        ("policy.force_head_hidden", fmt_list(&p.force_head_hidden)),
        ("policy.action_head_hidden", fmt_list(&p.action_head_hidden)),
        ("policy.temb_dim", p.temb_dim.to_string()),
        ("policy.t_train", p.t_train.to_string()),
        ("policy.t_infer", p.t_infer.to_string()),
        ("policy.beta_start", p.beta_start.to_string()),
        ("policy.beta_end", p.beta_end.to_string()),
        ("policy.n_max_points", p.n_max_points.to_string()),
        ("policy.voxel", p.voxel.to_string()),
        ("policy.workspace_min", fmt_vec3(&p.workspace.min)),
        ("policy.workspace_max", fmt_vec3(&p.workspace.max)),
        ("env.max_steps", e.max_steps.to_string()),
        ("env.dt", e.dt.to_string()),
        ("env.workspace_min", fmt_vec3(&e.workspace.min)),
        ("env.workspace_max", fmt_vec3(&e.workspace.max)),
        ("env.cloud_noise", e.cloud_noise.to_string()),
        ("env.tactile_noise", e.tactile_noise.to_string()),
        ("env.cloud_object_points", e.cloud_object_points.to_string()),
        ("env.cloud_table_points", e.cloud_table_points.to_string()),
        (
            "env.cloud_gripper_points",
            e.cloud_gripper_points.to_string(),
        ),
        ("env.sensor_rows", e.sensor_rows.to_string()),
        ("env.sensor_cols", e.sensor_cols.to_string()),
        ("env.stiffness_min", e.stiffness.0.to_string()),
        ("env.stiffness_max", e.stiffness.1.to_string()),
        ("env.friction", e.friction.to_string()),
        ("env.crush_force", e.crush_force.to_string()),
        ("env.recover_force", e.recover_force.to_string()),
        ("env.force_saturation", e.force_saturation.to_string()),
        ("env.flip_rate", e.flip_rate.to_string()),
        ("env.settle_rate", e.settle_rate.to_string()),
        ("env.fall_rate", e.fall_rate.to_string()),
        ("env.hold_fraction", e.hold_fraction.to_string()),
        ("env.object_half", e.object_half.to_string()),
        ("env.object_height", e.object_height.to_string()),
        ("env.object_mass", e.object_mass.to_string()),
        ("env.max_translation", e.max_translation.to_string()),
        ("env.max_yaw_step", e.max_yaw_step.to_string()),
        ("env.max_joint_step", e.max_joint_step.to_string()),
        ("env.tip_z0", e.tip_z0.to_string()),
        ("env.q_max", e.q_max.to_string()),
        ("env.pad_offset", e.pad_offset.to_string()),
        ("env.spread_max", e.spread_max.to_string()),
        ("env.footprint_sigma", e.footprint_sigma.to_string()),
        ("env.spawn_min", e.spawn.0.to_string()),
        ("env.spawn_max", e.spawn.1.to_string()),
        ("env.gripper_spawn_min", e.gripper_spawn.0.to_string()),
        ("env.gripper_spawn_max", e.gripper_spawn.1.to_string()),
        ("env.theta_range", e.theta_range.to_string()),
        ("train.steps", t.steps.to_string()),
        ("train.batch", t.batch.to_string()),
        ("train.lr", t.lr.to_string()),
    ]
}

pub fn format_config(cfg: &RunConfig) -> String {
    let mut out = String::new();
    for (k, v) in entries(cfg) {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    }
    out
}

/// Parse a config file body on top of the defaults. `#` starts a comment;
/// blank lines are skipped; keys may appear at most once.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(ConfigError::Shape {
                line,
                got: body.to_string(),
            });
        };
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
        set_key(&mut cfg, key, value).map_err(|msg| {
            if msg == "unknown" {
                ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                }
            } else {
                ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    msg,
                }
            }
        })?;
    }
    Ok(cfg)
}

/// Apply `key=value` override strings, e.g. from command-line flags.
/// Overrides may touch keys the file already set; later wins.
pub fn apply_overrides(cfg: &mut RunConfig, pairs: &[String]) -> Result<(), ConfigError> {
    for pair in pairs {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(ConfigError::BadOverride(pair.clone()));
        };
        let key = key.trim();
        set_key(cfg, key, value).map_err(|msg| {
            if msg == "unknown" {
                ConfigError::UnknownKey { line: 0, key: key.to_string() }
            } else {
                ConfigError::BadValue {
                    line: 0,
                    key: key.to_string(),
                    msg,
                }
            }
        })?;
    }
    Ok(())
}

pub fn read_config(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
    parse_config(&std::fs::read_to_string(path)?)
}

pub fn write_config(path: &std::path::Path, cfg: &RunConfig) -> Result<(), ConfigError> {
    std::fs::write(path, format_config(cfg))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A config where every field differs from its default, so a missing
    /// or misspelt key in either direction breaks the roundtrip.
    fn scrambled() -> RunConfig {
        let mut cfg = RunConfig::default();
        for (key, _) in entries(&RunConfig::default()) {
            let bump = |v: String| -> String {
                match key {
                    "policy.mode" => "ofp_ofg".into(),
                    "policy.teacher_forced" | "policy.concat_query" => {
                        if v == "true" { "false".into() } else { "true".into() }
                    }
                    k if k.ends_with("workspace_min") || k.ends_with("workspace_max") => {
                        let v3 = parse_vec3(&v).unwrap();
                        fmt_vec3(&[v3[0] + 0.25, v3[1] + 0.5, v3[2] + 0.75])
                    }
                    k if k.ends_with("widths") || k.ends_with("hidden") => "3,5,7".into(),
                    _ => {
                        let x: f64 = v.parse().unwrap();
                        format!("{}", x + 3.0)
                    }
                }
            };
            let current = entries(&cfg)
                .into_iter()
                .find(|(k, _)| *k == key)
                .unwrap()
                .1;
            set_key(&mut cfg, key, &bump(current)).unwrap();
        }
        cfg
    }

    #[test]
    fn every_key_roundtrips_through_format_and_parse() {
        let cfg = scrambled();
        assert_ne!(cfg, RunConfig::default());
        let text = format_config(&cfg);
        let back = parse_config(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(format_config(&back), text);
    }

    #[test]
    fn defaults_survive_an_empty_file_and_comments() {
        let cfg = parse_config("\n# just a comment\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let cfg = parse_config("seed = 99 # trailing comment\n").unwrap();
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn strict_errors_carry_line_numbers() {
        match parse_config("seed = 1\nbogus_key = 2\n") {
            Err(ConfigError::UnknownKey { line: 2, key }) => assert_eq!(key, "bogus_key"),
            other => panic!("wanted unknown-key error, got {other:?}"),
        }
        match parse_config("seed = 1\nseed = 2\n") {
            Err(ConfigError::DuplicateKey { line: 2, .. }) => {}
            other => panic!("wanted duplicate-key error, got {other:?}"),
        }
        match parse_config("train.lr = fast\n") {
            Err(ConfigError::BadValue { line: 1, key, .. }) => assert_eq!(key, "train.lr"),
            other => panic!("wanted bad-value error, got {other:?}"),
        }
        match parse_config("no equals sign here\n") {
            Err(ConfigError::Shape { line: 1, .. }) => {}
            other => panic!("wanted shape error, got {other:?}"),
        }
        match parse_config("env.dt = inf\n") {
            Err(ConfigError::BadValue { .. }) => {}
            other => panic!("wanted finite-value error, got {other:?}"),
        }
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut cfg = parse_config("seed = 5\ntrain.steps = 100\n").unwrap();
        apply_overrides(
            &mut cfg,
            &["seed=9".to_string(), "policy.heads=4".to_string()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.steps, 100);
        assert_eq!(cfg.policy.heads, 4);
        assert!(apply_overrides(&mut cfg, &["nope".to_string()]).is_err());
    }

    #[test]
    fn empty_list_values_parse_to_empty_lists() {
        let cfg = parse_config("policy.force_hidden =\n").unwrap();
        assert!(cfg.policy.force_hidden.is_empty());
        let text = format_config(&cfg);
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}
