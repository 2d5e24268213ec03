//! End-to-end checks of the compiled binary: the full artifact pipeline on
//! a miniature configuration, flag precedence, and the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

use adaptac_core::config::{format_config, parse_config, RunConfig};

fn adaptac(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaptac"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Miniature run: one demo, tiny nets, a handful of steps.
fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 17;
    cfg.demos = 1;
    cfg.eval_episodes = 2;
    cfg.train.steps = 3;
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
fn pipeline_runs_end_to_end_from_one_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.cfg"), format_config(&tiny_config())).unwrap();

    let out = adaptac(
        &["gen-demos", "--config", "run.cfg", "--out", "demos"],
        root,
    );
    assert_eq!(code(&out), 0, "gen-demos: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("expert success rate"));
    assert!(root.join("demos/demos.adpd").exists());
    assert!(root.join("demos/manifest.json").exists());

    let out = adaptac(
        &[
            "train",
            "--config",
            "run.cfg",
            "--dataset",
            "demos/demos.adpd",
            "--out",
            "train",
        ],
        root,
    );
    assert_eq!(code(&out), 0, "train: {}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("train/policy.adpt").exists());
    let log = std::fs::read_to_string(root.join("train/train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss,loss_pi,loss_ffp,mean_alpha_tac\n"));
    assert_eq!(log.lines().count(), 1 + 3);

    // Episodes kept short via an override so the eval cannot dawdle.
    let out = adaptac(
        &[
            "eval",
            "--config",
            "run.cfg",
            "--set",
            "env.max_steps=30",
            "--checkpoint",
            "train/policy.adpt",
            "--out",
            "eval",
        ],
        root,
    );
    assert_eq!(code(&out), 0, "eval: {}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("eval/report.json").exists());
    assert!(root.join("eval/traces/trace_full_0000.csv").exists());

    // The resolved config next to the outputs reflects the override.
    let resolved =
        parse_config(&std::fs::read_to_string(root.join("eval/config.txt")).unwrap()).unwrap();
    assert_eq!(resolved.env.max_steps, 30);

    let out = adaptac(
        &[
            "attn-trace",
            "--config",
            "run.cfg",
            "--traces",
            "eval/traces",
            "--out",
            "attn",
        ],
        root,
    );
    assert_eq!(code(&out), 0, "attn-trace: {}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("attn/phase_alpha.csv").exists());
    assert!(stdout(&out).contains("trace files"));
}

#[test]
fn seed_flag_beats_config_file_and_set_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = tiny_config();
    cfg.demos = 1;
    std::fs::write(root.join("run.cfg"), format_config(&cfg)).unwrap();

    let out = adaptac(
        &[
            "gen-demos",
            "--config",
            "run.cfg",
            "--set",
            "seed=100",
            "--seed",
            "23",
            "--out",
            "d",
        ],
        root,
    );
    assert_eq!(code(&out), 0);
    let resolved =
        parse_config(&std::fs::read_to_string(root.join("d/config.txt")).unwrap()).unwrap();
    assert_eq!(resolved.seed, 23);
}

#[test]
fn exit_codes_follow_the_documented_contract() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.cfg"), format_config(&tiny_config())).unwrap();

    // 1: usage errors, from clap and from a bad config file.
    assert_eq!(code(&adaptac(&["no-such-command"], root)), 1);
    assert_eq!(code(&adaptac(&["train"], root)), 1, "missing --dataset");
    std::fs::write(root.join("bad.cfg"), "nonsense_key = 1\n").unwrap();
    assert_eq!(
        code(&adaptac(
            &["gen-demos", "--config", "bad.cfg", "--out", "x"],
            root
        )),
        1
    );

    // 0: help and version are not errors.
    assert_eq!(code(&adaptac(&["--help"], root)), 0);
    assert_eq!(code(&adaptac(&["--version"], root)), 0);

    // 2: unwritable output path (blocked by a regular file).
    std::fs::write(root.join("wall"), b"x").unwrap();
    assert_eq!(
        code(&adaptac(
            &["gen-demos", "--config", "run.cfg", "--out", "wall/sub"],
            root
        )),
        2
    );

    // 3: dataset that does not decode.
    std::fs::write(root.join("junk.adpd"), b"junk").unwrap();
    assert_eq!(
        code(&adaptac(
            &[
                "train",
                "--config",
                "run.cfg",
                "--dataset",
                "junk.adpd",
                "--out",
                "t"
            ],
            root
        )),
        3
    );

    // 4: missing checkpoint.
    assert_eq!(
        code(&adaptac(
            &[
                "eval",
                "--config",
                "run.cfg",
                "--checkpoint",
                "ghost.adpt",
                "--out",
                "e"
            ],
            root
        )),
        4
    );

    // 5: no traces to summarize.
    std::fs::create_dir(root.join("empty")).unwrap();
    assert_eq!(
        code(&adaptac(
            &[
                "attn-trace",
                "--config",
                "run.cfg",
                "--traces",
                "empty",
                "--out",
                "a"
            ],
            root
        )),
        5
    );
}
