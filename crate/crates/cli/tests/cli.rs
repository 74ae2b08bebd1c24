//! End-to-end runs of the binary: simulate -> train -> eval -> bench,
//! plus the error-path exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn beamflow() -> Command {
    Command::new(env!("CARGO_BIN_EXE_beamflow"))
}

fn run(args: &[&str]) -> Output {
    beamflow().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// A config small enough to train in a couple of seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    let toml = r#"
seed = 11

[simulator]
antennas = 16
codebook_size = 8
sequences = 6

[[simulator.trajectories]]
start = [-30.0, 15.0]
end = [30.0, 15.0]
speed = 6.0
fps = 7.0
frames = 40

[simulator.trajectories.motion]
kind = "constant-velocity"

[model]
m = 8
g_box_hidden = [8, 12]
u_hidden = [16]

[model.cond]
encoder = "transformer"
layers = 1
heads = 2

[data.window]
t_hist = 4
t_pred = 3

[training]
batch_size = 16
epochs = 4

[baseline]
hidden = 12
"#;
    std::fs::write(&path, toml).unwrap();
    path
}

#[test]
fn simulate_is_seed_deterministic_and_prints_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let d1 = dir.path().join("a.ds");
    let d2 = dir.path().join("b.ds");
    let out = run(&["simulate", "--config", cfg, "--out", d1.to_str().unwrap()]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("6 sequences"), "{stdout}");
    assert!(stdout.contains("m=8"), "{stdout}");

    assert_ok(&run(&["simulate", "--config", cfg, "--out", d2.to_str().unwrap()]));
    assert_eq!(std::fs::read(&d1).unwrap(), std::fs::read(&d2).unwrap());

    // a different seed changes the file
    let d3 = dir.path().join("c.ds");
    assert_ok(&run(&[
        "simulate",
        "--config",
        cfg,
        "--seed",
        "999",
        "--out",
        d3.to_str().unwrap(),
    ]));
    assert_ne!(std::fs::read(&d1).unwrap(), std::fs::read(&d3).unwrap());
}

#[test]
fn unknown_config_key_fails_fast_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "not_a_real_key = 5\n").unwrap();
    let out = run(&[
        "simulate",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("x.ds").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("not_a_real_key"), "{stderr}");
}

#[test]
fn unknown_flag_fails_fast() {
    let out = run(&["simulate", "--does-not-exist", "x"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn full_pipeline_train_eval_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let data = dir.path().join("data.ds");
    assert_ok(&run(&["simulate", "--config", cfg, "--out", data.to_str().unwrap()]));
    let data = data.to_str().unwrap();

    // train both an fm model and an lstm baseline
    let fm_dir = dir.path().join("fm");
    let out = run(&[
        "train", "--config", cfg, "--data", data, "--model", "fm", "--out",
        fm_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(fm_dir.join("checkpoint.bfc").exists());
    assert!(fm_dir.join("split.json").exists());
    let losses = std::fs::read_to_string(fm_dir.join("losses.csv")).unwrap();
    assert!(losses.starts_with("epoch,L_FM,L_Term,L_CE,L_total\n"));
    assert_eq!(losses.lines().count(), 5); // header + 4 epochs

    let lstm_dir = dir.path().join("lstm");
    assert_ok(&run(&[
        "train", "--config", cfg, "--data", data, "--model", "lstm", "--out",
        lstm_dir.to_str().unwrap(),
    ]));

    // evaluate the fm checkpoint on the frozen split
    let eval_dir = dir.path().join("eval");
    let out = run(&[
        "eval",
        "--config",
        cfg,
        "--checkpoint",
        fm_dir.join("checkpoint.bfc").to_str().unwrap(),
        "--data",
        data,
        "--split",
        fm_dir.join("split.json").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--k",
        "1,3",
    ]);
    assert_ok(&out);
    let metrics = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("model,config,step,K,acc\n"));
    // 2 K values x 3 prediction steps
    assert_eq!(metrics.lines().count(), 1 + 6);
    let summary = std::fs::read_to_string(eval_dir.join("summary.json")).unwrap();
    assert!(summary.contains("param_count"), "{summary}");

    // bench enforces the sample floor
    let out = run(&[
        "bench",
        "--config",
        cfg,
        "--checkpoint",
        fm_dir.join("checkpoint.bfc").to_str().unwrap(),
        "--samples",
        "10",
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("1000"));

    let bench_json = dir.path().join("bench.json");
    let out = run(&[
        "bench",
        "--config",
        cfg,
        "--checkpoint",
        fm_dir.join("checkpoint.bfc").to_str().unwrap(),
        "--checkpoint",
        lstm_dir.join("checkpoint.bfc").to_str().unwrap(),
        "--out",
        bench_json.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("single-threaded"), "{stdout}");
    assert!(stdout.contains("params"), "{stdout}");
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&bench_json).unwrap()).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 2);
}

#[test]
fn train_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let data = dir.path().join("data.ds");
    assert_ok(&run(&["simulate", "--config", cfg, "--out", data.to_str().unwrap()]));
    let data = data.to_str().unwrap();

    let a = dir.path().join("runa");
    let b = dir.path().join("runb");
    for out in [&a, &b] {
        assert_ok(&run(&[
            "train", "--config", cfg, "--data", data, "--model", "rnn", "--out",
            out.to_str().unwrap(),
        ]));
    }
    assert_eq!(
        std::fs::read(a.join("losses.csv")).unwrap(),
        std::fs::read(b.join("losses.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("checkpoint.bfc")).unwrap(),
        std::fs::read(b.join("checkpoint.bfc")).unwrap()
    );
}

#[test]
fn eval_refuses_codebook_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let data = dir.path().join("data.ds");
    assert_ok(&run(&["simulate", "--config", cfg, "--out", data.to_str().unwrap()]));
    let fm_dir = dir.path().join("fm");
    assert_ok(&run(&[
        "train", "--config", cfg, "--data", data.to_str().unwrap(), "--model", "fm", "--out",
        fm_dir.to_str().unwrap(),
    ]));

    // same sequences, different codebook size in the header
    let raw = std::fs::read_to_string(&data).unwrap();
    let doctored: String = raw.replacen("m=8", "m=16", 1);
    let bad = dir.path().join("bad.ds");
    std::fs::write(&bad, doctored).unwrap();

    let out = run(&[
        "eval",
        "--config",
        cfg,
        "--checkpoint",
        fm_dir.join("checkpoint.bfc").to_str().unwrap(),
        "--data",
        bad.to_str().unwrap(),
        "--split",
        fm_dir.join("split.json").to_str().unwrap(),
        "--out",
        dir.path().join("eval").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mismatch"), "{stderr}");
    assert!(stderr.contains('8') && stderr.contains("16"), "{stderr}");
}

#[test]
fn resume_continues_the_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let data = dir.path().join("data.ds");
    assert_ok(&run(&["simulate", "--config", cfg, "--out", data.to_str().unwrap()]));
    let data = data.to_str().unwrap();

    // full run in one go
    let full = dir.path().join("full");
    assert_ok(&run(&[
        "train", "--config", cfg, "--data", data, "--model", "fm", "--out",
        full.to_str().unwrap(),
    ]));

    // two-epoch run, then resume for the remaining two
    let short_cfg = dir.path().join("short.toml");
    let raw = std::fs::read_to_string(&cfg_path).unwrap();
    std::fs::write(&short_cfg, raw.replace("epochs = 4", "epochs = 2")).unwrap();
    let head = dir.path().join("head");
    assert_ok(&run(&[
        "train", "--config", short_cfg.to_str().unwrap(), "--data", data, "--model", "fm",
        "--out", head.to_str().unwrap(),
    ]));
    let tail = dir.path().join("tail");
    assert_ok(&run(&[
        "train", "--config", cfg, "--data", data, "--model", "fm", "--out",
        tail.to_str().unwrap(), "--resume",
        head.join("checkpoint.bfc").to_str().unwrap(),
    ]));

    let full_losses = std::fs::read_to_string(full.join("losses.csv")).unwrap();
    let tail_losses = std::fs::read_to_string(tail.join("losses.csv")).unwrap();
    // the resumed run records epochs 2 and 3; they must match the full run's rows
    let full_rows: Vec<&str> = full_losses.lines().skip(1).collect();
    let tail_rows: Vec<&str> = tail_losses.lines().skip(1).collect();
    assert_eq!(tail_rows.len(), 2);
    assert_eq!(full_rows[2..], tail_rows[..]);

    // final checkpoints agree bit-for-bit
    assert_eq!(
        std::fs::read(full.join("checkpoint.bfc")).unwrap(),
        std::fs::read(tail.join("checkpoint.bfc")).unwrap()
    );
}

#[test]
fn out_dir_env_var_redirects_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let out = beamflow()
        .args(["simulate", "--config", cfg_path.to_str().unwrap(), "--out", "env.ds"])
        .env("BEAMFLOW_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_ok(&out);
    assert!(dir.path().join("env.ds").exists());
}
