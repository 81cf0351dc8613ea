use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use once_cell::sync::Lazy;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_graphloc"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn graphloc");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout:\n{}\nstderr:\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn graphloc");
    assert!(
        !out.status.success(),
        "command {:?} unexpectedly succeeded\nstdout:\n{}",
        args,
        String::from_utf8_lossy(&out.stdout)
    );
    out
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Fixture {
    _dir: TempDir,
    scene: PathBuf,
    ckpt: PathBuf,
}

/// A small generated scene plus an untrained checkpoint, shared across the
/// behavioral tests that only exercise plumbing.
static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let dir = TempDir::new().expect("tempdir");
    let scene = dir.path().join("scene");
    run_ok(&[
        "generate",
        "--out",
        scene.to_str().unwrap(),
        "--train-count",
        "80",
        "--test-count",
        "6",
    ]);
    let ckpt = dir.path().join("model.glcp");
    run_ok(&[
        "train",
        "--data",
        scene.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "0",
    ]);
    Fixture {
        _dir: dir,
        scene,
        ckpt,
    }
});

fn scene_file(name: &str) -> String {
    FIXTURE.scene.join(name).to_str().unwrap().to_owned()
}

fn read_bytes(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

#[test]
fn generate_writes_datasets_and_manifest_and_echoes_config() {
    let out = stdout_of(&run_ok(&[
        "generate",
        "--out",
        FIXTURE.scene.to_str().unwrap(),
        "--train-count",
        "80",
        "--test-count",
        "6",
    ]));
    for key in [
        "command=generate",
        "train_count=80",
        "test_count=6",
        "volume_min=-1,-1,-1",
        "volume_max=1,1,1",
        "trajectory=random-walk",
        "embedding_dim=32",
        "feature_dim=32",
        "noise_sigma=0.05",
        "seed=0",
    ] {
        assert!(out.contains(key), "missing {key:?} in:\n{out}");
    }
    for name in ["train.glds", "test.glds", "scene.txt"] {
        assert!(FIXTURE.scene.join(name).is_file(), "missing {name}");
    }
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        run_ok(&[
            "generate",
            "--out",
            out.to_str().unwrap(),
            "--train-count",
            "60",
            "--test-count",
            "4",
            "--seed",
            seed,
        ]);
    }
    assert_eq!(
        read_bytes(&a.join("train.glds")),
        read_bytes(&b.join("train.glds"))
    );
    assert_eq!(
        read_bytes(&a.join("test.glds")),
        read_bytes(&b.join("test.glds"))
    );
    assert_ne!(
        read_bytes(&a.join("train.glds")),
        read_bytes(&c.join("train.glds"))
    );
}

#[test]
fn generate_rejects_empty_training_set() {
    let dir = TempDir::new().unwrap();
    let out = run_err(&[
        "generate",
        "--out",
        dir.path().join("x").to_str().unwrap(),
        "--train-count",
        "0",
    ]);
    assert!(stderr_of(&out).contains("positive train"));
}

#[test]
fn train_zero_epochs_writes_initial_checkpoint_and_log() {
    assert!(FIXTURE.ckpt.is_file());
    let log = PathBuf::from(format!("{}.log", FIXTURE.ckpt.display()));
    assert!(log.is_file(), "missing default metrics log");
}

#[test]
fn train_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.glcp");
    let b = dir.path().join("b.glcp");
    let c = dir.path().join("c.glcp");
    for (out, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        run_ok(&[
            "train",
            "--data",
            FIXTURE.scene.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "2",
            "--seed",
            seed,
        ]);
    }
    assert_eq!(read_bytes(&a), read_bytes(&b));
    assert_ne!(read_bytes(&a), read_bytes(&c));
}

#[test]
fn train_echoes_resolved_config() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("m.glcp");
    let out = stdout_of(&run_ok(&[
        "train",
        "--data",
        FIXTURE.scene.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "0",
    ]));
    for key in [
        "command=train",
        "epochs=0",
        "batch_size=8",
        "lr0=0.00005",
        "weight_decay=0.0005",
        "edge_dropout=0.5",
        "n_nodes=8",
        "stride=5",
        "rounds=2",
        "width=32",
        "kind=message-passing",
        "strategy=retrieval",
    ] {
        assert!(out.contains(key), "missing {key:?} in:\n{out}");
    }
}

#[test]
fn eval_writes_report_identical_to_stdout_and_reruns_identically() {
    let dir = TempDir::new().unwrap();
    let r1 = dir.path().join("r1.txt");
    let r2 = dir.path().join("r2.txt");
    let mut outputs = Vec::new();
    for report in [&r1, &r2] {
        let out = stdout_of(&run_ok(&[
            "eval",
            "--ckpt",
            FIXTURE.ckpt.to_str().unwrap(),
            "--db",
            &scene_file("train.glds"),
            "--queries",
            &scene_file("test.glds"),
            "--out",
            report.to_str().unwrap(),
        ]));
        outputs.push(out);
    }
    let report = fs::read_to_string(&r1).unwrap();
    assert!(outputs[0].ends_with(&report), "stdout does not end with the report");
    assert_eq!(read_bytes(&r1), read_bytes(&r2));
    assert!(report.contains("queries=6"));
    assert!(report.contains("geometric_averaging=false"));
    assert!(report.contains("median_translation_m="));
    assert!(report.contains("median_rotation_deg="));
}

#[test]
fn eval_geometric_averaging_flag_is_reflected_in_the_report() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("r.txt");
    let out = stdout_of(&run_ok(&[
        "eval",
        "--ckpt",
        FIXTURE.ckpt.to_str().unwrap(),
        "--db",
        &scene_file("train.glds"),
        "--queries",
        &scene_file("test.glds"),
        "--out",
        report.to_str().unwrap(),
        "--geom-avg",
    ]));
    assert!(out.contains("geometric_averaging=true"));
    let rows = out.lines().filter(|l| l.starts_with("test_")).count();
    assert_eq!(rows, 6);
}

#[test]
fn eval_refuses_round_count_overrides_without_opt_in() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("r.txt");
    let out = run_err(&[
        "eval",
        "--ckpt",
        FIXTURE.ckpt.to_str().unwrap(),
        "--db",
        &scene_file("train.glds"),
        "--queries",
        &scene_file("test.glds"),
        "--out",
        report.to_str().unwrap(),
        "--rounds",
        "1",
    ]);
    let err = stderr_of(&out);
    assert!(
        err.contains("--allow-rounds-mismatch"),
        "refusal should name the opt-in flag, got:\n{err}"
    );
    assert!(!report.exists(), "refused run must not write a report");

    run_ok(&[
        "eval",
        "--ckpt",
        FIXTURE.ckpt.to_str().unwrap(),
        "--db",
        &scene_file("train.glds"),
        "--queries",
        &scene_file("test.glds"),
        "--out",
        report.to_str().unwrap(),
        "--rounds",
        "1",
        "--allow-rounds-mismatch",
    ]);
    assert!(report.is_file());
}

#[test]
fn matching_round_count_override_is_not_a_mismatch() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("r.txt");
    run_ok(&[
        "eval",
        "--ckpt",
        FIXTURE.ckpt.to_str().unwrap(),
        "--db",
        &scene_file("train.glds"),
        "--queries",
        &scene_file("test.glds"),
        "--out",
        report.to_str().unwrap(),
        "--rounds",
        "2",
    ]);
}

#[test]
fn localize_prints_estimate_for_a_named_query() {
    let out = stdout_of(&run_ok(&[
        "localize",
        "--ckpt",
        FIXTURE.ckpt.to_str().unwrap(),
        "--db",
        &scene_file("train.glds"),
        "--queries",
        &scene_file("test.glds"),
        "--id",
        "test_0000",
    ]));
    assert!(out.contains("query=test_0000"));
    let t_line = out.lines().find(|l| l.starts_with("t=")).expect("t= line");
    assert_eq!(t_line.split_whitespace().count(), 3);
    let q_line = out.lines().find(|l| l.starts_with("q=")).expect("q= line");
    assert_eq!(q_line.split_whitespace().count(), 4);
    assert!(out.lines().any(|l| l.starts_with("neighbor 0 ")));
}

#[test]
fn localize_requires_id_when_the_file_has_many_records() {
    let out = run_err(&[
        "localize",
        "--ckpt",
        FIXTURE.ckpt.to_str().unwrap(),
        "--db",
        &scene_file("train.glds"),
        "--queries",
        &scene_file("test.glds"),
    ]);
    assert!(stderr_of(&out).contains("--id"));
}

#[test]
fn unknown_flags_are_rejected_with_usage_exit_code() {
    let out = run_err(&["generate", "--out", "/tmp/x", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_fails_with_nonzero_exit() {
    let out = run_err(&[
        "train",
        "--data",
        "/nonexistent/path.glds",
        "--out",
        "/tmp/never.glcp",
    ]);
    assert!(stderr_of(&out).contains("/nonexistent/path.glds"));
}

#[test]
fn gradcheck_passes_and_reports_per_block_errors() {
    let out = stdout_of(&run_ok(&["gradcheck"]));
    assert!(out.contains("command=gradcheck"));
    assert!(out.contains("block=proj_w"));
    assert!(out.contains("block=loss_gamma"));
    assert!(out.contains("max_rel_err="));
    assert!(out.contains("gradient check passed"));
}

#[test]
fn gradcheck_single_round_also_passes() {
    run_ok(&["gradcheck", "--rounds", "1"]);
}

#[test]
fn ablate_reports_exactly_the_requested_modes() {
    let dir = TempDir::new().unwrap();
    let table = dir.path().join("table.txt");
    let out = stdout_of(&run_ok(&[
        "ablate",
        "--data",
        FIXTURE.scene.to_str().unwrap(),
        "--modes",
        "baseline1",
        "--seeds",
        "1",
        "--epochs",
        "1",
        "--out",
        table.to_str().unwrap(),
    ]));
    let text = fs::read_to_string(&table).unwrap();
    assert!(out.ends_with(&text));
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with("mode "))
        .collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("baseline1 0 "));
    assert!(!text.contains("full"));
}
