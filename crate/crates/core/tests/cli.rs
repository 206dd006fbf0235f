//! End-to-end tests of the `fedmask` binary: artifacts, exit codes, the
//! verification battery, and a real TCP run compared against the in-process
//! path.

use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

use fedmask::report::{load_manifest, strip_wall_ms};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fedmask")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("spawn fedmask binary")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn base_config() -> serde_json::Value {
    serde_json::json!({
        "mode": "masked",
        "dataset": {
            "source": "synth_classification",
            "n_samples": 80,
            "n_features": 6,
            "n_classes": 3,
            "separation": 3.0,
            "cluster_std": 0.7
        },
        "dims": [6, 12, 3],
        "clients": 2,
        "rounds": 5,
        "learning_rate": 0.05,
        "batch": { "policy": "fixed", "size": 10 },
        "seed": 77,
        "normalization": "z_score"
    })
}

fn write_config(path: &Path, cfg: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}

#[test]
fn train_writes_artifacts_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["metrics_csv"] = serde_json::json!(dir.path().join("metrics.csv"));
    cfg["manifest"] = serde_json::json!(dir.path().join("manifest.json"));
    let cfg_path = dir.path().join("run.json");
    write_config(&cfg_path, &cfg);

    let first = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(first.status.code(), Some(0), "stderr: {}", stderr_of(&first));
    assert!(stdout_of(&first).contains("final weights sha256"));

    let metrics_a = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics_a.starts_with("round,mode,train_loss,"));
    assert_eq!(metrics_a.lines().count(), 6, "header plus five rounds");
    let manifest_a = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest_a.rounds_completed, 5);

    let second = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(second.status.code(), Some(0));
    let metrics_b = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let manifest_b = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(strip_wall_ms(&metrics_a), strip_wall_ms(&metrics_b));
    assert_eq!(manifest_a.param_hash_exact, manifest_b.param_hash_exact);
}

#[test]
fn train_cross_check_against_plain_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    write_config(&cfg_path, &base_config());
    let out = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--check-against-plain",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("matches the plain run"));
}

#[test]
fn train_override_flags_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["manifest"] = serde_json::json!(dir.path().join("manifest.json"));
    let cfg_path = dir.path().join("run.json");
    write_config(&cfg_path, &cfg);
    let out = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--rounds",
        "3",
        "--mode",
        "plain",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("plain run: 3 rounds"));
    let manifest = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.rounds_completed, 3);
}

#[test]
fn verify_battery_passes_and_prints_one_line_per_check() {
    let out = run(&["verify", "--trials", "2000", "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert_eq!(text.matches("[PASS]").count(), 10);
    assert_eq!(text.matches("[FAIL]").count(), 0);
    assert!(text.contains("verification: 10/10 checks passed"));
}

#[test]
fn verify_battery_fails_under_injected_corruption() {
    let out = run(&[
        "verify",
        "--trials",
        "2000",
        "--seed",
        "5",
        "--inject-swapped-corrections",
    ]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("[FAIL] gradient-recovery-identity"));
    assert!(text.contains("[FAIL] training-equivalence"));
}

#[test]
fn missing_config_file_exits_2() {
    let out = run(&["train", "--config", "/nonexistent/run.json"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
}

#[test]
fn rejected_config_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["surprise"] = serde_json::json!(true);
    let cfg_path = dir.path().join("run.json");
    write_config(&cfg_path, &cfg);
    let out = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5), "stderr: {}", stderr_of(&out));
}

#[test]
fn help_and_bad_flags_use_the_usage_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(5));
    assert_eq!(run(&[]).status.code(), Some(5));
}

#[test]
fn tcp_run_matches_the_in_process_run() {
    let dir = tempfile::tempdir().unwrap();
    // Reserve a port, then free it for the server process.
    let port = {
        let probe = TcpListener::bind("127.0.0.1:0").unwrap();
        probe.local_addr().unwrap().port()
    };
    let addr = format!("127.0.0.1:{port}");

    let mut tcp_cfg = base_config();
    tcp_cfg["transport"] = serde_json::json!({
        "kind": "tcp",
        "addr": addr,
        "handshake_timeout_ms": 30_000
    });
    tcp_cfg["manifest"] = serde_json::json!(dir.path().join("tcp_manifest.json"));
    tcp_cfg["metrics_csv"] = serde_json::json!(dir.path().join("tcp_metrics.csv"));
    let tcp_path = dir.path().join("tcp.json");
    write_config(&tcp_path, &tcp_cfg);

    let mut inproc_cfg = base_config();
    inproc_cfg["manifest"] = serde_json::json!(dir.path().join("inproc_manifest.json"));
    inproc_cfg["metrics_csv"] = serde_json::json!(dir.path().join("inproc_metrics.csv"));
    let inproc_path = dir.path().join("inproc.json");
    write_config(&inproc_path, &inproc_cfg);

    let mut server = Command::new(bin())
        .args(["serve", "--config", tcp_path.to_str().unwrap()])
        .stdout(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let joins: Vec<_> = (0..2)
        .map(|id| {
            Command::new(bin())
                .args([
                    "join",
                    "--config",
                    tcp_path.to_str().unwrap(),
                    "--client-id",
                    &id.to_string(),
                ])
                .stdout(std::process::Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    let server_status = server.wait().unwrap();
    assert_eq!(server_status.code(), Some(0));
    for mut join in joins {
        assert_eq!(join.wait().unwrap().code(), Some(0));
    }

    let train = run(&["train", "--config", inproc_path.to_str().unwrap()]);
    assert_eq!(train.status.code(), Some(0), "stderr: {}", stderr_of(&train));

    let tcp_manifest = load_manifest(&dir.path().join("tcp_manifest.json")).unwrap();
    let inproc_manifest = load_manifest(&dir.path().join("inproc_manifest.json")).unwrap();
    assert_eq!(tcp_manifest.param_hash_exact, inproc_manifest.param_hash_exact);
    assert_eq!(tcp_manifest.final_train_loss, inproc_manifest.final_train_loss);
    let tcp_metrics = std::fs::read_to_string(dir.path().join("tcp_metrics.csv")).unwrap();
    let inproc_metrics =
        std::fs::read_to_string(dir.path().join("inproc_metrics.csv")).unwrap();
    assert_eq!(strip_wall_ms(&tcp_metrics), strip_wall_ms(&inproc_metrics));
}

#[test]
fn join_without_a_server_times_out_with_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let port = {
        let probe = TcpListener::bind("127.0.0.1:0").unwrap();
        probe.local_addr().unwrap().port()
    };
    let mut cfg = base_config();
    cfg["transport"] = serde_json::json!({
        "kind": "tcp",
        "addr": format!("127.0.0.1:{port}"),
        "handshake_timeout_ms": 400
    });
    let cfg_path = dir.path().join("run.json");
    write_config(&cfg_path, &cfg);
    let out = run(&[
        "join",
        "--config",
        cfg_path.to_str().unwrap(),
        "--client-id",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr_of(&out));
}

#[test]
fn attack_reports_are_valid_json_with_expected_claims() {
    let ambiguity = run(&[
        "attack", "ambiguity", "--dims", "4,8,3", "--groups", "2", "--instances", "20",
        "--seed", "3",
    ]);
    assert_eq!(ambiguity.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&stdout_of(&ambiguity)).unwrap();
    assert!(report["max_reproduction_rel_err"].as_f64().unwrap() < 1e-12);
    assert!(report["min_distance_from_truth"].as_f64().unwrap() > 1e-6);

    let argmax = run(&[
        "attack", "argmax", "--outputs", "10", "--groups", "5", "--trials", "2000",
        "--strategy", "group-hypothesis", "--seed", "9",
    ]);
    assert_eq!(argmax.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&stdout_of(&argmax)).unwrap();
    let rate = report["success_rate"].as_f64().unwrap();
    let bound = report["chance_bound"].as_f64().unwrap();
    assert!(rate <= bound, "rate {rate} vs bound {bound}");
}
