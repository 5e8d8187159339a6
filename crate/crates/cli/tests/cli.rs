//! End-to-end command tests: exit codes, determinism, and the run-directory
//! contract.

use std::path::Path;
use std::process::{Command, Output};

fn eegkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eegkit"))
        .args(args)
        .env("EEGKIT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn base_config(seed: u64) -> serde_json::Value {
    serde_json::json!({
        "model": {
            "ete": {
                "layers": 2, "hidden": 8, "heads": 2, "head_size": 4,
                "intermediate": 16, "token_width": 8, "max_seq_len": 8
            },
            "teg_layers": 1
        },
        "data": {
            "pretrain": {
                "name": "corpus",
                "synthetic": {
                    "seed": seed,
                    "electrodes": ["FZ", "CZ", "PZ", "OZ"],
                    "samples_per_electrode": 24,
                    "ar_coeffs": [[1.45, -0.76], [1.43, -0.75], [1.41, -0.74], [1.39, -0.73]],
                    "noise_std": 1.0
                },
                "profile": {
                    "target_hz": 64,
                    "tokenize": {"window_s": 0.25, "token_len": 8, "overlap": 0.5}
                }
            },
            "tasks": [{
                "name": "bursts",
                "synthetic": {
                    "seed": seed + 50,
                    "electrodes": ["FZ", "CZ", "PZ"],
                    "samples_per_electrode": 40,
                    "ar_coeffs": [[1.45, -0.76], [1.43, -0.75], [1.41, -0.74]],
                    "noise_std": 1.0,
                    "task": {"rule": "temporal_energy", "classes": 2, "gain": 2.5}
                },
                "profile": {
                    "target_hz": 64,
                    "tokenize": {"window_s": 0.25, "token_len": 8, "overlap": 0.5}
                }
            }]
        },
        "train": {
            "mode": "pretrain",
            "pretrain": {
                "steps": 5, "batch_size": 4,
                "schedule": {"warmup_ratio": 0.2, "total_steps": 5, "base_lr": 0.001},
                "objective": {"kind": "ar", "rho": "l2"},
                "holdout_fraction": 0.2, "holdout_eval_cap": 8,
                "seed": seed
            }
        },
        "seeds": [1, 2]
    })
}

fn write_config(dir: &Path, value: &serde_json::Value) -> String {
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_string_lossy().to_string()
}

#[test]
fn gen_then_inspect_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(3));
    let data = dir.path().join("data");
    let out = eegkit(&["gen-synthetic", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("wrote 24 samples"));

    let out = eegkit(&["inspect", "--path", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("\"version\": 1"));
    assert!(stdout(&out).contains("\"dtype\": \"f32le\""));
}

#[test]
fn gen_is_byte_identical_for_the_same_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(9));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&eegkit(&["gen-synthetic", "--config", &cfg, "--out", a.to_str().unwrap()])), 0);
    assert_eq!(code(&eegkit(&["gen-synthetic", "--config", &cfg, "--out", b.to_str().unwrap()])), 0);
    let bytes_a = std::fs::read(a.join("data.bin")).unwrap();
    let bytes_b = std::fs::read(b.join("data.bin")).unwrap();
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn non_stationary_coefficients_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = base_config(4);
    value["data"]["pretrain"]["synthetic"]["ar_coeffs"][0] = serde_json::json!([1.2, 0.3]);
    let cfg = write_config(dir.path(), &value);
    let out = eegkit(&["gen-synthetic", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-stationary"), "{}", stderr(&out));
}

#[test]
fn unknown_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = base_config(5);
    value["typo_section"] = serde_json::json!(true);
    let cfg = write_config(dir.path(), &value);
    let out = eegkit(&["gen-synthetic", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("unknown field"), "{}", stderr(&out));
}

#[test]
fn pretrain_writes_reproducible_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(6));
    let (a, b) = (dir.path().join("runA"), dir.path().join("runB"));
    let out = eegkit(&["pretrain", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(a.join("metrics.jsonl").exists());
    assert!(a.join("metrics.csv").exists());
    assert!(a.join("config.json").exists());
    assert!(a.join("model").join("params.bin").exists());
    assert!(!a.join("run.lock").exists(), "lock removed after the run");

    let out = eegkit(&["pretrain", "--config", &cfg, "--out", b.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for file in ["metrics.jsonl", "metrics.csv"] {
        let bytes_a = std::fs::read(a.join(file)).unwrap();
        let bytes_b = std::fs::read(b.join(file)).unwrap();
        assert_eq!(bytes_a, bytes_b, "{file} differs between identical runs");
    }
}

#[test]
fn finetune_then_eval_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(7));
    let pre = dir.path().join("pre");
    let out = eegkit(&["pretrain", "--config", &cfg, "--out", pre.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let mut value = base_config(7);
    value["train"]["mode"] = serde_json::json!("finetune-joint");
    value["train"]["pretrain"] = serde_json::Value::Null;
    value["train"] = serde_json::json!({
        "mode": "finetune-joint",
        "finetune": {
            "steps": 4, "batch_size": 4,
            "schedule": {"warmup_ratio": 0.25, "total_steps": 4, "base_lr": 0.001},
            "seed": 7
        },
        "init_from": pre.join("model").to_str().unwrap()
    });
    let fcfg = write_config(&dir.path().join(""), &value);
    let fin = dir.path().join("fin");
    let out = eegkit(&["finetune", "--config", &fcfg, "--out", fin.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("val accuracy"));
    assert!(fin.join("checkpoints/final/teg/params.bin").exists());

    let eval_out = dir.path().join("eval");
    let out = eegkit(&[
        "eval",
        "--config",
        &fcfg,
        "--checkpoint",
        fin.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("+/-"), "{}", stdout(&out));
    assert!(eval_out.join("eval.csv").exists());
}

#[test]
fn missing_checkpoint_exits_3_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = base_config(8);
    value["train"] = serde_json::json!({
        "mode": "finetune-joint",
        "finetune": {
            "steps": 2, "batch_size": 2,
            "schedule": {"warmup_ratio": 0.5, "total_steps": 2, "base_lr": 0.001},
            "seed": 8
        },
        "init_from": "/nonexistent/ckpt"
    });
    let cfg = write_config(dir.path(), &value);
    let out = eegkit(&["finetune", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("/nonexistent/ckpt"), "{}", stderr(&out));
}

#[test]
fn gradcheck_numkit_passes_and_fault_injection_fails() {
    let out = eegkit(&["gradcheck", "--scope", "numkit"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("all"), "{}", stdout(&out));

    let out = eegkit(&["gradcheck", "--scope", "numkit", "--inject-fault"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("fault/stop-gradient-product"), "{}", stderr(&out));
}

#[test]
fn always_correct_single_class_eval_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = base_config(11);
    value["data"]["tasks"][0]["synthetic"]["task"] =
        serde_json::json!({"rule": "temporal_energy", "classes": 1, "gain": 2.0});
    let cfg = write_config(dir.path(), &value);
    let pre = dir.path().join("pre");
    assert_eq!(
        code(&eegkit(&["pretrain", "--config", &cfg, "--out", pre.to_str().unwrap()])),
        0
    );

    let mut fvalue = value.clone();
    fvalue["train"] = serde_json::json!({
        "mode": "finetune-joint",
        "finetune": {
            "steps": 2, "batch_size": 2,
            "schedule": {"warmup_ratio": 0.5, "total_steps": 2, "base_lr": 0.001},
            "seed": 11
        },
        "init_from": pre.join("model").to_str().unwrap()
    });
    let fcfg = write_config(&dir.path().join(""), &fvalue);
    let fin = dir.path().join("fin");
    let out = eegkit(&["finetune", "--config", &fcfg, "--out", fin.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let out = eegkit(&["eval", "--config", &fcfg, "--checkpoint", fin.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(
        stdout(&out).contains("accuracy 1.0000 +/- 0.0000"),
        "{}",
        stdout(&out)
    );
}

#[test]
fn locked_run_directory_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(12));
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join("run.lock"), b"").unwrap();
    let out = eegkit(&["pretrain", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("locked"), "{}", stderr(&out));
}
