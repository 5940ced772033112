use std::path::Path;
use std::process::{Command, Output};

use hgf_core::checkpoint::{Checkpoint, Dtype};

fn hgf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgf"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "d_model = 16\nn_layers = 1\nn_heads = 2\nvocab_size = 256\nctx_len = 16\nlora_rank = 2\n\
total_steps = 6\nreg_start = 2\ngate_freeze = 4\nmicro_batch = 2\naccumulation_steps = 1\neval_every = 3\neval_batches = 2\n";

#[test]
fn help_exits_zero_for_every_command() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["train", "eval", "export-ternary", "report", "gradcheck", "pack"] {
        let o = hgf(dir.path(), &[cmd, "--help"]);
        assert!(o.status.success(), "{cmd}");
        assert!(stdout(&o).contains("--"), "{cmd}");
    }
    let o = hgf(dir.path(), &["train", "--help"]);
    for flag in [
        "--config",
        "--steps",
        "--seed",
        "--mode",
        "--metrics-out",
        "--ckpt-out",
        "--corpus",
    ] {
        assert!(stdout(&o).contains(flag), "{flag}");
    }
    assert!(stdout(&hgf(dir.path(), &["report", "--help"])).contains("--packing"));
}

#[test]
fn zero_steps_writes_initial_checkpoint_and_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = hgf(dir.path(), &["train", "--config", "small.toml", "--steps", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("metrics.jsonl")).unwrap().len(), 0);
    let ckpt = Checkpoint::load(&dir.path().join("hgf.ckpt")).unwrap();
    assert_eq!(ckpt.step, 0);
}

#[test]
fn train_export_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    let o = hgf(
        d,
        &[
            "train",
            "--config",
            "small.toml",
            "--metrics-out",
            "m.jsonl",
            "--ckpt-out",
            "a.ckpt",
            "--seed",
            "3",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(d.join("m.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["train_loss"].is_f64() && v["gate_mean"].is_f64() && v["reg_weight"].is_f64());
    }

    let o = hgf(
        d,
        &[
            "export-ternary",
            "--ckpt",
            "a.ckpt",
            "--ckpt-out",
            "t.ckpt",
            "--packing",
            "5pb",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for e in Checkpoint::load(&d.join("t.ckpt")).unwrap().header().tensors {
        if e.name.starts_with("layers.") && e.name.ends_with(".weight") {
            assert_eq!(e.dtype, Dtype::TritPacked5pb, "{}", e.name);
        }
    }

    let loss = |ckpt: &str| {
        let o = hgf(d, &["eval", "--ckpt", ckpt]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        v["mean_loss"].as_f64().unwrap()
    };
    assert!((loss("a.ckpt") - loss("t.ckpt")).abs() <= 1e-4);

    let o = hgf(
        d,
        &[
            "report",
            "--config",
            "small.toml",
            "--metrics",
            "m.jsonl",
            "--csv-out",
            "c.csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("c.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "lr_gate = \"fast\"\n").unwrap();
    let o = hgf(d, &["train", "--config", "bad.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("lr_gate"));

    std::fs::write(d.join("typo.toml"), "d_modle = 64\n").unwrap();
    let o = hgf(d, &["report", "--config", "typo.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("d_modle"));
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(!hgf(d, &["eval", "--ckpt", "missing.ckpt"]).status.success());
    std::fs::write(d.join("junk.ckpt"), b"HGF-CKPT v9 2\n{}").unwrap();
    let o = hgf(d, &["eval", "--ckpt", "junk.ckpt"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("version"));
    assert!(!hgf(d, &["train", "--mode", "quantum"]).status.success());
    std::fs::write(d.join("t.txt"), "1 0 2").unwrap();
    assert!(!hgf(d, &["pack", "--input", "t.txt", "--output", "t.bin"])
        .status
        .success());
}

#[test]
fn pack_round_trips_both_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("t.txt"), "1 0 -1 -1 1 0 0 1 -1\n").unwrap();
    for (packing, bytes) in [("2bit", 3), ("5pb", 2)] {
        let o = hgf(
            d,
            &["pack", "--input", "t.txt", "--output", "t.bin", "--packing", packing],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(std::fs::read(d.join("t.bin")).unwrap().len(), bytes);
        let o = hgf(
            d,
            &[
                "pack",
                "--input",
                "t.bin",
                "--output",
                "u.txt",
                "--packing",
                packing,
                "--unpack",
                "--count",
                "9",
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(
            std::fs::read_to_string(d.join("u.txt")).unwrap(),
            "1 0 -1 -1 1 0 0 1 -1\n"
        );
    }
}

#[test]
fn report_covers_all_modes() {
    let dir = tempfile::tempdir().unwrap();
    let o = hgf(dir.path(), &["report", "--packing", "5pb"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["memory"]["modes"].as_array().unwrap().len(), 5);
    assert_eq!(v["memory"]["packing"], "5pb");
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = hgf(dir.path(), &["gradcheck", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["groups"].as_array().unwrap().len() >= 5);
}
