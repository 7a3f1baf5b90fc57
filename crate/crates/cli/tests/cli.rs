//! End-to-end exercises of the binary: exit codes, determinism, config
//! plumbing, and the full gen -> train -> track -> eval -> inspect loop on
//! a deliberately tiny scene.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_simtrack"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("simtrack-cli-test").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Small enough that a training step takes milliseconds.
fn tiny_args() -> Vec<String> {
    [
        "scene.num_objects=2",
        "scene.frame_count=6",
        "scene.grid_size=8",
        "scene.d_feat=4",
        "model.d_feat=4",
        "model.d_model=8",
        "model.ffn_hidden=16",
        "train.epochs=1",
        "train.clips_per_seq=1",
        "train.n=3",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect()
}

fn run(args: &[&str], extra: &[String]) -> Output {
    let mut all: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    all.extend_from_slice(extra);
    bin().args(&all).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        stdout(out),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every file under `dir`, relative path -> bytes.
fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn no_subcommand_is_usage_error() {
    let out = run(&[], &[]);
    assert_code(&out, 1);
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = run(&["gen", "--bogus"], &[]);
    assert_code(&out, 1);
}

#[test]
fn unknown_config_key_is_config_error() {
    let out = run(&["--set", "scene.nope=1", "gen"], &[]);
    assert_code(&out, 2);
}

#[test]
fn mistyped_config_value_is_config_error() {
    let out = run(&["--set", "scene.speed=fast", "gen"], &[]);
    assert_code(&out, 2);
}

#[test]
fn missing_config_file_is_config_error() {
    let out = run(&["--config", "/nonexistent/run.toml", "gen"], &[]);
    assert_code(&out, 2);
}

#[test]
fn mismatched_feature_dims_rejected() {
    let out = run(&["--set", "scene.d_feat=4", "gen"], &[]);
    assert_code(&out, 2);
}

#[test]
fn dump_defaults_roundtrips() {
    let out = run(&["--dump-defaults"], &[]);
    assert_code(&out, 0);
    let text = stdout(&out);
    let parsed = simtrack_core::parse_config(&text).unwrap();
    assert_eq!(simtrack_core::dump_config(&parsed), text);
    assert_eq!(parsed, simtrack_core::RunConfig::default());
}

#[test]
fn dump_defaults_shows_overrides_and_env_config() {
    let dir = tmp("envcfg");
    let cfg_path = dir.join("run.toml");
    fs::write(&cfg_path, "[scene]\nspeed = 0.5\n").unwrap();
    let out = bin()
        .env("SIMTRACK_CONFIG", &cfg_path)
        .args(["--dump-defaults", "--set", "train.lr=0.25"])
        .output()
        .unwrap();
    assert_code(&out, 0);
    let parsed = simtrack_core::parse_config(&stdout(&out)).unwrap();
    assert_eq!(parsed.scene.speed, 0.5);
    assert_eq!(parsed.train.lr, 0.25);
}

#[test]
fn gen_same_seed_identical_directories() {
    let dir = tmp("gen-det");
    let extra = tiny_args();
    let a = dir.join("a");
    let b = dir.join("b");
    for out_dir in [&a, &b] {
        let out = run(
            &["gen", "--seed", "7", "--seqs", "2", "--out", out_dir.to_str().unwrap()],
            &extra,
        );
        assert_code(&out, 0);
    }
    let (sa, sb) = (dir_snapshot(&a), dir_snapshot(&b));
    assert!(!sa.is_empty());
    assert_eq!(sa, sb);
    let other = dir.join("c");
    let out = run(
        &["gen", "--seed", "8", "--seqs", "2", "--out", other.to_str().unwrap()],
        &extra,
    );
    assert_code(&out, 0);
    assert_ne!(sa, dir_snapshot(&other));
}

#[test]
fn pipeline_and_inspect() {
    let dir = tmp("pipeline");
    let extra = tiny_args();
    let data = dir.join("data");
    let ckpt = dir.join("model.ckpt");
    let log = dir.join("log.csv");
    let outd = dir.join("out");

    let out = run(
        &["gen", "--seed", "3", "--seqs", "2", "--out", data.to_str().unwrap()],
        &extra,
    );
    assert_code(&out, 0);

    let out = run(
        &[
            "train",
            "--dataset",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--log",
            log.to_str().unwrap(),
        ],
        &extra,
    );
    assert_code(&out, 0);
    let log_text = fs::read_to_string(&log).unwrap();
    assert!(log_text.starts_with("step,epoch,spatial,temporal,crossclip,l1,giou,total,lr"));
    assert!(log_text.lines().count() >= 2);

    let out = run(
        &[
            "track",
            "--dataset",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            outd.to_str().unwrap(),
        ],
        &extra,
    );
    assert_code(&out, 0);
    assert!(outd.join("seq_000.txt").exists());
    assert!(outd.join("seq_001.txt").exists());

    let out = run(
        &[
            "eval",
            "--dataset",
            data.to_str().unwrap(),
            "--pred",
            outd.to_str().unwrap(),
        ],
        &extra,
    );
    assert_code(&out, 0);
    assert!(stdout(&out).contains("idf1 "));

    // Scoring the ground truth against itself is a fixed point.
    let perfect = dir.join("perfect");
    fs::create_dir_all(&perfect).unwrap();
    for i in 0..2 {
        fs::copy(
            data.join(format!("seq_{i:03}")).join("gt.csv"),
            perfect.join(format!("seq_{i:03}.txt")),
        )
        .unwrap();
    }
    let out = run(
        &[
            "eval",
            "--dataset",
            data.to_str().unwrap(),
            "--pred",
            perfect.to_str().unwrap(),
        ],
        &extra,
    );
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("idf1 1.000000"), "{text}");
    assert!(text.contains("id_switches 0"), "{text}");

    let ins = dir.join("ins");
    let out = run(
        &[
            "inspect",
            "--dataset",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--seq",
            "0",
            "--len",
            "3",
            "--out",
            ins.to_str().unwrap(),
        ],
        &extra,
    );
    assert_code(&out, 0);
    assert!(ins.join("s_spatial_f00.csv").exists());
    assert!(ins.join("s_spatial_f00.pgm").exists());
    assert!(ins.join("s_temporal_f01.csv").exists());
    assert!(ins.join("s_crossclip.csv").exists());
    let pgm = fs::read(ins.join("s_crossclip.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    // CSV values are similarities in [0, 1].
    for line in fs::read_to_string(ins.join("s_crossclip.csv")).unwrap().lines() {
        for v in line.split(',') {
            let v: f64 = v.parse().unwrap();
            assert!((-1e-9..=1.0 + 1e-9).contains(&v));
        }
    }

    // Inspect past the end of the sequence is a usage error.
    let out = run(
        &[
            "inspect",
            "--dataset",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--start",
            "99",
            "--out",
            ins.to_str().unwrap(),
        ],
        &extra,
    );
    assert_code(&out, 1);

    // Missing prediction files are a runtime error.
    let out = run(
        &[
            "eval",
            "--dataset",
            data.to_str().unwrap(),
            "--pred",
            dir.join("void").to_str().unwrap(),
        ],
        &extra,
    );
    assert_code(&out, 3);
}

#[test]
fn track_without_checkpoint_is_runtime_error() {
    let dir = tmp("nockpt");
    let extra = tiny_args();
    let data = dir.join("data");
    let out = run(
        &["gen", "--seed", "1", "--seqs", "1", "--out", data.to_str().unwrap()],
        &extra,
    );
    assert_code(&out, 0);
    let out = run(
        &[
            "track",
            "--dataset",
            data.to_str().unwrap(),
            "--checkpoint",
            dir.join("missing.ckpt").to_str().unwrap(),
            "--out",
            dir.join("out").to_str().unwrap(),
        ],
        &extra,
    );
    assert_code(&out, 3);
}

#[test]
fn ablate_tabulates_every_combination() {
    let extra = tiny_args();
    let out = run(&["ablate", "--train-seqs", "2", "--eval-seqs", "1", "--seed", "5"], &extra);
    assert_code(&out, 0);
    let text = stdout(&out);
    for name in [
        "spatial",
        "temporal",
        "crossclip",
        "spatial+temporal",
        "spatial+crossclip",
        "temporal+crossclip",
        "full",
    ] {
        assert!(text.lines().any(|l| l.starts_with(name)), "missing {name}: {text}");
    }
}

#[test]
fn config_file_flags_override() {
    let dir = tmp("cfgfile");
    let cfg_path = dir.join("run.toml");
    fs::write(
        &cfg_path,
        "[scene]\nnum_objects = 3\nframe_count = 6\ngrid_size = 8\nd_feat = 4\n[model]\nd_feat = 4\nd_model = 8\nffn_hidden = 16\n",
    )
    .unwrap();
    // The --set override wins over the config file.
    let out = bin()
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "--set",
            "scene.num_objects=2",
            "--dump-defaults",
        ])
        .output()
        .unwrap();
    assert_code(&out, 0);
    let parsed = simtrack_core::parse_config(&stdout(&out)).unwrap();
    assert_eq!(parsed.scene.num_objects, 2);
    assert_eq!(parsed.scene.grid_size, 8);
}
