use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selfctl::synthdata::{self, Jitter};

fn selfctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selfctl"))
        .args(args)
        .output()
        .expect("spawn selfctl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
[model]
width = 16
depth_enc = 1
depth_dec = 1
heads = 2
mlp_ratio = 2
head_hidden = 16
head_blocks = 1
time_dim = 8

[diffusion]
sample_steps = 5
noise_repeats = 1

[train]
batch_size = 4
steps = 10
checkpoint_every = 5

[data]
size = 27

[eval]
samples = 9
steps = 4

[paths]
out_dir = "run"
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn trained_checkpoint(dir: &Path) -> PathBuf {
    let cfg = tiny_config(dir);
    let out = selfctl(&["train", cfg.to_str().unwrap(), "--steps", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir.join("run").join("model.ckpt")
}

#[test]
fn missing_config_exits_2_and_names_path() {
    let out = selfctl(&["train", "/definitely/not/here.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/definitely/not/here.toml"));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[model]\nwdith = 3\n[paths]\nout_dir = \"x\"\n").unwrap();
    let out = selfctl(&["train", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bad.toml"));
}

#[test]
fn train_smoke_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = selfctl(&["train", cfg.to_str().unwrap(), "--steps", "10"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("run");
    for f in ["model.ckpt", "checkpoint_000005.ckpt", "checkpoint_000010.ckpt", "vocab.txt", "config.toml"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("metrics.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 10);
    for (i, line) in lines.iter().enumerate() {
        let rest = line.strip_prefix(&format!("step={} loss=", i + 1)).expect(line);
        let v: f64 = rest.parse().unwrap();
        assert!(v.is_finite() && v > 0.0);
    }
    // the echoed config reloads to the same run
    let echoed = selfctl::config::RunConfig::parse(&fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.train.steps, 10);
}

#[test]
fn mask_prints_paper_default_example() {
    let out = selfctl(&["mask", "--layout", "2,1,2", "--option", "3"]);
    assert!(out.status.success());
    assert_eq!(
        stdout(&out),
        "layout=2,1,2 policy=causal,bidirectional,bidirectional,causal\n10000\n11000\n11100\n11111\n11111\n"
    );
    let out = selfctl(&["mask", "--layout", "2,1,2", "--policy", "causal,bidirectional,bidirectional,bidirectional"]);
    assert!(out.status.success());
    assert!(stdout(&out).ends_with("\n10111\n11111\n11111\n11111\n11111\n"));
}

#[test]
fn mask_all_bidirectional_and_reach() {
    let out = selfctl(&["mask", "--layout", "0,0,3", "--option", "8"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).lines().skip(1).collect::<Vec<_>>(), vec!["111"; 3]);

    let out = selfctl(&["mask", "--layout", "2,1,2", "--option", "3", "--reach", "4"]);
    let text = stdout(&out);
    let reach: Vec<&str> = text.lines().skip_while(|l| !l.starts_with("reach")).skip(1).collect();
    assert_eq!(reach.len(), 5);
    for row in &reach[..3] {
        assert!(row.ends_with("00"), "{row}");
    }
}

#[test]
fn mask_usage_errors_exit_2() {
    assert_eq!(selfctl(&["mask", "--layout", "1,1,1", "--option", "9"]).status.code(), Some(2));
    assert_eq!(selfctl(&["mask", "--layout", "1,1,0", "--option", "1"]).status.code(), Some(2));
    assert_eq!(selfctl(&["mask", "--layout", "1,x,1", "--option", "1"]).status.code(), Some(2));
    assert_eq!(selfctl(&["mask", "--layout", "1,1,1", "--policy", "c,c,q,c"]).status.code(), Some(2));
    assert_eq!(selfctl(&["mask", "--layout", "1,1,1", "--option", "1", "--reach", "0"]).status.code(), Some(2));
}

#[test]
fn sample_is_deterministic_and_handles_plan_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    let cond = dir.path().join("cond.png");
    synthdata::make_sample_named("red", "square", Jitter::NONE, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap()
        .cond
        .save_png(&cond)
        .unwrap();
    let sample = |name: &str, extra: &[&str]| -> Vec<u8> {
        let out_path = dir.path().join(name);
        let mut args = vec![
            "sample",
            ckpt.to_str().unwrap(),
            "--text",
            "red square",
            "--cond-image",
            cond.to_str().unwrap(),
            "--seed",
            "4",
            "--out",
            out_path.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let out = selfctl(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        fs::read(out_path).unwrap()
    };
    let a = sample("a.png", &[]);
    let b = sample("b.png", &[]);
    assert_eq!(a, b);
    sample("k1.png", &["--k", "1"]);
    sample("k16.png", &["--k", "16"]);

    let grid = dir.path().join("grid.png");
    let out = selfctl(&[
        "sample",
        ckpt.to_str().unwrap(),
        "--grid",
        "3",
        "--out",
        grid.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let img = selfctl::raster::Image::load_png(&grid, 3).unwrap();
    assert_eq!((img.height, img.width), (48, 48));

    let out = selfctl(&["sample", ckpt.to_str().unwrap(), "--k", "17", "--out", grid.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sample_rejects_mismatched_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    let out_png = dir.path().join("x.png");

    // condition image of the wrong size
    let small = dir.path().join("small.png");
    selfctl::raster::Image::zeros(8, 8, 1).save_png(&small).unwrap();
    let out = selfctl(&[
        "sample",
        ckpt.to_str().unwrap(),
        "--cond-image",
        small.to_str().unwrap(),
        "--out",
        out_png.to_str().unwrap(),
    ]);
    assert_ne!(out.status.code(), Some(0));

    // corrupted checkpoint
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 7);
    let broken = dir.path().join("broken.ckpt");
    fs::write(&broken, bytes).unwrap();
    let out = selfctl(&["sample", broken.to_str().unwrap(), "--out", out_png.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("broken.ckpt"));
}

#[test]
fn ablate_reports_eight_rows_with_leakage_by_cross_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = selfctl(&["ablate", cfg.to_str().unwrap(), "--steps", "2", "--samples", "9"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<Vec<&str>> = text
        .lines()
        .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit()))
        .map(|l| l.split_whitespace().collect())
        .collect();
    assert_eq!(rows.len(), 8);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
        let leakage: f64 = row[7].parse().unwrap();
        match row[4] {
            "causal" => assert_eq!(leakage, 0.0, "option {}", i + 1),
            "bidirectional" => assert!(leakage > 0.0, "option {}", i + 1),
            other => panic!("unexpected cross mode {other}"),
        }
    }
    assert!(text.contains("FID and IS are not reported"));
    assert!(dir.path().join("run").join("ablation.txt").is_file());
}

#[test]
fn export_then_train_from_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("shapes");
    let out = selfctl(&["export-data", "--out", data.to_str().unwrap(), "--size", "18", "--seed", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(data.join("manifest.jsonl")).unwrap().lines().count(), 18);

    let cfg = dir.path().join("fromdir.toml");
    fs::write(&cfg, TINY.replace("[data]\nsize = 27", "[data]\ndir = \"shapes\"")).unwrap();
    let out = selfctl(&["train", cfg.to_str().unwrap(), "--steps", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));

    let missing = dir.path().join("missing.toml");
    fs::write(&missing, TINY.replace("[data]\nsize = 27", "[data]\ndir = \"nowhere\"")).unwrap();
    let out = selfctl(&["train", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere"));
}

#[test]
fn train_stops_at_time_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("budget.toml");
    fs::write(&cfg, TINY.replace("checkpoint_every = 5", "checkpoint_every = 0\ntime_budget_secs = 1e-9")).unwrap();
    let out = selfctl(&["train", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = fs::read_to_string(dir.path().join("run").join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 1);
}
