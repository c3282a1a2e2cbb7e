use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--n", "256", "--m", "16", "--k", "8", "--embed-dim", "8", "--encoder-depth", "1", "--decoder-depth", "1", "--heads", "2",
    "--batch-size", "4",
];

fn evmae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evmae"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = evmae(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    evmae(dir, args).status.code().unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(TINY).copied().collect()
}

fn synth(dir: &Path, samples: &str) {
    ok(dir, &["synth", "--classes", "3", "--samples", samples, "--seed", "7", "--duration", "0.3", "--out", "data"]);
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn synth_writes_balanced_labels() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "9");
    let labels = fs::read_to_string(t.path().join("data/labels.csv")).unwrap();
    let rows: Vec<&str> = labels.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    for c in 0..3 {
        assert_eq!(rows.iter().filter(|r| r.ends_with(&format!(",{c}"))).count(), 3);
    }
    assert!(t.path().join("data/sample_0008.evb1").is_file());
}

#[test]
fn ingest_round_trips_through_csv() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "2");
    ok(t.path(), &["ingest", "--input", "data/sample_0001.evb1", "--out", "s.csv"]);
    ok(t.path(), &["ingest", "--input", "s.csv", "--width", "128", "--height", "128", "--out", "s.evb1"]);
    assert_eq!(fs::read(t.path().join("s.evb1")).unwrap(), fs::read(t.path().join("data/sample_0001.evb1")).unwrap());
    assert_eq!(code(t.path(), &["ingest", "--input", "s.csv", "--out", "x.evb1"]), 2);
}

#[test]
fn stages_compose() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "3");
    ok(t.path(), &["windows", "--input", "data/sample_0000.evb1", "--window", "0.2", "--step", "0.05", "--n", "256", "--out", "win"]);
    let n_windows = fs::read_dir(t.path().join("win")).unwrap().count();
    assert_eq!(n_windows, 2);
    assert_eq!(lines(&t.path().join("win/window_0000.csv")), 257);

    fs::create_dir(t.path().join("mixed")).unwrap();
    fs::copy(t.path().join("win/window_0001.csv"), t.path().join("mixed/b.csv")).unwrap();
    ok(t.path(), &["patches", "--in", "win/window_0000.csv", "--m", "16", "--k", "8", "--method", "fps", "--out", "mixed/a.csv"]);
    assert_eq!(lines(&t.path().join("mixed/a.csv")), 1 + 16 * 9);

    let metrics = ok(t.path(), &with_tiny(&["pretrain", "--data", "mixed", "--out", "pre", "--steps", "3"]));
    assert_eq!(metrics.lines().count(), 4);
    assert_eq!(metrics.lines().next(), Some("step,loss,acc"));
    assert_eq!(fs::read_to_string(t.path().join("pre/pretrain.csv")).unwrap(), metrics);
}

#[test]
fn training_is_deterministic_through_the_binary() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "10");
    for run in ["a", "b"] {
        let pre = format!("{run}/pre");
        let ft = format!("{run}/ft");
        ok(t.path(), &with_tiny(&["pretrain", "--data", "data", "--out", &pre, "--steps", "4", "--checkpoint-every", "2", "--seed", "3"]));
        let ckpt = format!("{pre}/pretrain.evmc");
        ok(t.path(), &with_tiny(&["finetune", "--ckpt", &ckpt, "--data", "data", "--out", &ft, "--steps", "4", "--seed", "3"]));
    }
    for f in ["pre/pretrain.csv", "pre/pretrain.evmc", "pre/step_000002.evmc", "pre/step_000004.evmc", "ft/finetune.csv", "ft/finetune.evmc", "ft/config.json"] {
        let (a, b) = (t.path().join("a").join(f), t.path().join("b").join(f));
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{f} differs");
    }
    assert_eq!(
        fs::read(t.path().join("a/pre/step_000004.evmc")).unwrap(),
        fs::read(t.path().join("a/pre/pretrain.evmc")).unwrap()
    );

    let report = ok(t.path(), &["eval", "--ckpt", "a/ft/finetune.evmc", "--data", "data", "--n", "256", "--m", "16", "--split", "all"]);
    let row: Vec<&str> = report.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "all");
    assert_eq!(row[1], "10");
    let acc: f64 = row[3].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    // The patch size comes from the checkpoint; contradicting it is a usage error.
    assert_eq!(code(t.path(), &["eval", "--ckpt", "a/ft/finetune.evmc", "--data", "data", "--k", "4"]), 2);
}

#[test]
fn reconstruct_exports_aligned_files() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "2");
    ok(t.path(), &["windows", "--input", "data/sample_0000.evb1", "--n", "256", "--out", "win"]);
    ok(t.path(), &with_tiny(&["pretrain", "--data", "data", "--out", "pre", "--steps", "2"]));
    let rec = |alpha: &str, out: &str| {
        ok(t.path(), &["reconstruct", "--ckpt", "pre/pretrain.evmc", "--in", "win/window_0000.csv", "--m", "16", "--alpha", alpha, "--seed", "5", "--out", out]);
    };
    rec("0.8", "r1");
    rec("0.8", "r2");
    // m = 16, k = 8: 13 masked and 3 visible patches.
    assert_eq!(lines(&t.path().join("r1/input.csv")), 1 + 16 * 8);
    assert_eq!(lines(&t.path().join("r1/masked.csv")), 1 + 3 * 8);
    assert_eq!(lines(&t.path().join("r1/reconstruction.csv")), 1 + 13 * 8);
    for f in ["input.csv", "masked.csv", "reconstruction.csv"] {
        assert_eq!(fs::read(t.path().join("r1").join(f)).unwrap(), fs::read(t.path().join("r2").join(f)).unwrap());
    }
    rec("0", "r0");
    assert_eq!(fs::read(t.path().join("r0/masked.csv")).unwrap(), fs::read(t.path().join("r0/input.csv")).unwrap());
    assert_eq!(lines(&t.path().join("r0/reconstruction.csv")), 1);
}

#[test]
fn ablation_table_from_trained_and_loaded_checkpoints() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "12");
    let base = with_tiny(&["ablate", "--data", "data", "--ckpt-dir", "ck", "--steps", "2", "--seeds", "0,1"]);
    assert_eq!(code(t.path(), &base), 3);

    let mut train = base.clone();
    train.push("--train");
    let trained = ok(t.path(), &train);
    let rows: Vec<&str> = trained.lines().collect();
    assert_eq!(rows[0], "setting,loss_x1000,acc");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("inlier,") && rows[2].starts_with("fps,") && rows[3].starts_with("random,"));
    assert!(t.path().join("ck/random-seed1.evmc").is_file());
    assert_eq!(ok(t.path(), &base), trained);

    let mut sweep = with_tiny(&["ablate", "--data", "data", "--ckpt-dir", "ck2", "--steps", "2", "--seeds", "0", "--train"]);
    sweep.extend(["--methods", "fps", "--thresholds", "1e-5,1e-3", "--out", "t.csv"]);
    ok(t.path(), &sweep);
    let table = fs::read_to_string(t.path().join("t.csv")).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["fps", "H=1e-5", "H=1e-3"]);
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "4");
    assert_eq!(code(t.path(), &["pretrain", "--data", "data"]), 2);
    assert_eq!(code(t.path(), &["frobnicate"]), 2);
    fs::write(t.path().join("bad.json"), r#"{"train": {"lrr": 1}}"#).unwrap();
    assert_eq!(code(t.path(), &["pretrain", "--data", "data", "--out", "o", "--config", "bad.json"]), 2);
    assert_eq!(code(t.path(), &with_tiny(&["pretrain", "--data", "data", "--out", "o", "--steps", "0"])), 2);
    assert_eq!(code(t.path(), &["eval", "--ckpt", "data/labels.csv", "--data", "data"]), 3);
    assert_eq!(code(t.path(), &["pretrain", "--data", "missing", "--out", "o"]), 3);
    fs::write(t.path().join("junk.evb1"), b"EVB1\x01").unwrap();
    assert_eq!(code(t.path(), &["windows", "--input", "junk.evb1", "--out", "w"]), 3);
    assert_eq!(code(t.path(), &with_tiny(&["pretrain", "--data", "data", "--out", "o", "--steps", "3", "--lr", "1e300"])), 4);
}

#[test]
fn config_file_and_flags_combine() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "4");
    fs::write(
        t.path().join("cfg.json"),
        r#"{"sampler": {"n_points": 256}, "patch": {"m": 16, "k": 8},
            "model": {"embed_dim": 8, "encoder_depth": 1, "decoder_depth": 1, "heads": 2},
            "train": {"steps": 5, "batch_size": 2}}"#,
    )
    .unwrap();
    let metrics = ok(t.path(), &["pretrain", "--data", "data", "--out", "o", "--config", "cfg.json", "--steps", "2"]);
    assert_eq!(metrics.lines().count(), 3);
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("o/config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["steps"], 2);
    assert_eq!(resolved["train"]["batch_size"], 2);
    assert_eq!(resolved["model"]["patch_k"], 8);
}
