use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_causalfuse"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Small corpus plus both dictionaries.
fn fixture(dir: &Path) {
    ok(dir, &["gen-data", "-n", "30", "--size", "16", "--seed", "1"]);
    ok(dir, &["gen-data", "--per-category", "2", "--size", "16", "--split", "test", "--seed", "2"]);
    ok(dir, &["build-dict", "--modality", "visible", "-N", "4", "-d", "6"]);
    ok(dir, &["build-dict", "--modality", "infrared", "-N", "4", "-d", "6"]);
}

fn train(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["train", "--epochs", "1", "--crop", "16", "--out", out];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn gen_data_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--street", "0.8", "--cloud", "0.1", "--bush", "0.1", "-n", "20", "--size", "16", "--out", "c"]);
    let manifest = std::fs::read(d.join("c/manifest.csv")).unwrap();
    assert_eq!(manifest.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count(), 21);
    let pgm_count = walk(&d.join("c/train")).len();
    assert_eq!(pgm_count, 40);
    let first = walk(&d.join("c/train")).into_iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>();
    ok(d, &["gen-data", "--street", "0.8", "--cloud", "0.1", "--bush", "0.1", "-n", "20", "--size", "16", "--out", "c"]);
    assert_eq!(std::fs::read(d.join("c/manifest.csv")).unwrap(), manifest);
    let second = walk(&d.join("c/train")).into_iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>();
    assert_eq!(first, second);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn invalid_profile_names_the_sum() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen-data", "--street", "0.5", "--cloud", "0.1", "--bush", "0.1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("0.7"), "{err}");
    assert!(!dir.path().join("corpus").exists());
}

#[test]
fn build_dict_defaults_and_modality_isolation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "-n", "30", "--size", "16"]);
    for p in walk(&d.join("corpus/train")) {
        if p.to_str().unwrap().ends_with("_ir.pgm") {
            std::fs::remove_file(p).unwrap();
        }
    }
    ok(d, &["build-dict", "--modality", "visible", "-d", "8"]);
    let json = std::fs::read_to_string(d.join("z_vis.json")).unwrap();
    assert!(json.contains("\"N\": 25"));
    assert!(json.contains("\"modality\": \"visible\""));
    assert!(!run(d, &["build-dict", "--modality", "infrared", "-d", "8"]).status.success());
    let too_many = run(d, &["build-dict", "--modality", "visible", "-N", "31", "--out", "big.json"]);
    assert!(!too_many.status.success());
    assert!(!d.join("big.json").exists());
}

#[test]
fn train_requires_dictionaries() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "-n", "6", "--size", "16"]);
    let out = run(d, &["train", "--epochs", "1", "--crop", "16"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("z_vis.json"));
    assert!(!d.join("run").exists());
}

#[test]
fn train_fuse_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    train(d, "run", &[]);
    for f in ["config.toml", "loss.csv", "checkpoint.json"] {
        assert!(d.join("run").join(f).is_file(), "{f}");
    }
    let loss = std::fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,mean_loss\n1,"));
    let snapshot = std::fs::read_to_string(d.join("run/config.toml")).unwrap();
    assert!(snapshot.contains("epochs = 1"));

    let manifest = std::fs::read_to_string(d.join("corpus/manifest.csv")).unwrap();
    let row: Vec<&str> = manifest.lines().find(|l| l.ends_with(",test")).unwrap().split(',').collect();
    let ir = &format!("corpus/test/{}/{}_ir.pgm", row[1], row[0]);
    let vis = &format!("corpus/test/{}/{}_vis.pgm", row[1], row[0]);
    ok(d, &["fuse", "--checkpoint", "run/checkpoint.json", "--ir", ir, "--vis", vis, "--out", "a.pgm"]);
    ok(d, &["fuse", "--checkpoint", "run/checkpoint.json", "--ir", ir, "--vis", vis, "--out", "b.pgm"]);
    let a = std::fs::read(d.join("a.pgm")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.pgm")).unwrap());
    assert!(a.starts_with(b"P5\n16 16\n255\n"));

    let small = causalfuse::Image::filled(12, 16, 0.5);
    small.save_pgm(&d.join("small.pgm")).unwrap();
    let bad = run(d, &["fuse", "--checkpoint", "run/checkpoint.json", "--ir", "small.pgm", "--vis", vis, "--out", "c.pgm"]);
    assert!(!bad.status.success());
    assert!(!d.join("c.pgm").exists());

    ok(d, &["eval", "--checkpoint", "run/checkpoint.json", "--out", "r1.csv"]);
    ok(d, &["eval", "--checkpoint", "run/checkpoint.json", "--out", "r2.csv"]);
    let r1 = std::fs::read_to_string(d.join("r1.csv")).unwrap();
    assert_eq!(r1, std::fs::read_to_string(d.join("r2.csv")).unwrap());
    let lines: Vec<&str> = r1.lines().collect();
    assert_eq!(lines[0], "image_id,MI,VIF,Qabf,SSIM");
    assert_eq!(lines.len(), 6 + 2);
    assert!(lines[7].starts_with("MEAN,"));
}

#[test]
fn dictionary_tampering_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    train(d, "run", &[]);
    let text = std::fs::read_to_string(d.join("z_ir.json")).unwrap();
    std::fs::write(d.join("z_ir.json"), text.replace("\"seed\": 0", "\"seed\": 1")).unwrap();
    let out = run(d, &["eval", "--checkpoint", "run/checkpoint.json", "--out", "r.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
}

#[test]
fn config_file_drives_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("exp")).unwrap();
    std::fs::write(
        d.join("exp/run.toml"),
        "[data]\ncorpus = \"data\"\nn = 9\nsize = 16\n[dictionary]\nN = 3\nd = 4\n[train]\nepochs = 1\ncrop = 12\n",
    )
    .unwrap();
    ok(d, &["--config", "exp/run.toml", "gen-data"]);
    assert!(d.join("exp/data/manifest.csv").is_file());
    ok(d, &["--config", "exp/run.toml", "build-dict", "--modality", "visible"]);
    ok(d, &["--config", "exp/run.toml", "build-dict", "--modality", "infrared"]);
    ok(d, &["--config", "exp/run.toml", "train", "--no-baffm"]);
    let snap = std::fs::read_to_string(d.join("exp/run/config.toml")).unwrap();
    assert!(snap.contains("adjust = false"));

    std::fs::write(d.join("exp/bad.toml"), "[train]\nepoch = 3\n").unwrap();
    let out = run(d, &["--config", "exp/bad.toml", "gen-data"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}
