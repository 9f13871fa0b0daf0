use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn zselect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zselect"))
        .args(args)
        .output()
        .expect("spawn zselect")
}

fn ok(args: &[&str]) -> Output {
    let out = zselect(args);
    assert!(
        out.status.success(),
        "zselect {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "per-class=60";

fn train_small(dir: &Path, name: &str) -> std::path::PathBuf {
    let model = dir.join(name);
    ok(&[
        "train",
        "--synthetic",
        SMALL,
        "--exclude",
        "3",
        "--seed",
        "11",
        "--epochs",
        "5",
        "--out",
        p(&model),
    ]);
    model
}

#[test]
fn version_lists_formats() {
    let out = ok(&["--version"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.contains("ZSELMDL1") && text.contains("ZSELDS1"),
        "{text}"
    );
}

#[test]
fn missing_dataset_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = zselect(&[
        "train",
        "--seed",
        "1",
        "--out",
        p(&dir.path().join("m.bin")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = zselect(&[
        "train",
        "--data",
        p(&dir.path().join("absent.ds")),
        "--seed",
        "1",
        "--out",
        p(&dir.path().join("m.bin")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_seed_is_usage_error() {
    let out = zselect(&["train", "--synthetic"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_distortion_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_small(dir.path(), "m.bin");
    let out = zselect(&[
        "eval",
        "--synthetic",
        SMALL,
        "--exclude",
        "3",
        "--seed",
        "11",
        "--model",
        p(&model),
        "--out",
        p(&dir.path().join("r.csv")),
        "--distort",
        "kind=swirl,strength=2",
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn single_pass_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_small(dir.path(), "m.bin");
    let run = |n: &str| {
        zselect(&[
            "eval",
            "--synthetic",
            SMALL,
            "--exclude",
            "3",
            "--seed",
            "11",
            "--n-passes",
            n,
            "--model",
            p(&model),
            "--out",
            p(&dir.path().join(format!("r{n}.csv"))),
        ])
    };
    assert_eq!(run("1").status.code(), Some(2));
    assert!(run("2").status.success());
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_small(dir.path(), "a.bin");
    let b = train_small(dir.path(), "b.bin");
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn default_synthetic_training_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    ok(&[
        "train",
        "--synthetic",
        "--seed",
        "1",
        "--out",
        p(&dir.path().join("m.bin")),
    ]);
    assert!(
        start.elapsed() < Duration::from_secs(60),
        "{:?}",
        start.elapsed()
    );
}

#[test]
fn eval_writes_both_methods_per_distortion_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_small(dir.path(), "m.bin");
    let eval = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "eval",
            "--synthetic",
            SMALL,
            "--exclude",
            "3",
            "--seed",
            "11",
            "--model",
            p(&model),
            "--out",
            p(&out),
            "--distort",
            "kind=gamma,gamma=0.5",
            "--distort",
            "kind=occlusion,area=0.1",
        ]);
        out
    };
    let first = eval("r1.csv");
    let second = eval("r2.csv");
    let text = fs::read_to_string(&first).unwrap();
    assert_eq!(text, fs::read_to_string(&second).unwrap());
    let curves = |p: &Path| fs::read(format!("{}.curves.csv", p.display())).unwrap();
    assert_eq!(curves(&first), curves(&second));

    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 6, "{text}");
    for method in ["ztest", "sr"] {
        assert_eq!(
            rows.iter()
                .filter(|r| r.split(',').any(|f| f == method))
                .count(),
            3,
            "{text}"
        );
    }
}

#[test]
fn unit_gamma_distort_copies_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.ds");
    let dst = dir.path().join("dst.ds");
    // Distort with an empty occlusion to materialise the clean container first.
    ok(&[
        "distort",
        "--synthetic",
        SMALL,
        "--seed",
        "2",
        "--distort",
        "kind=occlusion,x=0,y=0,w=0,h=0",
        "--out",
        p(&src),
    ]);
    ok(&[
        "distort",
        "--data",
        p(&src),
        "--seed",
        "3",
        "--distort",
        "kind=gamma,gamma=1",
        "--out",
        p(&dst),
    ]);
    assert_eq!(fs::read(&src).unwrap(), fs::read(&dst).unwrap());
    let meta = fs::read_to_string(format!("{}.meta", dst.display())).unwrap();
    assert!(meta.contains("seed=3"), "{meta}");
}
