use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use tempfile::TempDir;

fn qarv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qarv"))
        .args(args)
        .env("QARV_THREADS", "2")
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("spawn qarv")
}

fn run_ok(args: &[&str]) -> String {
    let out = qarv(args);
    assert!(
        out.status.success(),
        "qarv {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset plus one 10-step checkpoint, shared across tests.
struct Fixture {
    dir: TempDir,
    train_secs: f64,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }
    fn config(&self) -> PathBuf {
        self.dir.path().join("cfg.json")
    }
    fn run_dir(&self) -> PathBuf {
        self.dir.path().join("run")
    }
    fn ckpt(&self) -> PathBuf {
        self.run_dir().join("final.ckpt")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture {
            dir,
            train_secs: 0.0,
        };
        run_ok(&[
            "gen-data",
            "--out",
            s(&f.data()),
            "--count",
            "16",
            "--size",
            "32",
            "--seed",
            "3",
        ]);
        std::fs::write(
            f.config(),
            r#"{"batch_size": 2, "iterations": 10, "log_every": 1, "seed": 7}"#,
        )
        .unwrap();
        let start = Instant::now();
        run_ok(&[
            "train",
            "--config",
            s(&f.config()),
            "--data-dir",
            s(&f.data()),
            "--out",
            s(&f.run_dir()),
        ]);
        Fixture {
            train_secs: start.elapsed().as_secs_f64(),
            ..f
        }
    })
}

#[test]
fn help_lists_subcommands() {
    let text = run_ok(&["--help"]);
    for cmd in [
        "train",
        "compress",
        "decompress",
        "sweep",
        "bdrate",
        "ablate",
        "gen-data",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn missing_dataset_is_reported() {
    let f = fixture();
    let missing = f.dir.path().join("no-such-dir");
    let out = qarv(&[
        "train",
        "--config",
        s(&f.config()),
        "--data-dir",
        s(&missing),
        "--out",
        s(&f.dir.path().join("x")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("no-such-dir"),
        "stderr does not name the path: {err}"
    );
}

#[test]
fn short_training_run_finishes_quickly_and_writes_outputs() {
    let f = fixture();
    assert!(
        f.train_secs < 60.0,
        "10 iterations took {:.1} s",
        f.train_secs
    );
    for name in ["final.ckpt", "train_log.csv", "config.json"] {
        assert!(f.run_dir().join(name).exists(), "{name} missing");
    }
}

#[test]
fn same_seed_reproduces_the_log() {
    let f = fixture();
    let again = f.dir.path().join("run2");
    run_ok(&[
        "train",
        "--config",
        s(&f.config()),
        "--data-dir",
        s(&f.data()),
        "--out",
        s(&again),
    ]);
    let a = std::fs::read(f.run_dir().join("train_log.csv")).unwrap();
    let b = std::fs::read(again.join("train_log.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn compress_decompress_round_trip() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let input = f.data().join("img_00000.ppm");
    let bin = dir.path().join("a.qarv");
    let out = run_ok(&[
        "compress",
        "--ckpt",
        s(&f.ckpt()),
        "--lambda",
        "256",
        s(&input),
        s(&bin),
    ]);
    assert!(out.starts_with("bpp "));
    let full = dir.path().join("full.ppm");
    let text = run_ok(&[
        "decompress",
        "--ckpt",
        s(&f.ckpt()),
        "--ref",
        s(&input),
        s(&bin),
        s(&full),
    ]);
    let psnr: f64 = text.trim().strip_prefix("psnr ").unwrap().parse().unwrap();
    assert!(psnr.is_finite());
    let prog = dir.path().join("prog.ppm");
    run_ok(&[
        "decompress",
        "--ckpt",
        s(&f.ckpt()),
        "--mode",
        "progressive:4",
        s(&bin),
        s(&prog),
    ]);
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&prog).unwrap());
    for mode in ["loo:2", "disjoint:3", "progressive:1"] {
        run_ok(&[
            "decompress",
            "--ckpt",
            s(&f.ckpt()),
            "--mode",
            mode,
            s(&bin),
            s(&dir.path().join("m.ppm")),
        ]);
    }
    let bad = qarv(&[
        "decompress",
        "--ckpt",
        s(&f.ckpt()),
        "--mode",
        "loo:9",
        s(&bin),
        s(&dir.path().join("m.ppm")),
    ]);
    assert!(!bad.status.success());
}

#[test]
fn out_of_range_lambda_is_rejected() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = qarv(&[
        "compress",
        "--ckpt",
        s(&f.ckpt()),
        "--lambda",
        "1e9",
        s(&f.data().join("img_00000.ppm")),
        s(&dir.path().join("a.qarv")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
    assert!(!dir.path().join("a.qarv").exists());
}

#[test]
fn sweep_writes_per_image_and_mean_rows() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let two = dir.path().join("two.csv");
    run_ok(&[
        "sweep",
        "--ckpt",
        s(&f.ckpt()),
        "--data-dir",
        s(&f.data()),
        "--lambdas",
        "16,2048",
        "--out",
        s(&two),
    ]);
    let rows = std::fs::read_to_string(&two).unwrap().lines().count() - 1;
    assert_eq!(rows, 2 * 16 + 2);
}

fn write_curve(path: &Path, scale: f64) {
    let mut text = String::from("image_id,lambda,bpp,psnr\n");
    for (lambda, bpp, psnr) in [
        (16, 0.12, 27.1),
        (64, 0.31, 29.8),
        (256, 0.74, 32.6),
        (2048, 1.9, 36.2),
    ] {
        text += &format!("__mean__,{lambda},{},{psnr}\n", bpp * scale);
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn bdrate_of_known_curves() {
    let dir = tempfile::tempdir().unwrap();
    let (anchor, doubled) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_curve(&anchor, 1.0);
    write_curve(&doubled, 2.0);
    assert_eq!(run_ok(&["bdrate", s(&anchor), s(&anchor)]).trim(), "0.00");
    assert_eq!(
        run_ok(&["bdrate", s(&anchor), s(&doubled)]).trim(),
        "100.00"
    );
    assert!(
        !qarv(&["bdrate", s(&anchor), s(&dir.path().join("missing.csv"))])
            .status
            .success()
    );
}

#[test]
fn ablation_emits_one_row_per_variant() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("norm.csv");
    std::fs::write(dir.path().join("cfg.json"), r#"{"batch_size": 2}"#).unwrap();
    let text = run_ok(&[
        "ablate",
        "--config",
        s(&dir.path().join("cfg.json")),
        "--axis",
        "norm-type",
        "--data-dir",
        s(&f.data()),
        "--iterations",
        "3",
        "--eval-count",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(text.lines().count(), 4);
    let table = std::fs::read_to_string(&out).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(
        table.lines().skip(1).all(|l| l.ends_with("true")),
        "{table}"
    );
}
