use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn didb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_didb"))
        .args(args)
        .env("DIDB_THREADS", "1")
        .output()
        .expect("spawn didb")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {line:?}"))
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = didb(&["eval", "--ckpt", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("does not exist"), "{err}");
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "epochs=1\nteacher_epochs=1\nbatch_size=16\ndepth=1\n").unwrap();
    let out = dir.path().join("out");
    let data = "synthetic:120:3";
    let o = didb(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("kind=epoch epoch=1"), "{text}");
    assert!(text.contains("kind=ops"), "{text}");
    let final_acc: f64 = field(text.lines().last().unwrap(), "test_acc")
        .parse()
        .unwrap();
    for f in ["model.ckpt", "teacher.ckpt", "report.txt"] {
        assert!(Path::new(&out).join(f).is_file(), "{f}");
    }

    let ckpt = out.join("model.ckpt");
    let o = didb(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    assert_eq!(field(line.trim(), "samples"), "24");
    let top1: f64 = field(line.trim(), "top1").parse().unwrap();
    assert!((top1 - final_acc).abs() < 1e-3, "{top1} vs {final_acc}");

    // wrong image size for this checkpoint
    let o = didb(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        out.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}

#[test]
fn bad_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochz=3\n").unwrap();
    let o = didb(&[
        "bench",
        "--size",
        "8,8,8",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn bench_reports_gemm_and_ops() {
    let o = didb(&["bench", "--size", "64,32,100"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    let gemm = lines.next().unwrap();
    assert_eq!(field(gemm, "agree"), "true");
    assert_eq!(field(gemm, "k"), "100");
    let ops = lines.next().unwrap();
    assert_eq!(field(ops, "bops"), "1656832");
    assert_eq!(field(ops, "flops"), "242314");
    assert!(!didb(&["bench", "--size", "1,2"]).status.success());
}

#[test]
fn gradcheck_filter() {
    let o = didb(&["gradcheck", "--filter", "binarizers"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 6);
    assert!(text.contains("failed=0"));
    assert!(!didb(&["gradcheck", "--filter", "nothing-matches"])
        .status
        .success());
}
