use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use speechformer::formats::read_features;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speechformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn tsv_value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
}

#[test]
fn schedule_defaults_to_ten_ms() {
    let a = run(&["schedule"]);
    let b = run(&["schedule", "--hop1-ms", "10"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert_eq!(tsv_value(&text, "tw_f"), "5");
    assert_eq!(tsv_value(&text, "m1"), "5");
    assert_eq!(tsv_value(&text, "hop2_ms"), "50");
}

#[test]
fn schedule_rejects_zero_hop() {
    let o = run(&["schedule", "--hop1-ms", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn analyze_reports_baseline_flops_and_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let base = write_config(dir.path(), "base.conf", "variant = baseline\n");
    let sf = write_config(
        dir.path(),
        "sf.conf",
        "# small variant\nvariant = speechformer-s\n",
    );

    let o = run(&[
        "analyze",
        "--config",
        &base,
        "--input-len",
        "651",
        "--dim",
        "128",
        "--format",
        "tsv",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(tsv_value(&stdout(&o), "flops"), "1.94G");

    let o = run(&[
        "analyze",
        "--config",
        &sf,
        "--baseline-config",
        &base,
        "--input-len",
        "651",
        "--dim",
        "512",
        "--format",
        "tsv",
    ]);
    assert!(o.status.success());
    let ratio: f64 = tsv_value(&stdout(&o), "flops_ratio").parse().unwrap();
    assert!((ratio - 0.148).abs() < 0.002, "{ratio}");

    let table = run(&[
        "analyze",
        "--config",
        &sf,
        "--input-len",
        "651",
        "--dim",
        "512",
    ]);
    assert!(table.status.success());
    assert!(stdout(&table).contains("2.28G"));
}

#[test]
fn analyze_missing_config_is_a_usage_error() {
    let o = run(&[
        "analyze",
        "--config",
        "/nonexistent/x.conf",
        "--input-len",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.conf", "colour = blue\n");
    let o = run(&["analyze", "--config", &cfg, "--input-len", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn synth_is_deterministic_and_readable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.fmat");
    let b = dir.path().join("b.fmat");
    for p in [&a, &b] {
        let o = run(&[
            "synth",
            "--rows",
            "651",
            "--cols",
            "512",
            "--seed",
            "7",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(&bytes[..4], b"FMAT");
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 651);
    assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 512);
    let m = read_features(&mut bytes.as_slice()).unwrap();
    assert_eq!(m.shape(), (651, 512));
}

#[test]
fn synth_rejects_zero_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.fmat");
    let o = run(&[
        "synth",
        "--rows",
        "0",
        "--cols",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn forward_prints_shape_chain_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sf.conf",
        "variant = speechformer-s\nd_model = 32\nnum_heads = 4\nseed = 3\n",
    );
    let feats = dir.path().join("f.fmat");
    run(&[
        "synth",
        "--rows",
        "651",
        "--cols",
        "32",
        "--seed",
        "7",
        "--out",
        feats.to_str().unwrap(),
    ]);

    let args = [
        "forward",
        "--config",
        &cfg,
        "--features",
        feats.to_str().unwrap(),
    ];
    let a = run(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let text = stdout(&a);
    let lengths: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("stage"))
        .map(|l| l.split('\t').nth(2).unwrap())
        .collect();
    assert_eq!(lengths, ["651", "131", "27", "7"]);
    assert_eq!(tsv_value(&text, "logits").split('\t').count(), 4);
    assert_eq!(run(&args).stdout, a.stdout);

    // A different seed gives different logits; the same seed via a
    // checkpoint gives the same ones.
    let other = run(&[
        "forward",
        "--config",
        &cfg,
        "--features",
        feats.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert_ne!(other.stdout, a.stdout);
    let ckpt = dir.path().join("w.sfwt");
    assert!(
        run(&["init", "--config", &cfg, "--out", ckpt.to_str().unwrap()])
            .status
            .success()
    );
    let loaded = run(&[
        "forward",
        "--config",
        &cfg,
        "--features",
        feats.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(loaded.stdout, a.stdout);
}

#[test]
fn forward_rejects_width_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sf.conf", "d_model = 16\nnum_heads = 4\n");
    let feats = dir.path().join("f.fmat");
    run(&[
        "synth",
        "--rows",
        "20",
        "--cols",
        "12",
        "--out",
        feats.to_str().unwrap(),
    ]);
    let o = run(&[
        "forward",
        "--config",
        &cfg,
        "--features",
        feats.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("20x12"));
}

#[test]
fn oracle_check_passes() {
    let o = run(&["check", "--suite", "oracle", "--seed", "5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(
        text.lines().filter(|l| l.starts_with("oracle\t")).count(),
        50
    );
    assert!(text
        .lines()
        .filter(|l| l.starts_with("oracle\t"))
        .all(|l| l.ends_with("pass")));
}

#[test]
fn grad_check_passes() {
    let o = run(&["check", "--suite", "grad", "--seed", "1"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    assert!(text.contains("transformer_block."));
    assert!(text.contains("merging_block."));
    assert!(text.ends_with("all checks passed\n"));
}

#[test]
fn unknown_suite_is_a_usage_error() {
    assert_eq!(
        run(&["check", "--suite", "everything"]).status.code(),
        Some(2)
    );
}
