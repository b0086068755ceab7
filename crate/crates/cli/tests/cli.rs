use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gald::checkpoint::save_checkpoint;
use gald::config::GaldConfig;
use gald::digest::dir_digest;
use gald::nn::LayerParams;
use gald::segnet::init_model;
use gald::synth::load_dataset;
use serde_json::Value;

fn gald(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gald"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("stdout is not json ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, n: usize, seed: u64) -> Output {
    gald(&[
        "gen-data",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(dir),
    ])
}

fn small_config(dir: &Path, arrangement: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{arrangement}.json"));
    let cfg = format!(r#"{{"arrangement": "{arrangement}", "train": {{"max_iter": 3, "batch_size": 2, "seed": 5}}}}"#);
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let oa = gen(&a, 6, 42);
    let ob = gen(&b, 6, 42);
    assert!(oa.status.success());
    assert_eq!(dir_digest(&a).unwrap(), dir_digest(&b).unwrap());
    assert_eq!(json(&oa)["digest"], json(&ob)["digest"]);
}

#[test]
fn gen_data_zero_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gen(&tmp.path().join("d"), 0, 1);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_summary_shares_match_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    let summary = json(&gen(&dir, 5, 3));
    let (_, samples) = load_dataset(&dir).unwrap();
    let mut counts = [0usize; 3];
    for smp in &samples {
        for &l in &smp.label {
            counts[l as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    for c in 0..3 {
        let share = summary["class_shares"][c].as_f64().unwrap();
        assert_eq!(share, counts[c] as f64 / total as f64);
    }
}

#[test]
fn gradcheck_filter_and_fault() {
    let out = gald(&["gradcheck", "--module", "cgnl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    let names: Vec<&str> = report["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["name"].as_str().unwrap())
        .collect();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| n.split('/').any(|p| p == "cgnl")));

    let out = gald(&["gradcheck", "--module", "op", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("faulty_square"));
}

#[test]
fn gradcheck_default_config_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, "{}").unwrap();
    let out = gald(&["gradcheck", "--config", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["pass"], Value::Bool(true));
}

#[test]
fn train_eval_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, 4, 7).status.success());
    let cfg = small_config(tmp.path(), "gald");
    let run = |name: &str| {
        let out_dir = tmp.path().join(name);
        let out = gald(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let r1 = run("r1");
    let r2 = run("r2");

    let log = fs::read_to_string(r1.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for (i, line) in log.lines().enumerate() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["iter"], i);
        assert!(v["lr"].is_f64() && v["loss"].is_f64());
    }
    assert_eq!(log, fs::read_to_string(r2.join("metrics.jsonl")).unwrap());
    assert_eq!(
        dir_digest(&r1.join("final.ckpt")).unwrap(),
        dir_digest(&r2.join("final.ckpt")).unwrap()
    );

    // the echo spells out every default and is itself a valid config
    let echo = fs::read_to_string(r1.join("config.json")).unwrap();
    for key in [
        "base_lr",
        "keep_fraction",
        "min_kept",
        "downsample_input",
        "widths",
        "kernel",
        "bins",
    ] {
        assert!(echo.contains(&format!("\"{key}\"")), "missing {key}");
    }
    let back = GaldConfig::from_json(&echo).unwrap();
    assert_eq!(back.to_json(), echo);

    let ckpt = r1.join("final.ckpt");
    let eval = |config: &Path| gald(&["eval", "--config", s(config), "--ckpt", s(&ckpt), "--data", s(&data)]);
    let e1 = eval(&cfg);
    let e2 = eval(&cfg);
    assert!(e1.status.success(), "{}", String::from_utf8_lossy(&e1.stderr));
    assert_eq!(e1.stdout, e2.stdout);
    let report = json(&e1);
    let total: u64 = report["confusion"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .sum();
    assert_eq!(total, 4 * 64 * 64);

    let other = small_config(tmp.path(), "ga_only");
    assert_eq!(eval(&other).status.code(), Some(1));
}

#[test]
fn viz_mask_of_zero_ld_is_grey() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, 1, 11).status.success());
    let cfg_path = small_config(tmp.path(), "gald");
    let cfg = GaldConfig::load(&cfg_path).unwrap();
    let mut params = LayerParams::new(3);
    init_model(&cfg, &mut params, 64, 64).unwrap();
    assert!(params.zero_prefix("ld.") > 0);
    let ckpt = tmp.path().join("zero_ld.ckpt");
    save_checkpoint(&ckpt, &params, &cfg).unwrap();

    let out_dir = tmp.path().join("viz");
    let image = data.join("0000.img.gtf");
    let out = gald(&[
        "viz-mask",
        "--config",
        s(&cfg_path),
        "--ckpt",
        s(&ckpt),
        "--input",
        s(&image),
        "--out",
        s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mask = fs::read(out_dir.join("mask.pgm")).unwrap();
    let header = b"P5\n16 16\n255\n";
    assert_eq!(&mask[..header.len()], header);
    assert_eq!(mask.len(), header.len() + 256);
    assert!(mask[header.len()..].iter().all(|&v| v == 128));

    let pred = fs::read(out_dir.join("prediction.pgm")).unwrap();
    let header = b"P5\n64 64\n255\n";
    assert_eq!(&pred[..header.len()], header);
    assert!(pred[header.len()..].iter().all(|v| [0, 127, 255].contains(v)));

    let ga_only = small_config(tmp.path(), "ga_only");
    let out = gald(&[
        "viz-mask",
        "--config",
        s(&ga_only),
        "--ckpt",
        s(&ckpt),
        "--input",
        s(&image),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ga_only"));
}
