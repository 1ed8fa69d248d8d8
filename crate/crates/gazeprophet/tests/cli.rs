use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use gazeprophet::report::recompute_aggregates;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gazeprophet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn synth_small(dir: &Path) {
    let o = run(&[
        "synth", "--out", dir.to_str().unwrap(), "--scenes", "6", "--seed", "3", "--w", "128", "--h", "64", "--length", "14",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn help_on_every_command() {
    let cases: &[(&str, &[&str])] = &[
        ("synth", &["--out", "--scenes", "--seed", "--w", "--h", "--blobs"]),
        ("train", &["--data", "--out", "--model", "--config"]),
        ("eval", &["--data", "--ckpt", "--report", "--compare"]),
        ("predict", &["--ckpt", "--scene", "--gaze"]),
        ("heatmap", &["--ckpt", "--data", "--grid", "--out"]),
        ("gradcheck", &["--config"]),
    ];
    for (cmd, flags) in cases {
        let o = run(&[cmd, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{cmd}");
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["synth", "--out", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--data", "d"]).status.code(), Some(1));
    let o = run(&["heatmap", "--ckpt", "c", "--data", "d", "--grid", "1x1", "--out", "o"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("2x2"));
}

#[test]
fn synth_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = run(&["synth", "--out", d.path().to_str().unwrap(), "--scenes", "2", "--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(o.stdout.is_empty());
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 4);
    assert_eq!(ta, tb);
}

#[test]
fn train_eval_predict_heatmap() {
    let work = tempfile::tempdir().unwrap();
    let data = work.path().join("data");
    synth_small(&data);
    let d = data.to_str().unwrap();
    let cfg = work.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 5, "batch_size": 4, "split": [0.5, 0.0, 0.5]}}"#).unwrap();
    let full = work.path().join("full.gzp");
    let temporal = work.path().join("temporal.gzp");
    for (m, out, epochs) in [("full", &full, "1"), ("temporal", &temporal, "2")] {
        let o = run(&[
            "train", "--data", d, "--out", out.to_str().unwrap(), "--model", m, "--config", cfg.to_str().unwrap(), "--epochs", epochs,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        // the flag overrides the file
        assert_eq!(v["history"].as_array().unwrap().len(), epochs.parse::<usize>().unwrap());
        assert_eq!(v["test_scenes"], 3);
    }

    let report = work.path().join("report");
    let o = run(&[
        "eval", "--data", d, "--ckpt", full.to_str().unwrap(), "--report", report.to_str().unwrap(), "--compare",
        temporal.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    for f in ["report.json", "per_sample.csv", "heatmap.csv", "heatmap.ppm"] {
        assert!(report.join(f).exists(), "{f}");
    }
    assert_eq!(v["aggregates"]["count"], 3 * 4);
    let p = v["comparison"]["t_test"]["p_two_sided"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert!(v["comparison"]["cohens_d"].is_number());
    let per_sample = std::fs::read_to_string(report.join("per_sample.csv")).unwrap();
    assert!(per_sample.starts_with("idx,scene_id,mse,ang_deg,px_dist,conf,region\n"));
    let recomputed = recompute_aggregates(&report.join("per_sample.csv"), 0.05).unwrap();
    let stored: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    for key in ["mse", "mean_ang_deg", "median_ang_deg", "acc_10px", "acc_20px", "acc_50px", "mean_confidence"] {
        let a = stored["aggregates"][key].as_f64().unwrap();
        let b = serde_json::to_value(&recomputed).unwrap()[key].as_f64().unwrap();
        assert!((a - b).abs() < 1e-9, "{key}");
    }

    let scene = data.join("scenes/scene_0000.ppm");
    let gaze_src = std::fs::read_to_string(data.join("gaze/scene_0000.csv")).unwrap();
    let lines: Vec<&str> = gaze_src.lines().collect();
    let short = work.path().join("short.csv");
    std::fs::write(&short, lines[..10].join("\n") + "\n").unwrap();
    let o = run(&["predict", "--ckpt", full.to_str().unwrap(), "--scene", scene.to_str().unwrap(), "--gaze", short.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("window of 10"), "{}", stderr(&o));
    assert!(o.stdout.is_empty());

    let long = work.path().join("long.csv");
    std::fs::write(&long, lines[..13].join("\n") + "\n").unwrap();
    let last_ten = work.path().join("last.csv");
    std::fs::write(&last_ten, [&lines[..1], &lines[3..13]].concat().join("\n") + "\n").unwrap();
    let outs: Vec<String> = [&long, &last_ten]
        .iter()
        .map(|g| {
            let o = run(&["predict", "--ckpt", full.to_str().unwrap(), "--scene", scene.to_str().unwrap(), "--gaze", g.to_str().unwrap()]);
            assert!(o.status.success(), "{}", stderr(&o));
            stdout(&o)
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let vals: Vec<f64> = outs[0].split_whitespace().map(|s| s.parse().unwrap()).collect();
    assert_eq!(vals.len(), 3);
    assert!(vals.iter().all(|v| *v > 0.0 && *v < 1.0), "{vals:?}");

    let heat = work.path().join("heat");
    let o = run(&[
        "heatmap", "--ckpt", full.to_str().unwrap(), "--data", d, "--grid", "3x4", "--out", heat.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(heat.join("heatmap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().all(|l| l.split(',').count() == 4));
}

#[test]
fn data_errors_exit_2() {
    let work = tempfile::tempdir().unwrap();
    let missing = work.path().join("nope.gzp");
    let o = run(&["eval", "--data", ".", "--ckpt", missing.to_str().unwrap(), "--report", "r"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.gzp"));
    let bad = work.path().join("bad.gzp");
    std::fs::write(&bad, b"GZPX\x01\0\0\0").unwrap();
    let o = run(&["predict", "--ckpt", bad.to_str().unwrap(), "--scene", "s.ppm", "--gaze", "g.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn gradcheck_at_desk_config() {
    let o = run(&["gradcheck", "--per-group", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!(v <= 1e-4, "{v}");
}
