//! The `tpo` binary end to end on a miniature configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "data": {"n": 24},
  "model": {"hidden": [16]},
  "train": {"batch_size": 4, "eval_every": 3},
  "sampler": {"steps": 4},
  "eval": {"select_prompts": 2, "prompts": 6, "triplets": 6}
}"#;

fn tpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpo")).args(args).output().unwrap()
}

fn tpo_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpo"))
        .args(args)
        .env(key, value)
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    /// Run a subcommand with the tiny config and `--out <name>`.
    fn run(&self, sub: &str, out: &str, extra: &[&str]) -> Output {
        let (config, out) = (self.s("tiny.json"), self.s(out));
        let mut args = vec![sub, "--config", &config, "--out", &out];
        args.extend_from_slice(extra);
        tpo(&args)
    }

    /// Data, triplets, a short SFT run and a short TDPO run.
    fn pipeline(&self, prefix: &str, workers: &str) {
        let p = |n: &str| self.s(&format!("{prefix}{n}"));
        ok(self.run("gen-data", &format!("{prefix}data"), &["--workers", workers]));
        ok(self.run(
            "perturb",
            &format!("{prefix}trip"),
            &["--data", &p("data"), "--workers", workers],
        ));
        ok(self.run(
            "train-sft",
            &format!("{prefix}sft"),
            &["--data", &p("data"), "--steps", "6", "--workers", workers],
        ));
        let sft = p("sft/last.ckpt");
        ok(self.run(
            "train-align",
            &format!("{prefix}tdpo"),
            &[
                "--stage",
                "tdpo",
                "--ref",
                &sft,
                "--data",
                &p("data"),
                "--triplets",
                &p("trip"),
                "--steps",
                "3",
                "--workers",
                workers,
            ],
        ));
        let tdpo = p("tdpo/last.ckpt");
        ok(self.run(
            "eval-winrate",
            &format!("{prefix}win"),
            &["--a", &tdpo, "--b", &sft, "--workers", workers],
        ));
        ok(self.run(
            "eval-ips",
            &format!("{prefix}ips"),
            &["--ckpt", &tdpo, "--workers", workers],
        ));
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_reruns_byte_identically() {
    let w = Work::new();
    ok(w.run("gen-data", "a", &["--seed", "3"]));
    ok(w.run("gen-data", "b", &["--seed", "3"]));
    ok(w.run("gen-data", "c", &["--seed", "4"]));
    let (a, b, c) = (files(&w.path("a")), files(&w.path("b")), files(&w.path("c")));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let names: Vec<_> = a.iter().map(|(p, _)| p.to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["config.json", "images.f32", "meta.jsonl"]);
}

#[test]
fn flag_beats_config_beats_default() {
    let w = Work::new();
    ok(w.run("gen-data", "flag", &["--n", "5"]));
    assert_eq!(json(&w.path("flag/config.json"))["data"]["n"], 5);
    ok(w.run("gen-data", "file", &[]));
    let cfg = json(&w.path("file/config.json"));
    assert_eq!(cfg["data"]["n"], 24);
    assert_eq!(cfg["data"]["seed"], 0);
    assert_eq!(cfg["sampler"]["guidance_scale"], 7.5);
    let out = w.s("bare");
    ok(tpo(&["gen-data", "--n", "2", "--out", &out]));
    assert_eq!(
        json(&w.path("bare/config.json"))["model"]["hidden"],
        serde_json::json!([256, 256])
    );
}

#[test]
fn train_align_without_reference_names_the_flag() {
    let w = Work::new();
    ok(w.run("gen-data", "data", &[]));
    let out = w.run("train-align", "x", &["--stage", "tdpo", "--data", &w.s("data")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--ref"), "{}", stderr(&out));
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let w = Work::new();
    std::fs::write(w.path("bad.json"), r#"{"train": {"stepz": 1}}"#).unwrap();
    let (bad, out) = (w.s("bad.json"), w.s("o"));
    let r = tpo(&["gen-data", "--config", &bad, "--out", &out]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("stepz"));

    let r = tpo(&["gen-data", "--n", "2"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("--out"));

    let r = w.run("perturb", "p", &["--data", &w.s("missing")]);
    assert_eq!(r.status.code(), Some(3), "{}", stderr(&r));

    ok(w.run("gen-data", "data", &[]));
    std::fs::write(w.path("data/meta.jsonl"), "{not json}\n").unwrap();
    let r = w.run("perturb", "p", &["--data", &w.s("data")]);
    assert_eq!(r.status.code(), Some(3), "{}", stderr(&r));

    let r = w.run("perturb", "p", &["--data", &w.s("data"), "--principles", "colour"]);
    assert_eq!(r.status.code(), Some(2));
    let r = w.run("train-align", "x", &["--stage", "sft", "--ref", "r", "--data", "d"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn pipeline_is_independent_of_worker_count() {
    let w = Work::new();
    w.pipeline("one_", "1");
    w.pipeline("four_", "4");
    for name in ["data", "trip", "sft", "tdpo", "win", "ips"] {
        let a = files(&w.path(&format!("one_{name}")));
        let b = files(&w.path(&format!("four_{name}")));
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs");
    }
    let win = json(&w.path("one_win/winrate.json"));
    let rate = win["aggregates"]["win_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate), "{win}");
    assert!(w.path("one_sft/step_000003.ckpt").exists());
    assert!(w.path("one_sft/run_log.jsonl").exists());
}

#[test]
fn report_writes_summary_and_correlation() {
    let w = Work::new();
    w.pipeline("", "1");
    let labelled: Vec<String> = [
        ("sft3", "sft/step_000003.ckpt"),
        ("sft6", "sft/last.ckpt"),
        ("tdpo", "tdpo/last.ckpt"),
    ]
    .iter()
    .map(|(l, p)| format!("{l}={}", w.s(p)))
    .collect();
    let mut args: Vec<&str> = Vec::new();
    for l in &labelled {
        args.extend(["--ckpt", l.as_str()]);
    }
    args.extend(["--baseline", "sft6"]);
    ok(w.run("report", "rep", &args));
    let summary = std::fs::read_to_string(w.path("rep/summary.md")).unwrap();
    assert!(summary.contains("tdpo") && summary.contains("sft6"));
    assert!(w.path("rep/correlation.json").exists());

    let r = w.run("report", "rep2", &["--ckpt", &labelled[0], "--baseline", "nope"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn strict_mode_is_read_from_the_environment() {
    let w = Work::new();
    ok(w.run("gen-data", "data", &[]));
    let (config, out, data) = (w.s("tiny.json"), w.s("sft"), w.s("data"));
    let args = [
        "train-sft",
        "--config",
        &config,
        "--out",
        &out,
        "--data",
        &data,
        "--steps",
        "2",
    ];
    ok(tpo_env(&args, "TPO_STRICT", "1"));
    ok(tpo_env(&args, "TPO_STRICT", "0"));
}

#[test]
fn sample_writes_images_for_given_prompts() {
    let w = Work::new();
    ok(w.run("gen-data", "data", &[]));
    ok(w.run("train-sft", "sft", &["--data", &w.s("data"), "--steps", "1"]));
    let meta = std::fs::read_to_string(w.path("data/meta.jsonl")).unwrap();
    let caption = |line: &str| json_line(line)["caption_tokens"].to_string();
    let prompts: String = meta.lines().take(3).map(|l| caption(l) + "\n").collect();
    std::fs::write(w.path("prompts.jsonl"), prompts).unwrap();
    ok(w.run(
        "sample",
        "s",
        &["--ckpt", &w.s("sft/last.ckpt"), "--prompts", &w.s("prompts.jsonl")],
    ));
    let sampled = tpo_core::scenegen::Dataset::load(&w.path("s")).unwrap();
    assert_eq!(sampled.len(), 3);
    let given = tpo_core::scenegen::Dataset::load(&w.path("data")).unwrap();
    assert_eq!(sampled.records[..], given.records[..3]);

    std::fs::write(w.path("bad.jsonl"), "[\"circle\"]\n").unwrap();
    let r = w.run(
        "sample",
        "s2",
        &["--ckpt", &w.s("sft/last.ckpt"), "--prompts", &w.s("bad.jsonl")],
    );
    assert_eq!(r.status.code(), Some(3), "{}", stderr(&r));
}

fn json_line(line: &str) -> serde_json::Value {
    serde_json::from_str(line).unwrap()
}
