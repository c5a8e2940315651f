use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_CONFIG: &str = r#"{
  "model": {
    "frames": 2,
    "extractor_channels": [4, 4, 8],
    "d_model": 16,
    "heads": 2,
    "layers": 1,
    "ffn_hidden": 32,
    "heatmap_channels": 4,
    "lifting_channels": [4, 8],
    "lifting_hidden": 32
  },
  "train": { "steps": 10, "batch_size": 2, "eval_interval": 2 }
}"#;

fn egostan(args: &[&str]) -> Output {
    egostan_env(args, None)
}

fn egostan_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_egostan"));
    cmd.args(args).env_remove("EGOSTAN_SEED");
    if let Some(s) = seed_env {
        cmd.env("EGOSTAN_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_slice(&read(path)).unwrap()
}

/// Small dataset and config shared by the training tests.
fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let out = egostan(&["generate", "--out", p(&data), "--sequences", "9", "--seed", "3", "--frames-per-sequence", "4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let config = root.join("small.json");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    (data, config)
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> =
        std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

/// Help text of one flag; clap may put it on the flag's line or below it.
fn flag_help(help: &str, flag: &str) -> String {
    let mut lines = help.lines().skip_while(|l| !l.trim_start().starts_with(&format!("{flag} ")));
    let mut block = lines.next().unwrap_or_else(|| panic!("{flag} missing")).to_string();
    let is_flag = |l: &str| {
        let t = l.trim_start();
        t.starts_with("--") || (t.starts_with('-') && t.chars().nth(2) == Some(','))
    };
    for l in lines.take_while(|l| !is_flag(l)) {
        block.push_str(l);
    }
    block
}

#[test]
fn help_lists_flag_defaults_for_every_subcommand() {
    for (sub, flags) in [
        ("generate", &["--sequences", "--actions", "--frames-per-sequence", "--seed"][..]),
        ("train", &["--variant", "--frames", "--steps", "--batch-size", "--lr", "--eval-interval", "--align-to", "--seed"]),
        ("eval", &["--align-to", "--predictor"]),
        ("gradcheck", &["--tolerance", "--step", "--seed"]),
    ] {
        let out = egostan(&[sub, "--help"]);
        assert_eq!(code(&out), 0);
        let text = stdout(&out);
        for flag in flags {
            assert!(flag_help(&text, flag).contains("[default:"), "{sub} {flag}:\n{text}");
        }
    }
    let out = egostan(&["gradcheck", "--help"]);
    assert!(stdout(&out).contains("[default: 0.0001]"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&egostan(&[])), 2);
    assert_eq!(code(&egostan(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = egostan(&["train", "--out", p(dir.path()), "--data", p(dir.path()), "--variant", "mean"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("fmt, slice, avg"), "{}", stderr(&out));
    let out = egostan(&["train", "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--data"));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"stepz": 3}}"#).unwrap();
    let out = egostan(&["gradcheck", "--config", p(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("stepz"));
}

#[test]
fn generate_is_reproducible_and_names_valid_actions() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = egostan(&["generate", "--out", p(d), "--sequences", "64", "--seed", "7"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let manifest = json(a.join("manifest.json"));
    assert_eq!(manifest["sequences"].as_array().unwrap().len(), 64);
    assert_eq!(manifest["seed"], 7);
    assert_eq!(files_in(&a), files_in(&b));
    for f in files_in(&a) {
        assert_eq!(read(a.join(&f)), read(b.join(&f)), "{f}");
    }
    assert_eq!(json(a.join("run_config.json"))["config"]["seed"], 7);

    let out = egostan(&["generate", "--out", p(&dir.path().join("c")), "--actions", "Walk,Dance"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("Dance") && err.contains("Game, Gesticulate, Greet, LowerStretch"), "{err}");
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, args: &[&str], env: Option<&str>| {
        let out_dir = dir.path().join(name);
        let mut all = vec!["generate", "--out", p(&out_dir), "--sequences", "3", "--frames-per-sequence", "2"];
        all.extend_from_slice(args);
        assert_eq!(code(&egostan_env(&all, env)), 0);
        json(out_dir.join("manifest.json"))["seed"].as_u64().unwrap()
    };
    assert_eq!(run("none", &[], None), 0);
    assert_eq!(run("env", &[], Some("11")), 11);
    assert_eq!(run("flag", &["--seed", "5"], Some("11")), 5);
    let config = dir.path().join("seeds.json");
    std::fs::write(&config, r#"{"seeds": [4]}"#).unwrap();
    assert_eq!(run("config", &["--config", p(&config)], Some("11")), 4);
    let out = egostan_env(&["generate", "--out", p(&dir.path().join("x"))], Some("seven"));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("EGOSTAN_SEED"));
}

#[test]
fn train_writes_per_seed_runs_and_a_seed_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let out_dir = dir.path().join("run");
    let out = egostan(&[
        "train", "--data", p(&data), "--config", p(&config), "--out", p(&out_dir), "--seed", "1,2,3", "--steps", "4",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let echoed = json(out_dir.join("run_config.json"));
    assert_eq!(echoed["command"], "train");
    assert_eq!(echoed["config"]["train"]["steps"], 4, "flag overrides the config file");
    assert_eq!(echoed["config"]["train"]["batch_size"], 2);
    assert_eq!(echoed["config"]["model"]["d_model"], 16);
    assert_eq!(echoed["config"]["seeds"], serde_json::json!([1, 2, 3]));

    let mut averages = Vec::new();
    for seed in 1..=3 {
        let seed_dir = out_dir.join(format!("seed_{seed}"));
        assert_eq!(files_in(&seed_dir), [
            "final.ckpt",
            "loss.csv",
            "report.csv",
            "report.json",
            "run_config.json",
            "step_000002.ckpt",
            "step_000004.ckpt"
        ]);
        let log = String::from_utf8(read(seed_dir.join("loss.csv"))).unwrap();
        let mut lines = log.lines();
        assert_eq!(lines.next(), Some("step,l2d,l_l2,l_theta,l_l1,total"));
        let steps: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(steps, [1, 2, 3, 4]);
        assert_eq!(json(seed_dir.join("run_config.json"))["config"]["train"]["seed"], seed);
        let report = json(seed_dir.join("report.json"));
        assert_eq!(report["approach"], "fmt-T2");
        assert!(report["param_count"].as_u64().unwrap() > 0);
        let avg = report["rows"].as_array().unwrap().iter().find(|r| r["region"] == "average").unwrap();
        averages.push(avg["mpjpe"][9].as_f64().unwrap());
    }

    let summary = json(out_dir.join("summary.json"));
    assert_eq!(summary["seeds"], serde_json::json!([1, 2, 3]));
    let avg = summary["metrics"].as_array().unwrap().iter().find(|m| m["region"] == "average").unwrap();
    let mean = averages.iter().sum::<f64>() / 3.0;
    let std = (averages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((avg["mean"].as_f64().unwrap() - mean).abs() <= 1e-9 * mean);
    assert!((avg["std"].as_f64().unwrap() - std).abs() <= 1e-9 * mean.max(1.0));
    assert!(std > 0.0);
}

#[test]
fn identical_invocations_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = egostan(&["train", "--data", p(&data), "--config", p(&config), "--out", p(out_dir), "--steps", "3"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(read(a.join("summary.json")), read(b.join("summary.json")));
    for f in files_in(&a.join("seed_0")) {
        if f == "run_config.json" {
            continue;
        }
        assert_eq!(read(a.join("seed_0").join(&f)), read(b.join("seed_0").join(&f)), "{f}");
    }
}

#[test]
fn every_variant_trains_and_nan_aborts_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    for variant in ["fmt", "slice", "avg"] {
        let out_dir = dir.path().join(variant);
        let out = egostan(&[
            "train", "--data", p(&data), "--config", p(&config), "--out", p(&out_dir), "--variant", variant, "--steps", "1",
        ]);
        assert_eq!(code(&out), 0, "{variant}: {}", stderr(&out));
        assert_eq!(json(out_dir.join("seed_0/report.json"))["approach"], format!("{variant}-T2"));
    }
    let out_dir = dir.path().join("nan");
    let out = egostan(&[
        "train", "--data", p(&data), "--config", p(&config), "--out", p(&out_dir), "--lr", "1e300", "--steps", "10",
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite value at step"), "{}", stderr(&out));
}

#[test]
fn eval_reports_tables_and_shape_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let run = dir.path().join("run");
    let out = egostan(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&run), "--steps", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = run.join("seed_0/final.ckpt");

    let gt = dir.path().join("gt");
    let out = egostan(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&gt), "--predictor", "ground-truth"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = String::from_utf8(read(gt.join("report.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "approach,region,Game,Gesticulate,Greet,LowerStretch,Pat,React,Talk,UpperStretch,Walk,All"
    );
    for region in ["upper", "lower", "average"] {
        assert_eq!(lines.next().unwrap(), format!("fmt-T2,{region},0,0,0,0,0,0,0,0,0,0"));
    }
    let report = json(gt.join("report.json"));
    assert!(report["param_count"].as_u64().unwrap() > 0);
    assert_eq!(json(gt.join("run_config.json"))["config"]["predictor"], "ground-truth");

    let model_eval = dir.path().join("model");
    let out = egostan(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&model_eval)]);
    assert_eq!(code(&out), 0);
    assert_eq!(read(model_eval.join("report.json")), read(run.join("seed_0/report.json")));

    let other = dir.path().join("other");
    let coarse = dir.path().join("coarse.json");
    std::fs::write(&coarse, r#"{"synth": {"heatmap_size": [8, 8]}}"#).unwrap();
    let out = egostan(&["generate", "--out", p(&other), "--sequences", "2", "--config", p(&coarse)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = egostan(&["eval", "--checkpoint", p(&ckpt), "--data", p(&other), "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("expected [16, 16, 16], found [8, 8, 16]"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_by_default_and_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let out = egostan(&["gradcheck", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("worst offender: "));
    let written = json(dir.path().join("gradcheck.json"));
    assert_eq!(written["passed"], true);
    assert!(written["checks"].as_array().unwrap().len() > 100);

    let out = egostan(&["gradcheck", "--tolerance", "1e-12"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("exceed tolerance"));

    let out = egostan(&["gradcheck", "--inject-fault", "softmax"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("FAIL primitive/softmax#0"), "{}", stdout(&out));
    assert!(stderr(&out).contains("primitive/softmax"));
    assert!(!stdout(&out).contains("FAIL primitive/gelu"));

    assert_eq!(code(&egostan(&["gradcheck", "--inject-fault", "nope"])), 2);
}

#[test]
fn report_compares_against_a_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    for (name, variant, frames) in [("fmt", "fmt", "2"), ("base", "slice", "1")] {
        let out = egostan(&[
            "train", "--data", p(&data), "--config", p(&config), "--out", p(&dir.path().join(name)), "--variant", variant,
            "--frames", frames, "--steps", "2", "--align-to", "2",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let fmt = dir.path().join("fmt/seed_0/report.json");
    let base = dir.path().join("base/seed_0/report.json");
    let out_dir = dir.path().join("report");
    let out = egostan(&["report", "--report", p(&fmt), "--baseline", p(&base), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("fmt-T2 vs slice-T1: occluded delta"));

    let table = String::from_utf8(read(out_dir.join("table.csv"))).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 5);
    let cmp = String::from_utf8(read(out_dir.join("comparison_fmt-T2_vs_slice-T1.csv"))).unwrap();
    assert_eq!(cmp.lines().next().unwrap(), "region,column,fmt-T2,slice-T1,delta");
    for line in cmp.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if let (Ok(c), Ok(b), Ok(d)) = (cells[2].parse::<f64>(), cells[3].parse::<f64>(), cells[4].parse::<f64>()) {
            assert!((c - b - d).abs() <= 1e-9 * c.abs().max(1.0), "{line}");
        }
    }
    let reference = String::from_utf8(read(out_dir.join("reference.csv"))).unwrap();
    assert!(reference.contains("Ego-STAN FMT,average,33.1"));

    let out = egostan(&["report", "--out", p(&out_dir)]);
    assert_eq!(code(&out), 2);
}
