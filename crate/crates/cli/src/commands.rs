use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use egostan::gradsuite::{run_suite, CheckOutcome, SuiteOptions};
use egostan::model::{EgoStan, ModelConfig};
use egostan::report::{reference_csv, Comparison, SeedSummary};
use egostan::synth::{generate_dataset, Action, Dataset};
use egostan::train::{
    check_compatible, evaluate, evaluate_with, train_loop_with, write_json, EvalReport, TrainConfig, TrainSet, ALL_COLUMN,
};
use serde::Serialize;

use crate::args::{Command, EvalArgs, GenerateArgs, GradcheckArgs, Predictor, ReportArgs, TrainArgs};
use crate::config::{echo, RunConfig};
use crate::error::{create_dir, CliError};

pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

pub fn run(command: Command, matches: &ArgMatches) -> Result<(), CliError> {
    let given = |id: &str| matches.value_source(id) == Some(ValueSource::CommandLine);
    match command {
        Command::Generate(a) => generate(a, &given),
        Command::Train(a) => train(a, &given),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(path.display().to_string(), e))
}

fn parse_actions(names: &[String]) -> Result<Vec<Action>, CliError> {
    if names.len() == 1 && names[0].eq_ignore_ascii_case("all") {
        return Ok(Action::ALL.to_vec());
    }
    Ok(names.iter().map(|n| n.trim().parse()).collect::<Result<_, _>>()?)
}

#[derive(Serialize)]
struct GenerateEcho<'a> {
    synth: &'a egostan::synth::SynthConfig,
    sequences: usize,
    actions: Vec<&'static str>,
    seed: u64,
}

fn generate(args: GenerateArgs, given: &dyn Fn(&str) -> bool) -> Result<(), CliError> {
    let mut rc = RunConfig::load(args.config.as_deref())?;
    if given("frames_per_sequence") {
        rc.synth.frames_per_sequence = args.frames_per_sequence;
    }
    let actions = parse_actions(&args.actions)?;
    let seed = rc.single_seed(args.seed)?;
    rc.synth.validate()?;
    let manifest = generate_dataset(&rc.synth, args.sequences, &actions, seed, &args.out)?;
    echo(&args.out, "generate", &GenerateEcho {
        synth: &rc.synth,
        sequences: args.sequences,
        actions: actions.iter().map(|a| a.name()).collect(),
        seed,
    })?;
    let (upper, lower) = manifest.occlusion_rates();
    println!(
        "wrote {} sequences x {} frames to {} (seed {seed})",
        manifest.sequences.len(),
        rc.synth.frames_per_sequence,
        args.out.display()
    );
    println!("occlusion rate: upper body {upper:.4}, lower body {lower:.4}");
    for (action, count) in manifest.action_counts() {
        println!("  {:<13} {count}", action.name());
    }
    Ok(())
}

fn train(args: TrainArgs, given: &dyn Fn(&str) -> bool) -> Result<(), CliError> {
    let mut rc = RunConfig::load(args.config.as_deref())?;
    let mut model_cfg = rc.model.take().unwrap_or_default();
    if given("variant") {
        model_cfg.variant = args.variant.into();
    }
    if given("frames") {
        model_cfg.frames = args.frames;
    }
    let t = &mut rc.train;
    if given("steps") {
        t.steps = args.steps;
    }
    if given("batch_size") {
        t.batch_size = args.batch_size;
    }
    if given("learning_rate") {
        t.adam.learning_rate = args.learning_rate;
    }
    if given("eval_interval") {
        t.eval_interval = args.eval_interval;
    }
    if args.grad_clip.is_some() {
        t.grad_clip = args.grad_clip;
    }
    if given("align_to") {
        rc.align_to = args.align_to;
    }
    rc.data = args.data.or(rc.data);
    rc.eval_data = args.eval_data.or(rc.eval_data);
    rc.resolve_seeds(&args.seeds)?;
    let mut unique = rc.seeds.clone();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != rc.seeds.len() {
        return Err(CliError::Usage(format!("duplicate seeds in {:?}", rc.seeds)));
    }
    let data_path = rc.data.clone().ok_or_else(|| CliError::Usage("--data (or config `data`) is required".into()))?;
    model_cfg.validate()?;
    rc.train.validate()?;
    rc.model = Some(model_cfg.clone());

    let dataset = Dataset::load(&data_path)?;
    let eval_set = match &rc.eval_data {
        Some(p) if *p != data_path => Some(Dataset::load(p)?),
        _ => None,
    };
    let eval_dataset = eval_set.as_ref().unwrap_or(&dataset);
    let probe = EgoStan::new(model_cfg.clone(), 0)?;
    check_compatible(&probe, &dataset)?;
    check_compatible(&probe, eval_dataset)?;
    let windows = TrainSet::new(&dataset, model_cfg.frames, rc.align_to)?;

    create_dir(&args.out)?;
    echo(&args.out, "train", &rc)?;
    let mut reports = Vec::new();
    for &seed in &rc.seeds {
        let dir = args.out.join(format!("seed_{seed}"));
        let cfg = TrainConfig { seed, checkpoint_dir: Some(dir.clone()), ..rc.train.clone() };
        let model = EgoStan::new(model_cfg.clone(), seed)?;
        eprintln!(
            "seed {seed}: training {}-T{} ({} parameters) on {} windows for {} steps",
            model_cfg.variant,
            model_cfg.frames,
            model.param_count(),
            windows.len(),
            cfg.steps
        );
        let steps = cfg.steps;
        let every = cfg.eval_interval;
        let outcome = train_loop_with(model, &windows, &cfg, |row| {
            if row.step % every == 0 || row.step == steps {
                eprintln!("seed {seed} step {}/{steps} total {:.6}", row.step, row.total);
            }
        })?;
        let report = evaluate(&outcome.model, eval_dataset, rc.align_to)?;
        report.write_csv(dir.join(REPORT_CSV))?;
        report.write_json(dir.join(REPORT_JSON))?;
        let seed_rc = RunConfig { seeds: vec![seed], train: cfg, ..rc.clone() };
        echo(&dir, "train", &seed_rc)?;
        println!(
            "seed {seed}: MPJPE average {:.3} mm, occluded {}, visible {}",
            report.average_mpjpe().unwrap_or(f64::NAN),
            fmt_mm(report.occluded_mpjpe()),
            fmt_mm(report.visible_mpjpe())
        );
        reports.push(report);
    }
    let summary = SeedSummary::from_reports(&rc.seeds, &reports)?;
    summary.write_json(args.out.join(SUMMARY_FILE))?;
    for region in ["average", "occluded"] {
        if let Some(m) = summary.metric(region) {
            if let (Some(mean), Some(std)) = (m.mean, m.std) {
                println!("{} {region} over {} seeds: {mean:.3} ± {std:.3} mm", summary.approach, rc.seeds.len());
            }
        }
    }
    Ok(())
}

fn fmt_mm(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3} mm")).unwrap_or_else(|| "n/a".into())
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    align_to: usize,
    predictor: &'static str,
    model: &'a ModelConfig,
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let model = EgoStan::load(&args.checkpoint)?;
    let dataset = Dataset::load(&args.data)?;
    let report = match args.predictor {
        Predictor::Model => evaluate(&model, &dataset, args.align_to)?,
        Predictor::GroundTruth => evaluate_with(&model, &dataset, args.align_to, |s| Ok(s.pose.clone()))?,
    };
    create_dir(&args.out)?;
    report.write_csv(args.out.join(REPORT_CSV))?;
    report.write_json(args.out.join(REPORT_JSON))?;
    echo(&args.out, "eval", &EvalEcho {
        checkpoint: &args.checkpoint,
        data: &args.data,
        align_to: args.align_to,
        predictor: match args.predictor {
            Predictor::Model => "model",
            Predictor::GroundTruth => "ground-truth",
        },
        model: model.config(),
    })?;
    print!("{}", report.to_csv_string()?);
    println!("param_count {}", report.param_count);
    Ok(())
}

#[derive(Serialize)]
struct GradcheckOutput<'a> {
    tolerance: f64,
    step: f64,
    seed: u64,
    fault: Option<&'a str>,
    model: &'a ModelConfig,
    passed: bool,
    worst: Option<&'a CheckOutcome>,
    checks: &'a [CheckOutcome],
}

fn gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    if !(args.tolerance >= 0.0 && args.tolerance.is_finite()) {
        return Err(CliError::Usage(format!("tolerance must be a finite nonnegative number, got {}", args.tolerance)));
    }
    let mut rc = RunConfig::load(args.config.as_deref())?;
    let seed = rc.single_seed(args.seed)?;
    let model = rc.model.take().unwrap_or_else(ModelConfig::tiny);
    model.validate()?;
    let mut opts = SuiteOptions { step: args.step, seed, model, ..SuiteOptions::default() };
    if let Some(name) = &args.inject_fault {
        opts = opts.with_fault(name)?;
    }
    let report = run_suite(&opts)?;
    let failures = report.failures(args.tolerance);
    let worst = report.worst();
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(out.join(GRADCHECK_FILE), &GradcheckOutput {
            tolerance: args.tolerance,
            step: args.step,
            seed,
            fault: opts.fault,
            model: &opts.model,
            passed: failures.is_empty(),
            worst,
            checks: &report.checks,
        })?;
        #[derive(Serialize)]
        struct GradcheckEcho<'a> {
            tolerance: f64,
            step: f64,
            seed: u64,
            inject_fault: Option<&'a str>,
            model: &'a ModelConfig,
        }
        echo(out, "gradcheck", &GradcheckEcho {
            tolerance: args.tolerance,
            step: args.step,
            seed,
            inject_fault: opts.fault,
            model: &opts.model,
        })?;
    }
    for f in &failures {
        println!(
            "FAIL {} max relative error {:.3e} (input {} index {}: analytic {:.9e}, numeric {:.9e})",
            f.path, f.max_rel_error, f.worst_input, f.worst_index, f.analytic, f.numeric
        );
    }
    if let Some(w) = worst {
        println!("worst offender: {} max relative error {:.3e}", w.path, w.max_rel_error);
    }
    if failures.is_empty() {
        println!("all {} checks within tolerance {:e}", report.checks.len(), args.tolerance);
        Ok(())
    } else {
        let mut paths: Vec<&str> = failures.iter().map(|f| f.path.as_str()).collect();
        paths.truncate(10);
        Err(CliError::Check(format!(
            "{} of {} gradient checks exceed tolerance {:e}: {}",
            failures.len(),
            report.checks.len(),
            args.tolerance,
            paths.join(", ")
        )))
    }
}

fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
    Ok(EvalReport::from_json(&text)?)
}

#[derive(Serialize)]
struct ReportEcho<'a> {
    reports: &'a [PathBuf],
    baseline: Option<&'a Path>,
}

fn report(args: ReportArgs) -> Result<(), CliError> {
    let reports: Vec<EvalReport> = args.reports.iter().map(|p| read_report(p)).collect::<Result<_, _>>()?;
    let baseline = args.baseline.as_deref().map(read_report).transpose()?;
    create_dir(&args.out)?;

    let mut table = String::new();
    for (i, r) in reports.iter().chain(baseline.iter()).enumerate() {
        if r.columns != reports[0].columns {
            return Err(CliError::Usage(format!("{} has a different column layout", r.approach)));
        }
        let csv = r.to_csv_string()?;
        let skip = if i == 0 { 0 } else { 1 };
        for line in csv.lines().skip(skip) {
            table.push_str(line);
            table.push('\n');
        }
    }
    write_text(&args.out.join("table.csv"), &table)?;
    write_text(&args.out.join("reference.csv"), &reference_csv()?)?;
    print!("{table}");

    if let Some(b) = &baseline {
        for r in &reports {
            let cmp = Comparison::new(r, b)?;
            let stem = format!("comparison_{}_vs_{}", r.approach, b.approach);
            write_text(&args.out.join(format!("{stem}.csv")), &cmp.to_csv_string()?)?;
            write_json(args.out.join(format!("{stem}.json")), &cmp)?;
            let cell = |region: &str| cmp.get(region, ALL_COLUMN).and_then(|c| c.delta);
            println!(
                "{} vs {}: occluded delta {}, average delta {} ({} vs {} parameters)",
                r.approach,
                b.approach,
                fmt_delta(cell("occluded")),
                fmt_delta(cell("average")),
                r.param_count,
                b.param_count
            );
        }
    }
    echo(&args.out, "report", &ReportEcho { reports: &args.reports, baseline: args.baseline.as_deref() })?;
    Ok(())
}

fn fmt_delta(v: Option<f64>) -> String {
    v.map(|x| format!("{x:+.3} mm")).unwrap_or_else(|| "n/a".into())
}
