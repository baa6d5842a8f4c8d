use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mgp_risk::cohort::{read_cohort, validate_and_ingest, Cohort, IngestMode, PatientRecord};
use mgp_risk::config::Config;
use mgp_risk::eval::{
    cohort_auc, false_alarm_table, score_cohort, score_cohort_baseline, sweep_roc,
    timeliness_curve, write_false_alarm_tsv, write_roc_tsv, write_timeliness_tsv, InstantThreshold,
    PatientScore,
};
use mgp_risk::model_file::{write_atomic, ModelFile};
use mgp_risk::online::score_stream_with_interval;
use mgp_risk::pipeline::{g_sweep, train_model, write_sweep_tsv};
use mgp_risk::synth::{fixtures, generate_cohort, write_ground_truth, GenerativeSpec};
use mgp_risk::transfer::write_importance;
use mgp_risk::{Error, Result};

/// Personalized deterioration risk scoring with mixtures of multitask GP experts.
#[derive(Parser)]
#[command(name = "mgp-risk", version)]
struct Cli {
    /// Seed for every random choice; drawn from entropy and printed when absent.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn subtypes and experts from a labeled cohort and write a model file.
    Train(TrainArgs),
    /// Score one patient's stream and write its risk trajectory.
    Score(ScoreArgs),
    /// Score a labeled cohort and export ROC, timeliness and false-alarm tables.
    Evaluate(EvaluateArgs),
    /// Sample a synthetic cohort and its ground-truth sidecar.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled training cohort.
    #[arg(long)]
    cohort: PathBuf,
    /// TOML settings; defaults apply to every omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the feature-importance table here.
    #[arg(long)]
    importance: Option<PathBuf>,
    /// Also write the model-selection trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Cohort-format file holding the patient.
    #[arg(long)]
    patient: PathBuf,
    /// Patient to score when the file holds several.
    #[arg(long)]
    id: Option<String>,
    /// Alarm threshold; the first crossing is reported as the stopping time.
    #[arg(long)]
    eta: Option<f64>,
    /// Re-emit the latest score every this many hours between arrivals.
    #[arg(long)]
    interval: Option<f64>,
    /// Trajectory output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Model to evaluate; optional when only a G sweep is requested.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Labeled held-out cohort.
    #[arg(long)]
    cohort: PathBuf,
    /// Directory for the exported tables; created if missing.
    #[arg(long)]
    out_dir: PathBuf,
    /// Settings for the threshold grid and TPR targets; the model's own
    /// settings are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also evaluate the memoryless z-score comparator.
    #[arg(long)]
    baseline: bool,
    /// Train one model per subtype count in `LO-HI` and report held-out AUC.
    #[arg(long, value_parser = parse_range, requires = "train_cohort")]
    sweep_g: Option<(usize, usize)>,
    /// Training cohort for the G sweep.
    #[arg(long)]
    train_cohort: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Built-in generative fixture.
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec", value_parser = clap::builder::PossibleValuesParser::new(fixtures::NAMES))]
    fixture: Option<String>,
    /// JSON generative specification.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of patients.
    #[arg(short, long)]
    n: usize,
    /// Cohort file to write.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth sidecar (id, subtype, initial epoch).
    #[arg(long)]
    truth: PathBuf,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s.split_once('-').unwrap_or((s, s));
    let lo: usize = lo.trim().parse().map_err(|_| format!("bad range `{s}`"))?;
    let hi: usize = hi.trim().parse().map_err(|_| format!("bad range `{s}`"))?;
    if lo == 0 || hi < lo {
        return Err(format!("range `{s}` must satisfy 1 <= LO <= HI"));
    }
    Ok((lo, hi))
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("seed: {s}");
        s
    })
}

fn tsv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let cohort = validate_and_ingest(&args.cohort, None, IngestMode::Training)?;
    let seed = resolve_seed(seed);
    let report = train_model(&cohort, &cfg, seed)?;
    ModelFile::new(report.model, cfg, report.selection.clone(), seed).save(&args.out)?;

    let trace = report.selection.to_tsv();
    let importance = tsv_bytes(|b| write_importance(&report.importance, b))?;
    if let Some(p) = &args.trace {
        write_atomic(p, trace.as_bytes())?;
    }
    if let Some(p) = &args.importance {
        write_atomic(p, &importance)?;
    }
    let mut out = io::stdout().lock();
    writeln!(out, "selected G: {}", report.selection.selected)?;
    writeln!(out, "\n{trace}")?;
    writeln!(out, "step\tseconds")?;
    for t in &report.timings {
        writeln!(out, "{}\t{:.3}", t.step, t.seconds)?;
    }
    writeln!(out)?;
    out.write_all(&importance)?;
    Ok(())
}

fn pick_patient(cohort: Cohort, id: Option<&str>) -> Result<PatientRecord> {
    match id {
        Some(id) => cohort
            .patients
            .into_iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::InvalidParams(format!("no patient with id `{id}`"))),
        None if cohort.patients.len() == 1 => {
            Ok(cohort.patients.into_iter().next().expect("one patient"))
        }
        None => Err(Error::InvalidParams(format!(
            "file holds {} patients; choose one with --id",
            cohort.patients.len()
        ))),
    }
}

fn score(args: &ScoreArgs) -> Result<()> {
    let file = ModelFile::load(&args.model)?;
    let model = &file.model;
    let cohort = read_cohort(&args.patient)?.conform_to(&model.streams)?;
    let patient = pick_patient(cohort, args.id.as_deref())?;
    let traj = score_stream_with_interval(model, &patient, args.eta, args.interval)?;
    let bytes = tsv_bytes(|b| traj.write_tsv(b))?;
    match &args.out {
        Some(p) => write_atomic(p, &bytes)?,
        None => io::stdout().lock().write_all(&bytes)?,
    }
    if let Some(ts) = traj.stopping_time {
        info!("{}: alarm at {ts} h", patient.id);
    }
    Ok(())
}

fn write_scores(scores: &[PatientScore]) -> Result<Vec<u8>> {
    tsv_bytes(|b| {
        writeln!(b, "id\tlabel\tmax_risk")?;
        for s in scores {
            writeln!(b, "{}\t{}\t{}", s.id, u8::from(s.label), s.max_score())?;
        }
        Ok(())
    })
}

/// Writes every export for one scorer under `prefix`, returning its AUC.
fn export(dir: &Path, prefix: &str, scores: &[PatientScore], cfg: &Config) -> Result<f64> {
    let roc = sweep_roc(scores, &cfg.eta_grid)?;
    let target = cfg
        .tpr_targets
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let timeliness = timeliness_curve(scores, if target.is_finite() { target } else { 0.0 })?;
    let alarms = false_alarm_table(scores, &cfg.tpr_targets)?;
    write_atomic(
        &dir.join(format!("{prefix}scores.tsv")),
        &write_scores(scores)?,
    )?;
    write_atomic(
        &dir.join(format!("{prefix}roc.tsv")),
        &tsv_bytes(|b| write_roc_tsv(&roc, b))?,
    )?;
    write_atomic(
        &dir.join(format!("{prefix}timeliness.tsv")),
        &tsv_bytes(|b| write_timeliness_tsv(&timeliness, b))?,
    )?;
    write_atomic(
        &dir.join(format!("{prefix}false_alarms.tsv")),
        &tsv_bytes(|b| write_false_alarm_tsv(&alarms, b))?,
    )?;
    cohort_auc(scores)
}

fn evaluate(args: &EvaluateArgs, seed: Option<u64>) -> Result<()> {
    if args.model.is_none() && args.sweep_g.is_none() {
        return Err(Error::InvalidParams(
            "evaluate needs --model, --sweep-g, or both".into(),
        ));
    }
    let file = args.model.as_deref().map(ModelFile::load).transpose()?;
    let cfg = match (&args.config, &file) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(f)) => f.config.clone(),
        (None, None) => Config::default(),
    };
    let cohort = validate_and_ingest(&args.cohort, None, IngestMode::Training)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut summary = String::from("method\tauc\tpositives\tnegatives\n");
    let positives = cohort
        .patients
        .iter()
        .filter(|p| p.label == Some(true))
        .count();
    let negatives = cohort.len() - positives;

    if let Some(file) = &file {
        let model = &file.model;
        let held_out = cohort.conform_to(&model.streams)?;
        let scores = score_cohort(model, &held_out.patients)?;
        let a = export(&args.out_dir, "", &scores, &cfg)?;
        summary.push_str(&format!("personalized\t{a}\t{positives}\t{negatives}\n"));
        if args.baseline {
            let baseline = InstantThreshold::from_model(model, cfg.baseline_z);
            let scores = score_cohort_baseline(&baseline, &held_out.patients)?;
            let b = export(&args.out_dir, "baseline_", &scores, &cfg)?;
            summary.push_str(&format!("baseline\t{b}\t{positives}\t{negatives}\n"));
        }
    }
    if let Some((lo, hi)) = args.sweep_g {
        let train_path = args
            .train_cohort
            .as_deref()
            .expect("clap enforces --train-cohort");
        let train = validate_and_ingest(train_path, None, IngestMode::Training)?;
        let seed = resolve_seed(seed);
        let gs: Vec<usize> = (lo..=hi).collect();
        let rows = g_sweep(&train, &cohort, &cfg, &gs, seed)?;
        write_atomic(
            &args.out_dir.join("g_sweep.tsv"),
            &tsv_bytes(|b| write_sweep_tsv(&rows, b))?,
        )?;
    }
    write_atomic(&args.out_dir.join("summary.tsv"), summary.as_bytes())?;
    io::stdout().lock().write_all(summary.as_bytes())?;
    Ok(())
}

fn synth(args: &SynthArgs, seed: Option<u64>) -> Result<()> {
    let spec = match (&args.fixture, &args.spec) {
        (Some(name), _) => fixtures::by_name(name)
            .ok_or_else(|| Error::Config(format!("unknown fixture `{name}`")))?,
        (None, Some(p)) => GenerativeSpec::from_json(&fs::read_to_string(p)?)?,
        (None, None) => unreachable!("clap requires --fixture or --spec"),
    };
    let seed = resolve_seed(seed);
    let (cohort, truth) = generate_cohort(&spec, args.n, seed)?;
    write_atomic(
        &args.out,
        &tsv_bytes(|b| mgp_risk::cohort::write_cohort(&cohort, b))?,
    )?;
    write_atomic(&args.truth, &tsv_bytes(|b| write_ground_truth(&truth, b))?)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Train(a) => train(a, cli.seed),
        Command::Score(a) => score(a),
        Command::Evaluate(a) => evaluate(a, cli.seed),
        Command::Synth(a) => synth(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
