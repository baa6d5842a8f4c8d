//! End-to-end tests of the `mgp-risk` binary: exit codes, determinism, and
//! byte equality with the library.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use mgp_risk::cohort::{read_cohort, write_cohort, Cohort};
use mgp_risk::model_file::ModelFile;
use mgp_risk::online::score_stream;

const BIN: &str = env!("CARGO_BIN_EXE_mgp-risk");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct Trained {
    _dir: tempfile::TempDir,
    cohort: PathBuf,
    model: PathBuf,
    config: PathBuf,
    stdout: String,
}

/// One small homogeneous cohort and model shared by the tests below.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cohort = dir.path().join("cohort.txt");
        let config = dir.path().join("config.toml");
        let model = dir.path().join("model.json");
        fs::write(&config, "num_epochs = 4\ng_max = 2\n").unwrap();
        let out = run(&[
            "synth",
            "--fixture",
            "homogeneous",
            "-n",
            "120",
            "--out",
            s(&cohort),
            "--truth",
            s(&dir.path().join("truth.tsv")),
            "--seed",
            "3",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let out = run(&[
            "train",
            "--cohort",
            s(&cohort),
            "--config",
            s(&config),
            "--out",
            s(&model),
            "--seed",
            "1",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        Trained {
            stdout: String::from_utf8(out.stdout).unwrap(),
            _dir: dir,
            cohort,
            model,
            config,
        }
    })
}

fn single_patient_file(
    cohort: &Cohort,
    pick: impl Fn(&mgp_risk::cohort::PatientRecord) -> bool,
    path: &Path,
) -> mgp_risk::cohort::PatientRecord {
    let patient = cohort
        .patients
        .iter()
        .find(|p| pick(p))
        .expect("patient exists")
        .clone();
    let one = Cohort {
        streams: cohort.streams.clone(),
        patients: vec![patient.clone()],
    };
    let mut buf = Vec::new();
    write_cohort(&one, &mut buf).unwrap();
    fs::write(path, buf).unwrap();
    patient
}

#[test]
fn train_reports_selection_timing_and_importance() {
    let t = trained();
    assert!(t.stdout.starts_with("selected G: 1\n"), "{}", t.stdout);
    assert!(t.stdout.contains("G\tQ_star\tpenalty\tlog_bayes_factor"));
    assert!(t.stdout.contains("step\tseconds\npartition\t"));
    assert!(t.stdout.contains("rank\tfeature\tcoefficient"));
    let file = ModelFile::load(&t.model).unwrap();
    assert_eq!((file.num_experts, file.num_epochs, file.seed), (1, 4, 1));
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again.json");
    let out = run(&[
        "train",
        "--cohort",
        s(&t.cohort),
        "--config",
        s(&t.config),
        "--out",
        s(&again),
        "--seed",
        "1",
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read(&t.model).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn synth_is_deterministic_and_prints_entropy_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<PathBuf> = (0..4).map(|i| dir.path().join(format!("f{i}"))).collect();
    for pair in paths.chunks(2) {
        let out = run(&[
            "synth",
            "--fixture",
            "two-subtype",
            "-n",
            "30",
            "--out",
            s(&pair[0]),
            "--truth",
            s(&pair[1]),
            "--seed",
            "77",
        ]);
        assert!(out.status.success());
        assert!(out.stderr.is_empty(), "an explicit seed is not echoed");
    }
    assert_eq!(fs::read(&paths[0]).unwrap(), fs::read(&paths[2]).unwrap());
    assert_eq!(fs::read(&paths[1]).unwrap(), fs::read(&paths[3]).unwrap());

    let out = run(&[
        "synth",
        "--fixture",
        "two-subtype",
        "-n",
        "5",
        "--out",
        s(&paths[0]),
        "--truth",
        s(&paths[1]),
    ]);
    assert!(out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let seed: u64 = err
        .trim()
        .strip_prefix("seed: ")
        .expect("seed echoed")
        .parse()
        .unwrap();
    let replay = dir.path().join("replay");
    run(&[
        "synth",
        "--fixture",
        "two-subtype",
        "-n",
        "5",
        "--out",
        s(&replay),
        "--truth",
        s(&paths[3]),
        "--seed",
        &seed.to_string(),
    ]);
    assert_eq!(fs::read(&paths[0]).unwrap(), fs::read(&replay).unwrap());
}

#[test]
fn score_matches_the_library_byte_for_byte() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let cohort = read_cohort(&t.cohort).unwrap();
    let patient_path = dir.path().join("patient.txt");
    single_patient_file(
        &cohort,
        |p| p.label == Some(true) && p.stream.len() > 5,
        &patient_path,
    );
    let out_path = dir.path().join("traj.tsv");
    let out = run(&[
        "score",
        "--model",
        s(&t.model),
        "--patient",
        s(&patient_path),
        "--eta",
        "0.5",
        "--out",
        s(&out_path),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let model = ModelFile::load(&t.model).unwrap().model;
    let patient = read_cohort(&patient_path)
        .unwrap()
        .conform_to(&model.streams)
        .unwrap()
        .patients
        .remove(0);
    let traj = score_stream(&model, &patient, Some(0.5)).unwrap();
    let mut expected = Vec::new();
    traj.write_tsv(&mut expected).unwrap();
    assert_eq!(fs::read(&out_path).unwrap(), expected);
    assert_eq!(
        patient.id,
        read_cohort(&patient_path).unwrap().patients[0].id
    );
}

#[test]
fn score_edge_cases() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let model = ModelFile::load(&t.model).unwrap().model;

    // an empty stream gives one prior-only row
    let empty = dir.path().join("empty.txt");
    fs::write(
        &empty,
        "streams sbp\npatient id=new label=- t_end=0 age=60 transfer=no\n",
    )
    .unwrap();
    let out = run(&["score", "--model", s(&t.model), "--patient", s(&empty)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    let risk: f64 = rows[0].split('\t').nth(1).unwrap().parse().unwrap();
    let beta = model
        .responsibilities_for(
            &[
                ("age".to_string(), "60".to_string()),
                ("transfer".to_string(), "no".to_string()),
            ]
            .into(),
        )
        .unwrap();
    assert!((risk - model.prior_risk(&beta)).abs() < 1e-15);

    // eta = 0 alarms at the first sample
    let cohort = read_cohort(&t.cohort).unwrap();
    let one = dir.path().join("one.txt");
    let patient = single_patient_file(&cohort, |p| !p.stream.is_empty(), &one);
    let out = run(&[
        "score",
        "--model",
        s(&t.model),
        "--patient",
        s(&one),
        "--eta",
        "0",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let first: Vec<&str> = text.lines().nth(1).unwrap().split('\t').collect();
    let t0 = patient
        .stream
        .samples()
        .iter()
        .map(|s| s.time)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(first[0].parse::<f64>().unwrap(), t0);
    assert_eq!(first[2], "1");
    assert!(text
        .lines()
        .skip(2)
        .all(|l| l.split('\t').nth(2) == Some("0")));

    // several patients need --id
    let out = run(&["score", "--model", s(&t.model), "--patient", s(&t.cohort)]);
    assert_eq!(out.status.code(), Some(2));
    let id = &cohort.patients[3].id;
    let out = run(&[
        "score",
        "--model",
        s(&t.model),
        "--patient",
        s(&t.cohort),
        "--id",
        id,
        "--interval",
        "6",
    ]);
    assert!(out.status.success());
}

#[test]
fn exit_codes() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();

    let bad = dir.path().join("bad.txt");
    fs::write(
        &bad,
        "streams sbp\npatient id=a label=0 t_end=5\nsbp one 120\n",
    )
    .unwrap();
    let out = run(&[
        "train",
        "--cohort",
        s(&bad),
        "--out",
        s(&dir.path().join("m.json")),
        "--seed",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("line 3"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "num_epochs = 0\n").unwrap();
    let out = run(&[
        "train",
        "--cohort",
        s(&t.cohort),
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let missing = run(&[
        "score",
        "--model",
        "/nonexistent/model.json",
        "--patient",
        s(&t.cohort),
    ]);
    assert_eq!(missing.status.code(), Some(2));

    let usage = run(&["score"]);
    assert_eq!(usage.status.code(), Some(2));

    let hr = dir.path().join("hr.txt");
    fs::write(
        &hr,
        "streams hr\npatient id=a label=- t_end=3 age=50 transfer=no\nhr 1 80\n",
    )
    .unwrap();
    let out = run(&["score", "--model", s(&t.model), "--patient", s(&hr)]);
    assert_eq!(out.status.code(), Some(3));

    let level = dir.path().join("level.txt");
    fs::write(
        &level,
        "streams sbp\npatient id=a label=- t_end=3 age=50 transfer=maybe\nsbp 1 120\n",
    )
    .unwrap();
    let out = run(&["score", "--model", s(&t.model), "--patient", s(&level)]);
    assert_eq!(out.status.code(), Some(3));

    let mut file = ModelFile::load(&t.model).unwrap();
    file.schema_version = 2;
    let old = dir.path().join("v2.json");
    fs::write(&old, serde_json::to_string(&file).unwrap()).unwrap();
    let out = run(&["score", "--model", s(&old), "--patient", s(&hr)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn evaluate_writes_tables() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let held_out = dir.path().join("held_out.txt");
    let out = run(&[
        "synth",
        "--fixture",
        "homogeneous",
        "-n",
        "80",
        "--out",
        s(&held_out),
        "--truth",
        s(&dir.path().join("t.tsv")),
        "--seed",
        "8",
    ]);
    assert!(out.status.success());
    let report = dir.path().join("report");
    let out = run(&[
        "evaluate",
        "--model",
        s(&t.model),
        "--cohort",
        s(&held_out),
        "--out-dir",
        s(&report),
        "--baseline",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "roc.tsv",
        "timeliness.tsv",
        "false_alarms.tsv",
        "scores.tsv",
        "baseline_roc.tsv",
        "summary.tsv",
    ] {
        let text = fs::read_to_string(report.join(f)).unwrap();
        assert!(text.lines().count() > 1, "{f} has a header and rows");
    }
    let summary = fs::read_to_string(report.join("summary.tsv")).unwrap();
    assert!(summary.starts_with("method\tauc\tpositives\tnegatives\npersonalized\t"));
    assert!(summary.contains("\nbaseline\t"));
    let roc = fs::read_to_string(report.join("roc.tsv")).unwrap();
    assert_eq!(
        roc.lines().count(),
        1 + 101,
        "default grid has 101 thresholds"
    );

    let sweep = dir.path().join("sweep");
    let out = run(&[
        "evaluate",
        "--cohort",
        s(&held_out),
        "--out-dir",
        s(&sweep),
        "--sweep-g",
        "1-2",
        "--train-cohort",
        s(&t.cohort),
        "--config",
        s(&t.config),
        "--seed",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(sweep.join("g_sweep.tsv")).unwrap();
    assert!(text.starts_with("G\tauc\n1\t"));
    assert_eq!(text.lines().count(), 3);
}
