//! Acceptance suite. Every criterion prints one PASS/FAIL line; tolerances and
//! budgets are pinned in the constants below.
//!
//! The criteria run sequentially inside a single test so that their wall-clock
//! budgets are not shared with each other. Set `ACCEPTANCE=3,7` to run a subset.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mgp_risk::cohort::{AdmissionSchema, Cohort};
use mgp_risk::config::Config;
use mgp_risk::eval::{
    adjusted_rand_index, cohort_auc, confusion_at, lead_time_at_ppv, outcomes_at, score_cohort,
    score_cohort_baseline, threshold_for_tpr, AlarmOutcome, InstantThreshold, PatientScore,
};
use mgp_risk::gp::{
    log_marginal_likelihood, sample_path, CorrelationFactor, EpochParams, ExpertParams,
    JitterLadder, KernelParams, ObservationSet, Sample, StationaryParams,
};
use mgp_risk::model_file::ModelFile;
use mgp_risk::online::{
    epoch_posterior, expert_risk, personalized_risk, score_stream, TrainedModel,
};
use mgp_risk::pipeline::{g_sweep, train_model};
use mgp_risk::subtype::{em_fit, select_g, EmConfig};
use mgp_risk::synth::{fixtures, generate_cohort, GenerativeSpec};
use mgp_risk::transfer::{DeterioratingExpertSet, ResponsibilityModel};
use mgp_risk::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C1_CASES: usize = 200;
const C1_TOL: f64 = 1e-8;
const C1_BUDGET: Duration = Duration::from_secs(10);

const C2_COHORTS: usize = 50;
const C2_TOL: f64 = 1e-8;

const C3_SEEDS: u64 = 20;
const C3_N: usize = 400;
const C3_MIN_ARI: f64 = 0.9;
const C3_MIN_HITS: usize = 18;
const C3_BUDGET: Duration = Duration::from_secs(5 * 60);

const C4_N: usize = 1500;
const C4_TRAIN: usize = 1000;
const C4_G_MAX: usize = 8;
/// EM runs per G in the sweep; guards each fixed-G fit against a merged-pair local optimum.
const C4_EM_STARTS: usize = 4;
const C4_BUDGET: Duration = Duration::from_secs(30 * 60);

const C5_CASES: usize = 100;
const C5_TOL: f64 = 1e-8;

const C6_SETS: usize = 100;

const C7_SEEDS: u64 = 20;
const C7_N: usize = 400;
const C7_MIN_AUC_GAIN: f64 = 0.05;
const C7_TPR: f64 = 0.5;

const C8_REPS: usize = 100;
const C8_MIN_RATE: f64 = 0.9;

const C9_PRIOR: f64 = 0.083;
const C9_TOL: f64 = 1e-12;

const C10_N: usize = 300;
const C10_SCORED: usize = 40;
const C10_TOL: f64 = 1e-12;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// shared oracles and builders

/// Dense lower Cholesky factor; `None` when the matrix is not positive definite.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

/// `log N(x; mu, cov)` by forward substitution on a dense factor.
fn mvn_log_pdf(x: &[f64], mu: &[f64], cov: &[Vec<f64>]) -> f64 {
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    let l = cholesky(cov).expect("oracle covariance is positive definite");
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i][k] * z[k]).sum();
        z[i] = (x[i] - mu[i] - s) / l[i][i];
    }
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let logdet: f64 = l.iter().enumerate().map(|(i, r)| r[i].ln()).sum::<f64>() * 2.0;
    -0.5 * (quad + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln())
}

fn block_sigma(p: &StationaryParams) -> Vec<Vec<f64>> {
    let d = p.dim();
    let s = p.corr.sigma();
    (0..d)
        .map(|i| (0..d).map(|j| s[(i, j)]).collect())
        .collect()
}

/// Dense density of `samples` where `block_of` assigns each sample its
/// parameter block, or `None` when a sample falls outside every block.
/// Samples in different blocks are independent.
fn dense_log_density(
    samples: &[Sample],
    block_of: impl Fn(&Sample) -> Option<StationaryParams>,
    jitter: f64,
) -> Option<f64> {
    let blocks: Vec<StationaryParams> = samples.iter().map(&block_of).collect::<Option<_>>()?;
    let n = samples.len();
    let mut cov = vec![vec![0.0; n]; n];
    let mut mu = vec![0.0; n];
    let x: Vec<f64> = samples.iter().map(|s| s.value).collect();
    for a in 0..n {
        let pa = &blocks[a];
        mu[a] = pa.mean[samples[a].stream];
        let sig = block_sigma(pa);
        for b in 0..n {
            if blocks[b] != *pa {
                continue;
            }
            let dt = samples[a].time - samples[b].time;
            let w = pa.kernel.variance;
            let k =
                w * w * (-dt * dt / (2.0 * pa.kernel.length_scale * pa.kernel.length_scale)).exp();
            cov[a][b] = sig[samples[a].stream][samples[b].stream] * k;
        }
        cov[a][a] += jitter;
    }
    Some(mvn_log_pdf(&x, &mu, &cov))
}

fn random_params(rng: &mut ChaCha8Rng, dim: usize, center: f64) -> StationaryParams {
    let mut entries = Vec::new();
    for r in 0..dim {
        for c in 0..=r {
            entries.push(if r == c {
                rng.random_range(0.5..3.0)
            } else {
                rng.random_range(-1.0..1.0)
            });
        }
    }
    StationaryParams::new(
        (0..dim)
            .map(|_| center + rng.random_range(-5.0..5.0))
            .collect(),
        KernelParams::unit(rng.random_range(0.5..5.0)).unwrap(),
        CorrelationFactor::new(dim, entries).unwrap(),
    )
    .unwrap()
}

/// Samples with at least `min_gap` hours between times of the same stream.
fn random_samples(
    rng: &mut ChaCha8Rng,
    dim: usize,
    count: usize,
    horizon: f64,
    min_gap: f64,
) -> Vec<Sample> {
    let mut out: Vec<Sample> = Vec::new();
    while out.len() < count {
        let stream = rng.random_range(0..dim);
        let t = rng.random_range(0.0..horizon);
        if out
            .iter()
            .any(|s| s.stream == stream && (s.time - t).abs() < min_gap)
        {
            continue;
        }
        out.push(Sample::new(stream, t, rng.random_range(-10.0..10.0)));
    }
    out
}

fn fixture_config(spec: &GenerativeSpec) -> Config {
    Config {
        num_epochs: spec.num_epochs,
        epoch_duration: spec.epoch_duration,
        ..Default::default()
    }
}

fn split(cohort: &Cohort, at: usize) -> (Cohort, Cohort) {
    let head = Cohort {
        streams: cohort.streams.clone(),
        patients: cohort.patients[..at].to_vec(),
    };
    let tail = Cohort {
        streams: cohort.streams.clone(),
        patients: cohort.patients[at..].to_vec(),
    };
    (head, tail)
}

/// The generator's own parameters packaged as a scoring model.
fn model_from_spec(spec: &GenerativeSpec, schema: AdmissionSchema, beta: Vec<f64>) -> TrainedModel {
    let width = schema.width();
    let total: f64 = spec.subtypes.iter().map(|s| s.weight).sum();
    TrainedModel {
        streams: spec.streams.clone(),
        admission: schema,
        stable: spec.subtypes.iter().map(|s| s.stable.clone()).collect(),
        deteriorating: DeterioratingExpertSet {
            experts: spec
                .subtypes
                .iter()
                .map(|s| s.deteriorating.clone())
                .collect(),
            class_prior: spec.subtypes.iter().map(|s| s.class_prior).collect(),
            epoch_prior: spec.epoch_prior.clone(),
        },
        responsibilities: ResponsibilityModel::constant(beta, width),
        subtype_priors: spec.subtypes.iter().map(|s| s.weight / total).collect(),
        global_prior: 0.15,
        jitter: JitterLadder::default(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// criteria

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let ladder = JitterLadder::default();
    let mut worst: f64 = 0.0;
    for case in 0..C1_CASES {
        let dim = rng.random_range(1..=3);
        let count = rng.random_range(0..=8);
        let (lib, oracle) = if case % 2 == 0 {
            let obs =
                ObservationSet::new(dim, random_samples(&mut rng, dim, count, 48.0, 0.05)).unwrap();
            let p = random_params(&mut rng, dim, 0.0);
            let lib =
                log_marginal_likelihood(&ExpertParams::Stationary(p.clone()), &obs, None, ladder)
                    .unwrap();
            (
                lib,
                dense_log_density(obs.samples(), |_| Some(p.clone()), ladder.initial).unwrap(),
            )
        } else {
            let k = rng.random_range(2..=4);
            let t1 = rng.random_range(6.0..24.0);
            let blocks: Vec<StationaryParams> =
                (0..k).map(|_| random_params(&mut rng, dim, 0.0)).collect();
            let ep = EpochParams::new(blocks.clone(), t1).unwrap();
            // times within the epochs reachable from the first one
            let obs = ObservationSet::new(
                dim,
                random_samples(&mut rng, dim, count, k as f64 * t1, 0.05),
            )
            .unwrap();
            let lib =
                log_marginal_likelihood(&ExpertParams::Epoch(ep), &obs, Some(1), ladder).unwrap();
            let oracle = dense_log_density(
                obs.samples(),
                |s| blocks.get((s.time / t1).floor() as usize).cloned(),
                ladder.initial,
            )
            .unwrap();
            (lib, oracle)
        };
        worst = worst.max((lib - oracle).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= C1_TOL && elapsed < C1_BUDGET,
        format!("{C1_CASES} cases, max |lib - dense| = {worst:.2e} (tol {C1_TOL:e}), {:.2} s (budget {} s)", elapsed.as_secs_f64(), C1_BUDGET.as_secs()),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let ladder = JitterLadder::default();
    let mut worst_drop: f64 = 0.0;
    let mut iterations = 0;
    for cohort in 0..C2_COHORTS {
        let dim = rng.random_range(1..=3);
        let n = rng.random_range(20..=60);
        let groups: Vec<StationaryParams> = (0..2)
            .map(|g| random_params(&mut rng, dim, 100.0 + 8.0 * g as f64))
            .collect();
        let data: Vec<ObservationSet> = (0..n)
            .map(|i| {
                let p = &groups[i % 2];
                let mut times = Vec::new();
                for s in 0..dim {
                    let mut t = rng.random_range(0.0..2.0);
                    while t < 24.0 {
                        times.push((s, t));
                        t += rng.random_range(1.0..4.0);
                    }
                }
                sample_path(
                    &ExpertParams::Stationary(p.clone()),
                    &times,
                    None,
                    rng.random(),
                    ladder,
                )
                .unwrap()
            })
            .collect();
        let cfg = EmConfig {
            seed: cohort as u64,
            ..Default::default()
        };
        let state = match em_fit(&data, 2, &cfg) {
            Err(Error::DegenerateCluster { .. }) => em_fit(&data, 1, &cfg).unwrap(),
            other => other.unwrap(),
        };
        iterations += state.trace.len() - 1;
        for w in state.trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    outcome(
        worst_drop <= C2_TOL,
        format!("{C2_COHORTS} cohorts, {iterations} EM iterations, largest decrease {worst_drop:.2e} (tol {C2_TOL:e})"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut hits = 0;
    let mut aris = Vec::new();
    for seed in 0..C3_SEEDS {
        let (cohort, truth) = generate_cohort(&fixtures::two_subtype(), C3_N, seed).unwrap();
        let (data, labels): (Vec<_>, Vec<_>) = cohort
            .patients
            .iter()
            .zip(&truth)
            .filter(|(p, _)| p.label == Some(false))
            .map(|(p, t)| (p.stream.clone(), t.subtype))
            .unzip();
        let cfg = EmConfig {
            seed,
            ..Default::default()
        };
        let (state, trace) = select_g(&data, &cfg, 1.0, 4).unwrap();
        let ari = adjusted_rand_index(&state.hard_labels(), &labels).unwrap();
        aris.push(ari);
        if trace.selected == 2 && ari >= C3_MIN_ARI {
            hits += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        hits >= C3_MIN_HITS && elapsed < C3_BUDGET,
        format!(
            "{hits}/{C3_SEEDS} seeds with G=2 and ARI >= {C3_MIN_ARI} (need {C3_MIN_HITS}), min ARI {:.3}, {:.0} s (budget {} s)",
            aris.iter().copied().fold(f64::INFINITY, f64::min),
            elapsed.as_secs_f64(),
            C3_BUDGET.as_secs()
        ),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let spec = fixtures::six_subtype();
    let (cohort, _) = generate_cohort(&spec, C4_N, 4).unwrap();
    let (train, test) = split(&cohort, C4_TRAIN);
    let gs: Vec<usize> = (1..=C4_G_MAX).collect();
    let mut cfg = fixture_config(&spec);
    cfg.em.starts = C4_EM_STARTS;
    let rows = g_sweep(&train, &test, &cfg, &gs, 4).unwrap();
    let best = rows
        .iter()
        .filter_map(|r| r.auc.map(|a| (r.g, a)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(g, _)| g)
        .unwrap_or(0);
    let elapsed = start.elapsed();
    let curve: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{}:{}",
                r.g,
                r.auc.map_or("NA".into(), |a| format!("{a:.4}"))
            )
        })
        .collect();
    outcome(
        best.abs_diff(6) <= 1 && elapsed < C4_BUDGET,
        format!(
            "AUC peaks at G={best} (need 6 +/- 1) [{}], {:.0} s (budget {} s)",
            curve.join(" "),
            elapsed.as_secs_f64(),
            C4_BUDGET.as_secs()
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let ladder = JitterLadder::default();
    let mut worst: f64 = 0.0;
    for _ in 0..C5_CASES {
        let g = rng.random_range(1..=2);
        let k = rng.random_range(1..=2);
        let t1 = rng.random_range(4.0..24.0);
        let stable: Vec<StationaryParams> =
            (0..g).map(|_| random_params(&mut rng, 1, 0.0)).collect();
        let det: Vec<EpochParams> = (0..g)
            .map(|_| {
                EpochParams::new(
                    (0..k).map(|_| random_params(&mut rng, 1, 0.0)).collect(),
                    t1,
                )
                .unwrap()
            })
            .collect();
        let class_prior: Vec<f64> = (0..g).map(|_| rng.random_range(0.01..0.99)).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let f_k: Vec<f64> = raw.iter().map(|v| v / raw.iter().sum::<f64>()).collect();
        let raw_beta: Vec<f64> = (0..g).map(|_| rng.random_range(0.1..1.0)).collect();
        let beta: Vec<f64> = raw_beta
            .iter()
            .map(|v| v / raw_beta.iter().sum::<f64>())
            .collect();
        let model = TrainedModel {
            streams: vec!["x".into()],
            admission: AdmissionSchema::default(),
            stable: stable.clone(),
            deteriorating: DeterioratingExpertSet {
                experts: det.clone(),
                class_prior: class_prior.clone(),
                epoch_prior: f_k.clone(),
            },
            responsibilities: ResponsibilityModel::constant(beta.clone(), 0),
            subtype_priors: vec![1.0 / g as f64; g],
            global_prior: 0.1,
            jitter: ladder,
        };
        let count = rng.random_range(0..=3);
        let obs = ObservationSet::new(1, random_samples(&mut rng, 1, count, k as f64 * t1, 0.05))
            .unwrap();

        let mut mixture = 0.0;
        for z in 0..g {
            // enumerate V and k̄ with dense densities
            let log_p0 =
                dense_log_density(obs.samples(), |_| Some(stable[z].clone()), ladder.initial)
                    .unwrap();
            let mut joint = Vec::new();
            for kb in 1..=k {
                let block = |s: &Sample| {
                    det[z]
                        .epochs
                        .get((s.time / t1).floor() as usize + kb - 1)
                        .cloned()
                };
                if let Some(l1) = dense_log_density(obs.samples(), block, ladder.initial) {
                    joint.push((f_k[kb - 1] * l1.exp(), l1));
                }
            }
            let evidence: f64 = joint.iter().map(|(w, _)| w).sum();
            let pi = class_prior[z];
            let r_z: f64 = joint
                .iter()
                .map(|(w, l1)| {
                    let h1 = pi * l1.exp();
                    (w / evidence) * h1 / (h1 + (1.0 - pi) * log_p0.exp())
                })
                .sum();
            let lib = expert_risk(&model, z, &obs).unwrap();
            worst = worst.max((lib - r_z).abs());
            mixture += beta[z] * r_z;
        }
        let total = personalized_risk(
            &model,
            &mgp_risk::cohort::AdmissionRecord { features: vec![] },
            &obs,
        )
        .unwrap()
        .risk;
        worst = worst.max((total - mixture).abs());
    }
    outcome(worst <= C5_TOL, format!("{C5_CASES} cases (K <= 2, D = 1, <= 3 samples), max deviation {worst:.2e} (tol {C5_TOL:e})"))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut mismatches = 0;
    for _ in 0..C6_SETS {
        let n = rng.random_range(2..=40);
        let mut scores: Vec<PatientScore> = (0..n)
            .map(|i| {
                let end = rng.random_range(1.0..100.0);
                let m = rng.random_range(0..6);
                let mut times: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..end)).collect();
                times.sort_by(f64::total_cmp);
                PatientScore {
                    id: format!("p{i}"),
                    label: rng.random_bool(0.4),
                    end_time: end,
                    points: times
                        .into_iter()
                        .map(|t| (t, (rng.random_range(0..=10) as f64) / 10.0))
                        .collect(),
                }
            })
            .collect();
        scores[0].label = true;
        scores[1].label = false;
        let eta = (rng.random_range(0..=11) as f64) / 10.0;

        // exhaustive counting straight from the score lists
        let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for s in &scores {
            let fired = s.points.iter().any(|p| p.1 >= eta);
            match (s.label, fired) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
                (true, false) => fn_ += 1,
            }
        }
        let outs: Vec<AlarmOutcome> = outcomes_at(&scores, eta);
        let c = confusion_at(&outs).unwrap();
        let tpr = tp as f64 / (tp + fn_) as f64;
        let tnr = tn as f64 / (tn + fp) as f64;
        let ppv = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
        let fpt = (tp > 0).then(|| fp as f64 / tp as f64);
        let leads_ok = outs.iter().zip(&scores).all(|(o, s)| {
            let first = s.points.iter().find(|p| p.1 >= eta).map(|p| p.0);
            o.stopping_time == first
                && o.lead_time == first.filter(|_| s.label).map(|t| s.end_time - t)
        });
        let same = (c.tp, c.fp, c.tn, c.fn_) == (tp, fp, tn, fn_)
            && c.tpr == tpr
            && c.tnr == tnr
            && c.fpr == fp as f64 / (fp + tn) as f64
            && c.ppv == ppv
            && c.false_per_true == fpt
            && leads_ok;
        mismatches += usize::from(!same);
    }
    outcome(
        mismatches == 0,
        format!("{C6_SETS} outcome sets, {mismatches} mismatches against counting (exact)"),
    )
}

fn criterion_7() -> Outcome {
    let spec = fixtures::two_subtype();
    let mut gains = Vec::new();
    let mut baseline_gains = Vec::new();
    let mut lead_true = Vec::new();
    let mut lead_one = Vec::new();
    for seed in 0..C7_SEEDS {
        let (train, _) = generate_cohort(&spec, C7_N, 1000 + seed).unwrap();
        let (test, _) = generate_cohort(&spec, C7_N, 2000 + seed).unwrap();
        let fit = |g: usize| {
            let cfg = Config {
                fixed_g: Some(g),
                ..fixture_config(&spec)
            };
            train_model(&train, &cfg, seed).unwrap().model
        };
        let (m2, m1) = (fit(2), fit(1));
        let s2 = score_cohort(&m2, &test.patients).unwrap();
        let s1 = score_cohort(&m1, &test.patients).unwrap();
        let sb = score_cohort_baseline(
            &InstantThreshold::from_model(&m1, InstantThreshold::DEFAULT_Z),
            &test.patients,
        )
        .unwrap();
        let (a2, a1, ab) = (
            cohort_auc(&s2).unwrap(),
            cohort_auc(&s1).unwrap(),
            cohort_auc(&sb).unwrap(),
        );
        gains.push(a2 - a1);
        baseline_gains.push(a2 - ab);

        // match PPV to the single-expert model at its operating point
        let eta1 = threshold_for_tpr(&s1, C7_TPR).unwrap();
        let ppv = confusion_at(&outcomes_at(&s1, eta1))
            .unwrap()
            .ppv
            .unwrap_or(0.0);
        let lead = |s: &[PatientScore]| {
            lead_time_at_ppv(s, ppv)
                .ok()
                .and_then(|(_, l)| l)
                .unwrap_or(0.0)
        };
        lead_true.push(lead(&s2));
        lead_one.push(lead(&s1));
    }
    let (gain, lt, l1, bg) = (
        median(gains),
        median(lead_true),
        median(lead_one),
        median(baseline_gains),
    );
    outcome(
        gain >= C7_MIN_AUC_GAIN && lt > l1,
        format!(
            "median AUC gain {gain:.4} (need >= {C7_MIN_AUC_GAIN}), median lead at matched PPV {lt:.1} h vs {l1:.1} h; \
             over z-score baseline {bg:.4}; {C7_SEEDS} paired seeds"
        ),
    )
}

fn criterion_8() -> Outcome {
    let spec = fixtures::epoch_sync();
    let det = &spec.subtypes[0].deteriorating;
    let (cohort, truth) = generate_cohort(&spec, 4 * C8_REPS, 808).unwrap();
    let mut hits = 0;
    let mut reps = 0;
    for (p, t) in cohort.patients.iter().zip(&truth) {
        let Some(k_true) = t.initial_epoch else {
            continue;
        };
        if reps == C8_REPS {
            break;
        }
        reps += 1;
        let first = p
            .stream
            .up_to(spec.epoch_duration)
            .samples()
            .iter()
            .filter(|s| s.time < spec.epoch_duration)
            .copied()
            .collect();
        let obs = ObservationSet::new(spec.dim(), first).unwrap();
        let post = epoch_posterior(det, &spec.epoch_prior, &obs, JitterLadder::default()).unwrap();
        let k_hat = 1
            + (0..post.len())
                .max_by(|&a, &b| post[a].total_cmp(&post[b]))
                .unwrap();
        hits += usize::from(k_hat == k_true);
    }
    let rate = hits as f64 / reps as f64;
    outcome(
        reps == C8_REPS && rate >= C8_MIN_RATE,
        format!(
            "argmax k matches the generator in {hits}/{reps} replications (need {:.0}%)",
            100.0 * C8_MIN_RATE
        ),
    )
}

fn criterion_9() -> Outcome {
    let spec = fixtures::six_subtype();
    let (cohort, _) = generate_cohort(&spec, 60, 9).unwrap();
    let schema = AdmissionSchema::infer(&cohort.patients);
    let g = spec.num_subtypes();
    let mut model = model_from_spec(&spec, schema, vec![1.0 / g as f64; g]);
    model.deteriorating.class_prior = vec![C9_PRIOR; g];
    let patient = mgp_risk::cohort::PatientRecord {
        stream: ObservationSet::empty(spec.dim()),
        ..cohort.patients[0].clone()
    };
    let traj = score_stream(&model, &patient, None).unwrap();
    let uniform_err = (traj.points[0].risk - C9_PRIOR).abs();

    // non-uniform responsibilities and priors follow the weighted sum
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let raw: Vec<f64> = (0..g).map(|_| rng.random_range(0.05..1.0)).collect();
        let beta: Vec<f64> = raw.iter().map(|v| v / raw.iter().sum::<f64>()).collect();
        let mut m = model.clone();
        m.responsibilities = ResponsibilityModel::constant(beta.clone(), m.admission.width());
        m.deteriorating.class_prior = (0..g).map(|_| rng.random_range(0.0..1.0)).collect();
        let expect: f64 = beta
            .iter()
            .zip(&m.deteriorating.class_prior)
            .map(|(b, c)| b * c)
            .sum();
        let got = score_stream(&m, &patient, None).unwrap().points[0].risk;
        worst = worst.max((got - expect).abs());
    }
    outcome(
        traj.points.len() == 1 && uniform_err <= C9_TOL && worst <= C9_TOL,
        format!("uniform case |R - {C9_PRIOR}| = {uniform_err:.1e}, weighted sums max error {worst:.1e} (tol {C9_TOL:e})"),
    )
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for name in fixtures::NAMES {
        let spec = fixtures::by_name(name).unwrap();
        let (cohort, _) = generate_cohort(&spec, C10_N + C10_SCORED, 10).unwrap();
        let (train, test) = split(&cohort, C10_N);
        let cfg = Config {
            fixed_g: Some(spec.num_subtypes()),
            ..fixture_config(&spec)
        };
        let report = train_model(&train, &cfg, 10).unwrap();
        let path = dir.path().join(format!("{name}.json"));
        ModelFile::new(report.model.clone(), cfg, report.selection, 10)
            .save(&path)
            .unwrap();
        let loaded = ModelFile::load(&path).unwrap().model;
        let mut fixture_worst: f64 = 0.0;
        for p in &test.patients {
            let a = score_stream(&report.model, p, None).unwrap();
            let b = score_stream(&loaded, p, None).unwrap();
            assert_eq!(a.points.len(), b.points.len());
            for (x, y) in a.points.iter().zip(&b.points) {
                fixture_worst = fixture_worst.max((x.risk - y.risk).abs());
                for (u, v) in x.expert_risk.iter().zip(&y.expert_risk) {
                    fixture_worst = fixture_worst.max((u - v).abs());
                }
            }
        }
        lines.push(format!("{name} {fixture_worst:.1e}"));
        worst = worst.max(fixture_worst);
    }
    outcome(
        worst <= C10_TOL,
        format!(
            "max score difference after save/load: {} (tol {C10_TOL:e})",
            lines.join(", ")
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 10] = [
        (1, "likelihood oracle", criterion_1),
        (2, "EM monotonicity", criterion_2),
        (3, "subtype recovery", criterion_3),
        (4, "model-selection curve", criterion_4),
        (5, "Bayes-rule exactness", criterion_5),
        (6, "alarm statistics vs counting", criterion_6),
        (7, "personalization gain", criterion_7),
        (8, "epoch synchronization", criterion_8),
        (9, "prior-only score", criterion_9),
        (10, "serialization round-trip", criterion_10),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        // the raw handle bypasses libtest capture, so the lines show in a plain `cargo test`
        let _ = writeln!(
            std::io::stderr(),
            "criterion {id:>2} [{verdict}] {name}: {} ({:.1} s)",
            result.detail,
            start.elapsed().as_secs_f64()
        );
        if !result.pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
