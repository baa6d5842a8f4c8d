//! Alarm-policy evaluation over scored cohorts: confusion counts, ROC curves,
//! false alarms per true alarm, alarm timeliness, and a memoryless z-score
//! comparator.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::PatientRecord;
use crate::error::{Error, Result};
use crate::online::{score_stream, RiskPoint, RiskTrajectory, TrainedModel};

/// A patient's score trajectory with its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientScore {
    pub id: String,
    pub label: bool,
    pub end_time: f64,
    /// `(time, risk)`, time-ordered.
    pub points: Vec<(f64, f64)>,
}

impl PatientScore {
    pub fn from_trajectory(patient: &PatientRecord, traj: &RiskTrajectory) -> Result<Self> {
        let label = patient
            .label
            .ok_or_else(|| Error::UnlabeledRecord(patient.id.clone()))?;
        Ok(PatientScore {
            id: patient.id.clone(),
            label,
            end_time: patient.end_time,
            points: traj.points.iter().map(|p| (p.time, p.risk)).collect(),
        })
    }

    /// Patient-level score: the largest risk on the trajectory.
    pub fn max_score(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// First time the risk reaches `eta`.
    pub fn first_crossing(&self, eta: f64) -> Option<f64> {
        self.points.iter().find(|p| p.1 >= eta).map(|p| p.0)
    }
}

/// Scores every labeled patient with the personalized model, in parallel.
pub fn score_cohort(model: &TrainedModel, patients: &[PatientRecord]) -> Result<Vec<PatientScore>> {
    patients
        .par_iter()
        .map(|p| PatientScore::from_trajectory(p, &score_stream(model, p, None)?))
        .collect()
}

/// Scores every labeled patient with the memoryless comparator.
pub fn score_cohort_baseline(
    baseline: &InstantThreshold,
    patients: &[PatientRecord],
) -> Result<Vec<PatientScore>> {
    patients
        .par_iter()
        .map(|p| PatientScore::from_trajectory(p, &baseline_instant_threshold(p, baseline)?))
        .collect()
}

/// AUC of patient-level (maximum) scores.
pub fn cohort_auc(scores: &[PatientScore]) -> Result<f64> {
    auc(&scores
        .iter()
        .map(|s| (s.max_score(), s.label))
        .collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlarmOutcome {
    pub label: bool,
    pub fired: bool,
    pub stopping_time: Option<f64>,
    pub end_time: f64,
    /// `T_end − T_s` for alarms on deteriorating patients.
    pub lead_time: Option<f64>,
}

/// Outcomes of the policy "alarm when `R ≥ eta`".
pub fn outcomes_at(scores: &[PatientScore], eta: f64) -> Vec<AlarmOutcome> {
    scores
        .iter()
        .map(|s| {
            let ts = s.first_crossing(eta);
            AlarmOutcome {
                label: s.label,
                fired: ts.is_some(),
                stopping_time: ts,
                end_time: s.end_time,
                lead_time: ts.filter(|_| s.label).map(|t| (s.end_time - t).max(0.0)),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub tpr: f64,
    /// Undefined when nothing fired.
    pub ppv: Option<f64>,
    pub tnr: f64,
    pub fpr: f64,
    /// Undefined without true alarms.
    pub false_per_true: Option<f64>,
}

pub fn confusion_at(outcomes: &[AlarmOutcome]) -> Result<Confusion> {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for o in outcomes {
        match (o.label, o.fired) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    if tp + fn_ == 0 {
        return Err(Error::NoPositives);
    }
    if fp + tn == 0 {
        return Err(Error::NoNegatives);
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(Confusion {
        tp,
        fp,
        tn,
        fn_,
        tpr: tp as f64 / (tp + fn_) as f64,
        ppv: ratio(tp, tp + fp),
        tnr: tn as f64 / (tn + fp) as f64,
        fpr: fp as f64 / (tn + fp) as f64,
        false_per_true: ratio(fp, tp),
    })
}

/// Area under the ROC curve of patient-level scores: the trapezoid over every
/// distinct threshold, i.e. the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64> {
    let pos = scores.iter().filter(|s| s.1).count();
    let neg = scores.len() - pos;
    if pos == 0 {
        return Err(Error::NoPositives);
    }
    if neg == 0 {
        return Err(Error::NoNegatives);
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // rank-sum with midranks for ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * sorted[i..j].iter().filter(|s| s.1).count() as f64;
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocRow {
    pub eta: f64,
    pub tpr: f64,
    pub ppv: Option<f64>,
    pub tnr: f64,
    pub fpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Ascending in `eta`.
    pub rows: Vec<RocRow>,
    pub auc: f64,
}

/// Thresholds `0, 1/n, …, 1`.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// ROC rows on `grid` (sorted and deduplicated); the AUC uses every distinct
/// patient score, not just the grid.
pub fn sweep_roc(scores: &[PatientScore], grid: &[f64]) -> Result<RocCurve> {
    let mut grid: Vec<f64> = grid.iter().copied().filter(|g| g.is_finite()).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    let maxes: Vec<(f64, bool)> = scores.iter().map(|s| (s.max_score(), s.label)).collect();
    let auc = auc(&maxes)?;
    let rows = grid
        .iter()
        .map(|&eta| {
            let c = confusion_at(&outcomes_at(scores, eta))?;
            Ok(RocRow {
                eta,
                tpr: c.tpr,
                ppv: c.ppv,
                tnr: c.tnr,
                fpr: c.fpr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RocCurve { rows, auc })
}

/// Every distinct patient-level score, ascending: the thresholds at which the
/// confusion counts change.
pub fn distinct_thresholds(scores: &[PatientScore]) -> Vec<f64> {
    let mut t: Vec<f64> = scores
        .iter()
        .map(PatientScore::max_score)
        .filter(|v| v.is_finite())
        .collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median lead time of the true alarms among `outcomes`.
pub fn median_lead_time(outcomes: &[AlarmOutcome]) -> Option<f64> {
    median(outcomes.iter().filter_map(|o| o.lead_time).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelinessRow {
    pub eta: f64,
    pub tpr: f64,
    pub ppv: Option<f64>,
    /// Hours between the alarm and ICU admission, median over true alarms.
    pub median_lead_time: Option<f64>,
}

/// PPV against median lead time for every threshold whose TPR is at least
/// `tpr_target`, ascending in `eta`.
pub fn timeliness_curve(scores: &[PatientScore], tpr_target: f64) -> Result<Vec<TimelinessRow>> {
    let mut thresholds = vec![0.0];
    thresholds.extend(distinct_thresholds(scores));
    thresholds.dedup();
    let mut rows = Vec::new();
    for eta in thresholds {
        let out = outcomes_at(scores, eta);
        let c = confusion_at(&out)?;
        if c.tpr >= tpr_target {
            rows.push(TimelinessRow {
                eta,
                tpr: c.tpr,
                ppv: c.ppv,
                median_lead_time: median_lead_time(&out),
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::TargetUnreachable(tpr_target));
    }
    Ok(rows)
}

/// Largest threshold whose TPR still reaches `tpr_target`.
pub fn threshold_for_tpr(scores: &[PatientScore], tpr_target: f64) -> Result<f64> {
    let rows = timeliness_curve(scores, tpr_target)?;
    Ok(rows.last().expect("non-empty").eta)
}

/// Median lead time at the lowest threshold whose PPV reaches `ppv_target`:
/// the earliest alarms the scorer can raise at that precision.
pub fn lead_time_at_ppv(scores: &[PatientScore], ppv_target: f64) -> Result<(f64, Option<f64>)> {
    let mut thresholds = vec![0.0];
    thresholds.extend(distinct_thresholds(scores));
    thresholds.dedup();
    for eta in thresholds {
        let out = outcomes_at(scores, eta);
        if confusion_at(&out)?.ppv.is_some_and(|p| p >= ppv_target) {
            return Ok((eta, median_lead_time(&out)));
        }
    }
    Err(Error::TargetUnreachable(ppv_target))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FalseAlarmRow {
    pub tpr_target: f64,
    pub eta: f64,
    pub tpr: f64,
    pub ppv: Option<f64>,
    pub false_per_true: Option<f64>,
}

/// False alarms per true alarm at each TPR target.
pub fn false_alarm_table(
    scores: &[PatientScore],
    tpr_targets: &[f64],
) -> Result<Vec<FalseAlarmRow>> {
    tpr_targets
        .iter()
        .map(|&target| {
            let eta = threshold_for_tpr(scores, target)?;
            let c = confusion_at(&outcomes_at(scores, eta))?;
            Ok(FalseAlarmRow {
                tpr_target: target,
                eta,
                tpr: c.tpr,
                ppv: c.ppv,
                false_per_true: c.false_per_true,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn write_roc_tsv<W: Write>(curve: &RocCurve, mut w: W) -> Result<()> {
    writeln!(w, "eta\ttpr\tppv\ttnr\tfpr")?;
    for r in &curve.rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.eta,
            r.tpr,
            opt(r.ppv),
            r.tnr,
            r.fpr
        )?;
    }
    Ok(())
}

pub fn write_timeliness_tsv<W: Write>(rows: &[TimelinessRow], mut w: W) -> Result<()> {
    writeln!(w, "eta\ttpr\tppv\tmedian_lead_time")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            r.eta,
            r.tpr,
            opt(r.ppv),
            opt(r.median_lead_time)
        )?;
    }
    Ok(())
}

pub fn write_false_alarm_tsv<W: Write>(rows: &[FalseAlarmRow], mut w: W) -> Result<()> {
    writeln!(w, "tpr_target\teta\ttpr\tppv\tfalse_per_true")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.tpr_target,
            r.eta,
            r.tpr,
            opt(r.ppv),
            opt(r.false_per_true)
        )?;
    }
    Ok(())
}

/// Memoryless comparator: `logistic(max_i |x_i − μ_i| / σ_i − z_threshold)`
/// over the most recent value of every stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstantThreshold {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Standardized deviation that maps to a score of one half.
    pub z_threshold: f64,
}

impl InstantThreshold {
    pub const DEFAULT_Z: f64 = 2.0;

    /// Pooled per-stream mean and standard deviation over every sample.
    pub fn fit<'a, I: IntoIterator<Item = &'a PatientRecord>>(
        records: I,
        dim: usize,
        z_threshold: f64,
    ) -> Result<Self> {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = vec![0usize; dim];
        for r in records {
            for s in r.stream.samples() {
                sum[s.stream] += s.value;
                sq[s.stream] += s.value * s.value;
                n[s.stream] += 1;
            }
        }
        let mut means = Vec::with_capacity(dim);
        let mut sds = Vec::with_capacity(dim);
        for i in 0..dim {
            if n[i] < 2 {
                return Err(Error::DegenerateData(format!(
                    "stream {i} has fewer than two samples"
                )));
            }
            let m = sum[i] / n[i] as f64;
            let var = (sq[i] / n[i] as f64 - m * m).max(0.0);
            if var.sqrt() <= 1e-12 {
                return Err(Error::DegenerateData(format!("stream {i} is constant")));
            }
            means.push(m);
            sds.push(var.sqrt());
        }
        Ok(InstantThreshold {
            means,
            sds,
            z_threshold,
        })
    }

    /// Moments of the stable-patient mixture in a trained model, so that the
    /// baseline needs no data beyond the model itself.
    pub fn from_model(model: &TrainedModel, z_threshold: f64) -> Self {
        let dim = model.dim();
        let mut means = vec![0.0; dim];
        let mut second = vec![0.0; dim];
        for (e, &w) in model.stable.iter().zip(&model.subtype_priors) {
            let sigma = e.corr.sigma();
            let amp = e.kernel.variance * e.kernel.variance;
            for d in 0..dim {
                means[d] += w * e.mean[d];
                second[d] += w * (amp * sigma[(d, d)] + e.mean[d] * e.mean[d]);
            }
        }
        let sds = means
            .iter()
            .zip(&second)
            .map(|(m, s)| (s - m * m).max(0.0).sqrt())
            .collect();
        InstantThreshold {
            means,
            sds,
            z_threshold,
        }
    }

    pub fn score(&self, z: f64) -> f64 {
        1.0 / (1.0 + (self.z_threshold - z).exp())
    }
}

/// Baseline trajectory: a score at every distinct arrival time.
pub fn baseline_instant_threshold(
    patient: &PatientRecord,
    baseline: &InstantThreshold,
) -> Result<RiskTrajectory> {
    let dim = baseline.means.len();
    if patient.stream.dim() != dim {
        return Err(Error::SchemaMismatch(format!(
            "patient has {} streams, baseline has {dim}",
            patient.stream.dim()
        )));
    }
    let sorted = patient.stream.sorted_by_time();
    let mut latest: Vec<Option<f64>> = vec![None; dim];
    let mut points: Vec<RiskPoint> = Vec::new();
    let samples = sorted.samples();
    let mut i = 0;
    while i < samples.len() {
        let t = samples[i].time;
        while i < samples.len() && samples[i].time == t {
            let s = samples[i];
            latest[s.stream] =
                Some((s.value - baseline.means[s.stream]).abs() / baseline.sds[s.stream]);
            i += 1;
        }
        let z = latest.iter().flatten().copied().fold(0.0, f64::max);
        points.push(RiskPoint {
            time: t,
            risk: baseline.score(z),
            expert_risk: Vec::new(),
            epoch_posterior: Vec::new(),
        });
    }
    if points.is_empty() {
        points.push(RiskPoint {
            time: 0.0,
            risk: baseline.score(0.0),
            expert_risk: Vec::new(),
            epoch_posterior: Vec::new(),
        });
    }
    Ok(RiskTrajectory {
        points,
        threshold: None,
        stopping_time: None,
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidParams(format!(
            "labelings have {} and {} items",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        // both labelings trivial: identical partitions
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
