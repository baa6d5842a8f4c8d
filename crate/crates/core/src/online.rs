//! Real-time risk scoring: the posterior over a patient's initial epoch, each
//! subtype's two-hypothesis posterior, and their responsibility-weighted
//! mixture, updated at every sample arrival.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cohort::{AdmissionRecord, AdmissionSchema, PatientRecord};
use crate::error::{Error, Result};
use crate::gp::{
    stationary_log_likelihood, EpochParams, IncrementalGaussian, JitterLadder, ObservationSet,
    Sample, StationaryParams,
};
use crate::transfer::{DeterioratingExpertSet, ResponsibilityModel};

/// Everything needed to score a new patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub streams: Vec<String>,
    pub admission: AdmissionSchema,
    /// Stable-patient experts, one per subtype.
    pub stable: Vec<StationaryParams>,
    pub deteriorating: DeterioratingExpertSet,
    pub responsibilities: ResponsibilityModel,
    /// Mixing weights of the subtype mixture on the stable cohort.
    pub subtype_priors: Vec<f64>,
    /// Cohort deterioration rate `P(H_1)`.
    pub global_prior: f64,
    pub jitter: JitterLadder,
}

impl TrainedModel {
    pub fn num_experts(&self) -> usize {
        self.stable.len()
    }

    pub fn dim(&self) -> usize {
        self.streams.len()
    }

    pub fn num_epochs(&self) -> usize {
        self.deteriorating.experts[0].num_epochs()
    }

    pub fn epoch_duration(&self) -> f64 {
        self.deteriorating.experts[0].epoch_duration
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.stable.len();
        if g == 0 {
            return Err(Error::InvalidParams("model has no experts".into()));
        }
        self.deteriorating.validate()?;
        if self.deteriorating.experts.len() != g
            || self.responsibilities.num_experts() != g
            || self.subtype_priors.len() != g
        {
            return Err(Error::InvalidParams("expert lists disagree on G".into()));
        }
        for p in &self.stable {
            p.validate()?;
            if p.dim() != self.dim() {
                return Err(Error::InvalidParams(format!(
                    "stable expert has D={} for {} streams",
                    p.dim(),
                    self.dim()
                )));
            }
        }
        if self.deteriorating.experts[0].dim() != self.dim() {
            return Err(Error::InvalidParams(
                "deteriorating experts disagree with the stream schema".into(),
            ));
        }
        if self.responsibilities.width() != self.admission.width() {
            return Err(Error::InvalidParams(
                "responsibility model disagrees with the admission schema".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.global_prior) {
            return Err(Error::InvalidParams(
                "global prior must lie in [0, 1]".into(),
            ));
        }
        self.jitter.validate()
    }

    /// `β(y)` for raw admission key/value pairs.
    pub fn responsibilities_for(&self, admission: &BTreeMap<String, String>) -> Result<Vec<f64>> {
        self.responsibilities
            .predict(&self.admission.encode(admission)?)
    }

    /// Risk with no observations: `Σ_z β_z · P(V=1 | Z=z)`.
    pub fn prior_risk(&self, beta: &[f64]) -> f64 {
        mix(beta, &self.deteriorating.class_prior)
    }
}

fn mix(beta: &[f64], values: &[f64]) -> f64 {
    let total: f64 = beta.iter().sum();
    let r: f64 = beta.iter().zip(values).map(|(b, v)| b * v).sum::<f64>() / total;
    r.clamp(0.0, 1.0)
}

/// `P(V=1 | x)` from a prior and the log-likelihood ratio of the two
/// hypotheses, without overflow.
pub fn bayes_posterior(prior: f64, log_ratio: f64) -> f64 {
    if prior <= 0.0 {
        return 0.0;
    }
    if prior >= 1.0 {
        return 1.0;
    }
    let x = prior.ln() - (1.0 - prior).ln() + log_ratio;
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn normalize_log(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// `P(k̄ | obs) ∝ f_k(k̄) · P(obs | Θ_1, k̄)`; offsets that would push a sample
/// past epoch `K` are excluded.
pub fn epoch_posterior(
    det: &EpochParams,
    f_k: &[f64],
    obs: &ObservationSet,
    ladder: JitterLadder,
) -> Result<Vec<f64>> {
    let k = det.num_epochs();
    if f_k.len() != k {
        return Err(Error::InvalidParams(format!(
            "epoch prior has {} entries for K={k}",
            f_k.len()
        )));
    }
    if obs.is_empty() {
        return Ok(f_k.to_vec());
    }
    let mut blocks: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in obs.samples() {
        blocks
            .entry((s.time / det.epoch_duration).floor() as usize)
            .or_default()
            .push(*s);
    }
    let last_cell = *blocks.keys().next_back().expect("non-empty");
    let mut logs = vec![f64::NEG_INFINITY; k];
    for kb in 1..=k {
        if last_cell + kb > k || f_k[kb - 1] <= 0.0 {
            continue;
        }
        let mut ll = f_k[kb - 1].ln();
        for (cell, samples) in &blocks {
            ll += stationary_log_likelihood(&det.epochs[cell + kb - 1], samples, ladder)?;
        }
        logs[kb - 1] = ll;
    }
    if logs.iter().all(|l| *l == f64::NEG_INFINITY) {
        return Err(Error::AllOffsetsInvalid);
    }
    Ok(normalize_log(&logs))
}

/// Scores after one arrival time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub time: f64,
    /// `R(t, y)`.
    pub risk: f64,
    /// `R_z(t)` per subtype.
    pub expert_risk: Vec<f64>,
    /// Responsibility-weighted average of the subtypes' initial-epoch posteriors.
    pub epoch_posterior: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskTrajectory {
    pub points: Vec<RiskPoint>,
    pub threshold: Option<f64>,
    /// First time with `R ≥ η`.
    pub stopping_time: Option<f64>,
}

impl RiskTrajectory {
    fn new(points: Vec<RiskPoint>, threshold: Option<f64>) -> Self {
        let stopping_time =
            threshold.and_then(|eta| points.iter().find(|p| p.risk >= eta).map(|p| p.time));
        RiskTrajectory {
            points,
            threshold,
            stopping_time,
        }
    }

    /// Largest score on the trajectory.
    pub fn max_risk(&self) -> f64 {
        self.points.iter().map(|p| p.risk).fold(0.0, f64::max)
    }

    /// Tab-separated rows `time, risk, alarm, R_1…R_G, epoch_1…epoch_K`;
    /// `alarm` is 1 on the stopping-time row only.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        let g = self.points.first().map_or(0, |p| p.expert_risk.len());
        let k = self.points.first().map_or(0, |p| p.epoch_posterior.len());
        let mut header = vec!["time".to_string(), "risk".into(), "alarm".into()];
        header.extend((1..=g).map(|z| format!("risk_{z}")));
        header.extend((1..=k).map(|e| format!("epoch_{e}")));
        writeln!(w, "{}", header.join("\t"))?;
        let mut alarmed = false;
        for p in &self.points {
            let alarm = !alarmed && self.stopping_time == Some(p.time);
            alarmed |= alarm;
            write!(w, "{}\t{}\t{}", p.time, p.risk, u8::from(alarm))?;
            for v in p.expert_risk.iter().chain(&p.epoch_posterior) {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

struct StableState {
    start_cell: usize,
    gaussian: IncrementalGaussian,
}

/// Incremental scoring state for one patient. Each arrival extends cached
/// Cholesky factors instead of refactoring the whole history.
pub struct ScoringSession<'m> {
    model: &'m TrainedModel,
    beta: Vec<f64>,
    samples: Vec<Sample>,
    /// `(cell, index of its first sample)`, cells ascending.
    cells: Vec<(usize, usize)>,
    stable: Vec<Option<StableState>>,
    /// Keyed by `(expert, cell, epoch)`.
    blocks: BTreeMap<(usize, usize, usize), IncrementalGaussian>,
}

impl<'m> ScoringSession<'m> {
    pub fn new(model: &'m TrainedModel, admission: &AdmissionRecord) -> Result<Self> {
        let beta = model.responsibilities.predict(admission)?;
        Ok(Self::with_responsibilities(model, beta))
    }

    pub fn with_responsibilities(model: &'m TrainedModel, beta: Vec<f64>) -> Self {
        ScoringSession {
            model,
            stable: (0..model.num_experts()).map(|_| None).collect(),
            beta,
            samples: Vec::new(),
            cells: Vec::new(),
            blocks: BTreeMap::new(),
        }
    }

    pub fn responsibilities(&self) -> &[f64] {
        &self.beta
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Append a sample no earlier than the last one.
    pub fn push(&mut self, s: Sample) -> Result<()> {
        if s.stream >= self.model.dim() {
            return Err(Error::SchemaMismatch(format!(
                "stream index {} outside the model's {} streams",
                s.stream,
                self.model.dim()
            )));
        }
        if !(s.time.is_finite() && s.time >= 0.0 && s.value.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "invalid sample at t={}",
                s.time
            )));
        }
        if let Some(last) = self.samples.last() {
            if s.time < last.time {
                return Err(Error::InvalidParams(format!(
                    "sample at t={} arrives after t={}",
                    s.time, last.time
                )));
            }
        }
        let cell = self.cell_of(s.time);
        if self.cells.last().is_none_or(|(c, _)| *c != cell) {
            self.cells.push((cell, self.samples.len()));
        }
        self.samples.push(s);
        Ok(())
    }

    fn cell_of(&self, t: f64) -> usize {
        (t / self.model.epoch_duration()).floor() as usize
    }

    fn cell_range(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.cells[i].1;
        let end = self.cells.get(i + 1).map_or(self.samples.len(), |c| c.1);
        start..end
    }

    /// Cached Gaussian for `samples[range]`, brought up to date.
    fn extend_to(g: &mut IncrementalGaussian, samples: &[Sample]) -> Result<f64> {
        let done = g.len();
        g.extend(samples[done..].iter().copied())?;
        Ok(g.log_likelihood())
    }

    /// `(R_z, P_z(k̄ | obs))` over the current window.
    fn expert_terms(&mut self, z: usize) -> Result<(f64, Vec<f64>)> {
        let model = self.model;
        let det = &model.deteriorating.experts[z];
        let f_k = &model.deteriorating.epoch_prior;
        let prior = model.deteriorating.class_prior[z];
        let k = det.num_epochs();
        let Some(&(last_cell, _)) = self.cells.last() else {
            return Ok((prior, f_k.clone()));
        };
        // A stay longer than the grid keeps the trailing K cells, with k̄ = 1.
        let truncated = last_cell >= k;
        let start_cell = if truncated { last_cell + 1 - k } else { 0 };
        let first_cell = self.cells.partition_point(|(c, _)| *c < start_cell);

        let offsets: Vec<usize> = if truncated {
            vec![1]
        } else {
            (1..=k - last_cell).filter(|kb| f_k[kb - 1] > 0.0).collect()
        };
        if offsets.is_empty() {
            return Err(Error::AllOffsetsInvalid);
        }
        let mut logs = vec![f64::NEG_INFINITY; k];
        let mut ll1 = vec![f64::NEG_INFINITY; k];
        for &kb in &offsets {
            let mut total = 0.0;
            for i in first_cell..self.cells.len() {
                let cell = self.cells[i].0;
                let epoch = cell - start_cell + kb;
                let range = self.cell_range(i);
                let g = self.blocks.entry((z, cell, epoch)).or_insert_with(|| {
                    IncrementalGaussian::new(&det.epochs[epoch - 1], model.jitter)
                });
                total += Self::extend_to(g, &self.samples[range])?;
            }
            ll1[kb - 1] = total;
            logs[kb - 1] = if truncated {
                total
            } else {
                f_k[kb - 1].ln() + total
            };
        }
        let posterior = normalize_log(&logs);

        let window_start = self.cells[first_cell].1;
        let state = match self.stable[z].take() {
            Some(s) if s.start_cell == start_cell => s,
            _ => StableState {
                start_cell,
                gaussian: IncrementalGaussian::new(&model.stable[z], model.jitter),
            },
        };
        let mut state = state;
        let window = &self.samples[window_start..];
        let ll0 = Self::extend_to(&mut state.gaussian, window)?;
        self.stable[z] = Some(state);

        let risk: f64 = offsets
            .iter()
            .map(|&kb| posterior[kb - 1] * bayes_posterior(prior, ll1[kb - 1] - ll0))
            .sum();
        Ok((risk.clamp(0.0, 1.0), posterior))
    }

    /// Scores given every sample pushed so far, stamped at `time`.
    pub fn point(&mut self, time: f64) -> Result<RiskPoint> {
        let g = self.model.num_experts();
        let mut expert_risk = Vec::with_capacity(g);
        let mut posterior = vec![0.0; self.model.num_epochs()];
        let total: f64 = self.beta.iter().sum();
        for z in 0..g {
            let (r, post) = self.expert_terms(z)?;
            expert_risk.push(r);
            for (acc, p) in posterior.iter_mut().zip(post) {
                *acc += self.beta[z] / total * p;
            }
        }
        // drop blocks that slid out of the window
        if let Some(&(last_cell, _)) = self.cells.last() {
            let k = self.model.num_epochs();
            if last_cell >= k {
                let start = last_cell + 1 - k;
                self.blocks.retain(|(_, cell, _), _| *cell >= start);
            }
        }
        Ok(RiskPoint {
            time,
            risk: mix(&self.beta, &expert_risk),
            expert_risk,
            epoch_posterior: posterior,
        })
    }
}

/// `R_z(t)` for the observations in `obs` (sorted by time internally).
pub fn expert_risk(model: &TrainedModel, z: usize, obs: &ObservationSet) -> Result<f64> {
    if z >= model.num_experts() {
        return Err(Error::InvalidParams(format!("expert {z} out of range")));
    }
    let mut beta = vec![0.0; model.num_experts()];
    beta[z] = 1.0;
    let mut session = ScoringSession::with_responsibilities(model, beta);
    for s in obs.sorted_by_time().samples() {
        session.push(*s)?;
    }
    session.expert_terms(z).map(|(r, _)| r)
}

/// `R(t, y)` and its components for the observations in `obs`.
pub fn personalized_risk(
    model: &TrainedModel,
    admission: &AdmissionRecord,
    obs: &ObservationSet,
) -> Result<RiskPoint> {
    let mut session = ScoringSession::new(model, admission)?;
    let sorted = obs.sorted_by_time();
    for s in sorted.samples() {
        session.push(*s)?;
    }
    session.point(sorted.last_time().unwrap_or(0.0))
}

/// Scores at every distinct arrival time, or a single prior-only point at
/// `t = 0` for a patient without samples.
pub fn score_stream(
    model: &TrainedModel,
    patient: &PatientRecord,
    eta: Option<f64>,
) -> Result<RiskTrajectory> {
    score_stream_with_interval(model, patient, eta, None)
}

/// As [`score_stream`], additionally re-emitting the last scores every
/// `interval` hours from `t = 0` up to the end of the stay.
pub fn score_stream_with_interval(
    model: &TrainedModel,
    patient: &PatientRecord,
    eta: Option<f64>,
    interval: Option<f64>,
) -> Result<RiskTrajectory> {
    if let Some(eta) = eta {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config(format!(
                "threshold must lie in [0, 1], got {eta}"
            )));
        }
    }
    if let Some(dt) = interval {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!(
                "re-evaluation interval must be positive, got {dt}"
            )));
        }
    }
    if patient.stream.dim() != model.dim() {
        return Err(Error::SchemaMismatch(format!(
            "patient has {} streams, model has {}",
            patient.stream.dim(),
            model.dim()
        )));
    }
    let mut session = ScoringSession::new(model, &model.admission.encode(&patient.admission)?)?;
    let sorted = patient.stream.sorted_by_time();
    let samples = sorted.samples();
    let mut points: Vec<RiskPoint> = Vec::new();

    let mut grid = interval.map(|dt| (0usize, dt));
    let mut emit_grid_until = |upto: f64,
                               session: &mut ScoringSession,
                               points: &mut Vec<RiskPoint>,
                               inclusive: bool|
     -> Result<()> {
        if let Some((n, dt)) = grid.as_mut() {
            loop {
                let t = *n as f64 * *dt;
                if t > upto || (!inclusive && t == upto) {
                    break;
                }
                let p = match points.last() {
                    Some(last) => RiskPoint {
                        time: t,
                        ..last.clone()
                    },
                    None => session.point(t)?,
                };
                points.push(p);
                *n += 1;
            }
        }
        Ok(())
    };

    let mut i = 0;
    while i < samples.len() {
        let t = samples[i].time;
        emit_grid_until(t, &mut session, &mut points, false)?;
        while i < samples.len() && samples[i].time == t {
            session.push(samples[i])?;
            i += 1;
        }
        points.push(session.point(t)?);
    }
    if samples.is_empty() && interval.is_none() {
        points.push(session.point(0.0)?);
    }
    let end = patient.end_time.max(sorted.last_time().unwrap_or(0.0));
    emit_grid_until(end, &mut session, &mut points, true)?;
    // grid points that coincide with arrivals are already covered
    points.dedup_by(|b, a| a.time == b.time);
    Ok(RiskTrajectory::new(points, eta))
}
