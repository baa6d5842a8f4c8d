//! Latent subtypes of stable patients: a mixture of stationary GP experts fitted
//! by generalized EM, and Bayes-factor selection of the number of experts.

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{
    fit_weighted_from, length_scale_bounds, stationary_log_likelihood, CorrelationFactor, FitData,
    JitterLadder, KernelParams, MleConfig, ObservationSet, StationaryParams,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Stop once the mean absolute responsibility change drops below this.
    pub epsilon: f64,
    pub max_iter: usize,
    pub kmeans_restarts: usize,
    /// Independent EM runs from fresh k-means seeds; the best final log-likelihood wins.
    pub starts: usize,
    /// Re-seeding attempts after a collapsed expert.
    pub max_reseeds: usize,
    /// Budget of each weighted M-step fit (warm-started from the current expert).
    pub mstep: MleConfig,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            epsilon: 1e-4,
            max_iter: 100,
            kmeans_restarts: 5,
            starts: 1,
            max_reseeds: 3,
            mstep: MleConfig {
                restarts: 0,
                max_iter: 50,
                ..MleConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    pub experts: Vec<StationaryParams>,
    pub priors: Vec<f64>,
    /// `N × G`, rows sum to one.
    pub responsibilities: Vec<Vec<f64>>,
    /// Observed-data log-likelihood after the final E-step.
    pub log_likelihood: f64,
    /// Observed-data log-likelihood after every E-step, starting at the initial one.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

impl MixtureState {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Expert with the largest responsibility for each patient.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.responsibilities
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub g: usize,
    /// Final observed-data log-likelihood `Q*_G`; absent for fits that collapsed.
    pub q_star: Option<f64>,
    /// `Ψ_G = G·(D(D+1)/2 + D + 1)`.
    pub penalty: usize,
    /// `log B_{G,G−1}`; absent for `G = 1` and for fits that collapsed.
    pub log_bayes_factor: Option<f64>,
    /// Set when the EM fit for this `G` could not keep every expert populated.
    pub collapsed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSelectionTrace {
    pub rows: Vec<SelectionRow>,
    pub threshold: f64,
    pub selected: usize,
}

impl ModelSelectionTrace {
    /// Tab-separated rows with a header.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("G\tQ_star\tpenalty\tlog_bayes_factor\n");
        for r in &self.rows {
            let lb = match (r.log_bayes_factor, r.collapsed) {
                (_, true) => "collapsed".to_string(),
                (Some(v), _) => format!("{v}"),
                (None, _) => "NA".to_string(),
            };
            let q = r
                .q_star
                .map_or_else(|| "NA".to_string(), |v| format!("{v}"));
            s.push_str(&format!("{}\t{q}\t{}\t{lb}\n", r.g, r.penalty));
        }
        s
    }
}

/// Relative log-likelihood gain below which a single-expert fit stops.
const G1_REL_GAIN: f64 = 1e-9;

/// `Ψ_G = G·(D(D+1)/2 + D + 1)`.
pub fn penalty(g: usize, dim: usize) -> usize {
    g * (dim * (dim + 1) / 2 + dim + 1)
}

/// `log B_{G,G−1} = (Q*_G − ½Ψ_G ln N) − (Q*_{G−1} − ½Ψ_{G−1} ln N)`.
pub fn log_bayes_factor(q_g: f64, psi_g: usize, q_prev: f64, psi_prev: usize, n: usize) -> f64 {
    let ln_n = (n as f64).ln();
    (q_g - 0.5 * psi_g as f64 * ln_n) - (q_prev - 0.5 * psi_prev as f64 * ln_n)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Pooled per-stream statistics used to seed experts.
struct Pooled {
    mean: Vec<f64>,
    sd: Vec<f64>,
    median_gap: f64,
}

fn pooled_stats(data: &[ObservationSet], dim: usize) -> Pooled {
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut cnt = vec![0usize; dim];
    let mut gaps = Vec::new();
    for o in data {
        for s in o.samples() {
            sum[s.stream] += s.value;
            cnt[s.stream] += 1;
        }
        let mut t: Vec<f64> = o.samples().iter().map(|s| s.time).collect();
        t.sort_by(f64::total_cmp);
        gaps.extend(t.windows(2).map(|w| w[1] - w[0]).filter(|g| *g > 0.0));
    }
    let mean: Vec<f64> = (0..dim)
        .map(|i| {
            if cnt[i] > 0 {
                sum[i] / cnt[i] as f64
            } else {
                0.0
            }
        })
        .collect();
    for o in data {
        for s in o.samples() {
            sq[s.stream] += (s.value - mean[s.stream]).powi(2);
        }
    }
    let sd = (0..dim)
        .map(|i| {
            let v = if cnt[i] > 1 {
                sq[i] / (cnt[i] - 1) as f64
            } else {
                0.0
            };
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    let median_gap = if gaps.is_empty() {
        1.0
    } else {
        gaps[gaps.len() / 2]
    };
    Pooled {
        mean,
        sd,
        median_gap,
    }
}

/// Per-patient `[mean_1, var_1, …, mean_D, var_D]`; streams a patient lacks
/// take the pooled values.
fn summaries(data: &[ObservationSet], dim: usize, pooled: &Pooled) -> Vec<Vec<f64>> {
    data.iter()
        .map(|o| {
            let mut out = Vec::with_capacity(2 * dim);
            for i in 0..dim {
                let v: Vec<f64> = o
                    .samples()
                    .iter()
                    .filter(|s| s.stream == i)
                    .map(|s| s.value)
                    .collect();
                if v.is_empty() {
                    out.push(pooled.mean[i]);
                    out.push(pooled.sd[i] * pooled.sd[i]);
                } else {
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
                    out.push(m);
                    out.push(var);
                }
            }
            out
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding followed by Lloyd iterations; best of `restarts` by inertia.
pub(crate) fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = points.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
        while centers.len() < k {
            let d: Vec<f64> = points
                .iter()
                .map(|p| {
                    centers
                        .iter()
                        .map(|c| sq_dist(p, c))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = d.iter().sum();
            let idx = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, di) in d.iter().enumerate() {
                    if u < *di {
                        pick = i;
                        break;
                    }
                    u -= di;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            centers.push(points[idx].clone());
        }
        let mut assign = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let a = (0..k)
                    .min_by(|&x, &y| sq_dist(p, &centers[x]).total_cmp(&sq_dist(p, &centers[y])))
                    .unwrap_or(0);
                if a != assign[i] {
                    assign[i] = a;
                    changed = true;
                }
            }
            let dim = points[0].len();
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (p, &a) in points.iter().zip(&assign) {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                } else {
                    // move an empty center onto the point farthest from its own center
                    let far = (0..n)
                        .max_by(|&x, &y| {
                            sq_dist(&points[x], &centers[assign[x]])
                                .total_cmp(&sq_dist(&points[y], &centers[assign[y]]))
                        })
                        .unwrap_or(0);
                    centers[c] = points[far].clone();
                    assign[far] = c;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&assign)
            .map(|(p, &a)| sq_dist(p, &centers[a]))
            .sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    best.map(|(_, a)| a).unwrap_or_else(|| vec![0; n])
}

fn standardize(points: &mut [Vec<f64>]) {
    if points.is_empty() {
        return;
    }
    let n = points.len() as f64;
    for j in 0..points[0].len() {
        let m = points.iter().map(|p| p[j]).sum::<f64>() / n;
        let sd = (points.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / n).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for p in points.iter_mut() {
            p[j] = (p[j] - m) / sd;
        }
    }
}

fn check_data(data: &[ObservationSet], g: usize) -> Result<usize> {
    if g == 0 {
        return Err(Error::InvalidParams(
            "number of experts must be at least 1".into(),
        ));
    }
    if data.len() < g {
        return Err(Error::InvalidParams(format!(
            "{} patients cannot support {g} experts",
            data.len()
        )));
    }
    let dim = data[0].dim();
    if data.iter().any(|o| o.dim() != dim) {
        return Err(Error::SchemaMismatch(
            "observation sets disagree on D".into(),
        ));
    }
    Ok(dim)
}

/// Seed experts from a k-means partition of per-patient summaries.
pub fn init_experts(
    data: &[ObservationSet],
    g: usize,
    restarts: usize,
    seed: u64,
) -> Result<Vec<StationaryParams>> {
    let dim = check_data(data, g)?;
    let pooled = pooled_stats(data, dim);
    let mut points = summaries(data, dim, &pooled);
    let raw = points.clone();
    standardize(&mut points);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assign = kmeans(&points, g, restarts, &mut rng);
    let (lo, hi) = length_scale_bounds(data.iter().map(|o| o.samples()));
    let ell = pooled.median_gap.clamp(lo, hi);
    (0..g)
        .map(|c| {
            let members: Vec<&Vec<f64>> = raw
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            let mean = (0..dim)
                .map(|i| {
                    if members.is_empty() {
                        pooled.mean[i]
                    } else {
                        members.iter().map(|p| p[2 * i]).sum::<f64>() / members.len() as f64
                    }
                })
                .collect();
            StationaryParams::new(
                mean,
                KernelParams::unit(ell)?,
                CorrelationFactor::diagonal(&pooled.sd)?,
            )
        })
        .collect()
}

struct EStep {
    log_likelihood: f64,
    resp: Vec<Vec<f64>>,
    /// Per-patient, per-expert stream log-likelihoods.
    lls: Vec<Vec<f64>>,
}

fn e_step(
    data: &[ObservationSet],
    experts: &[StationaryParams],
    priors: &[f64],
    ladder: JitterLadder,
) -> Result<EStep> {
    let rows: Vec<Result<Vec<f64>>> = data
        .par_iter()
        .map(|o| {
            experts
                .iter()
                .map(|e| stationary_log_likelihood(e, o.samples(), ladder))
                .collect()
        })
        .collect();
    let lls = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut resp = Vec::with_capacity(data.len());
    for ll in &lls {
        let lp: Vec<f64> = ll.iter().zip(priors).map(|(l, p)| p.ln() + l).collect();
        let lse = log_sum_exp(&lp);
        total += lse;
        resp.push(lp.iter().map(|v| (v - lse).exp()).collect());
    }
    Ok(EStep {
        log_likelihood: total,
        resp,
        lls,
    })
}

fn check_masses(resp: &[Vec<f64>], g: usize) -> Result<()> {
    for z in 0..g {
        let mass: f64 = resp.iter().map(|r| r[z]).sum();
        if mass < 1.0 {
            return Err(Error::DegenerateCluster { expert: z, mass });
        }
    }
    Ok(())
}

/// Generalized EM from given experts and priors. Each M-step sets the priors to
/// the mean responsibilities and runs a responsibility-weighted fit of every
/// expert, warm-started at its current parameters.
pub fn em_fit_with_init(
    data: &[ObservationSet],
    experts: Vec<StationaryParams>,
    priors: Vec<f64>,
    cfg: &EmConfig,
) -> Result<MixtureState> {
    let g = experts.len();
    let dim = check_data(data, g)?;
    if priors.len() != g
        || priors.iter().any(|p| !(*p > 0.0))
        || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidParams(format!(
            "priors must be a positive {g}-simplex"
        )));
    }
    if let Some(e) = experts.iter().find(|e| e.dim() != dim) {
        return Err(Error::SchemaMismatch(format!(
            "expert has D={} but data has D={dim}",
            e.dim()
        )));
    }
    let ladder = cfg.mstep.jitter;
    let bounds = cfg
        .mstep
        .length_scale_bounds
        .unwrap_or_else(|| length_scale_bounds(data.iter().map(|o| o.samples())));
    let mcfg = MleConfig {
        length_scale_bounds: Some(bounds),
        ..cfg.mstep.clone()
    };
    let n = data.len() as f64;

    let mut experts = experts;
    let mut priors = priors;
    let mut state = e_step(data, &experts, &priors, ladder)?;
    check_masses(&state.resp, g)?;
    let mut trace = vec![state.log_likelihood];
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let resp = &state.resp;
        priors = (0..g)
            .map(|z| resp.iter().map(|r| r[z]).sum::<f64>() / n)
            .collect();
        let mut new_experts = Vec::with_capacity(g);
        for (z, e) in experts.iter().enumerate() {
            let mut fd = FitData::new(dim);
            let mut init_ll = 0.0;
            for ((o, r), ll) in data.iter().zip(resp).zip(&state.lls) {
                let w = if g == 1 { 1.0 } else { r[z] };
                if w > 0.0 && !o.is_empty() {
                    init_ll += w * ll[z];
                }
                fd.push(o.samples(), w)?;
            }
            let zcfg = MleConfig {
                seed: mcfg.seed.wrapping_add(iterations as u64),
                ..mcfg.clone()
            };
            new_experts.push(fit_weighted_from(&fd, e, Some(init_ll), false, &zcfg)?.params);
        }
        experts = new_experts;
        let next = e_step(data, &experts, &priors, ladder)?;
        check_masses(&next.resp, g)?;
        let change = state
            .resp
            .iter()
            .zip(&next.resp)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .sum::<f64>()
            / (n * g as f64);
        debug!(
            "EM G={g} iteration {iterations}: log-likelihood {}, mean responsibility change {change:e}",
            next.log_likelihood
        );
        let gain = next.log_likelihood - state.log_likelihood;
        state = next;
        trace.push(state.log_likelihood);
        // a single expert has constant responsibilities; warm-started M-steps
        // continue only while they still improve the fit
        let done = if g == 1 {
            gain <= G1_REL_GAIN * state.log_likelihood.abs()
        } else {
            change < cfg.epsilon
        };
        if done {
            break;
        }
    }
    let ll = state.log_likelihood;
    let resp = state.resp;
    Ok(MixtureState {
        experts,
        priors,
        responsibilities: resp,
        log_likelihood: ll,
        trace,
        iterations,
    })
}

/// EM with k-means initialization, re-seeding after a collapsed expert.
/// With `starts > 1` the run with the highest final log-likelihood is kept;
/// a start that collapses is skipped unless every start does.
pub fn em_fit(data: &[ObservationSet], g: usize, cfg: &EmConfig) -> Result<MixtureState> {
    check_data(data, g)?;
    let mut best: Option<MixtureState> = None;
    let mut last_err = None;
    for start in 0..cfg.starts.max(1) {
        let seed = cfg
            .seed
            .wrapping_add((start as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
        match em_fit_seeded(data, g, cfg, seed) {
            Ok(fit) => {
                if best
                    .as_ref()
                    .is_none_or(|b| fit.log_likelihood > b.log_likelihood)
                {
                    best = Some(fit);
                }
            }
            Err(e @ Error::DegenerateCluster { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one start ran"))
}

fn em_fit_seeded(
    data: &[ObservationSet],
    g: usize,
    cfg: &EmConfig,
    base_seed: u64,
) -> Result<MixtureState> {
    let mut attempt = 0;
    loop {
        let seed = base_seed.wrapping_add(attempt as u64 * 0x9E37_79B9);
        let experts = init_experts(data, g, cfg.kmeans_restarts, seed)?;
        match em_fit_with_init(data, experts, vec![1.0 / g as f64; g], cfg) {
            Err(e @ Error::DegenerateCluster { .. }) => {
                if attempt >= cfg.max_reseeds {
                    return Err(e);
                }
                warn!("{e}; re-seeding (attempt {})", attempt + 1);
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Grow `G` from one until the Bayes factor against `G − 1` drops below
/// `threshold` or `g_max` is reached. A collapsed fit counts as a failed
/// comparison.
pub fn select_g(
    data: &[ObservationSet],
    cfg: &EmConfig,
    threshold: f64,
    g_max: usize,
) -> Result<(MixtureState, ModelSelectionTrace)> {
    if g_max == 0 {
        return Err(Error::Config("G_max must be at least 1".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::Config(format!(
            "Bayes-factor threshold must be positive, got {threshold}"
        )));
    }
    let dim = check_data(data, 1)?;
    let n = data.len();
    let ln_threshold = threshold.ln();
    let fit = |g: usize| {
        em_fit(
            data,
            g,
            &EmConfig {
                seed: cfg.seed.wrapping_add(g as u64),
                ..cfg.clone()
            },
        )
    };

    let mut best = fit(1)?;
    let mut rows = vec![SelectionRow {
        g: 1,
        q_star: Some(best.log_likelihood),
        penalty: penalty(1, dim),
        log_bayes_factor: None,
        collapsed: false,
    }];
    let mut selected = 1;
    for g in 2..=g_max.min(n) {
        match fit(g) {
            Ok(state) => {
                let lb = log_bayes_factor(
                    state.log_likelihood,
                    penalty(g, dim),
                    best.log_likelihood,
                    penalty(g - 1, dim),
                    n,
                );
                rows.push(SelectionRow {
                    g,
                    q_star: Some(state.log_likelihood),
                    penalty: penalty(g, dim),
                    log_bayes_factor: Some(lb),
                    collapsed: false,
                });
                if lb < ln_threshold {
                    break;
                }
                best = state;
                selected = g;
            }
            Err(Error::DegenerateCluster { expert, mass }) => {
                warn!("G={g}: expert {expert} collapsed (mass {mass:.3}); keeping G={selected}");
                rows.push(SelectionRow {
                    g,
                    q_star: None,
                    penalty: penalty(g, dim),
                    log_bayes_factor: None,
                    collapsed: true,
                });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((
        best,
        ModelSelectionTrace {
            rows,
            threshold,
            selected,
        },
    ))
}
