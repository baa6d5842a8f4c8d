//! Maximum-likelihood fitting of stationary blocks.
//!
//! The mean is profiled out in closed form (weighted generalized least squares),
//! leaving `φ = [u_ℓ, L entries, (log ω)]` for BFGS. `u_ℓ` maps through a
//! sigmoid onto `[log ℓ_lo, log ℓ_hi]` and diagonal entries of `L` are stored as
//! logs, so every iterate is a valid parameter set.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gaussian::{split_epochs, stationary_log_likelihood};
use super::optim::{minimize, BfgsConfig};
use super::{
    dot, tri_index, CorrelationFactor, EpochParams, ExpertParams, JitterLadder, KernelParams,
    ObservationSet, Sample, StationaryParams,
};
use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const FALLBACK_BOUNDS: (f64, f64) = (0.01, 1000.0);
/// Sets lighter than this fraction of the heaviest are left out of the
/// optimization; the final acceptance test still uses every set.
const OPT_WEIGHT_CUTOFF: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleConfig {
    /// Random restarts in addition to the initial point.
    pub restarts: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    /// Fixed `[ℓ_lo, ℓ_hi]`; derived from the data when absent.
    pub length_scale_bounds: Option<(f64, f64)>,
    pub jitter: JitterLadder,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            restarts: 5,
            max_iter: 200,
            rel_tol: 1e-6,
            length_scale_bounds: None,
            jitter: JitterLadder::default(),
            seed: 0,
        }
    }
}

/// Weighted sample sets sharing one stationary block.
#[derive(Clone, Debug)]
pub struct FitData<'a> {
    dim: usize,
    sets: Vec<(&'a [Sample], f64)>,
}

impl<'a> FitData<'a> {
    pub fn new(dim: usize) -> Self {
        FitData {
            dim,
            sets: Vec::new(),
        }
    }

    pub fn unweighted(dim: usize, sets: &'a [ObservationSet]) -> Result<Self> {
        let mut d = Self::new(dim);
        for s in sets {
            d.push(s.samples(), 1.0)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, samples: &'a [Sample], weight: f64) -> Result<()> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "fit weight must be finite and >= 0, got {weight}"
            )));
        }
        if let Some(s) = samples.iter().find(|s| s.stream >= self.dim) {
            return Err(Error::SchemaMismatch(format!(
                "stream index {} out of range for D={}",
                s.stream, self.dim
            )));
        }
        if weight > 0.0 && !samples.is_empty() {
            self.sets.push((samples, weight));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// `Σ_s w_s · log N(x_s; params)`.
    pub fn log_likelihood(&self, params: &StationaryParams, ladder: JitterLadder) -> Result<f64> {
        let parts: Vec<Result<f64>> = self
            .sets
            .par_iter()
            .map(|(s, w)| stationary_log_likelihood(params, s, ladder).map(|ll| w * ll))
            .collect();
        let mut total = 0.0;
        for p in parts {
            total += p?;
        }
        Ok(total)
    }

    fn check_degenerate(&self) -> Result<()> {
        if self.sets.is_empty() {
            return Err(Error::DegenerateData("no samples to fit".into()));
        }
        for stream in 0..self.dim {
            let mut first = None;
            let mut count = 0usize;
            let mut varies = false;
            for s in self
                .sets
                .iter()
                .flat_map(|(s, _)| s.iter())
                .filter(|s| s.stream == stream)
            {
                count += 1;
                match first {
                    None => first = Some(s.value),
                    Some(v) if v != s.value => varies = true,
                    _ => {}
                }
            }
            if count >= 2 && !varies {
                return Err(Error::DegenerateData(format!(
                    "stream {stream} is constant across the input"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedFit {
    pub params: StationaryParams,
    /// Weighted log-likelihood at `params`.
    pub log_likelihood: f64,
}

/// `[0.1·min_gap, 10·span]` over the given sample sets, where `min_gap` is the
/// smallest positive spacing between distinct times inside one set.
pub fn length_scale_bounds<'a, I>(sets: I) -> (f64, f64)
where
    I: IntoIterator<Item = &'a [Sample]>,
{
    let mut min_gap = f64::INFINITY;
    let mut span: f64 = 0.0;
    for s in sets {
        let mut t: Vec<f64> = s.iter().map(|s| s.time).collect();
        if t.is_empty() {
            continue;
        }
        t.sort_by(f64::total_cmp);
        span = span.max(t[t.len() - 1] - t[0]);
        for w in t.windows(2) {
            let g = w[1] - w[0];
            if g > 0.0 {
                min_gap = min_gap.min(g);
            }
        }
    }
    let (lo, hi) = (0.1 * min_gap, 10.0 * span);
    if lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > lo {
        (lo, hi)
    } else {
        FALLBACK_BOUNDS
    }
}

/// Layout of the unconstrained vector `φ`.
#[derive(Clone, Copy)]
struct Layout {
    dim: usize,
    log_lo: f64,
    log_hi: f64,
    free_variance: bool,
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

impl Layout {
    fn n_corr(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    fn len(&self) -> usize {
        1 + self.n_corr() + usize::from(self.free_variance)
    }

    fn encode(&self, p: &StationaryParams) -> Vec<f64> {
        let mut phi = Vec::with_capacity(self.len());
        let s = ((p.kernel.length_scale.ln() - self.log_lo) / (self.log_hi - self.log_lo))
            .clamp(1e-6, 1.0 - 1e-6);
        phi.push((s / (1.0 - s)).ln());
        for r in 0..self.dim {
            for c in 0..=r {
                let v = p.corr.lower(r, c);
                phi.push(if r == c { v.ln() } else { v });
            }
        }
        if self.free_variance {
            phi.push(p.kernel.variance.ln());
        }
        phi
    }

    /// `(ℓ, L entries, ω)`.
    fn decode(&self, phi: &[f64], fixed_variance: f64) -> (f64, Vec<f64>, f64) {
        let ell = (self.log_lo + (self.log_hi - self.log_lo) * sigmoid(phi[0])).exp();
        let mut l = Vec::with_capacity(self.n_corr());
        for r in 0..self.dim {
            for c in 0..=r {
                let v = phi[1 + tri_index(r, c)];
                l.push(if r == c { v.exp() } else { v });
            }
        }
        let omega = if self.free_variance {
            phi[1 + self.n_corr()].exp()
        } else {
            fixed_variance
        };
        (ell, l, omega)
    }
}

/// Per-set quantities that do not depend on the parameters.
struct Prepared {
    streams: Vec<usize>,
    values: Vec<f64>,
    r2: Vec<f64>,
    weight: f64,
}

impl Prepared {
    fn new(samples: &[Sample], weight: f64) -> Self {
        let m = samples.len();
        let mut r2 = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                let d = samples[a].time - samples[b].time;
                r2[a * m + b] = d * d;
            }
        }
        Prepared {
            streams: samples.iter().map(|s| s.stream).collect(),
            values: samples.iter().map(|s| s.value).collect(),
            r2,
            weight,
        }
    }
}

/// Factorization of one set's covariance at a parameter point.
struct Factored {
    kt: Vec<f64>,
    /// Row-major `K⁻¹`.
    kinv: Vec<f64>,
    kinv_x: Vec<f64>,
    /// `K⁻¹ A`, row-major `M×D`.
    kinv_a: Vec<f64>,
    /// `Aᵀ K⁻¹ A`, row-major `D×D`.
    ata: Vec<f64>,
    /// `Aᵀ K⁻¹ x`.
    atx: Vec<f64>,
    half_log_det: f64,
}

/// In-place lower Cholesky of a row-major `m×m` matrix; `false` when a pivot
/// is not positive.
fn cholesky_in_place(k: &mut [f64], m: usize) -> bool {
    for j in 0..m {
        let (upper, rest) = k.split_at_mut(j * m);
        let row_j = &mut rest[..m];
        let d = row_j[j] - dot(&row_j[..j], &row_j[..j]);
        if !(d > 0.0 && d.is_finite()) {
            return false;
        }
        row_j[j] = d.sqrt();
        let _ = upper;
        for i in j + 1..m {
            let (upper, lower) = k.split_at_mut(i * m);
            let rj = &upper[j * m..j * m + j + 1];
            let ri = &mut lower[..j + 1];
            ri[j] = (ri[j] - dot(&ri[..j], &rj[..j])) / rj[j];
        }
    }
    true
}

/// `K⁻¹` from its lower Cholesky factor (row-major, upper part ignored).
fn inverse_from_cholesky(l: &[f64], m: usize) -> Vec<f64> {
    // cols[c*m + r] = (L⁻¹)[r][c], zero for r < c
    let mut cols = vec![0.0; m * m];
    for c in 0..m {
        let col = &mut cols[c * m..(c + 1) * m];
        col[c] = 1.0 / l[c * m + c];
        for r in c + 1..m {
            let row = &l[r * m..r * m + r];
            col[r] = -dot(&row[c..r], &col[c..r]) / l[r * m + r];
        }
    }
    let mut out = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..=a {
            let v = dot(&cols[a * m + a..(a + 1) * m], &cols[b * m + a..(b + 1) * m]);
            out[a * m + b] = v;
            out[b * m + a] = v;
        }
    }
    out
}

fn factor_set(
    p: &Prepared,
    dim: usize,
    sigma: &[f64],
    ell: f64,
    omega: f64,
    ladder: JitterLadder,
) -> Result<Factored> {
    let m = p.values.len();
    let inv2l2 = 1.0 / (2.0 * ell * ell);
    let w2 = omega * omega;
    let mut kt = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..=a {
            let v = w2 * (-p.r2[a * m + b] * inv2l2).exp();
            kt[a * m + b] = v;
            kt[b * m + a] = v;
        }
    }
    let base: Vec<f64> = (0..m * m)
        .map(|ab| sigma[p.streams[ab / m] * dim + p.streams[ab % m]] * kt[ab])
        .collect();
    let mut jitter = ladder.initial;
    let l = loop {
        let mut k = base.clone();
        for a in 0..m {
            k[a * m + a] += jitter;
        }
        if cholesky_in_place(&mut k, m) {
            break k;
        }
        jitter = ladder
            .next(jitter)
            .ok_or(Error::NonPositiveDefinite { jitter })?;
    };
    let half_log_det: f64 = (0..m).map(|a| l[a * m + a].ln()).sum();
    if !half_log_det.is_finite() {
        return Err(Error::NonPositiveDefinite { jitter });
    }
    let kinv = inverse_from_cholesky(&l, m);
    let mut kinv_x = vec![0.0; m];
    let mut kinv_a = vec![0.0; m * dim];
    for a in 0..m {
        let row = &kinv[a * m..(a + 1) * m];
        let mut acc = 0.0;
        for b in 0..m {
            acc += row[b] * p.values[b];
            kinv_a[a * dim + p.streams[b]] += row[b];
        }
        kinv_x[a] = acc;
    }
    let mut ata = vec![0.0; dim * dim];
    let mut atx = vec![0.0; dim];
    for a in 0..m {
        let i = p.streams[a];
        atx[i] += kinv_x[a];
        for j in 0..dim {
            ata[i * dim + j] += kinv_a[a * dim + j];
        }
    }
    Ok(Factored {
        kt,
        kinv,
        kinv_x,
        kinv_a,
        ata,
        atx,
        half_log_det,
    })
}

struct Objective<'a> {
    layout: Layout,
    prepared: Vec<Prepared>,
    observed: Vec<bool>,
    init_mean: &'a [f64],
    fixed_variance: f64,
    ladder: JitterLadder,
    /// Profiled means of every evaluated point, to rebuild the optimum without
    /// another pass.
    means: std::sync::Mutex<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl Objective<'_> {
    fn sigma(&self, l: &[f64]) -> Vec<f64> {
        let d = self.layout.dim;
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let v: f64 = (0..=j)
                    .map(|k| l[tri_index(i, k)] * l[tri_index(j, k)])
                    .sum();
                s[i * d + j] = v;
                s[j * d + i] = v;
            }
        }
        s
    }

    /// Weighted GLS mean over observed streams; unobserved streams keep `init_mean`.
    fn profiled_mean(&self, factored: &[Factored]) -> Result<Vec<f64>> {
        let d = self.layout.dim;
        let idx: Vec<usize> = (0..d).filter(|&i| self.observed[i]).collect();
        let n = idx.len();
        let mut lhs: DMatrix<f64> = DMatrix::zeros(n, n);
        let mut rhs: nalgebra::DVector<f64> = nalgebra::DVector::zeros(n);
        for (f, p) in factored.iter().zip(&self.prepared) {
            for (r, &i) in idx.iter().enumerate() {
                rhs[r] += p.weight * f.atx[i];
                for (c, &j) in idx.iter().enumerate() {
                    lhs[(r, c)] += p.weight * f.ata[i * d + j];
                }
            }
        }
        let sol = lhs
            .lu()
            .solve(&rhs)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::DegenerateData("mean equations are singular".into()))?;
        let mut mean = self.init_mean.to_vec();
        for (r, &i) in idx.iter().enumerate() {
            mean[i] = sol[r];
        }
        Ok(mean)
    }

    /// Negative weighted log-likelihood, its gradient in `φ`, and the profiled mean.
    fn eval(&self, phi: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let lay = self.layout;
        let d = lay.dim;
        let (ell, l, omega) = lay.decode(phi, self.fixed_variance);
        let sigma = self.sigma(&l);
        let factored: Vec<Result<Factored>> = self
            .prepared
            .par_iter()
            .map(|p| factor_set(p, d, &sigma, ell, omega, self.ladder))
            .collect();
        let factored = factored.into_iter().collect::<Result<Vec<_>>>()?;
        let mean = self.profiled_mean(&factored)?;

        struct Part {
            ll: f64,
            c: Vec<f64>,
            g_ell: f64,
            g_omega: f64,
        }
        let parts: Vec<Part> = factored
            .par_iter()
            .zip(&self.prepared)
            .map(|(f, p)| {
                let m = p.values.len();
                let alpha: Vec<f64> = (0..m)
                    .map(|a| {
                        f.kinv_x[a] - (0..d).map(|j| f.kinv_a[a * d + j] * mean[j]).sum::<f64>()
                    })
                    .collect();
                let quad: f64 = (0..m)
                    .map(|a| (p.values[a] - mean[p.streams[a]]) * alpha[a])
                    .sum();
                let ll = -0.5 * quad - f.half_log_det - m as f64 * HALF_LN_2PI;
                let mut c = vec![0.0; d * d];
                let (mut g_ell, mut g_omega) = (0.0, 0.0);
                // W and the kernel terms are symmetric: visit b <= a, doubling b < a
                for a in 0..m {
                    let ia = p.streams[a];
                    for b in 0..=a {
                        let ib = p.streams[b];
                        let mult = if a == b { 1.0 } else { 2.0 };
                        let wk = mult * (alpha[a] * alpha[b] - f.kinv[a * m + b]) * f.kt[a * m + b];
                        c[ia * d + ib] += 0.5 * wk;
                        c[ib * d + ia] += 0.5 * wk;
                        let full = wk * sigma[ia * d + ib];
                        g_ell += full * p.r2[a * m + b];
                        g_omega += full;
                    }
                }
                Part {
                    ll,
                    c,
                    g_ell,
                    g_omega,
                }
            })
            .collect();

        let mut value = 0.0;
        let mut c = vec![0.0; d * d];
        let (mut g_ell, mut g_omega) = (0.0, 0.0);
        for (part, p) in parts.iter().zip(&self.prepared) {
            value -= p.weight * part.ll;
            for (acc, v) in c.iter_mut().zip(&part.c) {
                *acc -= p.weight * v;
            }
            g_ell -= p.weight * part.g_ell;
            g_omega -= p.weight * part.g_omega;
        }

        let mut grad = vec![0.0; lay.len()];
        let s = sigmoid(phi[0]);
        grad[0] = 0.5 * g_ell / (ell * ell) * (lay.log_hi - lay.log_lo) * s * (1.0 - s);
        for pr in 0..d {
            for q in 0..=pr {
                // (C·L)[p][q]
                let g: f64 = (q..d).map(|j| c[pr * d + j] * l[tri_index(j, q)]).sum();
                grad[1 + tri_index(pr, q)] = if pr == q { g * l[tri_index(pr, q)] } else { g };
            }
        }
        if lay.free_variance {
            grad[1 + lay.n_corr()] = g_omega;
        }
        self.means
            .lock()
            .expect("mean cache")
            .push((phi.to_vec(), mean.clone()));
        Ok((value, grad, mean))
    }

    fn params(&self, phi: &[f64], mean: Vec<f64>) -> Result<StationaryParams> {
        let (ell, l, omega) = self.layout.decode(phi, self.fixed_variance);
        StationaryParams::new(
            mean,
            KernelParams::new(ell, omega)?,
            CorrelationFactor::new(self.layout.dim, l)?,
        )
    }
}

/// Responsibility-weighted maximum-likelihood fit of one stationary block.
///
/// The result never has a lower weighted log-likelihood than `init`.
pub fn fit_stationary_weighted(
    data: &FitData,
    init: &StationaryParams,
    free_variance: bool,
    cfg: &MleConfig,
) -> Result<WeightedFit> {
    fit_weighted_from(data, init, None, free_variance, cfg)
}

/// As [`fit_stationary_weighted`], with the weighted log-likelihood of `init`
/// already known (it must equal `data.log_likelihood(init, cfg.jitter)`).
pub(crate) fn fit_weighted_from(
    data: &FitData,
    init: &StationaryParams,
    init_ll: Option<f64>,
    free_variance: bool,
    cfg: &MleConfig,
) -> Result<WeightedFit> {
    init.validate()?;
    cfg.jitter.validate()?;
    if init.dim() != data.dim() {
        return Err(Error::SchemaMismatch(format!(
            "fit data has D={} but init has D={}",
            data.dim(),
            init.dim()
        )));
    }
    data.check_degenerate()?;
    let (lo, hi) = cfg
        .length_scale_bounds
        .unwrap_or_else(|| length_scale_bounds(data.sets.iter().map(|(s, _)| *s)));
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Config(format!(
            "invalid length-scale bounds [{lo}, {hi}]"
        )));
    }
    let dim = data.dim();
    let max_weight = data.sets.iter().map(|(_, w)| *w).fold(0.0, f64::max);
    let mut observed = vec![false; dim];
    for (s, _) in data
        .sets
        .iter()
        .filter(|(_, w)| *w >= OPT_WEIGHT_CUTOFF * max_weight)
    {
        for x in s.iter() {
            observed[x.stream] = true;
        }
    }
    let layout = Layout {
        dim,
        log_lo: lo.ln(),
        log_hi: hi.ln(),
        free_variance,
    };
    let objective = Objective {
        layout,
        prepared: data
            .sets
            .iter()
            .filter(|(_, w)| *w >= OPT_WEIGHT_CUTOFF * max_weight)
            .map(|(s, w)| Prepared::new(s, *w))
            .collect(),
        observed,
        init_mean: &init.mean,
        fixed_variance: init.kernel.variance,
        ladder: cfg.jitter,
        means: Default::default(),
    };

    let phi0 = layout.encode(init);
    let mut starts = vec![phi0.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let wide = Normal::new(0.0, 1.0).expect("unit normal");
    let narrow = Normal::new(0.0, 0.3).expect("normal");
    let scale = (0..dim).map(|i| init.corr.lower(i, i)).sum::<f64>() / dim as f64;
    for _ in 0..cfg.restarts {
        let mut phi = phi0.clone();
        phi[0] += wide.sample(&mut rng);
        for r in 0..dim {
            for c in 0..=r {
                let k = 1 + tri_index(r, c);
                phi[k] += narrow.sample(&mut rng) * if r == c { 1.0 } else { scale };
            }
        }
        if free_variance {
            let k = 1 + layout.n_corr();
            phi[k] += narrow.sample(&mut rng);
        }
        starts.push(phi);
    }

    let bfgs = BfgsConfig {
        max_iter: cfg.max_iter,
        rel_tol: cfg.rel_tol,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in starts {
        let out = minimize(
            |phi| objective.eval(phi).map(|(f, g, _)| (f, g)),
            start,
            bfgs,
        );
        if let Ok(out) = out {
            if out.value.is_finite() && best.as_ref().is_none_or(|(v, _)| out.value < *v) {
                best = Some((out.value, out.x));
            }
        }
    }

    let init_ll = match init_ll {
        Some(v) => Ok(v),
        None => data.log_likelihood(init, cfg.jitter),
    };
    let candidate = best.and_then(|(_, phi)| {
        let cached = objective
            .means
            .lock()
            .expect("mean cache")
            .iter()
            .rev()
            .find(|(p, _)| *p == phi)
            .map(|(_, m)| m.clone());
        let mean = match cached {
            Some(m) => m,
            None => objective.eval(&phi).ok()?.2,
        };
        let params = objective.params(&phi, mean).ok()?;
        let ll = data.log_likelihood(&params, cfg.jitter).ok()?;
        Some((params, ll))
    });
    match (candidate, init_ll) {
        (Some((params, ll)), Ok(init_ll)) if ll >= init_ll => Ok(WeightedFit {
            params,
            log_likelihood: ll,
        }),
        (Some((params, ll)), Err(_)) => Ok(WeightedFit {
            params,
            log_likelihood: ll,
        }),
        (_, Ok(init_ll)) => Ok(WeightedFit {
            params: init.clone(),
            log_likelihood: init_ll,
        }),
        (None, Err(e)) => Err(e),
    }
}

/// Maximum-likelihood fit of an expert to a list of observation sets.
///
/// Epoch experts need one initial-epoch offset per set; each epoch block is
/// fitted on the samples that map into it, and epochs without data keep their
/// initial parameters.
pub fn fit_mle(
    obs_sets: &[ObservationSet],
    init: &ExpertParams,
    epoch_offsets: Option<&[usize]>,
    cfg: &MleConfig,
) -> Result<ExpertParams> {
    let dim = init.dim();
    if let Some(o) = obs_sets.iter().find(|o| o.dim() != dim) {
        return Err(Error::SchemaMismatch(format!(
            "observation set has D={} but init has D={dim}",
            o.dim()
        )));
    }
    if obs_sets.iter().all(|o| o.is_empty()) {
        return Err(Error::DegenerateData(
            "all observation sets are empty".into(),
        ));
    }
    match init {
        ExpertParams::Stationary(p) => {
            let data = FitData::unweighted(dim, obs_sets)?;
            Ok(ExpertParams::Stationary(
                fit_stationary_weighted(&data, p, false, cfg)?.params,
            ))
        }
        ExpertParams::Epoch(p) => {
            let offsets = epoch_offsets.ok_or_else(|| {
                Error::InvalidParams("epoch fit needs initial-epoch offsets".into())
            })?;
            if offsets.len() != obs_sets.len() {
                return Err(Error::InvalidParams(format!(
                    "{} offsets for {} observation sets",
                    offsets.len(),
                    obs_sets.len()
                )));
            }
            let k = p.num_epochs();
            let mut buckets: Vec<Vec<Vec<Sample>>> = vec![Vec::new(); k];
            for (o, &off) in obs_sets.iter().zip(offsets) {
                if off == 0 || off > k {
                    return Err(Error::InvalidParams(format!(
                        "initial epoch {off} outside [1, {k}]"
                    )));
                }
                for (e, block) in split_epochs(o, p.epoch_duration, k, off)? {
                    buckets[e - 1].push(block);
                }
            }
            fit_epoch_buckets(&buckets, p, cfg).map(ExpertParams::Epoch)
        }
    }
}

/// Fits every epoch block on its bucket of fragments. Empty buckets keep the
/// initial block.
pub(crate) fn fit_epoch_buckets(
    buckets: &[Vec<Vec<Sample>>],
    init: &EpochParams,
    cfg: &MleConfig,
) -> Result<EpochParams> {
    let dim = init.dim();
    let mut epochs = Vec::with_capacity(init.num_epochs());
    for (e, (bucket, block)) in buckets.iter().zip(&init.epochs).enumerate() {
        let mut data = FitData::new(dim);
        for frag in bucket {
            data.push(frag, 1.0)?;
        }
        if data.is_empty() {
            epochs.push(block.clone());
            continue;
        }
        let ecfg = MleConfig {
            seed: cfg.seed.wrapping_add(e as u64),
            ..cfg.clone()
        };
        epochs.push(fit_stationary_weighted(&data, block, init.free_variance, &ecfg)?.params);
    }
    let out = EpochParams {
        epochs,
        epoch_duration: init.epoch_duration,
        free_variance: init.free_variance,
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::sample_path;

    fn scalar(mean: f64, sd: f64, ls: f64) -> StationaryParams {
        StationaryParams::new(
            vec![mean],
            KernelParams::unit(ls).unwrap(),
            CorrelationFactor::new(1, vec![sd]).unwrap(),
        )
        .unwrap()
    }

    fn draw(
        params: &StationaryParams,
        n_sets: usize,
        per_set: usize,
        gap: f64,
        seed: u64,
    ) -> Vec<ObservationSet> {
        let d = params.dim();
        (0..n_sets)
            .map(|k| {
                let times: Vec<(usize, f64)> = (0..per_set)
                    .flat_map(|i| (0..d).map(move |s| (s, i as f64 * gap)))
                    .collect();
                sample_path(
                    &ExpertParams::Stationary(params.clone()),
                    &times,
                    None,
                    seed + k as u64,
                    JitterLadder::default(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for free in [false, true] {
            let truth = StationaryParams::new(
                vec![1.0, -2.0],
                KernelParams::unit(2.0).unwrap(),
                CorrelationFactor::new(2, vec![1.0, 0.6, 0.7]).unwrap(),
            )
            .unwrap();
            let sets = draw(&truth, 3, 6, 1.3, 5);
            let data = FitData::unweighted(2, &sets).unwrap();
            let (lo, hi) = length_scale_bounds(sets.iter().map(|s| s.samples()));
            let layout = Layout {
                dim: 2,
                log_lo: lo.ln(),
                log_hi: hi.ln(),
                free_variance: free,
            };
            let obj = Objective {
                layout,
                prepared: data
                    .sets
                    .iter()
                    .map(|(s, w)| Prepared::new(s, *w * 0.7))
                    .collect(),
                observed: vec![true, true],
                init_mean: &truth.mean,
                fixed_variance: 1.0,
                ladder: JitterLadder::default(),
                means: Default::default(),
            };
            let mut phi = vec![0.3, 0.1, 0.4, -0.2];
            if free {
                phi.push(0.2);
            }
            let (_, g, _) = obj.eval(&phi).unwrap();
            for i in 0..phi.len() {
                let h = 1e-5;
                let mut up = phi.clone();
                up[i] += h;
                let mut dn = phi.clone();
                dn[i] -= h;
                let fd = (obj.eval(&up).unwrap().0 - obj.eval(&dn).unwrap().0) / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "component {i}: fd {fd} vs {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn recovers_mean() {
        let truth = scalar(20.0, 2.0, 1.5);
        let sets = draw(&truth, 50, 10, 2.0, 100);
        let init = ExpertParams::Stationary(scalar(15.0, 1.0, 4.0));
        let fit = fit_mle(&sets, &init, None, &MleConfig::default()).unwrap();
        let ExpertParams::Stationary(p) = fit else {
            unreachable!()
        };
        assert!((p.mean[0] - 20.0).abs() < 0.5, "mean {}", p.mean[0]);
    }

    #[test]
    fn recovers_correlation() {
        let truth = StationaryParams::new(
            vec![0.0, 0.0],
            KernelParams::unit(1.0).unwrap(),
            CorrelationFactor::new(2, vec![1.0, 0.8, 0.6]).unwrap(),
        )
        .unwrap();
        let sets = draw(&truth, 20, 10, 3.0, 7);
        let init = ExpertParams::Stationary(
            StationaryParams::new(
                vec![0.0, 0.0],
                KernelParams::unit(2.0).unwrap(),
                CorrelationFactor::identity(2),
            )
            .unwrap(),
        );
        let ExpertParams::Stationary(p) =
            fit_mle(&sets, &init, None, &MleConfig::default()).unwrap()
        else {
            unreachable!()
        };
        let s = p.corr.sigma_dense();
        let rho = s[1] / (s[0] * s[3]).sqrt();
        assert!((rho - 0.8).abs() < 0.1, "rho {rho}");
    }

    #[test]
    fn never_worse_than_init() {
        let truth = scalar(3.0, 1.0, 2.0);
        let sets = draw(&truth, 5, 8, 1.0, 1);
        let data = FitData::unweighted(1, &sets).unwrap();
        let cfg = MleConfig {
            max_iter: 2,
            restarts: 0,
            ..MleConfig::default()
        };
        let first = fit_stationary_weighted(&data, &truth, false, &cfg).unwrap();
        let second = fit_stationary_weighted(&data, &first.params, false, &cfg).unwrap();
        assert!(first.log_likelihood >= data.log_likelihood(&truth, cfg.jitter).unwrap());
        assert!(second.log_likelihood >= first.log_likelihood);
    }

    #[test]
    fn degenerate_inputs() {
        let init = ExpertParams::Stationary(scalar(0.0, 1.0, 1.0));
        let cfg = MleConfig::default();
        assert!(matches!(
            fit_mle(&[ObservationSet::empty(1)], &init, None, &cfg),
            Err(Error::DegenerateData(_))
        ));
        let flat = ObservationSet::new(1, (0..4).map(|i| Sample::new(0, i as f64, 5.0)).collect())
            .unwrap();
        assert!(matches!(
            fit_mle(&[flat], &init, None, &cfg),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn epoch_fit_uses_offsets() {
        let blocks = vec![scalar(0.0, 1.0, 2.0), scalar(50.0, 1.0, 2.0)];
        let truth = ExpertParams::Epoch(EpochParams::new(blocks, 10.0).unwrap());
        let times: Vec<(usize, f64)> = (0..10).map(|i| (0, i as f64 * 2.0 + 0.5)).collect();
        let sets: Vec<ObservationSet> = (0..10)
            .map(|s| sample_path(&truth, &times, Some(1), s, JitterLadder::default()).unwrap())
            .collect();
        let init =
            ExpertParams::Epoch(EpochParams::replicated(&scalar(25.0, 5.0, 3.0), 2, 10.0).unwrap());
        let offsets = vec![1; sets.len()];
        let ExpertParams::Epoch(fit) =
            fit_mle(&sets, &init, Some(&offsets), &MleConfig::default()).unwrap()
        else {
            unreachable!()
        };
        assert!((fit.epochs[0].mean[0]).abs() < 1.5);
        assert!((fit.epochs[1].mean[0] - 50.0).abs() < 1.5);
    }
}
