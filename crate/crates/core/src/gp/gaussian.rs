use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::{dot, tri_index, ExpertParams, JitterLadder, ObservationSet, Sample, StationaryParams};
use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Gaussian log-density of a growing sample set under one stationary block.
///
/// The covariance Cholesky factor is extended one row per appended sample, so
/// scoring a stream sample-by-sample costs `O(M²)` per arrival. Batch
/// evaluation appends every sample in order and therefore produces bit-identical
/// values to the online path.
#[derive(Clone, Debug)]
pub struct IncrementalGaussian {
    mean: Vec<f64>,
    sigma: Vec<f64>,
    dim: usize,
    /// `ω²` and `1/(2ℓ²)`.
    amp: f64,
    inv_two_l2: f64,
    ladder: JitterLadder,
    jitter: f64,
    samples: Vec<Sample>,
    /// Packed lower-triangular rows of the factor.
    chol: Vec<f64>,
    /// `L⁻¹ (x − m)`.
    whitened: Vec<f64>,
    log_diag_sum: f64,
    quad: f64,
}

impl IncrementalGaussian {
    pub fn new(params: &StationaryParams, ladder: JitterLadder) -> Self {
        IncrementalGaussian {
            mean: params.mean.clone(),
            sigma: params.corr.sigma_dense(),
            dim: params.dim(),
            amp: params.kernel.variance * params.kernel.variance,
            inv_two_l2: 1.0 / (2.0 * params.kernel.length_scale * params.kernel.length_scale),
            ladder,
            jitter: ladder.initial,
            samples: Vec::new(),
            chol: Vec::new(),
            whitened: Vec::new(),
            log_diag_sum: 0.0,
            quad: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Jitter currently on the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    #[inline]
    fn cov(&self, a: &Sample, b: &Sample) -> f64 {
        let d = a.time - b.time;
        self.sigma[a.stream * self.dim + b.stream] * self.amp * (-(d * d) * self.inv_two_l2).exp()
    }

    fn try_push(&mut self, s: Sample) -> bool {
        let n = self.samples.len();
        let mut c = Vec::with_capacity(n + 1);
        let mut row_sq = 0.0;
        let mut proj = 0.0;
        for j in 0..n {
            let row = &self.chol[tri_index(j, 0)..=tri_index(j, j)];
            let cj = (self.cov(&self.samples[j], &s) - dot(&row[..j], &c)) / row[j];
            row_sq += cj * cj;
            proj += cj * self.whitened[j];
            c.push(cj);
        }
        let d2 = self.cov(&s, &s) + self.jitter - row_sq;
        if !(d2 > 0.0 && d2.is_finite()) {
            return false;
        }
        let diag = d2.sqrt();
        let w = (s.value - self.mean[s.stream] - proj) / diag;
        if !w.is_finite() {
            return false;
        }
        c.push(diag);
        self.chol.extend_from_slice(&c);
        self.whitened.push(w);
        self.log_diag_sum += diag.ln();
        self.quad += w * w;
        self.samples.push(s);
        true
    }

    fn reset(&mut self) {
        self.chol.clear();
        self.whitened.clear();
        self.samples.clear();
        self.log_diag_sum = 0.0;
        self.quad = 0.0;
    }

    /// Append one sample, escalating the jitter (and refactoring) if the
    /// extended matrix is not numerically positive definite.
    pub fn push(&mut self, s: Sample) -> Result<()> {
        if s.stream >= self.dim {
            return Err(Error::InvalidParams(format!(
                "stream index {} out of range for D={}",
                s.stream, self.dim
            )));
        }
        if self.try_push(s) {
            return Ok(());
        }
        let mut pending = std::mem::take(&mut self.samples);
        pending.push(s);
        'ladder: loop {
            self.jitter = self
                .ladder
                .next(self.jitter)
                .ok_or(Error::NonPositiveDefinite {
                    jitter: self.jitter,
                })?;
            self.reset();
            for &p in &pending {
                if !self.try_push(p) {
                    continue 'ladder;
                }
            }
            return Ok(());
        }
    }

    pub fn extend<I: IntoIterator<Item = Sample>>(&mut self, samples: I) -> Result<()> {
        for s in samples {
            self.push(s)?;
        }
        Ok(())
    }

    /// `log N(x; m, K)` of the samples appended so far.
    pub fn log_likelihood(&self) -> f64 {
        -0.5 * self.quad - self.log_diag_sum - self.samples.len() as f64 * HALF_LN_2PI
    }

    /// `Σ_j L[row, j] z_j`.
    pub(crate) fn factor_row_dot(&self, row: usize, z: &[f64]) -> f64 {
        self.chol[tri_index(row, 0)..=tri_index(row, row)]
            .iter()
            .zip(z)
            .map(|(l, z)| l * z)
            .sum()
    }
}

/// Log-density of `samples` under a single stationary block.
pub fn stationary_log_likelihood(
    params: &StationaryParams,
    samples: &[Sample],
    ladder: JitterLadder,
) -> Result<f64> {
    let mut g = IncrementalGaussian::new(params, ladder);
    g.extend(samples.iter().copied())?;
    Ok(g.log_likelihood())
}

/// One-based epoch index of a sample time for a patient whose first epoch is
/// `offset`. Boundaries belong to the later epoch.
#[inline]
pub fn epoch_of(time: f64, epoch_duration: f64, offset: usize) -> usize {
    (time / epoch_duration).floor() as usize + offset
}

/// Covariance matrix of the observations under stationary parameters, with the
/// diagonal jitter needed for a successful Cholesky factorization.
pub fn assemble_covariance(
    params: &StationaryParams,
    obs: &ObservationSet,
    ladder: JitterLadder,
) -> Result<DMatrix<f64>> {
    check_dims(params.dim(), obs)?;
    let mut g = IncrementalGaussian::new(params, ladder);
    g.extend(obs.samples().iter().copied())?;
    let jitter = g.jitter();
    let sigma = params.corr.sigma_dense();
    let d = params.dim();
    let s = obs.samples();
    Ok(DMatrix::from_fn(s.len(), s.len(), |a, b| {
        let v = sigma[s[a].stream * d + s[b].stream] * params.kernel.eval(s[a].time, s[b].time);
        if a == b {
            v + jitter
        } else {
            v
        }
    }))
}

fn check_dims(dim: usize, obs: &ObservationSet) -> Result<()> {
    if obs.dim() != dim {
        return Err(Error::SchemaMismatch(format!(
            "observations have D={} but parameters have D={dim}",
            obs.dim()
        )));
    }
    Ok(())
}

/// Groups samples by one-based epoch, failing if any falls past epoch `K`.
pub(crate) fn split_epochs(
    obs: &ObservationSet,
    epoch_duration: f64,
    num_epochs: usize,
    offset: usize,
) -> Result<BTreeMap<usize, Vec<Sample>>> {
    let mut blocks: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in obs.samples() {
        let e = epoch_of(s.time, epoch_duration, offset);
        if e > num_epochs {
            return Err(Error::EpochOverflow {
                time: s.time,
                epoch: e,
                num_epochs,
            });
        }
        blocks.entry(e).or_default().push(*s);
    }
    Ok(blocks)
}

/// Marginal log-likelihood `log P(x | Θ)`.
///
/// For epoch parameters `epoch_offset` is the initial epoch `k̄ ∈ [1, K]`; a
/// sample at time `t` belongs to epoch `⌊t/T₁⌋ + k̄` and blocks are independent.
pub fn log_marginal_likelihood(
    params: &ExpertParams,
    obs: &ObservationSet,
    epoch_offset: Option<usize>,
    ladder: JitterLadder,
) -> Result<f64> {
    check_dims(params.dim(), obs)?;
    match params {
        ExpertParams::Stationary(p) => stationary_log_likelihood(p, obs.samples(), ladder),
        ExpertParams::Epoch(p) => {
            let k = p.num_epochs();
            let offset = epoch_offset.ok_or_else(|| {
                Error::InvalidParams("epoch parameters need an initial-epoch offset".into())
            })?;
            if offset == 0 || offset > k {
                return Err(Error::InvalidParams(format!(
                    "initial epoch {offset} outside [1, {k}]"
                )));
            }
            let blocks = split_epochs(obs, p.epoch_duration, k, offset)?;
            let mut total = 0.0;
            for (e, samples) in blocks {
                total += stationary_log_likelihood(&p.epochs[e - 1], &samples, ladder)?;
            }
            Ok(total)
        }
    }
}
