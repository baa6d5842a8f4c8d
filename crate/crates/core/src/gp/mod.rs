//! Exact multitask Gaussian-process machinery.
//!
//! Every stream shares one squared-exponential temporal kernel; cross-stream
//! structure comes from a free-form correlation matrix `Σ = L·Lᵀ`. The
//! covariance between sample `a` (stream `i_a`, time `t_a`) and sample `b` is
//! `Σ(i_a, i_b) · k(t_a, t_b)`.
//!
//! Deteriorating patients use a sequence of such blocks ("epochs") of fixed
//! duration; samples in different epochs are independent.

mod fit;
mod gaussian;
mod optim;
mod sample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use fit::{fit_epoch_buckets, fit_weighted_from};
pub use fit::{
    fit_mle, fit_stationary_weighted, length_scale_bounds, FitData, MleConfig, WeightedFit,
};
pub use gaussian::{
    assemble_covariance, epoch_of, log_marginal_likelihood, stationary_log_likelihood,
    IncrementalGaussian,
};
pub use sample::sample_path;

/// Squared-exponential kernel `ω² · exp(−|t − t'|² / (2ℓ²))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Characteristic length-scale ℓ, in hours.
    pub length_scale: f64,
    /// Amplitude ω; the kernel is scaled by ω².
    pub variance: f64,
}

impl KernelParams {
    pub fn new(length_scale: f64, variance: f64) -> Result<Self> {
        let kp = KernelParams {
            length_scale,
            variance,
        };
        kp.validate()?;
        Ok(kp)
    }

    /// Kernel with ω fixed to one.
    pub fn unit(length_scale: f64) -> Result<Self> {
        Self::new(length_scale, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale.is_finite() && self.length_scale > 0.0) {
            return Err(Error::InvalidParams(format!(
                "length-scale must be positive, got {}",
                self.length_scale
            )));
        }
        if !(self.variance.is_finite() && self.variance > 0.0) {
            return Err(Error::InvalidParams(format!(
                "kernel variance must be positive, got {}",
                self.variance
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, t: f64, t_prime: f64) -> f64 {
        let d = t - t_prime;
        self.variance
            * self.variance
            * (-(d * d) / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Lower-triangular factor `L` of the stream correlation matrix, stored row-major
/// (`L[0][0], L[1][0], L[1][1], L[2][0], …`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationFactor {
    dim: usize,
    entries: Vec<f64>,
}

/// Dot product with four independent accumulators (shorter dependency chains
/// than a single running sum). Deterministic for a given length.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn tri_index(row: usize, col: usize) -> usize {
    debug_assert!(col <= row);
    row * (row + 1) / 2 + col
}

impl CorrelationFactor {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        let cf = CorrelationFactor { dim, entries };
        cf.validate()?;
        Ok(cf)
    }

    /// Diagonal factor with the given per-stream standard deviations.
    pub fn diagonal(std_devs: &[f64]) -> Result<Self> {
        let dim = std_devs.len();
        let mut entries = vec![0.0; dim * (dim + 1) / 2];
        for (i, &sd) in std_devs.iter().enumerate() {
            entries[tri_index(i, i)] = sd;
        }
        Self::new(dim, entries)
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim]).expect("identity factor is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidParams(
                "correlation factor needs D >= 1".into(),
            ));
        }
        let expected = self.dim * (self.dim + 1) / 2;
        if self.entries.len() != expected {
            return Err(Error::InvalidParams(format!(
                "correlation factor for D={} needs {} entries, got {}",
                self.dim,
                expected,
                self.entries.len()
            )));
        }
        if self.entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite correlation entry".into()));
        }
        for i in 0..self.dim {
            if self.entries[tri_index(i, i)] <= 0.0 {
                return Err(Error::InvalidParams(format!(
                    "diagonal entry {i} of the correlation factor must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn lower(&self, row: usize, col: usize) -> f64 {
        if col > row {
            0.0
        } else {
            self.entries[tri_index(row, col)]
        }
    }

    /// Dense `Σ = L·Lᵀ`, row-major `D×D`.
    pub fn sigma_dense(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| self.lower(i, k) * self.lower(j, k)).sum();
                out[i * d + j] = s;
                out[j * d + i] = s;
            }
        }
        out
    }

    pub fn sigma(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.dim, self.dim, &self.sigma_dense())
    }
}

/// Parameters of one stationary multitask GP: `{m, ℓ, L}` (and ω, tied to 1
/// for stable-patient experts).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryParams {
    pub mean: Vec<f64>,
    pub kernel: KernelParams,
    pub corr: CorrelationFactor,
}

impl StationaryParams {
    pub fn new(mean: Vec<f64>, kernel: KernelParams, corr: CorrelationFactor) -> Result<Self> {
        let p = StationaryParams { mean, kernel, corr };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.corr.dim()
    }

    /// `D(D+1)/2 + D + 1`.
    pub fn param_count(&self) -> usize {
        let d = self.dim();
        d * (d + 1) / 2 + d + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.corr.validate()?;
        if self.mean.len() != self.corr.dim() {
            return Err(Error::InvalidParams(format!(
                "mean has {} entries but correlation factor has D={}",
                self.mean.len(),
                self.corr.dim()
            )));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParams("non-finite mean".into()));
        }
        Ok(())
    }
}

/// Epoch-segmented parameters for deteriorating patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochParams {
    pub epochs: Vec<StationaryParams>,
    /// Epoch duration `T_1`, hours.
    pub epoch_duration: f64,
    /// Whether each epoch carries its own kernel amplitude ω instead of ω = 1.
    #[serde(default)]
    pub free_variance: bool,
}

impl EpochParams {
    pub fn new(epochs: Vec<StationaryParams>, epoch_duration: f64) -> Result<Self> {
        let p = EpochParams {
            epochs,
            epoch_duration,
            free_variance: false,
        };
        p.validate()?;
        Ok(p)
    }

    /// Every epoch starts from the same stationary block.
    pub fn replicated(
        block: &StationaryParams,
        num_epochs: usize,
        epoch_duration: f64,
    ) -> Result<Self> {
        Self::new(vec![block.clone(); num_epochs], epoch_duration)
    }

    pub fn num_epochs(&self) -> usize {
        self.epochs.len()
    }

    pub fn dim(&self) -> usize {
        self.epochs[0].dim()
    }

    pub fn param_count(&self) -> usize {
        let d = self.dim();
        let per_epoch = d * (d + 1) / 2 + d + if self.free_variance { 2 } else { 1 };
        self.num_epochs() * per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs.is_empty() {
            return Err(Error::InvalidParams("epoch parameters need K >= 1".into()));
        }
        if !(self.epoch_duration.is_finite() && self.epoch_duration > 0.0) {
            return Err(Error::InvalidParams(format!(
                "epoch duration must be positive, got {}",
                self.epoch_duration
            )));
        }
        let d = self.epochs[0].dim();
        for (k, e) in self.epochs.iter().enumerate() {
            e.validate()?;
            if e.dim() != d {
                return Err(Error::InvalidParams(format!(
                    "epoch {} has D={} (expected {d})",
                    k + 1,
                    e.dim()
                )));
            }
            if !self.free_variance && e.kernel.variance != 1.0 {
                return Err(Error::InvalidParams(format!(
                    "epoch {} has ω={} but ω is tied to 1",
                    k + 1,
                    e.kernel.variance
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum ExpertParams {
    Stationary(StationaryParams),
    Epoch(EpochParams),
}

impl ExpertParams {
    pub fn dim(&self) -> usize {
        match self {
            ExpertParams::Stationary(p) => p.dim(),
            ExpertParams::Epoch(p) => p.dim(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ExpertParams::Stationary(p) => p.param_count(),
            ExpertParams::Epoch(p) => p.param_count(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Zero-based stream index.
    pub stream: usize,
    /// Hours since ward admission.
    pub time: f64,
    pub value: f64,
}

impl Sample {
    pub fn new(stream: usize, time: f64, value: f64) -> Self {
        Sample {
            stream,
            time,
            value,
        }
    }
}

/// One patient's irregular multivariate samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    dim: usize,
    samples: Vec<Sample>,
}

impl ObservationSet {
    pub fn new(dim: usize, samples: Vec<Sample>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParams("observation set needs D >= 1".into()));
        }
        for s in &samples {
            Self::check(dim, s)?;
        }
        Ok(ObservationSet { dim, samples })
    }

    pub fn empty(dim: usize) -> Self {
        ObservationSet {
            dim,
            samples: Vec::new(),
        }
    }

    fn check(dim: usize, s: &Sample) -> Result<()> {
        if s.stream >= dim {
            return Err(Error::InvalidParams(format!(
                "stream index {} out of range for D={dim}",
                s.stream
            )));
        }
        if !(s.time.is_finite() && s.time >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "sample time {} must be finite and >= 0",
                s.time
            )));
        }
        if !s.value.is_finite() {
            return Err(Error::InvalidParams(format!(
                "non-finite sample value at t={}",
                s.time
            )));
        }
        Ok(())
    }

    pub fn push(&mut self, s: Sample) -> Result<()> {
        Self::check(self.dim, &s)?;
        self.samples.push(s);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copy with samples in (stable) time order.
    pub fn sorted_by_time(&self) -> Self {
        let mut samples = self.samples.clone();
        samples.sort_by(|a, b| a.time.total_cmp(&b.time));
        ObservationSet {
            dim: self.dim,
            samples,
        }
    }

    /// Samples with `time <= t`.
    pub fn up_to(&self, t: f64) -> Self {
        ObservationSet {
            dim: self.dim,
            samples: self
                .samples
                .iter()
                .copied()
                .filter(|s| s.time <= t)
                .collect(),
        }
    }

    pub fn last_time(&self) -> Option<f64> {
        self.samples.iter().map(|s| s.time).reduce(f64::max)
    }

    /// Samples with `time >= start`, re-expressed relative to `start`.
    pub fn window_from(&self, start: f64) -> Self {
        ObservationSet {
            dim: self.dim,
            samples: self
                .samples
                .iter()
                .filter(|s| s.time >= start)
                .map(|s| Sample::new(s.stream, s.time - start, s.value))
                .collect(),
        }
    }
}

/// Diagonal jitter schedule: start at `initial`, multiply by `factor` after each
/// failed factorization, give up past `max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterLadder {
    pub initial: f64,
    pub factor: f64,
    pub max: f64,
}

impl Default for JitterLadder {
    fn default() -> Self {
        JitterLadder {
            initial: 1e-6,
            factor: 10.0,
            max: 1e-2,
        }
    }
}

impl JitterLadder {
    /// The level after `current`, or `None` once the ladder is exhausted.
    pub fn next(&self, current: f64) -> Option<f64> {
        let n = current * self.factor;
        // tolerate rounding in repeated multiplication (1e-6 * 10^4 != 1e-2 exactly)
        (n <= self.max * (1.0 + 1e-9)).then_some(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.factor > 1.0 && self.max >= self.initial) {
            return Err(Error::Config(format!("invalid jitter ladder {self:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kernel_zero_distance_is_one() {
        let kp = KernelParams::unit(1.0).unwrap();
        assert_eq!(kp.eval(3.0, 3.0), 1.0);
    }

    #[test]
    fn kernel_flat_limit() {
        let kp = KernelParams::unit(1e9).unwrap();
        assert!((kp.eval(0.0, 5.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_one_length_scale_apart() {
        let kp = KernelParams::unit(1.0).unwrap();
        assert_relative_eq!(kp.eval(0.0, 1.0), 0.606_530_659_712_633_4, epsilon = 1e-12);
        assert_eq!(kp.eval(0.0, 1.0), kp.eval(1.0, 0.0));
    }

    #[test]
    fn rejects_bad_kernel() {
        assert!(KernelParams::new(0.0, 1.0).is_err());
        assert!(KernelParams::new(1.0, -1.0).is_err());
        assert!(KernelParams::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn sigma_from_factor() {
        let cf = CorrelationFactor::new(2, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(cf.sigma_dense(), vec![1.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn factor_requires_positive_diagonal() {
        assert!(CorrelationFactor::new(2, vec![1.0, 0.5, 0.0]).is_err());
        assert!(CorrelationFactor::new(2, vec![1.0, 0.5]).is_err());
    }

    #[test]
    fn param_counts() {
        let block = StationaryParams::new(
            vec![0.0; 3],
            KernelParams::unit(2.0).unwrap(),
            CorrelationFactor::identity(3),
        )
        .unwrap();
        assert_eq!(block.param_count(), 6 + 3 + 1);
        let mut ep = EpochParams::replicated(&block, 4, 24.0).unwrap();
        assert_eq!(ep.param_count(), 4 * 10);
        ep.free_variance = true;
        assert_eq!(ep.param_count(), 4 * 11);
    }

    #[test]
    fn tied_variance_is_enforced() {
        let mut block = StationaryParams::new(
            vec![0.0],
            KernelParams::unit(2.0).unwrap(),
            CorrelationFactor::identity(1),
        )
        .unwrap();
        block.kernel.variance = 2.0;
        assert!(EpochParams::new(vec![block], 24.0).is_err());
    }

    #[test]
    fn observation_validation() {
        assert!(ObservationSet::new(1, vec![Sample::new(1, 0.0, 1.0)]).is_err());
        assert!(ObservationSet::new(1, vec![Sample::new(0, -1.0, 1.0)]).is_err());
        assert!(ObservationSet::new(1, vec![Sample::new(0, 1.0, f64::NAN)]).is_err());
        assert!(ObservationSet::new(1, vec![]).unwrap().is_empty());
    }

    #[test]
    fn jitter_ladder_levels() {
        let l = JitterLadder::default();
        let mut levels = vec![l.initial];
        while let Some(n) = l.next(*levels.last().unwrap()) {
            levels.push(n);
        }
        assert_eq!(levels.len(), 5);
    }
}
