//! Mapping admission features to subtype responsibilities, and training the
//! deteriorating-patient experts on randomly assigned subsets of the
//! deteriorating cohort.

use std::io::Write;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{align_deteriorating, AdmissionRecord, AlignedEpochDataset, PatientRecord};
use crate::error::{Error, Result};
use crate::gp::{
    fit_epoch_buckets, CorrelationFactor, EpochParams, KernelParams, MleConfig, Sample,
    StationaryParams,
};

/// Ridge added to the standardized normal equations when the features are
/// collinear.
pub const RIDGE: f64 = 1e-6;
/// Responsibility mass below which a subtype's class prior falls back to the
/// cohort rate.
pub const MIN_PRIOR_MASS: f64 = 10.0;
/// Deteriorating cohorts smaller than this get a uniform initial-epoch prior.
pub const MIN_EPOCH_PRIOR_COUNT: usize = 20;

/// Linear map from encoded admission features to subtype responsibilities,
/// followed by clipping to `[0, 1]` and renormalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponsibilityModel {
    /// `weights[z][s]`: coefficient of feature column `s` for subtype `z`.
    pub weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
}

/// One row of the feature-importance table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub rank: usize,
    pub feature: String,
    /// Mean absolute coefficient across subtypes.
    pub coefficient: f64,
}

impl ResponsibilityModel {
    /// Every input maps to `p`.
    pub fn constant(p: Vec<f64>, width: usize) -> Self {
        ResponsibilityModel {
            weights: vec![vec![0.0; width]; p.len()],
            intercepts: p,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.intercepts.len()
    }

    pub fn width(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    /// Raw linear predictions before post-processing.
    pub fn linear(&self, y: &AdmissionRecord) -> Result<Vec<f64>> {
        if y.features.len() != self.width() {
            return Err(Error::SchemaMismatch(format!(
                "admission record has {} columns, model expects {}",
                y.features.len(),
                self.width()
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.intercepts)
            .map(|(w, b)| b + w.iter().zip(&y.features).map(|(a, x)| a * x).sum::<f64>())
            .collect())
    }

    /// `β(y)`: a point of the `G`-simplex. When every raw prediction clips to
    /// zero the result is uniform.
    pub fn predict(&self, y: &AdmissionRecord) -> Result<Vec<f64>> {
        let mut beta: Vec<f64> = self
            .linear(y)?
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        let total: f64 = beta.iter().sum();
        if total > 0.0 {
            beta.iter_mut().for_each(|b| *b /= total);
        } else {
            let g = beta.len() as f64;
            beta.iter_mut().for_each(|b| *b = 1.0 / g);
        }
        Ok(beta)
    }

    /// Features ranked by mean absolute coefficient, largest first; ties keep
    /// column order.
    pub fn importance(&self, columns: &[String]) -> Result<Vec<ImportanceRow>> {
        if columns.len() != self.width() {
            return Err(Error::SchemaMismatch(format!(
                "{} column names for {} features",
                columns.len(),
                self.width()
            )));
        }
        let g = self.num_experts().max(1) as f64;
        let mut rows: Vec<(String, f64)> = columns
            .iter()
            .enumerate()
            .map(|(s, name)| {
                (
                    name.clone(),
                    self.weights.iter().map(|w| w[s].abs()).sum::<f64>() / g,
                )
            })
            .collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(rows
            .into_iter()
            .enumerate()
            .map(|(i, (feature, coefficient))| ImportanceRow {
                rank: i + 1,
                feature,
                coefficient,
            })
            .collect())
    }
}

/// Tab-separated `rank, feature, coefficient` rows with a header.
pub fn write_importance<W: Write>(rows: &[ImportanceRow], mut w: W) -> Result<()> {
    writeln!(w, "rank\tfeature\tcoefficient")?;
    for r in rows {
        writeln!(w, "{}\t{}\t{:.4}", r.rank, r.feature, r.coefficient)?;
    }
    Ok(())
}

/// Least-squares regression of each responsibility column on the features.
///
/// Columns are standardized internally; constant columns get a zero
/// coefficient. Collinear designs fall back to a ridge of [`RIDGE`].
pub fn fit_responsibilities(
    admissions: &[AdmissionRecord],
    responsibilities: &[Vec<f64>],
) -> Result<ResponsibilityModel> {
    let n = admissions.len();
    if n == 0 {
        return Err(Error::EmptyCohort);
    }
    if responsibilities.len() != n {
        return Err(Error::InvalidParams(format!(
            "{n} admission records but {} responsibility rows",
            responsibilities.len()
        )));
    }
    let g = responsibilities[0].len();
    if g == 0 {
        return Err(Error::InvalidParams("responsibility rows are empty".into()));
    }
    for (i, row) in responsibilities.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != g
            || row.iter().any(|v| !(0.0..=1.0).contains(v))
            || (sum - 1.0).abs() > 1e-6
        {
            return Err(Error::InvalidParams(format!(
                "responsibility row {i} is not a {g}-simplex point"
            )));
        }
    }
    let width = admissions[0].features.len();
    if let Some(a) = admissions.iter().find(|a| a.features.len() != width) {
        return Err(Error::SchemaMismatch(format!(
            "admission records have {} and {width} columns",
            a.features.len()
        )));
    }

    let nf = n as f64;
    let means: Vec<f64> = (0..width)
        .map(|s| admissions.iter().map(|a| a.features[s]).sum::<f64>() / nf)
        .collect();
    let scales: Vec<f64> = (0..width)
        .map(|s| {
            (admissions
                .iter()
                .map(|a| (a.features[s] - means[s]).powi(2))
                .sum::<f64>()
                / nf)
                .sqrt()
        })
        .collect();
    let active: Vec<usize> = (0..width)
        .filter(|&s| scales[s] > 1e-12 * (1.0 + means[s].abs()))
        .collect();
    let p = active.len();
    let x = DMatrix::from_fn(n, p, |r, c| {
        let s = active[c];
        (admissions[r].features[s] - means[s]) / scales[s]
    });
    let targets = DMatrix::from_fn(n, g, |r, z| responsibilities[r][z]);
    let target_means: Vec<f64> = (0..g).map(|z| targets.column(z).sum() / nf).collect();
    let centered = DMatrix::from_fn(n, g, |r, z| targets[(r, z)] - target_means[z]);

    let coef = if p == 0 {
        DMatrix::zeros(0, g)
    } else {
        let gram = x.transpose() * &x / nf;
        let rhs = x.transpose() * &centered / nf;
        let well_posed = gram
            .clone()
            .cholesky()
            .filter(|c| c.l().diagonal().iter().all(|d| d * d > 1e-10))
            .map(|c| c.solve(&rhs));
        match well_posed {
            Some(sol) => sol,
            None => {
                // complete indicator sets always sum to the intercept column
                info!("admission features are collinear; using ridge {RIDGE}");
                let ridged = gram + DMatrix::identity(p, p) * RIDGE;
                ridged
                    .cholesky()
                    .ok_or_else(|| {
                        Error::DegenerateData("ridge-regularized feature matrix is singular".into())
                    })?
                    .solve(&rhs)
            }
        }
    };

    let mut weights = vec![vec![0.0; width]; g];
    let mut intercepts = target_means;
    for z in 0..g {
        for (c, &s) in active.iter().enumerate() {
            let w = coef[(c, z)] / scales[s];
            weights[z][s] = w;
            intercepts[z] -= w * means[s];
        }
    }
    if weights
        .iter()
        .flatten()
        .chain(&intercepts)
        .any(|v| !v.is_finite())
    {
        return Err(Error::DegenerateData(
            "responsibility regression produced non-finite coefficients".into(),
        ));
    }
    Ok(ResponsibilityModel {
        weights,
        intercepts,
    })
}

/// Deteriorating-patient experts with their class and initial-epoch priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeterioratingExpertSet {
    pub experts: Vec<EpochParams>,
    /// `P(V = 1 | Z = z)`.
    pub class_prior: Vec<f64>,
    /// `f_k` over `k̄ ∈ [1, K]`.
    pub epoch_prior: Vec<f64>,
}

impl DeterioratingExpertSet {
    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() || self.experts.len() != self.class_prior.len() {
            return Err(Error::InvalidParams(format!(
                "{} deteriorating experts with {} class priors",
                self.experts.len(),
                self.class_prior.len()
            )));
        }
        for e in &self.experts {
            e.validate()?;
        }
        let k = self.experts[0].num_epochs();
        if self
            .experts
            .iter()
            .any(|e| e.num_epochs() != k || e.epoch_duration != self.experts[0].epoch_duration)
        {
            return Err(Error::InvalidParams(
                "deteriorating experts disagree on the epoch grid".into(),
            ));
        }
        if self.class_prior.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParams(
                "class priors must lie in [0, 1]".into(),
            ));
        }
        if self.epoch_prior.len() != k
            || self.epoch_prior.iter().any(|p| !(*p >= 0.0))
            || (self.epoch_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidParams(format!(
                "epoch prior must be a {k}-simplex"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfTaughtConfig {
    pub epoch_duration: f64,
    pub num_epochs: usize,
    pub mle: MleConfig,
    /// Per-epoch kernel amplitude instead of ω = 1.
    pub free_variance: bool,
    pub seed: u64,
}

impl Default for SelfTaughtConfig {
    fn default() -> Self {
        SelfTaughtConfig {
            epoch_duration: 24.0,
            num_epochs: 4,
            mle: MleConfig::default(),
            free_variance: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTaughtFit {
    pub experts: DeterioratingExpertSet,
    /// `|D_{1,z}|` per subtype.
    pub subset_sizes: Vec<usize>,
    /// Subtypes whose subset was empty and that use the pooled fit.
    pub fallbacks: Vec<usize>,
}

/// `Σ β_z v / Σ β_z` over the labeled cohort, or the cohort rate when the
/// subtype's mass is below [`MIN_PRIOR_MASS`].
pub fn class_priors(betas: &[Vec<f64>], labels: &[bool]) -> Result<Vec<f64>> {
    if betas.is_empty() || betas.len() != labels.len() {
        return Err(Error::InvalidParams(format!(
            "{} responsibility rows for {} labels",
            betas.len(),
            labels.len()
        )));
    }
    let g = betas[0].len();
    let rate = labels.iter().filter(|&&v| v).count() as f64 / labels.len() as f64;
    Ok((0..g)
        .map(|z| {
            let mass: f64 = betas.iter().map(|b| b[z]).sum();
            if mass < MIN_PRIOR_MASS {
                rate
            } else {
                let pos: f64 = betas
                    .iter()
                    .zip(labels)
                    .filter(|(_, &v)| v)
                    .map(|(b, _)| b[z])
                    .sum();
                (pos / mass).clamp(0.0, 1.0)
            }
        })
        .collect())
}

/// Initial epoch implied by a stay of `end_time` hours, clamped to `[1, K]`.
pub fn implied_initial_epoch(end_time: f64, epoch_duration: f64, num_epochs: usize) -> usize {
    let spanned = (end_time / epoch_duration).ceil().max(0.0) as usize;
    (num_epochs + 1)
        .saturating_sub(spanned)
        .clamp(1, num_epochs)
}

/// Add-one smoothed histogram of implied initial epochs; uniform for fewer
/// than [`MIN_EPOCH_PRIOR_COUNT`] stays.
pub fn epoch_prior(end_times: &[f64], epoch_duration: f64, num_epochs: usize) -> Vec<f64> {
    if end_times.len() < MIN_EPOCH_PRIOR_COUNT {
        return vec![1.0 / num_epochs as f64; num_epochs];
    }
    let mut counts = vec![1.0; num_epochs];
    for &t in end_times {
        counts[implied_initial_epoch(t, epoch_duration, num_epochs) - 1] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.into_iter().map(|c| c / total).collect()
}

fn pooled_block(samples: &[&Sample], dim: usize, length_scale: f64) -> Result<StationaryParams> {
    let mut mean = vec![0.0; dim];
    let mut sd = vec![1.0; dim];
    for i in 0..dim {
        let v: Vec<f64> = samples
            .iter()
            .filter(|s| s.stream == i)
            .map(|s| s.value)
            .collect();
        if v.is_empty() {
            continue;
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        mean[i] = m;
        if var.sqrt() > 1e-6 {
            sd[i] = var.sqrt();
        }
    }
    StationaryParams::new(
        mean,
        KernelParams::unit(length_scale)?,
        CorrelationFactor::diagonal(&sd)?,
    )
}

/// Starting point for the epoch fits: per-epoch pooled means and standard
/// deviations, `ℓ` five times the median within-stream gap.
fn initial_epochs(aligned: &AlignedEpochDataset, dim: usize) -> Result<EpochParams> {
    let mut gaps = Vec::new();
    for f in aligned.buckets.iter().flatten() {
        for i in 0..dim {
            let mut t: Vec<f64> = f
                .samples
                .samples()
                .iter()
                .filter(|s| s.stream == i)
                .map(|s| s.time)
                .collect();
            t.sort_by(f64::total_cmp);
            gaps.extend(t.windows(2).map(|w| w[1] - w[0]).filter(|g| *g > 0.0));
        }
    }
    gaps.sort_by(f64::total_cmp);
    let ell = if gaps.is_empty() {
        aligned.epoch_duration / 4.0
    } else {
        gaps[gaps.len() / 2]
    };
    let all: Vec<&Sample> = aligned
        .buckets
        .iter()
        .flatten()
        .flat_map(|f| f.samples.samples())
        .collect();
    let fallback = pooled_block(&all, dim, ell)?;
    let epochs = aligned
        .buckets
        .iter()
        .map(|b| {
            let s: Vec<&Sample> = b.iter().flat_map(|f| f.samples.samples()).collect();
            if s.is_empty() {
                Ok(fallback.clone())
            } else {
                pooled_block(&s, dim, ell)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    EpochParams::new(epochs, aligned.epoch_duration)
}

fn subset_buckets(
    aligned: &AlignedEpochDataset,
    member: impl Fn(usize) -> bool,
) -> Vec<Vec<Vec<Sample>>> {
    aligned
        .buckets
        .iter()
        .map(|b| {
            b.iter()
                .filter(|f| member(f.patient))
                .map(|f| f.samples.samples().to_vec())
                .collect()
        })
        .collect()
}

/// Draws `c_{n,z} ~ Bernoulli(β_z(y_n))` for every deteriorating patient and
/// fits expert `z` on the aligned epoch fragments of its subset.
///
/// `records` is the whole labeled cohort and `betas[n]` the predicted
/// responsibilities of `records[n]`. Class priors use every record; the epoch
/// fits and `f_k` use the deteriorating ones.
pub fn self_taught_fit(
    records: &[&PatientRecord],
    betas: &[Vec<f64>],
    cfg: &SelfTaughtConfig,
) -> Result<SelfTaughtFit> {
    if records.len() != betas.len() {
        return Err(Error::InvalidParams(format!(
            "{} records but {} responsibility rows",
            records.len(),
            betas.len()
        )));
    }
    let labels = records
        .iter()
        .map(|r| r.label.ok_or_else(|| Error::UnlabeledRecord(r.id.clone())))
        .collect::<Result<Vec<bool>>>()?;
    let det: Vec<usize> = (0..records.len()).filter(|&n| labels[n]).collect();
    if det.is_empty() {
        return Err(Error::DegenerateData(
            "no deteriorating patients to train on".into(),
        ));
    }
    let g = betas[0].len();
    let dim = records[0].stream.dim();
    let det_records: Vec<&PatientRecord> = det.iter().map(|&n| records[n]).collect();
    let aligned = align_deteriorating(&det_records, cfg.epoch_duration, cfg.num_epochs)?;
    if aligned.buckets.iter().all(Vec::is_empty) {
        return Err(Error::DegenerateData(
            "deteriorating patients have no samples inside the epoch window".into(),
        ));
    }
    let mut init = initial_epochs(&aligned, dim)?;
    init.free_variance = cfg.free_variance;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut members = vec![vec![false; det.len()]; g];
    for (i, &n) in det.iter().enumerate() {
        for z in 0..g {
            members[z][i] = rng.random_bool(betas[n][z].clamp(0.0, 1.0));
        }
    }
    let subset_sizes: Vec<usize> = members
        .iter()
        .map(|m| m.iter().filter(|&&c| c).count())
        .collect();

    let fits: Vec<Option<EpochParams>> = members
        .par_iter()
        .zip(&subset_sizes)
        .map(|(m, &size)| {
            if size == 0 {
                return Ok(None);
            }
            let buckets = subset_buckets(&aligned, |p| m[p]);
            fit_epoch_buckets(&buckets, &init, &cfg.mle).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    let fallbacks: Vec<usize> = (0..g).filter(|&z| fits[z].is_none()).collect();
    let pooled = if fallbacks.is_empty() {
        None
    } else {
        warn!("subtypes {fallbacks:?} drew no deteriorating patients; using the pooled fit");
        Some(fit_epoch_buckets(
            &subset_buckets(&aligned, |_| true),
            &init,
            &cfg.mle,
        )?)
    };
    let experts = fits
        .into_iter()
        .map(|f| f.unwrap_or_else(|| pooled.clone().expect("pooled fit exists for fallbacks")))
        .collect();

    let end_times: Vec<f64> = det_records.iter().map(|r| r.end_time).collect();
    let set = DeterioratingExpertSet {
        experts,
        class_prior: class_priors(betas, &labels)?,
        epoch_prior: epoch_prior(&end_times, cfg.epoch_duration, cfg.num_epochs),
    };
    set.validate()?;
    Ok(SelfTaughtFit {
        experts: set,
        subset_sizes,
        fallbacks,
    })
}
