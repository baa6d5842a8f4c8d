//! Ground-truth cohort generator: subtype, then admission features, then
//! clinical status, then stream values drawn from the matching GP expert.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, PatientRecord};
use crate::error::{Error, Result};
use crate::gp::{sample_path, EpochParams, ExpertParams, JitterLadder, StationaryParams};

/// Per-subtype law of one admission feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum FeatureLaw {
    /// Rounded to one decimal when written.
    Gaussian { mean: f64, sd: f64 },
    Categorical {
        levels: Vec<String>,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtypeSpec {
    /// `P(Z = z)`; normalized across subtypes.
    pub weight: f64,
    /// `P(V = 1 | Z = z)`.
    pub class_prior: f64,
    pub stable: StationaryParams,
    pub deteriorating: EpochParams,
    #[serde(default)]
    pub features: BTreeMap<String, FeatureLaw>,
}

/// Log-normal stay length of stable patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StayLaw {
    pub median: f64,
    pub sigma_log: f64,
    pub min: f64,
}

impl Default for StayLaw {
    fn default() -> Self {
        StayLaw {
            median: 96.0,
            sigma_log: 0.5,
            min: 2.0,
        }
    }
}

fn default_gaps() -> (f64, f64) {
    (1.0, 4.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeSpec {
    pub streams: Vec<String>,
    pub epoch_duration: f64,
    pub num_epochs: usize,
    pub subtypes: Vec<SubtypeSpec>,
    /// `f_k` over the initial epoch `k̄ ∈ [1, K]`.
    pub epoch_prior: Vec<f64>,
    /// Inter-sample gap range per stream, hours.
    #[serde(default = "default_gaps")]
    pub gap_range: (f64, f64),
    #[serde(default)]
    pub stay: StayLaw,
}

/// Hidden variables of one generated patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: String,
    pub subtype: usize,
    /// `k̄` for deteriorating patients.
    pub initial_epoch: Option<usize>,
}

impl GenerativeSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GenerativeSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.streams.len()
    }

    pub fn num_subtypes(&self) -> usize {
        self.subtypes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.streams.is_empty() || self.subtypes.is_empty() {
            return bad("spec needs at least one stream and one subtype".into());
        }
        if !(self.epoch_duration > 0.0) || self.num_epochs == 0 {
            return bad("spec needs T_1 > 0 and K >= 1".into());
        }
        if self.epoch_prior.len() != self.num_epochs
            || self.epoch_prior.iter().any(|p| !(*p >= 0.0))
            || (self.epoch_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!("epoch prior must be a {}-simplex", self.num_epochs));
        }
        let (lo, hi) = self.gap_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("invalid gap range ({lo}, {hi})"));
        }
        if !(self.stay.median > 0.0 && self.stay.sigma_log >= 0.0 && self.stay.min >= 0.0) {
            return bad("invalid stay-length law".into());
        }
        if self.subtypes.iter().map(|s| s.weight).sum::<f64>() <= 0.0 {
            return bad("subtype weights must not all be zero".into());
        }
        for (z, s) in self.subtypes.iter().enumerate() {
            if !(s.weight >= 0.0) || !(0.0..=1.0).contains(&s.class_prior) {
                return bad(format!(
                    "subtype {z}: weight must be >= 0 and class prior in [0, 1]"
                ));
            }
            s.stable.validate()?;
            s.deteriorating.validate()?;
            if s.stable.dim() != self.dim() || s.deteriorating.dim() != self.dim() {
                return bad(format!(
                    "subtype {z}: parameter dimension differs from {} streams",
                    self.dim()
                ));
            }
            if s.deteriorating.num_epochs() != self.num_epochs
                || s.deteriorating.epoch_duration != self.epoch_duration
            {
                return bad(format!(
                    "subtype {z}: deteriorating expert disagrees with (K, T_1)"
                ));
            }
            for (name, law) in &s.features {
                match law {
                    FeatureLaw::Gaussian { sd, .. } if !(*sd >= 0.0) => {
                        return bad(format!("feature {name}: sd must be >= 0"))
                    }
                    FeatureLaw::Categorical { levels, probs }
                        if levels.is_empty()
                            || levels.len() != probs.len()
                            || probs.iter().any(|p| !(*p >= 0.0)) =>
                    {
                        return bad(format!("feature {name}: levels and probabilities disagree"))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

fn draw_times(rng: &mut ChaCha8Rng, dim: usize, end: f64, gaps: (f64, f64)) -> Vec<(usize, f64)> {
    let mut times = Vec::new();
    for stream in 0..dim {
        let mut t = rng.random_range(0.0..=gaps.1);
        while t < end {
            times.push((stream, t));
            t += rng.random_range(gaps.0..=gaps.1);
        }
    }
    times.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    times
}

fn draw_patient(
    spec: &GenerativeSpec,
    id: String,
    seed: u64,
) -> Result<(PatientRecord, GroundTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = spec.subtypes.iter().map(|s| s.weight).collect();
    let z = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidParams(e.to_string()))?
        .sample(&mut rng);
    let sub = &spec.subtypes[z];

    let mut admission = BTreeMap::new();
    for (name, law) in &sub.features {
        let v = match law {
            FeatureLaw::Gaussian { mean, sd } => {
                let x = mean + sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
                format!("{:.1}", x)
            }
            FeatureLaw::Categorical { levels, probs } => {
                let i = WeightedIndex::new(probs)
                    .map_err(|e| Error::InvalidParams(e.to_string()))?
                    .sample(&mut rng);
                levels[i].clone()
            }
        };
        admission.insert(name.clone(), v);
    }

    let deteriorates = rng.random_bool(sub.class_prior);
    let (end, initial_epoch) = if deteriorates {
        let k = WeightedIndex::new(&spec.epoch_prior)
            .map_err(|e| Error::InvalidParams(e.to_string()))?
            .sample(&mut rng)
            + 1;
        (
            (spec.num_epochs - k + 1) as f64 * spec.epoch_duration,
            Some(k),
        )
    } else {
        let law = LogNormal::new(spec.stay.median.ln(), spec.stay.sigma_log)
            .map_err(|e| Error::InvalidParams(e.to_string()))?;
        (law.sample(&mut rng).max(spec.stay.min), None)
    };
    let times = draw_times(&mut rng, spec.dim(), end, spec.gap_range);
    let params = if deteriorates {
        ExpertParams::Epoch(sub.deteriorating.clone())
    } else {
        ExpertParams::Stationary(sub.stable.clone())
    };
    let stream = sample_path(
        &params,
        &times,
        initial_epoch,
        rng.random(),
        JitterLadder::default(),
    )?;
    Ok((
        PatientRecord {
            id: id.clone(),
            admission,
            stream,
            label: Some(deteriorates),
            end_time: end,
        },
        GroundTruth {
            id,
            subtype: z,
            initial_epoch,
        },
    ))
}

/// `n` patients with their hidden variables. Each patient draws from its own
/// seed, derived from `seed`, so output does not depend on thread scheduling.
pub fn generate_cohort(
    spec: &GenerativeSpec,
    n: usize,
    seed: u64,
) -> Result<(Cohort, Vec<GroundTruth>)> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n).map(|_| master.random()).collect();
    let width = n.saturating_sub(1).to_string().len().max(4);
    let drawn: Vec<Result<(PatientRecord, GroundTruth)>> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| draw_patient(spec, format!("p{i:0width$}"), s))
        .collect();
    let mut patients = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for d in drawn {
        let (p, t) = d?;
        patients.push(p);
        truth.push(t);
    }
    Ok((
        Cohort {
            streams: spec.streams.clone(),
            patients,
        },
        truth,
    ))
}

/// Tab-separated `id, subtype, initial_epoch` (`-` for stable patients).
pub fn write_ground_truth<W: Write>(truth: &[GroundTruth], mut w: W) -> Result<()> {
    writeln!(w, "id\tsubtype\tinitial_epoch")?;
    for t in truth {
        match t.initial_epoch {
            Some(k) => writeln!(w, "{}\t{}\t{k}", t.id, t.subtype)?,
            None => writeln!(w, "{}\t{}\t-", t.id, t.subtype)?,
        }
    }
    Ok(())
}

/// Canonical generator specifications.
pub mod fixtures {
    use super::GenerativeSpec;

    const HOMOGENEOUS: &str = include_str!("../fixtures/homogeneous.json");
    const TWO_SUBTYPE: &str = include_str!("../fixtures/two_subtype.json");
    const SIX_SUBTYPE: &str = include_str!("../fixtures/six_subtype.json");
    const EPOCH_SYNC: &str = include_str!("../fixtures/epoch_sync.json");

    fn load(text: &str) -> GenerativeSpec {
        GenerativeSpec::from_json(text).expect("bundled fixture is valid")
    }

    /// One subtype.
    pub fn homogeneous() -> GenerativeSpec {
        load(HOMOGENEOUS)
    }

    /// Two subtypes with stable means 130 and 138 and opposite drifts before
    /// deterioration; gender predicts the subtype.
    pub fn two_subtype() -> GenerativeSpec {
        load(TWO_SUBTYPE)
    }

    /// Six subtypes with stable means 110 to 150; each deteriorating trajectory
    /// drifts into a neighbour's stable range. Ward predicts the subtype.
    pub fn six_subtype() -> GenerativeSpec {
        load(SIX_SUBTYPE)
    }

    /// One subtype, `K = 3` epochs with means 100, 120, 140.
    pub fn epoch_sync() -> GenerativeSpec {
        load(EPOCH_SYNC)
    }

    pub fn by_name(name: &str) -> Option<GenerativeSpec> {
        match name {
            "homogeneous" => Some(homogeneous()),
            "two-subtype" | "two_subtype" => Some(two_subtype()),
            "six-subtype" | "six_subtype" => Some(six_subtype()),
            "epoch-sync" | "epoch_sync" => Some(epoch_sync()),
            _ => None,
        }
    }

    pub const NAMES: &[&str] = &["homogeneous", "two-subtype", "six-subtype", "epoch-sync"];
}
