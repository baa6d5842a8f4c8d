//! Patient records, admission-feature encoding, and the split/alignment steps
//! that prepare a labeled cohort for training.

mod align;
mod format;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::ObservationSet;

pub use align::{align_deteriorating, AlignedEpochDataset, AlignedFragment};
pub use format::{parse_cohort, read_cohort, validate_and_ingest, write_cohort, IngestMode};

/// Admission values treated as missing.
pub const MISSING: &[&str] = &["", "NA", "unknown"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// Raw admission key/value pairs as read from the cohort file.
    pub admission: BTreeMap<String, String>,
    pub stream: ObservationSet,
    /// `Some(true)` for ICU admission, `Some(false)` for discharge.
    pub label: Option<bool>,
    /// Discharge or ICU-admission time, hours since ward admission.
    pub end_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    /// Stream names; a sample's stream index points into this list.
    pub streams: Vec<String>,
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn dim(&self) -> usize {
        self.streams.len()
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// Keep only the named streams, in the given order.
    pub fn select_streams(&self, names: &[String]) -> Result<Cohort> {
        let mut map = vec![None; self.streams.len()];
        for (new, name) in names.iter().enumerate() {
            let old = self.streams.iter().position(|s| s == name).ok_or_else(|| {
                Error::SchemaMismatch(format!("stream `{name}` is not present in the cohort"))
            })?;
            map[old] = Some(new);
        }
        self.remap(names.to_vec(), &map)
    }

    /// Re-express the cohort in a model's stream order. Streams the model does
    /// not know are a schema mismatch; model streams absent here stay unobserved.
    pub fn conform_to(&self, names: &[String]) -> Result<Cohort> {
        let mut map = Vec::with_capacity(self.streams.len());
        for s in &self.streams {
            let idx = names.iter().position(|n| n == s).ok_or_else(|| {
                Error::SchemaMismatch(format!("stream `{s}` is not part of the model schema"))
            })?;
            map.push(Some(idx));
        }
        self.remap(names.to_vec(), &map)
    }

    fn remap(&self, streams: Vec<String>, map: &[Option<usize>]) -> Result<Cohort> {
        let dim = streams.len();
        let patients = self
            .patients
            .iter()
            .map(|p| {
                let samples = p
                    .stream
                    .samples()
                    .iter()
                    .filter_map(|s| {
                        map[s.stream].map(|i| crate::gp::Sample::new(i, s.time, s.value))
                    })
                    .collect();
                Ok(PatientRecord {
                    stream: ObservationSet::new(dim, samples)?,
                    ..p.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Cohort { streams, patients })
    }
}

/// Stable (`v = 0`) and deteriorating (`v = 1`) records, in input order.
pub fn partition(records: &[PatientRecord]) -> Result<(Vec<&PatientRecord>, Vec<&PatientRecord>)> {
    let mut stable = Vec::new();
    let mut det = Vec::new();
    for r in records {
        match r.label {
            Some(false) => stable.push(r),
            Some(true) => det.push(r),
            None => return Err(Error::UnlabeledRecord(r.id.clone())),
        }
    }
    Ok((stable, det))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    /// One column; missing values take the training median.
    Numeric { median: f64 },
    /// Reference coding against an implicit "unknown" level: one indicator
    /// column per listed level.
    Categorical { levels: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

/// Numeric encoding of admission key/value pairs, learned from a training cohort.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdmissionSchema {
    pub features: Vec<FeatureSpec>,
}

/// Encoded admission features `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissionRecord {
    pub features: Vec<f64>,
}

fn is_missing(v: &str) -> bool {
    MISSING.contains(&v)
}

impl AdmissionSchema {
    /// Features sorted by name. A feature is numeric when every non-missing
    /// value parses as a finite number.
    pub fn infer<'a, I>(records: I) -> Self
    where
        I: IntoIterator<Item = &'a PatientRecord>,
    {
        let mut values: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for r in records {
            for (k, v) in &r.admission {
                let e = values.entry(k.as_str()).or_default();
                if !is_missing(v) {
                    e.push(v.as_str());
                }
            }
        }
        let features = values
            .into_iter()
            .map(|(name, vals)| {
                let nums: Option<Vec<f64>> = vals
                    .iter()
                    .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
                    .collect();
                let kind = match nums {
                    Some(mut n) if !n.is_empty() => {
                        n.sort_by(f64::total_cmp);
                        FeatureKind::Numeric {
                            median: median_sorted(&n),
                        }
                    }
                    _ => {
                        let levels: BTreeSet<&str> = vals.into_iter().collect();
                        FeatureKind::Categorical {
                            levels: levels.into_iter().map(str::to_owned).collect(),
                        }
                    }
                };
                FeatureSpec {
                    name: name.to_owned(),
                    kind,
                }
            })
            .collect();
        AdmissionSchema { features }
    }

    /// Number of encoded columns `S`.
    pub fn width(&self) -> usize {
        self.features
            .iter()
            .map(|f| match &f.kind {
                FeatureKind::Numeric { .. } => 1,
                FeatureKind::Categorical { levels } => levels.len(),
            })
            .sum()
    }

    /// Column labels: `name` for numeric features, `name=level` for indicators.
    pub fn column_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.width());
        for f in &self.features {
            match &f.kind {
                FeatureKind::Numeric { .. } => out.push(f.name.clone()),
                FeatureKind::Categorical { levels } => {
                    out.extend(levels.iter().map(|l| format!("{}={l}", f.name)))
                }
            }
        }
        out
    }

    pub fn encode(&self, raw: &BTreeMap<String, String>) -> Result<AdmissionRecord> {
        if let Some(k) = raw
            .keys()
            .find(|k| !self.features.iter().any(|f| &f.name == *k))
        {
            return Err(Error::SchemaMismatch(format!(
                "unknown admission feature `{k}`"
            )));
        }
        let mut features = Vec::with_capacity(self.width());
        for f in &self.features {
            let v = raw
                .get(&f.name)
                .map(String::as_str)
                .filter(|v| !is_missing(v));
            match &f.kind {
                FeatureKind::Numeric { median } => {
                    let x =
                        match v {
                            None => *median,
                            Some(s) => s.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(
                                || {
                                    Error::SchemaMismatch(format!(
                                        "feature `{}` expects a number, got `{s}`",
                                        f.name
                                    ))
                                },
                            )?,
                        };
                    features.push(x);
                }
                FeatureKind::Categorical { levels } => {
                    let hit = match v {
                        None => None,
                        Some(s) => Some(levels.iter().position(|l| l == s).ok_or_else(|| {
                            Error::SchemaMismatch(format!(
                                "feature `{}` has unseen level `{s}`",
                                f.name
                            ))
                        })?),
                    };
                    features
                        .extend((0..levels.len()).map(|i| if Some(i) == hit { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok(AdmissionRecord { features })
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
