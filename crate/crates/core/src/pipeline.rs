//! Offline training: partition the cohort, discover subtypes among stable
//! patients, regress responsibilities on admission features, and train the
//! deteriorating experts.

use std::io::Write;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::cohort::{partition, AdmissionSchema, Cohort, PatientRecord};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{cohort_auc, score_cohort};
use crate::gp::ObservationSet;
use crate::online::TrainedModel;
use crate::subtype::{em_fit, penalty, select_g, MixtureState, ModelSelectionTrace, SelectionRow};
use crate::transfer::{fit_responsibilities, self_taught_fit, ImportanceRow, SelfTaughtConfig};

const SELF_TAUGHT_SEED: u64 = 0x5e1f_7a06;
const EXPERT_FIT_SEED: u64 = 0xde7e_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingReport {
    pub model: TrainedModel,
    pub selection: ModelSelectionTrace,
    /// Mixture fitted on the stable patients listed in `em_patients`.
    pub mixture: MixtureState,
    /// Indices into the cohort of the stable patients used for the mixture.
    pub em_patients: Vec<usize>,
    pub importance: Vec<ImportanceRow>,
    /// `|D_{1,z}|` per subtype.
    pub subset_sizes: Vec<usize>,
    pub timings: Vec<StepTiming>,
}

/// Fits the subtype mixture: Bayes-factor selection, or exactly `cfg.fixed_g`
/// experts.
pub fn fit_subtypes(
    data: &[ObservationSet],
    cfg: &Config,
    seed: u64,
) -> Result<(MixtureState, ModelSelectionTrace)> {
    let em = cfg.em_config(seed);
    match cfg.fixed_g {
        Some(g) => {
            let state = em_fit(data, g, &em)?;
            let trace = ModelSelectionTrace {
                rows: vec![SelectionRow {
                    g,
                    q_star: Some(state.log_likelihood),
                    penalty: penalty(g, data[0].dim()),
                    log_bayes_factor: None,
                    collapsed: false,
                }],
                threshold: cfg.bayes_threshold,
                selected: g,
            };
            Ok((state, trace))
        }
        None => select_g(data, &em, cfg.bayes_threshold, cfg.g_max),
    }
}

/// Trains a model on a labeled cohort. Deterministic for a given `seed`.
pub fn train_model(cohort: &Cohort, cfg: &Config, seed: u64) -> Result<TrainingReport> {
    cfg.validate()?;
    let cohort = match &cfg.streams {
        Some(names) => cohort.select_streams(names)?,
        None => cohort.clone(),
    };
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |step: &str, timings: &mut Vec<StepTiming>| {
        let seconds = clock.elapsed().as_secs_f64();
        info!("{step}: {seconds:.2} s");
        timings.push(StepTiming {
            step: step.to_string(),
            seconds,
        });
        clock = Instant::now();
    };

    let (stable, det) = partition(&cohort.patients)?;
    if stable.is_empty() {
        return Err(Error::NoNegatives);
    }
    if det.is_empty() {
        return Err(Error::NoPositives);
    }
    let em_patients: Vec<usize> = cohort
        .patients
        .iter()
        .enumerate()
        .filter(|(_, p)| p.label == Some(false) && !p.stream.is_empty())
        .map(|(i, _)| i)
        .collect();
    if em_patients.is_empty() {
        return Err(Error::DegenerateData(
            "no stable patient has any samples".into(),
        ));
    }
    lap("partition", &mut timings);

    let data: Vec<ObservationSet> = em_patients
        .iter()
        .map(|&i| cohort.patients[i].stream.clone())
        .collect();
    let (mixture, selection) = fit_subtypes(&data, cfg, seed)?;
    info!("selected G = {}", selection.selected);
    lap("subtypes", &mut timings);

    let schema = AdmissionSchema::infer(&cohort.patients);
    let em_admissions = em_patients
        .iter()
        .map(|&i| schema.encode(&cohort.patients[i].admission))
        .collect::<Result<Vec<_>>>()?;
    let rmodel = fit_responsibilities(&em_admissions, &mixture.responsibilities)?;
    let importance = rmodel.importance(&schema.column_names())?;
    lap("responsibilities", &mut timings);

    let records: Vec<&PatientRecord> = cohort.patients.iter().collect();
    let betas = records
        .iter()
        .map(|p| rmodel.predict(&schema.encode(&p.admission)?))
        .collect::<Result<Vec<_>>>()?;
    let st_cfg = SelfTaughtConfig {
        epoch_duration: cfg.epoch_duration,
        num_epochs: cfg.num_epochs,
        mle: cfg.expert_mle_config(seed.wrapping_add(EXPERT_FIT_SEED)),
        free_variance: cfg.free_variance,
        seed: seed.wrapping_add(SELF_TAUGHT_SEED),
    };
    let fit = self_taught_fit(&records, &betas, &st_cfg)?;
    lap("deteriorating experts", &mut timings);

    let model = TrainedModel {
        streams: cohort.streams.clone(),
        admission: schema,
        stable: mixture.experts.clone(),
        deteriorating: fit.experts,
        responsibilities: rmodel,
        subtype_priors: mixture.priors.clone(),
        global_prior: det.len() as f64 / cohort.len() as f64,
        jitter: cfg.jitter,
    };
    model.validate()?;
    Ok(TrainingReport {
        model,
        selection,
        mixture,
        em_patients,
        importance,
        subset_sizes: fit.subset_sizes,
        timings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub g: usize,
    /// Held-out AUC; `None` when the mixture collapsed at this `G`.
    pub auc: Option<f64>,
}

/// Trains one model per `G` on `train` with the subtype count forced, and
/// scores each on the held-out cohort.
pub fn g_sweep(
    train: &Cohort,
    test: &Cohort,
    cfg: &Config,
    gs: &[usize],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(gs.len());
    for &g in gs {
        let forced = Config {
            fixed_g: Some(g),
            ..cfg.clone()
        };
        let auc = match train_model(train, &forced, seed) {
            Ok(report) => {
                let held_out = test.conform_to(&report.model.streams)?;
                Some(cohort_auc(&score_cohort(
                    &report.model,
                    &held_out.patients,
                )?)?)
            }
            Err(Error::DegenerateCluster { expert, mass }) => {
                warn!("G={g}: expert {expert} collapsed (mass {mass:.3})");
                None
            }
            Err(e) => return Err(e),
        };
        info!("G={g}: held-out AUC {auc:?}");
        rows.push(SweepRow { g, auc });
    }
    Ok(rows)
}

pub fn write_sweep_tsv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(w, "G\tauc")?;
    for r in rows {
        match r.auc {
            Some(a) => writeln!(w, "{}\t{a}", r.g)?,
            None => writeln!(w, "{}\tNA", r.g)?,
        }
    }
    Ok(())
}
