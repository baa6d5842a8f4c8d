use serde::{Deserialize, Serialize};

use super::PatientRecord;
use crate::error::{Error, Result};
use crate::gp::{ObservationSet, Sample};

/// One patient's samples inside one epoch, with times relative to the epoch start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedFragment {
    /// Index of the patient in the input slice.
    pub patient: usize,
    pub samples: ObservationSet,
}

/// Deteriorating stays aligned on their end time: epoch `K` is the final
/// `T_1` window before ICU admission, epoch `K−1` the one before, and so on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedEpochDataset {
    pub epoch_duration: f64,
    /// `buckets[k−1]` holds the fragments of epoch `k`.
    pub buckets: Vec<Vec<AlignedFragment>>,
    /// Samples older than `K·T_1` before the end time.
    pub dropped: usize,
}

impl AlignedEpochDataset {
    pub fn num_epochs(&self) -> usize {
        self.buckets.len()
    }

    /// Fragment sample slices of epoch `k` (one-based).
    pub fn epoch_samples(&self, k: usize) -> impl Iterator<Item = &[Sample]> {
        self.buckets[k - 1].iter().map(|f| f.samples.samples())
    }
}

/// Epoch (one-based) and local time of a sample `d = T_end − t` hours before
/// the end of the stay, or `None` when it lies beyond `K` epochs.
///
/// `j = ⌈d/T_1⌉` windows back (at least one), local time `j·T_1 − d`. A sample
/// exactly at `T_end` is clamped to just below `T_1` in epoch `K`.
pub(crate) fn align_time(d: f64, epoch_duration: f64, num_epochs: usize) -> Option<(usize, f64)> {
    let j = ((d / epoch_duration).ceil() as usize).max(1);
    if j > num_epochs {
        return None;
    }
    let mut local = j as f64 * epoch_duration - d;
    if local >= epoch_duration {
        local = epoch_duration.next_down();
    }
    Some((num_epochs - j + 1, local.max(0.0)))
}

pub fn align_deteriorating(
    records: &[&PatientRecord],
    epoch_duration: f64,
    num_epochs: usize,
) -> Result<AlignedEpochDataset> {
    if !(epoch_duration.is_finite() && epoch_duration > 0.0) || num_epochs == 0 {
        return Err(Error::Config(format!(
            "epoch grid needs T_1 > 0 and K >= 1 (got T_1={epoch_duration}, K={num_epochs})"
        )));
    }
    let mut buckets: Vec<Vec<AlignedFragment>> = vec![Vec::new(); num_epochs];
    let mut dropped = 0;
    for (idx, r) in records.iter().enumerate() {
        let dim = r.stream.dim();
        let mut per_epoch: Vec<Vec<Sample>> = vec![Vec::new(); num_epochs];
        for s in r.stream.samples() {
            match align_time(r.end_time - s.time, epoch_duration, num_epochs) {
                Some((k, local)) => per_epoch[k - 1].push(Sample::new(s.stream, local, s.value)),
                None => dropped += 1,
            }
        }
        for (k, samples) in per_epoch.into_iter().enumerate() {
            if !samples.is_empty() {
                buckets[k].push(AlignedFragment {
                    patient: idx,
                    samples: ObservationSet::new(dim, samples)?,
                });
            }
        }
    }
    Ok(AlignedEpochDataset {
        epoch_duration,
        buckets,
        dropped,
    })
}
