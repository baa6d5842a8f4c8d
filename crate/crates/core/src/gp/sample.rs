use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::gaussian::IncrementalGaussian;
use super::{epoch_of, ExpertParams, JitterLadder, ObservationSet, Sample, StationaryParams};
use crate::error::{Error, Result};

/// Draw stream values at the requested `(stream, time)` points from the exact
/// joint Gaussian. Output samples keep the request order.
///
/// Epoch parameters need `epoch_offset` (the initial epoch `k̄`); blocks in
/// different epochs are drawn independently.
pub fn sample_path(
    params: &ExpertParams,
    times: &[(usize, f64)],
    epoch_offset: Option<usize>,
    seed: u64,
    ladder: JitterLadder,
) -> Result<ObservationSet> {
    let dim = params.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; times.len()];
    match params {
        ExpertParams::Stationary(p) => {
            let idx: Vec<usize> = (0..times.len()).collect();
            draw_block(p, times, &idx, &mut rng, ladder, &mut values)?;
        }
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
            let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, &(_, t)) in times.iter().enumerate() {
                let e = epoch_of(t, p.epoch_duration, offset);
                if e > k {
                    return Err(Error::EpochOverflow {
                        time: t,
                        epoch: e,
                        num_epochs: k,
                    });
                }
                blocks[e - 1].push(i);
            }
            for (e, idx) in blocks.iter().enumerate() {
                if !idx.is_empty() {
                    draw_block(&p.epochs[e], times, idx, &mut rng, ladder, &mut values)?;
                }
            }
        }
    }
    let samples = times
        .iter()
        .zip(values)
        .map(|(&(stream, time), value)| Sample::new(stream, time, value))
        .collect();
    ObservationSet::new(dim, samples)
}

fn draw_block(
    params: &StationaryParams,
    times: &[(usize, f64)],
    idx: &[usize],
    rng: &mut ChaCha8Rng,
    ladder: JitterLadder,
    out: &mut [f64],
) -> Result<()> {
    let mut g = IncrementalGaussian::new(params, ladder);
    for &i in idx {
        let (stream, time) = times[i];
        // the factor does not depend on values; use the mean so residuals stay zero
        g.push(Sample::new(
            stream,
            time,
            *params.mean.get(stream).unwrap_or(&0.0),
        ))?;
    }
    let z: Vec<f64> = idx.iter().map(|_| StandardNormal.sample(rng)).collect();
    for (row, &i) in idx.iter().enumerate() {
        out[i] = params.mean[times[i].0] + g.factor_row_dot(row, &z);
    }
    Ok(())
}
