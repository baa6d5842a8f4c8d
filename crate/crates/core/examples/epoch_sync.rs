//! Infer when a deteriorating patient's trajectory began: the posterior over
//! the initial epoch after one epoch of observations.
//!
//! cargo run --release --example epoch_sync

use mgp_risk::gp::{JitterLadder, ObservationSet};
use mgp_risk::online::epoch_posterior;
use mgp_risk::synth::{fixtures, generate_cohort};

fn main() -> mgp_risk::Result<()> {
    let spec = fixtures::epoch_sync();
    let det = &spec.subtypes[0].deteriorating;
    let (cohort, truth) = generate_cohort(&spec, 60, 8)?;

    println!("id\ttrue\tposterior");
    let (mut hits, mut total) = (0, 0);
    for (p, t) in cohort.patients.iter().zip(&truth) {
        let Some(k_true) = t.initial_epoch else {
            continue;
        };
        let first: Vec<_> = p
            .stream
            .samples()
            .iter()
            .filter(|s| s.time < spec.epoch_duration)
            .copied()
            .collect();
        if first.is_empty() {
            continue;
        }
        let post = epoch_posterior(
            det,
            &spec.epoch_prior,
            &ObservationSet::new(spec.dim(), first)?,
            JitterLadder::default(),
        )?;
        let k_hat = 1
            + (0..post.len())
                .max_by(|&a, &b| post[a].total_cmp(&post[b]))
                .expect("K >= 1");
        hits += usize::from(k_hat == k_true);
        total += 1;
        println!("{}\t{k_true}\t{:.3?}", p.id, post);
    }
    println!("\nargmax matches the generating epoch for {hits}/{total} patients");
    Ok(())
}
