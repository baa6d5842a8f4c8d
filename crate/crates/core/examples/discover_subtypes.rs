//! Discover latent subtypes among stable patients with EM and Bayes-factor
//! model selection, then compare the labeling with the generator's truth.
//!
//! cargo run --release --example discover_subtypes

use mgp_risk::eval::adjusted_rand_index;
use mgp_risk::subtype::{select_g, EmConfig};
use mgp_risk::synth::{fixtures, generate_cohort};

fn main() -> mgp_risk::Result<()> {
    let (cohort, truth) = generate_cohort(&fixtures::two_subtype(), 300, 11)?;
    let (data, labels): (Vec<_>, Vec<_>) = cohort
        .patients
        .iter()
        .zip(&truth)
        .filter(|(p, _)| p.label == Some(false))
        .map(|(p, t)| (p.stream.clone(), t.subtype))
        .unzip();
    println!("{} stable patients", data.len());

    let cfg = EmConfig {
        seed: 1,
        ..Default::default()
    };
    let (mixture, trace) = select_g(&data, &cfg, 1.0, 4)?;
    print!("{}", trace.to_tsv());
    println!("\nselected G = {}", trace.selected);
    for (z, (e, w)) in mixture.experts.iter().zip(&mixture.priors).enumerate() {
        println!(
            "subtype {z}: weight {w:.3}, mean {:.1}, sd {:.2}, length-scale {:.2} h",
            e.mean[0],
            e.corr.sigma()[(0, 0)].sqrt(),
            e.kernel.length_scale
        );
    }
    println!(
        "adjusted Rand index vs truth: {:.4}",
        adjusted_rand_index(&mixture.hard_labels(), &labels)?
    );
    Ok(())
}
