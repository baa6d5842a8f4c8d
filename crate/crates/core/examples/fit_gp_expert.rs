//! Sample irregular two-stream paths from a known multitask GP expert and
//! recover its parameters by maximum likelihood.
//!
//! cargo run --release --example fit_gp_expert

use mgp_risk::gp::{
    fit_mle, log_marginal_likelihood, sample_path, CorrelationFactor, ExpertParams, JitterLadder,
    KernelParams, MleConfig, StationaryParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mgp_risk::Result<()> {
    // heart rate and systolic pressure, negatively coupled
    let truth = StationaryParams::new(
        vec![85.0, 130.0],
        KernelParams::unit(3.0)?,
        CorrelationFactor::new(2, vec![6.0, -2.5, 4.0])?,
    )?;
    let expert = ExpertParams::Stationary(truth.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut sets = Vec::new();
    for p in 0..40 {
        let mut times = Vec::new();
        for stream in 0..2 {
            let mut t = rng.random_range(0.0..2.0);
            while t < 48.0 {
                times.push((stream, t));
                t += rng.random_range(1.0..4.0);
            }
        }
        sets.push(sample_path(
            &expert,
            &times,
            None,
            100 + p,
            JitterLadder::default(),
        )?);
    }

    let init = ExpertParams::Stationary(StationaryParams::new(
        vec![80.0, 120.0],
        KernelParams::unit(1.5)?,
        CorrelationFactor::diagonal(&[5.0, 5.0])?,
    )?);
    let fitted = match fit_mle(&sets, &init, None, &MleConfig::default())? {
        ExpertParams::Stationary(p) => p,
        ExpertParams::Epoch(_) => unreachable!("stationary init gives a stationary fit"),
    };

    let ll = |p: &StationaryParams| -> mgp_risk::Result<f64> {
        sets.iter()
            .map(|o| {
                log_marginal_likelihood(
                    &ExpertParams::Stationary(p.clone()),
                    o,
                    None,
                    JitterLadder::default(),
                )
            })
            .sum()
    };
    println!("parameter\ttrue\tfitted");
    println!("mean_hr\t{}\t{:.2}", truth.mean[0], fitted.mean[0]);
    println!("mean_sbp\t{}\t{:.2}", truth.mean[1], fitted.mean[1]);
    println!(
        "length_scale\t{}\t{:.3}",
        truth.kernel.length_scale, fitted.kernel.length_scale
    );
    let (s, f) = (truth.corr.sigma(), fitted.corr.sigma());
    for (name, (r, c)) in [
        ("var_hr", (0, 0)),
        ("cov_hr_sbp", (1, 0)),
        ("var_sbp", (1, 1)),
    ] {
        println!("{name}\t{}\t{:.2}", s[(r, c)], f[(r, c)]);
    }
    println!(
        "\nlog-likelihood at truth {:.2}, at fit {:.2}",
        ll(&truth)?,
        ll(&fitted)?
    );
    Ok(())
}
