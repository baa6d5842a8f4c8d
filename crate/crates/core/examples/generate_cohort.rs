//! Sample a cohort from a built-in generative fixture, write it in the cohort
//! text format with its ground-truth sidecar, and read it back.
//!
//! cargo run --release --example generate_cohort -- six-subtype 50

use mgp_risk::cohort::{parse_cohort, write_cohort};
use mgp_risk::synth::{fixtures, generate_cohort, write_ground_truth};

fn main() -> mgp_risk::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "two-subtype".into());
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let spec = fixtures::by_name(&name)
        .ok_or_else(|| mgp_risk::Error::Config(format!("fixtures: {:?}", fixtures::NAMES)))?;

    let (cohort, truth) = generate_cohort(&spec, n, 2024)?;
    let mut text = Vec::new();
    write_cohort(&cohort, &mut text)?;
    let back = parse_cohort(text.as_slice())?;
    assert_eq!(back, cohort, "text format round-trips");

    let deteriorating = cohort
        .patients
        .iter()
        .filter(|p| p.label == Some(true))
        .count();
    let samples: usize = cohort.patients.iter().map(|p| p.stream.len()).sum();
    println!(
        "{name}: {n} patients, {deteriorating} deteriorating, {samples} samples, {} bytes",
        text.len()
    );
    println!("\nfirst lines of the cohort file:");
    for line in String::from_utf8_lossy(&text).lines().take(6) {
        println!("  {line}");
    }
    println!("\nsidecar:");
    write_ground_truth(&truth[..truth.len().min(6)], std::io::stdout().lock())?;
    Ok(())
}
