//! Train the full model on a synthetic cohort, inspect what the admission
//! regression learned, and follow one deteriorating patient's risk in real time.
//!
//! cargo run --release --example train_and_score

use mgp_risk::config::Config;
use mgp_risk::online::{score_stream, ScoringSession};
use mgp_risk::pipeline::train_model;
use mgp_risk::synth::{fixtures, generate_cohort};
use mgp_risk::transfer::write_importance;

fn main() -> mgp_risk::Result<()> {
    let spec = fixtures::two_subtype();
    let (train, _) = generate_cohort(&spec, 300, 21)?;
    let cfg = Config {
        num_epochs: spec.num_epochs,
        epoch_duration: spec.epoch_duration,
        fixed_g: Some(2),
        ..Default::default()
    };
    let report = train_model(&train, &cfg, 5)?;
    let model = &report.model;

    println!("admission-feature importance:");
    write_importance(&report.importance, std::io::stdout().lock())?;
    println!(
        "\ndeteriorating patients per subtype: {:?}",
        report.subset_sizes
    );
    println!(
        "class prior per subtype: {:.3?}",
        model.deteriorating.class_prior
    );
    println!(
        "initial-epoch prior: {:.3?}",
        model.deteriorating.epoch_prior
    );

    let (test, _) = generate_cohort(&spec, 40, 22)?;
    let patient = test
        .patients
        .iter()
        .find(|p| p.label == Some(true))
        .expect("a deteriorating patient");
    println!(
        "\npatient {} (ICU at {:.1} h), gender {}",
        patient.id, patient.end_time, patient.admission["gender"]
    );
    let traj = score_stream(model, patient, Some(0.5))?;
    match traj.stopping_time {
        Some(ts) => println!(
            "alarm at {ts:.1} h, {:.1} h before ICU admission",
            patient.end_time - ts
        ),
        None => println!("no alarm at eta = 0.5"),
    }

    // the same scores, one arrival at a time
    let admission = model.admission.encode(&patient.admission)?;
    let mut session = ScoringSession::new(model, &admission)?;
    println!(
        "\ntime\trisk\tresponsibilities {:.3?}",
        session.responsibilities()
    );
    for s in patient.stream.sorted_by_time().samples().iter().take(8) {
        session.push(*s)?;
        let p = session.point(s.time)?;
        println!("{:.2}\t{:.4}", p.time, p.risk);
    }
    Ok(())
}
