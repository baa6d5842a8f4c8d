//! Evaluate alarm policies on a held-out cohort: ROC, false alarms per true
//! alarm at fixed sensitivity, and lead time, against a memoryless z-score
//! comparator.
//!
//! cargo run --release --example evaluate_alarms

use mgp_risk::config::Config;
use mgp_risk::eval::{
    cohort_auc, false_alarm_table, lead_time_at_ppv, score_cohort, score_cohort_baseline,
    write_false_alarm_tsv, InstantThreshold,
};
use mgp_risk::pipeline::train_model;
use mgp_risk::synth::{fixtures, generate_cohort};

fn main() -> mgp_risk::Result<()> {
    let spec = fixtures::two_subtype();
    let (train, _) = generate_cohort(&spec, 300, 31)?;
    let (test, _) = generate_cohort(&spec, 300, 32)?;
    let cfg = Config {
        num_epochs: spec.num_epochs,
        epoch_duration: spec.epoch_duration,
        fixed_g: Some(2),
        ..Default::default()
    };
    let model = train_model(&train, &cfg, 1)?.model;

    let personalized = score_cohort(&model, &test.patients)?;
    let baseline = score_cohort_baseline(
        &InstantThreshold::from_model(&model, cfg.baseline_z),
        &test.patients,
    )?;
    println!(
        "AUC personalized {:.3}, baseline {:.3}",
        cohort_auc(&personalized)?,
        cohort_auc(&baseline)?
    );

    println!("\npersonalized false alarms:");
    write_false_alarm_tsv(
        &false_alarm_table(&personalized, &[0.25, 0.5, 0.75])?,
        std::io::stdout().lock(),
    )?;
    println!("\nbaseline false alarms:");
    write_false_alarm_tsv(
        &false_alarm_table(&baseline, &[0.25, 0.5, 0.75])?,
        std::io::stdout().lock(),
    )?;

    for ppv in [0.3, 0.5] {
        for (name, scores) in [("personalized", &personalized), ("baseline", &baseline)] {
            match lead_time_at_ppv(scores, ppv) {
                Ok((eta, lead)) => {
                    let lead = lead.map_or("n/a".to_string(), |h| format!("{h:.1} h"));
                    println!("{name}: PPV >= {ppv} from eta {eta:.3}, median lead {lead}")
                }
                Err(e) => println!("{name}: {e}"),
            }
        }
    }
    Ok(())
}
