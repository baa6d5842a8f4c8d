//! Parse a hand-written cohort file, encode admission features, split by
//! outcome, and align deteriorating stays on their ICU-admission time.
//!
//! cargo run --release --example cohort_format

use mgp_risk::cohort::{align_deteriorating, parse_cohort, partition, AdmissionSchema};

const COHORT: &str = "\
# two streams, three patients
streams sbp,hr
patient id=a label=0 t_end=30 age=71 ward=cardiac
sbp 0.5 128
hr 0.5 74
sbp 6 131
patient id=b label=1 t_end=50 age=64 ward=surgical
sbp 1 135
hr 2 96
sbp 27 142
hr 45 118
patient id=c label=1 t_end=20 age=NA ward=cardiac
sbp 3 139
hr 18 110
";

fn main() -> mgp_risk::Result<()> {
    let cohort = parse_cohort(COHORT.as_bytes())?;
    let schema = AdmissionSchema::infer(&cohort.patients);
    println!("encoded columns: {:?}", schema.column_names());
    for p in &cohort.patients {
        println!("{}: {:?}", p.id, schema.encode(&p.admission)?.features);
    }

    let (stable, det) = partition(&cohort.patients)?;
    println!("\n{} stable, {} deteriorating", stable.len(), det.len());
    let aligned = align_deteriorating(&det, 24.0, 3)?;
    for (k, bucket) in aligned.buckets.iter().enumerate() {
        let ids: Vec<String> = bucket
            .iter()
            .map(|f| format!("{}({})", det[f.patient].id, f.samples.len()))
            .collect();
        println!("epoch {}: {}", k + 1, ids.join(" "));
    }
    println!("samples older than the epoch grid: {}", aligned.dropped);
    Ok(())
}
