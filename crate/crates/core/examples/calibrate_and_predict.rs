//! Standard and group-penalized conformal sets on synthetic data, with the
//! same uniform draws so the two can be compared sample by sample.
//!
//! `cargo run --release --example calibrate_and_predict`

use simconf::conformal::{Penalty, ScoredSamples};
use simconf::metrics::{evaluate, random_split};
use simconf::scores::ScoreFunction;
use simconf::similarity::PenaltySource;
use simconf::synth::{generate, SynthConfig};

fn main() -> simconf::Result<()> {
    let data = generate(&SynthConfig {
        n_samples: 5000,
        seed: 1,
        ..SynthConfig::default()
    })?;
    let (cal, test) = random_split(5000, 0.2, 1)?;
    let scored = ScoredSamples::new(
        &data.softmax,
        &[cal.as_slice(), &test].concat(),
        &ScoreFunction::lac(),
        7,
    );
    let cal_pos: Vec<usize> = (0..cal.len()).collect();
    let test_pos: Vec<usize> = (cal.len()..scored.len()).collect();
    let test_labels = data.labels.select(&test);

    let source = PenaltySource::MaBinary(data.partition.clone());
    for lambda in [None, Some(0.1), Some(0.5)] {
        let penalty = lambda.map(|l| Penalty::new(&source, l));
        let t = scored.calibrate(&cal_pos, &data.labels, 0.1, penalty)?;
        let sets = scored.predict(&test_pos, t.q_hat, penalty);
        let r = evaluate(&sets, &test_labels, Some(&data.partition), 0.1)?;
        println!(
            "lambda {:>4}: q_hat {:.3}  size {:6.2}  superclasses {:5.2}  coverage {:.3}",
            lambda.map_or("none".into(), |l| l.to_string()),
            t.q_hat,
            r.avg_size,
            r.avg_superclasses.unwrap_or(f64::NAN),
            r.marginal_coverage
        );
    }
    Ok(())
}
