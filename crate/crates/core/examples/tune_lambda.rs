//! Sweeps the default lambda grid on a calibration set and prints the size
//! curve the tuner picks its minimum from.
//!
//! `cargo run --release --example tune_lambda`

use simconf::scores::ScoreFunction;
use simconf::similarity::PenaltySource;
use simconf::synth::{generate, SynthConfig};
use simconf::tuning::{tune_lambda, LambdaGrid};

fn main() -> simconf::Result<()> {
    let data = generate(&SynthConfig {
        n_samples: 2000,
        seed: 3,
        ..SynthConfig::default()
    })?;
    let source = PenaltySource::MaBinary(data.partition.clone());
    let report = tune_lambda(
        &data.softmax,
        &data.labels,
        &LambdaGrid::default(),
        &ScoreFunction::lac(),
        &source,
        0.1,
        0,
        None,
    )?;
    for row in report.rows.iter().step_by(3) {
        println!(
            "lambda {:8.4}  size {:6.2}  superclasses {:5.2}",
            row.lambda,
            row.avg_size,
            row.avg_superclasses.unwrap_or(f64::NAN)
        );
    }
    println!("chosen lambda {:.4}", report.chosen_lambda);
    Ok(())
}
