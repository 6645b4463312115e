//! Fits the size slope at small lambda in a favorable and an adversarial
//! regime and compares it with the sign predicted from label frequencies.
//!
//! `cargo run --release --example theory_sign`

use simconf::scores::ScoreFunction;
use simconf::similarity::PenaltySource;
use simconf::synth::{estimate_size_curve, generate, SynthConfig};

fn main() -> simconf::Result<()> {
    for p0 in [0.9, 0.05] {
        let data = generate(&SynthConfig {
            in_group_mass: p0,
            seed: 4,
            ..SynthConfig::default()
        })?;
        let source = PenaltySource::MaBinary(data.partition.clone());
        let est = estimate_size_curve(
            &data,
            &ScoreFunction::lac(),
            &source,
            0.1,
            &[0.0, 0.02, 0.04, 0.06],
            4,
        )?;
        println!(
            "p0 {p0}: p0_hat {:.3}  n0 {:.1}  n1 {:.1}  slope {:8.2} ± {:.2}  sign {:>2}  predicted {:>2}",
            est.p0_hat, est.n0_bar, est.n1_bar, est.slope, est.slope_se, est.derivative_sign, est.predicted_sign
        );
    }
    Ok(())
}
