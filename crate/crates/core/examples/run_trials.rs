//! Repeated 20/80 splits comparing standard CP, MA-CS, MS-CS and MA-Diag
//! with tuned lambda.
//!
//! `cargo run --release --example run_trials`

use simconf::metrics::{run_trials, LambdaChoice, Method, MethodConfig, TrialProtocol};
use simconf::scores::ScoreFunction;
use simconf::similarity::{class_means, cosine_similarity_matrix, PenaltySource};
use simconf::synth::{generate, synth_features, FeatureConfig, SynthConfig};
use simconf::tuning::LambdaGrid;

fn main() -> simconf::Result<()> {
    let data = generate(&SynthConfig::default())?;
    let features = synth_features(&data.partition, &FeatureConfig::default())?;
    let similarity = cosine_similarity_matrix(&class_means(&features, data.partition.n_classes())?);
    let tuned = |source| Method::Penalized {
        source,
        lambda: LambdaChoice::Tuned(LambdaGrid::default()),
    };
    let methods = [
        Method::Standard,
        tuned(PenaltySource::MaBinary(data.partition.clone())),
        tuned(PenaltySource::MsSoft(similarity)),
        tuned(PenaltySource::MaDiag),
    ];
    let protocol = TrialProtocol {
        n_trials: 20,
        ..TrialProtocol::default()
    };
    println!(
        "{:>9} {:>14} {:>14} {:>14}",
        "method", "size", "superclasses", "coverage"
    );
    for method in methods {
        let config = MethodConfig {
            score: ScoreFunction::lac(),
            method,
            alpha: 0.1,
            metrics_partition: Some(data.partition.clone()),
        };
        let g = run_trials(&data.softmax, &data.labels, &protocol, &config)?.aggregate;
        let sc = g.avg_superclasses.unwrap();
        println!(
            "{:>9} {:>7.2} ± {:<4.2} {:>7.2} ± {:<4.2} {:>7.3} ± {:.3}",
            config.method.name(),
            g.avg_size.mean,
            g.avg_size.std,
            sc.mean,
            sc.std,
            g.coverage.mean,
            g.coverage.std
        );
    }
    Ok(())
}
