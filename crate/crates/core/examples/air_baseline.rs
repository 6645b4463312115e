//! Superclass-level sets by accumulating group mass, next to plain LAC sets.
//! AIR always returns whole groups.
//!
//! `cargo run --release --example air_baseline`

use simconf::metrics::{evaluate, random_split, run_split, Method, MethodConfig};
use simconf::scores::ScoreFunction;
use simconf::synth::{generate, SynthConfig};

fn main() -> simconf::Result<()> {
    let data = generate(&SynthConfig {
        n_groups: 17,
        group_size: 4,
        n_samples: 5000,
        in_group_mass: 0.95,
        concentration: 3.0,
        in_group_boost: 2.0,
        top_share: Some(0.8),
        seed: 2,
    })?;
    let (cal, test) = random_split(5000, 0.2, 2)?;
    let labels = data.labels.select(&test);
    for method in [Method::Standard, Method::Air(data.partition.clone())] {
        let config = MethodConfig {
            score: ScoreFunction::lac(),
            method,
            alpha: 0.1,
            metrics_partition: Some(data.partition.clone()),
        };
        let (_, q_hat, sets) = run_split(&data.softmax, &data.labels, &cal, &test, &config, 5, 5)?;
        let r = evaluate(&sets, &labels, Some(&data.partition), 0.1)?;
        println!(
            "{:>8}: q_hat {q_hat:.3}  size {:6.2}  superclasses {:5.2}  coverage {:.3}",
            config.method.name(),
            r.avg_size,
            r.avg_superclasses.unwrap_or(f64::NAN),
            r.marginal_coverage
        );
    }
    Ok(())
}
