//! Builds the cosine similarity of centered class means from synthetic
//! features and shows that classes in the same group come out similar.
//!
//! `cargo run --example class_similarity`

use simconf::data::ClassPartition;
use simconf::similarity::{class_means, cosine_similarity_matrix, PenaltySource};
use simconf::synth::{synth_features, FeatureConfig};

fn main() -> simconf::Result<()> {
    let partition = ClassPartition::equal_blocks(3, 3)?;
    let features = synth_features(&partition, &FeatureConfig::default())?;
    let m = cosine_similarity_matrix(&class_means(&features, partition.n_classes())?);
    for a in 0..m.n_classes() {
        let row: Vec<String> = (0..m.n_classes())
            .map(|b| format!("{:5.2}", m.get(a, b)))
            .collect();
        println!(
            "class {a} (group {}): {}",
            partition.group_of(a),
            row.join(" ")
        );
    }
    let soft = PenaltySource::MsSoft(m);
    let binary = PenaltySource::MaBinary(partition);
    println!(
        "penalty(1, 0): soft {:.3}, binary {}",
        soft.penalty(1, 0),
        binary.penalty(1, 0)
    );
    println!(
        "penalty(5, 0): soft {:.3}, binary {}",
        soft.penalty(5, 0),
        binary.penalty(5, 0)
    );
    Ok(())
}
