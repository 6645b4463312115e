//! Scores every class of a softmax row under LAC, RAPS and SAPS.
//!
//! `cargo run --example score_functions`

use simconf::scores::{descending_order, RapsParams, SapsParams, ScoreFunction};

fn main() {
    let row = [0.05, 0.5, 0.3, 0.15];
    let u = 0.4;
    let functions = [
        ScoreFunction::lac(),
        ScoreFunction::raps(RapsParams::new(0.1, 1).unwrap()),
        ScoreFunction::saps(SapsParams::new(0.08).unwrap()),
    ];
    println!(
        "row {row:?}, u = {u}, classes by rank {:?}",
        descending_order(&row)
    );
    for f in functions {
        let mut out = vec![0.0; row.len()];
        f.score_all(&row, u, &mut out);
        let shown: Vec<String> = out.iter().map(|s| format!("{s:.3}")).collect();
        println!("{:>5}: [{}]", f.kind, shown.join(", "));
    }
}
