//! Baseline nonconformity scores (LAC, RAPS, SAPS).
//!
//! Ranks treat ties in the softmax by lower class index: among equal
//! probabilities the smaller index ranks first. RAPS and SAPS consume one
//! uniform draw per sample, shared by every candidate label of that sample.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{LabelVector, SoftmaxMatrix};
use crate::error::{bail, Error, Result};
use crate::rng::uniform_draw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    Lac,
    Raps,
    Saps,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Lac, ScoreKind::Raps, ScoreKind::Saps];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Lac => "lac",
            ScoreKind::Raps => "raps",
            ScoreKind::Saps => "saps",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lac" => Ok(ScoreKind::Lac),
            "raps" => Ok(ScoreKind::Raps),
            "saps" => Ok(ScoreKind::Saps),
            other => bail!(
                Config,
                "unknown score kind {other:?} (expected lac, raps or saps)"
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RapsParams {
    pub lambda_raps: f64,
    pub k_reg: usize,
}

impl RapsParams {
    pub fn new(lambda_raps: f64, k_reg: usize) -> Result<Self> {
        if !(lambda_raps >= 0.0 && lambda_raps.is_finite()) {
            bail!(Config, "lambda_raps must be >= 0, got {lambda_raps}");
        }
        if k_reg < 1 {
            bail!(Config, "k_reg must be >= 1");
        }
        Ok(Self { lambda_raps, k_reg })
    }
}

impl Default for RapsParams {
    fn default() -> Self {
        Self {
            lambda_raps: 0.01,
            k_reg: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SapsParams {
    pub lambda_saps: f64,
}

impl SapsParams {
    pub fn new(lambda_saps: f64) -> Result<Self> {
        if !(lambda_saps > 0.0 && lambda_saps.is_finite()) {
            bail!(Config, "lambda_saps must be > 0, got {lambda_saps}");
        }
        Ok(Self { lambda_saps })
    }
}

impl Default for SapsParams {
    fn default() -> Self {
        Self { lambda_saps: 0.08 }
    }
}

/// A score kind together with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreFunction {
    pub kind: ScoreKind,
    pub raps: RapsParams,
    pub saps: SapsParams,
}

impl ScoreFunction {
    pub fn new(kind: ScoreKind) -> Self {
        Self {
            kind,
            raps: RapsParams::default(),
            saps: SapsParams::default(),
        }
    }

    pub fn lac() -> Self {
        Self::new(ScoreKind::Lac)
    }

    pub fn raps(params: RapsParams) -> Self {
        Self {
            raps: params,
            ..Self::new(ScoreKind::Raps)
        }
    }

    pub fn saps(params: SapsParams) -> Self {
        Self {
            saps: params,
            ..Self::new(ScoreKind::Saps)
        }
    }

    /// Whether the score consumes the per-sample uniform draw.
    pub fn is_randomized(&self) -> bool {
        self.kind != ScoreKind::Lac
    }

    /// Score of every class for one softmax row, written into `out`.
    pub fn score_all(&self, row: &[f64], u: f64, out: &mut [f64]) {
        debug_assert_eq!(row.len(), out.len());
        match self.kind {
            ScoreKind::Lac => {
                for (o, &p) in out.iter_mut().zip(row) {
                    *o = 1.0 - p;
                }
            }
            ScoreKind::Raps | ScoreKind::Saps => {
                let order = descending_order(row);
                let p_max = row[order[0]];
                // mass of classes with strictly larger probability
                let mut mass_above = 0.0;
                let mut block_mass = 0.0;
                let mut block_value = f64::NAN;
                for (pos, &y) in order.iter().enumerate() {
                    let p = row[y];
                    if p != block_value {
                        mass_above += block_mass;
                        block_mass = 0.0;
                        block_value = p;
                    }
                    block_mass += p;
                    let rank = pos + 1;
                    out[y] = match self.kind {
                        ScoreKind::Raps => {
                            let excess = rank.saturating_sub(self.raps.k_reg) as f64;
                            mass_above + self.raps.lambda_raps * excess + p * u
                        }
                        _ => saps_from_rank(p_max, rank, self.saps.lambda_saps, u),
                    };
                }
            }
        }
    }

    pub fn score(&self, row: &[f64], y: usize, u: f64) -> f64 {
        let mut out = vec![0.0; row.len()];
        self.score_all(row, u, &mut out);
        out[y]
    }
}

impl Default for ScoreFunction {
    fn default() -> Self {
        Self::lac()
    }
}

/// Class indices sorted by decreasing probability, ties by lower index.
pub fn descending_order(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

/// 1-based rank `o_x(y)` of class `y` in the row.
pub fn rank_of(row: &[f64], y: usize) -> usize {
    let p = row[y];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(c, &q)| q > p || (q == p && c < y))
        .count()
}

/// Argmax with ties resolved toward the lower class index.
pub fn predicted_class(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = c;
        }
    }
    best
}

pub fn lac_score(row: &[f64], y: usize) -> f64 {
    1.0 - row[y]
}

pub fn raps_score(row: &[f64], y: usize, params: RapsParams, u: f64) -> f64 {
    ScoreFunction::raps(params).score(row, y, u)
}

pub fn saps_score(row: &[f64], y: usize, params: SapsParams, u: f64) -> f64 {
    let p_max = row[predicted_class(row)];
    saps_from_rank(p_max, rank_of(row, y), params.lambda_saps, u)
}

fn saps_from_rank(p_max: f64, rank: usize, lambda_saps: f64, u: f64) -> f64 {
    if rank == 1 {
        u * p_max
    } else {
        p_max + ((rank - 2) as f64 + u) * lambda_saps
    }
}

/// Dense matrix of nonconformity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Which labels to score.
#[derive(Debug, Clone, Copy)]
pub enum ScoreTarget<'a> {
    /// Calibration mode: one column, the score of each sample's true label.
    TrueLabels(&'a LabelVector),
    /// Deployment mode: one column per class.
    AllClasses,
}

/// Scores every sample. Sample `i` uses the draw `uniform_draw(seed, i)`.
pub fn score_matrix(
    softmax: &SoftmaxMatrix,
    target: ScoreTarget<'_>,
    score_fn: &ScoreFunction,
    seed: u64,
) -> Result<ScoreMatrix> {
    let n = softmax.n_samples();
    let c = softmax.n_classes();
    match target {
        ScoreTarget::TrueLabels(labels) => {
            if labels.len() != n {
                bail!(Input, "{} labels for {n} softmax rows", labels.len());
            }
            let values = (0..n)
                .into_par_iter()
                .map(|i| score_fn.score(softmax.row(i), labels.get(i), uniform_draw(seed, i)))
                .collect();
            Ok(ScoreMatrix {
                rows: n,
                cols: 1,
                values,
            })
        }
        ScoreTarget::AllClasses => {
            let mut values = vec![0.0; n * c];
            values.par_chunks_mut(c).enumerate().for_each(|(i, out)| {
                score_fn.score_all(softmax.row(i), uniform_draw(seed, i), out)
            });
            Ok(ScoreMatrix {
                rows: n,
                cols: c,
                values,
            })
        }
    }
}
