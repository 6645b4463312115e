//! Penalty sources: group-mismatch indicator from a class partition, soft
//! penalty from a feature-space similarity matrix, and the identity ablation.

use std::fmt;
use std::str::FromStr;

use crate::data::{ClassPartition, FeatureMatrix, Matrix, SimilarityMatrix};
use crate::error::{bail, Error, Result};

/// Centered means with norm at or below this are treated as directionless.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Per-class feature means and the mean of those means.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    pub means: Matrix,
    pub global_mean: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ClassMeans {
    pub fn n_classes(&self) -> usize {
        self.means.rows()
    }

    pub fn centered(&self, class: usize) -> Vec<f64> {
        self.means
            .row(class)
            .iter()
            .zip(&self.global_mean)
            .map(|(m, g)| m - g)
            .collect()
    }
}

/// Class means over `n_classes` classes. Each class must have at least one row.
///
/// Sums are taken over sorted values so the result does not depend on the
/// order of the samples.
pub fn class_means(features: &FeatureMatrix, n_classes: usize) -> Result<ClassMeans> {
    let dim = features.dim();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in features.labels().as_slice().iter().enumerate() {
        if y >= n_classes {
            bail!(Data, "feature label {y} outside [0, {n_classes})");
        }
        members[y].push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        bail!(Data, "class {c} has no feature rows");
    }

    let mut means = Vec::with_capacity(n_classes * dim);
    let mut column = Vec::new();
    for rows in &members {
        for d in 0..dim {
            column.clear();
            column.extend(rows.iter().map(|&i| features.row(i)[d]));
            means.push(sorted_sum(&mut column) / rows.len() as f64);
        }
    }
    let means = Matrix::new(n_classes, dim, means)?;
    let global_mean = (0..dim)
        .map(|d| {
            column.clear();
            column.extend((0..n_classes).map(|c| means.get(c, d)));
            sorted_sum(&mut column) / n_classes as f64
        })
        .collect();
    Ok(ClassMeans {
        means,
        global_mean,
        counts: members.iter().map(Vec::len).collect(),
    })
}

fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Cosine similarity of the centered class means.
///
/// A class whose centered mean vanishes gets similarity 0 to every other class.
pub fn cosine_similarity_matrix(means: &ClassMeans) -> SimilarityMatrix {
    let c = means.n_classes();
    let centered: Vec<Vec<f64>> = (0..c).map(|k| means.centered(k)).collect();
    let norms: Vec<f64> = centered.iter().map(|v| dot(v, v).sqrt()).collect();
    let mut values = vec![0.0; c * c];
    for i in 0..c {
        values[i * c + i] = 1.0;
        for j in (i + 1)..c {
            let m = if norms[i] <= DEGENERATE_NORM || norms[j] <= DEGENERATE_NORM {
                0.0
            } else {
                (dot(&centered[i], &centered[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            values[i * c + j] = m;
            values[j * c + i] = m;
        }
    }
    SimilarityMatrix::from_trusted(Matrix::new(c, c, values).expect("square"))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PenaltyKind {
    /// Group-mismatch indicator from a human partition.
    MaBinary,
    /// `1 - M[y, y_hat]` from a similarity matrix.
    MsSoft,
    /// Identity similarity: every class other than the prediction costs 1.
    MaDiag,
}

impl PenaltyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PenaltyKind::MaBinary => "ma",
            PenaltyKind::MsSoft => "ms",
            PenaltyKind::MaDiag => "diag",
        }
    }

    /// Method label used in reports.
    pub fn method_name(self) -> &'static str {
        match self {
            PenaltyKind::MaBinary => "ma-cs",
            PenaltyKind::MsSoft => "ms-cs",
            PenaltyKind::MaDiag => "ma-diag",
        }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ma" | "ma_binary" | "ma-cs" => Ok(PenaltyKind::MaBinary),
            "ms" | "ms_soft" | "ms-cs" => Ok(PenaltyKind::MsSoft),
            "diag" | "ma_diag" | "ma-diag" => Ok(PenaltyKind::MaDiag),
            other => bail!(Config, "unknown penalty kind {other:?}"),
        }
    }
}

/// Distance `d(y, y_hat)` added (times lambda) to a base score.
#[derive(Debug, Clone, PartialEq)]
pub enum PenaltySource {
    MaBinary(ClassPartition),
    MsSoft(SimilarityMatrix),
    MaDiag,
}

impl PenaltySource {
    pub fn kind(&self) -> PenaltyKind {
        match self {
            PenaltySource::MaBinary(_) => PenaltyKind::MaBinary,
            PenaltySource::MsSoft(_) => PenaltyKind::MsSoft,
            PenaltySource::MaDiag => PenaltyKind::MaDiag,
        }
    }

    #[inline]
    pub fn penalty(&self, y: usize, y_hat: usize) -> f64 {
        match self {
            PenaltySource::MaBinary(p) => f64::from(u8::from(p.group_of(y) != p.group_of(y_hat))),
            PenaltySource::MsSoft(m) => 1.0 - m.get(y, y_hat),
            PenaltySource::MaDiag => f64::from(u8::from(y != y_hat)),
        }
    }

    pub fn partition(&self) -> Option<&ClassPartition> {
        match self {
            PenaltySource::MaBinary(p) => Some(p),
            _ => None,
        }
    }

    /// Fails when the source was built for a different number of classes.
    pub fn check_classes(&self, n_classes: usize) -> Result<()> {
        let expected = match self {
            PenaltySource::MaBinary(p) => p.n_classes(),
            PenaltySource::MsSoft(m) => m.n_classes(),
            PenaltySource::MaDiag => return Ok(()),
        };
        if expected != n_classes {
            bail!(
                Config,
                "{} penalty covers {expected} classes, data has {n_classes}",
                self.kind()
            );
        }
        Ok(())
    }
}
