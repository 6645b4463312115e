//! Penalty-weight selection on a held-out half of the calibration set.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::conformal::{Penalty, ScoredSamples};
use crate::data::{check_alpha, ClassPartition, LabelVector, PredictionSet, SoftmaxMatrix};
use crate::error::{bail, Result};
use crate::rng::{derive_seed, indexed_rng, stream};
use crate::scores::ScoreFunction;
use crate::similarity::PenaltySource;

/// Smallest calibration set that can be split for tuning.
pub const MIN_TUNING_SAMPLES: usize = 4;

/// Candidate penalty weights: nonnegative, strictly increasing, containing 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid(Vec<f64>);

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            bail!(Config, "lambda grid values must be finite and >= 0");
        }
        if !values.windows(2).all(|w| w[0] < w[1]) {
            bail!(Config, "lambda grid must be strictly increasing");
        }
        if values.first() != Some(&0.0) {
            bail!(Config, "lambda grid must contain 0");
        }
        Ok(Self(values))
    }

    /// 0 followed by `points` log-spaced values in `[lo, hi]`.
    pub fn log_spaced(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo) || points < 2 {
            bail!(Config, "log grid needs 0 < lo < hi and at least 2 points");
        }
        let (a, b) = (lo.ln(), hi.ln());
        let mut values = vec![0.0];
        values.extend((0..points).map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp()));
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Comma-separated list, e.g. `0,0.01,0.1`.
    pub fn parse(text: &str) -> Result<Self> {
        let values = text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| crate::Error::Config(format!("bad lambda value {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }
}

impl Default for LambdaGrid {
    /// 0 plus 30 log-spaced points in `[1e-3, 2]`.
    fn default() -> Self {
        Self::log_spaced(1e-3, 2.0, 30).expect("valid default grid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuningRow {
    pub lambda: f64,
    pub avg_size: f64,
    pub avg_superclasses: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningReport {
    pub rows: Vec<TuningRow>,
    pub chosen_lambda: f64,
    /// Positions (within the tuned sample list) used to compute the threshold.
    pub calibration_half: Vec<usize>,
    /// Positions used to measure set sizes.
    pub evaluation_half: Vec<usize>,
}

impl TuningReport {
    pub fn chosen(&self) -> &TuningRow {
        self.rows
            .iter()
            .find(|r| r.lambda == self.chosen_lambda)
            .expect("chosen lambda is a grid point")
    }
}

/// Seeded split of `0..n` into two halves; the first gets the extra element
/// when `n` is odd.
pub fn split_halves(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut indexed_rng(seed, 0));
    let cut = n.div_ceil(2);
    let second = idx.split_off(cut);
    (idx, second)
}

pub(crate) fn average_size(sets: &[PredictionSet]) -> f64 {
    sets.iter().map(PredictionSet::len).sum::<usize>() as f64 / sets.len() as f64
}

pub(crate) fn average_superclasses(sets: &[PredictionSet], partition: &ClassPartition) -> f64 {
    sets.iter()
        .map(|s| s.superclass_count(partition))
        .sum::<usize>() as f64
        / sets.len() as f64
}

/// Tunes lambda over the samples `subset` of an already-scored pool.
///
/// `labels` is indexed by original softmax row. The returned halves hold
/// positions into `subset`.
#[allow(clippy::too_many_arguments)]
pub fn tune_on_scored(
    scored: &ScoredSamples,
    subset: &[usize],
    labels: &LabelVector,
    grid: &LambdaGrid,
    source: &PenaltySource,
    alpha: f64,
    split_seed: u64,
    superclass_partition: Option<&ClassPartition>,
) -> Result<TuningReport> {
    check_alpha(alpha)?;
    source.check_classes(scored.n_classes())?;
    if subset.len() < MIN_TUNING_SAMPLES {
        bail!(
            Config,
            "tuning needs at least {MIN_TUNING_SAMPLES} calibration samples, got {}",
            subset.len()
        );
    }
    let (first, second) = split_halves(subset.len(), split_seed);
    let cal: Vec<usize> = first.iter().map(|&p| subset[p]).collect();
    let eval: Vec<usize> = second.iter().map(|&p| subset[p]).collect();
    let partition = superclass_partition.or(source.partition());

    let rows = grid
        .values()
        .par_iter()
        .map(|&lambda| {
            let penalty = Some(Penalty::new(source, lambda));
            let threshold = scored.calibrate(&cal, labels, alpha, penalty)?;
            let sets = scored.predict(&eval, threshold.q_hat, penalty);
            Ok(TuningRow {
                lambda,
                avg_size: average_size(&sets),
                avg_superclasses: partition.map(|p| average_superclasses(&sets, p)),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best = &rows[0];
    for row in &rows[1..] {
        if row.avg_size < best.avg_size {
            best = row;
        }
    }
    let chosen_lambda = best.lambda;
    Ok(TuningReport {
        rows,
        chosen_lambda,
        calibration_half: first,
        evaluation_half: second,
    })
}

/// Splits the calibration set in two seeded halves, calibrates each grid
/// point on the first and picks the lambda with the smallest average set
/// size on the second (ties go to the smaller lambda).
#[allow(clippy::too_many_arguments)]
pub fn tune_lambda(
    cal_softmax: &SoftmaxMatrix,
    cal_labels: &LabelVector,
    grid: &LambdaGrid,
    score_fn: &ScoreFunction,
    source: &PenaltySource,
    alpha: f64,
    seed: u64,
    superclass_partition: Option<&ClassPartition>,
) -> Result<TuningReport> {
    if cal_labels.len() != cal_softmax.n_samples() {
        bail!(
            Input,
            "{} labels for {} calibration rows",
            cal_labels.len(),
            cal_softmax.n_samples()
        );
    }
    let scored = ScoredSamples::all(
        cal_softmax,
        score_fn,
        derive_seed(seed, stream::SCORE_DRAWS),
    );
    let subset: Vec<usize> = (0..cal_softmax.n_samples()).collect();
    tune_on_scored(
        &scored,
        &subset,
        cal_labels,
        grid,
        source,
        alpha,
        derive_seed(seed, stream::TUNING),
        superclass_partition,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::calibrate;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn grid_validation() {
        assert!(LambdaGrid::new(vec![0.1, 0.2]).is_err());
        assert!(LambdaGrid::new(vec![0.0, 0.2, 0.2]).is_err());
        assert!(LambdaGrid::new(vec![0.0, -0.2]).is_err());
        let g = LambdaGrid::default();
        assert_eq!(g.values().len(), 31);
        assert_eq!(g.values()[0], 0.0);
        assert!((g.values()[1] - 1e-3).abs() < 1e-15);
        assert!((g.values()[30] - 2.0).abs() < 1e-12);
        assert_eq!(
            LambdaGrid::parse("0, 0.5,1").unwrap().values(),
            &[0.0, 0.5, 1.0]
        );
    }

    #[test]
    fn halves_cover_everything() {
        let (a, b) = split_halves(7, 3);
        assert_eq!((a.len(), b.len()), (4, 3));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert_eq!(split_halves(7, 3), (a, b));
    }

    fn data() -> crate::synth::SynthData {
        generate(&SynthConfig {
            n_groups: 10,
            group_size: 5,
            n_samples: 2000,
            in_group_mass: 0.9,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_only_grid_equals_standard_cp() {
        let d = data();
        let f = ScoreFunction::lac();
        let source = PenaltySource::MaBinary(d.partition.clone());
        let grid = LambdaGrid::new(vec![0.0]).unwrap();
        let report = tune_lambda(&d.softmax, &d.labels, &grid, &f, &source, 0.1, 9, None).unwrap();
        assert_eq!(report.chosen_lambda, 0.0);

        let scored = ScoredSamples::all(&d.softmax, &f, derive_seed(9, stream::SCORE_DRAWS));
        let cal_scores = scored.calibration_scores(&report.calibration_half, &d.labels, None);
        let q = calibrate(&cal_scores, 0.1).unwrap();
        let sets = scored.predict(&report.evaluation_half, q.q_hat, None);
        assert_eq!(report.rows[0].avg_size, average_size(&sets));
    }

    #[test]
    fn tuning_is_deterministic_and_improves() {
        let d = data();
        let f = ScoreFunction::lac();
        let source = PenaltySource::MaBinary(d.partition.clone());
        let grid = LambdaGrid::default();
        let a = tune_lambda(&d.softmax, &d.labels, &grid, &f, &source, 0.1, 1, None).unwrap();
        let b = tune_lambda(&d.softmax, &d.labels, &grid, &f, &source, 0.1, 1, None).unwrap();
        assert_eq!(a, b);
        assert!(a.chosen_lambda > 0.0);
        assert!(a.chosen().avg_size < a.rows[0].avg_size);
        assert!(a.rows.iter().all(|r| r.avg_size >= a.chosen().avg_size));
        assert!(a.rows[0].avg_superclasses.is_some());
    }

    #[test]
    fn too_small_calibration_rejected() {
        let d = data();
        let small = d.softmax.select_rows(&[0, 1, 2]);
        let labels = d.labels.select(&[0, 1, 2]);
        let err = tune_lambda(
            &small,
            &labels,
            &LambdaGrid::default(),
            &ScoreFunction::lac(),
            &PenaltySource::MaDiag,
            0.1,
            0,
            None,
        );
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }
}
