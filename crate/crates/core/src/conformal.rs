//! Split-conformal calibration and prediction sets, with optional
//! class-similarity penalty, plus the superclass-level AIR baseline.
//!
//! With a penalty source `d` and weight `lambda`, the score of candidate `y`
//! for input `x` becomes `s(x, y) + lambda * d(y, y_hat(x))`, where `y_hat` is
//! the tie-broken argmax of the softmax row. Calibration takes the
//! `ceil((n + 1)(1 - alpha))`-th smallest calibration score; prediction keeps
//! every class whose score is at most that threshold.

use rayon::prelude::*;

use crate::data::{
    check_alpha, check_lambda, CalibratedThreshold, ClassPartition, LabelVector, PredictionSet,
    SoftmaxMatrix,
};
use crate::error::{bail, Result};
use crate::rng::uniform_draw;
use crate::scores::{predicted_class, ScoreFunction};
use crate::similarity::PenaltySource;

/// Guards `ceil` against products like `5.000000000000001`.
const RANK_EPS: f64 = 1e-9;

/// 1-based order statistic used for the threshold: `ceil((n + 1)(1 - alpha))`.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    (((n + 1) as f64) * (1.0 - alpha) - RANK_EPS)
        .ceil()
        .max(1.0) as usize
}

/// Threshold from calibration scores; `+inf` when the rank exceeds `n`.
pub fn calibrate(scores: &[f64], alpha: f64) -> Result<CalibratedThreshold> {
    Ok(CalibrationResult::compute(scores, alpha, 0.0)?.threshold)
}

/// Threshold plus the sorted scores it was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub threshold: CalibratedThreshold,
    pub scores_used: Vec<f64>,
}

impl CalibrationResult {
    pub fn compute(scores: &[f64], alpha: f64, lambda: f64) -> Result<Self> {
        check_alpha(alpha)?;
        check_lambda(lambda)?;
        if scores.is_empty() {
            bail!(Input, "cannot calibrate on an empty score list");
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            bail!(Input, "calibration score {i} is not finite");
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let k = quantile_rank(n, alpha);
        let q_hat = if k > n { f64::INFINITY } else { sorted[k - 1] };
        Ok(Self {
            threshold: CalibratedThreshold {
                q_hat,
                alpha,
                n_cal: n,
                lambda,
            },
            scores_used: sorted,
        })
    }
}

/// Penalty source and its weight.
#[derive(Debug, Clone, Copy)]
pub struct Penalty<'a> {
    pub source: &'a PenaltySource,
    pub lambda: f64,
}

impl<'a> Penalty<'a> {
    pub fn new(source: &'a PenaltySource, lambda: f64) -> Self {
        Self { source, lambda }
    }

    #[inline]
    fn apply(penalty: Option<Penalty<'_>>, base: f64, y: usize, y_hat: usize) -> f64 {
        match penalty {
            Some(p) => base + p.lambda * p.source.penalty(y, y_hat),
            None => base,
        }
    }

    fn lambda_of(penalty: Option<Penalty<'_>>) -> f64 {
        penalty.map_or(0.0, |p| p.lambda)
    }
}

/// Penalized score of each calibration sample's true label. Sample `i` uses
/// `uniform_draw(seed, i)`.
pub fn penalized_calibration_scores(
    softmax: &SoftmaxMatrix,
    labels: &LabelVector,
    score_fn: &ScoreFunction,
    penalty: Option<Penalty<'_>>,
    seed: u64,
) -> Result<Vec<f64>> {
    if labels.len() != softmax.n_samples() {
        bail!(
            Input,
            "{} labels for {} softmax rows",
            labels.len(),
            softmax.n_samples()
        );
    }
    if let Some(p) = penalty {
        check_lambda(p.lambda)?;
        p.source.check_classes(softmax.n_classes())?;
    }
    Ok((0..softmax.n_samples())
        .into_par_iter()
        .map(|i| {
            let row = softmax.row(i);
            let y = labels.get(i);
            let base = score_fn.score(row, y, uniform_draw(seed, i));
            Penalty::apply(penalty, base, y, predicted_class(row))
        })
        .collect())
}

/// Prediction set for one softmax row. The threshold must come from the same
/// score function, penalty source and lambda.
pub fn predict_set(
    row: &[f64],
    threshold: &CalibratedThreshold,
    score_fn: &ScoreFunction,
    penalty: Option<Penalty<'_>>,
    u: f64,
) -> PredictionSet {
    let mut base = vec![0.0; row.len()];
    score_fn.score_all(row, u, &mut base);
    set_from_scores(&base, predicted_class(row), threshold.q_hat, penalty)
}

fn set_from_scores(
    base: &[f64],
    y_hat: usize,
    q_hat: f64,
    penalty: Option<Penalty<'_>>,
) -> PredictionSet {
    let classes = base
        .iter()
        .enumerate()
        .filter(|&(y, &s)| Penalty::apply(penalty, s, y, y_hat) <= q_hat)
        .map(|(y, _)| y)
        .collect();
    PredictionSet::new(classes, y_hat)
}

/// Unpenalized scores of every class for a subset of samples, cached so that
/// many `(penalty, lambda)` combinations can share one scoring pass and one
/// set of uniform draws.
#[derive(Debug, Clone)]
pub struct ScoredSamples {
    n_classes: usize,
    rows: Vec<usize>,
    scores: Vec<f64>,
    predicted: Vec<usize>,
}

impl ScoredSamples {
    /// Scores `rows` of `softmax`; row `r` uses `uniform_draw(seed, r)`.
    pub fn new(
        softmax: &SoftmaxMatrix,
        rows: &[usize],
        score_fn: &ScoreFunction,
        seed: u64,
    ) -> Self {
        let c = softmax.n_classes();
        let mut scores = vec![0.0; rows.len() * c];
        scores
            .par_chunks_mut(c)
            .zip(rows.par_iter())
            .for_each(|(out, &r)| score_fn.score_all(softmax.row(r), uniform_draw(seed, r), out));
        let predicted = rows
            .iter()
            .map(|&r| predicted_class(softmax.row(r)))
            .collect();
        Self {
            n_classes: c,
            rows: rows.to_vec(),
            scores,
            predicted,
        }
    }

    pub fn all(softmax: &SoftmaxMatrix, score_fn: &ScoreFunction, seed: u64) -> Self {
        let rows: Vec<usize> = (0..softmax.n_samples()).collect();
        Self::new(softmax, &rows, score_fn, seed)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Original softmax row of local sample `i`.
    pub fn source_row(&self, i: usize) -> usize {
        self.rows[i]
    }

    pub fn predicted(&self, i: usize) -> usize {
        self.predicted[i]
    }

    pub fn base_scores(&self, i: usize) -> &[f64] {
        &self.scores[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn penalized_score(&self, i: usize, y: usize, penalty: Option<Penalty<'_>>) -> f64 {
        Penalty::apply(penalty, self.base_scores(i)[y], y, self.predicted[i])
    }

    /// Penalized true-label scores for local samples `subset`; `labels` is
    /// indexed by original softmax row.
    pub fn calibration_scores(
        &self,
        subset: &[usize],
        labels: &LabelVector,
        penalty: Option<Penalty<'_>>,
    ) -> Vec<f64> {
        subset
            .iter()
            .map(|&i| self.penalized_score(i, labels.get(self.rows[i]), penalty))
            .collect()
    }

    pub fn calibrate(
        &self,
        subset: &[usize],
        labels: &LabelVector,
        alpha: f64,
        penalty: Option<Penalty<'_>>,
    ) -> Result<CalibratedThreshold> {
        let scores = self.calibration_scores(subset, labels, penalty);
        Ok(CalibrationResult::compute(&scores, alpha, Penalty::lambda_of(penalty))?.threshold)
    }

    pub fn predict_one(&self, i: usize, q_hat: f64, penalty: Option<Penalty<'_>>) -> PredictionSet {
        set_from_scores(self.base_scores(i), self.predicted[i], q_hat, penalty)
    }

    pub fn predict(
        &self,
        subset: &[usize],
        q_hat: f64,
        penalty: Option<Penalty<'_>>,
    ) -> Vec<PredictionSet> {
        subset
            .par_iter()
            .map(|&i| self.predict_one(i, q_hat, penalty))
            .collect()
    }
}

/// Configuration of the accumulating inference rule.
#[derive(Debug, Clone, PartialEq)]
pub struct AirConfig {
    pub partition: ClassPartition,
    pub alpha: f64,
    /// Recorded for provenance; the rule itself is deterministic.
    pub seed: u64,
}

/// Total softmax mass of each group.
pub fn superclass_masses(row: &[f64], partition: &ClassPartition) -> Vec<f64> {
    let mut mass = vec![0.0; partition.n_groups()];
    for (c, &p) in row.iter().enumerate() {
        mass[partition.group_of(c)] += p;
    }
    mass
}

/// Groups by decreasing mass (ties to the lower group index) and their
/// running cumulative mass.
fn ranked_groups(row: &[f64], partition: &ClassPartition) -> (Vec<usize>, Vec<f64>) {
    let mass = superclass_masses(row, partition);
    let order = crate::scores::descending_order(&mass);
    let mut cumulative = Vec::with_capacity(order.len());
    let mut acc = 0.0;
    for &g in &order {
        acc += mass[g];
        cumulative.push(acc);
    }
    (order, cumulative)
}

/// Cumulative group mass down to and including the group of `true_class`.
pub fn air_score(row: &[f64], true_class: usize, partition: &ClassPartition) -> f64 {
    let (order, cumulative) = ranked_groups(row, partition);
    let target = partition.group_of(true_class);
    let pos = order
        .iter()
        .position(|&g| g == target)
        .expect("group present");
    cumulative[pos]
}

/// Classes of the shortest prefix of ranked groups whose mass reaches `q_hat`.
/// The top group is always included.
pub fn air_set(row: &[f64], q_hat: f64, partition: &ClassPartition) -> PredictionSet {
    let (order, cumulative) = ranked_groups(row, partition);
    let mut keep = vec![false; partition.n_groups()];
    for (pos, &g) in order.iter().enumerate() {
        if pos > 0 && cumulative[pos - 1] >= q_hat {
            break;
        }
        keep[g] = true;
    }
    let classes = (0..row.len())
        .filter(|&c| keep[partition.group_of(c)])
        .collect();
    PredictionSet::new(classes, predicted_class(row))
}

/// Calibrates AIR on `cal_softmax` and predicts every row of `test_softmax`.
pub fn air_calibrate_and_predict(
    cal_softmax: &SoftmaxMatrix,
    cal_labels: &LabelVector,
    test_softmax: &SoftmaxMatrix,
    config: &AirConfig,
) -> Result<(CalibratedThreshold, Vec<PredictionSet>)> {
    let c = config.partition.n_classes();
    if cal_softmax.n_classes() != c || test_softmax.n_classes() != c {
        bail!(
            Config,
            "partition covers {c} classes, softmax has {}",
            cal_softmax.n_classes()
        );
    }
    if cal_labels.len() != cal_softmax.n_samples() {
        bail!(
            Input,
            "{} labels for {} calibration rows",
            cal_labels.len(),
            cal_softmax.n_samples()
        );
    }
    let scores: Vec<f64> = (0..cal_softmax.n_samples())
        .map(|i| air_score(cal_softmax.row(i), cal_labels.get(i), &config.partition))
        .collect();
    let threshold = calibrate(&scores, config.alpha)?;
    let sets = (0..test_softmax.n_samples())
        .into_par_iter()
        .map(|i| air_set(test_softmax.row(i), threshold.q_hat, &config.partition))
        .collect();
    Ok((threshold, sets))
}
