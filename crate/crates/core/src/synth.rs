//! Synthetic grouped classification data and numerical checks of the
//! penalized-score guarantees.
//!
//! The generator draws a predicted (top) class, builds a softmax row around
//! it, then draws the true label from a known conditional distribution:
//! with probability `in_group_mass` the label lies in the group of the
//! predicted class, otherwise in one of the other groups. Inside each of the
//! two regions the label is uniform unless `top_share` puts extra mass on the
//! predicted class itself. All non-top classes get exchangeable logits, so
//! the uniform case satisfies the conditions under which the sign of the
//! small-lambda size derivative reduces to `sign(p1 * n0 - p0 * n1)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::conformal::{Penalty, ScoredSamples};
use crate::data::{
    check_alpha, validate_softmax, ClassPartition, FeatureMatrix, LabelVector, Matrix,
    PredictionSet, SoftmaxMatrix,
};
use crate::error::{bail, Result};
use crate::rng::{derive_seed, indexed_rng, stream, uniform_draw};
use crate::scores::{predicted_class, ScoreFunction};
use crate::similarity::PenaltySource;
use crate::tuning::split_halves;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_groups: usize,
    pub group_size: usize,
    pub n_samples: usize,
    /// Probability that the true label shares the predicted class's group.
    pub in_group_mass: f64,
    /// Logit margin of the top class over the largest other logit.
    pub concentration: f64,
    /// Logit shift of the non-top classes in the top class's group.
    pub in_group_boost: f64,
    /// Probability that an in-group label is the predicted class itself;
    /// `None` means uniform over the group.
    pub top_share: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_groups: 10,
            group_size: 5,
            n_samples: 10_000,
            in_group_mass: 0.9,
            concentration: 1.0,
            in_group_boost: 0.0,
            top_share: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_classes(&self) -> usize {
        self.n_groups * self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_groups < 2 {
            bail!(Config, "need at least 2 groups");
        }
        if self.group_size < 1 {
            bail!(Config, "group size must be >= 1");
        }
        if self.n_samples == 0 {
            bail!(Config, "need at least one sample");
        }
        if !(self.in_group_mass > 0.0 && self.in_group_mass < 1.0) {
            bail!(
                Config,
                "in_group_mass must lie in (0, 1), got {}",
                self.in_group_mass
            );
        }
        if !(self.concentration >= 0.0 && self.concentration.is_finite()) {
            bail!(Config, "concentration must be finite and >= 0");
        }
        if !self.in_group_boost.is_finite() {
            bail!(Config, "in_group_boost must be finite");
        }
        if let Some(s) = self.top_share {
            if !(0.0..=1.0).contains(&s) {
                bail!(Config, "top_share must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// `P(Y = y | X = x)` for a sample whose predicted class is `y_hat`.
    pub fn label_probability(&self, y_hat: usize, y: usize) -> f64 {
        let k = self.group_size;
        let same_group = y / k == y_hat / k;
        if !same_group {
            return (1.0 - self.in_group_mass) / (self.n_classes() - k) as f64;
        }
        let p0 = self.in_group_mass;
        match self.top_share {
            None => p0 / k as f64,
            Some(_) if k == 1 => p0,
            Some(s) if y == y_hat => p0 * s,
            Some(s) => p0 * (1.0 - s) / (k - 1) as f64,
        }
    }
}

/// Generated softmax outputs, labels and the block partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub softmax: SoftmaxMatrix,
    pub labels: LabelVector,
    pub partition: ClassPartition,
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let c = config.n_classes();
    let k = config.group_size;
    let seed = derive_seed(config.seed, stream::GENERATOR);
    let mut values = vec![0.0; config.n_samples * c];
    let labels: Vec<usize> = values
        .par_chunks_mut(c)
        .enumerate()
        .map(|(i, row)| {
            let mut rng = indexed_rng(seed, i as u64);
            let top = rng.random_range(0..c);
            let group = top / k;
            let mut max_other = f64::NEG_INFINITY;
            for (y, logit) in row.iter_mut().enumerate() {
                if y == top {
                    continue;
                }
                let noise: f64 = StandardNormal.sample(&mut rng);
                *logit = noise
                    + if y / k == group {
                        config.in_group_boost
                    } else {
                        0.0
                    };
                max_other = max_other.max(*logit);
            }
            let margin: f64 = StandardNormal.sample(&mut rng);
            row[top] = max_other + config.concentration + margin.abs();
            let peak = row[top];
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - peak).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            draw_label(config, &mut rng, top)
        })
        .collect();
    let softmax = validate_softmax(Matrix::new(config.n_samples, c, values)?)?;
    Ok(SynthData {
        softmax,
        labels: LabelVector::new(labels, c)?,
        partition: ClassPartition::equal_blocks(config.n_groups, k)?,
    })
}

fn draw_label<R: Rng>(config: &SynthConfig, rng: &mut R, top: usize) -> usize {
    let c = config.n_classes();
    let k = config.group_size;
    let first = (top / k) * k;
    if rng.random::<f64>() < config.in_group_mass {
        match config.top_share {
            Some(_) if k == 1 => top,
            Some(s) => {
                if rng.random::<f64>() < s {
                    top
                } else {
                    // uniform over the group without the top class
                    let j = rng.random_range(0..k - 1);
                    let y = first + j;
                    if y >= top {
                        y + 1
                    } else {
                        y
                    }
                }
            }
            None => first + rng.random_range(0..k),
        }
    } else {
        let j = rng.random_range(0..c - k);
        if j >= first {
            j + k
        } else {
            j
        }
    }
}

/// Feature model: group centers, class offsets around them, sample noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub dim: usize,
    pub per_class: usize,
    pub group_scale: f64,
    pub class_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            per_class: 20,
            group_scale: 3.0,
            class_scale: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Features whose class means cluster by group.
pub fn synth_features(partition: &ClassPartition, config: &FeatureConfig) -> Result<FeatureMatrix> {
    if config.dim == 0 || config.per_class == 0 {
        bail!(
            Config,
            "feature dimension and per-class count must be positive"
        );
    }
    let seed = derive_seed(config.seed, stream::FEATURES);
    let gaussian = |rng: &mut rand_chacha::ChaCha8Rng, scale: f64| -> Vec<f64> {
        (0..config.dim)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect()
    };
    let groups: Vec<Vec<f64>> = (0..partition.n_groups())
        .map(|g| gaussian(&mut indexed_rng(seed, g as u64), config.group_scale))
        .collect();
    let c = partition.n_classes();
    let offset = partition.n_groups() as u64;
    let centers: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let jitter = gaussian(
                &mut indexed_rng(seed, offset + k as u64),
                config.class_scale,
            );
            groups[partition.group_of(k)]
                .iter()
                .zip(jitter)
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    let n = c * config.per_class;
    let mut values = Vec::with_capacity(n * config.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % c;
        let mut rng = indexed_rng(seed, offset + c as u64 + i as u64);
        let noise = gaussian(&mut rng, config.noise);
        values.extend(centers[class].iter().zip(noise).map(|(a, b)| a + b));
        labels.push(class);
    }
    FeatureMatrix::new(
        Matrix::new(n, config.dim, values)?,
        LabelVector::new(labels, c)?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub lambda: f64,
    pub size: f64,
    pub superclasses: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryEstimates {
    pub p0_hat: f64,
    pub p1_hat: f64,
    pub n0_bar: f64,
    pub n1_bar: f64,
    pub size_curve: Vec<CurvePoint>,
    /// Least-squares slope of the average size over the smallest lambdas.
    pub slope: f64,
    /// Standard error of `slope` over evaluation samples.
    pub slope_se: f64,
    /// Sign of `slope`, or 0 when within three standard errors.
    pub derivative_sign: i8,
    /// `sign(p1 * n0 - p0 * n1)`, or 0 when within three standard errors.
    pub predicted_sign: i8,
}

/// Number of positive lambdas used for the slope fit, next to lambda = 0.
pub const SLOPE_POINTS: usize = 3;

fn banded_sign(value: f64, band: f64) -> i8 {
    if value.abs() <= band {
        0
    } else if value > 0.0 {
        1
    } else {
        -1
    }
}

struct SplitScores {
    scored: ScoredSamples,
    cal: Vec<usize>,
    eval: Vec<usize>,
}

fn split_and_score(data: &SynthData, score_fn: &ScoreFunction, seed: u64) -> SplitScores {
    let scored = ScoredSamples::all(
        &data.softmax,
        score_fn,
        derive_seed(seed, stream::SCORE_DRAWS),
    );
    let (cal, eval) = split_halves(data.softmax.n_samples(), derive_seed(seed, stream::SPLIT));
    SplitScores { scored, cal, eval }
}

/// Estimates the average set size as a function of lambda (calibrating on
/// one seeded half, measuring on the other) and compares the fitted slope
/// at small lambda with the predicted sign.
///
/// `lambdas` must contain 0 and at least two positive values; the slope uses
/// 0 and up to three of the smallest positive values.
pub fn estimate_size_curve(
    data: &SynthData,
    score_fn: &ScoreFunction,
    source: &PenaltySource,
    alpha: f64,
    lambdas: &[f64],
    seed: u64,
) -> Result<TheoryEstimates> {
    check_alpha(alpha)?;
    source.check_classes(data.softmax.n_classes())?;
    let mut lambdas = lambdas.to_vec();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    if lambdas.len() < 3 {
        bail!(
            Config,
            "need at least 3 lambda values, got {}",
            lambdas.len()
        );
    }
    if lambdas[0] != 0.0 {
        bail!(Config, "lambda list must start at 0");
    }

    let SplitScores { scored, cal, eval } = split_and_score(data, score_fn, seed);
    let n = data.softmax.n_samples();
    let c = data.softmax.n_classes();

    let mut in_group = 0usize;
    let mut n0_total = 0usize;
    for i in 0..n {
        let y_hat = scored.predicted(i);
        let n0 = (0..c).filter(|&y| source.penalty(y, y_hat) == 0.0).count();
        n0_total += n0;
        in_group += usize::from(source.penalty(data.labels.get(i), y_hat) == 0.0);
    }
    let p0_hat = in_group as f64 / n as f64;
    let p1_hat = 1.0 - p0_hat;
    let n0_bar = n0_total as f64 / n as f64;
    let n1_bar = c as f64 - n0_bar;

    let partition = source.partition().unwrap_or(&data.partition);
    let per_lambda: Vec<(Vec<usize>, CurvePoint)> = lambdas
        .par_iter()
        .map(|&lambda| {
            let penalty = Some(Penalty::new(source, lambda));
            let t = scored.calibrate(&cal, &data.labels, alpha, penalty)?;
            let sets = scored.predict(&eval, t.q_hat, penalty);
            let sizes: Vec<usize> = sets.iter().map(PredictionSet::len).collect();
            let m = eval.len() as f64;
            let point = CurvePoint {
                lambda,
                size: sizes.iter().sum::<usize>() as f64 / m,
                superclasses: Some(
                    sets.iter()
                        .map(|s| s.superclass_count(partition))
                        .sum::<usize>() as f64
                        / m,
                ),
            };
            Ok((sizes, point))
        })
        .collect::<Result<Vec<_>>>()?;

    let fit = &per_lambda[..(1 + SLOPE_POINTS).min(per_lambda.len())];
    let xs: Vec<f64> = fit.iter().map(|(_, p)| p.lambda).collect();
    let x_mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    let weights: Vec<f64> = xs.iter().map(|x| (x - x_mean) / sxx).collect();
    // the slope is a mean over samples of per-sample weighted size sums
    let contributions: Vec<f64> = (0..eval.len())
        .map(|j| {
            fit.iter()
                .zip(&weights)
                .map(|((sizes, _), w)| w * sizes[j] as f64)
                .sum()
        })
        .collect();
    let m = contributions.len() as f64;
    let slope = contributions.iter().sum::<f64>() / m;
    let var = contributions
        .iter()
        .map(|z| (z - slope).powi(2))
        .sum::<f64>()
        / (m - 1.0).max(1.0);
    let slope_se = (var / m).sqrt();

    let gap = p1_hat * n0_bar - p0_hat * n1_bar;
    let gap_se = (n0_bar + n1_bar) * (p0_hat * p1_hat / n as f64).sqrt();

    Ok(TheoryEstimates {
        p0_hat,
        p1_hat,
        n0_bar,
        n1_bar,
        size_curve: per_lambda.into_iter().map(|(_, p)| p).collect(),
        slope,
        slope_se,
        derivative_sign: banded_sign(slope, 3.0 * slope_se),
        predicted_sign: banded_sign(gap, 3.0 * gap_se),
    })
}

/// A broken per-sample guarantee.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// An out-of-group class is in the penalized set but not the plain one.
    OutOfGroupAdded { class: usize },
    /// The penalized set reaches a group the plain set does not.
    GroupAdded { group: usize },
    /// More out-of-group classes after penalizing.
    WeightedSizeIncreased { before: usize, after: usize },
}

/// Checks one sample's plain and penalized sets against the group-penalty
/// guarantees.
pub fn check_sample(
    plain: &PredictionSet,
    penalized: &PredictionSet,
    partition: &ClassPartition,
) -> Option<Violation> {
    let home = partition.group_of(plain.predicted_class());
    let out_of_group = |s: &PredictionSet| {
        s.classes()
            .iter()
            .filter(|&&y| partition.group_of(y) != home)
            .count()
    };
    if let Some(&class) = penalized
        .classes()
        .iter()
        .find(|&&y| partition.group_of(y) != home && !plain.contains(y))
    {
        return Some(Violation::OutOfGroupAdded { class });
    }
    if plain.contains(plain.predicted_class()) {
        let before = plain.groups(partition);
        if let Some(group) = penalized
            .groups(partition)
            .into_iter()
            .find(|g| before.binary_search(g).is_err())
        {
            return Some(Violation::GroupAdded { group });
        }
    }
    let (before, after) = (out_of_group(plain), out_of_group(penalized));
    if after > before {
        return Some(Violation::WeightedSizeIncreased { before, after });
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactPropertyReport {
    /// Lambda values checked (excluding any duplicates).
    pub lambdas: usize,
    /// Sample-lambda pairs checked.
    pub sample_checks: usize,
    pub threshold_violations: usize,
    pub sample_violations: usize,
    pub first_counterexample: Option<String>,
}

impl ExactPropertyReport {
    pub fn passed(&self) -> bool {
        self.threshold_violations == 0 && self.sample_violations == 0
    }
}

/// Checks, with coupled randomness, that for every lambda the penalized
/// threshold lies in `[q, q + lambda]` and that every evaluation sample obeys
/// the per-sample group guarantees of [`check_sample`].
pub fn verify_exact_properties(
    data: &SynthData,
    score_fn: &ScoreFunction,
    alpha: f64,
    lambdas: &[f64],
    seed: u64,
) -> Result<ExactPropertyReport> {
    check_alpha(alpha)?;
    let source = PenaltySource::MaBinary(data.partition.clone());
    let SplitScores { scored, cal, eval } = split_and_score(data, score_fn, seed);
    let base = scored.calibrate(&cal, &data.labels, alpha, None)?;
    let plain = scored.predict(&eval, base.q_hat, None);

    let mut report = ExactPropertyReport {
        lambdas: 0,
        sample_checks: 0,
        threshold_violations: 0,
        sample_violations: 0,
        first_counterexample: None,
    };
    for &lambda in lambdas {
        report.lambdas += 1;
        let penalty = Some(Penalty::new(&source, lambda));
        let t = scored.calibrate(&cal, &data.labels, alpha, penalty)?;
        if !(base.q_hat <= t.q_hat && t.q_hat <= base.q_hat + lambda) {
            report.threshold_violations += 1;
            report.first_counterexample.get_or_insert_with(|| {
                format!(
                    "lambda {lambda}: q = {}, q_lambda = {}",
                    base.q_hat, t.q_hat
                )
            });
        }
        let penalized = scored.predict(&eval, t.q_hat, penalty);
        report.sample_checks += eval.len();
        for (j, (a, b)) in plain.iter().zip(&penalized).enumerate() {
            if let Some(v) = check_sample(a, b, &data.partition) {
                report.sample_violations += 1;
                report.first_counterexample.get_or_insert_with(|| {
                    format!(
                        "lambda {lambda}, sample {}: {v:?}",
                        scored.source_row(eval[j])
                    )
                });
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfCheckRow {
    /// 0 for in-group, 1 for out-of-group.
    pub z: u8,
    pub t: f64,
    /// Monte Carlo `P(s(X, Y) <= t | Y in Y_z(X))`.
    pub lhs: f64,
    /// `(1 / p_z) * mean[p_z(x) * F_z^x(t)]` from the known label model.
    pub rhs: f64,
    pub std_err: f64,
}

impl CdfCheckRow {
    pub fn within(&self, k: f64) -> bool {
        (self.lhs - self.rhs).abs() <= k * self.std_err
    }
}

/// Compares the conditional score CDF estimated from drawn labels with the
/// average of per-sample conditional CDFs computed from the generator's label
/// distribution. `config` must be the one that produced `data`.
pub fn marginal_cdf_check(
    data: &SynthData,
    config: &SynthConfig,
    score_fn: &ScoreFunction,
    t_values: &[f64],
    seed: u64,
) -> Result<Vec<CdfCheckRow>> {
    let n = data.softmax.n_samples();
    let c = data.softmax.n_classes();
    if config.n_classes() != c {
        bail!(
            Config,
            "config describes {} classes, data has {c}",
            config.n_classes()
        );
    }
    let draw_seed = derive_seed(seed, stream::SCORE_DRAWS);
    let mut rows = Vec::new();
    for z in 0..2u8 {
        for &t in t_values {
            let mut hits = 0usize;
            let mut members = 0usize;
            let mut terms = Vec::with_capacity(n);
            let mut p_z_total = 0.0;
            let mut scores = vec![0.0; c];
            for i in 0..n {
                let row = data.softmax.row(i);
                score_fn.score_all(row, uniform_draw(draw_seed, i), &mut scores);
                let y_hat = predicted_class(row);
                let in_region = |y: usize| {
                    (data.partition.group_of(y) != data.partition.group_of(y_hat)) == (z == 1)
                };
                let y = data.labels.get(i);
                if in_region(y) {
                    members += 1;
                    hits += usize::from(scores[y] <= t);
                }
                let mut p_z = 0.0;
                let mut term = 0.0;
                for k in (0..c).filter(|&k| in_region(k)) {
                    let p = config.label_probability(y_hat, k);
                    p_z += p;
                    if scores[k] <= t {
                        term += p;
                    }
                }
                p_z_total += p_z;
                terms.push(term);
            }
            if members == 0 {
                bail!(Data, "no samples with labels in region {z}");
            }
            let p_z = p_z_total / n as f64;
            let lhs = hits as f64 / members as f64;
            let mean = terms.iter().sum::<f64>() / n as f64;
            let var = terms.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let se_rhs = (var / n as f64).sqrt() / p_z;
            let se_lhs = (lhs * (1.0 - lhs) / members as f64).sqrt();
            rows.push(CdfCheckRow {
                z,
                t,
                lhs,
                rhs: mean / p_z,
                std_err: (se_lhs.powi(2) + se_rhs.powi(2)).sqrt(),
            });
        }
    }
    Ok(rows)
}
