//! Evaluation metrics and the repeated random-split protocol.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::conformal::{air_score, air_set, CalibrationResult, Penalty, ScoredSamples};
use crate::data::{check_alpha, ClassPartition, LabelVector, PredictionSet, SoftmaxMatrix};
use crate::error::{bail, Result};
use crate::rng::{derive_seed, indexed_rng, stream};
use crate::scores::ScoreFunction;
use crate::similarity::PenaltySource;
use crate::tuning::{tune_on_scored, LambdaGrid, MIN_TUNING_SAMPLES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub avg_size: f64,
    pub avg_superclasses: Option<f64>,
    pub marginal_coverage: f64,
    pub top_cov_gap: f64,
    pub n_test: usize,
    pub empty_set_fraction: f64,
}

/// Per-class coverage; `None` for classes absent from `labels`.
pub fn class_coverages(
    sets: &[PredictionSet],
    labels: &LabelVector,
    n_classes: usize,
) -> Vec<Option<f64>> {
    let mut hits = vec![0usize; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (set, &y) in sets.iter().zip(labels.as_slice()) {
        counts[y] += 1;
        hits[y] += usize::from(set.contains(y));
    }
    hits.iter()
        .zip(&counts)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect()
}

/// Metrics of prediction sets against true labels. Empty sets count as size
/// 0, zero superclasses and a miss.
pub fn evaluate(
    sets: &[PredictionSet],
    labels: &LabelVector,
    partition: Option<&ClassPartition>,
    alpha: f64,
) -> Result<MetricsReport> {
    check_alpha(alpha)?;
    if sets.len() != labels.len() {
        bail!(
            Input,
            "{} prediction sets for {} labels",
            sets.len(),
            labels.len()
        );
    }
    if sets.is_empty() {
        bail!(Input, "no prediction sets to evaluate");
    }
    let n = sets.len() as f64;
    let covered = sets
        .iter()
        .zip(labels.as_slice())
        .filter(|(s, &y)| s.contains(y))
        .count();
    let n_classes = labels.as_slice().iter().max().map_or(0, |m| m + 1);
    let target = 1.0 - alpha;
    let top_cov_gap = class_coverages(sets, labels, n_classes)
        .into_iter()
        .flatten()
        .map(|c| (c - target).abs())
        .fold(0.0, f64::max);
    Ok(MetricsReport {
        avg_size: crate::tuning::average_size(sets),
        avg_superclasses: partition.map(|p| crate::tuning::average_superclasses(sets, p)),
        marginal_coverage: covered as f64 / n,
        top_cov_gap,
        n_test: sets.len(),
        empty_set_fraction: sets.iter().filter(|s| s.is_empty()).count() as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialAggregate {
    pub n_trials: usize,
    pub lambda: MetricSummary,
    pub avg_size: MetricSummary,
    pub avg_superclasses: Option<MetricSummary>,
    pub coverage: MetricSummary,
    pub top_cov_gap: MetricSummary,
    pub empty_set_fraction: MetricSummary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialProtocol {
    pub n_trials: usize,
    pub cal_fraction: f64,
    pub seed: u64,
}

impl Default for TrialProtocol {
    fn default() -> Self {
        Self {
            n_trials: 100,
            cal_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaChoice {
    Fixed(f64),
    Tuned(LambdaGrid),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Standard,
    Penalized {
        source: PenaltySource,
        lambda: LambdaChoice,
    },
    Air(ClassPartition),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::Penalized { source, .. } => source.kind().method_name(),
            Method::Air(_) => "air",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub score: ScoreFunction,
    pub method: Method,
    pub alpha: f64,
    /// Partition used for the superclass metric, if any.
    pub metrics_partition: Option<ClassPartition>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub lambda: f64,
    pub q_hat: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub records: Vec<TrialRecord>,
    pub aggregate: TrialAggregate,
}

/// Seed of trial `t`.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ trial as u64
}

/// Seeded calibration/test split of `0..n` (unstratified).
pub fn random_split(n: usize, cal_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(cal_fraction > 0.0 && cal_fraction < 1.0) {
        bail!(
            Config,
            "cal_fraction must lie in (0, 1), got {cal_fraction}"
        );
    }
    let n_cal = (cal_fraction * n as f64).round() as usize;
    if n_cal == 0 || n_cal >= n {
        bail!(
            Config,
            "split of {n} samples at fraction {cal_fraction} leaves an empty side"
        );
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut indexed_rng(derive_seed(seed, stream::SPLIT), 0));
    let test = idx.split_off(n_cal);
    Ok((idx, test))
}

/// Runs one trial on the given split: optional tuning, calibration,
/// prediction and evaluation. Uniform draws are keyed by softmax row under
/// `draw_seed`, so different methods on the same split share them.
pub fn run_split(
    softmax: &SoftmaxMatrix,
    labels: &LabelVector,
    cal: &[usize],
    test: &[usize],
    method: &MethodConfig,
    draw_seed: u64,
    tuning_seed: u64,
) -> Result<(f64, f64, Vec<PredictionSet>)> {
    let alpha = method.alpha;
    let (lambda, q_hat, sets) = match &method.method {
        Method::Air(partition) => {
            let scores: Vec<f64> = cal
                .iter()
                .map(|&r| air_score(softmax.row(r), labels.get(r), partition))
                .collect();
            let q = CalibrationResult::compute(&scores, alpha, 0.0)?
                .threshold
                .q_hat;
            let sets = test
                .par_iter()
                .map(|&r| air_set(softmax.row(r), q, partition))
                .collect();
            (0.0, q, sets)
        }
        Method::Standard => {
            let scored =
                ScoredSamples::new(softmax, &[cal, test].concat(), &method.score, draw_seed);
            let (cal_pos, test_pos) = positions(cal.len(), test.len());
            let t = scored.calibrate(&cal_pos, labels, alpha, None)?;
            (0.0, t.q_hat, scored.predict(&test_pos, t.q_hat, None))
        }
        Method::Penalized { source, lambda } => {
            source.check_classes(softmax.n_classes())?;
            let scored =
                ScoredSamples::new(softmax, &[cal, test].concat(), &method.score, draw_seed);
            let (cal_pos, test_pos) = positions(cal.len(), test.len());
            let (lambda, q_cal) = match lambda {
                LambdaChoice::Fixed(l) => (*l, cal_pos),
                LambdaChoice::Tuned(grid) => {
                    if cal.len() < MIN_TUNING_SAMPLES {
                        bail!(
                            Config,
                            "calibration split of {} is too small for tuning",
                            cal.len()
                        );
                    }
                    let report = tune_on_scored(
                        &scored,
                        &cal_pos,
                        labels,
                        grid,
                        source,
                        alpha,
                        tuning_seed,
                        method.metrics_partition.as_ref(),
                    )?;
                    let half = report
                        .calibration_half
                        .iter()
                        .map(|&p| cal_pos[p])
                        .collect();
                    (report.chosen_lambda, half)
                }
            };
            let penalty = Some(Penalty::new(source, lambda));
            let t = scored.calibrate(&q_cal, labels, alpha, penalty)?;
            (lambda, t.q_hat, scored.predict(&test_pos, t.q_hat, penalty))
        }
    };
    Ok((lambda, q_hat, sets))
}

fn positions(n_cal: usize, n_test: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..n_cal).collect(), (n_cal..n_cal + n_test).collect())
}

/// Repeats split, (tune), calibrate, predict and evaluate over seeded random
/// splits. Trial `t` depends only on `seed ^ t`, so trials can run in any
/// order.
pub fn run_trials(
    softmax: &SoftmaxMatrix,
    labels: &LabelVector,
    protocol: &TrialProtocol,
    method: &MethodConfig,
) -> Result<TrialOutcome> {
    check_alpha(method.alpha)?;
    if protocol.n_trials == 0 {
        bail!(Config, "need at least one trial");
    }
    if labels.len() != softmax.n_samples() {
        bail!(
            Input,
            "{} labels for {} softmax rows",
            labels.len(),
            softmax.n_samples()
        );
    }
    let records = (0..protocol.n_trials)
        .into_par_iter()
        .map(|trial| {
            let seed = trial_seed(protocol.seed, trial);
            let (cal, test) = random_split(softmax.n_samples(), protocol.cal_fraction, seed)?;
            let (lambda, q_hat, sets) = run_split(
                softmax,
                labels,
                &cal,
                &test,
                method,
                derive_seed(seed, stream::SCORE_DRAWS),
                derive_seed(seed, stream::TUNING),
            )?;
            let report = evaluate(
                &sets,
                &labels.select(&test),
                method.metrics_partition.as_ref(),
                method.alpha,
            )?;
            Ok(TrialRecord {
                trial,
                lambda,
                q_hat,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&records);
    Ok(TrialOutcome { records, aggregate })
}

pub fn aggregate(records: &[TrialRecord]) -> TrialAggregate {
    let col = |f: &dyn Fn(&TrialRecord) -> f64| {
        MetricSummary::of(&records.iter().map(f).collect::<Vec<_>>())
    };
    let superclasses: Option<Vec<f64>> =
        records.iter().map(|r| r.report.avg_superclasses).collect();
    TrialAggregate {
        n_trials: records.len(),
        lambda: col(&|r| r.lambda),
        avg_size: col(&|r| r.report.avg_size),
        avg_superclasses: superclasses.map(|v| MetricSummary::of(&v)),
        coverage: col(&|r| r.report.marginal_coverage),
        top_cov_gap: col(&|r| r.report.top_cov_gap),
        empty_set_fraction: col(&|r| r.report.empty_set_fraction),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn evaluate_small_examples() {
        let sets = vec![
            PredictionSet::new(vec![0], 0),
            PredictionSet::new(vec![0, 1], 0),
        ];
        let labels = LabelVector::new(vec![0, 2], 3).unwrap();
        let r = evaluate(&sets, &labels, None, 0.1).unwrap();
        assert_eq!(r.avg_size, 1.5);
        assert_eq!(r.marginal_coverage, 0.5);
        assert_eq!(r.avg_superclasses, None);
        assert_eq!(r.empty_set_fraction, 0.0);

        let p = ClassPartition::new((0..10).map(|c| c / 5).collect()).unwrap();
        let sets = vec![PredictionSet::new(vec![0, 1, 5], 0)];
        let labels = LabelVector::new(vec![5], 10).unwrap();
        assert_eq!(
            evaluate(&sets, &labels, Some(&p), 0.1)
                .unwrap()
                .avg_superclasses,
            Some(2.0)
        );
    }

    #[test]
    fn top_cov_gap_by_hand() {
        // class 0 always covered, class 1 covered 4 of 5 times
        let mut sets = vec![PredictionSet::new(vec![0], 0); 5];
        sets.extend((0..5).map(|i| PredictionSet::new(if i < 4 { vec![1] } else { vec![0] }, 0)));
        let labels = LabelVector::new([vec![0; 5], vec![1; 5]].concat(), 3).unwrap();
        let r = evaluate(&sets, &labels, None, 0.1).unwrap();
        assert!((r.top_cov_gap - 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_sets_count_as_zero() {
        let p = ClassPartition::new(vec![0, 1]).unwrap();
        let sets = vec![
            PredictionSet::new(vec![], 0),
            PredictionSet::new(vec![1], 0),
        ];
        let labels = LabelVector::new(vec![0, 1], 2).unwrap();
        let r = evaluate(&sets, &labels, Some(&p), 0.1).unwrap();
        assert_eq!(r.avg_size, 0.5);
        assert_eq!(r.avg_superclasses, Some(0.5));
        assert_eq!(r.empty_set_fraction, 0.5);
        assert_eq!(r.marginal_coverage, 0.5);
    }

    fn data() -> crate::synth::SynthData {
        generate(&SynthConfig {
            n_samples: 3000,
            seed: 21,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn ma_tuned(d: &crate::synth::SynthData) -> MethodConfig {
        MethodConfig {
            score: ScoreFunction::lac(),
            method: Method::Penalized {
                source: PenaltySource::MaBinary(d.partition.clone()),
                lambda: LambdaChoice::Tuned(LambdaGrid::default()),
            },
            alpha: 0.1,
            metrics_partition: Some(d.partition.clone()),
        }
    }

    #[test]
    fn single_trial_has_zero_std_and_repeats() {
        let d = data();
        let protocol = TrialProtocol {
            n_trials: 1,
            cal_fraction: 0.2,
            seed: 5,
        };
        let a = run_trials(&d.softmax, &d.labels, &protocol, &ma_tuned(&d)).unwrap();
        assert_eq!(a.aggregate.avg_size.std, 0.0);
        let b = run_trials(&d.softmax, &d.labels, &protocol, &ma_tuned(&d)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn superclasses_never_exceed_size() {
        let d = data();
        let protocol = TrialProtocol {
            n_trials: 3,
            ..TrialProtocol::default()
        };
        let out = run_trials(&d.softmax, &d.labels, &protocol, &ma_tuned(&d)).unwrap();
        for r in &out.records {
            assert!(r.report.avg_superclasses.unwrap() <= r.report.avg_size);
        }
    }

    #[test]
    fn tiny_calibration_with_tuning_is_config_error() {
        let d = data();
        let small = d.softmax.select_rows(&(0..20).collect::<Vec<_>>());
        let labels = d.labels.select(&(0..20).collect::<Vec<_>>());
        let protocol = TrialProtocol {
            n_trials: 1,
            cal_fraction: 0.1,
            seed: 0,
        };
        let err = run_trials(&small, &labels, &protocol, &ma_tuned(&d));
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }

    #[test]
    fn coverage_invariant_under_relabeling() {
        let d = data();
        let c = d.softmax.n_classes();
        // perm maps old class -> new class
        let perm: Vec<usize> = (0..c).map(|k| (k * 7 + 3) % c).collect();
        let mut values = vec![0.0; d.softmax.n_samples() * c];
        for i in 0..d.softmax.n_samples() {
            for k in 0..c {
                values[i * c + perm[k]] = d.softmax.row(i)[k];
            }
        }
        let softmax = crate::data::validate_softmax(
            crate::data::Matrix::new(d.softmax.n_samples(), c, values).unwrap(),
        )
        .unwrap();
        let labels =
            LabelVector::new(d.labels.as_slice().iter().map(|&y| perm[y]).collect(), c).unwrap();
        let mut groups = vec![0; c];
        for k in 0..c {
            groups[perm[k]] = d.partition.group_of(k);
        }
        let partition = ClassPartition::new(groups).unwrap();
        let protocol = TrialProtocol {
            n_trials: 2,
            ..TrialProtocol::default()
        };
        let fixed = |p: &ClassPartition| MethodConfig {
            score: ScoreFunction::lac(),
            method: Method::Penalized {
                source: PenaltySource::MaBinary(p.clone()),
                lambda: LambdaChoice::Fixed(0.1),
            },
            alpha: 0.1,
            metrics_partition: Some(p.clone()),
        };
        let a = run_trials(&d.softmax, &d.labels, &protocol, &fixed(&d.partition)).unwrap();
        let b = run_trials(&softmax, &labels, &protocol, &fixed(&partition)).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.report.marginal_coverage, y.report.marginal_coverage);
            assert_eq!(x.report.avg_size, y.report.avg_size);
        }
    }

    #[test]
    fn top_cov_gap_dominates_every_class_gap() {
        let d = data();
        let (cal, test) = random_split(d.softmax.n_samples(), 0.3, 2).unwrap();
        let m = MethodConfig {
            score: ScoreFunction::lac(),
            method: Method::Standard,
            alpha: 0.1,
            metrics_partition: None,
        };
        let (_, _, sets) = run_split(&d.softmax, &d.labels, &cal, &test, &m, 1, 2).unwrap();
        let labels = d.labels.select(&test);
        let r = evaluate(&sets, &labels, None, 0.1).unwrap();
        for cov in class_coverages(&sets, &labels, d.softmax.n_classes())
            .into_iter()
            .flatten()
        {
            assert!(r.top_cov_gap >= (cov - 0.9).abs());
        }
    }
}
