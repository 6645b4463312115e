//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

// the oracles index by class on purpose
#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simconf::conformal::calibrate;
use simconf::data::{FeatureMatrix, LabelVector, Matrix, PredictionSet};
use simconf::metrics::{
    random_split, run_split, run_trials, LambdaChoice, Method, MethodConfig, TrialProtocol,
};
use simconf::rng::{derive_seed, stream};
use simconf::scores::{
    lac_score, raps_score, saps_score, RapsParams, SapsParams, ScoreFunction, ScoreKind,
};
use simconf::similarity::{class_means, cosine_similarity_matrix, PenaltySource};
use simconf::synth::{
    estimate_size_curve, generate, synth_features, verify_exact_properties, FeatureConfig,
    SynthConfig,
};
use simconf::tuning::LambdaGrid;

type Criterion = (&'static str, Duration, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        (
            "1 quantile matches sort-and-index oracle",
            secs(1),
            quantile_oracle,
        ),
        (
            "2 penalized threshold within [q, q + lambda]",
            secs(10),
            threshold_sandwich,
        ),
        (
            "3 no out-of-group class or new group added",
            secs(30),
            per_sample_guarantees,
        ),
        (
            "4 marginal coverage in the conformal band",
            secs(120),
            coverage_band,
        ),
        ("5 small-lambda size slope sign", secs(300), slope_sign),
        (
            "6 lambda sweep has an interior minimum",
            secs(120),
            sweep_shape,
        ),
        (
            "7 tuned MS-CS no larger than tuned MA-Diag",
            secs(300),
            ms_beats_diag,
        ),
        ("8 hand-derived score values", secs(1), score_vectors),
        (
            "9 similarity matches pairwise oracle",
            secs(10),
            similarity_oracle,
        ),
        (
            "10 AIR sets are whole groups and no smaller than LAC",
            secs(120),
            air_structure,
        ),
        (
            "11 CLI output identical across reruns and thread counts",
            secs(300),
            cli_determinism,
        ),
    ];
    let mut failures = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| outcome(false, "panicked"));
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let ok = result.passed && in_time;
        failures += usize::from(!ok);
        println!(
            "criterion {name}: {} ({}; {:.2}s, limit {}s{})",
            if ok { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", too slow" }
        );
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn mean_size(sets: &[PredictionSet]) -> f64 {
    sets.iter().map(|s| s.len()).sum::<usize>() as f64 / sets.len() as f64
}

fn quantile_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    let mut infinite = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=300usize);
        let a = rng.random_range(1..1000u64);
        // coarse values so ties are common
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..50) as f64 / 37.0)
            .collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let k = ((n as u64 + 1) * (1000 - a)).div_ceil(1000) as usize;
        let expected = if k > n { f64::INFINITY } else { sorted[k - 1] };
        infinite += usize::from(k > n);
        let got = calibrate(&scores, a as f64 / 1000.0).unwrap().q_hat;
        mismatches += usize::from(got.to_bits() != expected.to_bits());
    }
    outcome(
        mismatches == 0 && infinite > 0,
        format!("1000 instances, {mismatches} mismatches, {infinite} with +inf threshold"),
    )
}

const MATRIX_LAMBDAS: [f64; 5] = [0.005, 0.02, 0.1, 0.4, 1.5];

fn exact_matrix() -> (usize, usize, usize) {
    let (mut threshold, mut sample, mut checks) = (0, 0, 0);
    for kind in ScoreKind::ALL {
        for seed in 0..5u64 {
            let data = generate(&SynthConfig {
                n_samples: 4000,
                seed: 100 + seed,
                ..SynthConfig::default()
            })
            .unwrap();
            let r = verify_exact_properties(
                &data,
                &ScoreFunction::new(kind),
                0.1,
                &MATRIX_LAMBDAS,
                seed,
            )
            .unwrap();
            if let Some(c) = &r.first_counterexample {
                eprintln!("{kind} seed {seed}: {c}");
            }
            threshold += r.threshold_violations;
            sample += r.sample_violations;
            checks += r.sample_checks;
        }
    }
    (threshold, sample, checks)
}

fn threshold_sandwich() -> Outcome {
    let (violations, _, _) = exact_matrix();
    outcome(
        violations == 0,
        format!("75 score/lambda/seed cells, {violations} violations"),
    )
}

fn per_sample_guarantees() -> Outcome {
    let (_, violations, checks) = exact_matrix();
    outcome(
        violations == 0 && checks >= 100_000,
        format!("{checks} sample-lambda checks, {violations} violations"),
    )
}

fn coverage_band() -> Outcome {
    let data = generate(&SynthConfig {
        n_samples: 10_000,
        seed: 7,
        ..SynthConfig::default()
    })
    .unwrap();
    let features = synth_features(&data.partition, &FeatureConfig::default()).unwrap();
    let similarity =
        cosine_similarity_matrix(&class_means(&features, data.partition.n_classes()).unwrap());
    let protocol = TrialProtocol {
        n_trials: 100,
        cal_fraction: 0.2,
        seed: 11,
    };
    let n_cal = 2000.0;
    let methods = [
        ("standard", Method::Standard),
        (
            "ma-cs fixed",
            Method::Penalized {
                source: PenaltySource::MaBinary(data.partition.clone()),
                lambda: LambdaChoice::Fixed(0.2),
            },
        ),
        (
            "ma-cs tuned",
            Method::Penalized {
                source: PenaltySource::MaBinary(data.partition.clone()),
                lambda: LambdaChoice::Tuned(LambdaGrid::default()),
            },
        ),
        (
            "ms-cs tuned",
            Method::Penalized {
                source: PenaltySource::MsSoft(similarity),
                lambda: LambdaChoice::Tuned(LambdaGrid::default()),
            },
        ),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for alpha in [0.05, 0.1] {
        for (name, method) in &methods {
            let config = MethodConfig {
                score: ScoreFunction::lac(),
                method: method.clone(),
                alpha,
                metrics_partition: None,
            };
            let cov = run_trials(&data.softmax, &data.labels, &protocol, &config)
                .unwrap()
                .aggregate
                .coverage
                .mean;
            let (lo, hi) = (1.0 - alpha - 0.01, 1.0 - alpha + 1.0 / (n_cal + 1.0) + 0.01);
            ok &= (lo..=hi).contains(&cov);
            parts.push(format!("{name}@{alpha}={cov:.4}"));
        }
    }
    outcome(ok, parts.join(", "))
}

fn slope_sign() -> Outcome {
    let lambdas = [0.0, 0.02, 0.04, 0.06];
    let mut counts = Vec::new();
    for (p0, want) in [(0.9, -1.0), (0.05, 1.0)] {
        let mut hits = 0;
        for seed in 0..100u64 {
            let data = generate(&SynthConfig {
                n_groups: 10,
                group_size: 5,
                n_samples: 10_000,
                in_group_mass: p0,
                seed,
                ..SynthConfig::default()
            })
            .unwrap();
            let source = PenaltySource::MaBinary(data.partition.clone());
            let est =
                estimate_size_curve(&data, &ScoreFunction::lac(), &source, 0.1, &lambdas, seed)
                    .unwrap();
            hits += usize::from(est.slope * want > 0.0);
        }
        counts.push(hits);
    }
    outcome(
        counts.iter().all(|&h| h >= 95),
        format!(
            "negative at p0=0.9 in {}/100, positive at p0=0.05 in {}/100",
            counts[0], counts[1]
        ),
    )
}

fn sweep_shape() -> Outcome {
    let grid = LambdaGrid::default();
    let mut ok = true;
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..10u64 {
        let data = generate(&SynthConfig {
            n_samples: 10_000,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let source = PenaltySource::MaBinary(data.partition.clone());
        let est = estimate_size_curve(
            &data,
            &ScoreFunction::lac(),
            &source,
            0.1,
            grid.values(),
            seed,
        )
        .unwrap();
        let curve = &est.size_curve;
        let best = curve
            .iter()
            .min_by(|a, b| a.size.total_cmp(&b.size))
            .unwrap();
        let ratio = best.size / curve[0].size;
        worst_ratio = worst_ratio.max(ratio);
        ok &= best.lambda > 0.0 && ratio <= 0.9 && best.superclasses <= curve[0].superclasses;
    }
    outcome(
        ok,
        format!("10 seeds, largest size ratio at the minimum {worst_ratio:.3}"),
    )
}

fn ms_beats_diag() -> Outcome {
    let mut wins = 0;
    for seed in 0..100u64 {
        let data = generate(&SynthConfig {
            n_samples: 10_000,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let features = synth_features(
            &data.partition,
            &FeatureConfig {
                seed,
                ..FeatureConfig::default()
            },
        )
        .unwrap();
        let similarity = cosine_similarity_matrix(&class_means(&features, 50).unwrap());
        let (cal, test) = random_split(10_000, 0.2, seed).unwrap();
        let size = |source: PenaltySource| {
            let config = MethodConfig {
                score: ScoreFunction::lac(),
                method: Method::Penalized {
                    source,
                    lambda: LambdaChoice::Tuned(LambdaGrid::default()),
                },
                alpha: 0.1,
                metrics_partition: None,
            };
            let draws = derive_seed(seed, stream::SCORE_DRAWS);
            let tuning = derive_seed(seed, stream::TUNING);
            mean_size(
                &run_split(
                    &data.softmax,
                    &data.labels,
                    &cal,
                    &test,
                    &config,
                    draws,
                    tuning,
                )
                .unwrap()
                .2,
            )
        };
        wins += usize::from(size(PenaltySource::MsSoft(similarity)) <= size(PenaltySource::MaDiag));
    }
    outcome(wins >= 90, format!("MS-CS no larger in {wins}/100 runs"))
}

fn score_vectors() -> Outcome {
    let row = [0.5, 0.3, 0.2];
    let raps = |l, k| RapsParams::new(l, k).unwrap();
    let saps = |l| SapsParams::new(l).unwrap();
    let cases = [
        (lac_score(&[0.7, 0.2, 0.1], 0), 0.3),
        (lac_score(&[0.7, 0.2, 0.1], 2), 0.9),
        (lac_score(&[0.25; 4], 3), 0.75),
        (raps_score(&row, 1, raps(0.0, 1), 1.0), 0.8),
        (raps_score(&row, 1, raps(0.1, 1), 1.0), 0.9),
        (raps_score(&row, 0, raps(0.1, 1), 0.0), 0.0),
        (saps_score(&row, 0, SapsParams::default(), 0.5), 0.25),
        (saps_score(&row, 2, saps(0.1), 0.0), 0.6),
        (saps_score(&row, 1, saps(0.1), 0.0), 0.5),
    ];
    let bad = cases
        .iter()
        .filter(|(got, want)| (got - want).abs() > 1e-12)
        .count();
    outcome(
        bad == 0,
        format!("{} vectors, {bad} off by more than 1e-12", cases.len()),
    )
}

/// Means, global mean and cosines computed pair by pair, with no shared code.
fn brute_similarity(rows: &[Vec<f64>], labels: &[usize], c: usize) -> Vec<Vec<f64>> {
    let dim = rows[0].len();
    let mut means = vec![vec![0.0; dim]; c];
    for k in 0..c {
        let members: Vec<&Vec<f64>> = rows
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == k)
            .map(|(r, _)| r)
            .collect();
        for d in 0..dim {
            means[k][d] = members.iter().map(|r| r[d]).sum::<f64>() / members.len() as f64;
        }
    }
    let global: Vec<f64> = (0..dim)
        .map(|d| means.iter().map(|m| m[d]).sum::<f64>() / c as f64)
        .collect();
    let centered: Vec<Vec<f64>> = means
        .iter()
        .map(|m| m.iter().zip(&global).map(|(a, g)| a - g).collect())
        .collect();
    let mut out = vec![vec![0.0; c]; c];
    for a in 0..c {
        for b in 0..c {
            let dot: f64 = centered[a]
                .iter()
                .zip(&centered[b])
                .map(|(x, y)| x * y)
                .sum();
            let na = centered[a].iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = centered[b].iter().map(|x| x * x).sum::<f64>().sqrt();
            out[a][b] = if a == b { 1.0 } else { dot / (na * nb) };
        }
    }
    out
}

fn similarity_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut structural = 0;
    for _ in 0..100 {
        let c = rng.random_range(2..9usize);
        let dim = rng.random_range(1..12usize);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for k in 0..c {
            for _ in 0..rng.random_range(1..6) {
                rows.push(
                    (0..dim)
                        .map(|_| rng.random_range(-3.0..3.0))
                        .collect::<Vec<f64>>(),
                );
                labels.push(k);
            }
        }
        let expected = brute_similarity(&rows, &labels, c);
        let features = FeatureMatrix::new(
            Matrix::from_rows(&rows).unwrap(),
            LabelVector::new(labels, c).unwrap(),
        )
        .unwrap();
        let m = cosine_similarity_matrix(&class_means(&features, c).unwrap());
        for a in 0..c {
            structural += usize::from(m.get(a, a) != 1.0);
            for b in 0..c {
                structural += usize::from(m.get(a, b) != m.get(b, a));
                worst = worst.max((m.get(a, b) - expected[a][b]).abs());
            }
        }
    }
    outcome(
        worst <= 1e-12 && structural == 0,
        format!(
            "100 instances, max deviation {worst:.2e}, {structural} symmetry/diagonal failures"
        ),
    )
}

fn air_structure() -> Outcome {
    let k = 4;
    let mut not_multiple = 0;
    let mut dominated = 0;
    for seed in 0..100u64 {
        let data = generate(&SynthConfig {
            n_groups: 17,
            group_size: k,
            n_samples: 5000,
            in_group_mass: 0.95,
            concentration: 3.0,
            in_group_boost: 2.0,
            top_share: Some(0.8),
            seed,
        })
        .unwrap();
        let (cal, test) = random_split(5000, 0.2, seed).unwrap();
        let sets = |method| {
            let config = MethodConfig {
                score: ScoreFunction::lac(),
                method,
                alpha: 0.1,
                metrics_partition: None,
            };
            run_split(
                &data.softmax,
                &data.labels,
                &cal,
                &test,
                &config,
                seed,
                seed,
            )
            .unwrap()
            .2
        };
        let air = sets(Method::Air(data.partition.clone()));
        let lac = sets(Method::Standard);
        not_multiple += air.iter().filter(|s| s.len() % k != 0).count();
        dominated += usize::from(mean_size(&air) >= mean_size(&lac));
    }
    outcome(
        not_multiple == 0 && dominated == 100,
        format!("{not_multiple} sets not a multiple of K, AIR >= LAC in {dominated}/100 runs"),
    )
}

fn simconf(args: &[&str], threads: usize) -> bool {
    Command::new(env!("CARGO_BIN_EXE_simconf"))
        .args(args)
        .env("CP_THREADS", threads.to_string())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let data = s(root.join("data"));
    if !simconf(
        &["synth", "--samples", "3000", "--seed", "3", "--out", &data],
        1,
    ) {
        return outcome(false, "synth failed");
    }
    let d = |f: &str| s(root.join("data").join(f));
    let (softmax, labels, partition) = (d("softmax.cpm"), d("labels.txt"), d("partition.csv"));
    let (features, feature_labels) = (d("features.cpm"), d("feature_labels.txt"));
    let sim_dir = s(root.join("sim-base"));
    let cal_dir = s(root.join("cal-base"));
    let pred_dir = s(root.join("pred-base"));
    let threshold = s(root.join("cal-base").join("threshold.csv"));
    let sets = s(root.join("pred-base").join("sets.csv"));
    let similarity = s(root.join("sim-base").join("similarity.cpm"));

    let runs: Vec<(&str, Vec<String>)> = vec![
        (
            "similarity",
            vec![
                "--features".into(),
                features.clone(),
                "--labels".into(),
                feature_labels.clone(),
                "--emit-csv".into(),
            ],
        ),
        (
            "calibrate",
            vec![
                "--softmax".into(),
                softmax.clone(),
                "--labels".into(),
                labels.clone(),
                "--score".into(),
                "raps".into(),
                "--penalty".into(),
                "ms".into(),
                "--similarity".into(),
                similarity.clone(),
                "--lambda".into(),
                "0.3".into(),
                "--seed".into(),
                "5".into(),
            ],
        ),
        (
            "predict",
            vec![
                "--softmax".into(),
                softmax.clone(),
                "--threshold".into(),
                threshold,
                "--similarity".into(),
                similarity.clone(),
            ],
        ),
        (
            "evaluate",
            vec![
                "--sets".into(),
                sets,
                "--labels".into(),
                labels.clone(),
                "--partition".into(),
                partition.clone(),
            ],
        ),
        (
            "tune-lambda",
            vec![
                "--softmax".into(),
                softmax.clone(),
                "--labels".into(),
                labels.clone(),
                "--score".into(),
                "saps".into(),
                "--penalty".into(),
                "ma".into(),
                "--partition".into(),
                partition.clone(),
                "--seed".into(),
                "2".into(),
            ],
        ),
        (
            "verify-theory",
            vec![
                "--samples".into(),
                "2000".into(),
                "--score".into(),
                "raps".into(),
                "--seed".into(),
                "4".into(),
            ],
        ),
        (
            "run-trials",
            vec![
                "--samples".into(),
                "3000".into(),
                "--penalty".into(),
                "ms".into(),
                "--trials".into(),
                "8".into(),
                "--score".into(),
                "saps".into(),
                "--seed".into(),
                "6".into(),
            ],
        ),
        (
            "run-trials",
            vec![
                "--softmax".into(),
                softmax,
                "--labels".into(),
                labels,
                "--penalty".into(),
                "air".into(),
                "--partition".into(),
                partition,
                "--trials".into(),
                "5".into(),
            ],
        ),
    ];
    let bases = [sim_dir, cal_dir, pred_dir];
    let mut mismatched = Vec::new();
    for (i, (cmd, args)) in runs.iter().enumerate() {
        let base = bases
            .get(i)
            .cloned()
            .unwrap_or_else(|| s(root.join(format!("base-{i}"))));
        let mut argv: Vec<&str> = vec![cmd];
        argv.extend(args.iter().map(String::as_str));
        let with_out = |out: &str| {
            let mut v = argv.clone();
            v.extend(["--out", out]);
            v.into_iter().map(str::to_owned).collect::<Vec<_>>()
        };
        let run = |out: &str, threads: usize, extra: &[&str]| {
            let mut v = with_out(out);
            v.extend(extra.iter().map(|e| e.to_string()));
            simconf(&v.iter().map(String::as_str).collect::<Vec<_>>(), threads)
        };
        if !run(&base, 1, &[]) {
            return outcome(false, format!("{cmd} failed"));
        }
        let manifest = s(PathBuf::from(&base).join("manifest.txt"));
        let threaded = s(root.join(format!("threads-{i}")));
        let replay = s(root.join(format!("replay-{i}")));
        let replay_ok = simconf(&[cmd, "--config", &manifest, "--out", &replay], 4);
        if !run(&threaded, 8, &[]) || !replay_ok {
            return outcome(false, format!("{cmd} rerun failed"));
        }
        let reference = dir_contents(Path::new(&base));
        for other in [&threaded, &replay] {
            if dir_contents(Path::new(other)) != reference {
                mismatched.push(format!("{cmd}#{i}"));
            }
        }
    }
    outcome(
        mismatched.is_empty(),
        format!(
            "{} runs replayed from manifest and at 1/4/8 threads, mismatches: {:?}",
            runs.len(),
            mismatched
        ),
    )
}
