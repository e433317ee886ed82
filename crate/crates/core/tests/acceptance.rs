//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use popdyn::artifacts::{day_errors_csv, predictions_csv, report_json};
use popdyn::classifier::{accuracy, fit_forest, grid_search, predict_forest, ForestParams};
use popdyn::clustering::{elbow_sweep, kmeans, kmeans_traced, lloyd, mean_shift, shape_points, silhouette};
use popdyn::clustering::{KMeansParams, MeanShiftParams};
use popdyn::config::PipelineConfig;
use popdyn::dataset::{generate_synthetic, prototype_curves, EngagementSequence, FeatureMatrix};
use popdyn::dynamics::{decompose, recompose};
use popdyn::evaluation::{evaluate_pipeline, median_rmse, prepare_records, spearman, trimmed_rmse};
use popdyn::regressor::{fit_svr, KernelChoice, SvrParams, TargetTransform};
use popdyn::HORIZON;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("{what} took {elapsed:.2?}, limit {limit:?}"),
    )
}

fn random_repaired(rng: &mut ChaCha8Rng) -> EngagementSequence {
    let top = rng.random_range(0..100_000u64);
    let mut v: Vec<u64> = (0..HORIZON).map(|_| rng.random_range(0..=top)).collect();
    v.sort_unstable();
    EngagementSequence::from_slice(&v).unwrap()
}

fn c1_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seqs: Vec<EngagementSequence> = (0..1000).map(|_| random_repaired(&mut rng)).collect();
    let start = Instant::now();
    let mut checked = 0;
    for s in &seqs {
        let (scale, shape) = decompose(s).map_err(|e| e.to_string())?;
        if scale.0 > 0 {
            ensure(recompose(scale, &shape) == *s, format!("roundtrip changed {s:?}"))?;
            checked += 1;
        }
    }
    within(start.elapsed(), Duration::from_secs(1), "roundtrip")?;
    Ok(format!("{checked} sequences exact in {:.2?}", start.elapsed()))
}

/// Average ranks by counting, independent of any sorting.
fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn c2_spearman() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut compared = 0;
    let mut tied_cases = 0;
    while compared < 100 {
        let n = rng.random_range(2..=20);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let (rx, ry) = (brute_ranks(&x), brute_ranks(&y));
        let constant = |r: &[f64]| r.iter().all(|&v| v == r[0]);
        if constant(&rx) || constant(&ry) {
            ensure(spearman(&x, &y).is_err(), "constant input accepted")?;
            continue;
        }
        let expected = brute_pearson(&rx, &ry);
        let got = spearman(&x, &y).map_err(|e| e.to_string())?;
        ensure((got - expected).abs() <= 1e-12, format!("{got} vs {expected} on {x:?} {y:?}"))?;
        if x.iter().enumerate().any(|(i, a)| x[..i].contains(a)) {
            tied_cases += 1;
        }
        compared += 1;
    }

    for _ in 0..100 {
        let n = rng.random_range(2..=20usize);
        let mut x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut y = x.clone();
        shuffle(&mut x, &mut rng);
        shuffle(&mut y, &mut rng);
        let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
        let nf = n as f64;
        let closed = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        let got = spearman(&x, &y).map_err(|e| e.to_string())?;
        ensure((got - closed).abs() <= 1e-12, format!("closed form {closed} vs {got}"))?;
    }
    Ok(format!("100 random vectors ({tied_cases} with ties) + 100 tie-free closed-form checks"))
}

fn shuffle(v: &mut [f64], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
}

fn c3_lloyd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut iterations = 0;
    for case in 0..50 {
        let n = rng.random_range(2..=500);
        let k = rng.random_range(1..=n.min(12));
        let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..30).map(|_| rng.random::<f64>()).collect()).collect();
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let c = &centres[rng.random_range(0..k)];
                c.iter().map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        let (_, runs) = kmeans_traced(&points, &KMeansParams { restarts: 2, ..KMeansParams::new(k) }, case)
            .map_err(|e| e.to_string())?;
        for run in &runs {
            iterations += run.iterations;
            for w in run.wss_trace.windows(2) {
                ensure(w[1] <= w[0], format!("case {case}: WSS rose from {} to {}", w[0], w[1]))?;
            }
        }
        // a random start (duplicates allowed) must also descend monotonically
        let init: Vec<Vec<f64>> = (0..k).map(|_| points[rng.random_range(0..n)].clone()).collect();
        let run = lloyd(&points, init, 300, 0.0);
        for w in run.wss_trace.windows(2) {
            ensure(w[1] <= w[0], format!("case {case} (random start): WSS rose"))?;
        }
    }
    let points: Vec<Vec<f64>> = (0..40).map(|i| (0..30).map(|j| ((i * 31 + j) % 17) as f64).collect()).collect();
    let model = kmeans(&points, &KMeansParams::new(points.len()), 0).map_err(|e| e.to_string())?;
    let total = popdyn::clustering::wss(&points, &model).map_err(|e| e.to_string())?;
    ensure(total == 0.0, format!("k = n gives WSS {total}"))?;
    Ok(format!("50 datasets, {iterations} Lloyd iterations, WSS never rose; k = n gives 0"))
}

fn c4_silhouette() -> Outcome {
    let one = vec![vec![0.0], vec![1.0], vec![2.0]];
    ensure(silhouette(&one, &[0, 0, 0]).is_err(), "single cluster accepted")?;

    // blobs {0, 0.01} and {10, 10.01}: every point has a = 0.01; the outer
    // points see b = 10.005 and the inner ones b = 9.995
    let blobs = vec![vec![0.0], vec![0.01], vec![10.0], vec![10.01]];
    let got = silhouette(&blobs, &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
    let hand = 1.0 - 0.005 * (1.0 / 10.005 + 1.0 / 9.995);
    ensure((got - hand).abs() < 1e-9, format!("{got} vs hand value {hand}"))?;
    ensure((got - 0.99).abs() <= 0.01, format!("{got} not near 0.99"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let d = rng.random_range(1..5);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let s = silhouette(&pts, &labels).map_err(|e| e.to_string())?;
        ensure((-1.0..=1.0).contains(&s), format!("silhouette {s} out of range"))?;
    }
    Ok(format!("two-blob value {got:.5} (hand {hand:.5}); 200 fuzzed cases in range"))
}

fn c5_mean_shift() -> Outcome {
    let curves = prototype_curves(5);
    let start = Instant::now();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for i in 0..500 {
            let j = i % 5;
            points.push(
                curves[j]
                    .iter()
                    .map(|&v| v + 0.02 * rng.sample::<f64, _>(StandardNormal))
                    .collect::<Vec<f64>>(),
            );
            truth.push(j);
        }
        let model = mean_shift(&points, &MeanShiftParams::new(0.3), seed).map_err(|e| e.to_string())?;
        ensure(model.n_prototypes() == 5, format!("seed {seed}: {} modes", model.n_prototypes()))?;
        // purity: every found cluster holds a single true prototype
        for c in 0..5 {
            let members: Vec<usize> = (0..points.len()).filter(|&i| model.labels[i] == c).map(|i| truth[i]).collect();
            ensure(
                members.iter().all(|&t| t == members[0]),
                format!("seed {seed}: cluster {c} is mixed"),
            )?;
        }
    }
    within(start.elapsed(), Duration::from_secs(30), "mean shift recovery")?;
    Ok(format!("5 modes, purity 1.0 for 20 seeds in {:.2?}", start.elapsed()))
}

fn c6_svr() -> Outcome {
    let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 99.0]).collect();
    let y: Vec<f64> = rows.iter().map(|r| 2.0 * r[0] + 1.0).collect();
    let x = FeatureMatrix::from_rows((0..100).map(|i| format!("r{i:03}")).collect(), vec!["x".into()], &rows)
        .map_err(|e| e.to_string())?;
    let params = SvrParams {
        kernel: KernelChoice::Linear,
        c: 100.0,
        epsilon: 0.001,
        target: TargetTransform::Identity,
        ..SvrParams::default()
    };
    let model = fit_svr(&x, &y, &params, 0).map_err(|e| e.to_string())?;
    let pred = model.predict_raw(&x).map_err(|e| e.to_string())?;
    let worst = pred.iter().zip(&y).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max);
    ensure(worst <= 0.05, format!("max abs error {worst}"))?;
    ensure(
        model.coefficients().iter().all(|c| c.abs() <= params.c),
        "dual coefficient outside [-C, C]",
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows: Vec<Vec<f64>> = (0..80).map(|_| vec![rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)]).collect();
    let scales: Vec<f64> = rows.iter().map(|r| (r[0] + 0.3 * r[1]).exp().round()).collect();
    let x2 = FeatureMatrix::from_rows((0..80).map(|i| format!("r{i:03}")).collect(), vec!["a".into(), "b".into()], &rows)
        .map_err(|e| e.to_string())?;
    let log_model = fit_svr(&x2, &scales, &SvrParams::default(), 0).map_err(|e| e.to_string())?;
    ensure(
        log_model.coefficients().iter().all(|c| c.abs() <= 10.0),
        "log1p model coefficient outside [-C, C]",
    )?;
    let raw = log_model.predict_raw(&x2).map_err(|e| e.to_string())?;
    let before_rounding: Vec<f64> = raw.iter().map(|r| r.exp_m1()).collect();
    let argsort = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
        idx
    };
    ensure(argsort(&raw) == argsort(&before_rounding), "log1p inverse changed the ranking")?;
    Ok(format!("line max error {worst:.2e}; coefficients boxed; argsort preserved"))
}

fn two_blobs(n: usize, rng: &mut ChaCha8Rng, offset: usize) -> (FeatureMatrix, Vec<usize>) {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let class = i % 2;
        let centre = if class == 0 { -2.0 } else { 2.0 };
        rows.push(vec![
            centre + 0.7 * rng.sample::<f64, _>(StandardNormal),
            centre + 0.7 * rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ]);
        y.push(class);
    }
    let ids = (0..n).map(|i| format!("b{:05}", i + offset)).collect();
    let x = FeatureMatrix::from_rows(ids, vec!["u".into(), "v".into(), "noise".into()], &rows).unwrap();
    (x, y)
}

fn c7_forest() -> Outcome {
    let mut worst: f64 = 1.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (x, y) = two_blobs(200, &mut rng, 0);
        let (xt, yt) = two_blobs(200, &mut rng, 1000);
        let params = ForestParams {
            n_trees: 50,
            ..ForestParams::default()
        };
        let model = fit_forest(&x, &y, &params, seed).map_err(|e| e.to_string())?;
        let acc = accuracy(&predict_forest(&model, &xt).map_err(|e| e.to_string())?, &yt).map_err(|e| e.to_string())?;
        worst = worst.min(acc);
        ensure(acc >= 0.95, format!("seed {seed}: test accuracy {acc}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (x, y) = two_blobs(200, &mut rng, 0);
    // leaves must hold more rows than exist, so this combination never splits
    let constant = ForestParams {
        n_trees: 20,
        min_leaf: 1000,
        ..ForestParams::default()
    };
    let separating = ForestParams {
        n_trees: 20,
        ..ForestParams::default()
    };
    let gs = grid_search(&x, &y, &[constant, separating], 3, 0).map_err(|e| e.to_string())?;
    ensure(gs.best == separating, format!("grid search chose {}", gs.best))?;
    Ok(format!(
        "worst test accuracy {worst:.3}; grid search cv {:.3} vs constant {:.3}",
        gs.scores[1], gs.scores[0]
    ))
}

fn c8_trimmed() -> Outcome {
    let e = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 100.0];
    let t = trimmed_rmse(&e, 0.25).map_err(|e| e.to_string())?;
    ensure(t == 4.5, format!("trimmed {t}"))?;
    let plain = trimmed_rmse(&e, 0.0).map_err(|e| e.to_string())?;
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    ensure((plain - mean).abs() <= 1e-12, format!("trim 0 gives {plain}, mean {mean}"))?;
    let m = median_rmse(&[1.0, 2.0, 3.0, 100.0]).map_err(|e| e.to_string())?;
    ensure(m == 2.5, format!("median {m}"))?;
    Ok("4.5 / mean / 2.5".into())
}

fn pipeline_config() -> PipelineConfig {
    PipelineConfig::parse(
        "seed = 11\n\
         clustering.method = meanshift\n\
         clustering.bandwidth = 0.53\n\
         classifier.n_trees = 50\n\
         classifier.max_depth = 8,none\n\
         classifier.min_leaf = 1\n\
         classifier.features_per_split = sqrt\n\
         features.scale = mean_views,contacts\n\
         evaluation.train_fraction = 0.9\n\
         evaluation.runs = 10\n",
    )
    .unwrap()
}

fn c9_pipeline() -> Outcome {
    let records = generate_synthetic(2000, 5, 0.05, 2024).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let eval = evaluate_pipeline(&records, &pipeline_config()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let a = &eval.report.aggregate;
    ensure(eval.report.per_run.len() == 10, "expected 10 runs")?;
    ensure(a.spearman_scale >= 0.9, format!("aggregate scale Spearman {}", a.spearman_scale))?;
    ensure(a.classifier_accuracy >= 0.8, format!("classifier accuracy {}", a.classifier_accuracy))?;
    for r in &eval.report.per_run {
        ensure(
            r.trmse_25 <= r.mean_rmse,
            format!("run {}: tRMSE {} above mean RMSE {}", r.run, r.trmse_25, r.mean_rmse),
        )?;
    }
    within(elapsed, Duration::from_secs(300), "pipeline")?;
    Ok(format!(
        "spearman {:.4}, accuracy {:.4}, tRMSE@0.25 {:.2}, median {:.2}, {} prototypes, {elapsed:.1?}",
        a.spearman_scale,
        a.classifier_accuracy,
        a.trmse_25,
        a.trmse_median,
        eval.report.per_run[0].n_prototypes
    ))
}

fn c10_determinism() -> Outcome {
    let records = generate_synthetic(2000, 5, 0.05, 2024).map_err(|e| e.to_string())?;
    let mut config = pipeline_config();
    config.runs = 3;
    let payload = || -> Result<String, String> {
        let eval = evaluate_pipeline(&records, &config).map_err(|e| e.to_string())?;
        let mut s = report_json(&eval.report).map_err(|e| e.to_string())?;
        s += &predictions_csv(&eval.predictions).map_err(|e| e.to_string())?;
        s += &day_errors_csv(&eval.day_errors).map_err(|e| e.to_string())?;
        Ok(s)
    };
    let (a, b) = (payload()?, payload()?);
    ensure(a == b, "payloads differ between identical runs")?;

    let prepared = prepare_records(&records).map_err(|e| e.to_string())?;
    let (points, _) = shape_points(&prepared.shapes, false).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let params = KMeansParams {
        restarts: 3,
        ..KMeansParams::new(80)
    };
    let sweep = elbow_sweep(&points, 80, &params, 0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(300), "elbow sweep")?;
    let (w1, w80) = (sweep[0].1, sweep[79].1);
    ensure(w80 <= w1, format!("WSS(80) = {w80} > WSS(1) = {w1}"))?;
    Ok(format!(
        "{} payload bytes identical; elbow k = 1..80 in {elapsed:.1?}, WSS {w1:.1} -> {w80:.2}",
        a.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("decomposition roundtrip", c1_roundtrip),
        ("spearman oracle", c2_spearman),
        ("lloyd monotonicity", c3_lloyd),
        ("silhouette", c4_silhouette),
        ("mean shift recovery", c5_mean_shift),
        ("svr sanity", c6_svr),
        ("forest sanity", c7_forest),
        ("trimmed metrics", c8_trimmed),
        ("end-to-end synthetic pipeline", c9_pipeline),
        ("determinism and elbow sweep", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
