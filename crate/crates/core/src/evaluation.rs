//! Metrics, repeated train/test splits and end-to-end pipeline evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{fit_forest, grid_search, predict_forest, ForestModel, ForestParams, GridSearch};
use crate::clustering::{cluster_shapes, ShapeModel};
use crate::config::PipelineConfig;
use crate::dataset::{
    build_feature_matrix, repair_sequence, social_feature_set, EngagementSequence, FeatureMatrix,
    FeatureMedians, ImageRecord,
};
use crate::dynamics::{decompose, recompose, Scale, ShapeVector};
use crate::regressor::{fit_svr, SvrModel, SvrParams};
use crate::{Error, Result, HORIZON};

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid("spearman", "needs at least 2 pairs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Root mean squared difference over the 30 days.
pub fn per_image_rmse(pred: &EngagementSequence, actual: &EngagementSequence) -> Result<f64> {
    let p = pred.values().ok_or(Error::UnrepairedSequence)?;
    let a = actual.values().ok_or(Error::UnrepairedSequence)?;
    let sq: f64 = p
        .iter()
        .zip(&a)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((sq / HORIZON as f64).sqrt())
}

/// Mean of the errors after dropping `floor(trim * n)` from each end.
pub fn trimmed_rmse(errors: &[f64], trim: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::invalid("trim", "must lie in [0, 0.5)"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut = (trim * sorted.len() as f64).floor() as usize;
    let kept = &sorted[cut..sorted.len() - cut];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

pub fn median_rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Train and test image ids of one run.
pub type Split = (Vec<String>, Vec<String>);

/// For run `r`, sorts ids, shuffles them with seed `master_seed + r` and
/// puts the first `ceil(train_fraction * n)` in the training set.
pub fn split_runs(
    records: &[ImageRecord],
    train_fraction: f64,
    runs: usize,
    master_seed: u64,
) -> Result<Vec<Split>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction", "must lie strictly between 0 and 1"));
    }
    if runs == 0 {
        return Err(Error::invalid("runs", "must be at least 1"));
    }
    let n = records.len();
    if n < 2 {
        return Err(Error::invalid("records", "at least 2 records are needed to split"));
    }
    let mut ids: Vec<String> = records.iter().map(|r| r.image_id.clone()).collect();
    ids.sort();
    // the epsilon keeps e.g. 0.9 * 2000 from rounding up past 1800
    let n_train = ((train_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    Ok((0..runs)
        .map(|r| {
            let mut shuffled = ids.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(master_seed.wrapping_add(r as u64)));
            let test = shuffled.split_off(n_train);
            (shuffled, test)
        })
        .collect())
}

/// Records with repaired sequences and their decompositions.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRecords {
    pub records: Vec<ImageRecord>,
    pub scales: Vec<u64>,
    pub shapes: Vec<ShapeVector>,
    /// Ids of records whose sequence had no observed day at all.
    pub dropped: Vec<String>,
}

/// Repairs and decomposes every sequence, dropping the unusable ones.
pub fn prepare_records(records: &[ImageRecord]) -> Result<PreparedRecords> {
    let mut out = PreparedRecords {
        records: Vec::with_capacity(records.len()),
        scales: Vec::with_capacity(records.len()),
        shapes: Vec::with_capacity(records.len()),
        dropped: Vec::new(),
    };
    for r in records {
        let Ok(sequence) = repair_sequence(&r.sequence) else {
            log::warn!("dropping {}: no observed day to repair from", r.image_id);
            out.dropped.push(r.image_id.clone());
            continue;
        };
        let (Scale(scale), shape) = decompose(&sequence)?;
        let mut r = r.clone();
        r.sequence = sequence;
        out.records.push(r);
        out.scales.push(scale);
        out.shapes.push(shape);
    }
    if out.records.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}

/// Shape classifier, or a constant label when training saw one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClassifier {
    Forest(ForestModel),
    Constant { label: usize, columns: Vec<String> },
}

impl ShapeClassifier {
    pub fn columns(&self) -> &[String] {
        match self {
            ShapeClassifier::Forest(m) => &m.columns,
            ShapeClassifier::Constant { columns, .. } => columns,
        }
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<usize>> {
        match self {
            ShapeClassifier::Forest(m) => predict_forest(m, x),
            ShapeClassifier::Constant { label, columns } => {
                if x.columns() != columns.as_slice() {
                    return Err(Error::ColumnMismatch {
                        expected: columns.join(","),
                        found: x.columns().join(","),
                    });
                }
                Ok(vec![*label; x.n_rows()])
            }
        }
    }
}

/// Trains the shape classifier on the rows that have a label.
///
/// With more than one grid entry the parameters are chosen by stratified
/// cross-validation. Prototypes with fewer members than folds take no part
/// in the search but are kept for the final fit.
pub fn fit_shape_classifier(
    x: &FeatureMatrix,
    labels: &[Option<usize>],
    grid: &[ForestParams],
    folds: usize,
    seed: u64,
) -> Result<(ShapeClassifier, Option<GridSearch>)> {
    if x.n_rows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: x.n_rows(),
            right: labels.len(),
        });
    }
    let first = *grid
        .first()
        .ok_or_else(|| Error::invalid("grid", "must contain at least one combination"))?;
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let y: Vec<usize> = rows.iter().map(|&i| labels[i].expect("filtered")).collect();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &y {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        let label = counts.keys().next().copied().unwrap_or(0);
        return Ok((
            ShapeClassifier::Constant {
                label,
                columns: x.columns().to_vec(),
            },
            None,
        ));
    }
    let x = x.select_rows(&rows);

    let mut search = None;
    let mut params = first;
    if grid.len() > 1 {
        let eligible: Vec<usize> = (0..y.len()).filter(|&i| counts[&y[i]] >= folds).collect();
        let eligible_classes = counts.values().filter(|&&c| c >= folds).count();
        if eligible_classes >= 2 {
            let sub_y: Vec<usize> = eligible.iter().map(|&i| y[i]).collect();
            let gs = grid_search(&x.select_rows(&eligible), &sub_y, grid, folds, seed)?;
            params = gs.best;
            search = Some(gs);
        } else {
            log::warn!("too few members per prototype for {folds}-fold search; using {first}");
        }
    }
    let model = fit_forest(&x, &y, &params, seed)?;
    Ok((ShapeClassifier::Forest(model), search))
}

pub fn fit_scale_regressor(x: &FeatureMatrix, scales: &[u64], params: &SvrParams, seed: u64) -> Result<SvrModel> {
    let y: Vec<f64> = scales.iter().map(|&s| s as f64).collect();
    fit_svr(x, &y, params, seed)
}

/// Shape classifier input columns for a config.
pub fn shape_feature_names(config: &PipelineConfig) -> Vec<String> {
    config
        .shape_features
        .clone()
        .unwrap_or_else(|| social_feature_set(config.tag_dims))
}

/// Everything fitted on a training partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPipeline {
    pub tag_dims: usize,
    pub medians: FeatureMedians,
    pub shape_model: ShapeModel,
    pub classifier: ShapeClassifier,
    pub search: Option<GridSearch>,
    pub scale_features: Vec<String>,
    pub regressor: SvrModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub prototype: usize,
    pub scale: u64,
    /// Scale before rounding.
    pub scale_continuous: f64,
    pub sequence: EngagementSequence,
}

impl TrainedPipeline {
    pub fn fit(train: &[ImageRecord], config: &PipelineConfig, seed: u64) -> Result<Self> {
        let prepared = prepare_records(train)?;
        let medians = FeatureMedians::fit(&prepared.records)?;
        let records = medians.apply(&prepared.records);

        let (shape_model, kept) =
            cluster_shapes(&prepared.shapes, &config.cluster_params(), config.use_area, seed)?;
        let mut labels = vec![None; records.len()];
        for (&i, &l) in kept.iter().zip(&shape_model.labels) {
            labels[i] = Some(l);
        }
        let x_shape = build_feature_matrix(&records, &shape_feature_names(config), config.tag_dims)?;
        let (classifier, search) =
            fit_shape_classifier(&x_shape, &labels, &config.forest_grid, config.folds, seed)?;

        let x_scale = build_feature_matrix(&records, &config.scale_features, config.tag_dims)?;
        let regressor = fit_scale_regressor(&x_scale, &prepared.scales, &config.svr, seed)?;

        Ok(Self {
            tag_dims: config.tag_dims,
            medians,
            shape_model,
            classifier,
            search,
            scale_features: config.scale_features.clone(),
            regressor,
        })
    }

    /// Forecasts for records; sequences are not consulted.
    pub fn predict(&self, records: &[ImageRecord]) -> Result<Vec<Prediction>> {
        let records = self.medians.apply(records);
        let x_shape = build_feature_matrix(&records, self.classifier.columns(), self.tag_dims)?;
        let x_scale = build_feature_matrix(&records, &self.scale_features, self.tag_dims)?;
        let labels = self.classifier.predict(&x_shape)?;
        let scales = self.regressor.predict_continuous(&x_scale)?;
        let shapes: Vec<ShapeVector> = (0..self.shape_model.n_prototypes())
            .map(|i| self.shape_model.prototype_shape(i))
            .collect::<Result<_>>()?;
        Ok(records
            .iter()
            .zip(labels.into_iter().zip(scales))
            .map(|(r, (label, cont))| {
                let scale = cont.round() as u64;
                Prediction {
                    image_id: r.image_id.clone(),
                    prototype: label,
                    scale,
                    scale_continuous: cont,
                    sequence: recompose(Scale(scale), &shapes[label]),
                }
            })
            .collect())
    }
}

/// Fits on the records whose ids are listed in `train_ids` only.
pub fn fit_run(
    records: &[ImageRecord],
    train_ids: &[String],
    config: &PipelineConfig,
    seed: u64,
) -> Result<TrainedPipeline> {
    let wanted: HashSet<&str> = train_ids.iter().map(String::as_str).collect();
    let train: Vec<ImageRecord> = records
        .iter()
        .filter(|r| wanted.contains(r.image_id.as_str()))
        .cloned()
        .collect();
    TrainedPipeline::fit(&train, config, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub spearman_scale: f64,
    pub classifier_accuracy: f64,
    /// Trimmed mean of per-image RMSE at the configured trim.
    pub trmse_25: f64,
    pub trmse_median: f64,
    /// Untrimmed mean of per-image RMSE.
    pub mean_rmse: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_prototypes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub spearman_scale: f64,
    pub classifier_accuracy: f64,
    pub trmse_25: f64,
    pub trmse_median: f64,
    pub mean_rmse: f64,
}

impl AggregateMetrics {
    fn from_runs(runs: &[RunMetrics]) -> Self {
        let avg = |f: fn(&RunMetrics) -> f64| mean(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            spearman_scale: avg(|r| r.spearman_scale),
            classifier_accuracy: avg(|r| r.classifier_accuracy),
            trmse_25: avg(|r| r.trmse_25),
            trmse_median: avg(|r| r.trmse_median),
            mean_rmse: avg(|r| r.mean_rmse),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_fingerprint: String,
    pub seed: u64,
    pub runs: usize,
    pub trim: f64,
    pub n_records: usize,
    pub dropped_records: Vec<String>,
    pub per_run: Vec<RunMetrics>,
    pub aggregate: AggregateMetrics,
}

/// Test-set forecast of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPrediction {
    pub run: usize,
    pub prediction: Prediction,
}

/// Per-day forecast error over every test image of every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayError {
    pub day: usize,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvaluationReport,
    pub predictions: Vec<RunPrediction>,
    pub day_errors: Vec<DayError>,
}

struct RunOutcome {
    metrics: RunMetrics,
    predictions: Vec<Prediction>,
    actual: Vec<EngagementSequence>,
}

fn evaluate_run(
    prepared: &PreparedRecords,
    index: &HashMap<&str, usize>,
    split: &Split,
    config: &PipelineConfig,
    run: usize,
) -> Result<RunOutcome> {
    let seed = config.seed().wrapping_add(run as u64);
    let pipeline = fit_run(&prepared.records, &split.0, config, seed)?;

    let test_idx: Vec<usize> = split.1.iter().map(|id| index[id.as_str()]).collect();
    let test: Vec<ImageRecord> = test_idx.iter().map(|&i| prepared.records[i].clone()).collect();
    let predictions = pipeline.predict(&test)?;

    let shapes: Vec<ShapeVector> = test_idx.iter().map(|&i| prepared.shapes[i].clone()).collect();
    let truth = pipeline.shape_model.assign_shapes(&shapes)?;
    let (pred_labels, true_labels): (Vec<usize>, Vec<usize>) = predictions
        .iter()
        .zip(&truth)
        .filter_map(|(p, t)| t.map(|t| (p.prototype, t)))
        .unzip();
    let classifier_accuracy = if true_labels.is_empty() {
        1.0
    } else {
        crate::classifier::accuracy(&pred_labels, &true_labels)?
    };

    let pred_scales: Vec<f64> = predictions.iter().map(|p| p.scale_continuous).collect();
    let true_scales: Vec<f64> = test_idx.iter().map(|&i| prepared.scales[i] as f64).collect();
    let spearman_scale = spearman(&pred_scales, &true_scales)?;

    let actual: Vec<EngagementSequence> = test.iter().map(|r| r.sequence.clone()).collect();
    let errors: Vec<f64> = predictions
        .iter()
        .zip(&actual)
        .map(|(p, a)| per_image_rmse(&p.sequence, a))
        .collect::<Result<_>>()?;

    Ok(RunOutcome {
        metrics: RunMetrics {
            run,
            spearman_scale,
            classifier_accuracy,
            trmse_25: trimmed_rmse(&errors, config.trim)?,
            trmse_median: median_rmse(&errors)?,
            mean_rmse: mean(&errors),
            n_train: split.0.len(),
            n_test: split.1.len(),
            n_prototypes: pipeline.shape_model.n_prototypes(),
        },
        predictions,
        actual,
    })
}

fn day_errors(outcomes: &[RunOutcome]) -> Vec<DayError> {
    let mut sq = [0.0; HORIZON];
    let mut abs = [0.0; HORIZON];
    let mut n = 0usize;
    for o in outcomes {
        for (p, a) in o.predictions.iter().zip(&o.actual) {
            let (Some(p), Some(a)) = (p.sequence.values(), a.values()) else {
                continue;
            };
            for t in 0..HORIZON {
                let d = p[t] as f64 - a[t] as f64;
                sq[t] += d * d;
                abs[t] += d.abs();
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    (0..HORIZON)
        .map(|t| DayError {
            day: t + 1,
            rmse: (sq[t] / n).sqrt(),
            mae: abs[t] / n,
        })
        .collect()
}

/// Runs the full protocol: per run, fit everything on the training split
/// and score forecasts on the test split. Runs execute in parallel; the
/// result does not depend on scheduling.
pub fn evaluate_pipeline(records: &[ImageRecord], config: &PipelineConfig) -> Result<Evaluation> {
    config.validate()?;
    let prepared = prepare_records(records)?;
    let splits = split_runs(&prepared.records, config.train_fraction, config.runs, config.seed())?;
    let index: HashMap<&str, usize> = prepared
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.as_str(), i))
        .collect();

    let outcomes: Vec<RunOutcome> = splits
        .par_iter()
        .enumerate()
        .map(|(run, split)| {
            evaluate_run(&prepared, &index, split, config, run).map_err(|e| Error::RunFailed {
                run,
                source: Box::new(e),
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;

    let per_run: Vec<RunMetrics> = outcomes.iter().map(|o| o.metrics.clone()).collect();
    let report = EvaluationReport {
        config_fingerprint: config.fingerprint(),
        seed: config.seed(),
        runs: config.runs,
        trim: config.trim,
        n_records: prepared.records.len(),
        dropped_records: prepared.dropped.clone(),
        aggregate: AggregateMetrics::from_runs(&per_run),
        per_run,
    };
    let day_errors = day_errors(&outcomes);
    let predictions = outcomes
        .into_iter()
        .enumerate()
        .flat_map(|(run, o)| o.predictions.into_iter().map(move |prediction| RunPrediction { run, prediction }))
        .collect();
    Ok(Evaluation {
        report,
        predictions,
        day_errors,
    })
}
