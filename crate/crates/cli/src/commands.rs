use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use serde::{Deserialize, Serialize};

use popdyn::artifacts::{self, Provenance};
use popdyn::classifier::GridSearch;
use popdyn::clustering::{
    cluster_shapes, elbow_sweep, shape_points, silhouette_sweep, ClusterParams, KMeansParams, ShapeModel,
};
use popdyn::config::{ClusterMethod, PipelineConfig, DEFAULT_SEED};
use popdyn::dataset::{build_feature_matrix, load_dataset, write_dataset, FeatureMedians, ImageRecord, Schema, SyntheticConfig};
use popdyn::dynamics::{recompose, Scale};
use popdyn::evaluation::{
    evaluate_pipeline, fit_scale_regressor, fit_shape_classifier, prepare_records, shape_feature_names, Prediction,
    PreparedRecords, ShapeClassifier,
};
use popdyn::regressor::{evaluate_feature_sets, FeatureSetProtocol, SvrModel};

use crate::{Cli, Command, GlobalArgs};

const SEED_ENV: &str = "POPDYN_SEED";

pub const SYNTHETIC: &str = "synthetic.csv";
pub const DECOMPOSITION: &str = "decomposition.csv";
pub const ELBOW: &str = "elbow.csv";
pub const SILHOUETTE: &str = "silhouette.csv";
pub const PROTOTYPES: &str = "prototypes.csv";
pub const LABELS: &str = "labels.csv";
pub const CLUSTERING: &str = "clustering.json";
pub const SHAPE_MODEL: &str = "shape_model.json";
pub const SCALE_MODEL: &str = "scale_model.json";
pub const FEATURE_SETS: &str = "feature_sets.csv";
pub const PREDICTIONS: &str = "predictions.csv";
pub const REPORT: &str = "report.json";
pub const EVAL_PREDICTIONS: &str = "evaluation_predictions.csv";
pub const DAY_ERRORS: &str = "day_errors.csv";

const SHAPE_MODEL_KIND: &str = "shape_model";
const SHAPE_CLASSIFIER_KIND: &str = "shape_classifier";
const SCALE_REGRESSOR_KIND: &str = "scale_regressor";

#[derive(Debug, Serialize, Deserialize)]
struct ShapeStage {
    tag_dims: usize,
    medians: FeatureMedians,
    classifier: ShapeClassifier,
    search: Option<GridSearch>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScaleStage {
    tag_dims: usize,
    medians: FeatureMedians,
    model: SvrModel,
}

struct Context {
    config: PipelineConfig,
    dataset: Option<PathBuf>,
    out_dir: PathBuf,
}

impl Context {
    fn new(global: &GlobalArgs) -> Result<Self> {
        let mut config = match &global.config {
            Some(path) => PipelineConfig::from_file(path)
                .with_context(|| format!("config {}", path.display()))?,
            None => PipelineConfig::default(),
        };
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| anyhow!("{SEED_ENV}: expected an unsigned integer, got `{v}`"))?,
            ),
            Err(_) => None,
        };
        config.seed = Some(global.seed.or(config.seed).or(env_seed).unwrap_or(DEFAULT_SEED));
        let dataset = global.dataset.clone().or_else(|| config.dataset.clone());
        let out_dir = global
            .out_dir
            .clone()
            .or_else(|| config.output.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self {
            config,
            dataset,
            out_dir,
        })
    }

    fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        self.config.set(key, &value.to_string())?;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.config.seed()
    }

    fn provenance(&self) -> Provenance {
        Provenance::new(self.config.fingerprint(), self.seed())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&self, name: &str, payload: &str) -> Result<PathBuf> {
        let path = self.path(name);
        artifacts::write_artifact(&path, &self.provenance(), payload)
            .with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    fn records(&self) -> Result<Vec<ImageRecord>> {
        let path = self
            .dataset
            .as_ref()
            .ok_or_else(|| anyhow!("no dataset given; pass --dataset or set `dataset` in the config"))?;
        load_dataset(path, &Schema::default()).with_context(|| format!("dataset {}", path.display()))
    }

    fn prepared(&self) -> Result<PreparedRecords> {
        let prepared = prepare_records(&self.records()?)?;
        if !prepared.dropped.is_empty() {
            log::warn!("{} records had no observed day and were dropped", prepared.dropped.len());
        }
        Ok(prepared)
    }
}

/// Reads a JSON stage artifact, naming the stage that produces it when absent.
fn require_model<T: serde::de::DeserializeOwned>(path: &Path, kind: &str, stage: &str) -> Result<artifacts::Envelope<T>> {
    if !path.is_file() {
        bail!("missing {}; run `popdyn {stage}` first", path.display());
    }
    Ok(artifacts::read_model(path, kind)?)
}

fn require_payload(path: &Path, stage: &str) -> Result<String> {
    if !path.is_file() {
        bail!("missing {}; run `popdyn {stage}` first", path.display());
    }
    Ok(artifacts::read_payload(path)?)
}

fn apply_cluster_params(ctx: &mut Context, params: &ClusterParams, use_area: bool) {
    let c = &mut ctx.config;
    match params {
        ClusterParams::KMeans(p) => {
            c.cluster_method = ClusterMethod::KMeans;
            c.k = p.k;
            c.restarts = p.restarts;
            c.max_iter = p.max_iter;
            c.tol = p.tol;
        }
        ClusterParams::MeanShift(p) => {
            c.cluster_method = ClusterMethod::MeanShift;
            c.bandwidth = p.bandwidth;
            c.max_iter = p.max_iter;
            c.tol = p.tol;
        }
    }
    c.use_area = use_area;
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut ctx = Context::new(&cli.global)?;
    match &cli.command {
        Command::Synth(args) => {
            ctx.validate()?;
            let mut cfg = SyntheticConfig::new(args.n, args.prototypes, args.noise, ctx.seed());
            cfg.missing_rate = args.missing_rate;
            let records = cfg.generate()?;
            let mut buf = Vec::new();
            write_dataset(&records, &mut buf)?;
            let payload = String::from_utf8(buf)?;
            let path = match &args.output {
                Some(p) => {
                    artifacts::write_artifact(p, &ctx.provenance(), &payload)?;
                    p.clone()
                }
                None => ctx.write(SYNTHETIC, &payload)?,
            };
            println!("wrote {} records to {}", records.len(), path.display());
        }

        Command::Decompose => {
            ctx.validate()?;
            let p = ctx.prepared()?;
            let ids: Vec<String> = p.records.iter().map(|r| r.image_id.clone()).collect();
            ctx.write(DECOMPOSITION, &artifacts::decomposition_csv(&ids, &p.scales, &p.shapes)?)?;
            let degenerate = p.shapes.iter().filter(|s| s.is_degenerate()).count();
            println!("decomposed {} sequences ({degenerate} with zero views)", ids.len());
        }

        Command::Diagnose(args) => {
            if let Some(k) = args.k_min {
                ctx.set("diagnose.k_min", k)?;
            }
            if let Some(k) = args.k_max {
                ctx.set("diagnose.k_max", k)?;
            }
            ctx.validate()?;
            let p = ctx.prepared()?;
            let (points, _) = shape_points(&p.shapes, ctx.config.use_area)?;
            let c = &ctx.config;
            let params = KMeansParams {
                k: c.diagnose_k_max,
                restarts: c.restarts,
                max_iter: c.max_iter,
                tol: c.tol,
            };
            let elbow = elbow_sweep(&points, c.diagnose_k_max, &params, ctx.seed())?;
            ctx.write(ELBOW, &artifacts::series_csv("k", "wss", &elbow)?)?;
            if !args.no_silhouette && c.diagnose_k_max >= 2 {
                let sil = silhouette_sweep(&points, c.diagnose_k_min.max(2), c.diagnose_k_max, &params, ctx.seed())?;
                ctx.write(SILHOUETTE, &artifacts::series_csv("k", "silhouette", &sil)?)?;
                if let Some((k, s)) = sil.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)) {
                    println!("best silhouette {s:.4} at k = {k}");
                }
            }
            println!("elbow sweep over k = 1..={} on {} shapes", c.diagnose_k_max, points.len());
        }

        Command::Cluster(args) => {
            if let Some(m) = &args.method {
                ctx.set("clustering.method", m)?;
            }
            if let Some(k) = args.k {
                ctx.set("clustering.k", k)?;
            }
            if let Some(b) = args.bandwidth {
                ctx.set("clustering.bandwidth", b)?;
            }
            ctx.validate()?;
            let p = ctx.prepared()?;
            let (model, kept) =
                cluster_shapes(&p.shapes, &ctx.config.cluster_params(), ctx.config.use_area, ctx.seed())?;
            let mut labels = vec![None; p.records.len()];
            for (&i, &l) in kept.iter().zip(&model.labels) {
                labels[i] = Some(l);
            }
            let ids: Vec<String> = p.records.iter().map(|r| r.image_id.clone()).collect();
            ctx.write(PROTOTYPES, &artifacts::prototypes_csv(&model)?)?;
            ctx.write(LABELS, &artifacts::labels_csv(&ids, &labels)?)?;
            ctx.write(CLUSTERING, &artifacts::model_payload(SHAPE_MODEL_KIND, None, &model)?)?;
            println!(
                "{} prototypes from {} shapes ({})",
                model.n_prototypes(),
                kept.len(),
                model.params.method_name()
            );
        }

        Command::TrainShape => {
            ctx.validate()?;
            let labels_payload = require_payload(&ctx.path(LABELS), "cluster")?;
            let by_id: HashMap<String, Option<usize>> = artifacts::parse_labels_csv(&labels_payload)?.into_iter().collect();
            let p = ctx.prepared()?;
            let labels: Vec<Option<usize>> = p
                .records
                .iter()
                .map(|r| {
                    by_id.get(&r.image_id).copied().ok_or_else(|| {
                        anyhow!("{} has no label for {}; rerun `popdyn cluster`", LABELS, r.image_id)
                    })
                })
                .collect::<Result<_>>()?;
            let medians = FeatureMedians::fit(&p.records)?;
            let records = medians.apply(&p.records);
            let c = &ctx.config;
            let x = build_feature_matrix(&records, &shape_feature_names(c), c.tag_dims)?;
            let (classifier, search) = fit_shape_classifier(&x, &labels, &c.forest_grid, c.folds, ctx.seed())?;
            match (&classifier, &search) {
                (ShapeClassifier::Forest(m), Some(gs)) => println!(
                    "selected {} (cv accuracy {:.4})",
                    m.params, gs.scores[gs.best_index]
                ),
                (ShapeClassifier::Forest(m), None) => println!("trained {}", m.params),
                (ShapeClassifier::Constant { label, .. }, _) => {
                    println!("single prototype; predicting {label} for every image")
                }
            }
            let stage = ShapeStage {
                tag_dims: c.tag_dims,
                medians,
                classifier,
                search,
            };
            ctx.write(
                SHAPE_MODEL,
                &artifacts::model_payload(SHAPE_CLASSIFIER_KIND, Some(x.schema_hash()), &stage)?,
            )?;
        }

        Command::TrainScale(args) => {
            if let Some(f) = &args.features {
                ctx.set("features.scale", f)?;
            }
            if let Some(k) = &args.kernel {
                ctx.set("regressor.kernel", k)?;
            }
            if let Some(c) = args.c {
                ctx.set("regressor.c", c)?;
            }
            if let Some(e) = args.epsilon {
                ctx.set("regressor.epsilon", e)?;
            }
            ctx.validate()?;
            let p = ctx.prepared()?;
            let medians = FeatureMedians::fit(&p.records)?;
            let records = medians.apply(&p.records);
            let c = &ctx.config;
            let x = build_feature_matrix(&records, &c.scale_features, c.tag_dims)?;
            let model = fit_scale_regressor(&x, &p.scales, &c.svr, ctx.seed())?;
            println!(
                "trained scale regressor on [{}]: {} support vectors, {} SMO iterations",
                c.scale_features.join(","),
                model.n_support(),
                model.iterations
            );
            let stage = ScaleStage {
                tag_dims: c.tag_dims,
                medians,
                model,
            };
            ctx.write(
                SCALE_MODEL,
                &artifacts::model_payload(SCALE_REGRESSOR_KIND, Some(x.schema_hash()), &stage)?,
            )?;
        }

        Command::SelectFeatures => {
            ctx.validate()?;
            let records = ctx.records()?;
            let c = &ctx.config;
            let protocol = FeatureSetProtocol {
                train_fraction: c.train_fraction,
                runs: c.runs,
                seed: ctx.seed(),
                svr: c.svr,
                tag_dims: c.tag_dims,
            };
            let table = evaluate_feature_sets(&records, &c.candidate_sets, &protocol)?;
            ctx.write(FEATURE_SETS, &artifacts::feature_sets_csv(&table)?)?;
            for row in table.iter().take(5) {
                println!("{:.4}  {}", row.mean_spearman, row.features.join("+"));
            }
        }

        Command::Predict => {
            ctx.validate()?;
            let shape_model: ShapeModel = require_model(&ctx.path(CLUSTERING), SHAPE_MODEL_KIND, "cluster")?.model;
            let shape: ShapeStage = require_model(&ctx.path(SHAPE_MODEL), SHAPE_CLASSIFIER_KIND, "train-shape")?.model;
            let scale: ScaleStage = require_model(&ctx.path(SCALE_MODEL), SCALE_REGRESSOR_KIND, "train-scale")?.model;
            let records = ctx.records()?;

            let for_shape = shape.medians.apply(&records);
            let x_shape = build_feature_matrix(&for_shape, shape.classifier.columns(), shape.tag_dims)?;
            let labels = shape.classifier.predict(&x_shape)?;
            let for_scale = scale.medians.apply(&records);
            let x_scale = build_feature_matrix(&for_scale, scale.model.columns(), scale.tag_dims)?;
            let scales = scale.model.predict_continuous(&x_scale)?;

            let predictions = records
                .iter()
                .zip(labels.into_iter().zip(scales))
                .map(|(r, (label, cont))| {
                    let prototype = shape_model.prototype_shape(label)?;
                    let s = cont.round() as u64;
                    Ok(Prediction {
                        image_id: r.image_id.clone(),
                        prototype: label,
                        scale: s,
                        scale_continuous: cont,
                        sequence: recompose(Scale(s), &prototype),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ctx.write(PREDICTIONS, &artifacts::forecasts_csv(&predictions)?)?;
            println!("forecast {} images", predictions.len());
        }

        Command::Evaluate(args) => {
            let prototypes = require_payload(&ctx.path(PROTOTYPES), "cluster")?;
            let env = require_model::<ShapeModel>(&ctx.path(CLUSTERING), SHAPE_MODEL_KIND, "cluster")?;
            if artifacts::parse_prototypes_csv(&prototypes)? != env.model.prototypes {
                bail!(
                    "{} and {} disagree; rerun `popdyn cluster`",
                    ctx.path(PROTOTYPES).display(),
                    ctx.path(CLUSTERING).display()
                );
            }
            apply_cluster_params(&mut ctx, &env.model.params, env.model.area_feature);
            if let Some(r) = args.runs {
                ctx.set("evaluation.runs", r)?;
            }
            if let Some(f) = args.train_fraction {
                ctx.set("evaluation.train_fraction", f)?;
            }
            ctx.validate()?;
            let records = ctx.records()?;
            let eval = evaluate_pipeline(&records, &ctx.config)?;
            ctx.write(REPORT, &artifacts::report_json(&eval.report)?)?;
            ctx.write(EVAL_PREDICTIONS, &artifacts::predictions_csv(&eval.predictions)?)?;
            ctx.write(DAY_ERRORS, &artifacts::day_errors_csv(&eval.day_errors)?)?;
            let a = &eval.report.aggregate;
            println!(
                "runs={} spearman_scale={:.4} classifier_accuracy={:.4} trmse_25={:.3} trmse_median={:.3}",
                eval.report.runs, a.spearman_scale, a.classifier_accuracy, a.trmse_25, a.trmse_median
            );
        }
    }
    Ok(())
}
