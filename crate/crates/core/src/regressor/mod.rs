//! Scale regression with an epsilon-insensitive support vector regressor.
//!
//! Inputs are z-scored with training statistics, targets are optionally
//! compressed with `log1p`, and the dual problem is solved by SMO on a
//! precomputed kernel matrix.

mod smo;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_feature_matrix, FeatureMatrix, FeatureMedians, ImageRecord};
use crate::evaluation::{prepare_records, spearman, split_runs};
use crate::{Error, Result};

/// Columns whose training standard deviation falls below this (relative to
/// the column magnitude) are treated as constant.
const CONSTANT_COLUMN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// Input columns seen at fit time.
    pub columns: Vec<String>,
    kept: Vec<usize>,
    means: Vec<f64>,
    stds: Vec<f64>,
    /// Constant columns removed from the model input.
    pub dropped: Vec<String>,
}

impl Standardizer {
    pub fn fit(x: &FeatureMatrix) -> Result<Self> {
        if x.n_rows() == 0 {
            return Err(Error::EmptyInput);
        }
        let n = x.n_rows() as f64;
        let mut kept = Vec::new();
        let mut means = Vec::new();
        let mut stds = Vec::new();
        let mut dropped = Vec::new();
        for (j, name) in x.columns().iter().enumerate() {
            let mean = (0..x.n_rows()).map(|i| x.get(i, j)).sum::<f64>() / n;
            let var = (0..x.n_rows()).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd <= CONSTANT_COLUMN_TOL * (1.0 + mean.abs()) {
                log::warn!("dropping constant column `{name}` from the scale model");
                dropped.push(name.clone());
            } else {
                kept.push(j);
                means.push(mean);
                stds.push(sd);
            }
        }
        Ok(Self {
            columns: x.columns().to_vec(),
            kept,
            means,
            stds,
            dropped,
        })
    }

    pub fn kept_columns(&self) -> Vec<&str> {
        self.kept.iter().map(|&j| self.columns[j].as_str()).collect()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn apply(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        check_columns(&self.columns, x)?;
        Ok(x
            .rows()
            .map(|row| {
                self.kept
                    .iter()
                    .zip(self.means.iter().zip(&self.stds))
                    .map(|(&j, (m, s))| (row[j] - m) / s)
                    .collect()
            })
            .collect())
    }
}

fn check_columns(expected: &[String], x: &FeatureMatrix) -> Result<()> {
    if x.columns() != expected {
        return Err(Error::ColumnMismatch {
            expected: expected.join(","),
            found: x.columns().join(","),
        });
    }
    Ok(())
}

/// Kernel as requested; an unset RBF gamma becomes `1 / n_columns` at fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum KernelChoice {
    Linear,
    Rbf { gamma: Option<f64> },
}

impl Default for KernelChoice {
    fn default() -> Self {
        KernelChoice::Rbf { gamma: None }
    }
}

impl FromStr for KernelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(KernelChoice::Linear),
            "rbf" => Ok(KernelChoice::Rbf { gamma: None }),
            other => Err(Error::invalid("kernel", format!("expected linear or rbf, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetTransform {
    Identity,
    #[default]
    Log1p,
}

impl TargetTransform {
    pub fn forward(self, y: f64) -> f64 {
        match self {
            TargetTransform::Identity => y,
            TargetTransform::Log1p => y.ln_1p(),
        }
    }

    /// Inverse transform, clamped below at zero.
    pub fn inverse(self, raw: f64) -> f64 {
        let v = match self {
            TargetTransform::Identity => raw,
            TargetTransform::Log1p => raw.exp_m1(),
        };
        v.max(0.0)
    }
}

impl fmt::Display for TargetTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetTransform::Identity => "identity",
            TargetTransform::Log1p => "log1p",
        })
    }
}

impl FromStr for TargetTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(TargetTransform::Identity),
            "log1p" => Ok(TargetTransform::Log1p),
            other => Err(Error::invalid(
                "target",
                format!("expected identity or log1p, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrParams {
    pub kernel: KernelChoice,
    pub c: f64,
    /// Tube half-width, in transformed target units.
    pub epsilon: f64,
    /// KKT tolerance.
    pub tol: f64,
    /// SMO stops after `max_passes * 2 * rows` pair updates.
    pub max_passes: usize,
    pub target: TargetTransform,
}

impl Default for SvrParams {
    fn default() -> Self {
        Self {
            kernel: KernelChoice::default(),
            c: 10.0,
            epsilon: 0.1,
            tol: 1e-3,
            max_passes: 1000,
            target: TargetTransform::Log1p,
        }
    }
}

impl SvrParams {
    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::invalid("c", "must be positive and finite"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", "must be nonnegative and finite"));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::invalid("tol", "must be positive and finite"));
        }
        if self.max_passes == 0 {
            return Err(Error::invalid("max_passes", "must be at least 1"));
        }
        if let KernelChoice::Rbf { gamma: Some(g) } = self.kernel {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::invalid("gamma", "must be positive and finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub params: SvrParams,
    pub kernel: Kernel,
    /// Recorded for provenance; the solver itself is deterministic.
    pub seed: u64,
    pub standardizer: Standardizer,
    /// Standardized training rows with a nonzero dual coefficient.
    support_vectors: Vec<Vec<f64>>,
    coefficients: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    /// Maximal KKT violation when the solver stopped.
    pub kkt_gap: f64,
    pub converged: bool,
}

impl SvrModel {
    pub fn columns(&self) -> &[String] {
        &self.standardizer.columns
    }

    /// Dual coefficients `alpha_i - alpha*_i` of the support vectors.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn n_support(&self) -> usize {
        self.coefficients.len()
    }

    /// Decision function values in transformed target units.
    pub fn predict_raw(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        let z = self.standardizer.apply(x)?;
        Ok(z.iter()
            .map(|row| {
                self.support_vectors
                    .iter()
                    .zip(&self.coefficients)
                    .map(|(sv, c)| c * self.kernel.eval(sv, row))
                    .sum::<f64>()
                    + self.bias
            })
            .collect())
    }

    /// Predicted scales before rounding: inverse transform, clamped at 0.
    pub fn predict_continuous(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        let target = self.params.target;
        Ok(self
            .predict_raw(x)?
            .into_iter()
            .map(|r| target.inverse(r))
            .collect())
    }

    pub fn predict_scale(&self, x: &FeatureMatrix) -> Result<Vec<u64>> {
        Ok(self
            .predict_continuous(x)?
            .into_iter()
            .map(|v| v.round() as u64)
            .collect())
    }
}

pub fn fit_svr(x: &FeatureMatrix, y: &[f64], params: &SvrParams, seed: u64) -> Result<SvrModel> {
    params.validate()?;
    if x.n_rows() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.n_rows(),
            right: y.len(),
        });
    }
    if y.len() < 2 {
        return Err(Error::invalid("rows", "at least 2 training rows are required"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("target"));
    }
    if y.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("target", "scales must be nonnegative"));
    }

    let standardizer = Standardizer::fit(x)?;
    let z = standardizer.apply(x)?;
    let d = standardizer.kept.len();
    let kernel = match params.kernel {
        KernelChoice::Linear => Kernel::Linear,
        KernelChoice::Rbf { gamma } => Kernel::Rbf {
            gamma: gamma.unwrap_or(if d == 0 { 1.0 } else { 1.0 / d as f64 }),
        },
    };

    let l = z.len();
    let mut gram = vec![0.0; l * l];
    for a in 0..l {
        for b in a..l {
            let v = kernel.eval(&z[a], &z[b]);
            gram[a * l + b] = v;
            gram[b * l + a] = v;
        }
    }
    let targets: Vec<f64> = y.iter().map(|&v| params.target.forward(v)).collect();
    let solution = smo::solve(&smo::Problem {
        kernel: &gram,
        targets: &targets,
        c: params.c,
        epsilon: params.epsilon,
        tol: params.tol,
        max_iter: params.max_passes.saturating_mul(2 * l),
    });
    if !solution.converged {
        log::warn!(
            "SMO stopped after {} iterations with KKT gap {:.3e}",
            solution.iterations,
            solution.gap
        );
    }

    let mut support_vectors = Vec::new();
    let mut coefficients = Vec::new();
    for (row, &c) in z.into_iter().zip(&solution.coefficients) {
        if c != 0.0 {
            support_vectors.push(row);
            coefficients.push(c);
        }
    }
    Ok(SvrModel {
        params: *params,
        kernel,
        seed,
        standardizer,
        support_vectors,
        coefficients,
        bias: solution.bias,
        iterations: solution.iterations,
        kkt_gap: solution.gap,
        converged: solution.converged,
    })
}

pub fn predict_scale(model: &SvrModel, x: &FeatureMatrix) -> Result<Vec<u64>> {
    model.predict_scale(x)
}

/// Evaluation protocol for ranking candidate feature sets.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSetProtocol {
    pub train_fraction: f64,
    pub runs: usize,
    pub seed: u64,
    pub svr: SvrParams,
    pub tag_dims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSetScore {
    pub features: Vec<String>,
    pub mean_spearman: f64,
    pub per_run: Vec<f64>,
}

/// Trains the regressor on each candidate set over repeated splits and
/// ranks the sets by mean test Spearman correlation, best first.
pub fn evaluate_feature_sets(
    records: &[ImageRecord],
    candidates: &[Vec<String>],
    protocol: &FeatureSetProtocol,
) -> Result<Vec<FeatureSetScore>> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidate_sets", "must not be empty"));
    }
    if candidates.iter().any(Vec::is_empty) {
        return Err(Error::EmptyFeatureSet);
    }
    let prepared = prepare_records(records)?;
    let splits = split_runs(&prepared.records, protocol.train_fraction, protocol.runs, protocol.seed)?;
    let index: std::collections::HashMap<&str, usize> = prepared
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.as_str(), i))
        .collect();

    let jobs: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|c| (0..splits.len()).map(move |r| (c, r)))
        .collect();
    let scores = jobs
        .par_iter()
        .map(|&(c, r)| {
            let (train_ids, test_ids) = &splits[r];
            let pick = |ids: &[String]| -> Vec<usize> { ids.iter().map(|id| index[id.as_str()]).collect() };
            let (train_idx, test_idx) = (pick(train_ids), pick(test_ids));
            let train: Vec<ImageRecord> = train_idx.iter().map(|&i| prepared.records[i].clone()).collect();
            let test: Vec<ImageRecord> = test_idx.iter().map(|&i| prepared.records[i].clone()).collect();
            let medians = FeatureMedians::fit(&train)?;
            let train = medians.apply(&train);
            let test = medians.apply(&test);
            let x_train = build_feature_matrix(&train, &candidates[c], protocol.tag_dims)?;
            let x_test = build_feature_matrix(&test, &candidates[c], protocol.tag_dims)?;
            let y_train: Vec<f64> = train_idx.iter().map(|&i| prepared.scales[i] as f64).collect();
            let y_test: Vec<f64> = test_idx.iter().map(|&i| prepared.scales[i] as f64).collect();
            let model = fit_svr(&x_train, &y_train, &protocol.svr, protocol.seed.wrapping_add(r as u64))?;
            let pred = model.predict_continuous(&x_test)?;
            match spearman(&pred, &y_test) {
                Err(Error::ConstantInput) => {
                    log::warn!(
                        "constant predictions for [{}] in run {r}; scoring 0",
                        candidates[c].join(",")
                    );
                    Ok(0.0)
                }
                other => other,
            }
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut table: Vec<FeatureSetScore> = candidates
        .iter()
        .enumerate()
        .map(|(c, set)| {
            let per_run = scores[c * splits.len()..(c + 1) * splits.len()].to_vec();
            FeatureSetScore {
                features: set.clone(),
                mean_spearman: per_run.iter().sum::<f64>() / per_run.len() as f64,
                per_run,
            }
        })
        .collect();
    // stable sort keeps candidate order among equal scores
    table.sort_by(|a, b| b.mean_spearman.total_cmp(&a.mean_spearman));
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(cols: &[&str], rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(
            (0..rows.len()).map(|i| format!("r{i:04}")).collect(),
            cols.iter().map(|c| c.to_string()).collect(),
            rows,
        )
        .unwrap()
    }

    fn line_data() -> (FeatureMatrix, Vec<f64>) {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 99.0]).collect();
        let y = rows.iter().map(|r| 2.0 * r[0] + 1.0).collect();
        (matrix(&["x"], &rows), y)
    }

    fn linear_identity(c: f64, epsilon: f64) -> SvrParams {
        SvrParams {
            kernel: KernelChoice::Linear,
            c,
            epsilon,
            target: TargetTransform::Identity,
            ..SvrParams::default()
        }
    }

    #[test]
    fn standardizer_examples() {
        let x = matrix(&["a", "k"], &[vec![0.0, 3.0], vec![2.0, 3.0]]);
        let s = Standardizer::fit(&x).unwrap();
        assert_eq!(s.dropped, vec!["k".to_string()]);
        assert_eq!(s.kept_columns(), vec!["a"]);
        assert_eq!(s.apply(&x).unwrap(), vec![vec![-1.0], vec![1.0]]);
    }

    #[test]
    fn standardized_training_columns_have_zero_mean() {
        let rows: Vec<Vec<f64>> = (0..37).map(|i| vec![(i as f64).sin() * 40.0 + 7.0, i as f64 * 0.3]).collect();
        let x = matrix(&["a", "b"], &rows);
        let z = Standardizer::fit(&x).unwrap().apply(&x).unwrap();
        for j in 0..2 {
            let mean = z.iter().map(|r| r[j]).sum::<f64>() / z.len() as f64;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_a_line() {
        let (x, y) = line_data();
        let model = fit_svr(&x, &y, &linear_identity(100.0, 0.001), 0).unwrap();
        assert!(model.converged);
        let pred = model.predict_raw(&x).unwrap();
        let worst = pred.iter().zip(&y).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.05, "max error {worst}");
    }

    #[test]
    fn constant_target_gives_bias_only_model() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let x = matrix(&["a", "b"], &rows);
        let model = fit_svr(&x, &[7.0; 20], &SvrParams::default(), 0).unwrap();
        assert_eq!(model.predict_scale(&x).unwrap(), vec![7; 20]);
        let probe = matrix(&["a", "b"], &[vec![-50.0, 1e4]]);
        assert_eq!(model.predict_scale(&probe).unwrap(), vec![7]);
    }

    #[test]
    fn zero_raw_output_maps_to_zero_scale() {
        assert_eq!(TargetTransform::Log1p.inverse(0.0), 0.0);
        assert_eq!(TargetTransform::Log1p.inverse(-3.0), 0.0);
        assert_eq!(TargetTransform::Identity.inverse(-3.0), 0.0);
    }

    #[test]
    fn duplicated_rows_leave_predictions_unchanged() {
        // every point fits inside the tube, so duplicated constraints stay slack
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 / 29.0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| 3.0 * r[0] + 0.5 + 0.01 * (r[0] * 40.0).sin()).collect();
        let params = SvrParams {
            tol: 1e-10,
            ..linear_identity(10.0, 0.05)
        };
        let once = fit_svr(&matrix(&["x"], &rows), &y, &params, 0).unwrap();
        let rows2: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
        let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
        let twice = fit_svr(&matrix(&["x"], &rows2), &y2, &params, 0).unwrap();
        let probe = matrix(&["x"], &(0..11).map(|i| vec![i as f64 / 10.0]).collect::<Vec<_>>());
        let a = once.predict_raw(&probe).unwrap();
        let b = twice.predict_raw(&probe).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-6, "{p} vs {q}");
        }
    }

    #[test]
    fn coefficients_stay_in_box() {
        let rows: Vec<Vec<f64>> = (0..60).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let y: Vec<f64> = (0..60).map(|i| ((i * 7919) % 97) as f64).collect();
        let params = SvrParams {
            c: 0.5,
            ..SvrParams::default()
        };
        let model = fit_svr(&matrix(&["a", "b"], &rows), &y, &params, 0).unwrap();
        assert!(model.converged);
        assert!(model.kkt_gap < params.tol);
        assert!(model.coefficients().iter().all(|c| c.abs() <= params.c + 1e-12));
        assert!(model.coefficients().iter().any(|c| (c.abs() - params.c).abs() < 1e-12));
    }

    #[test]
    fn errors() {
        let (x, y) = line_data();
        let bad_c = SvrParams {
            c: 0.0,
            ..SvrParams::default()
        };
        assert!(fit_svr(&x, &y, &bad_c, 0).is_err());
        let mut neg = y.clone();
        neg[3] = -1.0;
        assert!(fit_svr(&x, &neg, &SvrParams::default(), 0).is_err());
        let mut nan = y.clone();
        nan[0] = f64::NAN;
        assert!(matches!(fit_svr(&x, &nan, &SvrParams::default(), 0), Err(Error::NonFinite(_))));
        let model = fit_svr(&x, &y, &SvrParams::default(), 0).unwrap();
        let other = matrix(&["z"], &[vec![1.0]]);
        assert!(matches!(model.predict_scale(&other), Err(Error::ColumnMismatch { .. })));
    }

    #[test]
    fn parses_choices() {
        assert_eq!("linear".parse::<KernelChoice>().unwrap(), KernelChoice::Linear);
        assert_eq!("log1p".parse::<TargetTransform>().unwrap(), TargetTransform::Log1p);
        assert!("poly".parse::<KernelChoice>().is_err());
    }

    fn arb_problem() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        (5usize..25).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), n),
                prop::collection::vec(0.0f64..1000.0, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn affine_rescaling_of_a_column_is_absorbed(
            (rows, y) in arb_problem(),
            a in prop_oneof![0.01f64..100.0, -100.0f64..-0.01],
            b in -1e3f64..1e3,
        ) {
            let x = matrix(&["p", "q"], &rows);
            let moved: Vec<Vec<f64>> = rows.iter().map(|r| vec![a * r[0] + b, r[1]]).collect();
            let x2 = matrix(&["p", "q"], &moved);
            // the invariance holds at the optimum, so solve well past the default tolerance
            let params = SvrParams { tol: 1e-10, ..SvrParams::default() };
            let m1 = fit_svr(&x, &y, &params, 0).unwrap();
            let m2 = fit_svr(&x2, &y, &params, 0).unwrap();
            let p1 = m1.predict_raw(&x).unwrap();
            let p2 = m2.predict_raw(&x2).unwrap();
            for (u, v) in p1.iter().zip(&p2) {
                prop_assert!((u - v).abs() <= 1e-6, "{} vs {}", u, v);
            }
        }

        #[test]
        fn predictions_are_nonnegative_and_rank_preserving((rows, y) in arb_problem()) {
            let x = matrix(&["p", "q"], &rows);
            let model = fit_svr(&x, &y, &SvrParams::default(), 0).unwrap();
            let raw = model.predict_raw(&x).unwrap();
            let cont = model.predict_continuous(&x).unwrap();
            prop_assert!(cont.iter().all(|&v| v >= 0.0));
            prop_assert!(model.coefficients().iter().all(|c| c.abs() <= 10.0 + 1e-12));
            for i in 0..raw.len() {
                for j in 0..raw.len() {
                    if raw[i] < raw[j] && cont[j] > 0.0 {
                        prop_assert!(cont[i] <= cont[j]);
                    }
                }
            }
        }
    }
}
