//! Pipeline configuration.
//!
//! The text format is one `key = value` pair per line with dotted section
//! prefixes (`clustering.bandwidth = 0.53`). Blank lines and lines starting
//! with `#` are ignored, and unknown keys are rejected. List values are
//! comma separated; candidate feature sets are separated by `;`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::classifier::{default_grid, expand_grid, FeaturesPerSplit, ForestParams};
use crate::clustering::{
    ClusterParams, KMeansParams, MeanShiftParams, DEFAULT_MAX_ITER, DEFAULT_RESTARTS, DEFAULT_TOL,
};
use crate::dataset::{Feature, SocialFeature, DEFAULT_TAG_DIMS};
use crate::regressor::{KernelChoice, SvrParams, TargetTransform};
use crate::{Error, Result};

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_BANDWIDTH: f64 = 0.53;
pub const DEFAULT_K: usize = 50;

/// The feature set of the best reported combination: photo and user level
/// counts plus the photo's group statistics.
pub const DEFAULT_SCALE_FEATURES: [&str; 6] = [
    "contacts",
    "photo_count",
    "mean_views",
    "num_groups",
    "avg_group_members",
    "avg_group_photos",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterMethod {
    KMeans,
    MeanShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub tag_dims: usize,

    pub cluster_method: ClusterMethod,
    pub k: usize,
    pub bandwidth: f64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub use_area: bool,
    pub diagnose_k_min: usize,
    pub diagnose_k_max: usize,

    pub forest_grid: Vec<ForestParams>,
    pub folds: usize,

    pub svr: SvrParams,

    pub scale_features: Vec<String>,
    /// `None` uses every social feature plus the tag embedding.
    pub shape_features: Option<Vec<String>>,
    pub candidate_sets: Vec<Vec<String>>,

    pub train_fraction: f64,
    pub runs: usize,
    pub trim: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut candidate_sets: Vec<Vec<String>> = SocialFeature::ALL
            .iter()
            .map(|f| vec![f.name().to_string()])
            .collect();
        candidate_sets.push(DEFAULT_SCALE_FEATURES.iter().map(|s| s.to_string()).collect());
        Self {
            dataset: None,
            output: None,
            seed: None,
            tag_dims: DEFAULT_TAG_DIMS,
            cluster_method: ClusterMethod::MeanShift,
            k: DEFAULT_K,
            bandwidth: DEFAULT_BANDWIDTH,
            restarts: DEFAULT_RESTARTS,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            use_area: false,
            diagnose_k_min: 1,
            diagnose_k_max: 80,
            forest_grid: default_grid(),
            folds: 3,
            svr: SvrParams::default(),
            scale_features: DEFAULT_SCALE_FEATURES.iter().map(|s| s.to_string()).collect(),
            shape_features: None,
            candidate_sets,
            train_fraction: 0.9,
            runs: 10,
            trim: 0.25,
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| config_err(key, format!("cannot parse `{value}`")))
}

fn parse_list<T>(key: &str, value: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| item(s).map_err(|e| config_err(key, e.to_string())))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(config_err(key, "list is empty"));
    }
    Ok(items)
}

fn parse_names(key: &str, value: &str) -> Result<Vec<String>> {
    parse_list(key, value, |s| Ok(s.to_string()))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(config_err(key, format!("expected true or false, got `{other}`"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Distinct values of one grid axis in first-seen order.
fn axis<T: PartialEq + Copy>(grid: &[ForestParams], f: impl Fn(&ForestParams) -> T) -> Vec<T> {
    let mut out = Vec::new();
    for p in grid {
        let v = f(p);
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                config_err(&format!("line {}", lineno + 1), "expected `key = value`")
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config = Self::parse(&std::fs::read_to_string(path)?)?;
        // relative paths in the file are relative to the file itself
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.dataset, &mut config.output].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(d) = &config.dataset {
            if !d.is_file() {
                return Err(config_err("dataset", format!("{} does not exist", d.display())));
            }
        }
        Ok(config)
    }

    /// Sets one key. Grid axes replace only their own axis.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "output" => self.output = Some(PathBuf::from(value)),
            "seed" => self.seed = Some(parse_num(key, value)?),
            "preprocessing.tag_dims" => self.tag_dims = parse_num(key, value)?,

            "clustering.method" => {
                self.cluster_method = match value {
                    "kmeans" => ClusterMethod::KMeans,
                    "meanshift" => ClusterMethod::MeanShift,
                    other => {
                        return Err(config_err(key, format!("expected kmeans or meanshift, got `{other}`")))
                    }
                }
            }
            "clustering.k" => self.k = parse_num(key, value)?,
            "clustering.bandwidth" => self.bandwidth = parse_num(key, value)?,
            "clustering.restarts" => self.restarts = parse_num(key, value)?,
            "clustering.max_iter" => self.max_iter = parse_num(key, value)?,
            "clustering.tol" => self.tol = parse_num(key, value)?,
            "clustering.use_area" => self.use_area = parse_bool(key, value)?,
            "diagnose.k_min" => self.diagnose_k_min = parse_num(key, value)?,
            "diagnose.k_max" => self.diagnose_k_max = parse_num(key, value)?,

            "classifier.n_trees" => {
                let v = parse_list(key, value, |s| parse_num(key, s))?;
                self.regrid(Some(v), None, None, None);
            }
            "classifier.max_depth" => {
                let v = parse_list(key, value, |s| {
                    if s == "none" {
                        Ok(None)
                    } else {
                        parse_num(key, s).map(Some)
                    }
                })?;
                self.regrid(None, Some(v), None, None);
            }
            "classifier.min_leaf" => {
                let v = parse_list(key, value, |s| parse_num(key, s))?;
                self.regrid(None, None, Some(v), None);
            }
            "classifier.features_per_split" => {
                let v = parse_list(key, value, |s| s.parse::<FeaturesPerSplit>())?;
                self.regrid(None, None, None, Some(v));
            }
            "classifier.folds" => self.folds = parse_num(key, value)?,

            "regressor.kernel" => {
                let gamma = match self.svr.kernel {
                    KernelChoice::Rbf { gamma } => gamma,
                    KernelChoice::Linear => None,
                };
                self.svr.kernel = match value.parse::<KernelChoice>().map_err(|e| config_err(key, e.to_string()))? {
                    KernelChoice::Rbf { .. } => KernelChoice::Rbf { gamma },
                    k => k,
                };
            }
            "regressor.gamma" => {
                let gamma = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                };
                if let KernelChoice::Rbf { gamma: g } = &mut self.svr.kernel {
                    *g = gamma;
                } else if gamma.is_some() {
                    return Err(config_err(key, "gamma requires the rbf kernel"));
                }
            }
            "regressor.c" => self.svr.c = parse_num(key, value)?,
            "regressor.epsilon" => self.svr.epsilon = parse_num(key, value)?,
            "regressor.tol" => self.svr.tol = parse_num(key, value)?,
            "regressor.max_passes" => self.svr.max_passes = parse_num(key, value)?,
            "regressor.target" => {
                self.svr.target = value
                    .parse::<TargetTransform>()
                    .map_err(|e| config_err(key, e.to_string()))?
            }

            "features.scale" => self.scale_features = parse_names(key, value)?,
            "features.shape" => {
                self.shape_features = if value == "all" {
                    None
                } else {
                    Some(parse_names(key, value)?)
                }
            }
            "features.candidates" => {
                self.candidate_sets = value
                    .split(';')
                    .map(|set| parse_names(key, set))
                    .collect::<Result<_>>()?
            }

            "evaluation.train_fraction" => self.train_fraction = parse_num(key, value)?,
            "evaluation.runs" => self.runs = parse_num(key, value)?,
            "evaluation.trim" => self.trim = parse_num(key, value)?,
            other => return Err(config_err(other, "unknown key")),
        }
        Ok(())
    }

    fn regrid(
        &mut self,
        n_trees: Option<Vec<usize>>,
        max_depth: Option<Vec<Option<usize>>>,
        min_leaf: Option<Vec<usize>>,
        features: Option<Vec<FeaturesPerSplit>>,
    ) {
        let g = &self.forest_grid;
        let n_trees = n_trees.unwrap_or_else(|| axis(g, |p| p.n_trees));
        let max_depth = max_depth.unwrap_or_else(|| axis(g, |p| p.max_depth));
        let min_leaf = min_leaf.unwrap_or_else(|| axis(g, |p| p.min_leaf));
        let features = features.unwrap_or_else(|| axis(g, |p| p.features_per_split));
        self.forest_grid = expand_grid(&n_trees, &max_depth, &min_leaf, &features);
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, message: &str| if ok { Ok(()) } else { Err(config_err(key, message)) };
        check(self.tag_dims >= 1, "preprocessing.tag_dims", "must be at least 1")?;
        check(self.k >= 1, "clustering.k", "must be at least 1")?;
        check(
            self.bandwidth > 0.0 && self.bandwidth.is_finite(),
            "clustering.bandwidth",
            "must be positive",
        )?;
        check(self.restarts >= 1, "clustering.restarts", "must be at least 1")?;
        check(self.max_iter >= 1, "clustering.max_iter", "must be at least 1")?;
        check(self.tol >= 0.0 && self.tol.is_finite(), "clustering.tol", "must be nonnegative")?;
        check(self.diagnose_k_min >= 1, "diagnose.k_min", "must be at least 1")?;
        check(
            self.diagnose_k_max >= self.diagnose_k_min,
            "diagnose.k_max",
            "must not be below diagnose.k_min",
        )?;
        check(self.folds >= 2, "classifier.folds", "must be at least 2")?;
        for p in &self.forest_grid {
            check(p.n_trees >= 1, "classifier.n_trees", "must be at least 1")?;
            check(p.min_leaf >= 1, "classifier.min_leaf", "must be at least 1")?;
            check(p.max_depth != Some(0), "classifier.max_depth", "must be at least 1")?;
        }
        check(self.svr.c > 0.0 && self.svr.c.is_finite(), "regressor.c", "must be positive")?;
        check(
            self.svr.epsilon >= 0.0 && self.svr.epsilon.is_finite(),
            "regressor.epsilon",
            "must be nonnegative",
        )?;
        check(self.svr.tol > 0.0, "regressor.tol", "must be positive")?;
        check(self.svr.max_passes >= 1, "regressor.max_passes", "must be at least 1")?;
        if let KernelChoice::Rbf { gamma: Some(g) } = self.svr.kernel {
            check(g > 0.0 && g.is_finite(), "regressor.gamma", "must be positive")?;
        }
        for f in &self.scale_features {
            Feature::parse(f, self.tag_dims).map_err(|e| config_err("features.scale", e.to_string()))?;
        }
        for f in self.shape_features.iter().flatten() {
            Feature::parse(f, self.tag_dims).map_err(|e| config_err("features.shape", e.to_string()))?;
        }
        for f in self.candidate_sets.iter().flatten() {
            Feature::parse(f, self.tag_dims).map_err(|e| config_err("features.candidates", e.to_string()))?;
        }
        check(
            self.train_fraction > 0.0 && self.train_fraction < 1.0,
            "evaluation.train_fraction",
            "must lie strictly between 0 and 1",
        )?;
        check(self.runs >= 1, "evaluation.runs", "must be at least 1")?;
        check(
            (0.0..0.5).contains(&self.trim),
            "evaluation.trim",
            "must lie in [0, 0.5)",
        )?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn cluster_params(&self) -> ClusterParams {
        match self.cluster_method {
            ClusterMethod::KMeans => ClusterParams::KMeans(KMeansParams {
                k: self.k,
                restarts: self.restarts,
                max_iter: self.max_iter,
                tol: self.tol,
            }),
            ClusterMethod::MeanShift => ClusterParams::MeanShift(MeanShiftParams {
                bandwidth: self.bandwidth,
                max_iter: self.max_iter,
                tol: self.tol,
            }),
        }
    }

    /// Every model parameter and the seed, one canonical line per key.
    /// Paths are left out so relocating data does not change it.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("seed", self.seed().to_string());
        line("preprocessing.tag_dims", self.tag_dims.to_string());
        line(
            "clustering.method",
            match self.cluster_method {
                ClusterMethod::KMeans => "kmeans",
                ClusterMethod::MeanShift => "meanshift",
            }
            .to_string(),
        );
        line("clustering.k", self.k.to_string());
        line("clustering.bandwidth", format!("{:?}", self.bandwidth));
        line("clustering.restarts", self.restarts.to_string());
        line("clustering.max_iter", self.max_iter.to_string());
        line("clustering.tol", format!("{:?}", self.tol));
        line("clustering.use_area", self.use_area.to_string());
        line("diagnose.k_min", self.diagnose_k_min.to_string());
        line("diagnose.k_max", self.diagnose_k_max.to_string());
        let grid: Vec<String> = self.forest_grid.iter().map(ToString::to_string).collect();
        line("classifier.grid", grid.join(";"));
        line("classifier.folds", self.folds.to_string());
        let (kernel, gamma) = match self.svr.kernel {
            KernelChoice::Linear => ("linear", "none".to_string()),
            KernelChoice::Rbf { gamma } => ("rbf", gamma.map_or("auto".to_string(), |g| format!("{g:?}"))),
        };
        line("regressor.kernel", kernel.to_string());
        line("regressor.gamma", gamma);
        line("regressor.c", format!("{:?}", self.svr.c));
        line("regressor.epsilon", format!("{:?}", self.svr.epsilon));
        line("regressor.tol", format!("{:?}", self.svr.tol));
        line("regressor.max_passes", self.svr.max_passes.to_string());
        line("regressor.target", self.svr.target.to_string());
        line("features.scale", join(&self.scale_features));
        line(
            "features.shape",
            self.shape_features.as_ref().map_or("all".to_string(), |f| join(f)),
        );
        let sets: Vec<String> = self.candidate_sets.iter().map(|s| join(s)).collect();
        line("features.candidates", sets.join(";"));
        line("evaluation.train_fraction", format!("{:?}", self.train_fraction));
        line("evaluation.runs", self.runs.to_string());
        line("evaluation.trim", format!("{:?}", self.trim));
        s
    }

    /// Short hash of [`Self::canonical_text`].
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.train_fraction, 0.9);
        assert_eq!(c.runs, 10);
        assert_eq!(c.trim, 0.25);
        assert_eq!(c.forest_grid.len(), 24);
    }

    #[test]
    fn parses_keys() {
        let c = PipelineConfig::parse(
            "# demo\nseed = 7\nclustering.method = kmeans\nclustering.k = 5\n\
             classifier.n_trees = 50\nclassifier.max_depth = 4,none\n\
             regressor.kernel = linear\nfeatures.candidates = mean_views ; contacts,mean_views\n",
        )
        .unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.cluster_params(), ClusterParams::KMeans(KMeansParams::new(5)));
        assert_eq!(c.forest_grid.len(), 2 * 2 * 2);
        assert!(c.forest_grid.iter().all(|p| p.n_trees == 50));
        assert_eq!(c.svr.kernel, KernelChoice::Linear);
        assert_eq!(c.candidate_sets.len(), 2);
        assert_eq!(c.candidate_sets[1], vec!["contacts", "mean_views"]);
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_key() {
        let err = PipelineConfig::parse("clustering.colour = red").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "clustering.colour"));
        let err = PipelineConfig::parse("evaluation.train_fraction = 1.5").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "evaluation.train_fraction"));
        let err = PipelineConfig::parse("features.scale = mean_views,likes").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "features.scale"));
        assert!(PipelineConfig::parse("just words").is_err());
    }

    #[test]
    fn fingerprint_tracks_parameters_not_paths() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.output = Some("elsewhere".into());
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.svr.c = 11.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.seed = Some(1);
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
