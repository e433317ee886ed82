//! Files exchanged between pipeline stages.
//!
//! Every artifact starts with one provenance comment line naming the tool
//! version, the config fingerprint and the seed. Everything after it is the
//! payload: a CSV table or a JSON model envelope. Readers skip leading `#`
//! lines, so two runs can be compared payload to payload.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::clustering::ShapeModel;
use crate::evaluation::{DayError, EvaluationReport, Prediction, RunPrediction};
use crate::regressor::FeatureSetScore;
use crate::{Error, Result, HORIZON};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub version: String,
    pub fingerprint: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(fingerprint: impl Into<String>, seed: u64) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            fingerprint: fingerprint.into(),
            seed,
        }
    }

    pub fn header_line(&self) -> String {
        format!(
            "# popdyn {} fingerprint={} seed={}",
            self.version, self.fingerprint, self.seed
        )
    }
}

/// Writes header and payload to a sibling temp file, then renames it over
/// `path` so readers never see a partial file.
pub fn write_artifact(path: &Path, provenance: &Provenance, payload: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Artifact {
            path: path.to_path_buf(),
            message: "not a file path".into(),
        })?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        writeln!(f, "{}", provenance.header_line())?;
        f.write_all(payload.as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Drops leading `#` lines.
pub fn strip_provenance(text: &str) -> &str {
    let mut rest = text;
    while rest.starts_with('#') {
        rest = rest.split_once('\n').map_or("", |(_, tail)| tail);
    }
    rest
}

/// Reads an artifact's payload; a missing file is reported by path.
pub fn read_payload(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::Artifact {
            path: path.to_path_buf(),
            message: "required artifact not found".into(),
        });
    }
    Ok(strip_provenance(&fs::read_to_string(path)?).to_string())
}

/// Versioned JSON wrapper around a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub format_version: u32,
    pub kind: String,
    /// Hash of the input column names the model expects.
    pub schema_hash: Option<String>,
    pub model: T,
}

pub fn model_payload<T: Serialize>(kind: &str, schema_hash: Option<String>, model: &T) -> Result<String> {
    let env = Envelope {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        schema_hash,
        model,
    };
    let mut s = serde_json::to_string_pretty(&env)?;
    s.push('\n');
    Ok(s)
}

/// Pretty JSON of an evaluation report.
pub fn report_json(report: &EvaluationReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn read_model<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Envelope<T>> {
    let payload = read_payload(path)?;
    let env: Envelope<T> = serde_json::from_str(&payload).map_err(|e| Error::Artifact {
        path: path.to_path_buf(),
        message: format!("not a readable model: {e}"),
    })?;
    if env.format_version != FORMAT_VERSION || env.kind != kind {
        return Err(Error::Artifact {
            path: path.to_path_buf(),
            message: format!(
                "expected {kind} v{FORMAT_VERSION}, found {} v{}",
                env.kind, env.format_version
            ),
        });
    }
    Ok(env)
}

fn day_headers(prefix: char) -> impl Iterator<Item = String> {
    (1..=HORIZON).map(move |d| format!("{prefix}{d:02}"))
}

fn render<F>(header: Vec<String>, fill: F) -> Result<String>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    fill(&mut w)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `prototype,p01..p30` plus `area` when the model clustered with it.
pub fn prototypes_csv(model: &ShapeModel) -> Result<String> {
    let mut header = vec!["prototype".to_string()];
    header.extend(day_headers('p'));
    if model.area_feature {
        header.push("area".into());
    }
    render(header, |w| {
        for (i, p) in model.prototypes.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(p.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        Ok(())
    })
}

/// Reads the prototype vectors back from a `prototypes_csv` payload.
pub fn parse_prototypes_csv(payload: &str) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_reader(payload.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::MalformedRow {
                    row: i + 1,
                    message: format!("bad prototype value `{v}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(values);
    }
    Ok(out)
}

/// `image_id,prototype`; degenerate shapes have an empty label.
pub fn labels_csv(ids: &[String], labels: &[Option<usize>]) -> Result<String> {
    render(vec!["image_id".into(), "prototype".into()], |w| {
        for (id, l) in ids.iter().zip(labels) {
            w.write_record([id.clone(), l.map(|l| l.to_string()).unwrap_or_default()])?;
        }
        Ok(())
    })
}

/// `image_id,scale,popularity_score,s01..s30`; the score uses the final
/// count over the 30-day horizon.
pub fn decomposition_csv(
    ids: &[String],
    scales: &[u64],
    shapes: &[crate::dynamics::ShapeVector],
) -> Result<String> {
    let mut header = vec!["image_id".to_string(), "scale".into(), "popularity_score".into()];
    header.extend(day_headers('s'));
    render(header, |w| {
        for ((id, &scale), shape) in ids.iter().zip(scales).zip(shapes) {
            let score = crate::dynamics::popularity_score(scale as f64, HORIZON as f64)?;
            let mut row = vec![id.clone(), scale.to_string(), score.to_string()];
            row.extend(shape.values().iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        Ok(())
    })
}

/// `image_id,run,p01..p30,predicted_scale,predicted_prototype`.
pub fn predictions_csv(predictions: &[RunPrediction]) -> Result<String> {
    let mut header = vec!["image_id".to_string(), "run".into()];
    header.extend(day_headers('p'));
    header.push("predicted_scale".into());
    header.push("predicted_prototype".into());
    render(header, |w| {
        for rp in predictions {
            let p = &rp.prediction;
            let mut row = vec![p.image_id.clone(), rp.run.to_string()];
            let values = p.sequence.values().ok_or(Error::UnrepairedSequence)?;
            row.extend(values.iter().map(u64::to_string));
            row.push(p.scale.to_string());
            row.push(p.prototype.to_string());
            w.write_record(&row)?;
        }
        Ok(())
    })
}

/// `image_id,p01..p30,predicted_scale,predicted_prototype`.
pub fn forecasts_csv(predictions: &[Prediction]) -> Result<String> {
    let mut header = vec!["image_id".to_string()];
    header.extend(day_headers('p'));
    header.push("predicted_scale".into());
    header.push("predicted_prototype".into());
    render(header, |w| {
        for p in predictions {
            let mut row = vec![p.image_id.clone()];
            let values = p.sequence.values().ok_or(Error::UnrepairedSequence)?;
            row.extend(values.iter().map(u64::to_string));
            row.push(p.scale.to_string());
            row.push(p.prototype.to_string());
            w.write_record(&row)?;
        }
        Ok(())
    })
}

/// Reads `image_id,prototype` rows written by [`labels_csv`].
pub fn parse_labels_csv(payload: &str) -> Result<Vec<(String, Option<usize>)>> {
    let mut r = csv::Reader::from_reader(payload.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let label = match rec.get(1).unwrap_or_default() {
            "" => None,
            v => Some(v.parse::<usize>().map_err(|_| Error::MalformedRow {
                row: i + 1,
                message: format!("bad prototype label `{v}`"),
            })?),
        };
        out.push((id, label));
    }
    Ok(out)
}

pub fn day_errors_csv(errors: &[DayError]) -> Result<String> {
    render(vec!["day".into(), "rmse".into(), "mae".into()], |w| {
        for e in errors {
            w.write_record([e.day.to_string(), e.rmse.to_string(), e.mae.to_string()])?;
        }
        Ok(())
    })
}

/// Two-column table such as `k,wss` or `k,silhouette`.
pub fn series_csv(key: &str, value: &str, rows: &[(usize, f64)]) -> Result<String> {
    render(vec![key.into(), value.into()], |w| {
        for (k, v) in rows {
            w.write_record([k.to_string(), v.to_string()])?;
        }
        Ok(())
    })
}

/// Ranked feature-set table; set members are joined with `+`.
pub fn feature_sets_csv(table: &[FeatureSetScore]) -> Result<String> {
    render(
        vec!["rank".into(), "features".into(), "mean_spearman".into()],
        |w| {
            for (i, s) in table.iter().enumerate() {
                w.write_record([(i + 1).to_string(), s.features.join("+"), s.mean_spearman.to_string()])?;
            }
            Ok(())
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{ClusterParams, KMeansParams};

    #[test]
    fn provenance_is_stripped() {
        let p = Provenance::new("abcd", 7);
        assert!(p.header_line().starts_with("# popdyn "));
        assert!(p.header_line().ends_with("fingerprint=abcd seed=7"));
        assert_eq!(strip_provenance("# a\n# b\nx,y\n1,2\n"), "x,y\n1,2\n");
        assert_eq!(strip_provenance("x\n"), "x\n");
        assert_eq!(strip_provenance("# only"), "");
    }

    #[test]
    fn write_then_read() {
        let dir = std::env::temp_dir().join(format!("popdyn-artifacts-{}", std::process::id()));
        let path = dir.join("t.csv");
        write_artifact(&path, &Provenance::new("f", 1), "a,b\n1,2\n").unwrap();
        assert_eq!(read_payload(&path).unwrap(), "a,b\n1,2\n");
        let leftovers = fs::read_dir(&dir).unwrap().count();
        assert_eq!(leftovers, 1);
        fs::remove_dir_all(&dir).unwrap();
        assert!(matches!(read_payload(&path), Err(Error::Artifact { .. })));
    }

    #[test]
    fn prototypes_roundtrip() {
        let model = ShapeModel {
            params: ClusterParams::KMeans(KMeansParams::new(2)),
            prototypes: vec![vec![0.1; HORIZON], vec![1.0 / 3.0; HORIZON]],
            labels: vec![0, 1],
            seed: 0,
            area_feature: false,
            iterations: 1,
        };
        let csv = prototypes_csv(&model).unwrap();
        assert!(csv.starts_with("prototype,p01,"));
        assert_eq!(parse_prototypes_csv(&csv).unwrap(), model.prototypes);
    }

    #[test]
    fn envelope_checks_kind() {
        let dir = std::env::temp_dir().join(format!("popdyn-envelope-{}", std::process::id()));
        let path = dir.join("m.json");
        let payload = model_payload("thing", Some("h".into()), &vec![1u32, 2]).unwrap();
        write_artifact(&path, &Provenance::new("f", 1), &payload).unwrap();
        let env: Envelope<Vec<u32>> = read_model(&path, "thing").unwrap();
        assert_eq!(env.model, vec![1, 2]);
        assert!(read_model::<Vec<u32>>(&path, "other").is_err());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn labels_leave_degenerate_blank() {
        let csv = labels_csv(&["a".into(), "b".into()], &[Some(3), None]).unwrap();
        assert_eq!(csv, "image_id,prototype\na,3\nb,\n");
        assert_eq!(
            parse_labels_csv(&csv).unwrap(),
            vec![("a".to_string(), Some(3)), ("b".to_string(), None)]
        );
    }
}
