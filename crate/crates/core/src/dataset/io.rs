use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{EngagementSequence, ImageRecord, SocialFeature, SocialFeatures};
use crate::{Error, Result, HORIZON};

/// Names of the day columns, `d01` through `d30`.
pub const DAY_COLUMNS: [&str; HORIZON] = [
    "d01", "d02", "d03", "d04", "d05", "d06", "d07", "d08", "d09", "d10", "d11", "d12", "d13",
    "d14", "d15", "d16", "d17", "d18", "d19", "d20", "d21", "d22", "d23", "d24", "d25", "d26",
    "d27", "d28", "d29", "d30",
];

const TAG_SEPARATOR: char = ';';

/// Maps canonical column names to the header names used by a file.
///
/// The default schema is the identity mapping.
#[derive(Debug, Clone, Default)]
pub struct Schema {
    aliases: BTreeMap<String, String>,
}

impl Schema {
    pub fn with_alias(mut self, canonical: &str, header: &str) -> Self {
        self.aliases.insert(canonical.to_string(), header.to_string());
        self
    }

    fn header_for<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.aliases
            .get(canonical)
            .map(String::as_str)
            .unwrap_or(canonical)
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Vec<ImageRecord>> {
    let file = File::open(path.as_ref())?;
    read_dataset(file, schema)
}

struct Columns {
    image_id: usize,
    user_id: usize,
    features: [usize; 9],
    tags: usize,
    title: usize,
    days: [usize; HORIZON],
    true_cluster: Option<usize>,
    true_scale: Option<usize>,
}

impl Columns {
    fn resolve(header: &csv::StringRecord, schema: &Schema) -> Result<Self> {
        let find = |canonical: &str| {
            let name = schema.header_for(canonical);
            header.iter().position(|h| h.trim() == name)
        };
        let require = |canonical: &str| {
            find(canonical).ok_or_else(|| Error::MissingColumn(schema.header_for(canonical).into()))
        };

        let mut features = [0usize; 9];
        for f in SocialFeature::ALL {
            features[f.index()] = require(f.name())?;
        }
        let mut days = [0usize; HORIZON];
        for (slot, name) in days.iter_mut().zip(DAY_COLUMNS) {
            *slot = require(name)?;
        }
        Ok(Self {
            image_id: require("image_id")?,
            user_id: require("user_id")?,
            features,
            tags: require("tags")?,
            title: require("title")?,
            days,
            true_cluster: find("true_cluster"),
            true_scale: find("true_scale"),
        })
    }
}

/// Reads the comma-separated dataset format. Lines starting with `#` are
/// skipped; empty cells are recorded as missing.
pub fn read_dataset<R: Read>(reader: R, schema: &Schema) -> Result<Vec<ImageRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let cols = Columns::resolve(&header, schema)?;

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        if row.len() != header.len() {
            return Err(Error::MalformedRow {
                row: row_no,
                message: format!("expected {} fields, found {}", header.len(), row.len()),
            });
        }
        let record = parse_row(&row, &header, &cols, row_no)?;
        if !seen.insert(record.image_id.clone()) {
            return Err(Error::DuplicateId(record.image_id));
        }
        records.push(record);
    }
    Ok(records)
}

fn parse_row(
    row: &csv::StringRecord,
    header: &csv::StringRecord,
    cols: &Columns,
    row_no: usize,
) -> Result<ImageRecord> {
    let cell = |idx: usize| row.get(idx).unwrap_or("").trim();
    let number = |idx: usize| -> Result<Option<f64>> {
        let raw = cell(idx);
        if raw.is_empty() {
            return Ok(None);
        }
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(Some(v)),
            _ => Err(Error::MalformedRow {
                row: row_no,
                message: format!(
                    "column `{}`: expected a nonnegative number, found `{raw}`",
                    header.get(idx).unwrap_or("?")
                ),
            }),
        }
    };

    let image_id = cell(cols.image_id).to_string();
    if image_id.is_empty() {
        return Err(Error::MalformedRow {
            row: row_no,
            message: "empty image_id".into(),
        });
    }

    let mut features = SocialFeatures::default();
    for f in SocialFeature::ALL {
        features.set(f, number(cols.features[f.index()])?);
    }

    let mut days = [None; HORIZON];
    for (slot, &idx) in days.iter_mut().zip(cols.days.iter()) {
        *slot = number(idx)?.map(|v| v.round() as u64);
    }

    let tags = cell(cols.tags)
        .split(TAG_SEPARATOR)
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();

    let true_cluster = match cols.true_cluster {
        Some(idx) => number(idx)?.map(|v| v as usize),
        None => None,
    };
    let true_scale = match cols.true_scale {
        Some(idx) => number(idx)?.map(|v| v.round() as u64),
        None => None,
    };

    Ok(ImageRecord {
        image_id,
        user_id: cell(cols.user_id).to_string(),
        features,
        tags,
        title: cell(cols.title).to_string(),
        sequence: EngagementSequence::from_options(days),
        true_cluster,
        true_scale,
    })
}

/// Writes records in the dataset format. The ground-truth columns are added
/// only when at least one record carries them.
pub fn write_dataset<W: Write>(records: &[ImageRecord], writer: W) -> Result<()> {
    let with_truth = records
        .iter()
        .any(|r| r.true_cluster.is_some() || r.true_scale.is_some());
    let mut wtr = csv::Writer::from_writer(writer);

    let mut header: Vec<&str> = vec!["image_id", "user_id"];
    header.extend(SocialFeature::ALL.iter().map(|f| f.name()));
    header.extend(["tags", "title"]);
    header.extend(DAY_COLUMNS);
    if with_truth {
        header.extend(["true_cluster", "true_scale"]);
    }
    wtr.write_record(&header)?;

    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in records {
        let mut row: Vec<String> = vec![r.image_id.clone(), r.user_id.clone()];
        row.extend(
            SocialFeature::ALL
                .iter()
                .map(|&f| opt(r.feature(f).map(|v| v.to_string()))),
        );
        row.push(r.tags.join(&TAG_SEPARATOR.to_string()));
        row.push(r.title.clone());
        row.extend(r.sequence.days().iter().map(|d| opt(d.map(|v| v.to_string()))));
        if with_truth {
            row.push(opt(r.true_cluster.map(|v| v.to_string())));
            row.push(opt(r.true_scale.map(|v| v.to_string())));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> String {
        let mut cols = vec!["image_id".to_string(), "user_id".to_string()];
        cols.extend(SocialFeature::ALL.iter().map(|f| f.name().to_string()));
        cols.push("tags".into());
        cols.push("title".into());
        cols.extend(DAY_COLUMNS.iter().map(|s| s.to_string()));
        cols.join(",")
    }

    fn row(id: &str, days: &str) -> String {
        format!("{id},u1,10,20,30.5,4,5,6,7,8,9,sky;sea,a title,{days}")
    }

    fn full_days() -> String {
        (1..=30).map(|d| d.to_string()).collect::<Vec<_>>().join(",")
    }

    #[test]
    fn reads_three_rows_with_missing_markers() {
        let mut days_missing: Vec<String> = (1..=30).map(|d| d.to_string()).collect();
        days_missing[1] = String::new();
        days_missing[29] = String::new();
        let text = format!(
            "{}\n{}\n{}\n{}\n",
            header(),
            row("a", &full_days()),
            row("b", &days_missing.join(",")),
            row("c", &full_days()).replace(",10,20,", ",,20,"),
        );
        let records = read_dataset(text.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(records.len(), 3);
        assert!(records[0].sequence.missing_days().is_empty());
        assert_eq!(records[1].sequence.missing_days(), vec![2, 30]);
        assert_eq!(records[2].feature(SocialFeature::Contacts), None);
        assert_eq!(records[0].feature(SocialFeature::MeanViews), Some(30.5));
        assert_eq!(records[0].tags, vec!["sky", "sea"]);
    }

    #[test]
    fn complete_row_has_no_missing_days() {
        let days: Vec<String> = (0..30).map(|d| (5 + d).to_string()).collect();
        let text = format!("{}\n{}\n", header(), row("x", &days.join(",")));
        let records = read_dataset(text.as_bytes(), &Schema::default()).unwrap();
        assert!(records[0].sequence.is_complete());
        assert_eq!(records[0].sequence.days()[0], Some(5));
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let text = format!(
            "{}\n{}\n{}\n",
            header(),
            row("dup", &full_days()),
            row("dup", &full_days())
        );
        let err = read_dataset(text.as_bytes(), &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(ref id) if id == "dup"), "{err}");
    }

    #[test]
    fn wrong_arity_names_the_row() {
        let text = format!(
            "{}\n{}\n{},extra\n",
            header(),
            row("a", &full_days()),
            row("b", &full_days())
        );
        let err = read_dataset(text.as_bytes(), &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 2, .. }), "{err}");
    }

    #[test]
    fn non_numeric_cell_is_rejected() {
        let text = format!("{}\n{}\n", header(), row("a", &full_days()).replace(",10,", ",ten,"));
        let err = read_dataset(text.as_bytes(), &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 1, .. }), "{err}");
    }

    #[test]
    fn missing_day_column_is_reported() {
        let text = header().replace(",d17", "");
        let err = read_dataset(text.as_bytes(), &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "d17"));
    }

    #[test]
    fn schema_alias_maps_headers() {
        let text = format!(
            "{}\n{}\n",
            header().replace("mean_views", "MeanViews"),
            row("a", &full_days())
        );
        let schema = Schema::default().with_alias("mean_views", "MeanViews");
        let records = read_dataset(text.as_bytes(), &schema).unwrap();
        assert_eq!(records[0].feature(SocialFeature::MeanViews), Some(30.5));
    }

    #[test]
    fn write_then_read_preserves_records() {
        let text = format!("# provenance\n{}\n{}\n", header(), row("a", &full_days()));
        let records = read_dataset(text.as_bytes(), &Schema::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&records, &mut buf).unwrap();
        let again = read_dataset(buf.as_slice(), &Schema::default()).unwrap();
        assert_eq!(records, again);
    }
}
