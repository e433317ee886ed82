use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ImageRecord, SocialFeature};
use crate::{Error, Result};

pub const DEFAULT_TAG_DIMS: usize = 64;

const TAG_PREFIX: &str = "tag_";
const NUM_TAGS: &str = "num_tags";

/// A named column of the model input space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    Social(SocialFeature),
    /// Count of tags hashed into this bucket.
    TagBucket(usize),
    NumTags,
}

impl Feature {
    pub fn parse(name: &str, tag_dims: usize) -> Result<Self> {
        let feature = name.parse::<Feature>()?;
        if let Feature::TagBucket(b) = feature {
            if b >= tag_dims {
                return Err(Error::UnknownFeature(name.to_string()));
            }
        }
        Ok(feature)
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feature::Social(s) => f.write_str(s.name()),
            Feature::TagBucket(b) => write!(f, "{TAG_PREFIX}{b}"),
            Feature::NumTags => f.write_str(NUM_TAGS),
        }
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == NUM_TAGS {
            return Ok(Feature::NumTags);
        }
        if let Some(digits) = s.strip_prefix(TAG_PREFIX) {
            if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                if let Ok(b) = digits.parse() {
                    return Ok(Feature::TagBucket(b));
                }
            }
            return Err(Error::UnknownFeature(s.to_string()));
        }
        s.parse::<SocialFeature>().map(Feature::Social)
    }
}

/// Dense row-major matrix of model inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    row_ids: Vec<String>,
    columns: Vec<String>,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(row_ids: Vec<String>, columns: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != row_ids.len() * columns.len() {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: row_ids.len() * columns.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix"));
        }
        Ok(Self {
            row_ids,
            columns,
            values,
        })
    }

    /// Builds a matrix from rows; every row must have `columns.len()` entries.
    pub fn from_rows(row_ids: Vec<String>, columns: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != row_ids.len() {
            return Err(Error::LengthMismatch {
                left: rows.len(),
                right: row_ids.len(),
            });
        }
        let mut values = Vec::with_capacity(rows.len() * columns.len());
        for row in rows {
            if row.len() != columns.len() {
                return Err(Error::LengthMismatch {
                    left: row.len(),
                    right: columns.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(row_ids, columns, values)
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_cols();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols() + col]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.n_rows()).map(move |i| self.row(i))
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.n_cols());
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            row_ids: indices.iter().map(|&i| self.row_ids[i].clone()).collect(),
            columns: self.columns.clone(),
            values,
        }
    }

    /// Concatenates columns of two matrices with identical rows.
    pub fn hstack(&self, other: &FeatureMatrix) -> Result<Self> {
        if self.row_ids != other.row_ids {
            return Err(Error::invalid("hstack", "row ids differ"));
        }
        let mut columns = self.columns.clone();
        columns.extend(other.columns.iter().cloned());
        let mut values = Vec::with_capacity(self.n_rows() * columns.len());
        for i in 0..self.n_rows() {
            values.extend_from_slice(self.row(i));
            values.extend_from_slice(other.row(i));
        }
        Ok(Self {
            row_ids: self.row_ids.clone(),
            columns,
            values,
        })
    }

    /// Short hex digest of the column names, used to tie persisted models to
    /// their input schema.
    pub fn schema_hash(&self) -> String {
        schema_hash(&self.columns)
    }
}

pub(crate) fn schema_hash(columns: &[String]) -> String {
    let mut h = Sha256::new();
    for c in columns {
        h.update(c.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

/// FNV-1a over the lowercased token, reduced to a bucket index.
pub fn tag_bucket(token: &str, dims: usize) -> usize {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for b in token.trim().to_lowercase().bytes() {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(PRIME);
    }
    (hash % dims as u64) as usize
}

fn tag_counts(tags: &[String], dims: usize) -> Vec<f64> {
    let mut counts = vec![0.0; dims];
    for t in tags {
        counts[tag_bucket(t, dims)] += 1.0;
    }
    counts
}

/// Hashed bag-of-tags: `dims` bucket counts followed by `num_tags`.
pub fn embed_tags(records: &[ImageRecord], dims: usize) -> Result<FeatureMatrix> {
    if dims == 0 {
        return Err(Error::invalid("tag dims", "must be at least 1"));
    }
    let mut columns: Vec<String> = (0..dims)
        .map(|b| Feature::TagBucket(b).to_string())
        .collect();
    columns.push(NUM_TAGS.to_string());
    let mut values = Vec::with_capacity(records.len() * (dims + 1));
    for r in records {
        values.extend(tag_counts(&r.tags, dims));
        values.push(r.tags.len() as f64);
    }
    FeatureMatrix::new(
        records.iter().map(|r| r.image_id.clone()).collect(),
        columns,
        values,
    )
}

/// Every numeric social feature plus all tag-hash columns.
pub fn social_feature_set(tag_dims: usize) -> Vec<String> {
    let mut names: Vec<String> = SocialFeature::ALL
        .iter()
        .map(|f| f.name().to_string())
        .collect();
    names.extend((0..tag_dims).map(|b| Feature::TagBucket(b).to_string()));
    names.push(NUM_TAGS.to_string());
    names
}

/// Assembles the requested columns, in the order given.
pub fn build_feature_matrix<S: AsRef<str>>(
    records: &[ImageRecord],
    feature_set: &[S],
    tag_dims: usize,
) -> Result<FeatureMatrix> {
    if feature_set.is_empty() {
        return Err(Error::EmptyFeatureSet);
    }
    let features: Vec<Feature> = feature_set
        .iter()
        .map(|name| Feature::parse(name.as_ref(), tag_dims))
        .collect::<Result<_>>()?;
    let needs_tags = features.iter().any(|f| matches!(f, Feature::TagBucket(_)));

    let mut values = Vec::with_capacity(records.len() * features.len());
    for r in records {
        let counts = if needs_tags {
            tag_counts(&r.tags, tag_dims)
        } else {
            Vec::new()
        };
        for f in &features {
            let v = match *f {
                Feature::Social(s) => r.feature(s).ok_or_else(|| Error::NotImputed {
                    image_id: r.image_id.clone(),
                    feature: s.name().to_string(),
                })?,
                Feature::TagBucket(b) => counts[b],
                Feature::NumTags => r.tags.len() as f64,
            };
            values.push(v);
        }
    }
    FeatureMatrix::new(
        records.iter().map(|r| r.image_id.clone()).collect(),
        features.iter().map(Feature::to_string).collect(),
        values,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EngagementSequence;
    use crate::HORIZON;

    fn record(id: &str, mean_views: f64, contacts: f64, tags: &[&str]) -> ImageRecord {
        let mut r = ImageRecord::new(id, EngagementSequence::complete([0; HORIZON]));
        for f in SocialFeature::ALL {
            r.features.set(f, Some(0.0));
        }
        r.features.set(SocialFeature::MeanViews, Some(mean_views));
        r.features.set(SocialFeature::Contacts, Some(contacts));
        r.tags = tags.iter().map(|s| s.to_string()).collect();
        r
    }

    #[test]
    fn empty_tags_embed_to_zero() {
        let m = embed_tags(&[record("a", 1.0, 1.0, &[])], 8).unwrap();
        assert_eq!(m.n_cols(), 9);
        assert!(m.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_is_deterministic() {
        let r = record("a", 1.0, 1.0, &["Sunset", "beach", "sunset"]);
        let a = embed_tags(std::slice::from_ref(&r), 64).unwrap();
        let b = embed_tags(std::slice::from_ref(&r), 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn repeated_tags_accumulate() {
        let m = embed_tags(&[record("a", 1.0, 1.0, &["a", "a", "b"])], 64).unwrap();
        let row = m.row(0);
        assert_eq!(row[tag_bucket("a", 64)], if tag_bucket("a", 64) == tag_bucket("b", 64) { 3.0 } else { 2.0 });
        assert_eq!(row[..64].iter().sum::<f64>(), 3.0);
        assert_eq!(row[64], 3.0);
    }

    #[test]
    fn tag_hash_ignores_case() {
        assert_eq!(tag_bucket("Sky", 64), tag_bucket("sky", 64));
    }

    #[test]
    fn single_feature_matrix() {
        let recs = [record("a", 3.0, 1.0, &[]), record("b", 5.0, 2.0, &[])];
        let m = build_feature_matrix(&recs, &["mean_views"], 64).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (2, 1));
        assert_eq!(m.row(1), &[5.0]);
    }

    #[test]
    fn column_order_follows_request() {
        let recs = [record("a", 3.0, 1.0, &[])];
        let m = build_feature_matrix(&recs, &["mean_views", "contacts"], 64).unwrap();
        assert_eq!(m.columns(), &["mean_views", "contacts"]);
        assert_eq!(m.row(0), &[3.0, 1.0]);
        let m = build_feature_matrix(&recs, &["contacts", "mean_views"], 64).unwrap();
        assert_eq!(m.row(0), &[1.0, 3.0]);
    }

    #[test]
    fn empty_or_unknown_feature_sets_fail() {
        let recs = [record("a", 3.0, 1.0, &[])];
        let empty: [&str; 0] = [];
        assert!(matches!(
            build_feature_matrix(&recs, &empty, 64),
            Err(Error::EmptyFeatureSet)
        ));
        assert!(matches!(
            build_feature_matrix(&recs, &["likes"], 64),
            Err(Error::UnknownFeature(_))
        ));
        assert!(matches!(
            build_feature_matrix(&recs, &["tag_64"], 64),
            Err(Error::UnknownFeature(_))
        ));
    }

    #[test]
    fn missing_value_is_rejected() {
        let mut r = record("a", 3.0, 1.0, &[]);
        r.features.set(SocialFeature::Contacts, None);
        assert!(matches!(
            build_feature_matrix(&[r], &["contacts"], 64),
            Err(Error::NotImputed { .. })
        ));
    }

    #[test]
    fn full_social_set_matches_embedding_columns() {
        let recs = [record("a", 3.0, 1.0, &["x", "y"])];
        let names = social_feature_set(16);
        let m = build_feature_matrix(&recs, &names, 16).unwrap();
        let tags = embed_tags(&recs, 16).unwrap();
        assert_eq!(&m.columns()[9..], tags.columns());
        assert_eq!(&m.row(0)[9..], tags.row(0));
    }
}
