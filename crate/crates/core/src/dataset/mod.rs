//! Data model for image records and their engagement sequences.

mod features;
mod io;
mod repair;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, HORIZON};

pub use features::{
    build_feature_matrix, embed_tags, social_feature_set, tag_bucket, Feature, FeatureMatrix,
    DEFAULT_TAG_DIMS,
};
pub use io::{load_dataset, read_dataset, write_dataset, Schema, DAY_COLUMNS};
pub use repair::{impute_features, repair_sequence, FeatureMedians};
pub use synthetic::{generate_synthetic, prototype_curves, SyntheticConfig};

/// Cumulative daily view counts over the first [`HORIZON`] days.
///
/// Days whose raw value was absent are stored as `None`. A sequence is
/// *repaired* when every day is present and values never decrease.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EngagementSequence {
    days: [Option<u64>; HORIZON],
}

impl EngagementSequence {
    pub fn from_options(days: [Option<u64>; HORIZON]) -> Self {
        Self { days }
    }

    pub fn complete(values: [u64; HORIZON]) -> Self {
        Self {
            days: values.map(Some),
        }
    }

    pub fn from_slice(values: &[u64]) -> Result<Self> {
        let values: [u64; HORIZON] = values.try_into().map_err(|_| {
            Error::invalid(
                "sequence",
                format!("expected {HORIZON} days, got {}", values.len()),
            )
        })?;
        Ok(Self::complete(values))
    }

    pub fn days(&self) -> &[Option<u64>; HORIZON] {
        &self.days
    }

    /// Values of a complete sequence, `None` if any day is missing.
    pub fn values(&self) -> Option<[u64; HORIZON]> {
        let mut out = [0u64; HORIZON];
        for (slot, day) in out.iter_mut().zip(self.days.iter()) {
            *slot = (*day)?;
        }
        Some(out)
    }

    /// One-based indices of missing days.
    pub fn missing_days(&self) -> Vec<usize> {
        self.days
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_none())
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.days.iter().all(Option::is_some)
    }

    pub fn is_repaired(&self) -> bool {
        match self.values() {
            Some(v) => v.windows(2).all(|w| w[0] <= w[1]),
            None => false,
        }
    }

    pub fn repaired(&self) -> Result<Self> {
        repair_sequence(self)
    }
}

/// Numeric social features of the photo and of the uploading user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SocialFeature {
    Contacts,
    PhotoCount,
    MeanViews,
    GroupsCount,
    GroupsAvgMembers,
    GroupsAvgPictures,
    NumGroups,
    AvgGroupMembers,
    AvgGroupPhotos,
}

impl SocialFeature {
    pub const ALL: [SocialFeature; 9] = [
        SocialFeature::Contacts,
        SocialFeature::PhotoCount,
        SocialFeature::MeanViews,
        SocialFeature::GroupsCount,
        SocialFeature::GroupsAvgMembers,
        SocialFeature::GroupsAvgPictures,
        SocialFeature::NumGroups,
        SocialFeature::AvgGroupMembers,
        SocialFeature::AvgGroupPhotos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SocialFeature::Contacts => "contacts",
            SocialFeature::PhotoCount => "photo_count",
            SocialFeature::MeanViews => "mean_views",
            SocialFeature::GroupsCount => "groups_count",
            SocialFeature::GroupsAvgMembers => "groups_avg_members",
            SocialFeature::GroupsAvgPictures => "groups_avg_pictures",
            SocialFeature::NumGroups => "num_groups",
            SocialFeature::AvgGroupMembers => "avg_group_members",
            SocialFeature::AvgGroupPhotos => "avg_group_photos",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SocialFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SocialFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SocialFeature::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownFeature(s.to_string()))
    }
}

/// Values of every [`SocialFeature`]; `None` marks a missing cell.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SocialFeatures([Option<f64>; 9]);

impl SocialFeatures {
    pub fn get(&self, feature: SocialFeature) -> Option<f64> {
        self.0[feature.index()]
    }

    pub fn set(&mut self, feature: SocialFeature, value: Option<f64>) {
        self.0[feature.index()] = value;
    }

    pub fn is_complete(&self) -> bool {
        self.0.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub user_id: String,
    pub features: SocialFeatures,
    pub tags: Vec<String>,
    pub title: String,
    pub sequence: EngagementSequence,
    /// Generating prototype, only known for synthetic data.
    pub true_cluster: Option<usize>,
    /// Generating scale, only known for synthetic data.
    pub true_scale: Option<u64>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, sequence: EngagementSequence) -> Self {
        Self {
            image_id: image_id.into(),
            user_id: String::new(),
            features: SocialFeatures::default(),
            tags: Vec::new(),
            title: String::new(),
            sequence,
            true_cluster: None,
            true_scale: None,
        }
    }

    pub fn feature(&self, feature: SocialFeature) -> Option<f64> {
        self.features.get(feature)
    }
}
