//! Forecasting of 30-day image engagement sequences.
//!
//! An engagement sequence (cumulative daily views) is split into a *scale*
//! (its day-30 maximum) and a *shape* (the sequence divided by that scale).
//! Shapes are clustered into a small library of prototypes and predicted
//! from social features with a random forest; scales are predicted with an
//! epsilon-insensitive support vector regressor. Multiplying the two back
//! together yields the forecast sequence.
//!
//! Module map:
//!
//! * [`dataset`]: records, CSV ingestion, repair/imputation, tag hashing,
//!   synthetic data.
//! * [`dynamics`]: popularity score, scale/shape decomposition, recomposition.
//! * [`clustering`]: k-means (elbow/silhouette diagnostics) and mean shift.
//! * [`classifier`]: random forest shape classifier with grid search.
//! * [`regressor`]: standardization and SMO-trained SVR for the scale.
//! * [`evaluation`]: metrics, repeated splits and the end-to-end protocol.
//! * [`config`]: pipeline configuration in flat dotted key/value text.
//! * [`artifacts`]: CSV tables, model envelopes and provenance headers.

pub mod artifacts;
pub mod classifier;
pub mod clustering;
pub mod config;
pub mod dataset;
pub mod dynamics;
mod error;
pub mod evaluation;
pub mod regressor;

pub use error::{Error, Result};

/// Number of days in an engagement sequence.
pub const HORIZON: usize = 30;
