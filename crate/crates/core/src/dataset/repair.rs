use serde::{Deserialize, Serialize};

use super::{EngagementSequence, ImageRecord, SocialFeature};
use crate::{Error, Result, HORIZON};

/// Fills missing days and enforces a nondecreasing cumulative series.
///
/// Interior gaps are linearly interpolated between the nearest present
/// neighbours and rounded to the nearest count; leading gaps take the first
/// present value, trailing gaps the last. A left-to-right running maximum
/// then removes any decrease.
pub fn repair_sequence(seq: &EngagementSequence) -> Result<EngagementSequence> {
    let days = seq.days();
    let present: Vec<(usize, u64)> = days
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.map(|v| (i, v)))
        .collect();
    let (&(first_idx, first_val), &(last_idx, last_val)) =
        match (present.first(), present.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::invalid("sequence", "all days are missing")),
        };

    let mut out = [0u64; HORIZON];
    out[..first_idx].fill(first_val);
    out[last_idx..].fill(last_val);
    for pair in present.windows(2) {
        let (i0, v0) = pair[0];
        let (i1, v1) = pair[1];
        out[i0] = v0;
        let span = (i1 - i0) as f64;
        for (step, slot) in out[i0 + 1..i1].iter_mut().enumerate() {
            let t = (step + 1) as f64 / span;
            *slot = (v0 as f64 + t * (v1 as f64 - v0 as f64)).round() as u64;
        }
    }

    let mut running = 0u64;
    for v in out.iter_mut() {
        running = running.max(*v);
        *v = running;
    }
    Ok(EngagementSequence::complete(out))
}

/// Per-feature medians over the present values of a record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMedians {
    medians: Vec<(SocialFeature, f64)>,
}

impl FeatureMedians {
    pub fn fit(records: &[ImageRecord]) -> Result<Self> {
        let mut medians = Vec::with_capacity(SocialFeature::ALL.len());
        for f in SocialFeature::ALL {
            let mut present: Vec<f64> = records.iter().filter_map(|r| r.feature(f)).collect();
            if present.is_empty() {
                return Err(Error::AllMissingColumn(f.name().to_string()));
            }
            present.sort_by(f64::total_cmp);
            let n = present.len();
            let median = if n % 2 == 1 {
                present[n / 2]
            } else {
                0.5 * (present[n / 2 - 1] + present[n / 2])
            };
            medians.push((f, median));
        }
        Ok(Self { medians })
    }

    pub fn get(&self, feature: SocialFeature) -> f64 {
        self.medians
            .iter()
            .find(|(f, _)| *f == feature)
            .map(|(_, m)| *m)
            .expect("medians cover every social feature")
    }

    pub fn apply(&self, records: &[ImageRecord]) -> Vec<ImageRecord> {
        records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                for &(f, m) in &self.medians {
                    if r.feature(f).is_none() {
                        r.features.set(f, Some(m));
                    }
                }
                r
            })
            .collect()
    }
}

/// Replaces each missing numeric feature with its column median.
pub fn impute_features(records: &[ImageRecord]) -> Result<Vec<ImageRecord>> {
    Ok(FeatureMedians::fit(records)?.apply(records))
}
