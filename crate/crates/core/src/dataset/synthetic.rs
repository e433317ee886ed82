//! Synthetic datasets with known prototypes and scales.
//!
//! Every record draws one of `n_prototypes` saturating growth curves and a
//! scale that is log-linear in `mean_views` and `contacts`. A subset of the
//! social features (tags, group picture/photo averages, photo-level group
//! count) depends on the prototype, so the shape is predictable from
//! features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{EngagementSequence, ImageRecord, SocialFeature, SocialFeatures};
use crate::{Error, Result, HORIZON};

const COMMON_TAGS: [&str; 8] = [
    "photo", "nikon", "canon", "travel", "nature", "flickr", "art", "blackandwhite",
];
const THEME_TAGS_PER_PROTOTYPE: usize = 4;
const THEME_TAG_PROBABILITY: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub n_prototypes: usize,
    /// Per-day noise, as a fraction of the scale.
    pub noise: f64,
    pub seed: u64,
    /// Exponent of `1 + mean_views` in the scale model.
    pub alpha: f64,
    /// Exponent of `1 + contacts` in the scale model.
    pub beta: f64,
    /// Standard deviation of the log-scale residual; `None` ties it to
    /// `5 * noise`.
    pub scale_noise: Option<f64>,
    /// Probability that any feature cell or day 1..29 is left empty.
    pub missing_rate: f64,
}

impl SyntheticConfig {
    pub fn new(n: usize, n_prototypes: usize, noise: f64, seed: u64) -> Self {
        Self {
            n,
            n_prototypes,
            noise,
            seed,
            alpha: 1.0,
            beta: 0.25,
            scale_noise: None,
            missing_rate: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_prototypes < 2 {
            return Err(Error::invalid("n_prototypes", "must be at least 2"));
        }
        if self.n < self.n_prototypes {
            return Err(Error::invalid(
                "n",
                format!("{} records cannot cover {} prototypes", self.n, self.n_prototypes),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise", "must be finite and nonnegative"));
        }
        if let Some(s) = self.scale_noise {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid("scale_noise", "must be finite and nonnegative"));
            }
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::invalid("missing_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Generates the dataset; a pure function of the configuration.
    pub fn generate(&self) -> Result<Vec<ImageRecord>> {
        self.validate()?;
        let prototypes = prototype_curves(self.n_prototypes);
        let scale_noise = self.scale_noise.unwrap_or(5.0 * self.noise);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut records = Vec::with_capacity(self.n);

        for i in 0..self.n {
            let proto = if i < self.n_prototypes {
                i
            } else {
                rng.random_range(0..self.n_prototypes)
            };
            let u = proto as f64 / (self.n_prototypes - 1) as f64;

            let mut features = SocialFeatures::default();
            let mut draw = |mean: f64, sd: f64| -> f64 {
                let z: f64 = rng.sample(StandardNormal);
                (mean + sd * z).max(0.0).exp_m1()
            };
            let mean_views = round2(draw(4.5, 1.0));
            let contacts = draw(4.0, 1.0).round();
            features.set(SocialFeature::MeanViews, Some(mean_views));
            features.set(SocialFeature::Contacts, Some(contacts));
            features.set(SocialFeature::PhotoCount, Some(draw(6.0, 1.2).round()));
            features.set(
                SocialFeature::GroupsCount,
                Some(draw(1.0 + 0.4 * mean_views.ln_1p(), 0.6).round()),
            );
            features.set(SocialFeature::GroupsAvgMembers, Some(round2(draw(7.0, 0.8))));
            features.set(
                SocialFeature::GroupsAvgPictures,
                Some(round2(draw(6.0 + 3.2 * u, 0.5))),
            );
            features.set(
                SocialFeature::NumGroups,
                Some(draw(1.5 + 0.5 * (proto % 3) as f64, 0.5).round()),
            );
            features.set(SocialFeature::AvgGroupMembers, Some(round2(draw(6.5, 0.8))));
            features.set(
                SocialFeature::AvgGroupPhotos,
                Some(round2(draw(7.0 - 2.0 * u, 0.5))),
            );

            let n_tags = rng.random_range(2..=6);
            let tags = (0..n_tags)
                .map(|_| {
                    if rng.random::<f64>() < THEME_TAG_PROBABILITY {
                        let k = rng.random_range(0..THEME_TAGS_PER_PROTOTYPE);
                        format!("theme{proto}_{k}")
                    } else {
                        COMMON_TAGS[rng.random_range(0..COMMON_TAGS.len())].to_string()
                    }
                })
                .collect();

            let residual = if scale_noise > 0.0 {
                scale_noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let log_scale =
                self.alpha * mean_views.ln_1p() + self.beta * contacts.ln_1p() + residual;
            let scale = log_scale.exp().round() as u64;

            let curve = &prototypes[proto];
            let s = scale as f64;
            let mut values = [0u64; HORIZON];
            let mut running = 0u64;
            for (t, slot) in values.iter_mut().enumerate() {
                let v = if t + 1 == HORIZON {
                    scale
                } else {
                    let jitter = if self.noise > 0.0 {
                        self.noise * s * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    (s * curve[t] + jitter).clamp(0.0, s).round() as u64
                };
                running = running.max(v);
                *slot = running;
            }

            let mut days = values.map(Some);
            if self.missing_rate > 0.0 {
                for day in days.iter_mut().take(HORIZON - 1) {
                    if rng.random::<f64>() < self.missing_rate {
                        *day = None;
                    }
                }
                for f in SocialFeature::ALL {
                    if rng.random::<f64>() < self.missing_rate {
                        features.set(f, None);
                    }
                }
            }

            records.push(ImageRecord {
                image_id: format!("img{i:06}"),
                user_id: format!("user{i:06}"),
                features,
                tags,
                title: format!("photo {i}"),
                sequence: EngagementSequence::from_options(days),
                true_cluster: Some(proto),
                true_scale: Some(scale),
            });
        }
        Ok(records)
    }
}

/// Convenience wrapper over [`SyntheticConfig`] with default scale model.
pub fn generate_synthetic(
    n: usize,
    n_prototypes: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<ImageRecord>> {
    SyntheticConfig::new(n, n_prototypes, noise, seed).generate()
}

/// Saturating growth curves ordered from late onset to instant saturation.
///
/// Curve `j` starts growing after a delay that shrinks with `j` and grows at
/// a rate that increases with `j`; each is normalized to end at exactly 1.
pub fn prototype_curves(n_prototypes: usize) -> Vec<[f64; HORIZON]> {
    (0..n_prototypes)
        .map(|j| {
            let u = if n_prototypes > 1 {
                j as f64 / (n_prototypes - 1) as f64
            } else {
                0.5
            };
            let delay = (1.0 - u) * 18.0;
            let rate = 0.12 + 0.9 * u;
            let raw = |t: f64| -(-rate * (t - delay).max(0.0)).exp_m1();
            let end = raw(HORIZON as f64);
            let mut curve = [0.0; HORIZON];
            for (t, c) in curve.iter_mut().enumerate() {
                *c = raw((t + 1) as f64) / end;
            }
            curve
        })
        .collect()
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}
