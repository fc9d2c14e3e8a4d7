//! Noisy-speech augmentation: plan where to mix interference into a primary
//! utterance, then mix it at a segment-local SNR.
//!
//! The interference covers a random 0.4–0.6 fraction of the primary, split
//! into 1–3 non-overlapping segments at random positions. A plan is either all
//! noise or all speech; each speech segment independently picks another
//! speaker from the same batch.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::signal::{Utterance, Waveform};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AugmentError {
    #[error("no batch member has a speaker different from the primary")]
    NoEligibleSpeaker,
    #[error("noise pool is empty")]
    EmptyNoisePool,
    #[error("no noise clip is at least {needed} samples long")]
    NoiseTooShort { needed: usize },
    #[error("cannot resolve augmentation source {0:?}")]
    UnresolvableSource(SegmentSource),
    #[error("segment reads {offset}..{end} of a {len}-sample source")]
    OffsetOutOfRange {
        offset: usize,
        end: usize,
        len: usize,
    },
    #[error("segment {start}..{end} exceeds the {len}-sample primary")]
    SegmentOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_aug: f64,
    pub p_noise: f64,
    pub p_speech: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub max_segments: usize,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_aug: 0.2,
            p_noise: 0.1,
            p_speech: 0.9,
            ratio_min: 0.4,
            ratio_max: 0.6,
            max_segments: 3,
            snr_db_min: -5.0,
            snr_db_max: 20.0,
        }
    }
}

impl AugmentConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, p) in [
            ("p_aug", self.p_aug),
            ("p_noise", self.p_noise),
            ("p_speech", self.p_speech),
        ] {
            if !(0.0..=1.0).contains(&p) {
                v.push(alloc::format!("augment.{name} must lie in [0, 1], got {p}"));
            }
        }
        if libm::fabs(self.p_noise + self.p_speech - 1.0) > 1e-9 {
            v.push(alloc::format!(
                "augment.p_noise + augment.p_speech must equal 1, got {}",
                self.p_noise + self.p_speech
            ));
        }
        if !(0.0 <= self.ratio_min && self.ratio_min <= self.ratio_max && self.ratio_max <= 1.0) {
            v.push(alloc::format!(
                "augment ratios must satisfy 0 <= ratio_min <= ratio_max <= 1, got [{}, {}]",
                self.ratio_min,
                self.ratio_max
            ));
        }
        if self.max_segments == 0 {
            v.push("augment.max_segments must be >= 1".into());
        }
        if !(self.snr_db_min <= self.snr_db_max)
            || !self.snr_db_min.is_finite()
            || !self.snr_db_max.is_finite()
        {
            v.push(alloc::format!(
                "augment SNR range must be finite with snr_db_min <= snr_db_max, got [{}, {}]",
                self.snr_db_min,
                self.snr_db_max
            ));
        }
        v
    }
}

/// Where a segment's interference comes from; both variants carry a corpus id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "snake_case")]
pub enum SegmentSource {
    Noise(String),
    Speaker(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub primary_start: usize,
    pub length: usize,
    pub source: SegmentSource,
    pub source_offset: usize,
    pub snr_db: f64,
}

impl Segment {
    pub fn primary_end(&self) -> usize {
        self.primary_start + self.length
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub segments: Vec<Segment>,
}

impl AugmentationPlan {
    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_length(&self) -> usize {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn is_noise(&self) -> bool {
        self.segments
            .iter()
            .any(|s| matches!(s.source, SegmentSource::Noise(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Noise,
    Speech,
}

fn eligible<'a>(
    primary: &'a Utterance,
    batch: &'a [&'a Utterance],
) -> impl Iterator<Item = &'a Utterance> + 'a {
    batch
        .iter()
        .copied()
        .filter(move |u| u.id != primary.id && u.wave.speaker_id != primary.wave.speaker_id)
}

/// Draws a plan for `primary`.
///
/// Draw order per call: augment?, noise-or-speech, segment count, length
/// ratio, cut points, gap layout, then (source, offset, SNR) per segment.
pub fn plan_augmentation(
    primary: &Utterance,
    batch: &[&Utterance],
    noise_pool: &[Utterance],
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<AugmentationPlan, AugmentError> {
    if rng.uniform() >= cfg.p_aug {
        return Ok(AugmentationPlan::default());
    }
    let kind = if rng.uniform() < cfg.p_noise {
        Kind::Noise
    } else {
        Kind::Speech
    };
    plan_kind(kind, primary, batch, noise_pool, cfg, rng)
}

/// [`plan_augmentation`] that redraws the segments as noise when a speech
/// plan finds no other speaker, so single-speaker batches still augment at `p_aug`.
pub fn plan_with_noise_fallback(
    primary: &Utterance,
    batch: &[&Utterance],
    noise_pool: &[Utterance],
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<AugmentationPlan, AugmentError> {
    match plan_augmentation(primary, batch, noise_pool, cfg, rng) {
        Err(AugmentError::NoEligibleSpeaker) => {
            plan_kind(Kind::Noise, primary, batch, noise_pool, cfg, rng)
        }
        other => other,
    }
}

fn plan_kind(
    kind: Kind,
    primary: &Utterance,
    batch: &[&Utterance],
    noise_pool: &[Utterance],
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<AugmentationPlan, AugmentError> {
    match kind {
        Kind::Speech if eligible(primary, batch).next().is_none() => {
            return Err(AugmentError::NoEligibleSpeaker)
        }
        Kind::Noise if noise_pool.is_empty() => return Err(AugmentError::EmptyNoisePool),
        _ => {}
    }
    let n_primary = primary.wave.len();
    let mut count = 1 + rng.below_usize(cfg.max_segments.max(1));

    let ratio = rng.uniform_range(cfg.ratio_min, cfg.ratio_max);
    let lo = libm::ceil(cfg.ratio_min * n_primary as f64) as usize;
    let hi = (libm::floor(cfg.ratio_max * n_primary as f64) as usize)
        .max(lo)
        .min(n_primary);
    let total = (libm::round(ratio * n_primary as f64) as usize).clamp(lo.min(hi), hi);
    count = count.min(total);
    if count == 0 {
        return Ok(AugmentationPlan::default());
    }

    // Random composition of `total` into `count` positive parts.
    let mut bounds = Vec::with_capacity(count + 1);
    bounds.push(0);
    bounds.extend(
        rng.sample_distinct(total - 1, count - 1)
            .into_iter()
            .map(|c| c + 1),
    );
    bounds.push(total);
    let lengths: Vec<usize> = bounds.windows(2).map(|w| w[1] - w[0]).collect();

    // Random layout of the free samples into count + 1 gaps (stars and bars).
    let free = n_primary - total;
    let gap_marks = rng.sample_distinct(free + count, count);
    let mut segments = Vec::with_capacity(count);
    let mut used = 0;
    for (i, (&len, &mark)) in lengths.iter().zip(&gap_marks).enumerate() {
        let start = mark - i + used;
        used += len;
        let (source, source_len) = match kind {
            Kind::Speech => {
                let pool: Vec<&Utterance> = eligible(primary, batch)
                    .filter(|u| u.wave.len() >= len)
                    .collect();
                if pool.is_empty() {
                    return Err(AugmentError::NoEligibleSpeaker);
                }
                let pick = pool[rng.below_usize(pool.len())];
                (SegmentSource::Speaker(pick.id.clone()), pick.wave.len())
            }
            Kind::Noise => {
                let pool: Vec<&Utterance> =
                    noise_pool.iter().filter(|u| u.wave.len() >= len).collect();
                if pool.is_empty() {
                    return Err(AugmentError::NoiseTooShort { needed: len });
                }
                let pick = pool[rng.below_usize(pool.len())];
                (SegmentSource::Noise(pick.id.clone()), pick.wave.len())
            }
        };
        let source_offset = rng.below_usize(source_len - len + 1);
        let snr_db = rng.uniform_range(cfg.snr_db_min, cfg.snr_db_max);
        segments.push(Segment {
            primary_start: start,
            length: len,
            source,
            source_offset,
            snr_db,
        });
    }
    Ok(AugmentationPlan { segments })
}

fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    libm::sqrt(x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64)
}

/// Gain that brings a source of RMS `source_rms` to `snr_db` below `primary_rms`.
/// A silent source gets gain 0.
pub fn snr_gain(primary_rms: f64, source_rms: f64, snr_db: f64) -> f64 {
    if source_rms <= 0.0 {
        return 0.0;
    }
    primary_rms / (source_rms * libm::pow(10.0, snr_db / 20.0))
}

/// Adds each planned segment to the primary and clamps to `[-1, 1]`.
/// Samples outside every segment are copied unchanged.
pub fn mix<'a, F>(
    primary: &Waveform,
    plan: &AugmentationPlan,
    resolve: F,
) -> Result<Waveform, AugmentError>
where
    F: Fn(&SegmentSource) -> Option<&'a Waveform>,
{
    let mut out = primary.clone();
    for seg in &plan.segments {
        if seg.primary_end() > primary.len() {
            return Err(AugmentError::SegmentOutOfRange {
                start: seg.primary_start,
                end: seg.primary_end(),
                len: primary.len(),
            });
        }
        let source = resolve(&seg.source)
            .ok_or_else(|| AugmentError::UnresolvableSource(seg.source.clone()))?;
        let end = seg.source_offset + seg.length;
        if end > source.len() {
            return Err(AugmentError::OffsetOutOfRange {
                offset: seg.source_offset,
                end,
                len: source.len(),
            });
        }
        let src = &source.samples[seg.source_offset..end];
        let dst = &primary.samples[seg.primary_start..seg.primary_end()];
        let g = snr_gain(rms(dst), rms(src), seg.snr_db);
        for ((o, &p), &s) in out.samples[seg.primary_start..seg.primary_end()]
            .iter_mut()
            .zip(dst)
            .zip(src)
        {
            *o = (p as f64 + g * s as f64).clamp(-1.0, 1.0) as f32;
        }
    }
    Ok(out)
}

/// Resolver over a batch and a noise pool, for use with [`mix`].
pub fn batch_resolver<'a>(
    batch: &'a [&'a Utterance],
    noise_pool: &'a [Utterance],
) -> impl Fn(&SegmentSource) -> Option<&'a Waveform> + 'a {
    move |src| match src {
        SegmentSource::Speaker(id) => batch.iter().find(|u| &u.id == id).map(|u| &u.wave),
        SegmentSource::Noise(id) => noise_pool.iter().find(|u| &u.id == id).map(|u| &u.wave),
    }
}
