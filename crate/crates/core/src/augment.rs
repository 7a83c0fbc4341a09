//! Training-time augmentation.
//!
//! Waveform level: audio channel swapping, the 16-element group of exact
//! 90-degree azimuth rotations and axis reflections realizable as FOA channel
//! permutations and sign flips, with matching label transforms. Spectrogram
//! level: SpecAugment-style masks, mixup, and frequency shifting, whose
//! magnitudes anneal with the learning rate. The channel-swap probability
//! stays constant through training.

use ndarray::Array4;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::TargetTensor;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::types::{wrap_azimuth_deg, Event, EventList, FoaClip};

/// One channel-swap transform: reflect azimuth and/or elevation, then rotate
/// azimuth by `k * 90` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcsTransform {
    pub k: u8,
    pub reflect_az: bool,
    pub reflect_el: bool,
}

impl AcsTransform {
    pub const IDENTITY: Self = Self { k: 0, reflect_az: false, reflect_el: false };

    /// All 16 distinct transforms, identity first.
    pub fn all() -> Vec<Self> {
        let mut out = Vec::with_capacity(16);
        for k in 0..4u8 {
            for reflect_az in [false, true] {
                for reflect_el in [false, true] {
                    out.push(Self { k, reflect_az, reflect_el });
                }
            }
        }
        out.sort_by_key(|t| (t.k != 0, t.reflect_az, t.reflect_el, t.k));
        out
    }

    /// (cos, sin) of `k * 90` degrees, exact.
    fn rotation(self) -> (f64, f64) {
        match self.k % 4 {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    }

    /// Label map: azimuth -> s_a * azimuth + k * 90 (wrapped), elevation ->
    /// s_e * elevation; distance unchanged.
    pub fn map_angles(self, azimuth_deg: f64, elevation_deg: f64) -> (f64, f64) {
        let s_a = if self.reflect_az { -1.0 } else { 1.0 };
        let s_e = if self.reflect_el { -1.0 } else { 1.0 };
        (wrap_azimuth_deg(s_a * azimuth_deg + self.k as f64 * 90.0), s_e * elevation_deg)
    }

    /// Maps a Cartesian direction (x, y, z) under reflect-then-rotate.
    pub fn map_vector(self, v: [f64; 3]) -> [f64; 3] {
        let (c, s) = self.rotation();
        let y = if self.reflect_az { -v[1] } else { v[1] };
        let z = if self.reflect_el { -v[2] } else { v[2] };
        [c * v[0] - s * y, s * v[0] + c * y, z]
    }
}

/// Applies a channel-swap transform to a clip and its labels.
///
/// Channels are ACN [W, Y, Z, X]: W is untouched, reflections negate Y or Z,
/// and the rotation mixes (X, Y) with the exact 90-degree cosine/sine pairs.
pub fn acs_apply(clip: &FoaClip, events: &EventList, t: AcsTransform) -> (FoaClip, EventList) {
    let (c, s) = t.rotation();
    let mut samples = clip.samples.clone();
    for i in 0..clip.n_samples() {
        let w = clip.samples[[0, i]];
        let mut y = clip.samples[[1, i]];
        let mut z = clip.samples[[2, i]];
        let x = clip.samples[[3, i]];
        if t.reflect_az {
            y = -y;
        }
        if t.reflect_el {
            z = -z;
        }
        samples[[0, i]] = w;
        samples[[1, i]] = s * x + c * y;
        samples[[2, i]] = z;
        samples[[3, i]] = c * x - s * y;
    }
    (
        FoaClip { samples, sample_rate: clip.sample_rate, source_tag: clip.source_tag },
        acs_apply_events(events, t),
    )
}

/// Label half of [`acs_apply`]: maps every event's angles, leaving
/// distances and everything else untouched.
pub fn acs_apply_events(events: &EventList, t: AcsTransform) -> EventList {
    let mapped = events
        .events
        .iter()
        .map(|e| {
            let (az, el) = t.map_angles(e.azimuth_deg, e.elevation_deg);
            Event { azimuth_deg: az, elevation_deg: el, ..*e }
        })
        .collect();
    EventList::new(mapped, events.num_label_frames)
}

/// Applies a channel-swap transform directly in feature space, the exact
/// image of [`acs_apply`] under feature extraction: log-power channels of X
/// and Y swap for odd rotations (sign flips do not change power), and the
/// spatial (y, z, x) channels transform like the direction vector.
pub fn acs_apply_features(map: &FeatureMap, t: AcsTransform) -> FeatureMap {
    let (c, s) = t.rotation();
    let (_, frames, bins) = map.tensor.dim();
    let mut out = map.tensor.clone();
    let odd_rotation = t.k % 2 == 1;
    for ti in 0..frames {
        for f in 0..bins {
            if odd_rotation {
                out[[1, ti, f]] = map.tensor[[3, ti, f]];
                out[[3, ti, f]] = map.tensor[[1, ti, f]];
            }
            let mut y = map.tensor[[4, ti, f]] as f64;
            let mut z = map.tensor[[5, ti, f]] as f64;
            let x = map.tensor[[6, ti, f]] as f64;
            if t.reflect_az {
                y = -y;
            }
            if t.reflect_el {
                z = -z;
            }
            out[[4, ti, f]] = (s * x + c * y) as f32;
            out[[5, ti, f]] = z as f32;
            out[[6, ti, f]] = (c * x - s * y) as f32;
        }
    }
    FeatureMap { tensor: out }
}

/// Applies a channel-swap transform to an encoded target tensor: the DOA
/// vector of every entry transforms, distances and activity stay.
pub fn acs_apply_targets(targets: &TargetTensor, t: AcsTransform) -> TargetTensor {
    let (frames, tracks, classes, _) = targets.tensor.dim();
    let mut out = Array4::zeros((frames, tracks, classes, 4));
    for fr in 0..frames {
        for tr in 0..tracks {
            for cl in 0..classes {
                let v = t.map_vector([
                    targets.tensor[[fr, tr, cl, 0]],
                    targets.tensor[[fr, tr, cl, 1]],
                    targets.tensor[[fr, tr, cl, 2]],
                ]);
                out[[fr, tr, cl, 0]] = v[0];
                out[[fr, tr, cl, 1]] = v[1];
                out[[fr, tr, cl, 2]] = v[2];
                out[[fr, tr, cl, 3]] = targets.tensor[[fr, tr, cl, 3]];
            }
        }
    }
    TargetTensor { tensor: out }
}

/// Spectrogram-level augmentation policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub specaug_time_masks: usize,
    pub specaug_time_width: usize,
    pub specaug_freq_masks: usize,
    pub specaug_freq_width: usize,
    pub mixup_alpha: f64,
    pub freq_shift_max: usize,
    pub acs_probability: f64,
    pub magnitude_floor: f64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            specaug_time_masks: 2,
            specaug_time_width: 32,
            specaug_freq_masks: 2,
            specaug_freq_width: 16,
            mixup_alpha: 0.2,
            freq_shift_max: 10,
            acs_probability: 0.5,
            magnitude_floor: 0.1,
        }
    }
}

impl AugPolicy {
    /// Policy with every augmentation disabled.
    pub fn disabled() -> Self {
        Self {
            specaug_time_masks: 0,
            specaug_time_width: 0,
            specaug_freq_masks: 0,
            specaug_freq_width: 0,
            mixup_alpha: 0.0,
            freq_shift_max: 0,
            acs_probability: 0.0,
            magnitude_floor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.acs_probability) {
            return Err(Error::Config("acs_probability outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.magnitude_floor) {
            return Err(Error::Config("magnitude_floor outside [0, 1]".into()));
        }
        if self.mixup_alpha < 0.0 {
            return Err(Error::Config("mixup_alpha must be >= 0".into()));
        }
        Ok(())
    }
}

/// Annealing factor for spectrogram-level augmentations:
/// `clamp(current_lr / peak_lr, floor, 1)`.
pub fn aug_magnitude(current_lr: f64, peak_lr: f64, floor: f64) -> f64 {
    assert!(peak_lr > 0.0, "peak_lr must be positive");
    (current_lr / peak_lr).clamp(floor, 1.0)
}

/// Zeroes up to `ceil(magnitude * num_masks)` time and frequency stripes,
/// identically across all channels. Mask widths scale with `magnitude`.
pub fn spec_augment(
    map: &FeatureMap,
    policy: &AugPolicy,
    magnitude: f64,
    rng: &mut ChaCha8Rng,
) -> FeatureMap {
    let mut out = map.clone();
    if magnitude <= 0.0 {
        return out;
    }
    let (_, frames, bins) = out.tensor.dim();
    let n_time = (magnitude * policy.specaug_time_masks as f64).ceil() as usize;
    let n_freq = (magnitude * policy.specaug_freq_masks as f64).ceil() as usize;
    let max_t = ((policy.specaug_time_width as f64 * magnitude).round() as usize).min(frames);
    let max_f = ((policy.specaug_freq_width as f64 * magnitude).round() as usize).min(bins);
    for _ in 0..n_time.min(policy.specaug_time_masks) {
        if max_t == 0 {
            break;
        }
        let width = rng.random_range(0..=max_t);
        if width == 0 {
            continue;
        }
        let start = rng.random_range(0..=frames - width);
        out.tensor.slice_mut(ndarray::s![.., start..start + width, ..]).fill(0.0);
    }
    for _ in 0..n_freq.min(policy.specaug_freq_masks) {
        if max_f == 0 {
            break;
        }
        let width = rng.random_range(0..=max_f);
        if width == 0 {
            continue;
        }
        let start = rng.random_range(0..=bins - width);
        out.tensor.slice_mut(ndarray::s![.., .., start..start + width]).fill(0.0);
    }
    out
}

/// Zeroes a half-open frequency mask `[start, start + width)` on all
/// channels. Exposed for tests that need exact mask placement.
pub fn apply_freq_mask(map: &mut FeatureMap, start: usize, width: usize) {
    let bins = map.tensor.dim().2;
    let end = (start + width).min(bins);
    map.tensor.slice_mut(ndarray::s![.., .., start..end]).fill(0.0);
}

/// Linear blend of two (features, targets) pairs with the given lambda.
pub fn mixup_with_lambda(
    a: (&FeatureMap, &TargetTensor),
    b: (&FeatureMap, &TargetTensor),
    lambda: f64,
) -> (FeatureMap, TargetTensor) {
    let l32 = lambda as f32;
    let features =
        FeatureMap { tensor: &a.0.tensor * l32 + &b.0.tensor * (1.0 - l32) };
    let targets = TargetTensor { tensor: &a.1.tensor * lambda + &b.1.tensor * (1.0 - lambda) };
    (features, targets)
}

/// Mixup with `lambda ~ Beta(alpha, alpha)`.
pub fn mixup(
    a: (&FeatureMap, &TargetTensor),
    b: (&FeatureMap, &TargetTensor),
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> (FeatureMap, TargetTensor) {
    assert!(alpha > 0.0, "mixup alpha must be positive");
    let beta = rand_distr::Beta::new(alpha, alpha).expect("valid beta parameters");
    let lambda: f64 = beta.sample(rng);
    mixup_with_lambda(a, b, lambda)
}

/// Shifts all channels along the frequency axis; vacated bins become zero.
pub fn freq_shift(map: &FeatureMap, shift: isize, shift_max: usize) -> Result<FeatureMap> {
    if shift.unsigned_abs() > shift_max {
        return Err(Error::Precondition(format!(
            "shift {shift} exceeds maximum {shift_max}"
        )));
    }
    let (ch, frames, bins) = map.tensor.dim();
    let mut out = FeatureMap { tensor: ndarray::Array3::zeros((ch, frames, bins)) };
    for c in 0..ch {
        for t in 0..frames {
            for f in 0..bins {
                let src = f as isize - shift;
                if src >= 0 && (src as usize) < bins {
                    out.tensor[[c, t, f]] = map.tensor[[c, t, src as usize]];
                }
            }
        }
    }
    Ok(out)
}
