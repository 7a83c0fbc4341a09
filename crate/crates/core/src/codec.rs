//! Conversion between event lists and the multi-track activity-coupled
//! Cartesian DOA + distance tensor, including distance standardization.
//!
//! Distances are standardized to zero mean / unit variance and then divided
//! by the largest absolute standardized value, so every scaled distance from
//! the fitting set lands in [-1, 1]. The inverse runs both steps backwards
//! and clamps to the fitted range.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{vector_to_angles, Event, EventList, NUM_TRACKS};

/// Statistics needed to map distances to [-1, 1] and back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceScaler {
    pub mean_m: f64,
    pub std_m: f64,
    pub max_stand: f64,
    pub d_min_m: f64,
    pub d_max_m: f64,
}

impl DistanceScaler {
    /// Fits mean, population standard deviation, and the scaling factor
    /// from a set of ground-truth distances.
    pub fn fit(distances: &[f64]) -> Result<Self> {
        if distances.len() < 2 {
            return Err(Error::ScalerFit(format!(
                "need at least 2 distances, got {}",
                distances.len()
            )));
        }
        if let Some(d) = distances.iter().find(|d| !(**d > 0.0)) {
            return Err(Error::ScalerFit(format!("non-positive distance {d}")));
        }
        let n = distances.len() as f64;
        let mean = distances.iter().sum::<f64>() / n;
        let var = distances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 0.0 {
            return Err(Error::ScalerFit("zero variance in distance distribution".into()));
        }
        let max_stand = distances
            .iter()
            .map(|d| ((d - mean) / std).abs())
            .fold(0.0_f64, f64::max);
        let d_min = distances.iter().cloned().fold(f64::INFINITY, f64::min);
        let d_max = distances.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { mean_m: mean, std_m: std, max_stand, d_min_m: d_min, d_max_m: d_max })
    }

    /// Standardize-then-scale; out-of-range inputs clamp to [-1, 1].
    pub fn scale(&self, d: f64) -> f64 {
        (((d - self.mean_m) / self.std_m) / self.max_stand).clamp(-1.0, 1.0)
    }

    /// Inverse of [`scale`](Self::scale); output clamps to the fitted range.
    pub fn unscale(&self, v: f64) -> f64 {
        (v * self.max_stand * self.std_m + self.mean_m).clamp(self.d_min_m, self.d_max_m)
    }
}

/// Per-frame, per-track, per-class targets or outputs.
///
/// `tensor` shape is `[frames, tracks, classes, 4]` with component order
/// `(x, y, z, scaled distance)`. Inactive entries are all-zero; active
/// entries carry a unit DOA vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTensor {
    pub tensor: Array4<f64>,
}

impl TargetTensor {
    pub fn zeros(frames: usize, classes: usize) -> Self {
        Self { tensor: Array4::zeros((frames, NUM_TRACKS, classes, 4)) }
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.tensor.shape()[2]
    }
}

/// Events active at one (frame, class), ordered by source index.
pub(crate) fn group_by_frame_class(
    events: &EventList,
) -> std::collections::BTreeMap<(usize, usize), Vec<Event>> {
    let mut groups: std::collections::BTreeMap<(usize, usize), Vec<Event>> =
        std::collections::BTreeMap::new();
    for e in &events.events {
        groups.entry((e.frame, e.class_idx)).or_default().push(*e);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|e| e.source_idx);
    }
    groups
}

/// Encodes ground-truth events into the target tensor. Active events fill
/// tracks `0..A` in source-index order.
pub fn encode_labels(
    events: &EventList,
    scaler: &DistanceScaler,
    num_classes: usize,
) -> Result<TargetTensor> {
    let mut out = TargetTensor::zeros(events.num_label_frames, num_classes);
    for ((frame, class), group) in group_by_frame_class(events) {
        if group.len() > NUM_TRACKS {
            return Err(Error::Validation(format!(
                "polyphony {} exceeds {} tracks at frame {} class {}",
                group.len(),
                NUM_TRACKS,
                frame,
                class
            )));
        }
        if frame >= events.num_label_frames {
            return Err(Error::Validation(format!(
                "event frame {} outside {} label frames",
                frame, events.num_label_frames
            )));
        }
        if class >= num_classes {
            return Err(Error::Validation(format!(
                "class {} outside {} classes",
                class, num_classes
            )));
        }
        for (track, e) in group.iter().enumerate() {
            let [x, y, z] = e.doa_vector();
            out.tensor[[frame, track, class, 0]] = x;
            out.tensor[[frame, track, class, 1]] = y;
            out.tensor[[frame, track, class, 2]] = z;
            out.tensor[[frame, track, class, 3]] = scaler.scale(e.distance_m);
        }
    }
    Ok(out)
}

/// Decodes a model output tensor into events. An entry is active when the
/// norm of its DOA part exceeds `act_threshold`; the track index becomes the
/// source index.
pub fn decode_output(
    t: &TargetTensor,
    scaler: &DistanceScaler,
    act_threshold: f64,
) -> EventList {
    let mut events = Vec::new();
    let (frames, tracks, classes, _) = t.tensor.dim();
    for frame in 0..frames {
        for track in 0..tracks {
            for class in 0..classes {
                let x = t.tensor[[frame, track, class, 0]];
                let y = t.tensor[[frame, track, class, 1]];
                let z = t.tensor[[frame, track, class, 2]];
                let norm = (x * x + y * y + z * z).sqrt();
                if norm > act_threshold {
                    let (az, el) = vector_to_angles([x, y, z]);
                    events.push(Event {
                        frame,
                        class_idx: class,
                        source_idx: track,
                        azimuth_deg: az,
                        elevation_deg: el,
                        distance_m: scaler.unscale(t.tensor[[frame, track, class, 3]]),
                    });
                }
            }
        }
    }
    EventList::new(events, frames)
}

/// Default angular threshold for merging duplicate track outputs.
pub const DEFAULT_UNIFY_DEG: f64 = 15.0;

/// Decodes a model output tensor, merging per-(frame, class) track outputs
/// whose directions agree within `unify_deg`.
///
/// Permutation-invariant training duplicates an event across the leftover
/// tracks, so a converged model legitimately emits near-identical copies;
/// emitting them all would turn every detection into extra false positives.
/// Merged events carry the power-direction mean of their cluster and the
/// mean distance; the cluster index becomes the source index.
pub fn decode_output_merged(
    t: &TargetTensor,
    scaler: &DistanceScaler,
    act_threshold: f64,
    unify_deg: f64,
) -> EventList {
    let raw = decode_output(t, scaler, act_threshold);
    let mut merged = Vec::new();
    for ((_, _), group) in group_by_frame_class(&raw) {
        // clusters of (sum direction vector, sum distance, count)
        let mut clusters: Vec<([f64; 3], f64, usize)> = Vec::new();
        for e in &group {
            let v = e.doa_vector();
            let mut joined = false;
            for (dir, dist_sum, count) in clusters.iter_mut() {
                let (caz, cel) = vector_to_angles(*dir);
                if crate::metrics::angular_error((caz, cel), (e.azimuth_deg, e.elevation_deg))
                    <= unify_deg
                {
                    dir[0] += v[0];
                    dir[1] += v[1];
                    dir[2] += v[2];
                    *dist_sum += e.distance_m;
                    *count += 1;
                    joined = true;
                    break;
                }
            }
            if !joined {
                clusters.push((v, e.distance_m, 1));
            }
        }
        for (cluster_idx, (dir, dist_sum, count)) in clusters.into_iter().enumerate() {
            let (az, el) = vector_to_angles(dir);
            merged.push(Event {
                frame: group[0].frame,
                class_idx: group[0].class_idx,
                source_idx: cluster_idx,
                azimuth_deg: az,
                elevation_deg: el,
                distance_m: dist_sum / count as f64,
            });
        }
    }
    EventList::new(merged, raw.num_label_frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::EventList;

    fn scaler_123() -> DistanceScaler {
        DistanceScaler::fit(&[1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn fit_one_two_three() {
        let s = scaler_123();
        assert!((s.mean_m - 2.0).abs() < 1e-12);
        assert!((s.std_m - 0.816497).abs() < 1e-6);
        assert!((s.max_stand - 1.224745).abs() < 1e-6);
        assert_eq!(s.d_min_m, 1.0);
        assert_eq!(s.d_max_m, 3.0);
    }

    #[test]
    fn fit_rejects_degenerate() {
        assert!(DistanceScaler::fit(&[2.0]).is_err());
        assert!(DistanceScaler::fit(&[2.0, 2.0]).is_err());
        assert!(DistanceScaler::fit(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn scale_endpoints_and_clamp() {
        let s = scaler_123();
        assert!((s.scale(2.0)).abs() < 1e-12);
        assert!((s.scale(3.0) - 1.0).abs() < 1e-12);
        assert!((s.scale(1.0) + 1.0).abs() < 1e-12);
        assert_eq!(s.scale(100.0), 1.0);
        assert_eq!(s.scale(0.001), -1.0);
    }

    #[test]
    fn unscale_clamps_to_fitted_range() {
        let s = scaler_123();
        assert!((s.unscale(0.0) - 2.0).abs() < 1e-12);
        assert_eq!(s.unscale(-5.0), 1.0);
        assert_eq!(s.unscale(5.0), 3.0);
    }

    #[test]
    fn round_trip_within_fitted_range() {
        let s = DistanceScaler::fit(&[0.04, 1.0, 2.5, 7.64]).unwrap();
        let mut d = 0.04;
        while d <= 7.64 {
            let back = s.unscale(s.scale(d));
            assert!((back - d).abs() / d < 1e-9, "{d} -> {back}");
            d += 0.0173;
        }
    }

    #[test]
    fn encode_empty_is_zero() {
        let s = scaler_123();
        let t = encode_labels(&EventList::empty(50), &s, 13).unwrap();
        assert_eq!(t.tensor.shape(), &[50, 3, 13, 4]);
        assert!(t.tensor.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_axis_event() {
        let s = scaler_123();
        let ev = Event {
            frame: 7,
            class_idx: 2,
            source_idx: 0,
            azimuth_deg: 0.0,
            elevation_deg: 0.0,
            distance_m: 2.0,
        };
        let t = encode_labels(&EventList::new(vec![ev], 50), &s, 13).unwrap();
        assert!((t.tensor[[7, 0, 2, 0]] - 1.0).abs() < 1e-12);
        assert!(t.tensor[[7, 0, 2, 1]].abs() < 1e-12);
        assert!(t.tensor[[7, 0, 2, 2]].abs() < 1e-12);
        assert!(t.tensor[[7, 0, 2, 3]].abs() < 1e-12);
        // other tracks stay zero
        assert!(t.tensor[[7, 1, 2, 0]].abs() == 0.0);
    }

    #[test]
    fn decode_threshold_cases() {
        let s = scaler_123();
        let mut t = TargetTensor::zeros(2, 4);
        t.tensor[[0, 0, 1, 0]] = 0.8;
        // norm sqrt(0.22) < 0.5 -> inactive
        t.tensor[[1, 0, 2, 0]] = 0.3;
        t.tensor[[1, 0, 2, 1]] = 0.3;
        t.tensor[[1, 0, 2, 2]] = 0.2;
        let ev = decode_output(&t, &s, 0.5);
        assert_eq!(ev.len(), 1);
        let e = &ev.events[0];
        assert_eq!((e.frame, e.class_idx), (0, 1));
        assert!(e.azimuth_deg.abs() < 1e-9 && e.elevation_deg.abs() < 1e-9);
        assert!((e.distance_m - 2.0).abs() < 1e-9);
    }

    #[test]
    fn decode_all_zero_is_empty() {
        let s = scaler_123();
        let t = TargetTensor::zeros(50, 13);
        assert!(decode_output(&t, &s, 0.5).is_empty());
    }

    #[test]
    fn encode_decode_round_trip() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let s = DistanceScaler::fit(&[0.2, 1.0, 3.0, 6.5]).unwrap();
        for _ in 0..50 {
            let mut events = Vec::new();
            for frame in 0..10 {
                let n = rng.random_range(0..=2usize);
                for src in 0..n {
                    events.push(Event {
                        frame,
                        class_idx: rng.random_range(0..4),
                        source_idx: src,
                        azimuth_deg: rng.random_range(-180.0..180.0),
                        elevation_deg: rng.random_range(-89.0..89.0),
                        distance_m: rng.random_range(0.25..6.4),
                    });
                }
            }
            let list = EventList::new(events, 10);
            if list.validate_polyphony(3).is_err() {
                continue;
            }
            let enc = encode_labels(&list, &s, 4).unwrap();
            let dec = decode_output(&enc, &s, 0.5);
            assert_eq!(dec.len(), list.len());
            for (a, b) in list.events.iter().zip(dec.events.iter()) {
                assert_eq!((a.frame, a.class_idx), (b.frame, b.class_idx));
                assert!((a.azimuth_deg - b.azimuth_deg).abs() < 0.01);
                assert!((a.elevation_deg - b.elevation_deg).abs() < 0.01);
                assert!((a.distance_m - b.distance_m).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn merged_decode_collapses_duplicated_tracks() {
        let s = scaler_123();
        let mut t = TargetTensor::zeros(2, 3);
        // the same event duplicated on all 3 tracks, as a converged
        // permutation-invariant model would emit it
        let v = crate::types::doa_vector(40.0, 10.0);
        for track in 0..3 {
            t.tensor[[0, track, 1, 0]] = v[0];
            t.tensor[[0, track, 1, 1]] = v[1];
            t.tensor[[0, track, 1, 2]] = v[2];
            t.tensor[[0, track, 1, 3]] = s.scale(2.0);
        }
        // two genuinely distinct events on frame 1
        let a = crate::types::doa_vector(0.0, 0.0);
        let b = crate::types::doa_vector(120.0, -30.0);
        for (track, v) in [(0, a), (1, a), (2, b)] {
            t.tensor[[1, track, 2, 0]] = v[0];
            t.tensor[[1, track, 2, 1]] = v[1];
            t.tensor[[1, track, 2, 2]] = v[2];
            t.tensor[[1, track, 2, 3]] = s.scale(1.0);
        }
        let merged = decode_output_merged(&t, &s, 0.5, 15.0);
        assert_eq!(merged.len(), 3);
        let frame0: Vec<_> = merged.events.iter().filter(|e| e.frame == 0).collect();
        assert_eq!(frame0.len(), 1);
        assert!((frame0[0].azimuth_deg - 40.0).abs() < 1e-6);
        assert!((frame0[0].distance_m - 2.0).abs() < 1e-9);
        let frame1: Vec<_> = merged.events.iter().filter(|e| e.frame == 1).collect();
        assert_eq!(frame1.len(), 2);
    }

    proptest::proptest! {
        #[test]
        fn scale_round_trips_and_is_monotonic(
            mut distances in proptest::collection::vec(0.04f64..7.64, 3..40),
            probe_a in 0.04f64..7.64,
            probe_b in 0.04f64..7.64,
        ) {
            distances.sort_by(f64::total_cmp);
            proptest::prop_assume!(distances.last().unwrap() - distances[0] > 1e-6);
            let s = DistanceScaler::fit(&distances).unwrap();
            for d in &distances {
                let back = s.unscale(s.scale(*d));
                proptest::prop_assert!((back - d).abs() / d < 1e-9);
                proptest::prop_assert!((-1.0..=1.0).contains(&s.scale(*d)));
            }
            let (lo, hi) = (probe_a.min(probe_b), probe_a.max(probe_b));
            let (lo, hi) = (lo.max(distances[0]), hi.min(*distances.last().unwrap()));
            if lo < hi {
                proptest::prop_assert!(s.scale(lo) < s.scale(hi));
            }
        }
    }

    #[test]
    fn encoded_components_bounded() {
        let s = DistanceScaler::fit(&[0.5, 1.5, 4.0]).unwrap();
        let ev = Event {
            frame: 0,
            class_idx: 0,
            source_idx: 0,
            azimuth_deg: -135.0,
            elevation_deg: 60.0,
            distance_m: 4.0,
        };
        let t = encode_labels(&EventList::new(vec![ev], 1), &s, 1).unwrap();
        for v in t.tensor.iter() {
            assert!(*v >= -1.0 && *v <= 1.0);
        }
    }
}
