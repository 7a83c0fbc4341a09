//! Core domain types: FOA audio clips and sound-event annotations.
//!
//! Audio is four-channel first-order Ambisonics in ACN channel order
//! `[W, Y, Z, X]` with SN3D normalization. Event labels live on a 100 ms
//! frame grid (10 label frames per second).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Working sample rate; all audio is resampled to this on ingestion.
pub const SAMPLE_RATE: u32 = 24_000;

/// Number of FOA channels (W, Y, Z, X).
pub const NUM_CHANNELS: usize = 4;

/// Label frames per second (100 ms resolution).
pub const LABEL_FPS: usize = 10;

/// Default number of sound-event classes.
pub const DEFAULT_NUM_CLASSES: usize = 13;

/// Maximum simultaneous events per (frame, class).
pub const MAX_POLYPHONY: usize = 3;

/// Output tracks of the multi-track format; equals the polyphony cap.
pub const NUM_TRACKS: usize = 3;

/// Whether a clip came from a real recording or the scene synthesizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Real,
    Synthetic,
}

/// A four-channel FOA audio clip.
///
/// `samples` is `[4, n_samples]`, channels ordered W, Y, Z, X.
#[derive(Debug, Clone, PartialEq)]
pub struct FoaClip {
    pub samples: Array2<f64>,
    pub sample_rate: u32,
    pub source_tag: SourceTag,
}

impl FoaClip {
    pub fn new(samples: Array2<f64>, sample_rate: u32, source_tag: SourceTag) -> Result<Self> {
        if samples.nrows() != NUM_CHANNELS {
            return Err(Error::Format(format!(
                "FOA clip requires {} channels, got {}",
                NUM_CHANNELS,
                samples.nrows()
            )));
        }
        Ok(Self { samples, sample_rate, source_tag })
    }

    /// All-zero clip of `n_samples` per channel.
    pub fn silence(n_samples: usize, sample_rate: u32, source_tag: SourceTag) -> Self {
        Self {
            samples: Array2::zeros((NUM_CHANNELS, n_samples)),
            sample_rate,
            source_tag,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate as f64
    }
}

/// One active sound event on one label frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Label-frame index at 100 ms resolution.
    pub frame: usize,
    pub class_idx: usize,
    pub source_idx: usize,
    /// Azimuth in degrees, in [-180, 180).
    pub azimuth_deg: f64,
    /// Elevation in degrees, in [-90, 90].
    pub elevation_deg: f64,
    /// Distance in meters, strictly positive.
    pub distance_m: f64,
}

impl Event {
    pub fn validate(&self) -> Result<()> {
        if !(-180.0..180.0).contains(&self.azimuth_deg) {
            return Err(Error::Validation(format!(
                "azimuth {} out of [-180, 180)",
                self.azimuth_deg
            )));
        }
        if !(-90.0..=90.0).contains(&self.elevation_deg) {
            return Err(Error::Validation(format!(
                "elevation {} out of [-90, 90]",
                self.elevation_deg
            )));
        }
        if !(self.distance_m > 0.0) {
            return Err(Error::Validation(format!(
                "distance {} must be > 0",
                self.distance_m
            )));
        }
        Ok(())
    }

    /// Unit DOA vector (x, y, z) from azimuth/elevation.
    pub fn doa_vector(&self) -> [f64; 3] {
        doa_vector(self.azimuth_deg, self.elevation_deg)
    }
}

/// Unit Cartesian direction from azimuth/elevation in degrees.
pub fn doa_vector(azimuth_deg: f64, elevation_deg: f64) -> [f64; 3] {
    let az = azimuth_deg.to_radians();
    let el = elevation_deg.to_radians();
    [az.cos() * el.cos(), az.sin() * el.cos(), el.sin()]
}

/// Azimuth/elevation in degrees from a (not necessarily unit) direction vector.
/// Azimuth is wrapped to [-180, 180).
pub fn vector_to_angles(v: [f64; 3]) -> (f64, f64) {
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if norm == 0.0 {
        return (0.0, 0.0);
    }
    let az = v[1].atan2(v[0]).to_degrees();
    let el = (v[2] / norm).clamp(-1.0, 1.0).asin().to_degrees();
    (wrap_azimuth_deg(az), el)
}

/// Wrap an azimuth in degrees to [-180, 180). In-range values pass through
/// bit-identically.
pub fn wrap_azimuth_deg(az: f64) -> f64 {
    if (-180.0..180.0).contains(&az) {
        return az;
    }
    let mut a = az.rem_euclid(360.0);
    if a >= 180.0 {
        a -= 360.0;
    }
    a
}

/// Ordered set of events over a fixed number of label frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventList {
    pub events: Vec<Event>,
    pub num_label_frames: usize,
}

impl EventList {
    pub fn new(mut events: Vec<Event>, num_label_frames: usize) -> Self {
        sort_events(&mut events);
        Self { events, num_label_frames }
    }

    pub fn empty(num_label_frames: usize) -> Self {
        Self { events: Vec::new(), num_label_frames }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Checks the per-(frame, class) polyphony cap.
    pub fn validate_polyphony(&self, cap: usize) -> Result<()> {
        let mut counts: std::collections::HashMap<(usize, usize), usize> =
            std::collections::HashMap::new();
        for e in &self.events {
            let c = counts.entry((e.frame, e.class_idx)).or_insert(0);
            *c += 1;
            if *c > cap {
                return Err(Error::Validation(format!(
                    "polyphony {} exceeds cap {} at frame {} class {}",
                    c, cap, e.frame, e.class_idx
                )));
            }
        }
        Ok(())
    }

    /// Largest class index plus one, or 0 when empty.
    pub fn max_class_plus_one(&self) -> usize {
        self.events.iter().map(|e| e.class_idx + 1).max().unwrap_or(0)
    }
}

/// Sort by (frame, class, source) for deterministic downstream order.
pub fn sort_events(events: &mut [Event]) {
    events.sort_by(|a, b| {
        (a.frame, a.class_idx, a.source_idx)
            .cmp(&(b.frame, b.class_idx, b.source_idx))
            .then(a.azimuth_deg.partial_cmp(&b.azimuth_deg).unwrap_or(std::cmp::Ordering::Equal))
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doa_vector_axes() {
        let v = doa_vector(0.0, 0.0);
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12 && v[2].abs() < 1e-12);
        let v = doa_vector(90.0, 0.0);
        assert!(v[0].abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
        let v = doa_vector(0.0, 90.0);
        assert!((v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn angle_round_trip() {
        for &(az, el) in &[(0.0, 0.0), (30.0, -10.0), (-120.0, 45.0), (179.0, -89.0)] {
            let (a2, e2) = vector_to_angles(doa_vector(az, el));
            assert!((a2 - az).abs() < 1e-9, "az {az} -> {a2}");
            assert!((e2 - el).abs() < 1e-9, "el {el} -> {e2}");
        }
    }

    #[test]
    fn wrap_azimuth() {
        assert_eq!(wrap_azimuth_deg(180.0), -180.0);
        assert_eq!(wrap_azimuth_deg(-180.0), -180.0);
        assert_eq!(wrap_azimuth_deg(270.0), -90.0);
        assert_eq!(wrap_azimuth_deg(360.0), 0.0);
        assert!((wrap_azimuth_deg(359.0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn polyphony_cap_enforced() {
        let mk = |src| Event {
            frame: 3,
            class_idx: 1,
            source_idx: src,
            azimuth_deg: 0.0,
            elevation_deg: 0.0,
            distance_m: 1.0,
        };
        let ok = EventList::new(vec![mk(0), mk(1), mk(2)], 10);
        assert!(ok.validate_polyphony(3).is_ok());
        let bad = EventList::new(vec![mk(0), mk(1), mk(2), mk(3)], 10);
        assert!(bad.validate_polyphony(3).is_err());
    }
}
