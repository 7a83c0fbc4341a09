//! Spatial cue-augmented log-spectrogram features.
//!
//! A 5 s FOA segment becomes a `[7, 400, 200]` tensor: four log-power
//! spectrograms (W, Y, Z, X) plus three eigenvector-based direction channels
//! (y, z, x), all on a linear frequency scale with the bands above 9 kHz
//! linearly compressed.

mod spatial;
mod stft;

pub use spatial::{
    compress_high_freq, spatial_eigenvector, COMPRESSED_BINS, DEFAULT_GATE_DB,
};
pub use stft::{stft, StftConfig};

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::FoaClip;

/// Log floor inside `ln(|X|^2 + eps)`.
pub const LOG_EPS: f64 = 1e-10;

/// Feature channels: 4 log-power + 3 spatial.
pub const NUM_FEATURE_CHANNELS: usize = 7;

/// Frames in a 5 s segment at the default STFT settings.
pub const SEGMENT_FRAMES: usize = 400;

/// The extracted feature tensor, `[7, 400, 200]` for a 5 s segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tensor: Array3<f32>,
}

impl FeatureMap {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.tensor.dim()
    }
}

/// Per-channel standardization statistics, fit on the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub version: String,
}

impl FeatureStats {
    /// Identity statistics (no-op standardization).
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; NUM_FEATURE_CHANNELS],
            std: vec![1.0; NUM_FEATURE_CHANNELS],
            version: "identity".into(),
        }
    }

    /// Accumulates per-channel mean and standard deviation over feature maps.
    pub fn fit<'a>(maps: impl IntoIterator<Item = &'a FeatureMap>) -> Result<Self> {
        let mut sum = vec![0.0f64; NUM_FEATURE_CHANNELS];
        let mut sum_sq = vec![0.0f64; NUM_FEATURE_CHANNELS];
        let mut count = 0usize;
        for m in maps {
            let (ch, t, f) = m.shape();
            if ch != NUM_FEATURE_CHANNELS {
                return Err(Error::Precondition(format!("expected 7 channels, got {ch}")));
            }
            count += t * f;
            for c in 0..ch {
                for v in m.tensor.index_axis(Axis(0), c).iter() {
                    let x = *v as f64;
                    sum[c] += x;
                    sum_sq[c] += x * x;
                }
            }
        }
        if count == 0 {
            return Err(Error::Precondition("no feature maps to fit".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt().max(1e-6))
            .collect();
        let mut hasher = std::hash::DefaultHasher::new();
        use std::hash::{Hash, Hasher};
        for v in mean.iter().chain(std.iter()) {
            v.to_bits().hash(&mut hasher);
        }
        Ok(Self { mean, std, version: format!("{:016x}", hasher.finish()) })
    }

    /// Applies `(x - mean) / std` per channel, in place.
    pub fn apply(&self, map: &mut FeatureMap) {
        for c in 0..NUM_FEATURE_CHANNELS {
            let mean = self.mean[c] as f32;
            let std = self.std[c] as f32;
            for v in map.tensor.index_axis_mut(Axis(0), c).iter_mut() {
                *v = (*v - mean) / std;
            }
        }
    }
}

/// Extracts the 7-channel feature tensor from a 5 s, 24 kHz clip.
/// Standardization is applied when `stats` is supplied.
pub fn extract_salsa(
    clip: &FoaClip,
    cfg: &StftConfig,
    stats: Option<&FeatureStats>,
) -> Result<FeatureMap> {
    let expected = (5.0 * cfg.sample_rate as f64) as usize;
    if clip.n_samples() != expected {
        return Err(Error::Precondition(format!(
            "expected a 5 s clip of {} samples, got {}",
            expected,
            clip.n_samples()
        )));
    }
    let spec = stft(clip, cfg)?;
    let (_, frames, bins) = spec.dim();

    let mut raw = Array3::zeros((NUM_FEATURE_CHANNELS, frames, bins));
    for ch in 0..4 {
        for t in 0..frames {
            for f in 0..bins {
                raw[[ch, t, f]] = (spec[[ch, t, f]].norm_sqr() + LOG_EPS).ln();
            }
        }
    }
    let spatial = spatial_eigenvector(&spec.view(), DEFAULT_GATE_DB);
    raw.slice_mut(ndarray::s![4..7, .., ..]).assign(&spatial);

    let compressed = compress_high_freq(&raw.view())?;
    let mut map = FeatureMap { tensor: compressed.mapv(|v| v as f32) };
    if let Some(stats) = stats {
        stats.apply(&mut map);
    }
    Ok(map)
}

/// Sidecar metadata stored next to each cached feature file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub shape: Vec<usize>,
    pub stft: StftConfig,
    pub stats_version: String,
}

/// Writes a feature map as raw little-endian f32 in (channel, time,
/// frequency) order plus a JSON sidecar.
pub fn write_feature_file(path: &Path, map: &FeatureMap, sidecar: &FeatureSidecar) -> Result<()> {
    let standard = map.tensor.as_standard_layout();
    let mut bytes = Vec::with_capacity(standard.len() * 4);
    for v in standard.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let sidecar_path = path.with_extension("json");
    std::fs::write(sidecar_path, serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

/// Reads a cached feature file, validating against its sidecar.
pub fn read_feature_file(path: &Path) -> Result<(FeatureMap, FeatureSidecar)> {
    let sidecar: FeatureSidecar =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
    if sidecar.shape.len() != 3 {
        return Err(Error::Format(format!("bad cached shape {:?}", sidecar.shape)));
    }
    let (c, t, f) = (sidecar.shape[0], sidecar.shape[1], sidecar.shape[2]);
    let bytes = std::fs::read(path)?;
    if bytes.len() != c * t * f * 4 {
        return Err(Error::Format(format!(
            "{}: cache size {} does not match shape {:?}",
            path.display(),
            bytes.len(),
            sidecar.shape
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let tensor = Array3::from_shape_vec((c, t, f), data)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((FeatureMap { tensor }, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_scene, EventSpec};
    use crate::types::{vector_to_angles, FoaClip, SourceTag, SAMPLE_RATE};

    #[test]
    fn shape_contract() {
        let clip = FoaClip::silence(120_000, SAMPLE_RATE, SourceTag::Synthetic);
        let map = extract_salsa(&clip, &StftConfig::default(), None).unwrap();
        assert_eq!(map.shape(), (7, 400, 200));
    }

    #[test]
    fn wrong_length_rejected() {
        let clip = FoaClip::silence(60_000, SAMPLE_RATE, SourceTag::Synthetic);
        assert!(extract_salsa(&clip, &StftConfig::default(), None).is_err());
    }

    #[test]
    fn silence_log_floor_and_zero_spatial() {
        let clip = FoaClip::silence(120_000, SAMPLE_RATE, SourceTag::Synthetic);
        let map = extract_salsa(&clip, &StftConfig::default(), None).unwrap();
        let floor = (LOG_EPS).ln() as f32;
        for c in 0..4 {
            assert!(map
                .tensor
                .index_axis(Axis(0), c)
                .iter()
                .all(|v| (*v - floor).abs() < 1e-4));
        }
        for c in 4..7 {
            assert!(map.tensor.index_axis(Axis(0), c).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn deterministic_extraction() {
        let spec = EventSpec {
            class_idx: 2,
            onset_s: 1.0,
            duration_s: 1.0,
            azimuth_deg: -45.0,
            elevation_deg: 20.0,
            distance_m: 1.5,
        };
        let (clip, _) = render_scene(&[spec], 5.0, 40.0, 8).unwrap();
        let a = extract_salsa(&clip, &StftConfig::default(), None).unwrap();
        let b = extract_salsa(&clip, &StftConfig::default(), None).unwrap();
        assert_eq!(a.tensor, b.tensor);
    }

    /// Direction decoded from the spatial channels, power-weighted over
    /// gated-in bins. Used as the plane-wave recovery oracle.
    pub(crate) fn dominant_direction(map: &FeatureMap) -> (f64, f64) {
        let (_, frames, bins) = map.tensor.dim();
        let mut acc = [0.0f64; 3];
        for t in 0..frames {
            for f in 0..bins {
                let y = map.tensor[[4, t, f]] as f64;
                let z = map.tensor[[5, t, f]] as f64;
                let x = map.tensor[[6, t, f]] as f64;
                let norm2 = x * x + y * y + z * z;
                if norm2 > 1e-12 {
                    let w = (map.tensor[[0, t, f]] as f64).exp();
                    acc[0] += w * x;
                    acc[1] += w * y;
                    acc[2] += w * z;
                }
            }
        }
        vector_to_angles([acc[0], acc[1], acc[2]])
    }

    #[test]
    fn plane_wave_direction_recovery() {
        let (az, el) = (30.0, 10.0);
        let spec = EventSpec {
            class_idx: 1,
            onset_s: 1.0,
            duration_s: 1.5,
            azimuth_deg: az,
            elevation_deg: el,
            distance_m: 1.0,
        };
        let (clip, _) = render_scene(&[spec], 5.0, 300.0, 4).unwrap();
        let map = extract_salsa(&clip, &StftConfig::default(), None).unwrap();
        let (got_az, got_el) = dominant_direction(&map);
        let err = crate::metrics::angular_error((az, el), (got_az, got_el));
        assert!(err < 2.0, "direction error {err} deg");
        // spatial channels are components of unit vectors
        for c in 4..7 {
            assert!(map
                .tensor
                .index_axis(Axis(0), c)
                .iter()
                .all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn two_sources_in_disjoint_bands() {
        // class 1 tone complex near 315 Hz vs class 10 tone complex near
        // 2.5 kHz, simultaneously active from different directions
        let a = EventSpec {
            class_idx: 1,
            onset_s: 1.0,
            duration_s: 1.5,
            azimuth_deg: 60.0,
            elevation_deg: 0.0,
            distance_m: 1.0,
        };
        let b = EventSpec {
            class_idx: 10,
            onset_s: 1.0,
            duration_s: 1.5,
            azimuth_deg: -120.0,
            elevation_deg: -30.0,
            distance_m: 1.0,
        };
        let (clip, _) = render_scene(&[a, b], 5.0, 300.0, 5).unwrap();
        let cfg = StftConfig::default();
        let map = extract_salsa(&clip, &cfg, None).unwrap();
        let direction_at_bin = |f0_hz: f64| -> (f64, f64) {
            let f = (f0_hz / cfg.bin_hz()).round() as usize;
            let mut acc = [0.0f64; 3];
            for t in 0..400 {
                let y = map.tensor[[4, t, f]] as f64;
                let z = map.tensor[[5, t, f]] as f64;
                let x = map.tensor[[6, t, f]] as f64;
                if x * x + y * y + z * z > 1e-12 {
                    acc[0] += x;
                    acc[1] += y;
                    acc[2] += z;
                }
            }
            vector_to_angles([acc[0], acc[1], acc[2]])
        };
        let base1 = 250.0 * 2f64.powf(1.0 / 3.0);
        let base10 = 250.0 * 2f64.powf(10.0 / 3.0);
        let got_a = direction_at_bin(base1);
        let got_b = direction_at_bin(base10);
        assert!(crate::metrics::angular_error((60.0, 0.0), got_a) < 2.0);
        assert!(crate::metrics::angular_error((-120.0, -30.0), got_b) < 2.0);
    }

    #[test]
    fn feature_stats_standardize() {
        let spec = EventSpec {
            class_idx: 0,
            onset_s: 0.5,
            duration_s: 2.0,
            azimuth_deg: 10.0,
            elevation_deg: 5.0,
            distance_m: 2.0,
        };
        let (clip, _) = render_scene(&[spec], 5.0, 30.0, 2).unwrap();
        let map = extract_salsa(&clip, &StftConfig::default(), None).unwrap();
        let stats = FeatureStats::fit([&map]).unwrap();
        let std_map = extract_salsa(&clip, &StftConfig::default(), Some(&stats)).unwrap();
        // channel 0 standardized to ~zero mean, unit variance
        let ch0: Vec<f64> =
            std_map.tensor.index_axis(Axis(0), 0).iter().map(|v| *v as f64).collect();
        let mean = ch0.iter().sum::<f64>() / ch0.len() as f64;
        let var = ch0.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ch0.len() as f64;
        assert!(mean.abs() < 1e-3);
        assert!((var - 1.0).abs() < 1e-2);
    }

    #[test]
    fn cache_round_trip() {
        let dir = std::env::temp_dir().join("seldde_feat_cache");
        std::fs::create_dir_all(&dir).unwrap();
        let clip = FoaClip::silence(120_000, SAMPLE_RATE, SourceTag::Synthetic);
        let map = extract_salsa(&clip, &StftConfig::default(), None).unwrap();
        let sidecar = FeatureSidecar {
            shape: vec![7, 400, 200],
            stft: StftConfig::default(),
            stats_version: "identity".into(),
        };
        let path = dir.join("seg0.f32");
        write_feature_file(&path, &map, &sidecar).unwrap();
        let (loaded, side) = read_feature_file(&path).unwrap();
        assert_eq!(loaded.tensor, map.tensor);
        assert_eq!(side.stats_version, "identity");
    }
}
