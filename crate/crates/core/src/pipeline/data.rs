//! Dataset assembly: manifests to cached features and encoded targets.

use std::path::{Path, PathBuf};

use super::config::Manifest;
use crate::codec::{encode_labels, DistanceScaler, TargetTensor};
use crate::error::{Error, Result};
use crate::features::{
    extract_salsa, read_feature_file, write_feature_file, FeatureMap, FeatureSidecar,
    FeatureStats, StftConfig,
};
use crate::io::{load_foa_wav, load_metadata_csv, segment_clip, DistanceUnit};
use crate::types::{EventList, SourceTag, LABEL_FPS};

/// Segment length used throughout training and evaluation.
pub const SEGMENT_SECONDS: f64 = 5.0;

/// Label frames per segment.
pub const SEGMENT_LABEL_FRAMES: usize = (SEGMENT_SECONDS * LABEL_FPS as f64) as usize;

/// One training/evaluation example: a segment's features and ground truth.
pub struct DatasetItem {
    pub features: FeatureMap,
    pub targets: Option<TargetTensor>,
    pub events: EventList,
    pub source: SourceTag,
    pub clip_idx: usize,
    pub seg_idx: usize,
}

/// All segments of one manifest, in manifest order.
pub struct Dataset {
    pub items: Vec<DatasetItem>,
    pub clip_names: Vec<String>,
    /// Ground truth per clip with clip-global frame indices.
    pub clip_events: Vec<EventList>,
}

impl Dataset {
    /// All ground-truth distances, for scaler fitting.
    pub fn all_distances(&self) -> Vec<f64> {
        self.clip_events
            .iter()
            .flat_map(|l| l.events.iter().map(|e| e.distance_m))
            .collect()
    }

    /// Standardizes every feature map in place.
    pub fn apply_feature_stats(&mut self, stats: &FeatureStats) {
        for item in &mut self.items {
            stats.apply(&mut item.features);
        }
    }

    /// Encodes ground-truth targets for every segment.
    pub fn encode_targets(&mut self, scaler: &DistanceScaler, classes: usize) -> Result<()> {
        for item in &mut self.items {
            item.targets = Some(encode_labels(&item.events, scaler, classes)?);
        }
        Ok(())
    }

    pub fn real_indices(&self) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.source == SourceTag::Real)
            .map(|(i, _)| i)
            .collect()
    }
}

fn cache_path(cache_dir: &Path, wav: &Path, seg_idx: usize) -> PathBuf {
    let stem = wav.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    cache_dir.join(format!("{stem}_seg{seg_idx:04}.f32"))
}

/// Extracts (or loads from cache) raw, un-standardized features for every
/// 5 s segment of every clip in the manifest.
pub fn load_dataset(
    manifest: &Manifest,
    stft: &StftConfig,
    cache_dir: &Path,
    unit: DistanceUnit,
) -> Result<Dataset> {
    std::fs::create_dir_all(cache_dir)?;
    let mut items = Vec::new();
    let mut clip_names = Vec::new();
    let mut clip_events = Vec::new();

    for (clip_idx, entry) in manifest.entries.iter().enumerate() {
        let events = load_metadata_csv(&entry.csv, unit)?;
        let clip = load_foa_wav(&entry.wav, entry.source)?;
        let mut events = events;
        // label range must cover the audio
        let audio_frames = (clip.duration_s() * LABEL_FPS as f64).round() as usize;
        events.num_label_frames = events.num_label_frames.max(audio_frames);
        let segments = segment_clip(&clip, &events, SEGMENT_SECONDS);

        for segment in &segments {
            let path = cache_path(cache_dir, &entry.wav, segment.index);
            let features = match try_cached(&path, stft) {
                Some(map) => map,
                None => {
                    let map = extract_salsa(&segment.clip, stft, None)?;
                    let sidecar = FeatureSidecar {
                        shape: vec![
                            map.tensor.dim().0,
                            map.tensor.dim().1,
                            map.tensor.dim().2,
                        ],
                        stft: stft.clone(),
                        stats_version: "raw".into(),
                    };
                    write_feature_file(&path, &map, &sidecar)?;
                    map
                }
            };
            items.push(DatasetItem {
                features,
                targets: None,
                events: segment.events.clone(),
                source: entry.source,
                clip_idx,
                seg_idx: segment.index,
            });
        }
        clip_names.push(
            entry.wav.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default(),
        );
        clip_events.push(events);
    }
    if items.is_empty() {
        return Err(Error::Config(format!("manifest '{}' has no clips", manifest.name)));
    }
    Ok(Dataset { items, clip_names, clip_events })
}

fn try_cached(path: &Path, stft: &StftConfig) -> Option<FeatureMap> {
    if !path.exists() {
        return None;
    }
    match read_feature_file(path) {
        Ok((map, sidecar)) if &sidecar.stft == stft && sidecar.stats_version == "raw" => {
            Some(map)
        }
        _ => None,
    }
}
