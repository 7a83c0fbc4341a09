//! Checkpoint evaluation and single-file inference.

use rayon::prelude::*;
use std::path::Path;

use super::checkpoint::{load_checkpoint, Checkpoint};
use super::config::Manifest;
use super::data::{load_dataset, Dataset, SEGMENT_LABEL_FRAMES, SEGMENT_SECONDS};
use crate::codec::{decode_output_merged, DistanceScaler, TargetTensor, DEFAULT_UNIFY_DEG};
use crate::error::Result;
use crate::io::{load_foa_wav, segment_clip, write_metadata_csv, DistanceUnit};
use crate::metrics::{
    compute_metrics, SelddeMetrics, DEFAULT_ANG_THRESHOLD_DEG, DEFAULT_RDE_THRESHOLD,
};
use crate::model::SeldModel;
use crate::nn::ParamStore;
use crate::types::{Event, EventList, SourceTag};

/// Runs inference over a dataset and aligns predictions with references on
/// a shared global frame axis (clips are offset so frames never collide).
pub(crate) fn predict_dataset(
    model: &SeldModel,
    store: &ParamStore<f32>,
    ds: &Dataset,
    scaler: &DistanceScaler,
    act_threshold: f64,
    sequential: bool,
) -> (EventList, EventList) {
    let clip_stride = ds
        .clip_events
        .iter()
        .map(|e| e.num_label_frames.div_ceil(SEGMENT_LABEL_FRAMES) * SEGMENT_LABEL_FRAMES)
        .max()
        .unwrap_or(SEGMENT_LABEL_FRAMES);

    let decode_item = |item: &super::data::DatasetItem| -> Vec<Event> {
        let out = model.infer(store, &item.features.tensor);
        let decoded = decode_output_merged(
            &TargetTensor { tensor: out },
            scaler,
            act_threshold,
            DEFAULT_UNIFY_DEG,
        );
        let offset = item.clip_idx * clip_stride + item.seg_idx * SEGMENT_LABEL_FRAMES;
        decoded
            .events
            .into_iter()
            .map(|e| Event { frame: e.frame + offset, ..e })
            .collect()
    };

    let pred_events: Vec<Event> = if sequential {
        ds.items.iter().flat_map(|item| decode_item(item)).collect()
    } else {
        ds.items
            .par_iter()
            .map(decode_item)
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    };

    let ref_events: Vec<Event> = ds
        .clip_events
        .iter()
        .enumerate()
        .flat_map(|(clip_idx, events)| {
            events
                .events
                .iter()
                .map(move |e| Event { frame: e.frame + clip_idx * clip_stride, ..*e })
        })
        .collect();

    let total_frames = ds.clip_events.len().max(1) * clip_stride;
    (
        EventList::new(pred_events, total_frames),
        EventList::new(ref_events, total_frames),
    )
}

/// Evaluates a checkpoint against a dataset manifest.
pub fn evaluate(
    checkpoint_path: &Path,
    manifest_path: &Path,
    cache_dir: &Path,
    unit: DistanceUnit,
) -> Result<SelddeMetrics> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let manifest = Manifest::load(manifest_path)?;
    let mut ds = load_dataset(&manifest, &ckpt.stft, cache_dir, unit)?;
    ds.apply_feature_stats(&ckpt.feature_stats);
    let (preds, refs) =
        predict_dataset(&ckpt.model, &ckpt.store, &ds, &ckpt.scaler, ckpt.act_threshold, false);
    compute_metrics(
        &preds,
        &refs,
        ckpt.model_config.classes,
        DEFAULT_ANG_THRESHOLD_DEG,
        DEFAULT_RDE_THRESHOLD,
    )
}

/// Runs a checkpoint over one WAV file and writes predictions in the
/// metadata CSV format (distances in meters, clamped to the scaler range).
pub fn infer(checkpoint_path: &Path, wav_path: &Path, out_csv: &Path) -> Result<EventList> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let events = infer_loaded(&ckpt, wav_path)?;
    write_metadata_csv(out_csv, &events)?;
    Ok(events)
}

/// Inference using an already-loaded checkpoint.
pub fn infer_loaded(ckpt: &Checkpoint, wav_path: &Path) -> Result<EventList> {
    let clip = load_foa_wav(wav_path, SourceTag::Real)?;
    let duration_frames =
        (clip.duration_s() * crate::types::LABEL_FPS as f64).round() as usize;
    let segments = segment_clip(&clip, &EventList::empty(duration_frames), SEGMENT_SECONDS);
    let mut events = Vec::new();
    for segment in &segments {
        let mut features = crate::features::extract_salsa(&segment.clip, &ckpt.stft, None)?;
        ckpt.feature_stats.apply(&mut features);
        let out = ckpt.model.infer(&ckpt.store, &features.tensor);
        let decoded = decode_output_merged(
            &TargetTensor { tensor: out },
            &ckpt.scaler,
            ckpt.act_threshold,
            DEFAULT_UNIFY_DEG,
        );
        let offset = segment.index * SEGMENT_LABEL_FRAMES;
        events.extend(
            decoded.events.into_iter().map(|e| Event { frame: e.frame + offset, ..e }),
        );
    }
    Ok(EventList::new(events, segments.len() * SEGMENT_LABEL_FRAMES))
}
