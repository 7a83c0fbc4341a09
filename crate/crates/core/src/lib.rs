//! Joint sound event localization, detection, and source distance estimation
//! from first-order Ambisonics audio.
//!
//! The crate covers the full desk-scale workflow: a parametric FOA scene
//! synthesizer, spatial-cue feature extraction, a distance-scaled multi-track
//! Cartesian DOA codec, waveform and spectrogram augmentation, an
//! SE-augmented ResNet-Conformer with permutation-invariant MSE training,
//! and the joint detection/localization/distance metrics.

pub mod augment;
pub mod codec;
pub mod error;
pub mod features;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod types;

pub use codec::{decode_output, decode_output_merged, encode_labels, DistanceScaler, TargetTensor};
pub use error::{Error, Result};
pub use features::{extract_salsa, FeatureMap, FeatureStats, StftConfig};
pub use metrics::{compute_metrics, seldde_error, SelddeMetrics};
pub use model::{ModelConfig, SeldModel, Variant};
pub use pipeline::{evaluate, infer, lr_schedule, train, Manifest, TrainConfig};
pub use synth::{encode_foa_gains, synth_scene, SceneConfig};
pub use types::{Event, EventList, FoaClip, SourceTag};
