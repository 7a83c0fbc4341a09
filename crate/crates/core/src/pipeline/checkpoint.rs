//! Single-file checkpoint bundle: JSON header (model config, distance
//! scaler, feature statistics, version string, parameter manifest) followed
//! by raw little-endian f32 weights.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::codec::DistanceScaler;
use crate::error::{Error, Result};
use crate::features::{FeatureStats, StftConfig};
use crate::model::{ModelConfig, SeldModel};
use crate::nn::{ParamStore, Real};

const MAGIC: &[u8; 8] = b"SELDDE01";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: u32,
    version: String,
    model: ModelConfig,
    scaler: DistanceScaler,
    feature_stats: FeatureStats,
    stft: StftConfig,
    act_threshold: f64,
    params: Vec<ParamRecord>,
}

/// Everything needed to run inference.
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub scaler: DistanceScaler,
    pub feature_stats: FeatureStats,
    pub stft: StftConfig,
    pub act_threshold: f64,
    pub version: String,
    pub model: SeldModel,
    pub store: ParamStore<f32>,
}

/// Content hash rendered like a short git revision.
fn content_hash(data: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in data {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint<F: Real>(
    path: &Path,
    store: &ParamStore<F>,
    model_config: &ModelConfig,
    scaler: &DistanceScaler,
    feature_stats: &FeatureStats,
    stft: &StftConfig,
    act_threshold: f64,
) -> Result<()> {
    let mut records = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, value) in store.iter() {
        let len = value.len();
        records.push(ParamRecord {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            offset,
            len,
        });
        for v in value.iter() {
            blob.extend_from_slice(&(Real::to_f64(*v) as f32).to_le_bytes());
        }
        offset += len;
    }
    let header = Header {
        format: 1,
        version: format!("{}+{}", env!("CARGO_PKG_VERSION"), content_hash(&blob)),
        model: model_config.clone(),
        scaler: scaler.clone(),
        feature_stats: feature_stats.clone(),
        stft: stft.clone(),
        act_threshold,
        params: records,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;

    let mut store = ParamStore::<f32>::new();
    let model = SeldModel::new(header.model.clone(), &mut store, 0)?;
    let data: Result<Vec<(String, Vec<usize>, Vec<f64>)>> = header
        .params
        .iter()
        .map(|rec| {
            let start = rec.offset * 4;
            let end = start + rec.len * 4;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} extends past end of file",
                    rec.name
                )));
            }
            let values: Vec<f64> = blob[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Ok((rec.name.clone(), rec.shape.clone(), values))
        })
        .collect();
    store.import(&data?)?;

    Ok(Checkpoint {
        model_config: header.model,
        scaler: header.scaler,
        feature_stats: header.feature_stats,
        stft: header.stft,
        act_threshold: header.act_threshold,
        version: header.version,
        model,
        store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join("seldde_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");

        let cfg = ModelConfig {
            stage_channels: [8, 8, 8, 8],
            blocks_per_stage: [1, 1, 1, 1],
            conformer_layers: 1,
            d_model: 16,
            attention_heads: 4,
            conv_kernel: 5,
            classes: 2,
            time_frames: 32,
            freq_bins: 32,
            variant: Variant::B,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let _model = SeldModel::new(cfg.clone(), &mut store, 42).unwrap();
        let scaler = DistanceScaler::fit(&[0.5, 2.0, 4.0]).unwrap();
        let stats = FeatureStats::identity();
        save_checkpoint(&path, &store, &cfg, &scaler, &stats, &StftConfig::default(), 0.5)
            .unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model_config, cfg);
        assert_eq!(loaded.scaler, scaler);
        assert_eq!(loaded.act_threshold, 0.5);
        assert!(loaded.version.starts_with(env!("CARGO_PKG_VERSION")));
        assert_eq!(loaded.store.len(), store.len());
        for ((n1, v1), (n2, v2)) in loaded.store.iter().zip(store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = std::env::temp_dir().join("seldde_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("garbage.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
