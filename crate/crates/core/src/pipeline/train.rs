//! Training orchestration: augmented batches, Adam with the transformer
//! schedule, per-epoch validation, best-F-score model selection, and a
//! real-data-only fine-tuning stage.

use ndarray::ArrayD;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use super::checkpoint::save_checkpoint;
use super::config::{Manifest, TrainConfig};
use super::data::{load_dataset, Dataset, SEGMENT_LABEL_FRAMES};
use super::evaluate::predict_dataset;
use super::sched::lr_schedule;
use crate::augment::{
    acs_apply_events, acs_apply_features, aug_magnitude, mixup_with_lambda, spec_augment,
    AcsTransform,
};
use crate::codec::DistanceScaler;
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureStats, StftConfig};
use crate::loss::{adpit_mse_graph, AdpitTargets};
use crate::metrics::{compute_metrics, SelddeMetrics, DEFAULT_ANG_THRESHOLD_DEG, DEFAULT_RDE_THRESHOLD};
use crate::model::SeldModel;
use crate::nn::{Adam, Graph, ParamStore};
use crate::types::SourceTag;

/// One epoch's record in the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_f20: f64,
    pub val_le_cd_deg: f64,
    pub val_rde_cd: f64,
    pub val_seldde_error: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub best_f20: f64,
    pub best_stage: String,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub validation: SelddeMetrics,
}

fn sub_seed(seed: u64, tag: u64, n: u64) -> u64 {
    let mut h = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    h ^= n.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 31;
    h.wrapping_mul(0x94d049bb133111eb)
}

const TAG_SHUFFLE: u64 = 1;
const TAG_AUGMENT: u64 = 2;

struct BatchSample {
    features: FeatureMap,
    targets: AdpitTargets,
    mix: Option<(AdpitTargets, f64)>,
}

/// Builds the augmented batch. Each sample gets its own rng stream derived
/// from the global sample counter, so results do not depend on thread
/// scheduling or batch composition order.
#[allow(clippy::too_many_arguments)]
fn assemble_batch(
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    scaler: &DistanceScaler,
    magnitude: f64,
    sample_counter: u64,
) -> Result<Vec<BatchSample>> {
    let policy = &cfg.augment;
    let classes = cfg.model.classes;

    // pass 1: per-sample augmentation (channel swap, frequency shift, masks)
    let mut augmented: Vec<(FeatureMap, AdpitTargets)> = Vec::with_capacity(indices.len());
    for (j, &idx) in indices.iter().enumerate() {
        let item = &dataset.items[idx];
        let mut rng =
            ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, TAG_AUGMENT, sample_counter + j as u64));
        let mut features = item.features.clone();
        let mut events = item.events.clone();

        // channel swapping stays at constant probability and applies only to
        // real recordings
        if item.source == SourceTag::Real && policy.acs_probability > 0.0 {
            let coin: f64 = rng.random_range(0.0..1.0);
            if coin < policy.acs_probability {
                let transforms = AcsTransform::all();
                let t = transforms[rng.random_range(0..transforms.len())];
                features = acs_apply_features(&features, t);
                events = acs_apply_events(&events, t);
            }
        }
        if policy.freq_shift_max > 0 && magnitude > 0.0 {
            let max_shift = (policy.freq_shift_max as f64 * magnitude).round() as i64;
            if max_shift > 0 {
                let shift = rng.random_range(-max_shift..=max_shift) as isize;
                features = crate::augment::freq_shift(&features, shift, policy.freq_shift_max)?;
            }
        }
        features = spec_augment(&features, policy, magnitude, &mut rng);
        let targets = AdpitTargets::from_events(&events, scaler, classes)?;
        augmented.push((features, targets));
    }

    // pass 2: mixup pairs samples inside the batch; the pair contributes a
    // weighted second loss term so permutation invariance survives blending
    let mut out = Vec::with_capacity(indices.len());
    for (j, (features, targets)) in augmented.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(
            cfg.seed,
            TAG_AUGMENT,
            (sample_counter + j as u64) ^ 0x8000_0000_0000_0000,
        ));
        let mut features = features.clone();
        let mut mix = None;
        if policy.mixup_alpha > 0.0 && augmented.len() > 1 && magnitude > 0.0 {
            let partner = {
                let p = rng.random_range(0..augmented.len() - 1);
                if p >= j {
                    p + 1
                } else {
                    p
                }
            };
            let beta = rand_distr::Beta::new(policy.mixup_alpha, policy.mixup_alpha)
                .map_err(|e| Error::Config(e.to_string()))?;
            let lambda: f64 = beta.sample(&mut rng);
            // annealing pulls lambda toward 1 (less mixing) as the
            // learning rate decays
            let lambda = 1.0 - magnitude * (1.0 - lambda);
            let (mixed, _) = mixup_with_lambda(
                (&features, &zero_targets(classes)),
                (&augmented[partner].0, &zero_targets(classes)),
                lambda,
            );
            features = mixed;
            mix = Some((augmented[partner].1.clone(), lambda));
        }
        out.push(BatchSample { features, targets: targets.clone(), mix });
    }
    Ok(out)
}

fn zero_targets(classes: usize) -> crate::codec::TargetTensor {
    crate::codec::TargetTensor::zeros(SEGMENT_LABEL_FRAMES, classes)
}

/// One forward/backward pass for one sample.
fn sample_loss_and_grads(
    model: &SeldModel,
    store: &ParamStore<f32>,
    sample: &BatchSample,
) -> (f64, Vec<ArrayD<f32>>) {
    let mut g = Graph::<f32>::new();
    let pv = store.leaves(&mut g, true);
    let x = g.leaf(sample.features.tensor.clone().into_dyn(), false);
    let out = model.forward(&mut g, &pv, x);
    let loss = match &sample.mix {
        None => adpit_mse_graph(&mut g, out, &sample.targets),
        Some((partner, lambda)) => {
            let la = adpit_mse_graph(&mut g, out, &sample.targets);
            let lb = adpit_mse_graph(&mut g, out, partner);
            let la = g.scale(la, *lambda);
            let lb = g.scale(lb, 1.0 - *lambda);
            g.add(la, lb)
        }
    };
    let grads = g.backward(loss);
    (g.scalar(loss) as f64, store.collect_grads(&pv, &grads))
}

fn merge_train_datasets(cfg: &TrainConfig, stft: &StftConfig) -> Result<Dataset> {
    let cache = cfg.resolved_cache_dir();
    let mut merged: Option<Dataset> = None;
    for path in [&cfg.train_synth_manifest, &cfg.train_real_manifest].into_iter().flatten() {
        let manifest = Manifest::load(path)?;
        let ds = load_dataset(&manifest, stft, &cache, cfg.distance_unit)?;
        merged = Some(match merged {
            None => ds,
            Some(mut acc) => {
                let clip_offset = acc.clip_names.len();
                for mut item in ds.items {
                    item.clip_idx += clip_offset;
                    acc.items.push(item);
                }
                acc.clip_names.extend(ds.clip_names);
                acc.clip_events.extend(ds.clip_events);
                acc
            }
        });
    }
    merged.ok_or_else(|| Error::Config("no training manifest supplied".into()))
}

struct StagePlan {
    name: &'static str,
    epochs: usize,
    peak_lr: f64,
    indices: Vec<usize>,
}

/// Runs the full training recipe and writes the best checkpoint, the run
/// log, and the best validation metrics under `cfg.checkpoint_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stft = StftConfig::default();

    let mut train_ds = merge_train_datasets(cfg, &stft)?;
    let val_manifest = Manifest::load(&cfg.validation_manifest)?;
    let mut val_ds =
        load_dataset(&val_manifest, &stft, &cfg.resolved_cache_dir(), cfg.distance_unit)?;

    let distances = train_ds.all_distances();
    let scaler = DistanceScaler::fit(&distances).map_err(|e| {
        Error::Config(format!("cannot fit distance scaler from training labels: {e}"))
    })?;
    let stats = if cfg.standardize_features {
        FeatureStats::fit(train_ds.items.iter().map(|i| &i.features))?
    } else {
        FeatureStats::identity()
    };
    train_ds.apply_feature_stats(&stats);
    val_ds.apply_feature_stats(&stats);
    train_ds.encode_targets(&scaler, cfg.model.classes)?;

    let mut store = ParamStore::<f32>::new();
    let model = SeldModel::new(cfg.model.clone(), &mut store, cfg.seed)?;

    let real_indices = train_ds.real_indices();
    if cfg.finetune_epochs > 0 && real_indices.is_empty() {
        return Err(Error::Config(
            "fine-tuning requested but no real-tagged training data present".into(),
        ));
    }

    let all_indices: Vec<usize> = (0..train_ds.items.len()).collect();
    let stages = [
        StagePlan {
            name: "main",
            epochs: cfg.epochs,
            peak_lr: cfg.peak_lr,
            indices: all_indices,
        },
        StagePlan {
            name: "finetune",
            epochs: cfg.finetune_epochs,
            peak_lr: cfg.peak_lr * cfg.finetune_lr_scale,
            indices: real_indices,
        },
    ];

    let mut log: Vec<EpochLog> = Vec::new();
    let mut best: Option<(f64, String, usize, Vec<(String, Vec<usize>, Vec<f64>)>, SelddeMetrics)> =
        None;
    let mut sample_counter: u64 = 0;

    for stage in &stages {
        if stage.epochs == 0 || stage.indices.is_empty() {
            continue;
        }
        if stage.name == "finetune" {
            // fine-tuning continues from the best model found so far
            if let Some((_, _, _, snapshot, _)) = &best {
                store.import(snapshot)?;
            }
        }
        let batches_per_epoch = stage.indices.len().div_ceil(cfg.batch_size);
        let total_steps = stage.epochs * batches_per_epoch;
        let warmup = cfg
            .warmup_steps
            .unwrap_or_else(|| ((total_steps as f64 * 0.05).round() as usize).max(1));
        let mut adam = Adam::new(&store);
        let mut stage_step = 0usize;

        for epoch in 0..stage.epochs {
            let mut order = stage.indices.clone();
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(
                cfg.seed,
                TAG_SHUFFLE,
                (stage.name.len() as u64) << 32 | epoch as u64,
            ));
            order.shuffle(&mut shuffle_rng);

            let mut epoch_loss = 0.0;
            let mut epoch_samples = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                stage_step += 1;
                let lr = lr_schedule(stage_step, stage.peak_lr, warmup);
                let magnitude =
                    aug_magnitude(lr, stage.peak_lr, cfg.augment.magnitude_floor);
                let samples =
                    assemble_batch(&train_ds, batch, cfg, &scaler, magnitude, sample_counter)?;
                sample_counter += batch.len() as u64;

                let results: Vec<(f64, Vec<ArrayD<f32>>)> = if cfg.deterministic {
                    samples.iter().map(|s| sample_loss_and_grads(&model, &store, s)).collect()
                } else {
                    samples
                        .par_iter()
                        .map(|s| sample_loss_and_grads(&model, &store, s))
                        .collect()
                };

                let batch_loss: f64 =
                    results.iter().map(|(l, _)| *l).sum::<f64>() / results.len() as f64;
                if !batch_loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss {batch_loss} at stage {} step {stage_step}",
                        stage.name
                    )));
                }
                epoch_loss += batch_loss * results.len() as f64;
                epoch_samples += results.len();

                // fixed-order reduction keeps the update bit-reproducible
                let scale = 1.0 / results.len() as f32;
                let mut grads = results[0].1.clone();
                for (_, g) in results.iter().skip(1) {
                    for (acc, delta) in grads.iter_mut().zip(g.iter()) {
                        *acc += delta;
                    }
                }
                for g in grads.iter_mut() {
                    g.mapv_inplace(|v| v * scale);
                }
                adam.step(&mut store, &grads, lr);
            }

            let val = validate(&model, &store, &val_ds, &scaler, cfg)?;
            log.push(EpochLog {
                stage: stage.name.to_string(),
                epoch,
                mean_loss: epoch_loss / epoch_samples.max(1) as f64,
                val_f20: val.f20,
                val_le_cd_deg: val.le_cd_deg,
                val_rde_cd: val.rde_cd,
                val_seldde_error: val.seldde_error,
            });
            let improved = best.as_ref().map(|(f, ..)| val.f20 > *f).unwrap_or(true);
            if improved {
                best = Some((
                    val.f20,
                    stage.name.to_string(),
                    epoch,
                    store.export(),
                    val.clone(),
                ));
            }
        }
    }

    let (best_f20, best_stage, best_epoch, snapshot, best_metrics) =
        best.ok_or_else(|| Error::Config("no training epochs were run".into()))?;
    store.import(&snapshot)?;

    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    let checkpoint_path = cfg.checkpoint_dir.join("model.ckpt");
    save_checkpoint(
        &checkpoint_path,
        &store,
        &cfg.model,
        &scaler,
        &stats,
        &stft,
        cfg.act_threshold,
    )?;
    std::fs::write(
        cfg.checkpoint_dir.join("runlog.json"),
        serde_json::to_string_pretty(&log)?,
    )?;
    std::fs::write(
        cfg.checkpoint_dir.join("validation_metrics.json"),
        serde_json::to_string_pretty(&best_metrics)?,
    )?;

    Ok(TrainOutcome {
        checkpoint_path,
        best_f20,
        best_stage,
        best_epoch,
        log,
        validation: best_metrics,
    })
}

fn validate(
    model: &SeldModel,
    store: &ParamStore<f32>,
    val_ds: &Dataset,
    scaler: &DistanceScaler,
    cfg: &TrainConfig,
) -> Result<SelddeMetrics> {
    let (preds, refs) = predict_dataset(
        model,
        store,
        val_ds,
        scaler,
        cfg.act_threshold,
        cfg.deterministic,
    );
    compute_metrics(
        &preds,
        &refs,
        cfg.model.classes,
        DEFAULT_ANG_THRESHOLD_DEG,
        DEFAULT_RDE_THRESHOLD,
    )
}
