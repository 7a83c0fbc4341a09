//! Criterion benchmarks for the hot paths: feature extraction, the model
//! forward pass, training steps, and the permutation-invariant loss.

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use seldde_core::codec::{DistanceScaler, TargetTensor};
use seldde_core::features::{extract_salsa, StftConfig};
use seldde_core::loss::{adpit_mse, adpit_mse_graph, AdpitTargets};
use seldde_core::model::{ModelConfig, SeldModel};
use seldde_core::nn::{Graph, ParamStore};
use seldde_core::synth::{render_scene, EventSpec};
use seldde_core::types::{Event, EventList};

fn scene_clip() -> seldde_core::types::FoaClip {
    let specs = vec![
        EventSpec {
            class_idx: 1,
            onset_s: 0.5,
            duration_s: 1.5,
            azimuth_deg: 40.0,
            elevation_deg: 10.0,
            distance_m: 1.5,
        },
        EventSpec {
            class_idx: 4,
            onset_s: 2.5,
            duration_s: 1.0,
            azimuth_deg: -100.0,
            elevation_deg: -20.0,
            distance_m: 3.0,
        },
    ];
    render_scene(&specs, 5.0, 30.0, 7).unwrap().0
}

fn bench_extract(c: &mut Criterion) {
    let clip = scene_clip();
    let cfg = StftConfig::default();
    c.bench_function("extract_salsa_5s", |b| {
        b.iter(|| extract_salsa(&clip, &cfg, None).unwrap())
    });
}

fn bench_model(c: &mut Criterion) {
    let cfg = ModelConfig::toy(4);
    let mut store = ParamStore::<f32>::new();
    let model = SeldModel::new(cfg, &mut store, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let features =
        Array3::<f32>::from_shape_simple_fn((7, 400, 200), || rng.random_range(-1.0..1.0));
    c.bench_function("toy_forward", |b| b.iter(|| model.infer(&store, &features)));

    let scaler = DistanceScaler::fit(&[0.5, 1.5, 3.0]).unwrap();
    let events = EventList::new(
        vec![Event {
            frame: 10,
            class_idx: 1,
            source_idx: 0,
            azimuth_deg: 40.0,
            elevation_deg: 10.0,
            distance_m: 1.5,
        }],
        50,
    );
    let targets = AdpitTargets::from_events(&events, &scaler, 4).unwrap();
    c.bench_function("toy_forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let pv = store.leaves(&mut g, true);
            let x = g.leaf(features.clone().into_dyn(), false);
            let out = model.forward(&mut g, &pv, x);
            let loss = adpit_mse_graph(&mut g, out, &targets);
            let grads = g.backward(loss);
            store.collect_grads(&pv, &grads)
        })
    });
}

fn bench_loss(c: &mut Criterion) {
    let scaler = DistanceScaler::fit(&[0.5, 1.5, 3.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut events = Vec::new();
    for frame in 0..50 {
        if frame % 3 == 0 {
            events.push(Event {
                frame,
                class_idx: frame % 13,
                source_idx: 0,
                azimuth_deg: rng.random_range(-180.0..180.0),
                elevation_deg: rng.random_range(-60.0..60.0),
                distance_m: rng.random_range(0.6..2.9),
            });
        }
    }
    let events = EventList::new(events, 50);
    let targets = AdpitTargets::from_events(&events, &scaler, 13).unwrap();
    let pred = TargetTensor {
        tensor: ndarray::Array4::from_shape_simple_fn((50, 3, 13, 4), || {
            rng.random_range(-1.0..1.0)
        }),
    };
    c.bench_function("adpit_mse_segment", |b| b.iter(|| adpit_mse(&pred, &targets)));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_extract, bench_model, bench_loss
}
criterion_main!(benches);
