//! Permutation-invariant MSE on the multi-track output tensor.
//!
//! For each (frame, class) the targets form a candidate set: with A active
//! events, every surjective assignment of the 3 output tracks onto the A
//! events (events duplicated across leftover tracks). The loss takes the
//! minimum MSE over candidates, so the network may emit active events on any
//! track without penalty, and no track of an active class ever carries a
//! zero target.

use ndarray::Array4;
use std::collections::BTreeMap;

use crate::codec::{group_by_frame_class, DistanceScaler, TargetTensor};
use crate::error::{Error, Result};
use crate::nn::{Graph, Real, Var};
use crate::types::{EventList, NUM_TRACKS};

/// One candidate assignment: per track, the encoded (x, y, z, d) target.
pub type Candidate = [f64; NUM_TRACKS * 4];

/// Candidate target assignments for every (frame, class) of a segment.
/// Pairs absent from the map have exactly one all-zero candidate.
#[derive(Debug, Clone)]
pub struct AdpitTargets {
    pub frames: usize,
    pub classes: usize,
    pub candidates: BTreeMap<(usize, usize), Vec<Candidate>>,
}

/// Track-to-event assignments, lexicographic, keeping only those that use
/// every event at least once.
fn surjective_assignments(num_events: usize) -> Vec<[usize; NUM_TRACKS]> {
    let mut out = Vec::new();
    for a in 0..num_events {
        for b in 0..num_events {
            for c in 0..num_events {
                let mut used = [false; NUM_TRACKS];
                for e in [a, b, c] {
                    used[e] = true;
                }
                if used[..num_events].iter().all(|u| *u) {
                    out.push([a, b, c]);
                }
            }
        }
    }
    out
}

/// Builds the candidate set for one (frame, class) from its active events.
pub fn build_adpit_candidates(
    events: &[crate::types::Event],
    scaler: &DistanceScaler,
) -> Result<Vec<Candidate>> {
    if events.len() > NUM_TRACKS {
        return Err(Error::Validation(format!(
            "{} simultaneous events exceed {} tracks",
            events.len(),
            NUM_TRACKS
        )));
    }
    if events.is_empty() {
        return Ok(vec![[0.0; NUM_TRACKS * 4]]);
    }
    let encoded: Vec<[f64; 4]> = events
        .iter()
        .map(|e| {
            let [x, y, z] = e.doa_vector();
            [x, y, z, scaler.scale(e.distance_m)]
        })
        .collect();
    Ok(surjective_assignments(events.len())
        .into_iter()
        .map(|assign| {
            let mut cand = [0.0; NUM_TRACKS * 4];
            for (track, &event_idx) in assign.iter().enumerate() {
                cand[track * 4..track * 4 + 4].copy_from_slice(&encoded[event_idx]);
            }
            cand
        })
        .collect())
}

impl AdpitTargets {
    /// Builds candidate sets for a whole segment's ground truth.
    pub fn from_events(
        events: &EventList,
        scaler: &DistanceScaler,
        classes: usize,
    ) -> Result<Self> {
        let mut candidates = BTreeMap::new();
        for ((frame, class), group) in group_by_frame_class(events) {
            if frame >= events.num_label_frames || class >= classes {
                return Err(Error::Validation(format!(
                    "event at frame {frame} class {class} outside segment bounds"
                )));
            }
            candidates.insert((frame, class), build_adpit_candidates(&group, scaler)?);
        }
        Ok(Self { frames: events.num_label_frames, classes, candidates })
    }

    fn candidate_slice(&self, frame: usize, class: usize) -> Option<&[Candidate]> {
        self.candidates.get(&(frame, class)).map(|v| v.as_slice())
    }

    /// For every (frame, class) picks the candidate with minimum squared
    /// error against `pred` (first wins ties) and assembles the selected
    /// targets into one tensor. The mean squared error against that tensor
    /// equals the permutation-invariant loss up to summation order.
    pub fn select(&self, pred: &Array4<f64>) -> Array4<f64> {
        let (frames, tracks, classes, comps) = pred.dim();
        assert_eq!((frames, tracks, classes, comps), (self.frames, NUM_TRACKS, self.classes, 4));
        let mut selected = Array4::zeros((frames, tracks, classes, 4));
        let zero = [[0.0; NUM_TRACKS * 4]];
        for frame in 0..frames {
            for class in 0..classes {
                let cands: &[Candidate] =
                    self.candidate_slice(frame, class).unwrap_or(&zero);
                let block = block_of(pred, frame, class);
                let (best, _) = argmin_candidate(&block, cands);
                for track in 0..tracks {
                    for comp in 0..4 {
                        selected[[frame, track, class, comp]] = cands[best][track * 4 + comp];
                    }
                }
            }
        }
        selected
    }
}

fn block_of(pred: &Array4<f64>, frame: usize, class: usize) -> [f64; NUM_TRACKS * 4] {
    let mut block = [0.0; NUM_TRACKS * 4];
    for track in 0..NUM_TRACKS {
        for comp in 0..4 {
            block[track * 4 + comp] = pred[[frame, track, class, comp]];
        }
    }
    block
}

/// Squared-error mean over one block, accumulated in sorted order so the
/// value does not depend on how tracks are laid out. This is what makes the
/// loss exactly invariant under track permutations, not just up to
/// round-off.
fn block_mse_sorted(block: &[f64; NUM_TRACKS * 4], cand: &[f64; NUM_TRACKS * 4]) -> f64 {
    let mut sq = [0.0; NUM_TRACKS * 4];
    for (slot, (p, t)) in sq.iter_mut().zip(block.iter().zip(cand.iter())) {
        *slot = (p - t) * (p - t);
    }
    sq.sort_unstable_by(f64::total_cmp);
    sq.iter().sum::<f64>() / (NUM_TRACKS * 4) as f64
}

fn argmin_candidate(block: &[f64; NUM_TRACKS * 4], cands: &[Candidate]) -> (usize, f64) {
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (i, cand) in cands.iter().enumerate() {
        let err = block_mse_sorted(block, cand);
        if err < best_err {
            best_err = err;
            best = i;
        }
    }
    (best, best_err)
}

/// Permutation-invariant MSE: per (frame, class) the minimum candidate MSE
/// over the 3x4 block, averaged over frames and classes.
pub fn adpit_mse(pred: &TargetTensor, targets: &AdpitTargets) -> f64 {
    let (frames, _, classes, _) = pred.tensor.dim();
    let zero = [[0.0; NUM_TRACKS * 4]];
    let mut total = 0.0;
    for frame in 0..frames {
        for class in 0..classes {
            let cands: &[Candidate] = targets
                .candidates
                .get(&(frame, class))
                .map(|v| v.as_slice())
                .unwrap_or(&zero);
            let block = block_of(&pred.tensor, frame, class);
            total += argmin_candidate(&block, cands).1;
        }
    }
    total / (frames * classes) as f64
}

/// Graph version for training: selects the minimizing candidates from the
/// forward values, then emits the MSE against them, which carries the
/// subgradient of the chosen assignment.
pub fn adpit_mse_graph<F: Real>(
    g: &mut Graph<F>,
    pred: Var,
    targets: &AdpitTargets,
) -> Var {
    let shape = g.value(pred).shape().to_vec();
    let pred_f64 = Array4::from_shape_vec(
        (shape[0], shape[1], shape[2], shape[3]),
        g.value(pred).iter().map(|v| Real::to_f64(*v)).collect(),
    )
    .unwrap();
    let selected = targets.select(&pred_f64);
    let target_leaf = g.leaf(selected.mapv(|v| F::from_f64(v)).into_dyn(), false);
    let diff = g.sub(pred, target_leaf);
    let sq = g.mul(diff, diff);
    g.mean_all(sq)
}
