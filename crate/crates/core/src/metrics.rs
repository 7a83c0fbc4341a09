//! Joint detection / localization / distance evaluation.
//!
//! Predictions and references are matched per (frame, class) by minimum-cost
//! bipartite assignment on great-circle angular error. From the matches we
//! compute the location-dependent F1 score (20 degree threshold), the
//! class-dependent localization error, the class-dependent relative distance
//! error, and their aggregate.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::codec::group_by_frame_class;
use crate::error::{Error, Result};
use crate::types::{doa_vector, Event, EventList};

/// Great-circle distance between two directions, in degrees within [0, 180].
pub fn angular_error(doa1: (f64, f64), doa2: (f64, f64)) -> f64 {
    let a = doa_vector(doa1.0, doa1.1);
    let b = doa_vector(doa2.0, doa2.1);
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let cross_norm = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    // atan2 form stays exact for identical directions and accurate for
    // near-parallel ones, unlike acos of the clamped dot product
    cross_norm.atan2(dot).to_degrees()
}

/// One matched prediction/reference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub frame: usize,
    pub class_idx: usize,
    pub pred: Event,
    pub reference: Event,
    pub angular_error_deg: f64,
    pub rel_dist_error: f64,
}

/// Assignment result: matched pairs plus per-class totals of predictions
/// and references (unmatched events are implied by the counts).
#[derive(Debug, Clone, Default)]
pub struct Matching {
    pub pairs: Vec<MatchedPair>,
    pub pred_counts: BTreeMap<usize, usize>,
    pub ref_counts: BTreeMap<usize, usize>,
}

/// Minimum-cost assignment of rows to columns (rows <= cols required).
/// Returns the column matched to each row.
pub fn assign_min_cost(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let m = cost.ncols();
    assert!(n <= m, "assignment requires nrows <= ncols");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Matches predictions to references per (frame, class) by minimum total
/// angular error. Every event on the smaller side of a group gets matched;
/// the remainder are false positives / false negatives.
pub fn match_events(preds: &EventList, refs: &EventList) -> Matching {
    let pred_groups = group_by_frame_class(preds);
    let ref_groups = group_by_frame_class(refs);

    let mut matching = Matching::default();
    for e in &preds.events {
        *matching.pred_counts.entry(e.class_idx).or_insert(0) += 1;
    }
    for e in &refs.events {
        *matching.ref_counts.entry(e.class_idx).or_insert(0) += 1;
    }

    for (key, pg) in &pred_groups {
        let Some(rg) = ref_groups.get(key) else { continue };
        let (rows, cols, transposed) = if pg.len() <= rg.len() {
            (pg, rg, false)
        } else {
            (rg, pg, true)
        };
        let mut cost = Array2::zeros((rows.len(), cols.len()));
        for (i, a) in rows.iter().enumerate() {
            for (j, b) in cols.iter().enumerate() {
                cost[[i, j]] = angular_error(
                    (a.azimuth_deg, a.elevation_deg),
                    (b.azimuth_deg, b.elevation_deg),
                );
            }
        }
        for (i, j) in assign_min_cost(&cost).into_iter().enumerate() {
            let (p, r) = if transposed { (&cols[j], &rows[i]) } else { (&rows[i], &cols[j]) };
            matching.pairs.push(MatchedPair {
                frame: key.0,
                class_idx: key.1,
                pred: *p,
                reference: *r,
                angular_error_deg: cost[[i, j]],
                rel_dist_error: (p.distance_m - r.distance_m).abs() / r.distance_m,
            });
        }
    }
    matching
}

/// Per-class breakdown of the evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_idx: usize,
    pub f1: f64,
    pub le_deg: f64,
    pub rde: f64,
    pub tp: usize,
    pub num_preds: usize,
    pub num_refs: usize,
    pub num_matched: usize,
}

/// Aggregated evaluation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelddeMetrics {
    pub f20: f64,
    pub le_cd_deg: f64,
    pub rde_cd: f64,
    pub seldde_error: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Aggregate error: mean of (1 - F), LE/180, and RDE.
pub fn seldde_error(f20: f64, le_cd_deg: f64, rde_cd: f64) -> f64 {
    ((1.0 - f20) + le_cd_deg / 180.0 + rde_cd) / 3.0
}

/// Angular threshold (degrees) for a detection to count as a true positive.
pub const DEFAULT_ANG_THRESHOLD_DEG: f64 = 20.0;

/// Relative-distance threshold for a true positive; `f64::INFINITY` disables it.
pub const DEFAULT_RDE_THRESHOLD: f64 = 1.0;

/// Computes F20, class-dependent localization error, class-dependent relative
/// distance error, and the aggregate, macro-averaged over classes present in
/// either list. Classes without a single match contribute the worst-case
/// 180 degrees / 1.0.
pub fn compute_metrics(
    preds: &EventList,
    refs: &EventList,
    num_classes: usize,
    ang_thresh_deg: f64,
    rde_thresh: f64,
) -> Result<SelddeMetrics> {
    if let Some(e) = refs.events.iter().find(|e| !(e.distance_m > 0.0)) {
        return Err(Error::Validation(format!(
            "reference distance {} must be > 0",
            e.distance_m
        )));
    }
    if let Some(e) = refs
        .events
        .iter()
        .chain(preds.events.iter())
        .find(|e| e.class_idx >= num_classes)
    {
        return Err(Error::Validation(format!(
            "class {} outside the {} evaluated classes",
            e.class_idx, num_classes
        )));
    }
    let matching = match_events(preds, refs);

    let mut per_class = Vec::new();
    for class_idx in 0..num_classes {
        let num_preds = matching.pred_counts.get(&class_idx).copied().unwrap_or(0);
        let num_refs = matching.ref_counts.get(&class_idx).copied().unwrap_or(0);
        if num_preds + num_refs == 0 {
            continue;
        }
        let pairs: Vec<&MatchedPair> =
            matching.pairs.iter().filter(|p| p.class_idx == class_idx).collect();
        let tp = pairs
            .iter()
            .filter(|p| p.angular_error_deg <= ang_thresh_deg && p.rel_dist_error <= rde_thresh)
            .count();
        let f1 = if num_preds + num_refs > 0 {
            2.0 * tp as f64 / (num_preds + num_refs) as f64
        } else {
            0.0
        };
        let (le_deg, rde) = if pairs.is_empty() {
            (180.0, 1.0)
        } else {
            let n = pairs.len() as f64;
            (
                pairs.iter().map(|p| p.angular_error_deg).sum::<f64>() / n,
                pairs.iter().map(|p| p.rel_dist_error).sum::<f64>() / n,
            )
        };
        per_class.push(ClassMetrics {
            class_idx,
            f1,
            le_deg,
            rde,
            tp,
            num_preds,
            num_refs,
            num_matched: pairs.len(),
        });
    }

    let (f20, le_cd_deg, rde_cd) = if per_class.is_empty() {
        (1.0, 0.0, 0.0)
    } else {
        let n = per_class.len() as f64;
        (
            per_class.iter().map(|c| c.f1).sum::<f64>() / n,
            per_class.iter().map(|c| c.le_deg).sum::<f64>() / n,
            per_class.iter().map(|c| c.rde).sum::<f64>() / n,
        )
    };
    Ok(SelddeMetrics {
        f20,
        le_cd_deg,
        rde_cd,
        seldde_error: seldde_error(f20, le_cd_deg, rde_cd),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::EventList;

    fn ev(frame: usize, class: usize, src: usize, az: f64, el: f64, d: f64) -> Event {
        Event {
            frame,
            class_idx: class,
            source_idx: src,
            azimuth_deg: az,
            elevation_deg: el,
            distance_m: d,
        }
    }

    #[test]
    fn angular_error_basics() {
        assert!(angular_error((30.0, 10.0), (30.0, 10.0)).abs() < 1e-12);
        assert!((angular_error((0.0, 0.0), (90.0, 0.0)) - 90.0).abs() < 1e-9);
        assert!((angular_error((45.0, 45.0), (-135.0, -45.0)) - 180.0).abs() < 1e-9);
    }

    #[test]
    fn angular_error_symmetric_and_triangle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = |rng: &mut rand_chacha::ChaCha8Rng| {
                (rng.random_range(-180.0..180.0), rng.random_range(-90.0..90.0))
            };
            let (a, b, c) = (p(&mut rng), p(&mut rng), p(&mut rng));
            let ab = angular_error(a, b);
            assert!((ab - angular_error(b, a)).abs() < 1e-9);
            assert!(ab >= 0.0 && ab <= 180.0);
            assert!(ab <= angular_error(a, c) + angular_error(c, b) + 1e-9);
        }
    }

    #[test]
    fn matching_prefers_closer_pred() {
        let refs = EventList::new(vec![ev(0, 1, 0, 0.0, 0.0, 2.0)], 1);
        let preds = EventList::new(
            vec![ev(0, 1, 0, 5.0, 0.0, 2.0), ev(0, 1, 1, 30.0, 0.0, 2.0)],
            1,
        );
        let m = match_events(&preds, &refs);
        assert_eq!(m.pairs.len(), 1);
        assert!((m.pairs[0].angular_error_deg - 5.0).abs() < 1e-9);
    }

    #[test]
    fn matching_minimizes_total_cost() {
        // identity pairing costs 10 + 20 = 30; the swap costs 150 + 180 = 330
        let refs = EventList::new(
            vec![ev(0, 0, 0, 0.0, 0.0, 1.0), ev(0, 0, 1, 160.0, 0.0, 1.0)],
            1,
        );
        let preds = EventList::new(
            vec![ev(0, 0, 0, 10.0, 0.0, 1.0), ev(0, 0, 1, -180.0, 0.0, 1.0)],
            1,
        );
        let m = match_events(&preds, &refs);
        let total: f64 = m.pairs.iter().map(|p| p.angular_error_deg).sum();
        // exhaustive 2x2: pairing (p0-r0, p1-r1) costs 10 + 20; the swap costs 170 + 20
        assert!((total - 30.0).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn assignment_matches_exhaustive_on_random_squares() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.random_range(1..=3usize);
            let cost = Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..180.0));
            let got = assign_min_cost(&cost);
            let got_total: f64 = got.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
            let mut best = f64::INFINITY;
            let mut perm: Vec<usize> = (0..n).collect();
            permute_all(&mut perm, 0, &mut |p| {
                let t: f64 = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
                if t < best {
                    best = t;
                }
            });
            assert!((got_total - best).abs() < 1e-9);
        }
    }

    fn permute_all(perm: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == perm.len() {
            f(perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute_all(perm, k + 1, f);
            perm.swap(k, i);
        }
    }

    #[test]
    fn perfect_predictions() {
        let refs = EventList::new(
            vec![ev(0, 0, 0, 10.0, 5.0, 2.0), ev(1, 2, 0, -40.0, 0.0, 1.0)],
            2,
        );
        let m = compute_metrics(&refs.clone(), &refs, 13, 20.0, 1.0).unwrap();
        assert_eq!(m.f20, 1.0);
        assert_eq!(m.le_cd_deg, 0.0);
        assert_eq!(m.rde_cd, 0.0);
        assert_eq!(m.seldde_error, 0.0);
    }

    #[test]
    fn single_pair_fixture() {
        let refs = EventList::new(vec![ev(0, 0, 0, 0.0, 0.0, 2.0)], 1);
        let preds = EventList::new(vec![ev(0, 0, 0, 10.0, 0.0, 3.0)], 1);
        let m = compute_metrics(&preds, &refs, 13, 20.0, 1.0).unwrap();
        assert!((m.f20 - 1.0).abs() < 1e-12);
        assert!((m.le_cd_deg - 10.0).abs() < 1e-9);
        assert!((m.rde_cd - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_predictions_worst_case() {
        let refs = EventList::new(vec![ev(0, 3, 0, 0.0, 0.0, 2.0)], 1);
        let m = compute_metrics(&EventList::empty(1), &refs, 13, 20.0, 1.0).unwrap();
        assert_eq!(m.f20, 0.0);
        assert_eq!(m.le_cd_deg, 180.0);
        assert_eq!(m.rde_cd, 1.0);
    }

    #[test]
    fn rde_invariant_under_common_scaling() {
        let refs = EventList::new(
            vec![ev(0, 0, 0, 0.0, 0.0, 2.0), ev(1, 1, 0, 50.0, 10.0, 4.0)],
            2,
        );
        let preds = EventList::new(
            vec![ev(0, 0, 0, 3.0, 0.0, 2.6), ev(1, 1, 0, 55.0, 10.0, 3.0)],
            2,
        );
        let base = compute_metrics(&preds, &refs, 13, 20.0, 1.0).unwrap();
        let scale = |l: &EventList, k: f64| {
            EventList::new(
                l.events.iter().map(|e| Event { distance_m: e.distance_m * k, ..*e }).collect(),
                l.num_label_frames,
            )
        };
        let scaled =
            compute_metrics(&scale(&preds, 3.7), &scale(&refs, 3.7), 13, 20.0, 1.0).unwrap();
        assert!((base.rde_cd - scaled.rde_cd).abs() < 1e-12);
    }

    #[test]
    fn seldde_error_identity() {
        assert!((seldde_error(1.0, 0.0, 0.0)).abs() < 1e-15);
        assert!((seldde_error(0.131, 36.9, 0.330) - 0.468).abs() < 0.0015);
        assert!((seldde_error(0.339, 20.4, 0.304) - 0.359).abs() < 0.0015);
    }

    #[test]
    fn rejects_nonpositive_reference_distance() {
        let refs = EventList::new(vec![ev(0, 0, 0, 0.0, 0.0, 0.0)], 1);
        // construct directly since Event::validate is not called by EventList::new
        assert!(compute_metrics(&EventList::empty(1), &refs, 13, 20.0, 1.0).is_err());
    }

    #[test]
    fn rejects_out_of_range_class() {
        let refs = EventList::new(vec![ev(0, 13, 0, 0.0, 0.0, 1.0)], 1);
        assert!(compute_metrics(&EventList::empty(1), &refs, 13, 20.0, 1.0).is_err());
    }

    #[test]
    fn invariant_under_event_order_and_source_relabeling() {
        let refs = EventList::new(
            vec![
                ev(0, 1, 0, 10.0, 0.0, 2.0),
                ev(0, 1, 1, -60.0, 15.0, 1.0),
                ev(1, 0, 0, 100.0, -30.0, 3.0),
            ],
            2,
        );
        let preds = EventList::new(
            vec![
                ev(0, 1, 0, 14.0, 0.0, 2.4),
                ev(0, 1, 1, -66.0, 12.0, 1.2),
                ev(1, 0, 0, 140.0, -30.0, 2.0),
            ],
            2,
        );
        let base = compute_metrics(&preds, &refs, 13, 20.0, 1.0).unwrap();

        // scramble within-frame order and relabel source indices
        let scramble = |l: &EventList| {
            let mut events: Vec<Event> = l
                .events
                .iter()
                .map(|e| Event { source_idx: 7 - e.source_idx, ..*e })
                .collect();
            events.reverse();
            EventList::new(events, l.num_label_frames)
        };
        let alt = compute_metrics(&scramble(&preds), &scramble(&refs), 13, 20.0, 1.0).unwrap();
        assert_eq!(base.f20, alt.f20);
        assert_eq!(base.le_cd_deg, alt.le_cd_deg);
        assert_eq!(base.rde_cd, alt.rde_cd);
        assert_eq!(base.seldde_error, alt.seldde_error);
    }
}
