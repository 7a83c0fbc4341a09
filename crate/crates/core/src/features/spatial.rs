//! Eigenvector-based spatial direction channels and the high-frequency
//! compression used to shrink the linear frequency axis.

use ndarray::{Array3, ArrayView3};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// Energy gate applied to the W channel, in dB above the per-frequency
/// median power.
pub const DEFAULT_GATE_DB: f64 = 5.0;

const POWER_ITERS: usize = 50;
const POWER_TOL: f64 = 1e-12;

/// Direction components per time-frequency bin, shape `[3, T, F]` ordered
/// (y, z, x).
///
/// For every bin that passes the energy gate, the 4x4 spatial covariance is
/// averaged over a 3x3 (frames x bins) neighborhood; the real parts of the
/// principal eigenvector's directional components are emitted after phase
/// normalization against the W component. Gated-out and degenerate bins are
/// zero.
pub fn spatial_eigenvector(spec: &ArrayView3<Complex64>, gate_db: f64) -> Array3<f64> {
    let (ch, frames, bins) = spec.dim();
    assert_eq!(ch, 4, "spatial covariance expects 4 FOA channels");
    let mut out = Array3::zeros((3, frames, bins));

    // per-frequency median W power defines the gate threshold
    let gate_lin = 10f64.powf(gate_db / 10.0);
    let mut thresholds = vec![0.0f64; bins];
    let mut col = vec![0.0f64; frames];
    for f in 0..bins {
        for t in 0..frames {
            col[t] = spec[[0, t, f]].norm_sqr();
        }
        col.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        thresholds[f] = col[frames / 2] * gate_lin;
    }

    for t in 0..frames {
        for f in 0..bins {
            let w_pow = spec[[0, t, f]].norm_sqr();
            if w_pow <= 0.0 || w_pow < thresholds[f] {
                continue;
            }
            // covariance over the clipped 3x3 neighborhood
            let mut cov = [[Complex64::default(); 4]; 4];
            let mut count = 0.0;
            for dt in -1isize..=1 {
                for df in -1isize..=1 {
                    let (tt, ff) = (t as isize + dt, f as isize + df);
                    if tt < 0 || ff < 0 || tt >= frames as isize || ff >= bins as isize {
                        continue;
                    }
                    let s = [
                        spec[[0, tt as usize, ff as usize]],
                        spec[[1, tt as usize, ff as usize]],
                        spec[[2, tt as usize, ff as usize]],
                        spec[[3, tt as usize, ff as usize]],
                    ];
                    for i in 0..4 {
                        for j in 0..4 {
                            cov[i][j] += s[i] * s[j].conj();
                        }
                    }
                    count += 1.0;
                }
            }
            for row in cov.iter_mut() {
                for v in row.iter_mut() {
                    *v /= count;
                }
            }
            if let Some(v) = principal_eigenvector(&cov) {
                // (y, z, x) = components 1..4 of the ACN-ordered eigenvector
                out[[0, t, f]] = v[1].re;
                out[[1, t, f]] = v[2].re;
                out[[2, t, f]] = v[3].re;
            }
        }
    }
    out
}

/// Principal eigenvector of a Hermitian PSD 4x4 matrix via power iteration,
/// phase-normalized so component 0 is real and non-negative. Returns `None`
/// for degenerate input.
fn principal_eigenvector(cov: &[[Complex64; 4]; 4]) -> Option<[Complex64; 4]> {
    // deterministic start: the column with the largest norm
    let mut best_col = 0;
    let mut best_norm = 0.0;
    for j in 0..4 {
        let n: f64 = (0..4).map(|i| cov[i][j].norm_sqr()).sum();
        if n > best_norm {
            best_norm = n;
            best_col = j;
        }
    }
    if best_norm <= 0.0 {
        return None;
    }
    let mut v = [cov[0][best_col], cov[1][best_col], cov[2][best_col], cov[3][best_col]];
    normalize(&mut v)?;
    for _ in 0..POWER_ITERS {
        let mut next = [Complex64::default(); 4];
        for i in 0..4 {
            for j in 0..4 {
                next[i] += cov[i][j] * v[j];
            }
        }
        if normalize(&mut next).is_none() {
            return None;
        }
        // eigenvectors are phase-ambiguous; compare against the closer sign
        let diff: f64 = (0..4).map(|i| (next[i] - v[i]).norm_sqr()).sum();
        let diff_neg: f64 = (0..4).map(|i| (next[i] + v[i]).norm_sqr()).sum();
        v = next;
        if diff.min(diff_neg) < POWER_TOL * POWER_TOL {
            break;
        }
    }
    let w_mag = v[0].norm();
    if w_mag < 1e-12 {
        return None;
    }
    let phase = v[0].conj() / w_mag;
    for x in v.iter_mut() {
        *x *= phase;
    }
    Some(v)
}

fn normalize(v: &mut [Complex64; 4]) -> Option<()> {
    let norm: f64 = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return None;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Some(())
}

/// Number of bins kept untouched below the 9 kHz cutoff.
pub const LOW_BINS: usize = 192;
/// Group size for averaging the bins above the cutoff.
pub const HIGH_GROUP: usize = 8;
/// Compressed frequency length: 192 pass-through + 8 averaged groups.
pub const COMPRESSED_BINS: usize = LOW_BINS + HIGH_GROUP;

/// Compresses 257 linear bins to 200: bins 0..192 copied, bins 192..256
/// averaged in 8 groups of 8, the Nyquist bin dropped.
pub fn compress_high_freq(x: &ArrayView3<f64>) -> Result<Array3<f64>> {
    let (ch, frames, bins) = x.dim();
    if bins != 257 {
        return Err(Error::Precondition(format!("expected 257 bins, got {bins}")));
    }
    let mut out = Array3::zeros((ch, frames, COMPRESSED_BINS));
    for c in 0..ch {
        for t in 0..frames {
            for f in 0..LOW_BINS {
                out[[c, t, f]] = x[[c, t, f]];
            }
            for g in 0..HIGH_GROUP {
                let start = LOW_BINS + g * HIGH_GROUP;
                let sum: f64 = (start..start + HIGH_GROUP).map(|f| x[[c, t, f]]).sum();
                out[[c, t, LOW_BINS + g]] = sum / HIGH_GROUP as f64;
            }
        }
    }
    Ok(out)
}
