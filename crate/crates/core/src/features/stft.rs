//! Hann-windowed short-time Fourier transform of FOA clips.

use ndarray::Array3;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FoaClip, NUM_CHANNELS};

/// STFT parameters. The defaults give 400 frames and 257 bins for a
/// 5 s clip at 24 kHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub cutoff_hz: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { sample_rate: 24_000, win_length: 512, hop: 300, n_fft: 512, cutoff_hz: 9000.0 }
    }
}

impl StftConfig {
    pub fn raw_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.n_fft as f64
    }

    pub fn num_frames(&self, n_samples: usize) -> usize {
        n_samples / self.hop
    }

    /// Periodic Hann window of `win_length`.
    pub fn window(&self) -> Vec<f64> {
        (0..self.win_length)
            .map(|n| {
                0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / self.win_length as f64).cos()
            })
            .collect()
    }
}

/// Per-channel complex spectrogram, shape `[4, frames, bins]`.
///
/// The clip is zero-padded by half a window on both ends so the frame count
/// is exactly `n_samples / hop`.
pub fn stft(clip: &FoaClip, cfg: &StftConfig) -> Result<Array3<Complex64>> {
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::Precondition(format!(
            "clip rate {} != stft rate {}",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    let n = clip.n_samples();
    if n == 0 || n % cfg.hop != 0 {
        return Err(Error::Precondition(format!(
            "clip length {n} not a multiple of hop {}",
            cfg.hop
        )));
    }
    let frames = cfg.num_frames(n);
    let bins = cfg.raw_bins();
    let window = cfg.window();
    let half = cfg.win_length / 2;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];

    let mut out = Array3::default((NUM_CHANNELS, frames, bins));
    let mut buf = vec![Complex64::default(); cfg.n_fft];
    for ch in 0..NUM_CHANNELS {
        let row = clip.samples.row(ch);
        for t in 0..frames {
            // frame t covers padded samples [t*hop, t*hop + win)
            for (i, b) in buf.iter_mut().enumerate().take(cfg.win_length) {
                let src = (t * cfg.hop + i) as isize - half as isize;
                let x = if src >= 0 && (src as usize) < n { row[src as usize] } else { 0.0 };
                *b = Complex64::new(x * window[i], 0.0);
            }
            for b in buf.iter_mut().skip(cfg.win_length) {
                *b = Complex64::default();
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (f, v) in buf.iter().take(bins).enumerate() {
                out[[ch, t, f]] = *v;
            }
        }
    }
    Ok(out)
}
