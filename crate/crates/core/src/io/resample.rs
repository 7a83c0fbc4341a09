//! Band-limited rational resampling (polyphase windowed-sinc).

/// Resamples `input` from `from_hz` to `to_hz` with a Kaiser-windowed sinc
/// polyphase filter. Returns the input unchanged when the rates agree.
pub fn resample(input: &[f64], from_hz: u32, to_hz: u32) -> Vec<f64> {
    assert!(from_hz > 0 && to_hz > 0);
    if from_hz == to_hz {
        return input.to_vec();
    }
    let g = gcd(from_hz, to_hz);
    let up = (to_hz / g) as usize; // L
    let down = (from_hz / g) as usize; // M

    // prototype lowpass at the upsampled rate from_hz * L
    const HALF_TAPS: usize = 16; // taps per phase = 2 * HALF_TAPS
    const KAISER_BETA: f64 = 9.0;
    let cutoff_hz = 0.45 * from_hz.min(to_hz) as f64;
    let fc_norm = cutoff_hz / (from_hz as f64 * up as f64);
    let n_taps = 2 * HALF_TAPS * up + 1;
    let delay = (n_taps - 1) / 2;
    let mut h = vec![0.0f64; n_taps];
    for (j, tap) in h.iter_mut().enumerate() {
        let t = j as f64 - delay as f64;
        let sinc = if t == 0.0 {
            1.0
        } else {
            let x = std::f64::consts::PI * 2.0 * fc_norm * t;
            x.sin() / x
        };
        let w = kaiser(t / delay as f64, KAISER_BETA);
        *tap = 2.0 * fc_norm * sinc * w * up as f64;
    }

    let out_len = (input.len() as u64 * up as u64).div_ceil(down as u64) as usize;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let q = m * down + delay;
        let phase = q % up;
        let mut acc = 0.0;
        let mut j = phase;
        let mut n = (q - phase) / up;
        loop {
            if j >= n_taps {
                break;
            }
            if let Some(x) = input.get(n) {
                acc += h[j] * x;
            }
            if n == 0 {
                break;
            }
            j += up;
            n -= 1;
        }
        out.push(acc);
    }
    out
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Kaiser window for |x| <= 1.
fn kaiser(x: f64, beta: f64) -> f64 {
    if x.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(beta * (1.0 - x * x).sqrt()) / bessel_i0(beta)
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x2 = (x / 2.0) * (x / 2.0);
    for k in 1..64 {
        term *= half_x2 / (k as f64 * k as f64);
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    sum
}
