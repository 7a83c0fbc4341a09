//! Transformer-style learning rate schedule: linear warmup to the peak,
//! inverse square root decay afterwards.

/// `peak_lr * min(step / warmup, sqrt(warmup / step))`, peaking exactly at
/// `step == warmup`. `step` is 1-based.
pub fn lr_schedule(step: usize, peak_lr: f64, warmup: usize) -> f64 {
    assert!(step >= 1, "schedule step is 1-based");
    assert!(warmup >= 1, "warmup must be at least 1 step");
    let s = step as f64;
    let w = warmup as f64;
    peak_lr * (s / w).min((w / s).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_at_warmup() {
        assert_eq!(lr_schedule(100, 5e-4, 100), 5e-4);
    }

    #[test]
    fn quarter_values() {
        assert!((lr_schedule(400, 5e-4, 100) - 2.5e-4).abs() < 1e-18);
        assert!((lr_schedule(50, 5e-4, 100) - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn monotone_and_continuous_at_peak() {
        let mut prev = 0.0;
        for step in 1..=100 {
            let lr = lr_schedule(step, 5e-4, 100);
            assert!(lr > prev, "warmup must strictly increase");
            prev = lr;
        }
        for step in 101..=300 {
            let lr = lr_schedule(step, 5e-4, 100);
            assert!(lr < prev, "decay must strictly decrease");
            prev = lr;
        }
        let left = lr_schedule(100, 5e-4, 100);
        let right = lr_schedule(101, 5e-4, 100);
        assert!((left - right) / left < 0.01);
    }
}
