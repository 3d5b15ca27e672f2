//! FFT helpers shared by the PHY modules.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Unnormalized forward DFT in place.
pub fn fft(buf: &mut [Complex64]) {
    if buf.is_empty() {
        return;
    }
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()));
    plan.process(buf);
}

/// Unnormalized inverse DFT in place (no 1/N factor).
pub fn ifft(buf: &mut [Complex64]) {
    if buf.is_empty() {
        return;
    }
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(buf.len()));
    plan.process(buf);
}

/// Maps a signed tone index onto a DFT bin of an `n`-point transform.
pub fn bin(tone: i32, n: usize) -> usize {
    tone.rem_euclid(n as i32) as usize
}

/// Signed frequency index of DFT bin `k` (`k >= n/2` maps to negative).
pub fn signed_index(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Circular delay by `delay_samples` (fractional allowed) via a DFT phase ramp.
pub fn circular_delay(samples: &[Complex64], delay_samples: f64) -> Vec<Complex64> {
    let n = samples.len();
    let mut buf = samples.to_vec();
    if n == 0 || delay_samples == 0.0 {
        return buf;
    }
    fft(&mut buf);
    let scale = 1.0 / n as f64;
    for (k, v) in buf.iter_mut().enumerate() {
        let f = signed_index(k, n);
        let ph = -2.0 * std::f64::consts::PI * f * delay_samples / n as f64;
        *v *= Complex64::from_polar(scale, ph);
    }
    ifft(&mut buf);
    buf
}

pub fn mean_power(samples: &[Complex64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_delay_is_a_rotation() {
        let x: Vec<Complex64> = (0..16).map(|i| Complex64::new(i as f64, -(i as f64))).collect();
        let y = circular_delay(&x, 3.0);
        for i in 0..16 {
            assert!((y[(i + 3) % 16] - x[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn bins_wrap() {
        assert_eq!(bin(-1, 256), 255);
        assert_eq!(bin(122, 256), 122);
        assert_eq!(signed_index(255, 256), -1.0);
        assert_eq!(signed_index(127, 256), 127.0);
    }
}
