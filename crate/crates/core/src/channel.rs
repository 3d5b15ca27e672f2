//! Propagation delay, AWGN and attacker superposition.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp;
use crate::signal::BasebandSignal;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("replica sample rate {replica} Hz differs from victim rate {victim} Hz")]
    RateMismatch { victim: f64, replica: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub delay_s: f64,
    /// `f64::INFINITY` disables noise.
    pub snr_db: f64,
    pub seed: u64,
}

impl ChannelSpec {
    pub fn noiseless(delay_s: f64) -> Self {
        Self {
            delay_s,
            snr_db: f64::INFINITY,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSpec {
    pub replica: BasebandSignal,
    /// Negative values advance the replica.
    pub offset_s: f64,
    pub cancel_legitimate_from: Option<usize>,
}

/// Mean power over samples that are not exactly zero, so zero-power GIs and
/// padding do not dilute the signal level.
pub fn support_power(samples: &[Complex64]) -> f64 {
    let (sum, n) = samples
        .iter()
        .filter(|s| s.norm_sqr() > 0.0)
        .fold((0.0, 0usize), |(a, n), s| (a + s.norm_sqr(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Noise variance giving `snr_db` against `signal_power`.
pub fn noise_variance(signal_power: f64, snr_db: f64) -> f64 {
    if snr_db.is_infinite() && snr_db > 0.0 {
        0.0
    } else {
        signal_power / 10f64.powf(snr_db / 10.0)
    }
}

/// Adds circular complex Gaussian noise of total variance `variance`.
pub fn add_noise(samples: &mut [Complex64], variance: f64, seed: u64) {
    if variance <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (variance / 2.0).sqrt();
    for s in samples.iter_mut() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *s += Complex64::new(re * sd, im * sd);
    }
}

/// Fractional circular delay of the whole signal. Callers rely on the
/// trailing packet extension as zero padding so nothing wraps.
pub fn delay(signal: &BasebandSignal, delay_s: f64) -> BasebandSignal {
    BasebandSignal::new(
        dsp::circular_delay(&signal.samples, delay_s * signal.sample_rate_hz),
        signal.sample_rate_hz,
    )
}

pub fn propagate(signal: &BasebandSignal, spec: &ChannelSpec) -> BasebandSignal {
    let p = support_power(&signal.samples);
    let mut out = delay(signal, spec.delay_s);
    add_noise(&mut out.samples, noise_variance(p, spec.snr_db), spec.seed);
    out
}

pub fn inject(victim: &BasebandSignal, inj: &InjectionSpec) -> Result<BasebandSignal, ChannelError> {
    if inj.replica.sample_rate_hz != victim.sample_rate_hz {
        return Err(ChannelError::RateMismatch {
            victim: victim.sample_rate_hz,
            replica: inj.replica.sample_rate_hz,
        });
    }
    let n = victim.len();
    let mut replica = inj.replica.samples.clone();
    replica.resize(n, Complex64::new(0.0, 0.0));
    let shifted = dsp::circular_delay(&replica, inj.offset_s * victim.sample_rate_hz);

    let mut out = victim.samples.clone();
    if let Some(from) = inj.cancel_legitimate_from {
        out.iter_mut().skip(from).for_each(|v| *v = Complex64::new(0.0, 0.0));
    }
    for (o, r) in out.iter_mut().zip(shifted) {
        *o += r;
    }
    Ok(BasebandSignal::new(out, victim.sample_rate_hz))
}
