//! Time-of-arrival estimation, RTT distance and EVM.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp;
use crate::keyschedule::QamSymbolGrid;
use crate::signal::BasebandSignal;
use crate::waveform::{demodulate_ltf, secure_tones, FftWindow, NdpConfig, SubcarrierMap, TrainingTones, WaveformError};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
// c is even, so c/2 in m/s is an integer and distances in pm are exact
const HALF_C: i128 = 149_896_229;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("empty signal or template")]
    EmptySignal,
    #[error("covariance is singular or not finite")]
    SingularCovariance,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
}

/// FTM timestamps in integer picoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FtmTimestamps {
    pub t1: i64,
    pub t2: i64,
    pub t3: i64,
    pub t4: i64,
}

impl FtmTimestamps {
    /// Quantizes second-valued timestamps to 1 ps.
    pub fn from_seconds(t1: f64, t2: f64, t3: f64, t4: f64) -> Self {
        let q = |t: f64| (t * 1e12).round() as i64;
        Self {
            t1: q(t1),
            t2: q(t2),
            t3: q(t3),
            t4: q(t4),
        }
    }

    pub fn rtt_ps(&self) -> i128 {
        (self.t4 as i128 - self.t1 as i128) - (self.t3 as i128 - self.t2 as i128)
    }
}

/// One-way distance in picometres, exact.
pub fn distance_pm(ts: &FtmTimestamps) -> i128 {
    HALF_C * ts.rtt_ps()
}

/// `(c/2) * ((t4 - t1) - (t3 - t2))` in metres.
pub fn distance_from_timestamps(ts: &FtmTimestamps) -> f64 {
    distance_pm(ts) as f64 / 1e12
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToaMethod {
    Correlation,
    Music,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToaEstimate {
    pub toa_s: f64,
    pub method: ToaMethod,
    /// `(delay_ns, power_db)` relative to the global maximum.
    pub pseudospectrum: Option<Vec<(f64, f64)>>,
    /// Peak height over the mean of the searched curve, in dB.
    pub peak_sharpness_db: f64,
    pub model_order: Option<usize>,
}

pub const DEFAULT_CORRELATION_UPSAMPLE: usize = 8;

/// Cross-correlation ToA of `template` inside `rx`, interpolated by
/// zero-padding the correlation spectrum `upsample` times.
pub fn toa_correlation(rx: &BasebandSignal, template: &BasebandSignal) -> Result<ToaEstimate, EstimationError> {
    toa_correlation_upsampled(rx, template, DEFAULT_CORRELATION_UPSAMPLE)
}

pub fn toa_correlation_upsampled(
    rx: &BasebandSignal,
    template: &BasebandSignal,
    upsample: usize,
) -> Result<ToaEstimate, EstimationError> {
    if rx.is_empty() || template.is_empty() {
        return Err(EstimationError::EmptySignal);
    }
    let up = upsample.max(1);
    let n = (rx.len() + template.len()).next_power_of_two();
    let pad = |s: &[Complex64]| {
        let mut v = s.to_vec();
        v.resize(n, Complex64::new(0.0, 0.0));
        dsp::fft(&mut v);
        v
    };
    let r = pad(&rx.samples);
    let t = pad(&template.samples);

    let m = n * up;
    let mut spec = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        let v = r[k] * t[k].conj();
        let dst = if k <= n / 2 { k } else { m - (n - k) };
        spec[dst] = v;
    }
    dsp::ifft(&mut spec);
    let mag: Vec<f64> = spec.iter().map(|v| v.norm()).collect();

    let j = (0..m).max_by(|&a, &b| mag[a].total_cmp(&mag[b])).unwrap_or(0);
    let (a, b, c) = (mag[(j + m - 1) % m], mag[j], mag[(j + 1) % m]);
    let denom = a - 2.0 * b + c;
    let frac = if denom.abs() > 0.0 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let lag = if j < m / 2 { j as f64 } else { j as f64 - m as f64 };
    let mean = mag.iter().sum::<f64>() / m as f64;
    Ok(ToaEstimate {
        toa_s: (lag + frac) / up as f64 / rx.sample_rate_hz,
        method: ToaMethod::Correlation,
        pseudospectrum: None,
        peak_sharpness_db: 20.0 * (b / mean.max(f64::MIN_POSITIVE)).log10(),
        model_order: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MusicConfig {
    /// Smoothing subarray length; `None` uses half the active tone count.
    pub subarray_len: Option<usize>,
    pub grid_max_ns: f64,
    pub grid_step_ns: f64,
    /// Peaks below this fraction of the global maximum are ignored.
    pub peak_threshold: f64,
    pub keep_spectrum: bool,
}

impl Default for MusicConfig {
    fn default() -> Self {
        Self {
            subarray_len: None,
            grid_max_ns: 500.0,
            grid_step_ns: 0.05,
            peak_threshold: 0.1,
            keep_spectrum: false,
        }
    }
}

/// Per-symbol frequency response on the active tones (`rx / tx`).
pub fn channel_response(
    rx: &BasebandSignal,
    tx: &TrainingTones,
    cfg: &NdpConfig,
    map: &SubcarrierMap,
    window: FftWindow,
) -> Result<Vec<Vec<Complex64>>, EstimationError> {
    let tones = demodulate_ltf(rx, cfg, map, window)?;
    if tones.len() != tx.n_ltf() {
        return Err(EstimationError::ShapeMismatch(format!(
            "{} received symbols, {} known",
            tones.len(),
            tx.n_ltf()
        )));
    }
    Ok(tones
        .iter()
        .zip(&tx.symbols)
        .map(|(r, t)| r.iter().zip(t).map(|(a, b)| a / b).collect())
        .collect())
}

/// Places active-tone values onto a uniform grid with the active-tone
/// spacing, filling gaps (DC) by cubic Lagrange interpolation from the two
/// nearest known neighbours on each side.
pub fn uniform_response(active: &[i32], values: &[Complex64]) -> Vec<Complex64> {
    let step = 2;
    let (lo, hi) = (active[0], active[active.len() - 1]);
    let n = ((hi - lo) / step + 1) as usize;
    let mut known: Vec<Option<Complex64>> = vec![None; n];
    for (&k, &v) in active.iter().zip(values) {
        known[((k - lo) / step) as usize] = Some(v);
    }
    let present: Vec<usize> = (0..n).filter(|&i| known[i].is_some()).collect();
    (0..n)
        .map(|i| {
            if let Some(v) = known[i] {
                return v;
            }
            let split = present.partition_point(|&p| p < i);
            let from = split.saturating_sub(2).min(present.len().saturating_sub(4));
            let nodes = &present[from..(from + 4).min(present.len())];
            let x = i as f64;
            nodes
                .iter()
                .map(|&j| {
                    let w: f64 = nodes
                        .iter()
                        .filter(|&&m| m != j)
                        .map(|&m| (x - m as f64) / (j as f64 - m as f64))
                        .product();
                    known[j].unwrap() * w
                })
                .sum()
        })
        .collect()
}

/// Forward-backward spatially smoothed covariance over all symbols.
fn smoothed_covariance(rows: &[Vec<Complex64>], l: usize) -> Result<DMatrix<Complex64>, EstimationError> {
    let n = rows.first().map_or(0, |r| r.len());
    if l < 2 || l > n {
        return Err(EstimationError::ShapeMismatch(format!(
            "subarray length {l} for {n} tones"
        )));
    }
    let mut r = DMatrix::<Complex64>::zeros(l, l);
    let mut count = 0.0;
    for row in rows {
        for s in 0..=(n - l) {
            let v = &row[s..s + l];
            for i in 0..l {
                for j in 0..l {
                    // forward term plus exchange-conjugated backward term
                    r[(i, j)] += v[i] * v[j].conj() + v[l - 1 - i].conj() * v[l - 1 - j];
                }
            }
            count += 2.0;
        }
    }
    r /= Complex64::new(count, 0.0);
    let trace: f64 = (0..l).map(|i| r[(i, i)].re).sum();
    if !(trace.is_finite() && trace > 0.0) || r.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(EstimationError::SingularCovariance);
    }
    Ok(r)
}

/// Signal-subspace dimension from the largest log-eigenvalue gap among the
/// leading half of the spectrum. `eig` is sorted descending.
fn model_order(eig: &[f64]) -> usize {
    let floor = eig[0] * 1e-14;
    let logs: Vec<f64> = eig.iter().map(|&v| v.max(floor).ln()).collect();
    let span = (eig.len() / 2).max(1);
    (0..span)
        .max_by(|&a, &b| (logs[a] - logs[a + 1]).total_cmp(&(logs[b] - logs[b + 1])))
        .map_or(1, |i| i + 1)
}

/// MUSIC delay search on uniformly spaced frequency responses.
///
/// `rows` are per-symbol responses on a uniform grid with `spacing_hz`
/// between entries.
pub fn music_delay(rows: &[Vec<Complex64>], spacing_hz: f64, mcfg: &MusicConfig) -> Result<ToaEstimate, EstimationError> {
    let n = rows.first().map_or(0, |r| r.len());
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(EstimationError::ShapeMismatch("ragged or empty response rows".into()));
    }
    let l = mcfg.subarray_len.unwrap_or((n as f64 / 2.0).round() as usize);
    let cov = smoothed_covariance(rows, l)?;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    if !(vals[0].is_finite() && vals[0] > 0.0) {
        return Err(EstimationError::SingularCovariance);
    }
    let d = model_order(&vals);
    let subspace: Vec<Vec<Complex64>> = order[..d]
        .iter()
        .map(|&c| eig.eigenvectors.column(c).iter().map(|v| v.conj()).collect())
        .collect();

    let steps = (mcfg.grid_max_ns / mcfg.grid_step_ns).round() as usize + 1;
    let lf = l as f64;
    let denom: Vec<f64> = (0..steps)
        .map(|g| {
            let tau = g as f64 * mcfg.grid_step_ns * 1e-9;
            let rot = Complex64::from_polar(1.0, -2.0 * PI * spacing_hz * tau);
            let mut proj = 0.0;
            for e in &subspace {
                let mut a = Complex64::new(1.0, 0.0);
                let mut acc = Complex64::new(0.0, 0.0);
                for v in e {
                    acc += v * a;
                    a *= rot;
                }
                proj += acc.norm_sqr();
            }
            (lf - proj).max(lf * 1e-15)
        })
        .collect();
    let p: Vec<f64> = denom.iter().map(|d| 1.0 / d).collect();
    let pmax = p.iter().cloned().fold(0.0, f64::max);
    let thresh = mcfg.peak_threshold * pmax;
    let is_peak = |i: usize| {
        let left = i == 0 || p[i] >= p[i - 1];
        let right = i + 1 == steps || p[i] >= p[i + 1];
        left && right && p[i] >= thresh
    };
    let i = (0..steps).find(|&i| is_peak(i)).unwrap_or(0);
    let frac = if i > 0 && i + 1 < steps {
        let (a, b, c) = (denom[i - 1], denom[i], denom[i + 1]);
        let den = a - 2.0 * b + c;
        if den.abs() > 0.0 {
            (0.5 * (a - c) / den).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    } else {
        0.0
    };
    let mean = p.iter().sum::<f64>() / steps as f64;
    let spectrum = mcfg.keep_spectrum.then(|| {
        p.iter()
            .enumerate()
            .map(|(g, v)| (g as f64 * mcfg.grid_step_ns, 10.0 * (v / pmax).log10()))
            .collect()
    });
    Ok(ToaEstimate {
        toa_s: (i as f64 + frac) * mcfg.grid_step_ns * 1e-9,
        method: ToaMethod::Music,
        pseudospectrum: spectrum,
        peak_sharpness_db: 10.0 * (p[i] / mean).log10(),
        model_order: Some(d),
    })
}

/// MUSIC ToA for a receiver that knows the transmitted tones.
pub fn toa_music_tones(
    rx: &BasebandSignal,
    tx: &TrainingTones,
    cfg: &NdpConfig,
    map: &SubcarrierMap,
    mcfg: &MusicConfig,
) -> Result<ToaEstimate, EstimationError> {
    let cfr = channel_response(rx, tx, cfg, map, FftWindow::Extended)?;
    if cfr.iter().flatten().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(EstimationError::SingularCovariance);
    }
    let rows: Vec<Vec<Complex64>> = cfr.iter().map(|r| uniform_response(&map.active, r)).collect();
    music_delay(&rows, 2.0 * cfg.subcarrier_spacing_hz(), mcfg)
}

/// MUSIC ToA on a secure NDP whose grid the receiver derived itself.
pub fn toa_music(
    rx: &BasebandSignal,
    known: &QamSymbolGrid,
    cfg: &NdpConfig,
    map: &SubcarrierMap,
    mcfg: &MusicConfig,
) -> Result<ToaEstimate, EstimationError> {
    toa_music_tones(rx, &secure_tones(known), cfg, map, mcfg)
}

/// `delay_ns,power_db` rows of a kept pseudospectrum.
pub fn pseudospectrum_csv(est: &ToaEstimate) -> Option<String> {
    let spec = est.pseudospectrum.as_ref()?;
    let mut out = String::from("delay_ns,power_db\n");
    for (d, p) in spec {
        let _ = writeln!(out, "{d:.3},{p:.6}");
    }
    Some(out)
}

fn check_shapes(rx: &[Vec<Complex64>], tx: &[Vec<Complex64>]) -> Result<(), EstimationError> {
    if rx.len() != tx.len() || rx.iter().zip(tx).any(|(a, b)| a.len() != b.len()) {
        return Err(EstimationError::ShapeMismatch(
            "rx and tx tone grids differ in shape".into(),
        ));
    }
    Ok(())
}

/// RMS error vector over RMS reference magnitude, in percent.
pub fn evm_rms(rx: &[Vec<Complex64>], tx: &[Vec<Complex64>]) -> Result<f64, EstimationError> {
    check_shapes(rx, tx)?;
    let err: f64 = rx.iter().flatten().zip(tx.iter().flatten()).map(|(a, b)| (a - b).norm_sqr()).sum();
    let refp: f64 = tx.iter().flatten().map(|b| b.norm_sqr()).sum();
    if refp == 0.0 {
        return Err(EstimationError::ShapeMismatch("reference tones are all zero".into()));
    }
    Ok(100.0 * (err / refp).sqrt())
}

/// EVM after equalizing with the best single-path channel (one delay, one
/// complex gain), as a receiver would after its own channel estimate.
pub fn evm_equalized(rx: &[Vec<Complex64>], tx: &[Vec<Complex64>], freqs_hz: &[f64]) -> Result<f64, EstimationError> {
    check_shapes(rx, tx)?;
    if tx.iter().any(|r| r.len() != freqs_hz.len()) {
        return Err(EstimationError::ShapeMismatch("frequency list length".into()));
    }
    // per-tone cross terms summed over symbols
    let cross: Vec<Complex64> = (0..freqs_hz.len())
        .map(|k| rx.iter().zip(tx).map(|(r, t)| t[k].conj() * r[k]).sum())
        .collect();
    let score = |tau: f64| -> Complex64 {
        cross
            .iter()
            .zip(freqs_hz)
            .map(|(c, f)| c * Complex64::from_polar(1.0, 2.0 * PI * f * tau))
            .sum()
    };
    let mut best = (0.0, f64::NEG_INFINITY);
    for g in -800..=800 {
        let tau = g as f64 * 0.5e-9;
        let s = score(tau).norm();
        if s > best.1 {
            best = (tau, s);
        }
    }
    // golden-section refinement inside the winning cell
    let (mut a, mut b) = (best.0 - 0.5e-9, best.0 + 0.5e-9);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..40 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if score(c).norm() > score(d).norm() {
            b = d;
        } else {
            a = c;
        }
    }
    let tau = 0.5 * (a + b);
    let energy: f64 = tx.iter().flatten().map(|t| t.norm_sqr()).sum();
    let gain = score(tau) / energy;
    let mut err = 0.0;
    for (r, t) in rx.iter().zip(tx) {
        for ((rv, tv), f) in r.iter().zip(t).zip(freqs_hz) {
            let model = gain * Complex64::from_polar(1.0, -2.0 * PI * f * tau) * tv;
            err += (rv - model).norm_sqr();
        }
    }
    let refp = gain.norm_sqr() * energy;
    if refp == 0.0 {
        return Ok(100.0);
    }
    Ok(100.0 * (err / refp).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{self, ChannelSpec};
    use crate::keyschedule::{expand_qam_grid, material_for, LtfSeed};
    use crate::waveform::{build_subcarrier_map, synth_secure_ltf};
    use proptest::prelude::*;

    fn setup(os: usize, counter: u64) -> (NdpConfig, SubcarrierMap, QamSymbolGrid, BasebandSignal) {
        let cfg = NdpConfig::secure(20, 1).with_oversample(os);
        let map = build_subcarrier_map(20).unwrap();
        let g = expand_qam_grid(&material_for(&LtfSeed::from_bytes([1; 32]), counter), 1, 122).unwrap();
        let s = synth_secure_ltf(&cfg, &g, &map).unwrap();
        (cfg, map, g, s)
    }

    #[test]
    fn rtt_examples() {
        let ts = FtmTimestamps::from_seconds(0.0, 1000e-9, 1010e-9, 2010e-9);
        assert!((distance_from_timestamps(&ts) - 299.792458).abs() < 1e-9);
        let ts = FtmTimestamps { t1: 0, t2: 777, t3: 777, t4: 0 };
        assert_eq!(distance_from_timestamps(&ts), 0.0);
    }

    proptest! {
        #[test]
        fn rtt_is_affine_in_each_timestamp(t in prop::array::uniform4(-1_000_000_000i64..1_000_000_000), which in 0usize..4) {
            let base = FtmTimestamps { t1: t[0], t2: t[1], t3: t[2], t4: t[3] };
            let mut step = base;
            match which {
                0 => step.t1 += 1,
                1 => step.t2 += 1,
                2 => step.t3 += 1,
                _ => step.t4 += 1,
            }
            let coef = [-HALF_C, HALF_C, -HALF_C, HALF_C][which];
            prop_assert_eq!(distance_pm(&step) - distance_pm(&base), coef);
        }

        #[test]
        fn evm_ignores_common_rotation(phase in 0.0f64..std::f64::consts::TAU, seed in 0u64..500) {
            let (cfg, map, g, s) = setup(1, seed);
            let mut noisy = s.clone();
            channel::add_noise(&mut noisy.samples, 0.05, seed);
            let rx = demodulate_ltf(&noisy, &cfg, &map, FftWindow::Body).unwrap();
            let tx = secure_tones(&g).symbols;
            let rot = Complex64::from_polar(1.0, phase);
            let spin = |v: &Vec<Vec<Complex64>>| v.iter().map(|r| r.iter().map(|x| x * rot).collect()).collect::<Vec<Vec<_>>>();
            let a = evm_rms(&rx, &tx).unwrap();
            let b = evm_rms(&spin(&rx), &spin(&tx)).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn evm_definition() {
        let tx = vec![vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, -1.0)]];
        assert_eq!(evm_rms(&tx, &tx).unwrap(), 0.0);
        let rx = vec![tx[0].iter().map(|v| v + Complex64::new(0.1, 0.0)).collect()];
        assert!((evm_rms(&rx, &tx).unwrap() - 10.0).abs() < 1e-9);
        assert!(evm_rms(&rx, &[vec![Complex64::new(1.0, 0.0)]]).is_err());
    }

    #[test]
    fn evm_at_7db() {
        // body-window tone noise is sigma^2 * n_active / body_len
        let (cfg, map, g, s) = setup(1, 2);
        let tx = secure_tones(&g).symbols;
        let mut acc = 0.0;
        for seed in 0..100 {
            let rx = channel::propagate(&s, &ChannelSpec { delay_s: 0.0, snr_db: 7.0, seed });
            acc += evm_rms(&demodulate_ltf(&rx, &cfg, &map, FftWindow::Body).unwrap(), &tx).unwrap();
        }
        let mean = acc / 100.0;
        let nominal = 10f64.powf(-7.0 / 20.0) * 100.0;
        assert!((mean / nominal - 1.0).abs() < 0.1, "mean EVM {mean}");
    }

    #[test]
    fn equalized_evm_removes_pure_delay() {
        let (cfg, map, g, s) = setup(4, 3);
        let rx = channel::delay(&s, 61.7e-9);
        let tones = demodulate_ltf(&rx, &cfg, &map, FftWindow::Extended).unwrap();
        let tx = secure_tones(&g).symbols;
        assert!(evm_rms(&tones, &tx).unwrap() > 50.0);
        assert!(evm_equalized(&tones, &tx, &map.active_freqs_hz(&cfg)).unwrap() < 0.5);
    }

    #[test]
    fn correlation_self_and_delay() {
        let (_, _, _, s) = setup(1, 4);
        let est = toa_correlation(&s, &s).unwrap();
        assert!(est.toa_s.abs() < 1e-15);
        let tau = 33.356e-9;
        let mut errs: Vec<f64> = (0..100)
            .map(|seed| {
                let rx = channel::propagate(&s, &ChannelSpec { delay_s: tau, snr_db: 25.0, seed });
                (toa_correlation(&rx, &s).unwrap().toa_s - tau).abs()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        assert!(errs[50] <= 1e-9, "median {}", errs[50]);
        assert_eq!(
            toa_correlation(&BasebandSignal::zeros(0, 20e6), &s),
            Err(EstimationError::EmptySignal)
        );
    }

    #[test]
    fn correlation_merges_close_copies() {
        // two equal copies 20 ns apart lie within one sample at 20 Msps; the
        // merged peak sits between them, well ahead of the later copy
        let (_, _, _, s) = setup(1, 5);
        let legit = channel::delay(&s, 100e-9);
        let early = channel::delay(&s, 80e-9);
        let rx = BasebandSignal::new(
            legit.samples.iter().zip(&early.samples).map(|(a, b)| a + b).collect(),
            s.sample_rate_hz,
        );
        let rel = toa_correlation(&rx, &s).unwrap().toa_s - 100e-9;
        assert!(rel < -5e-9 && rel > -20e-9, "relative {rel}");
    }

    #[test]
    fn lagrange_fill_matches_formula() {
        let map = build_subcarrier_map(20).unwrap();
        let vals: Vec<Complex64> = map.active.iter().map(|&k| Complex64::new(k as f64, (k * k) as f64)).collect();
        let u = uniform_response(&map.active, &vals);
        assert_eq!(u.len(), 123);
        let at = |k: i32| vals[map.active.iter().position(|&a| a == k).unwrap()];
        let want = (at(-2) + at(2)) * (2.0 / 3.0) - (at(-4) + at(4)) / 6.0;
        assert!((u[61] - want).norm() < 1e-12);
        // cubic interpolation is exact for a quadratic
        assert!((u[61] - Complex64::new(0.0, 0.0)).norm() < 1e-9);
        let m80 = build_subcarrier_map(80).unwrap();
        let v80: Vec<Complex64> = m80.active.iter().map(|&k| Complex64::new(1.0 + k as f64, 0.0)).collect();
        let u80 = uniform_response(&m80.active, &v80);
        assert_eq!(u80.len(), 501);
        assert!((u80[250].re - 1.0).abs() < 1e-9 && (u80[249].re + 1.0).abs() < 1e-9);
    }

    #[test]
    fn music_noise_free_single_path() {
        let (cfg, map, g, s) = setup(4, 6);
        let mcfg = MusicConfig { keep_spectrum: true, ..MusicConfig::default() };
        let tau = 33.356e-9;
        let est = toa_music(&channel::delay(&s, tau), &g, &cfg, &map, &mcfg).unwrap();
        assert!((est.toa_s - tau).abs() <= 0.1e-9, "toa {}", est.toa_s);
        assert_eq!(est.model_order, Some(1));
        let csv = pseudospectrum_csv(&est).unwrap();
        assert_eq!(csv.lines().count(), 10_002);
        assert!(csv.starts_with("delay_ns,power_db\n0.000,"));
    }

    #[test]
    fn music_picks_earliest_of_two_paths() {
        let (cfg, map, g, s) = setup(4, 7);
        let a = channel::delay(&s, 0.0);
        let b = channel::delay(&s, 40e-9);
        let sum = BasebandSignal::new(a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect(), s.sample_rate_hz);
        let rx = channel::propagate(&sum, &ChannelSpec { delay_s: 0.0, snr_db: 25.0, seed: 8 });
        let est = toa_music(&rx, &g, &cfg, &map, &MusicConfig::default()).unwrap();
        assert!(est.toa_s.abs() <= 1e-9, "toa {}", est.toa_s);
    }

    #[test]
    fn music_rejects_zero_input() {
        let (cfg, map, g, s) = setup(1, 9);
        let z = BasebandSignal::zeros(s.len(), s.sample_rate_hz);
        assert_eq!(
            toa_music(&z, &g, &cfg, &map, &MusicConfig::default()),
            Err(EstimationError::SingularCovariance)
        );
    }

    #[test]
    fn music_and_correlation_agree_at_15db() {
        let (cfg, map, g, s) = setup(4, 10);
        for seed in 0..10 {
            let tau = 20e-9 + seed as f64 * 7.3e-9;
            let rx = channel::propagate(&s, &ChannelSpec { delay_s: tau, snr_db: 15.0, seed });
            let m = toa_music(&rx, &g, &cfg, &map, &MusicConfig::default()).unwrap().toa_s;
            let c = toa_correlation(&rx, &s).unwrap().toa_s;
            assert!((m - c).abs() <= 2e-9, "music {m} corr {c}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn music_is_shift_equivariant(tau in 5e-9f64..200e-9, shift in 0.0f64..100e-9) {
            let (cfg, map, g, s) = setup(4, 11);
            let mcfg = MusicConfig::default();
            let a = toa_music(&channel::delay(&s, tau), &g, &cfg, &map, &mcfg).unwrap().toa_s;
            let b = toa_music(&channel::delay(&s, tau + shift), &g, &cfg, &map, &mcfg).unwrap().toa_s;
            prop_assert!((b - a - shift).abs() <= 0.1e-9);
        }
    }
}
