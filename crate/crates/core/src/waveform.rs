//! HE-LTF region synthesis for ranging NDPs.
//!
//! Both formats use the 2x HE-LTF convention: training tones sit on even
//! subcarrier indices, so the IFFT output repeats with half the FFT length
//! and only the first half is transmitted. Each LTF block is 8 us:
//! a 1.6 us guard interval followed by the 6.4 us body. A 4 us packet
//! extension of zeros closes the NDP.
//!
//! * legacy: the GI is a cyclic prefix and the body carries a fixed public
//!   BPSK pattern, identical in every block;
//! * secure: the GI is forced to zero power and the body carries keyed
//!   64-QAM content rotated by the per-symbol phase.
//!
//! Tone layout (a stand-in for the standard's tables; see [`build_subcarrier_map`]):
//!
//! | BW     | FFT  | active tones               |
//! |--------|------|----------------------------|
//! | 20 MHz | 256  | even k, 2 <= abs(k) <= 122 |
//! | 40 MHz | 512  | even k, 4 <= abs(k) <= 244 |
//! | 80 MHz | 1024 | even k, 4 <= abs(k) <= 500 |
//!
//! Everything else (lower/upper guard bands, DC, odd tones) is nulled.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp;
use crate::keyschedule::QamSymbolGrid;
use crate::qam::Constellation;
use crate::signal::BasebandSignal;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveformError {
    #[error("unsupported bandwidth {0} MHz (expected 20, 40 or 80)")]
    UnsupportedBandwidth(u32),
    #[error("invalid NDP configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("signal has {got} samples, configuration expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GiMode {
    CyclicPrefix,
    ZeroPower,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NdpConfig {
    pub bandwidth_mhz: u32,
    pub n_ltf: usize,
    pub gi_mode: GiMode,
    pub secure: bool,
    pub oversample: usize,
}

fn base_fft_size(bandwidth_mhz: u32) -> Result<usize, WaveformError> {
    match bandwidth_mhz {
        20 => Ok(256),
        40 => Ok(512),
        80 => Ok(1024),
        other => Err(WaveformError::UnsupportedBandwidth(other)),
    }
}

impl NdpConfig {
    pub fn secure(bandwidth_mhz: u32, n_ltf: usize) -> Self {
        Self {
            bandwidth_mhz,
            n_ltf,
            gi_mode: GiMode::ZeroPower,
            secure: true,
            oversample: 1,
        }
    }

    pub fn legacy(bandwidth_mhz: u32, n_ltf: usize) -> Self {
        Self {
            bandwidth_mhz,
            n_ltf,
            gi_mode: GiMode::CyclicPrefix,
            secure: false,
            oversample: 1,
        }
    }

    pub fn with_oversample(mut self, oversample: usize) -> Self {
        self.oversample = oversample;
        self
    }

    pub fn validate(&self) -> Result<(), WaveformError> {
        base_fft_size(self.bandwidth_mhz)?;
        if self.n_ltf == 0 {
            return Err(WaveformError::InvalidConfig("n_ltf must be >= 1".into()));
        }
        if self.oversample == 0 {
            return Err(WaveformError::InvalidConfig("oversample must be >= 1".into()));
        }
        match (self.secure, self.gi_mode) {
            (true, GiMode::ZeroPower) | (false, GiMode::CyclicPrefix) => Ok(()),
            (true, GiMode::CyclicPrefix) => Err(WaveformError::InvalidConfig(
                "secure NDPs require a zero-power GI".into(),
            )),
            (false, GiMode::ZeroPower) => Err(WaveformError::InvalidConfig(
                "legacy NDPs use a cyclic-prefix GI".into(),
            )),
        }
    }

    /// FFT size at the oversampled rate.
    pub fn fft_size(&self) -> usize {
        base_fft_size(self.bandwidth_mhz).unwrap_or(256) * self.oversample
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.bandwidth_mhz as f64 * 1e6 * self.oversample as f64
    }

    /// Transmitted half of the IFFT output (6.4 us).
    pub fn body_len(&self) -> usize {
        self.fft_size() / 2
    }

    /// 1.6 us guard interval.
    pub fn gi_len(&self) -> usize {
        self.fft_size() / 8
    }

    /// One 8 us LTF block.
    pub fn symbol_len(&self) -> usize {
        self.gi_len() + self.body_len()
    }

    /// 4 us packet extension.
    pub fn pe_len(&self) -> usize {
        self.fft_size() * 5 / 16
    }

    pub fn total_len(&self) -> usize {
        self.n_ltf * self.symbol_len() + self.pe_len()
    }

    pub fn symbol_start(&self, symbol: usize) -> usize {
        symbol * self.symbol_len()
    }

    pub fn body_start(&self, symbol: usize) -> usize {
        self.symbol_start(symbol) + self.gi_len()
    }

    /// Subcarrier spacing in Hz (78.125 kHz for all bandwidths).
    pub fn subcarrier_spacing_hz(&self) -> f64 {
        self.sample_rate_hz() / self.fft_size() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubcarrierMap {
    /// Base-rate FFT size (256, 512 or 1024).
    pub fft_size: usize,
    /// Active tone indices, ascending.
    pub active: Vec<i32>,
    /// All remaining tone indices in `-fft/2 .. fft/2`, ascending.
    pub nulled: Vec<i32>,
}

impl SubcarrierMap {
    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Frequency of each active tone in Hz.
    pub fn active_freqs_hz(&self, cfg: &NdpConfig) -> Vec<f64> {
        let df = cfg.subcarrier_spacing_hz();
        self.active.iter().map(|&k| k as f64 * df).collect()
    }

    fn check(&self, cfg: &NdpConfig) -> Result<(), WaveformError> {
        let want = base_fft_size(cfg.bandwidth_mhz)?;
        if want != self.fft_size {
            return Err(WaveformError::DimensionMismatch(format!(
                "map is for FFT {} but config needs {}",
                self.fft_size, want
            )));
        }
        Ok(())
    }
}

/// Deterministic tone layout for a bandwidth.
pub fn build_subcarrier_map(bandwidth_mhz: u32) -> Result<SubcarrierMap, WaveformError> {
    let fft_size = base_fft_size(bandwidth_mhz)?;
    let (inner, outer) = match bandwidth_mhz {
        20 => (2, 122),
        40 => (4, 244),
        _ => (4, 500),
    };
    let half = fft_size as i32 / 2;
    let (active, nulled): (Vec<i32>, Vec<i32>) = (-half..half)
        .partition(|&k| k % 2 == 0 && (inner..=outer).contains(&k.abs()));
    Ok(SubcarrierMap {
        fft_size,
        active,
        nulled,
    })
}

/// Complex values actually placed on the active tones, per LTF symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTones {
    pub symbols: Vec<Vec<Complex64>>,
}

impl TrainingTones {
    pub fn n_ltf(&self) -> usize {
        self.symbols.len()
    }
}

/// Secure tones: `g * exp(i beta) * X_k`, with `g` chosen per symbol so the
/// tone vector has mean power exactly 1.
pub fn secure_tones(grid: &QamSymbolGrid) -> TrainingTones {
    let qam = Constellation::qam64();
    let symbols = grid
        .symbols
        .iter()
        .enumerate()
        .map(|(s, row)| {
            let rot = Complex64::from_polar(1.0, grid.beta_radians(s));
            let raw: Vec<Complex64> = row.iter().map(|&i| qam.point(i as usize) * rot).collect();
            let g = secure_symbol_gain(&raw);
            raw.into_iter().map(|t| t * g).collect()
        })
        .collect();
    TrainingTones { symbols }
}

/// `sqrt(N / sum |X|^2)` for one symbol's rotated QAM points.
pub fn secure_symbol_gain(points: &[Complex64]) -> f64 {
    let e: f64 = points.iter().map(|p| p.norm_sqr()).sum();
    (points.len() as f64 / e).sqrt()
}

/// Public BPSK pattern from the `x^7 + x^4 + 1` scrambler seeded with ones.
pub fn legacy_pattern(n_active: usize) -> Vec<Complex64> {
    let mut state: u8 = 0x7f;
    (0..n_active)
        .map(|_| {
            let bit = ((state >> 6) ^ (state >> 3)) & 1;
            state = ((state << 1) | bit) & 0x7f;
            Complex64::new(if bit == 1 { -1.0 } else { 1.0 }, 0.0)
        })
        .collect()
}

pub fn legacy_tones(map: &SubcarrierMap, n_ltf: usize) -> TrainingTones {
    let row = legacy_pattern(map.n_active());
    TrainingTones {
        symbols: vec![row; n_ltf],
    }
}

/// Time-domain amplitude applied to the IFFT sum so unit-power tones give
/// unit-power samples.
fn tone_scale(map: &SubcarrierMap) -> f64 {
    1.0 / (map.n_active() as f64).sqrt()
}

/// One period (body) of the 2x HE-LTF for a tone vector.
pub fn ltf_body(cfg: &NdpConfig, map: &SubcarrierMap, tones: &[Complex64]) -> Vec<Complex64> {
    let n = cfg.fft_size();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (&k, &t) in map.active.iter().zip(tones) {
        buf[dsp::bin(k, n)] = t;
    }
    dsp::ifft(&mut buf);
    let c = tone_scale(map);
    buf.truncate(cfg.body_len());
    buf.iter_mut().for_each(|v| *v *= c);
    buf
}

/// Synthesizes the HE-LTF region from explicit tone values.
pub fn synthesize(
    cfg: &NdpConfig,
    map: &SubcarrierMap,
    tones: &TrainingTones,
) -> Result<BasebandSignal, WaveformError> {
    cfg.validate()?;
    map.check(cfg)?;
    if tones.n_ltf() != cfg.n_ltf {
        return Err(WaveformError::DimensionMismatch(format!(
            "{} tone rows for {} LTF symbols",
            tones.n_ltf(),
            cfg.n_ltf
        )));
    }
    if let Some(row) = tones.symbols.iter().find(|r| r.len() != map.n_active()) {
        return Err(WaveformError::DimensionMismatch(format!(
            "tone row has {} entries, map has {} active tones",
            row.len(),
            map.n_active()
        )));
    }
    let mut out = Vec::with_capacity(cfg.total_len());
    let gi = cfg.gi_len();
    for row in &tones.symbols {
        let body = ltf_body(cfg, map, row);
        match cfg.gi_mode {
            GiMode::ZeroPower => out.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), gi)),
            GiMode::CyclicPrefix => out.extend_from_slice(&body[body.len() - gi..]),
        }
        out.extend_from_slice(&body);
    }
    out.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), cfg.pe_len()));
    Ok(BasebandSignal::new(out, cfg.sample_rate_hz()))
}

pub fn synth_secure_ltf(
    cfg: &NdpConfig,
    grid: &QamSymbolGrid,
    map: &SubcarrierMap,
) -> Result<BasebandSignal, WaveformError> {
    if !cfg.secure {
        return Err(WaveformError::InvalidConfig(
            "secure synthesis needs a secure config".into(),
        ));
    }
    if grid.n_ltf != cfg.n_ltf || grid.symbols.len() != cfg.n_ltf {
        return Err(WaveformError::DimensionMismatch(format!(
            "grid has {} LTF symbols, config {}",
            grid.n_ltf, cfg.n_ltf
        )));
    }
    if grid.n_active() != map.n_active() {
        return Err(WaveformError::DimensionMismatch(format!(
            "grid has {} tones, map {}",
            grid.n_active(),
            map.n_active()
        )));
    }
    synthesize(cfg, map, &secure_tones(grid))
}

pub fn synth_legacy_ltf(cfg: &NdpConfig, map: &SubcarrierMap) -> Result<BasebandSignal, WaveformError> {
    if cfg.secure {
        return Err(WaveformError::InvalidConfig(
            "legacy synthesis needs a non-secure config".into(),
        ));
    }
    synthesize(cfg, map, &legacy_tones(map, cfg.n_ltf))
}

/// Receiver FFT window placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FftWindow {
    /// FFT over the transmitted body only (half-length transform).
    #[default]
    Body,
    /// Zero-power GI only: the window spans the body plus the following GI,
    /// zero-padded to the full FFT size. Any delay in `[0, GI]` then shows up
    /// as an exact linear phase on the tones. Falls back to
    /// [`FftWindow::Body`] for cyclic-prefix signals, where the CP already
    /// makes the body window circular.
    Extended,
}

/// Per-symbol tone estimates on the active subcarriers, scaled to the
/// transmitted tone values.
pub fn demodulate_ltf(
    signal: &BasebandSignal,
    cfg: &NdpConfig,
    map: &SubcarrierMap,
    window: FftWindow,
) -> Result<Vec<Vec<Complex64>>, WaveformError> {
    cfg.validate()?;
    map.check(cfg)?;
    if signal.len() != cfg.total_len() {
        return Err(WaveformError::LengthMismatch {
            expected: cfg.total_len(),
            got: signal.len(),
        });
    }
    let n = cfg.fft_size();
    let body = cfg.body_len();
    let gi = cfg.gi_len();
    // a unit tone contributes c * body to its bin
    let norm = 1.0 / (tone_scale(map) * body as f64);
    let extended = window == FftWindow::Extended && cfg.gi_mode == GiMode::ZeroPower;

    let mut out = Vec::with_capacity(cfg.n_ltf);
    for s in 0..cfg.n_ltf {
        let tones = if extended {
            let start = cfg.body_start(s);
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            for (i, v) in buf.iter_mut().take(body + gi).enumerate() {
                if let Some(x) = signal.samples.get(start + i) {
                    *v = *x;
                }
            }
            dsp::fft(&mut buf);
            map.active.iter().map(|&k| buf[dsp::bin(k, n)] * norm).collect()
        } else {
            let start = cfg.body_start(s);
            let mut buf = signal.samples[start..start + body].to_vec();
            dsp::fft(&mut buf);
            map.active
                .iter()
                .map(|&k| buf[dsp::bin(k / 2, body)] * norm)
                .collect()
        };
        out.push(tones);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyschedule::{expand_qam_grid, material_for, LtfSeed};

    fn grid(n_ltf: usize, counter: u64) -> QamSymbolGrid {
        let m = material_for(&LtfSeed::from_bytes([3; 32]), counter);
        expand_qam_grid(&m, n_ltf, 122).unwrap()
    }

    #[test]
    fn tone_counts_per_bandwidth() {
        for (bw, n, fft) in [(20, 122, 256), (40, 242, 512), (80, 498, 1024)] {
            let m = build_subcarrier_map(bw).unwrap();
            assert_eq!(m.n_active(), n);
            assert_eq!(m.fft_size, fft);
            assert_eq!(m.active.len() + m.nulled.len(), fft);
            assert!(m.active.iter().all(|k| !m.nulled.contains(k)));
            assert!(!m.active.contains(&0));
        }
        assert_eq!(
            build_subcarrier_map(160),
            Err(WaveformError::UnsupportedBandwidth(160))
        );
    }

    #[test]
    fn config_invariants() {
        let mut c = NdpConfig::secure(20, 2);
        c.gi_mode = GiMode::CyclicPrefix;
        assert!(c.validate().is_err());
        let mut l = NdpConfig::legacy(20, 2);
        l.gi_mode = GiMode::ZeroPower;
        assert!(l.validate().is_err());
        let c = NdpConfig::secure(20, 3);
        assert_eq!(c.symbol_len(), 160);
        assert_eq!(c.pe_len(), 80);
        assert_eq!(c.total_len(), 3 * 160 + 80);
        assert!((c.symbol_len() as f64 / c.sample_rate_hz() - 8e-6).abs() < 1e-15);
    }

    #[test]
    fn secure_gi_is_exactly_zero_and_bodies_differ() {
        let cfg = NdpConfig::secure(20, 2);
        let map = build_subcarrier_map(20).unwrap();
        let sig = synth_secure_ltf(&cfg, &grid(2, 1), &map).unwrap();
        assert_eq!(sig.len(), cfg.total_len());
        for s in 0..2 {
            let st = cfg.symbol_start(s);
            assert!(sig.samples[st..st + cfg.gi_len()].iter().all(|v| v.norm() == 0.0));
        }
        let b0 = &sig.samples[cfg.body_start(0)..cfg.body_start(0) + cfg.body_len()];
        let b1 = &sig.samples[cfg.body_start(1)..cfg.body_start(1) + cfg.body_len()];
        assert_ne!(b0, b1);
    }

    #[test]
    fn secure_power_is_unit() {
        let cfg = NdpConfig::secure(20, 4).with_oversample(2);
        let map = build_subcarrier_map(20).unwrap();
        let sig = synth_secure_ltf(&cfg, &grid(4, 8), &map).unwrap();
        let mut acc = 0.0;
        for s in 0..4 {
            let b = cfg.body_start(s);
            acc += dsp::mean_power(&sig.samples[b..b + cfg.body_len()]);
        }
        assert!((acc / 4.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clean_round_trip_recovers_grid() {
        let cfg = NdpConfig::secure(20, 3);
        let map = build_subcarrier_map(20).unwrap();
        let g = grid(3, 42);
        let sig = synth_secure_ltf(&cfg, &g, &map).unwrap();
        let tx = secure_tones(&g);
        let qam = Constellation::qam64();
        for window in [FftWindow::Body, FftWindow::Extended] {
            let rx = demodulate_ltf(&sig, &cfg, &map, window).unwrap();
            for s in 0..3 {
                for (t, (r, x)) in rx[s].iter().zip(&tx.symbols[s]).enumerate() {
                    assert!((r - x).norm() <= 1e-9 * x.norm(), "symbol {s} tone {t}");
                }
                // undo the known phase and gain, slice back to indices
                let rot = Complex64::from_polar(1.0, -g.beta_radians(s));
                let raw: Vec<Complex64> = g.symbols[s].iter().map(|&i| qam.point(i as usize)).collect();
                let gain = secure_symbol_gain(&raw);
                let idx: Vec<u8> = rx[s].iter().map(|r| qam.nearest(r * rot / gain) as u8).collect();
                assert_eq!(idx, g.symbols[s]);
            }
        }
    }

    #[test]
    fn legacy_cp_and_repetition() {
        let cfg = NdpConfig::legacy(20, 3);
        let map = build_subcarrier_map(20).unwrap();
        let sig = synth_legacy_ltf(&cfg, &map).unwrap();
        let (gi, body) = (cfg.gi_len(), cfg.body_len());
        for s in 0..3 {
            let st = cfg.symbol_start(s);
            assert_eq!(
                sig.samples[st..st + gi],
                sig.samples[st + gi + body - gi..st + gi + body]
            );
        }
        assert_eq!(
            sig.samples[0..cfg.symbol_len()],
            sig.samples[cfg.symbol_len()..2 * cfg.symbol_len()]
        );
        let rx = demodulate_ltf(&sig, &cfg, &map, FftWindow::Body).unwrap();
        let pat = legacy_pattern(122);
        for (r, p) in rx[1].iter().zip(&pat) {
            assert!((r - p).norm() < 1e-9);
        }
    }

    #[test]
    fn legacy_guard_tones_are_empty() {
        // FFT of a full 2x period (body repeated) at 4x oversampling
        let cfg = NdpConfig::legacy(20, 1).with_oversample(4);
        let map = build_subcarrier_map(20).unwrap();
        let sig = synth_legacy_ltf(&cfg, &map).unwrap();
        let b = cfg.body_start(0);
        let body = &sig.samples[b..b + cfg.body_len()];
        let mut full: Vec<Complex64> = body.iter().chain(body).copied().collect();
        dsp::fft(&mut full);
        let total: f64 = full.iter().map(|v| v.norm_sqr()).sum();
        let n = full.len();
        for k in 0..n {
            let tone = dsp::signed_index(k, n) as i32;
            if !map.active.contains(&tone) {
                assert!(full[k].norm_sqr() / total < 1e-20, "tone {tone}");
            }
        }
    }

    #[test]
    fn zero_signal_demodulates_to_zero() {
        let cfg = NdpConfig::secure(20, 2);
        let map = build_subcarrier_map(20).unwrap();
        let sig = BasebandSignal::zeros(cfg.total_len(), cfg.sample_rate_hz());
        let rx = demodulate_ltf(&sig, &cfg, &map, FftWindow::Body).unwrap();
        assert!(rx.iter().flatten().all(|v| v.norm() == 0.0));
        let short = BasebandSignal::zeros(10, cfg.sample_rate_hz());
        assert!(matches!(
            demodulate_ltf(&short, &cfg, &map, FftWindow::Body),
            Err(WaveformError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn dimension_checks() {
        let map = build_subcarrier_map(20).unwrap();
        let cfg = NdpConfig::secure(20, 2);
        assert!(matches!(
            synth_secure_ltf(&cfg, &grid(1, 0), &map),
            Err(WaveformError::DimensionMismatch(_))
        ));
        let map40 = build_subcarrier_map(40).unwrap();
        assert!(matches!(
            synth_secure_ltf(&cfg, &grid(2, 0), &map40),
            Err(WaveformError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn extended_window_sees_delay_as_pure_phase() {
        let cfg = NdpConfig::secure(20, 2).with_oversample(4);
        let map = build_subcarrier_map(20).unwrap();
        let g = grid(2, 17);
        let sig = synth_secure_ltf(&cfg, &g, &map).unwrap();
        let tau = 35e-9;
        let rx = crate::channel::delay(&sig, tau);
        let est = demodulate_ltf(&rx, &cfg, &map, FftWindow::Extended).unwrap();
        let tx = secure_tones(&g);
        let df = cfg.subcarrier_spacing_hz();
        let mut mse = 0.0;
        for s in 0..2 {
            for (i, &k) in map.active.iter().enumerate() {
                let h = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * k as f64 * df * tau);
                mse += (est[s][i] - h * tx.symbols[s][i]).norm_sqr() / 244.0;
            }
        }
        // fractional delays of the zero-GI edges leak slightly at 4x
        assert!(mse < 1e-6, "mse {mse}");

        // integer-sample delays are exact at the base rate
        let cfg = NdpConfig::secure(20, 2);
        let sig = synth_secure_ltf(&cfg, &g, &map).unwrap();
        let tau = 2.0 / cfg.sample_rate_hz();
        let est = demodulate_ltf(&crate::channel::delay(&sig, tau), &cfg, &map, FftWindow::Extended).unwrap();
        for s in 0..2 {
            for (i, &k) in map.active.iter().enumerate() {
                let h = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * k as f64 * df * tau);
                assert!((est[s][i] - h * tx.symbols[s][i]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn awgn_tone_error_matches_noise_power() {
        // body-window tone noise variance is sigma^2 * n_active / body_len
        let cfg = NdpConfig::secure(20, 1);
        let map = build_subcarrier_map(20).unwrap();
        let g = grid(1, 5);
        let sig = synth_secure_ltf(&cfg, &g, &map).unwrap();
        let tx = secure_tones(&g);
        let sigma2 = 10f64.powf(-2.5);
        let mut acc = 0.0;
        for trial in 0..100 {
            let mut rx = sig.clone();
            crate::channel::add_noise(&mut rx.samples, sigma2, trial);
            let est = demodulate_ltf(&rx, &cfg, &map, FftWindow::Body).unwrap();
            acc += est[0].iter().zip(&tx.symbols[0]).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / 122.0;
        }
        let expected = sigma2 * 122.0 / cfg.body_len() as f64;
        let ratio = acc / 100.0 / expected;
        assert!((ratio - 1.0).abs() < 0.2, "ratio {ratio}");
    }
}
