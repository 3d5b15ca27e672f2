//! Transmit front end: Rapp PA, Welch PSD and spectral-mask margins.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp;
use crate::keyschedule::{expand_qam_grid, material_for, LtfSeed};
use crate::signal::BasebandSignal;
use crate::waveform::{build_subcarrier_map, synth_legacy_ltf, synth_secure_ltf, NdpConfig, WaveformError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RfError {
    #[error("signal has {got} samples, PSD segment needs {need}")]
    TooShort { need: usize, got: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("backoff calibration failed: {0}")]
    Calibration(String),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RappParams {
    pub smoothness_p: f64,
    pub a_sat: f64,
    pub small_signal_gain: f64,
}

impl Default for RappParams {
    fn default() -> Self {
        Self {
            smoothness_p: 4.0,
            a_sat: 0.7,
            small_signal_gain: 1.0,
        }
    }
}

impl RappParams {
    pub fn validate(&self) -> Result<(), RfError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.smoothness_p) && ok(self.a_sat) && ok(self.small_signal_gain) {
            Ok(())
        } else {
            Err(RfError::InvalidParams(format!("Rapp parameters must be positive: {self:?}")))
        }
    }

    /// AM/AM: `G r / (1 + (G r / a_sat)^(2p))^(1/(2p))`.
    pub fn am_am(&self, r: f64) -> f64 {
        let g = self.small_signal_gain * r;
        let two_p = 2.0 * self.smoothness_p;
        g / (1.0 + (g / self.a_sat).powf(two_p)).powf(1.0 / two_p)
    }
}

/// Memoryless Rapp PA, phase preserved.
pub fn rapp_pa(signal: &BasebandSignal, params: &RappParams) -> BasebandSignal {
    let samples = signal
        .samples
        .iter()
        .map(|&x| {
            let r = x.norm();
            if r == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                x * (params.am_am(r) / r)
            }
        })
        .collect();
    BasebandSignal::new(samples, signal.sample_rate_hz)
}

/// Scales a unit-power signal so its RMS sits `backoff_db` below `a_sat`.
pub fn apply_input_backoff(signal: &BasebandSignal, a_sat: f64, backoff_db: f64) -> BasebandSignal {
    let p = crate::channel::support_power(&signal.samples);
    let k = if p > 0.0 {
        a_sat * 10f64.powf(-backoff_db / 20.0) / p.sqrt()
    } else {
        0.0
    };
    BasebandSignal::new(signal.samples.iter().map(|x| x * k).collect(), signal.sample_rate_hz)
}

/// Raised-cosine ramps over the first and last `ramp` samples of every
/// nonzero run, softening on/off switching.
pub fn apply_edge_ramp(signal: &BasebandSignal, ramp: usize) -> BasebandSignal {
    let mut out = signal.samples.clone();
    if ramp == 0 {
        return BasebandSignal::new(out, signal.sample_rate_hz);
    }
    let w: Vec<f64> = (0..ramp)
        .map(|i| 0.5 - 0.5 * (PI * (i as f64 + 0.5) / ramp as f64).cos())
        .collect();
    let n = out.len();
    let mut i = 0;
    while i < n {
        if out[i].norm_sqr() == 0.0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && out[i].norm_sqr() > 0.0 {
            i += 1;
        }
        let len = i - start;
        let r = ramp.min(len / 2);
        for k in 0..r {
            out[start + k] *= w[k];
            out[i - 1 - k] *= w[k];
        }
    }
    BasebandSignal::new(out, signal.sample_rate_hz)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsdWindow {
    Hann,
    Rectangular,
}

impl PsdWindow {
    fn coefficients(&self, n: usize) -> Vec<f64> {
        match self {
            // periodic Hann, the usual choice for averaged periodograms
            Self::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
            Self::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsdConfig {
    /// Zero-padded FFT length, `None` for the segment length.
    pub nfft: Option<usize>,
    /// `None` picks `len / 4.5`, giving eight half-overlapped segments.
    pub segment: Option<usize>,
    pub overlap: f64,
    pub window: PsdWindow,
    /// Bins with `|f|` up to this offset count as in-band for normalization.
    pub in_band_hz: f64,
}

impl PsdConfig {
    /// Eight-average Welch estimate, resolution set by the signal length.
    pub fn eight_averages() -> Self {
        Self {
            segment: None,
            ..Self::default()
        }
    }
}

impl Default for PsdConfig {
    fn default() -> Self {
        Self {
            nfft: None,
            segment: Some(256),
            overlap: 0.5,
            window: PsdWindow::Hann,
            in_band_hz: 9.5e6,
        }
    }
}

/// PSD in dB relative to the in-band maximum, ascending in frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdCurve {
    pub freqs_hz: Vec<f64>,
    pub dbr: Vec<f64>,
}

impl PsdCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("offset_mhz,psd_dbr\n");
        for (f, p) in self.freqs_hz.iter().zip(&self.dbr) {
            let _ = writeln!(out, "{:.6},{:.6}", f / 1e6, p);
        }
        out
    }
}

/// Averaged modified periodogram (Welch).
pub fn psd(signal: &BasebandSignal, cfg: &PsdConfig) -> Result<PsdCurve, RfError> {
    let seg = cfg.segment.unwrap_or((signal.len() as f64 / 4.5) as usize);
    let n = cfg.nfft.unwrap_or(seg);
    if seg == 0 || n < seg || !(0.0..1.0).contains(&cfg.overlap) {
        return Err(RfError::InvalidParams(format!("bad PSD configuration {cfg:?}")));
    }
    if signal.len() < seg {
        return Err(RfError::TooShort {
            need: seg,
            got: signal.len(),
        });
    }
    let hop = ((seg as f64 * (1.0 - cfg.overlap)).round() as usize).max(1);
    let w = cfg.window.coefficients(seg);
    let mut acc = vec![0.0; n];
    let mut start = 0;
    while start + seg <= signal.len() {
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (i, b) in buf.iter_mut().take(seg).enumerate() {
            *b = signal.samples[start + i] * w[i];
        }
        dsp::fft(&mut buf);
        for (a, v) in acc.iter_mut().zip(&buf) {
            *a += v.norm_sqr();
        }
        start += hop;
    }
    let fs = signal.sample_rate_hz;
    let half = n / 2;
    let mut freqs = Vec::with_capacity(n);
    let mut power = Vec::with_capacity(n);
    for i in 0..n {
        let k = (i + n - half) % n;
        freqs.push(dsp::signed_index(k, n) * fs / n as f64);
        power.push(acc[k]);
    }
    let peak = freqs
        .iter()
        .zip(&power)
        .filter(|(f, _)| f.abs() <= cfg.in_band_hz)
        .map(|(_, p)| *p)
        .fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(RfError::InvalidParams("no in-band power".into()));
    }
    let dbr = power.iter().map(|p| 10.0 * (p / peak).max(1e-30).log10()).collect();
    Ok(PsdCurve { freqs_hz: freqs, dbr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralMask {
    /// `(offset_mhz, limit_dbr)`, offsets strictly increasing.
    pub breakpoints: Vec<(f64, f64)>,
    /// Mirror the breakpoints onto negative offsets.
    pub symmetric: bool,
}

impl SpectralMask {
    pub fn default_20mhz() -> Self {
        Self {
            breakpoints: vec![(9.0, 0.0), (11.0, -20.0), (20.0, -28.0), (30.0, -40.0)],
            symmetric: true,
        }
    }

    pub fn validate(&self) -> Result<(), RfError> {
        if self.breakpoints.is_empty() {
            return Err(RfError::InvalidParams("mask has no breakpoints".into()));
        }
        if self.breakpoints.iter().any(|(f, l)| !f.is_finite() || !l.is_finite()) {
            return Err(RfError::InvalidParams("mask breakpoints must be finite".into()));
        }
        if self.breakpoints.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(RfError::InvalidParams("mask offsets must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Limit in dBr at `offset_mhz`, linear between breakpoints and flat
    /// beyond the ends.
    pub fn limit(&self, offset_mhz: f64) -> f64 {
        let x = if self.symmetric { offset_mhz.abs() } else { offset_mhz };
        let bp = &self.breakpoints;
        if x <= bp[0].0 {
            return bp[0].1;
        }
        for w in bp.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if x <= x1 {
                return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
            }
        }
        bp[bp.len() - 1].1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub worst_excess_db: f64,
    pub p99_margin_db: f64,
    pub frac_bins_above: f64,
    /// `(offset_mhz, dbr)` over the checked range.
    pub psd: Vec<(f64, f64)>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // linear interpolation between closest ranks
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn mask_check(curve: &PsdCurve, mask: &SpectralMask, range_mhz: f64) -> Result<MaskReport, RfError> {
    mask.validate()?;
    let mut psd_pts = Vec::new();
    let mut excess = Vec::new();
    for (f, p) in curve.freqs_hz.iter().zip(&curve.dbr) {
        let mhz = f / 1e6;
        if mhz.abs() <= range_mhz + 1e-9 {
            psd_pts.push((mhz, *p));
            excess.push(p - mask.limit(mhz));
        }
    }
    if excess.is_empty() {
        return Err(RfError::InvalidParams(format!("PSD has no bins within +-{range_mhz} MHz")));
    }
    let above = excess.iter().filter(|&&e| e > 0.0).count();
    let mut sorted = excess.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(MaskReport {
        worst_excess_db: sorted[sorted.len() - 1],
        p99_margin_db: percentile(&sorted, 0.99),
        frac_bins_above: above as f64 / excess.len() as f64,
        psd: psd_pts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskStudyConfig {
    pub bandwidth_mhz: u32,
    pub oversample: usize,
    pub n_ltf: usize,
    /// NDPs in the analysed burst.
    pub n_ndp: usize,
    /// Idle time between NDPs.
    pub gap_us: f64,
    /// Transmit switching ramp applied to every on/off transition.
    pub edge_ramp_ns: f64,
    pub rapp: RappParams,
    /// `None` calibrates against the legacy waveform.
    pub backoff_db: Option<f64>,
    pub target_legacy_excess_db: f64,
    pub psd: PsdConfig,
    pub mask: SpectralMask,
    pub range_mhz: f64,
    pub seed: u64,
}

impl Default for MaskStudyConfig {
    fn default() -> Self {
        Self {
            bandwidth_mhz: 20,
            oversample: 4,
            n_ltf: 4,
            n_ndp: 16,
            gap_us: 0.0,
            edge_ramp_ns: 100.0,
            rapp: RappParams::default(),
            backoff_db: None,
            target_legacy_excess_db: 10.9,
            psd: PsdConfig::eight_averages(),
            mask: SpectralMask::default_20mhz(),
            range_mhz: 30.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStudy {
    pub backoff_db: f64,
    pub legacy_pre_pa: MaskReport,
    pub secure_pre_pa: MaskReport,
    pub legacy: MaskReport,
    pub secure: MaskReport,
}

/// Burst of `n_ndp` NDPs separated by idle gaps. Secure NDPs use fresh
/// counters, legacy NDPs repeat the public pattern.
pub fn ndp_burst(cfg: &MaskStudyConfig, secure: bool) -> Result<BasebandSignal, RfError> {
    let map = build_subcarrier_map(cfg.bandwidth_mhz)?;
    let ndp = if secure {
        NdpConfig::secure(cfg.bandwidth_mhz, cfg.n_ltf)
    } else {
        NdpConfig::legacy(cfg.bandwidth_mhz, cfg.n_ltf)
    }
    .with_oversample(cfg.oversample);
    let fs = ndp.sample_rate_hz();
    let gap = (cfg.gap_us * 1e-6 * fs).round() as usize;
    let seed = LtfSeed::derive_from(&cfg.seed.to_be_bytes(), b"mask-study");
    let mut out = Vec::new();
    for i in 0..cfg.n_ndp {
        let sig = if secure {
            let grid = expand_qam_grid(&material_for(&seed, i as u64), cfg.n_ltf, map.n_active())
                .map_err(|e| RfError::InvalidParams(e.to_string()))?;
            synth_secure_ltf(&ndp, &grid, &map)?
        } else {
            synth_legacy_ltf(&ndp, &map)?
        };
        out.extend_from_slice(&sig.samples);
        out.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), gap));
    }
    let ramp = (cfg.edge_ramp_ns * 1e-9 * fs).round() as usize;
    Ok(apply_edge_ramp(&BasebandSignal::new(out, fs), ramp))
}

fn post_pa_report(
    sig: &BasebandSignal,
    cfg: &MaskStudyConfig,
    backoff_db: f64,
) -> Result<MaskReport, RfError> {
    let driven = apply_input_backoff(sig, cfg.rapp.a_sat, backoff_db);
    let out = rapp_pa(&driven, &cfg.rapp);
    mask_check(&psd(&out, &cfg.psd)?, &cfg.mask, cfg.range_mhz)
}

/// Backoff placing `sig`'s post-PA worst excess at `target_db`, by bisection
/// over `[lo, hi]` (worst excess falls as backoff grows).
pub fn calibrate_backoff(
    sig: &BasebandSignal,
    cfg: &MaskStudyConfig,
    target_db: f64,
    lo: f64,
    hi: f64,
) -> Result<f64, RfError> {
    let f = |b: f64| post_pa_report(sig, cfg, b).map(|r| r.worst_excess_db - target_db);
    let (mut a, mut b) = (lo, hi);
    let (fa, fb) = (f(a)?, f(b)?);
    if fa < 0.0 || fb > 0.0 {
        return Err(RfError::Calibration(format!(
            "target {target_db} dB not bracketed by backoff [{lo}, {hi}] dB (excess {:.2}, {:.2})",
            fa + target_db,
            fb + target_db
        )));
    }
    for _ in 0..50 {
        let m = 0.5 * (a + b);
        if f(m)? > 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

pub fn run_mask_study(cfg: &MaskStudyConfig) -> Result<MaskStudy, RfError> {
    cfg.rapp.validate()?;
    cfg.mask.validate()?;
    let legacy = ndp_burst(cfg, false)?;
    let secure = ndp_burst(cfg, true)?;
    let backoff = match cfg.backoff_db {
        Some(b) => b,
        None => calibrate_backoff(&legacy, cfg, cfg.target_legacy_excess_db, -20.0, 30.0)?,
    };
    let pre = |s: &BasebandSignal| mask_check(&psd(s, &cfg.psd)?, &cfg.mask, cfg.range_mhz);
    Ok(MaskStudy {
        backoff_db: backoff,
        legacy_pre_pa: pre(&legacy)?,
        secure_pre_pa: pre(&secure)?,
        legacy: post_pa_report(&legacy, cfg, backoff)?,
        secure: post_pa_report(&secure, cfg, backoff)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rapp_limits() {
        let p = RappParams::default();
        assert!((p.am_am(0.01) - 0.01).abs() < 1e-6);
        assert!((p.am_am(10.0) - 0.7).abs() < 0.007);
        let z = rapp_pa(&BasebandSignal::zeros(4, 1.0), &p);
        assert!(z.samples.iter().all(|v| v.norm() == 0.0));
        let x = BasebandSignal::new(vec![Complex64::from_polar(2.0, 1.1)], 1.0);
        assert!((rapp_pa(&x, &p).samples[0].arg() - 1.1).abs() < 1e-12);
        assert!(RappParams { a_sat: 0.0, ..p }.validate().is_err());
    }

    proptest! {
        #[test]
        fn rapp_is_monotone_and_bounded(a in 0.0f64..50.0, b in 0.0f64..50.0, p in 0.5f64..8.0) {
            let r = RappParams { smoothness_p: p, ..RappParams::default() };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(r.am_am(lo) <= r.am_am(hi) + 1e-15);
            prop_assert!(r.am_am(hi) <= r.a_sat + 1e-12);
        }
    }

    #[test]
    fn tone_psd_peaks_at_its_frequency() {
        let fs = 80e6;
        let f0 = 5e6;
        let s: Vec<Complex64> = (0..8192).map(|n| Complex64::from_polar(1.0, 2.0 * PI * f0 * n as f64 / fs)).collect();
        let c = psd(&BasebandSignal::new(s, fs), &PsdConfig::default()).unwrap();
        let i = (0..c.dbr.len()).max_by(|&a, &b| c.dbr[a].total_cmp(&c.dbr[b])).unwrap();
        assert!((c.freqs_hz[i] - f0).abs() < 1.0);
        assert_eq!(c.dbr[i], 0.0);
        assert!(matches!(
            psd(&BasebandSignal::zeros(10, fs), &PsdConfig::default()),
            Err(RfError::TooShort { .. })
        ));
    }

    #[test]
    fn white_noise_psd_is_flat() {
        let mut s = vec![Complex64::new(0.0, 0.0); 1 << 18];
        crate::channel::add_noise(&mut s, 1.0, 3);
        let cfg = PsdConfig {
            in_band_hz: 40e6,
            ..PsdConfig::default()
        };
        let c = psd(&BasebandSignal::new(s, 80e6), &cfg).unwrap();
        let lo = c.dbr.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(lo > -1.5, "min {lo}");
    }

    #[test]
    fn legacy_ndp_is_clean_before_pa() {
        let cfg = MaskStudyConfig::default();
        let c = psd(&ndp_burst(&cfg, false).unwrap(), &PsdConfig::default()).unwrap();
        for (f, p) in c.freqs_hz.iter().zip(&c.dbr) {
            if f.abs() > 11e6 {
                assert!(*p < -20.0, "{f} Hz at {p} dBr");
            }
        }
    }

    #[test]
    fn mask_interpolation() {
        let m = SpectralMask::default_20mhz();
        assert_eq!(m.limit(0.0), 0.0);
        assert_eq!(m.limit(-10.0), -10.0);
        assert_eq!(m.limit(15.5), -24.0);
        assert_eq!(m.limit(40.0), -40.0);
        let bad = SpectralMask {
            breakpoints: vec![(2.0, 0.0), (1.0, -1.0)],
            symmetric: true,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn edge_ramp_shapes_only_the_run_ends() {
        let x = BasebandSignal::new(
            [vec![Complex64::new(0.0, 0.0); 3], vec![Complex64::new(1.0, 0.0); 20]].concat(),
            1.0,
        );
        let y = apply_edge_ramp(&x, 4);
        assert_eq!(y.samples[..3], x.samples[..3]);
        assert!(y.samples[3].re < 0.1 && y.samples[22].re < 0.1);
        assert_eq!(y.samples[7..19], x.samples[7..19]);
        assert!((y.samples[3].re - y.samples[22].re).abs() < 1e-15);
    }

    #[test]
    fn calibrated_study_orders_the_waveforms() {
        let cfg = MaskStudyConfig::default();
        let s = run_mask_study(&cfg).unwrap();
        assert!((s.legacy.worst_excess_db - 10.9).abs() < 1e-6);
        assert!(s.secure.worst_excess_db < s.legacy.worst_excess_db);
        assert!(s.secure.frac_bins_above > s.legacy.frac_bins_above);
        // the switching ramp keeps the linear waveforms under the mask off the band edge
        for r in [&s.legacy_pre_pa, &s.secure_pre_pa] {
            assert!(r.psd.iter().filter(|(f, _)| f.abs() > 11.0).all(|(f, p)| *p < cfg.mask.limit(*f)));
        }
    }

    fn curve_from(f: impl Fn(f64) -> f64) -> PsdCurve {
        let freqs: Vec<f64> = (0..200).map(|i| (-30.0 + 0.3 * i as f64) * 1e6).collect();
        let dbr = freqs.iter().map(|&x| f(x / 1e6)).collect();
        PsdCurve { freqs_hz: freqs, dbr }
    }

    #[test]
    fn report_on_constructed_inputs() {
        let m = SpectralMask::default_20mhz();
        let r = mask_check(&curve_from(|x| m.limit(x) - 5.0), &m, 30.0).unwrap();
        assert!((r.worst_excess_db + 5.0).abs() < 1e-9);
        assert_eq!(r.frac_bins_above, 0.0);

        // every tenth bin sits 2 dB over the mask
        let c = curve_from(|x| m.limit(x) - 3.0);
        let mut c2 = c.clone();
        for i in (0..200).step_by(10) {
            c2.dbr[i] = m.limit(c.freqs_hz[i] / 1e6) + 2.0;
        }
        let r = mask_check(&c2, &m, 30.0).unwrap();
        assert!((r.frac_bins_above - 0.10).abs() < 1e-12);
        assert!((r.worst_excess_db - 2.0).abs() < 1e-9);
        assert!(r.worst_excess_db >= r.p99_margin_db);
    }

    proptest! {
        #[test]
        fn report_consistency(levels in prop::collection::vec(-50.0f64..10.0, 200)) {
            let m = SpectralMask::default_20mhz();
            let mut c = curve_from(|_| 0.0);
            c.dbr = levels;
            let r = mask_check(&c, &m, 30.0).unwrap();
            prop_assert!(r.worst_excess_db >= r.p99_margin_db);
            prop_assert_eq!(r.frac_bins_above == 0.0, r.worst_excess_db <= 0.0);
            prop_assert!((0.0..=1.0).contains(&r.frac_bins_above));
        }
    }
}
