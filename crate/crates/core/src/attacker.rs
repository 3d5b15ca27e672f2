//! Physical-layer adversary against secure HE-LTF ranging.
//!
//! Two attackers are modelled. The full-knowledge attacker already has the
//! training content (for example after a counter reuse) and simply replays an
//! advanced replica. The partial-observation attacker listens to the first
//! part of each LTF body, infers the 64-QAM content and common phase with a
//! particle method, and transmits its prediction of the remainder early.
//!
//! Inference runs a tempered sequential Monte Carlo sampler over joint
//! configurations `(X_1..X_K, beta)`. Each particle carries its residual
//! `y - A(beta) x`, so a single-tone Gibbs update costs one inner product.
//! The likelihood is raised from `gamma_min` to 1 over `n_iter` geometric
//! stages; each stage reweights, resamples systematically and performs
//! Gibbs sweeps. Marginals are the particle average of the per-tone
//! conditionals seen during the final sweeps. Each phase candidate gets its
//! own population, and the populations' evidence estimates weigh them.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{self, ChannelError};
use crate::estimation::{evm_equalized, toa_music, EstimationError, MusicConfig, SPEED_OF_LIGHT};
use crate::keyschedule::{expand_qam_grid, material_for, KeyScheduleError, LtfSeed, QamSymbolGrid};
use crate::qam::Constellation;
use crate::signal::BasebandSignal;
use crate::waveform::{
    build_subcarrier_map, demodulate_ltf, ltf_body, secure_symbol_gain, secure_tones, synth_secure_ltf, FftWindow,
    NdpConfig, SubcarrierMap, WaveformError,
};

/// Lower bound on the modelled noise variance, so noise-free observations
/// still give a proper likelihood.
pub const NOISE_VAR_FLOOR: f64 = 1e-4;
/// NLL is reported with the ground-truth mass floored here.
pub const NLL_MASS_FLOOR: f64 = 1e-16;
pub const BETA_CANDIDATES: [f64; 2] = [0.0, PI / 4.0];

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("particle weights degenerated at stage {stage}")]
    Degenerate { stage: usize },
    #[error("invalid attack scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    KeySchedule(#[from] KeyScheduleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcConfig {
    pub n_particles: usize,
    pub n_iter: usize,
    pub gamma_min: f64,
    /// Gibbs sweeps per particle after each intermediate reweighting.
    pub sweeps_per_stage: usize,
    /// Gibbs sweeps at full temperature that feed the marginals.
    pub final_sweeps: usize,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            n_particles: 300,
            n_iter: 10,
            gamma_min: 1e-3,
            sweeps_per_stage: 1,
            final_sweeps: 10,
        }
    }
}

impl SmcConfig {
    fn temperatures(&self) -> Vec<f64> {
        let t = self.n_iter.max(1);
        if t == 1 {
            return vec![1.0];
        }
        (0..t)
            .map(|i| self.gamma_min.powf((t - 1 - i) as f64 / (t - 1) as f64))
            .collect()
    }
}

/// `y = sum_k u(beta) x_k a_k + w` restricted to the observed rows.
#[derive(Debug, Clone)]
pub struct LinearModel {
    columns: Vec<Vec<Complex64>>,
    col_energy: Vec<f64>,
    alphabet: Vec<Complex64>,
    phases: Vec<Complex64>,
    noise_var: f64,
}

impl LinearModel {
    /// Columns `a_k[n] = scale * exp(i 2 pi k n / fft_size)` for `n < observed`.
    pub fn ofdm(
        tones: &[i32],
        fft_size: usize,
        scale: f64,
        observed: usize,
        alphabet: &[Complex64],
        phases: &[f64],
        noise_var: f64,
    ) -> Self {
        let columns: Vec<Vec<Complex64>> = tones
            .iter()
            .map(|&k| {
                (0..observed)
                    .map(|n| Complex64::from_polar(scale, 2.0 * PI * k as f64 * n as f64 / fft_size as f64))
                    .collect()
            })
            .collect();
        let col_energy = columns.iter().map(|c| c.iter().map(|v| v.norm_sqr()).sum()).collect();
        Self {
            columns,
            col_energy,
            alphabet: alphabet.to_vec(),
            phases: phases.iter().map(|&b| Complex64::from_polar(1.0, b)).collect(),
            noise_var,
        }
    }

    pub fn n_tones(&self) -> usize {
        self.columns.len()
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.len())
    }

    pub fn alphabet(&self) -> &[Complex64] {
        &self.alphabet
    }

    pub fn phases(&self) -> &[Complex64] {
        &self.phases
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// Noise-free model output for a configuration.
    pub fn mean(&self, symbols: &[usize], phase: usize) -> Vec<Complex64> {
        let u = self.phases[phase];
        let mut out = vec![Complex64::new(0.0, 0.0); self.n_rows()];
        for (col, &s) in self.columns.iter().zip(symbols) {
            let c = u * self.alphabet[s];
            for (o, a) in out.iter_mut().zip(col) {
                *o += c * a;
            }
        }
        out
    }

    /// `-|y - mean|^2 / noise_var`.
    pub fn log_likelihood(&self, y: &[Complex64], symbols: &[usize], phase: usize) -> f64 {
        let m = self.mean(symbols, phase);
        -y.iter().zip(&m).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / self.noise_var
    }
}

#[derive(Debug, Clone)]
struct Particle {
    symbols: Vec<u16>,
    phase: usize,
    residual: Vec<Complex64>,
    sq_norm: f64,
}

fn softmax_in_place(logits: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in logits.iter_mut() {
        *v /= s;
    }
}

fn sample_index(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn systematic_resample(weights: &[f64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = weights.len();
    let start: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut acc = weights[0];
    let mut j = 0;
    for i in 0..n {
        let u = start + i as f64 / n as f64;
        while u > acc && j + 1 < n {
            j += 1;
            acc += weights[j];
        }
        out.push(j);
    }
    out
}

struct Sweeper<'a> {
    model: &'a LinearModel,
    logits: Vec<f64>,
}

impl Sweeper<'_> {
    /// One Gibbs sweep over the symbols at inverse temperature `gamma`.
    /// When `acc` is given, the conditional pmfs are added to it.
    fn sweep(&mut self, p: &mut Particle, gamma: f64, rng: &mut ChaCha8Rng, mut acc: Option<&mut [Vec<f64>]>) {
        let model = self.model;
        let prec = gamma / model.noise_var;
        let u = model.phases[p.phase];
        for k in 0..model.n_tones() {
            let col = &model.columns[k];
            let z: Complex64 = col.iter().zip(&p.residual).map(|(a, r)| a.conj() * r).sum();
            let cur = model.alphabet[p.symbols[k] as usize];
            let e = model.col_energy[k];
            for (v, c) in model.alphabet.iter().enumerate() {
                // residual after swapping tone k to symbol v is r + delta a_k
                let delta = u * (cur - c);
                let d = 2.0 * (delta * z.conj()).re + delta.norm_sqr() * e;
                self.logits[v] = -prec * d;
            }
            softmax_in_place(&mut self.logits);
            if let Some(pm) = acc.as_mut() {
                for (a, q) in pm[k].iter_mut().zip(&self.logits) {
                    *a += q;
                }
            }
            let v = sample_index(&self.logits, rng);
            if v != p.symbols[k] as usize {
                let delta = u * (cur - model.alphabet[v]);
                for (r, a) in p.residual.iter_mut().zip(col) {
                    *r += delta * a;
                }
                p.symbols[k] = v as u16;
            }
        }
        p.sq_norm = p.residual.iter().map(|v| v.norm_sqr()).sum();
    }
}

/// Approximate marginals over symbols and phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub symbol_pmfs: Vec<Vec<f64>>,
    pub beta_pmf: Vec<f64>,
}

/// Tempered SMC with the phase held fixed. Returns the symbol marginals and
/// the log evidence estimate (up to a constant shared by all phases).
fn smc_fixed_phase(
    model: &LinearModel,
    y: &[Complex64],
    cfg: &SmcConfig,
    phase: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, f64), AttackError> {
    let k = model.n_tones();
    let q = model.alphabet.len();
    let n = cfg.n_particles;
    let mut particles: Vec<Particle> = (0..n)
        .map(|_| {
            let symbols: Vec<u16> = (0..k).map(|_| rng.random_range(0..q) as u16).collect();
            let idx: Vec<usize> = symbols.iter().map(|&s| s as usize).collect();
            let m = model.mean(&idx, phase);
            let residual: Vec<Complex64> = y.iter().zip(&m).map(|(a, b)| a - b).collect();
            let sq_norm = residual.iter().map(|v| v.norm_sqr()).sum();
            Particle {
                symbols,
                phase,
                residual,
                sq_norm,
            }
        })
        .collect();

    let mut sweeper = Sweeper {
        model,
        logits: vec![0.0; q],
    };
    let mut log_z = 0.0;
    let mut prev = 0.0;
    let temps = cfg.temperatures();
    for (stage, &gamma) in temps.iter().enumerate() {
        let dg = gamma - prev;
        prev = gamma;
        let mut w: Vec<f64> = particles.iter().map(|p| -dg * p.sq_norm / model.noise_var).collect();
        let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() || w.iter().any(|v| v.is_nan()) {
            return Err(AttackError::Degenerate { stage });
        }
        let mut total = 0.0;
        for v in w.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        log_z += m + (total / n as f64).ln();
        w.iter_mut().for_each(|v| *v /= total);
        let picks = systematic_resample(&w, rng);
        particles = picks.iter().map(|&i| particles[i].clone()).collect();
        if stage + 1 < temps.len() {
            for _ in 0..cfg.sweeps_per_stage {
                for p in particles.iter_mut() {
                    sweeper.sweep(p, gamma, rng, None);
                }
            }
        }
    }

    let mut pm = vec![vec![0.0; q]; k];
    for _ in 0..cfg.final_sweeps.max(1) {
        for p in particles.iter_mut() {
            sweeper.sweep(p, 1.0, rng, Some(pm.as_mut_slice()));
        }
    }
    for row in pm.iter_mut() {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok((pm, log_z))
}

/// Runs one tempered population per phase candidate; the phase posterior
/// follows from the populations' evidence estimates and the symbol
/// marginals are the phase-weighted mixture.
pub fn run_smc(model: &LinearModel, y: &[Complex64], cfg: &SmcConfig, seed: u64) -> Result<Marginals, AttackError> {
    if cfg.n_particles == 0 {
        return Err(AttackError::InvalidScenario("n_particles must be >= 1".into()));
    }
    if y.len() != model.n_rows() {
        return Err(AttackError::InvalidScenario(format!(
            "{} observations for a {}-row model",
            y.len(),
            model.n_rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(model.phases.len());
    for phase in 0..model.phases.len() {
        runs.push(smc_fixed_phase(model, y, cfg, phase, &mut rng)?);
    }
    let mut beta: Vec<f64> = runs.iter().map(|(_, z)| *z).collect();
    if beta.iter().any(|z| !z.is_finite()) {
        return Err(AttackError::Degenerate { stage: cfg.n_iter });
    }
    softmax_in_place(&mut beta);
    let k = model.n_tones();
    let q = model.alphabet.len();
    let mut pm = vec![vec![0.0; q]; k];
    for ((marg, _), wb) in runs.iter().zip(&beta) {
        for (acc, row) in pm.iter_mut().zip(marg) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += wb * v;
            }
        }
    }
    Ok(Marginals {
        symbol_pmfs: pm,
        beta_pmf: beta,
    })
}

/// What the attacker sees of one LTF body.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    pub fraction: f64,
    pub observed_samples: Vec<Complex64>,
    pub snr_db: f64,
    /// Full body length at the observer's sample rate.
    pub body_len: usize,
    pub sample_rate_hz: f64,
}

impl ObservationWindow {
    pub fn observed_len(fraction: f64, body_len: usize) -> usize {
        ((fraction * body_len as f64).round() as usize).min(body_len)
    }

    /// Prefix of `body` plus the attacker's own receiver noise.
    pub fn capture(body: &[Complex64], sample_rate_hz: f64, fraction: f64, snr_db: f64, seed: u64) -> Self {
        let m = Self::observed_len(fraction, body.len());
        let mut observed = body[..m].to_vec();
        let var = channel::noise_variance(channel::support_power(body), snr_db);
        channel::add_noise(&mut observed, var, seed);
        Self {
            fraction,
            observed_samples: observed,
            snr_db,
            body_len: body.len(),
            sample_rate_hz,
        }
    }

    pub fn m(&self) -> usize {
        self.observed_samples.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub symbol_pmfs: Vec<Vec<f64>>,
    pub beta_pmf: Vec<f64>,
    pub map_symbols: Vec<u8>,
    pub map_beta: u8,
    /// Mean per-tone entropy in nats.
    pub entropy: f64,
    /// Mean per-tone NLL of the true symbols in nats, once evaluated.
    pub nll: Option<f64>,
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap_or(0)
}

impl PosteriorSummary {
    pub fn from_marginals(m: Marginals) -> Self {
        let map_symbols = m.symbol_pmfs.iter().map(|p| argmax(p) as u8).collect();
        let entropy = m
            .symbol_pmfs
            .iter()
            .map(|p| -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
            .sum::<f64>()
            / m.symbol_pmfs.len().max(1) as f64;
        Self {
            map_beta: argmax(&m.beta_pmf) as u8,
            map_symbols,
            entropy: entropy.max(0.0),
            symbol_pmfs: m.symbol_pmfs,
            beta_pmf: m.beta_pmf,
            nll: None,
        }
    }

    pub fn nll_of(&self, truth: &[u8]) -> f64 {
        self.symbol_pmfs
            .iter()
            .zip(truth)
            .map(|(p, &t)| -p[t as usize].max(NLL_MASS_FLOOR).ln())
            .sum::<f64>()
            / truth.len().max(1) as f64
    }

    pub fn with_truth(mut self, truth: &[u8]) -> Self {
        self.nll = Some(self.nll_of(truth));
        self
    }

    /// Tones the attacker would transmit: the MAP symbols, rotated by the
    /// MAP phase and normalized like a legitimate secure symbol.
    pub fn predicted_tones(&self) -> Vec<Complex64> {
        let qam = Constellation::qam64();
        let rot = Complex64::from_polar(1.0, BETA_CANDIDATES[self.map_beta as usize]);
        let raw: Vec<Complex64> = self.map_symbols.iter().map(|&i| qam.point(i as usize) * rot).collect();
        let g = secure_symbol_gain(&raw);
        raw.into_iter().map(|t| t * g).collect()
    }
}

fn secure_model(obs: &ObservationWindow, map: &SubcarrierMap) -> LinearModel {
    let noise_var = channel::noise_variance(1.0, obs.snr_db).max(NOISE_VAR_FLOOR);
    LinearModel::ofdm(
        &map.active,
        2 * obs.body_len,
        1.0 / (map.n_active() as f64).sqrt(),
        obs.m(),
        Constellation::qam64().points(),
        &BETA_CANDIDATES,
        noise_var,
    )
}

pub fn infer_posterior(
    obs: &ObservationWindow,
    map: &SubcarrierMap,
    cfg: &SmcConfig,
    seed: u64,
) -> Result<PosteriorSummary, AttackError> {
    if !(obs.fraction > 0.0 && obs.fraction <= 1.0) || obs.m() == 0 {
        return Err(AttackError::InvalidScenario(format!(
            "observation fraction {} leaves no samples",
            obs.fraction
        )));
    }
    let model = secure_model(obs, map);
    Ok(PosteriorSummary::from_marginals(run_smc(&model, &obs.observed_samples, cfg, seed)?))
}

/// Predicted body over the whole symbol at the observer's rate.
pub fn predict_body(post: &PosteriorSummary, obs: &ObservationWindow, map: &SubcarrierMap) -> Vec<Complex64> {
    let n = 2 * obs.body_len;
    let c = 1.0 / (map.n_active() as f64).sqrt();
    let tones = post.predicted_tones();
    (0..obs.body_len)
        .map(|t| {
            map.active
                .iter()
                .zip(&tones)
                .map(|(&k, x)| x * Complex64::from_polar(c, 2.0 * PI * k as f64 * t as f64 / n as f64))
                .sum()
        })
        .collect()
}

/// Prediction on the unobserved samples `M..body_len`.
pub fn predict_remainder(post: &PosteriorSummary, obs: &ObservationWindow, map: &SubcarrierMap) -> BasebandSignal {
    let body = predict_body(post, obs, map);
    BasebandSignal::new(body[obs.m()..].to_vec(), obs.sample_rate_hz)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub symbol_rmse: f64,
    pub beta_correct: bool,
    pub entropy: f64,
    pub nll: f64,
    pub rmse_observed: f64,
    pub rmse_unobserved: f64,
}

/// Scores a posterior against the true symbols and the clean body.
pub fn evaluate_prediction(
    post: &PosteriorSummary,
    obs: &ObservationWindow,
    map: &SubcarrierMap,
    truth: &[u8],
    true_beta: u8,
    clean_body: &[Complex64],
) -> PredictionMetrics {
    let qam = Constellation::qam64();
    let symbol_rmse = (post
        .map_symbols
        .iter()
        .zip(truth)
        .map(|(&a, &b)| (qam.point(a as usize) - qam.point(b as usize)).norm_sqr())
        .sum::<f64>()
        / truth.len() as f64)
        .sqrt();
    let pred = predict_body(post, obs, map);
    let m = obs.m();
    let rmse = |r: std::ops::Range<usize>| {
        if r.is_empty() {
            return 0.0;
        }
        let n = r.len() as f64;
        (r.map(|i| (pred[i] - clean_body[i]).norm_sqr()).sum::<f64>() / n).sqrt()
    };
    PredictionMetrics {
        symbol_rmse,
        beta_correct: post.map_beta == true_beta,
        entropy: post.entropy,
        nll: post.nll_of(truth),
        rmse_observed: rmse(0..m),
        rmse_unobserved: rmse(m..obs.body_len),
    }
}

/// Fresh secure content for a Monte Carlo run.
pub fn victim_grid(seed: u64, n_ltf: usize, n_active: usize) -> Result<QamSymbolGrid, AttackError> {
    let ltf_seed = LtfSeed::derive_from(&seed.to_be_bytes(), b"victim");
    Ok(expand_qam_grid(&material_for(&ltf_seed, 0), n_ltf, n_active)?)
}

/// One prediction experiment: capture a fraction of the first LTF body,
/// infer, and score.
pub fn prediction_trial(
    fraction: f64,
    snr_db: f64,
    cfg: &SmcConfig,
    seed: u64,
) -> Result<PredictionMetrics, AttackError> {
    let map = build_subcarrier_map(20)?;
    let ndp = NdpConfig::secure(20, 1);
    let grid = victim_grid(seed, 1, map.n_active())?;
    let tones = secure_tones(&grid);
    let body = ltf_body(&ndp, &map, &tones.symbols[0]);
    let obs = ObservationWindow::capture(&body, ndp.sample_rate_hz(), fraction, snr_db, seed ^ 0x6f62_7365);
    let post = infer_posterior(&obs, &map, cfg, seed ^ 0x736d_6300)?;
    Ok(evaluate_prediction(
        &post,
        &obs,
        &map,
        &grid.symbols[0],
        grid.beta[0],
        &body,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackMode {
    FullKnowledge,
    Partial { fraction: f64 },
}

impl AttackMode {
    pub fn observed_fraction(&self) -> f64 {
        match self {
            Self::FullKnowledge => 1.0,
            Self::Partial { fraction } => *fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub mode: AttackMode,
    /// Positive values advance the replica.
    pub advance_s: f64,
    pub snr_db: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub bandwidth_mhz: u32,
    pub oversample: usize,
    pub n_ltf: usize,
    /// True one-way propagation delay of the victim link.
    pub baseline_delay_s: f64,
    pub evm_threshold_pct: f64,
    pub smc: SmcConfig,
    pub music: MusicConfig,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            bandwidth_mhz: 20,
            oversample: 4,
            n_ltf: 1,
            baseline_delay_s: 100e-9,
            evm_threshold_pct: 8.0,
            smc: SmcConfig::default(),
            music: MusicConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub advance_s: f64,
    pub observed_fraction: f64,
    pub distance_bias_m: f64,
    pub evm_percent: f64,
    pub demod_ok: bool,
    pub toa_baseline_s: f64,
    pub toa_attacked_s: f64,
}

const MAX_ADVANCE_S: f64 = 100e-9;

/// Runs one mode over several advances, sharing the victim, the baseline
/// estimate and (for partial observation) the posterior across advances.
pub fn run_attack_sweep(
    mode: AttackMode,
    advances_s: &[f64],
    snr_db: f64,
    seed: u64,
    settings: &AttackSettings,
) -> Result<Vec<AttackResult>, AttackError> {
    if let AttackMode::Partial { fraction } = mode {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(AttackError::InvalidScenario(format!("fraction {fraction} outside (0, 1]")));
        }
    }
    if let Some(a) = advances_s.iter().find(|a| a.is_nan() || a.abs() > MAX_ADVANCE_S) {
        return Err(AttackError::InvalidScenario(format!("advance {a} s outside +-100 ns")));
    }
    let map = build_subcarrier_map(settings.bandwidth_mhz)?;
    let cfg = NdpConfig::secure(settings.bandwidth_mhz, settings.n_ltf).with_oversample(settings.oversample);
    cfg.validate()?;
    let fs = cfg.sample_rate_hz();
    let grid = victim_grid(seed, settings.n_ltf, map.n_active())?;
    let tx = secure_tones(&grid);
    let clean = synth_secure_ltf(&cfg, &grid, &map)?;
    let d0 = settings.baseline_delay_s;
    let noise_var = channel::noise_variance(channel::support_power(&clean.samples), snr_db);
    let noise_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ snr_db.to_bits();

    let with_noise = |mut s: BasebandSignal| {
        channel::add_noise(&mut s.samples, noise_var, noise_seed);
        s
    };
    let victim = channel::delay(&clean, d0);
    let baseline = with_noise(victim.clone());
    let toa_base = toa_music(&baseline, &grid, &cfg, &map, &settings.music)?.toa_s;

    // partial mode: predicted tones per LTF symbol, inferred at the base rate
    let (observed_os, predicted) = match mode {
        AttackMode::FullKnowledge => (0, None),
        AttackMode::Partial { fraction } => {
            let base = NdpConfig::secure(settings.bandwidth_mhz, settings.n_ltf);
            let mut rows = Vec::with_capacity(settings.n_ltf);
            for (s, row) in tx.symbols.iter().enumerate() {
                let body = ltf_body(&base, &map, row);
                let obs = ObservationWindow::capture(
                    &body,
                    base.sample_rate_hz(),
                    fraction,
                    snr_db,
                    seed ^ (0xa77a_c4e5 + s as u64),
                );
                let post = infer_posterior(&obs, &map, &settings.smc, seed ^ (0x5eed_0000 + s as u64))?;
                rows.push(post.predicted_tones());
            }
            let m = ObservationWindow::observed_len(fraction, base.body_len());
            (m * settings.oversample, Some(rows))
        }
    };

    let mut out = Vec::with_capacity(advances_s.len());
    for &advance in advances_s {
        let shift = d0 - advance;
        let attacked = match &predicted {
            None => channel::inject(
                &victim,
                &channel::InjectionSpec {
                    replica: clean.clone(),
                    offset_s: shift,
                    cancel_legitimate_from: Some(0),
                },
            )?,
            Some(rows) => {
                // replica carries only the predicted tail of each body
                let mut replica = vec![Complex64::new(0.0, 0.0); cfg.total_len()];
                let mut gated = victim.samples.clone();
                for (s, row) in rows.iter().enumerate() {
                    let body = ltf_body(&cfg, &map, row);
                    let b0 = cfg.body_start(s);
                    replica[b0 + observed_os..b0 + cfg.body_len()].copy_from_slice(&body[observed_os..]);
                    // the legitimate signal is replaced from the moment the
                    // replica's tail starts arriving until the next symbol
                    let cut = (b0 as f64 + observed_os as f64 + shift * fs).ceil().max(0.0) as usize;
                    let end = if s + 1 == rows.len() {
                        gated.len()
                    } else {
                        cfg.symbol_start(s + 1) + cfg.gi_len() / 2
                    };
                    gated[cut.min(end)..end].iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                }
                channel::inject(
                    &BasebandSignal::new(gated, fs),
                    &channel::InjectionSpec {
                        replica: BasebandSignal::new(replica, fs),
                        offset_s: shift,
                        cancel_legitimate_from: None,
                    },
                )?
            }
        };
        let rx = with_noise(attacked);
        let toa_att = toa_music(&rx, &grid, &cfg, &map, &settings.music)?.toa_s;
        let tones = demodulate_ltf(&rx, &cfg, &map, FftWindow::Extended)?;
        let evm = evm_equalized(&tones, &tx.symbols, &map.active_freqs_hz(&cfg))?;
        out.push(AttackResult {
            advance_s: advance,
            observed_fraction: mode.observed_fraction(),
            distance_bias_m: SPEED_OF_LIGHT * (toa_att - toa_base),
            evm_percent: evm,
            demod_ok: evm < settings.evm_threshold_pct,
            toa_baseline_s: toa_base,
            toa_attacked_s: toa_att,
        });
    }
    Ok(out)
}

pub fn run_distance_attack(scenario: &AttackScenario, settings: &AttackSettings) -> Result<AttackResult, AttackError> {
    let mut r = run_attack_sweep(
        scenario.mode,
        &[scenario.advance_s],
        scenario.snr_db,
        scenario.seed,
        settings,
    )?;
    Ok(r.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: exact marginals by enumerating every
    /// configuration of a small model.
    fn enumerate(model: &LinearModel, y: &[Complex64]) -> Marginals {
        let k = model.n_tones();
        let q = model.alphabet().len();
        let nb = model.phases().len();
        let total = q.pow(k as u32) * nb;
        let mut logs = Vec::with_capacity(total);
        let mut configs = Vec::with_capacity(total);
        for idx in 0..total {
            let mut rest = idx;
            let phase = rest % nb;
            rest /= nb;
            let symbols: Vec<usize> = (0..k)
                .map(|_| {
                    let s = rest % q;
                    rest /= q;
                    s
                })
                .collect();
            logs.push(model.log_likelihood(y, &symbols, phase));
            configs.push((symbols, phase));
        }
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut pm = vec![vec![0.0; q]; k];
        let mut bp = vec![0.0; nb];
        for (wi, (s, b)) in w.iter().zip(&configs) {
            for (t, &v) in s.iter().enumerate() {
                pm[t][v] += wi / z;
            }
            bp[*b] += wi / z;
        }
        Marginals {
            symbol_pmfs: pm,
            beta_pmf: bp,
        }
    }

    fn small_instance(seed: u64) -> (LinearModel, Vec<Complex64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qpsk = Constellation::qpsk();
        let noise_var = 10f64.powf(-0.5);
        let model = LinearModel::ofdm(&[-4, -2, 2, 4], 16, 0.5, 3, qpsk.points(), &BETA_CANDIDATES, noise_var);
        let truth: Vec<usize> = (0..4).map(|_| rng.random_range(0..4)).collect();
        let mut y = model.mean(&truth, rng.random_range(0..2));
        channel::add_noise(&mut y, noise_var, seed + 1000);
        (model, y)
    }

    fn tv(a: &[f64], b: &[f64]) -> f64 {
        0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    }

    #[test]
    fn particle_marginals_match_enumeration() {
        let cfg = SmcConfig {
            n_particles: 10_000,
            ..SmcConfig::default()
        };
        for inst in 0..3 {
            let (model, y) = small_instance(inst);
            let exact = enumerate(&model, &y);
            let approx = run_smc(&model, &y, &cfg, inst).unwrap();
            for (a, b) in exact.symbol_pmfs.iter().zip(&approx.symbol_pmfs) {
                assert!(tv(a, b) <= 0.05, "instance {inst}: {a:?} vs {b:?}");
            }
            assert!(tv(&exact.beta_pmf, &approx.beta_pmf) <= 0.05);
        }
    }

    #[test]
    fn pmfs_normalize_and_entropy_bounded() {
        let (model, y) = small_instance(7);
        let m = run_smc(&model, &y, &SmcConfig::default(), 1).unwrap();
        for p in m.symbol_pmfs.iter().chain(std::iter::once(&m.beta_pmf)) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
        let s = PosteriorSummary::from_marginals(m);
        assert!(s.entropy >= 0.0 && s.entropy <= 4f64.ln() + 1e-12);
        assert!(s.nll_of(&[0, 1, 2, 3]).is_finite());
    }

    #[test]
    fn full_noise_free_observation_recovers_truth() {
        let map = build_subcarrier_map(20).unwrap();
        let ndp = NdpConfig::secure(20, 1);
        let grid = victim_grid(3, 1, 122).unwrap();
        let body = ltf_body(&ndp, &map, &secure_tones(&grid).symbols[0]);
        let obs = ObservationWindow::capture(&body, ndp.sample_rate_hz(), 1.0, f64::INFINITY, 0);
        assert_eq!(obs.m(), 128);
        let post = infer_posterior(&obs, &map, &SmcConfig::default(), 4)
            .unwrap()
            .with_truth(&grid.symbols[0]);
        assert_eq!(post.map_symbols, grid.symbols[0]);
        assert_eq!(post.map_beta, grid.beta[0]);
        assert!(post.nll.unwrap() < 1e-3);
        let rem = predict_remainder(&post, &obs, &map);
        assert!(rem.is_empty());
        let pred = predict_body(&post, &obs, &map);
        let err = pred.iter().zip(&body).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn inference_is_reproducible() {
        let a = prediction_trial(0.5, 7.0, &SmcConfig { n_particles: 20, ..SmcConfig::default() }, 9).unwrap();
        let b = prediction_trial(0.5, 7.0, &SmcConfig { n_particles: 20, ..SmcConfig::default() }, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn observation_length_rounds() {
        assert_eq!(ObservationWindow::observed_len(0.8, 128), 102);
        assert_eq!(ObservationWindow::observed_len(0.2, 128), 26);
    }

    #[test]
    fn full_knowledge_bias_tracks_advance() {
        let settings = AttackSettings::default();
        let r = run_attack_sweep(AttackMode::FullKnowledge, &[0.0, 10e-9, -10e-9], 25.0, 1, &settings).unwrap();
        assert!(r[0].distance_bias_m.abs() < 0.1);
        let want = -SPEED_OF_LIGHT * 10e-9;
        assert!((r[1].distance_bias_m - want).abs() <= 0.15 * want.abs());
        assert!(r[2].distance_bias_m > 0.0);
        assert!(r.iter().all(|x| x.demod_ok), "{r:?}");
    }

    #[test]
    fn rejects_out_of_range_scenarios() {
        let s = AttackSettings::default();
        assert!(run_attack_sweep(AttackMode::FullKnowledge, &[150e-9], 25.0, 0, &s).is_err());
        assert!(run_attack_sweep(AttackMode::Partial { fraction: 0.0 }, &[0.0], 25.0, 0, &s).is_err());
    }
}
