//! The five studies. Each returns stamped artifacts plus a short summary.

use ftmsec_core::attacker::{prediction_trial, run_attack_sweep, AttackMode};
use ftmsec_core::estimation::SPEED_OF_LIGHT;
use ftmsec_core::protocol::{
    builtin_scenarios, run_scenario, run_session, validate_transcript, AdversaryScript, Event, KeyKind, KeyParams,
    KeySetup, PhyMode, Scenario, SessionConfig, StationPolicy,
};
use ftmsec_core::rfmodel::{run_mask_study, MaskReport, MaskStudyConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{config_hash, AttackConfig, ExperimentConfig, LtfChoice, PredictConfig, RangeConfig};
use crate::output::{RunOutput, Stamp};
use crate::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Seed of repetition `rep`; shared across cells so sweeps use common
/// random numbers.
pub fn trial_seed(seed: u64, rep: u32) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(rep as u64)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

// ---- range -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RangeRow {
    pub burst: u32,
    pub distance_m: f64,
    pub error_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RangeSummary {
    pub true_distance_m: f64,
    pub bursts: u32,
    pub completed: u32,
    pub mean_m: f64,
    pub std_m: f64,
    pub mean_abs_error_m: f64,
    pub secure_ltf: bool,
}

/// Honest session with MUSIC timing on every NDP.
pub fn range_bursts(r: &RangeConfig, seed: u64) -> Result<(Vec<RangeRow>, RangeSummary), CliError> {
    let policy = match r.ltf {
        LtfChoice::Secure => StationPolicy::strict(),
        LtfChoice::Legacy => StationPolicy {
            supports_secure_ltf: false,
            ..StationPolicy::permissive()
        },
    };
    let setup = KeySetup {
        kind: KeyKind::Enterprise,
        params: KeyParams::default(),
        knowledge: Default::default(),
    };
    let cfg = SessionConfig {
        n_instances: r.n_bursts,
        true_distance_m: r.true_distance_m,
        phy: PhyMode::Integration {
            snr_db: r.snr_db,
            oversample: r.oversample,
        },
        seed,
        ..SessionConfig::default()
    };
    let report = run_session(&policy, &policy, &setup, &AdversaryScript::empty(), &cfg).map_err(runtime)?;
    let rows: Vec<RangeRow> = report
        .transcript
        .events
        .iter()
        .filter_map(|e| match e.event {
            Event::Measurement {
                instance,
                valid: true,
                distance_m: Some(d),
                ..
            } => Some(RangeRow {
                burst: instance,
                distance_m: d,
                error_m: d - r.true_distance_m,
            }),
            _ => None,
        })
        .collect();
    let d: Vec<f64> = rows.iter().map(|x| x.distance_m).collect();
    let errs: Vec<f64> = rows.iter().map(|x| x.error_m.abs()).collect();
    let summary = RangeSummary {
        true_distance_m: r.true_distance_m,
        bursts: r.n_bursts,
        completed: rows.len() as u32,
        mean_m: mean(&d),
        std_m: std_dev(&d),
        mean_abs_error_m: mean(&errs),
        secure_ltf: report.outcome.secure_ltf_used,
    };
    Ok((rows, summary))
}

pub fn range(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let stamp = Stamp {
        config_hash: config_hash("range", cfg.seed, &cfg.range),
        seed: cfg.seed,
    };
    let (rows, summary) = range_bursts(&cfg.range, cfg.seed)?;
    if rows.is_empty() {
        return Err(CliError::Runtime("no burst produced a distance estimate".into()));
    }
    Ok(RunOutput {
        summary: format!(
            "range: {}/{} bursts, mean {:.3} m (true {:.3} m), std {:.3} m",
            summary.completed, summary.bursts, summary.mean_m, summary.true_distance_m, summary.std_m
        ),
        artifacts: vec![
            stamp.csv("range.csv", "ftmsec.range.v1", &rows)?,
            stamp.json("range_summary.json", &summary)?,
        ],
        config_hash: stamp.config_hash,
    })
}

// ---- predict -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictTrial {
    pub fraction: f64,
    pub snr_db: f64,
    pub rep: u32,
    pub symbol_rmse: f64,
    pub beta_correct: bool,
    pub entropy: f64,
    pub nll: f64,
    pub rmse_observed: f64,
    pub rmse_unobserved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictCell {
    pub fraction: f64,
    pub snr_db: f64,
    pub repetitions: u32,
    pub symbol_rmse_mean: f64,
    pub beta_accuracy: f64,
    pub entropy_mean: f64,
    pub nll_mean: f64,
    pub rmse_observed_mean: f64,
    pub rmse_unobserved_mean: f64,
}

/// Every (fraction, snr, repetition) trial, in sweep order.
pub fn prediction_trials(p: &PredictConfig, seed: u64) -> Result<Vec<PredictTrial>, CliError> {
    let tasks: Vec<(f64, f64, u32)> = p
        .fractions
        .iter()
        .flat_map(|&f| p.snrs_db.iter().flat_map(move |&s| (0..p.repetitions).map(move |r| (f, s, r))))
        .collect();
    tasks
        .par_iter()
        .map(|&(fraction, snr_db, rep)| {
            let m = prediction_trial(fraction, snr_db, &p.smc, trial_seed(seed, rep)).map_err(runtime)?;
            Ok(PredictTrial {
                fraction,
                snr_db,
                rep,
                symbol_rmse: m.symbol_rmse,
                beta_correct: m.beta_correct,
                entropy: m.entropy,
                nll: m.nll,
                rmse_observed: m.rmse_observed,
                rmse_unobserved: m.rmse_unobserved,
            })
        })
        .collect()
}

pub fn summarize_prediction(p: &PredictConfig, trials: &[PredictTrial]) -> Vec<PredictCell> {
    let mut cells = Vec::new();
    for &fraction in &p.fractions {
        for &snr_db in &p.snrs_db {
            let t: Vec<&PredictTrial> = trials
                .iter()
                .filter(|t| t.fraction == fraction && t.snr_db == snr_db)
                .collect();
            let col = |f: fn(&PredictTrial) -> f64| mean(&t.iter().map(|x| f(x)).collect::<Vec<_>>());
            cells.push(PredictCell {
                fraction,
                snr_db,
                repetitions: t.len() as u32,
                symbol_rmse_mean: col(|x| x.symbol_rmse),
                beta_accuracy: col(|x| x.beta_correct as u8 as f64),
                entropy_mean: col(|x| x.entropy),
                nll_mean: col(|x| x.nll),
                rmse_observed_mean: col(|x| x.rmse_observed),
                rmse_unobserved_mean: col(|x| x.rmse_unobserved),
            });
        }
    }
    cells
}

pub fn predict(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let stamp = Stamp {
        config_hash: config_hash("predict", cfg.seed, &cfg.predict),
        seed: cfg.seed,
    };
    let trials = prediction_trials(&cfg.predict, cfg.seed)?;
    let cells = summarize_prediction(&cfg.predict, &trials);
    let summary = cells
        .iter()
        .map(|c| {
            format!(
                "fraction {:.2} snr {:>5.1} dB: symbol rmse {:.3}, beta acc {:.2}, entropy {:.3}, nll {:.3}",
                c.fraction, c.snr_db, c.symbol_rmse_mean, c.beta_accuracy, c.entropy_mean, c.nll_mean
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    Ok(RunOutput {
        summary,
        artifacts: vec![
            stamp.csv("predict.csv", "ftmsec.predict.v1", &cells)?,
            stamp.csv("predict_trials.csv", "ftmsec.predict_trials.v1", &trials)?,
        ],
        config_hash: stamp.config_hash,
    })
}

// ---- attack ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackTrial {
    pub mode: &'static str,
    pub observed_fraction: f64,
    pub snr_db: f64,
    pub rep: u32,
    pub advance_ns: f64,
    pub bias_m: f64,
    pub evm_pct: f64,
    pub demod_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackCell {
    pub mode: &'static str,
    pub observed_fraction: f64,
    pub snr_db: f64,
    pub advance_ns: f64,
    pub repetitions: u32,
    pub bias_mean_m: f64,
    pub bias_std_m: f64,
    /// `-c * advance`, what a perfect replica would achieve.
    pub ideal_bias_m: f64,
    pub evm_mean_pct: f64,
    pub demod_ok_rate: f64,
}

fn modes(a: &AttackConfig) -> Vec<AttackMode> {
    let mut m = Vec::new();
    if a.full_knowledge {
        m.push(AttackMode::FullKnowledge);
    }
    m.extend(a.fractions.iter().map(|&fraction| AttackMode::Partial { fraction }));
    m
}

fn mode_name(m: AttackMode) -> &'static str {
    match m {
        AttackMode::FullKnowledge => "full_knowledge",
        AttackMode::Partial { .. } => "partial",
    }
}

/// One advance sweep per (mode, snr, repetition), flattened in sweep order.
pub fn attack_trials(a: &AttackConfig, seed: u64) -> Result<Vec<AttackTrial>, CliError> {
    let advances: Vec<f64> = a.advances_ns.iter().map(|x| x * 1e-9).collect();
    let tasks: Vec<(AttackMode, f64, u32)> = modes(a)
        .into_iter()
        .flat_map(|m| a.snrs_db.iter().flat_map(move |&s| (0..a.repetitions).map(move |r| (m, s, r))))
        .collect();
    let sweeps: Vec<Vec<AttackTrial>> = tasks
        .par_iter()
        .map(|&(mode, snr_db, rep)| {
            let res = run_attack_sweep(mode, &advances, snr_db, trial_seed(seed, rep), &a.settings).map_err(runtime)?;
            Ok(res
                .into_iter()
                .zip(&a.advances_ns)
                .map(|(r, &advance_ns)| AttackTrial {
                    mode: mode_name(mode),
                    observed_fraction: r.observed_fraction,
                    snr_db,
                    rep,
                    advance_ns,
                    bias_m: r.distance_bias_m,
                    evm_pct: r.evm_percent,
                    demod_ok: r.demod_ok,
                })
                .collect())
        })
        .collect::<Result<_, CliError>>()?;
    Ok(sweeps.into_iter().flatten().collect())
}

pub fn summarize_attack(a: &AttackConfig, trials: &[AttackTrial]) -> Vec<AttackCell> {
    let mut cells = Vec::new();
    for m in modes(a) {
        let frac = m.observed_fraction();
        for &snr_db in &a.snrs_db {
            for &advance_ns in &a.advances_ns {
                let t: Vec<&AttackTrial> = trials
                    .iter()
                    .filter(|t| {
                        t.mode == mode_name(m)
                            && t.observed_fraction == frac
                            && t.snr_db == snr_db
                            && t.advance_ns == advance_ns
                    })
                    .collect();
                let bias: Vec<f64> = t.iter().map(|x| x.bias_m).collect();
                cells.push(AttackCell {
                    mode: mode_name(m),
                    observed_fraction: frac,
                    snr_db,
                    advance_ns,
                    repetitions: t.len() as u32,
                    bias_mean_m: mean(&bias),
                    bias_std_m: std_dev(&bias),
                    ideal_bias_m: -SPEED_OF_LIGHT * advance_ns * 1e-9,
                    evm_mean_pct: mean(&t.iter().map(|x| x.evm_pct).collect::<Vec<_>>()),
                    demod_ok_rate: mean(&t.iter().map(|x| x.demod_ok as u8 as f64).collect::<Vec<_>>()),
                });
            }
        }
    }
    cells
}

pub fn attack(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let stamp = Stamp {
        config_hash: config_hash("attack", cfg.seed, &cfg.attack),
        seed: cfg.seed,
    };
    let trials = attack_trials(&cfg.attack, cfg.seed)?;
    let cells = summarize_attack(&cfg.attack, &trials);
    let summary = cells
        .iter()
        .filter(|c| c.advance_ns == 20.0)
        .map(|c| {
            format!(
                "{} fraction {:.2} snr {:>4.1} dB @20 ns: bias {:+.2} m (ideal {:+.2}), evm {:.1}%",
                c.mode, c.observed_fraction, c.snr_db, c.bias_mean_m, c.ideal_bias_m, c.evm_mean_pct
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    Ok(RunOutput {
        summary,
        artifacts: vec![
            stamp.csv("attack.csv", "ftmsec.attack.v1", &cells)?,
            stamp.csv("attack_trials.csv", "ftmsec.attack_trials.v1", &trials)?,
        ],
        config_hash: stamp.config_hash,
    })
}

// ---- mask --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskRow {
    pub variant: &'static str,
    pub stage: &'static str,
    pub backoff_db: f64,
    pub worst_excess_db: f64,
    pub p99_margin_db: f64,
    pub frac_bins_above: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsdRow {
    pub offset_mhz: f64,
    pub psd_dbr: f64,
    pub mask_dbr: f64,
}

fn psd_rows(r: &MaskReport, m: &MaskStudyConfig) -> Vec<PsdRow> {
    r.psd
        .iter()
        .map(|&(offset_mhz, psd_dbr)| PsdRow {
            offset_mhz,
            psd_dbr,
            mask_dbr: m.mask.limit(offset_mhz),
        })
        .collect()
}

pub fn mask(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let m = MaskStudyConfig {
        seed: cfg.seed,
        ..cfg.mask.clone()
    };
    let stamp = Stamp {
        config_hash: config_hash("mask", cfg.seed, &m),
        seed: cfg.seed,
    };
    let study = run_mask_study(&m).map_err(runtime)?;
    let row = |variant, stage, r: &MaskReport| MaskRow {
        variant,
        stage,
        backoff_db: study.backoff_db,
        worst_excess_db: r.worst_excess_db,
        p99_margin_db: r.p99_margin_db,
        frac_bins_above: r.frac_bins_above,
    };
    let rows = vec![
        row("legacy", "post_pa", &study.legacy),
        row("secure", "post_pa", &study.secure),
        row("legacy", "pre_pa", &study.legacy_pre_pa),
        row("secure", "pre_pa", &study.secure_pre_pa),
    ];
    let summary = format!(
        "mask: backoff {:.2} dB; legacy worst {:+.2} dB frac {:.1}%; secure worst {:+.2} dB frac {:.1}%",
        study.backoff_db,
        study.legacy.worst_excess_db,
        100.0 * study.legacy.frac_bins_above,
        study.secure.worst_excess_db,
        100.0 * study.secure.frac_bins_above
    );
    Ok(RunOutput {
        summary,
        artifacts: vec![
            stamp.csv("mask_report.csv", "ftmsec.mask.v1", &rows)?,
            stamp.json(
                "mask_report.json",
                &serde_json::json!({ "backoff_db": study.backoff_db, "reports": rows }),
            )?,
            stamp.csv("psd_legacy.csv", "ftmsec.psd.v1", &psd_rows(&study.legacy, &m))?,
            stamp.csv("psd_secure.csv", "ftmsec.psd.v1", &psd_rows(&study.secure, &m))?,
            stamp.csv("psd_legacy_pre_pa.csv", "ftmsec.psd.v1", &psd_rows(&study.legacy_pre_pa, &m))?,
            stamp.csv("psd_secure_pre_pa.csv", "ftmsec.psd.v1", &psd_rows(&study.secure_pre_pa, &m))?,
        ],
        config_hash: stamp.config_hash,
    })
}

// ---- protocol ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolRow {
    pub scenario: String,
    pub variant: String,
    pub peer_binding_holds: bool,
    pub downgrade_occurred: bool,
    pub phy_replay_enabled: bool,
    pub availability: u32,
    pub bound_peer: String,
    pub mode_used: Option<ftmsec_core::protocol::RangingMode>,
    pub secure_ltf_used: bool,
    pub counter_reuse_detected: bool,
    pub adversary_holds_ista_ptk: bool,
    pub abort_reason: Option<String>,
    pub expectations_met: bool,
    pub expectation_failures: String,
}

/// Shipped scenarios filtered by id, then any extra files.
pub fn resolve_scenarios(cfg: &ExperimentConfig) -> Result<Vec<Scenario>, CliError> {
    let p = &cfg.protocol;
    let shipped = builtin_scenarios();
    let mut out = Vec::new();
    if p.scenarios.is_empty() && p.files.is_empty() {
        out = shipped;
    } else {
        for id in &p.scenarios {
            let s = shipped
                .iter()
                .find(|s| s.id.eq_ignore_ascii_case(id))
                .ok_or_else(|| CliError::Config(format!("protocol.scenarios: unknown scenario `{id}`")))?;
            out.push(s.clone());
        }
    }
    for f in &p.files {
        let text = std::fs::read_to_string(f).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?;
        out.push(Scenario::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?);
    }
    Ok(out)
}

pub fn protocol(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let scenarios = resolve_scenarios(cfg)?;
    let stamp = Stamp {
        config_hash: config_hash("protocol", cfg.seed, &(&cfg.protocol, &scenarios)),
        seed: cfg.seed,
    };
    let jobs: Vec<(&Scenario, String)> = scenarios
        .iter()
        .flat_map(|s| {
            let names: Vec<String> = if cfg.protocol.all_variants {
                s.variant.keys().cloned().collect()
            } else {
                vec![s.default_variant.clone()]
            };
            names.into_iter().map(move |v| (s, v))
        })
        .collect();
    let runs = jobs
        .par_iter()
        .map(|(s, v)| run_scenario(s, v, Some(cfg.seed)).map_err(runtime))
        .collect::<Result<Vec<_>, _>>()?;

    let mut artifacts = Vec::new();
    let mut rows = Vec::new();
    for run in &runs {
        let o = &run.report.outcome;
        rows.push(ProtocolRow {
            scenario: run.id.clone(),
            variant: run.variant.clone(),
            peer_binding_holds: run.predicates.peer_binding_holds,
            downgrade_occurred: run.predicates.downgrade_occurred,
            phy_replay_enabled: run.predicates.phy_replay_enabled,
            availability: run.predicates.availability,
            bound_peer: o.bound_peer_of_ista.clone(),
            mode_used: o.mode_used,
            secure_ltf_used: o.secure_ltf_used,
            counter_reuse_detected: o.counter_reuse_detected,
            adversary_holds_ista_ptk: o.adversary_holds_ista_ptk,
            abort_reason: o.abort_reason.clone(),
            expectations_met: run.expectation_failures.is_empty(),
            expectation_failures: run.expectation_failures.join("; "),
        });
        if cfg.protocol.transcripts {
            let a = stamp.json(
                &format!("transcripts/{}_{}.json", run.id, run.variant),
                &run.report.transcript,
            )?;
            let text = std::str::from_utf8(&a.contents).map_err(runtime)?;
            validate_transcript(text).map_err(|e| runtime(format!("{}: {e}", a.name)))?;
            artifacts.push(a);
        }
    }
    let summary = rows
        .iter()
        .map(|r| {
            format!(
                "{}/{}: binding={} downgrade={} phy_replay={} availability={}{}",
                r.scenario,
                r.variant,
                r.peer_binding_holds,
                r.downgrade_occurred,
                r.phy_replay_enabled,
                r.availability,
                if r.expectations_met { "" } else { "  (expectation mismatch)" }
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    artifacts.insert(0, stamp.csv("protocol.csv", "ftmsec.protocol.v1", &rows)?);
    Ok(RunOutput {
        summary,
        artifacts,
        config_hash: stamp.config_hash,
    })
}
