//! Experiment configuration: one TOML file, CLI flags on top.

use std::path::{Path, PathBuf};

use ftmsec_core::attacker::{AttackSettings, SmcConfig};
use ftmsec_core::rfmodel::MaskStudyConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LtfChoice {
    Secure,
    Legacy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangeConfig {
    pub true_distance_m: f64,
    /// `inf` for a noise-free channel.
    pub snr_db: f64,
    pub n_bursts: u32,
    pub oversample: usize,
    pub ltf: LtfChoice,
}

impl Default for RangeConfig {
    fn default() -> Self {
        Self {
            true_distance_m: 10.0,
            snr_db: 25.0,
            n_bursts: 10,
            oversample: 4,
            ltf: LtfChoice::Secure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub fractions: Vec<f64>,
    pub snrs_db: Vec<f64>,
    pub repetitions: u32,
    pub smc: SmcConfig,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.2, 0.4, 0.6, 0.8],
            snrs_db: vec![7.0],
            repetitions: 25,
            smc: SmcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Positive advances shorten the measured distance, negative delay it.
    pub advances_ns: Vec<f64>,
    /// Observed fractions for partial-knowledge runs.
    pub fractions: Vec<f64>,
    pub full_knowledge: bool,
    pub snrs_db: Vec<f64>,
    pub repetitions: u32,
    pub settings: AttackSettings,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            advances_ns: vec![-20.0, -10.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0],
            fractions: vec![0.2, 0.8],
            full_knowledge: true,
            snrs_db: vec![5.0, 15.0, 25.0],
            repetitions: 25,
            settings: AttackSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolRunConfig {
    /// Shipped scenario ids to run; empty runs all eight.
    pub scenarios: Vec<String>,
    /// Extra scenario files.
    pub files: Vec<PathBuf>,
    /// Run every variant instead of each scenario's default.
    pub all_variants: bool,
    pub transcripts: bool,
}

impl Default for ProtocolRunConfig {
    fn default() -> Self {
        Self {
            scenarios: Vec::new(),
            files: Vec::new(),
            all_variants: false,
            transcripts: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    /// Replaces the per-study repetition counts when set.
    pub repetitions: Option<u32>,
    pub range: RangeConfig,
    pub predict: PredictConfig,
    pub attack: AttackConfig,
    pub mask: MaskStudyConfig,
    pub protocol: ProtocolRunConfig,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

fn check_fractions(field: &str, v: &[f64]) -> Result<(), CliError> {
    if v.is_empty() {
        return Err(invalid(field, "must not be empty"));
    }
    match v.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        Some(f) => Err(invalid(field, format!("{f} outside (0, 1]"))),
        None => Ok(()),
    }
}

fn check_snrs(field: &str, v: &[f64]) -> Result<(), CliError> {
    if v.is_empty() {
        return Err(invalid(field, "must not be empty"));
    }
    match v.iter().find(|s| s.is_nan()) {
        Some(_) => Err(invalid(field, "NaN")),
        None => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// TOML errors keep their line/column and key path.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(r) = cfg.repetitions {
            cfg.predict.repetitions = r;
            cfg.attack.repetitions = r;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.jobs == Some(0) {
            return Err(invalid("jobs", "must be >= 1"));
        }
        let r = &self.range;
        if !(0.0..=100.0).contains(&r.true_distance_m) {
            return Err(invalid("range.true_distance_m", "must lie in [0, 100] m"));
        }
        if r.snr_db.is_nan() {
            return Err(invalid("range.snr_db", "NaN"));
        }
        if r.n_bursts == 0 {
            return Err(invalid("range.n_bursts", "must be >= 1"));
        }
        if !(1..=16).contains(&r.oversample) {
            return Err(invalid("range.oversample", "must lie in 1..=16"));
        }

        let p = &self.predict;
        check_fractions("predict.fractions", &p.fractions)?;
        check_snrs("predict.snrs_db", &p.snrs_db)?;
        if p.repetitions == 0 {
            return Err(invalid("predict.repetitions", "must be >= 1"));
        }
        if p.smc.n_particles == 0 || p.smc.n_iter == 0 {
            return Err(invalid("predict.smc", "n_particles and n_iter must be >= 1"));
        }

        let a = &self.attack;
        if a.advances_ns.is_empty() {
            return Err(invalid("attack.advances_ns", "must not be empty"));
        }
        if let Some(x) = a.advances_ns.iter().find(|x| x.is_nan() || x.abs() > 100.0) {
            return Err(invalid("attack.advances_ns", format!("{x} outside +-100 ns")));
        }
        if !a.fractions.is_empty() {
            check_fractions("attack.fractions", &a.fractions)?;
        }
        if a.fractions.is_empty() && !a.full_knowledge {
            return Err(invalid("attack", "no attack mode selected"));
        }
        check_snrs("attack.snrs_db", &a.snrs_db)?;
        if a.repetitions == 0 {
            return Err(invalid("attack.repetitions", "must be >= 1"));
        }
        if a.settings.bandwidth_mhz != 20 {
            return Err(invalid("attack.settings.bandwidth_mhz", "only 20 MHz is supported"));
        }
        if a.settings.oversample == 0 || a.settings.n_ltf == 0 {
            return Err(invalid("attack.settings", "oversample and n_ltf must be >= 1"));
        }

        let m = &self.mask;
        m.rapp.validate().map_err(|e| invalid("mask.rapp", e))?;
        m.mask.validate().map_err(|e| invalid("mask.mask", e))?;
        if m.n_ndp == 0 || m.n_ltf == 0 || m.oversample == 0 {
            return Err(invalid("mask", "n_ndp, n_ltf and oversample must be >= 1"));
        }
        if m.range_mhz.is_nan() || m.range_mhz <= 0.0 {
            return Err(invalid("mask.range_mhz", "must be positive"));
        }
        Ok(())
    }
}

/// Short digest of the effective configuration of one study.
pub fn config_hash<T: Serialize>(study: &str, seed: u64, block: &T) -> String {
    let bytes = serde_json::to_vec(&(study, seed, block)).expect("config serializes");
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
        assert_eq!(c.attack.snrs_db, [5.0, 15.0, 25.0]);
        assert_eq!(c.predict.repetitions, 25);
    }

    #[test]
    fn errors_name_the_line_and_field() {
        let e = ExperimentConfig::parse("seed = 1\n[range]\nn_burstz = 3\n").unwrap_err().to_string();
        assert!(e.contains("n_burstz") && e.contains("line 3"), "{e}");
        let c = ExperimentConfig::parse("[range]\ntrue_distance_m = 500.0\n").unwrap();
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("range.true_distance_m"), "{e}");
        let c = ExperimentConfig::parse("[attack]\nfractions = [1.5]\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("attack.fractions"));
    }

    #[test]
    fn readme_example_parses() {
        let text = include_str!("../../../README.md");
        let start = text.find("```toml\n").unwrap() + 8;
        let end = start + text[start..].find("```").unwrap();
        let c = ExperimentConfig::parse(&text[start..end]).unwrap();
        c.validate().unwrap();
        assert_eq!((c.seed, c.predict.repetitions), (42, 10));
        assert_eq!(c.mask.rapp.smoothness_p, 4.0);
    }

    #[test]
    fn global_repetitions_override_blocks() {
        let c = ExperimentConfig::parse("repetitions = 3\n[predict]\nrepetitions = 9\n").unwrap();
        assert_eq!((c.predict.repetitions, c.attack.repetitions), (3, 3));
    }

    #[test]
    fn hash_tracks_content_and_seed() {
        let c = ExperimentConfig::default();
        let h = config_hash("range", 0, &c.range);
        assert_eq!(h.len(), 16);
        assert_eq!(h, config_hash("range", 0, &c.range));
        assert_ne!(h, config_hash("range", 1, &c.range));
        let mut r = c.range.clone();
        r.n_bursts += 1;
        assert_ne!(h, config_hash("range", 0, &r));
    }

    #[test]
    fn infinite_snr_parses() {
        let c = ExperimentConfig::parse("[range]\nsnr_db = inf\n").unwrap();
        assert!(c.range.snr_db.is_infinite());
    }
}
