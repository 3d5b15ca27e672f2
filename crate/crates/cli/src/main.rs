use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ftmsec_cli::config::LtfChoice;
use ftmsec_cli::{run, CliError, ExperimentConfig, Study};

/// Secure FTM ranging experiments.
///
/// Settings resolve as: command-line flags, then the config file, then
/// built-in defaults.
#[derive(Parser, Debug)]
#[command(name = "ftmsec", version)]
struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads [default: available cores].
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repetitions per sweep cell (predict and attack).
    #[arg(long, global = true)]
    repetitions: Option<u32>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Honest end-to-end ranging session.
    Range(RangeArgs),
    /// Waveform prediction sweep over observation fraction and SNR.
    Predict(SweepArgs),
    /// Early-detect/late-commit advance sweep.
    Attack(AttackArgs),
    /// Spectral mask compliance of legacy and secure NDPs.
    Mask,
    /// Logical-layer scenario suite.
    Protocol(ProtocolArgs),
}

#[derive(Args, Debug)]
struct RangeArgs {
    #[arg(long)]
    distance_m: Option<f64>,
    /// SNR in dB; `inf` disables noise.
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    bursts: Option<u32>,
    #[arg(long, value_parser = ["secure", "legacy"])]
    ltf: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    snrs_db: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    advances_ns: Option<Vec<f64>>,
    /// Skip the full-knowledge baseline.
    #[arg(long)]
    no_full_knowledge: bool,
}

#[derive(Args, Debug)]
struct ProtocolArgs {
    /// Scenario id of a shipped scenario (repeatable).
    #[arg(long = "scenario")]
    scenarios: Vec<String>,
    /// Extra scenario file (repeatable).
    #[arg(long = "file")]
    files: Vec<PathBuf>,
    #[arg(long)]
    all_variants: bool,
    #[arg(long)]
    no_transcripts: bool,
}

fn resolve(cli: &Cli) -> Result<(Study, ExperimentConfig, PathBuf, usize), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.repetitions {
        cfg.repetitions = Some(r);
        cfg.predict.repetitions = r;
        cfg.attack.repetitions = r;
    }
    let study = match &cli.cmd {
        Cmd::Range(a) => {
            let r = &mut cfg.range;
            r.true_distance_m = a.distance_m.unwrap_or(r.true_distance_m);
            r.snr_db = a.snr_db.unwrap_or(r.snr_db);
            r.n_bursts = a.bursts.unwrap_or(r.n_bursts);
            match a.ltf.as_deref() {
                Some("legacy") => r.ltf = LtfChoice::Legacy,
                Some(_) => r.ltf = LtfChoice::Secure,
                None => {}
            }
            Study::Range
        }
        Cmd::Predict(a) => {
            if let Some(f) = &a.fractions {
                cfg.predict.fractions = f.clone();
            }
            if let Some(s) = &a.snrs_db {
                cfg.predict.snrs_db = s.clone();
            }
            Study::Predict
        }
        Cmd::Attack(a) => {
            if let Some(f) = &a.sweep.fractions {
                cfg.attack.fractions = f.clone();
            }
            if let Some(s) = &a.sweep.snrs_db {
                cfg.attack.snrs_db = s.clone();
            }
            if let Some(x) = &a.advances_ns {
                cfg.attack.advances_ns = x.clone();
            }
            if a.no_full_knowledge {
                cfg.attack.full_knowledge = false;
            }
            Study::Attack
        }
        Cmd::Mask => Study::Mask,
        Cmd::Protocol(a) => {
            let p = &mut cfg.protocol;
            if !a.scenarios.is_empty() {
                p.scenarios = a.scenarios.clone();
            }
            if !a.files.is_empty() {
                p.files = a.files.clone();
            }
            p.all_variants |= a.all_variants;
            if a.no_transcripts {
                p.transcripts = false;
            }
            Study::Protocol
        }
    };
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| "out".into());
    let jobs = cli
        .jobs
        .or(cfg.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(CliError::Config("jobs: must be >= 1".into()));
    }
    Ok((study, cfg, out, jobs))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|(study, cfg, out, jobs)| {
        let res = run(study, &cfg, jobs)?;
        res.write_to(&out)?;
        Ok((study, res, out, cfg.seed))
    });
    match result {
        Ok((study, res, out, seed)) => {
            println!("{}", res.summary);
            println!(
                "{}: wrote {} file(s) to {} (config_hash {}, seed {})",
                study.name(),
                res.artifacts.len(),
                out.display(),
                res.config_hash,
                seed
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ftmsec: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
