//! `tfrmt`: timefront experiments with parabolic-equation and random-matrix propagation.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tfrmt_core::config::ExperimentConfig;
use tfrmt_core::Error;

#[derive(Parser, Debug)]
#[command(name = "tfrmt", version, about = "Ocean acoustic timefronts: PE runs, random-matrix ensembles and their comparison")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON experiment configuration; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Ensemble members.
    #[arg(long, global = true)]
    members: Option<usize>,
    /// Total range (km); a whole number of block ranges.
    #[arg(long, global = true)]
    range: Option<f64>,
    /// Internal-wave strength multiplier (0 switches scattering off).
    #[arg(long = "epsilon-scale", visible_alias = "epsilon", global = true)]
    epsilon_scale: Option<f64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true, env = "TFRMT_WORKERS")]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    /// Products of random building blocks.
    Rmt,
    /// Parabolic-equation marching through internal waves.
    Pe,
}

impl PathKind {
    fn name(self) -> &'static str {
        match self {
            PathKind::Rmt => "rmt",
            PathKind::Pe => "pe",
        }
    }
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Trapped modes and eigenvalues at one wavenumber.
    Modes {
        /// Wavenumber (rad/km); defaults to the source centre.
        #[arg(long)]
        k: Option<f64>,
    },
    /// Sound-speed perturbation of one internal-wave realization over range.
    IwField {
        /// Member whose realization is sampled.
        #[arg(long, default_value_t = 0)]
        member: u64,
        /// Range samples from 0 to the total range.
        #[arg(long, default_value_t = 401)]
        samples: usize,
    },
    /// PE-extracted mode propagators at the source centre wavenumber.
    PeUnitary,
    /// Random-matrix propagators and analytic variances at the source centre wavenumber.
    RmtEnsemble,
    /// Timefront of one member.
    Timefront {
        #[arg(long, value_enum, default_value = "rmt")]
        path: PathKind,
        #[arg(long, default_value_t = 0)]
        member: u64,
    },
    /// Ensemble-averaged intensity.
    Average {
        #[arg(long, value_enum, default_value = "rmt")]
        path: PathKind,
    },
    /// First-order intensity change of one building block.
    MixingFront {
        /// Average intensity grid of PE members at the block range, for the depth-profile table.
        #[arg(long)]
        pe_average: Option<PathBuf>,
    },
    /// PE against random-matrix statistics.
    Compare {
        /// Skip the single-wavenumber element-variance table.
        #[arg(long)]
        skip_variance: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Modes { .. } => "modes",
            Command::IwField { .. } => "iw-field",
            Command::PeUnitary => "pe-unitary",
            Command::RmtEnsemble => "rmt-ensemble",
            Command::Timefront { .. } => "timefront",
            Command::Average { .. } => "average",
            Command::MixingFront { .. } => "mixing-front",
            Command::Compare { .. } => "compare",
        }
    }
}

/// Configuration mistakes exit with 1, everything else with 2.
fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidParameter { .. } | Error::Json(_) | Error::KWindowClipped { .. } | Error::ModeIndex { .. }
    )
}

fn load_config(common: &Common) -> tfrmt_core::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_path(p).map_err(|e| match e {
            Error::Io(io) => Error::InvalidParameter {
                field: "--config".into(),
                reason: format!("{}: {io}", p.display()),
            },
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.ensemble.master_seed = s;
    }
    if let Some(n) = common.members {
        cfg.ensemble.members = n;
    }
    if let Some(e) = common.epsilon_scale {
        cfg.ensemble.strength = e;
    }
    if let Some(r) = common.range {
        cfg.set_range(r)?;
    }
    if let Some(o) = &common.out {
        cfg.output.dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.common.workers {
        if n == 0 {
            eprintln!("error: invalid parameter `--workers`: must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let cfg = match load_config(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if is_config_error(&e) { 1 } else { 2 });
        }
    };
    match commands::run(&cli.command, &cfg, cli.command.name()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 1 } else { 2 })
        }
    }
}
