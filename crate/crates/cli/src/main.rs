//! `jego`: match image pairs, train on synthetic warps, print token ledgers,
//! write coverage maps and run the invariant self-test.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::{debug, info};

mod commands;

/// Exit status of a finished command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Empty,
}

/// Any failure a command reports; always exit code 1.
#[derive(Debug)]
pub struct Failure(pub String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

pub type Outcome = Result<Status, Failure>;

#[derive(Parser, Debug)]
#[command(name = "jego", version, about = "Joint state-space image matching at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Grid or image size as `HxW`.
    #[arg(long, global = true, value_parser = parse_dims)]
    pub dims: Option<(usize, usize)>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Match two PGM images with trained weights.
    Match {
        image_a: PathBuf,
        image_b: PathBuf,
        /// Weights directory written by `train`.
        #[arg(long)]
        weights: PathBuf,
    },
    /// Train on synthetic warps of a PGM corpus.
    Train {
        /// Directory of PGM base images.
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Token counts of scan strategies for a pair of `HxW` maps.
    Bench {
        /// Skip step.
        #[arg(long, default_value_t = 2)]
        step: usize,
    },
    /// Coverage maps of joint layers for a pair of `HxW` maps.
    Erf {
        /// Joint layers applied in sequence.
        #[arg(long, default_value_t = 1)]
        layers: usize,
    },
    /// Run the invariant suites.
    Selftest {
        #[arg(long, hide = true)]
        inject_merge_fault: bool,
    },
    /// Write random textures usable as a training corpus.
    GenCorpus {
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

/// Parses `HxW` with both sides positive.
pub fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let side = |v: &str| -> Result<usize, String> {
        match v.trim().parse::<usize>() {
            Ok(0) => Err(format!("dimensions must be positive in `{s}`")),
            Ok(n) => Ok(n),
            Err(e) => Err(format!("bad dimension `{v}`: {e}")),
        }
    };
    Ok((side(h)?, side(w)?))
}

fn init_logging() -> Result<(), Failure> {
    let level = match std::env::var("JEGO_LOG").as_deref() {
        Err(_) | Ok("") | Ok("off") => log::LevelFilter::Off,
        Ok("info") => log::LevelFilter::Info,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => return Err(Failure(format!("JEGO_LOG must be off, info or debug, got `{other}`"))),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    Ok(())
}

pub fn require_out(global: &Global) -> Result<&Path, Failure> {
    global
        .out
        .as_deref()
        .ok_or_else(|| Failure("--out is required for this command".into()))
}

fn run(cli: Cli) -> Outcome {
    init_logging()?;
    debug!("{cli:?}");
    let g = &cli.global;
    match &cli.command {
        Command::Match {
            image_a,
            image_b,
            weights,
        } => commands::cmd_match(g, image_a, image_b, weights),
        Command::Train { corpus } => commands::cmd_train(g, corpus),
        Command::Bench { step } => commands::cmd_bench(g, *step),
        Command::Erf { layers } => commands::cmd_erf(g, *layers),
        Command::Selftest { inject_merge_fault } => commands::cmd_selftest(*inject_merge_fault),
        Command::GenCorpus { count } => commands::cmd_gen_corpus(g, *count),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Empty) => {
            info!("no matches");
            ExitCode::from(2)
        }
        Err(Failure(msg)) => {
            eprintln!("jego: {msg}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse() {
        assert_eq!(parse_dims("8x12"), Ok((8, 12)));
        assert_eq!(parse_dims("4X4"), Ok((4, 4)));
        assert!(parse_dims("8").is_err());
        assert!(parse_dims("0x4").is_err());
        assert!(parse_dims("ax4").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
