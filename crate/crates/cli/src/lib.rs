//! Command-line front end: configuration, file formats, reports and the subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod files;
pub mod report;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum CommandKind {
    /// Draw a synthetic cohort around the built-in arm fixture
    Simulate,
    /// Estimate the model parameters with MCMC-SAEM
    Estimate,
    /// Fit individual latents against trained parameters
    Personalize,
    /// Shoot a geodesic and write sampled frames
    Shoot,
    /// Sample an exp-parallel curve along a geodesic
    Transport,
}

#[derive(Debug, Parser)]
#[command(name = "longdef", version, about = "Spatiotemporal atlas estimation for longitudinal shape data")]
#[command(after_help = "Any config key can be overridden as --section.key=value, e.g. --estimation.iterations=500")]
struct Invocation {
    #[command(subcommand)]
    command: CommandKind,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 uses all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory
    #[arg(long, global = true)]
    resume: bool,
}

/// Splits `--section.key=value` overrides from the arguments clap understands.
fn split_overrides(args: Vec<OsString>) -> (Vec<OsString>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.to_str().and_then(|s| s.strip_prefix("--")) {
            Some(s) if s.split_once('=').is_some_and(|(k, _)| k.contains('.')) => overrides.push(s.to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn build_config(common: &Common, overrides: &[String]) -> CliResult<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(o) = &common.output {
        cfg.io.output = o.clone();
    }
    cfg.io.resume |= common.resume;
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(kind: CommandKind, cfg: &RunConfig) -> CliResult<()> {
    let work = || match kind {
        CommandKind::Simulate => commands::simulate(cfg),
        CommandKind::Estimate => commands::estimate(cfg).map(|_| ()),
        CommandKind::Personalize => commands::personalize(cfg),
        CommandKind::Shoot => commands::shoot(cfg),
        CommandKind::Transport => commands::transport(cfg),
    };
    if cfg.threads == 0 {
        return work();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(work)
}

/// Parses `args` (program name first), runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let (args, overrides) = split_overrides(args.into_iter().map(Into::into).collect());
    let inv = match Invocation::try_parse_from(args) {
        Ok(inv) => inv,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match build_config(&inv.common, &overrides).and_then(|cfg| dispatch(inv.command, &cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("longdef: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_split_from_flags() {
        let args = ["longdef", "estimate", "--seed", "3", "--estimation.iterations=5", "--output=x"].map(OsString::from);
        let (rest, ov) = split_overrides(args.to_vec());
        assert_eq!(ov, vec!["estimation.iterations=5".to_string()]);
        assert_eq!(rest.len(), 5);
        let inv = Invocation::try_parse_from(rest).unwrap();
        assert_eq!(inv.command, CommandKind::Estimate);
        assert_eq!(inv.common.seed, Some(3));
        assert_eq!(inv.common.output, Some(PathBuf::from("x")));
    }
}
