//! Command-line frontend for the `secvit` crate.

pub mod commands;
pub mod error;
pub mod ppm;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "secvit", version, about = "Semantic equitable clustering toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads; 1 keeps every path bit-reproducible.
    #[arg(long, global = true, env = "SEC_THREADS", default_value_t = 1)]
    pub threads: usize,

    /// Element type; each subcommand has its own default.
    #[arg(long, global = true, value_enum)]
    pub dtype: Option<DTypeArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Finite-difference checks of every differentiable op and layer.
    Gradcheck(commands::gradcheck::GradcheckArgs),
    /// FLOP counts and wall time of clustered versus dense attention.
    Bench(commands::bench::BenchArgs),
    /// Window, k-means and similarity-ranked partitions on planted data.
    Compare(commands::compare::CompareArgs),
    /// Cluster maps as PPM images.
    Viz(commands::viz::VizArgs),
    /// Train the classifier on synthetic shapes or IDX data.
    Train(commands::train::TrainArgs),
    /// Token compression with interleaved and sequential groups.
    Connector(commands::connector::ConnectorArgs),
}

/// Runs `cli`, writing reports to `out`.
pub fn run(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<()> {
    if cli.global.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let g = &cli.global;
    pool.install(|| match &cli.command {
        Command::Gradcheck(a) => commands::gradcheck::run(g, a, out).map(|_| ()),
        Command::Bench(a) => commands::bench::run(g, a, out).map(|_| ()),
        Command::Compare(a) => commands::compare::run(g, a, out).map(|_| ()),
        Command::Viz(a) => commands::viz::run(g, a, out).map(|_| ()),
        Command::Train(a) => commands::train::run(g, a, out).map(|_| ()),
        Command::Connector(a) => commands::connector::run(g, a, out).map(|_| ()),
    })
}
