//! Command-line arguments.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sdelab_core::Scheme;

#[derive(Parser, Debug, Clone)]
#[command(name = "sdelab", version, about = "Simulate and verify dissipative SDE truncations and finite-state potential theory")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `simulation.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Directory for reports, traces and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Multiplier on every Monte Carlo budget.
    #[arg(long, global = true, default_value_t = 1.0)]
    pub budget_scale: f64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Simulate an ensemble and dump the trajectories as CSV.
    Simulate(SimulateArgs),
    /// Girsanov weight moments and reweighted kernels.
    VerifyGirsanov(GirsanovArgs),
    /// Resolvent identity by two routes and the Lipschitz bound.
    VerifyResolvent(ResolventArgs),
    /// Martingale-problem diagnostics.
    VerifyMartingale(MartingaleArgs),
    /// Pathwise contraction and the Harnack inequality.
    VerifyHarnack(HarnackArgs),
    /// Itô formula for resolvent functions.
    VerifyIto(ItoArgs),
    /// Ergodic averages of the generator.
    VerifyInvariance(InvarianceArgs),
    /// Finite-state potential theory on the configured chain.
    Potential {
        #[command(subcommand)]
        op: PotentialOp,
        #[command(flatten)]
        common: PotentialArgs,
    },
    /// Punctured-line example: zero potential but not polar.
    Counterexample,
    /// Every enabled check.
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum SchemeArg {
    SplitProximal,
    ExplicitEuler,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::SplitProximal => Scheme::SplitProximal,
            SchemeArg::ExplicitEuler => Scheme::ExplicitEuler,
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct SimulateArgs {
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Trajectory CSV path (default: `<out-dir>/trajectories.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GirsanovArgs {
    /// Times at which to test the weights (repeatable).
    #[arg(long = "t")]
    pub times: Vec<f64>,
    /// Test function for the reweighted kernel.
    #[arg(long)]
    pub f: Option<String>,
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ResolventArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub f: Option<String>,
    /// Number of base points.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Neumann series depth.
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct MartingaleArgs {
    #[arg(long)]
    pub paths: Option<usize>,
    /// Write mean and variance traces as CSV.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct HarnackArgs {
    #[arg(long)]
    pub p_factor: Option<f64>,
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ItoArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct InvarianceArgs {
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum PotentialOp {
    /// Reduced function by value iteration and by a Dirichlet solve.
    Reduce,
    /// Polarity of the target set.
    Polar,
    /// Monte Carlo discounted hitting against the balayage.
    Hunt {
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Ray cone construction with property report.
    Raycone {
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Extension conditions for the complement of `checks.potential.outside`.
    Extension,
    /// Same as the top-level `counterexample`.
    Counterexample,
}

#[derive(Args, Debug, Clone, Default)]
pub struct PotentialArgs {
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Target set as comma-separated state indices.
    #[arg(long, global = true, value_delimiter = ',')]
    pub set: Option<Vec<usize>>,
}
