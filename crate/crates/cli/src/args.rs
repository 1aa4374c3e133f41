use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use droopstab::certificates::Eps1Policy;

#[derive(Debug, Parser)]
#[command(
    name = "droopstab",
    version,
    about = "Small-signal stability certificates for droop-controlled inverter grids",
    after_help = "Exit codes: 0 certified, 2 stable but not certified, 3 unstable, \
                  1 runtime error, 64 usage error. Set DROOPSTAB_LOG for verbosity."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Seed for every random draw; recorded in all outputs.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    /// Worker threads for sweeps (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Equilibrium, reduction, certificates and verdict for one grid.
    Analyze(AnalyzeArgs),
    /// Integrate the dynamics from a perturbed equilibrium.
    Simulate(SimulateArgs),
    /// Analyze over a grid of uniform droop gains.
    Sweep(SweepArgs),
    /// Write the Jacobian, its blocks, the reduced matrices and spectra.
    Export(ExportArgs),
    /// Bundled IEEE 13-bus dataset.
    Ieee13 {
        #[command(subcommand)]
        action: Ieee13Action,
    },
}

#[derive(Debug, Subcommand)]
pub enum Ieee13Action {
    /// Write the dataset as a grid spec file.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0.05)]
    pub kq: f64,
    #[arg(long, default_value_t = 0.6)]
    pub kp: f64,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    /// Grid spec (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Frequency droop gain, one value or a comma list per inverter.
    #[arg(long)]
    pub kp: Option<String>,
    /// Voltage droop gain, one value or a comma list per inverter.
    #[arg(long)]
    pub kq: Option<String>,
    /// Equilibrium starting point (JSON operating point).
    #[arg(long)]
    pub initial: Option<PathBuf>,
    /// Newton tolerance on the scaled residual.
    #[arg(long)]
    pub equilibrium_tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CertArgs {
    /// `identity` or a CSV matrix file.
    #[arg(long, default_value = "identity")]
    pub q_slow: String,
    #[arg(long, default_value = "identity")]
    pub q_fast: String,
    #[arg(long, default_value = "identity")]
    pub q_xi: String,
    #[arg(long, default_value = "half-star")]
    pub eps1_policy: Eps1Policy,
    #[arg(long)]
    pub hurwitz_tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub cert: CertArgs,
    /// Directory for the report and eigenvalue files.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub cert: CertArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub cert: CertArgs,
    /// Comma list of k_p values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub kp_values: Vec<f64>,
    /// Comma list of k_q values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub kq_values: Vec<f64>,
    /// Directory for sweep.csv; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Final time (s).
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    /// Perturbation size added to the equilibrium.
    #[arg(long, default_value_t = 1e-4)]
    pub perturb: f64,
    /// State receiving the perturbation, e.g. `delta_1` or `I_Q2`.
    #[arg(long, default_value = "delta_1", conflicts_with = "random_direction")]
    pub perturb_state: String,
    /// Perturb along a seeded random direction instead of one state.
    #[arg(long)]
    pub random_direction: bool,
    /// Integrate the linearization instead of the nonlinear model.
    #[arg(long)]
    pub linear: bool,
    #[arg(long, default_value_t = droopstab::simulator::DEFAULT_RTOL)]
    pub rtol: f64,
    #[arg(long, default_value_t = droopstab::simulator::DEFAULT_ATOL)]
    pub atol: f64,
    /// Sample spacing of the output (s); every accepted step when absent.
    #[arg(long)]
    pub output_dt: Option<f64>,
    /// Directory for trajectory.csv and trajectory.json; CSV on stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
