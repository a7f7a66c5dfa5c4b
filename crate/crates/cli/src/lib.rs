//! Command-line front end: one binary, one subcommand per pipeline stage.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use blendrig_core::ErrorKind;
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod output;
pub mod pipeline;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "blendrig",
    version,
    about = "Blendshape rig fitting, synthetic data and landmark regression"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Root seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Shared JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural template rig.
    GenTemplate(commands::GenTemplateArgs),
    /// Generate a synthetic (landmarks, coefficients) dataset.
    GenData(commands::GenDataArgs),
    /// Transfer a rig's blendshapes onto a new neutral mesh.
    Transfer(commands::TransferArgs),
    /// Fit coefficients and pose to landmark targets.
    Fit(commands::FitArgs),
    /// Train the landmark-to-coefficient regressor.
    Train(commands::TrainArgs),
    /// Run a trained regressor on 2D landmarks.
    Infer(commands::InferArgs),
    /// Score a checkpoint, the offline fitter and a baseline on a holdout set.
    Eval(commands::EvalArgs),
    /// Pairwise landmark difference between fully activated blendshapes.
    Pairdiff(commands::PairdiffArgs),
    /// Export the mesh of a coefficient vector as OBJ.
    Pose(commands::PoseArgs),
    /// Run gen-template, gen-data, train and eval in order.
    Pipeline(pipeline::PipelineArgs),
}

/// Exit status for an error, from the first classified cause.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<blendrig_core::Error>() {
            return match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Numeric => EXIT_NUMERIC,
                ErrorKind::Io => EXIT_IO,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = cli
        .global
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(blendrig_core::Error::Config("--threads must be at least 1".into()).into());
    }
    // Fails only when a pool already exists, as in repeated in-process runs.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    let g = &cli.global;
    match &cli.command {
        Command::GenTemplate(a) => commands::gen_template(g, a),
        Command::GenData(a) => commands::gen_data(g, a),
        Command::Transfer(a) => commands::transfer(g, a),
        Command::Fit(a) => commands::fit(g, a),
        Command::Train(a) => commands::train(g, a),
        Command::Infer(a) => commands::infer(g, a),
        Command::Eval(a) => commands::eval(g, a),
        Command::Pairdiff(a) => commands::pairdiff(g, a),
        Command::Pose(a) => commands::pose(g, a),
        Command::Pipeline(a) => pipeline::run_pipeline(g, a),
    }
}

/// Parses arguments, runs, and maps the outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
