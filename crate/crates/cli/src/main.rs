mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dnl::Error;

#[derive(Parser, Debug)]
#[command(name = "dnl", version, about = "Denoised non-local attention for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes dataset.
    Gen(GenArgs),
    /// Train a model and write manifest, history and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset (mIoU, per-class IoU, pixel accuracy).
    Eval(EvalArgs),
    /// Export the attention maps of one query pixel.
    DumpAttention(DumpArgs),
    /// Print an analytic per-block MAC and memory table.
    Flops(FlopsArgs),
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Dataset spec (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config; may be omitted with --resume.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable global rectifying.
    #[arg(long)]
    pub no_gr: bool,
    /// Disable local retention.
    #[arg(long)]
    pub no_lr: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sample id inside the dataset.
    #[arg(long)]
    pub image: String,
    /// Query pixel `X,Y` in input coordinates.
    #[arg(long, value_parser = parse_pixel)]
    pub pixel: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
    /// Debug: replace the class-similarity map with ones.
    #[arg(long)]
    pub force_pclass_ones: bool,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// Training or network config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input extent `HxW`.
    #[arg(long, value_parser = parse_extent)]
    pub input: (usize, usize),
    /// Bytes per attention-map element.
    #[arg(long, default_value_t = 4)]
    pub element_bytes: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Adjoint {
    Conv,
    Sigmoid,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Debug: scale one adjoint by 1.1 (the check must then fail).
    #[arg(long, value_enum)]
    pub corrupt_adjoint: Option<Adjoint>,
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    Ok((x.trim().parse().map_err(|e| format!("{e}"))?, y.trim().parse().map_err(|e| format!("{e}"))?))
}

fn parse_extent(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    Ok((h.trim().parse().map_err(|e| format!("{e}"))?, w.trim().parse().map_err(|e| format!("{e}"))?))
}

/// Failure of a verification command; maps to exit code 4.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

pub enum Failure {
    Lib(Error),
    Verification(VerificationFailed),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("DNL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::DumpAttention(a) => commands::dump_attention(a),
        Command::Flops(a) => commands::flops(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verification(VerificationFailed(msg))) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(4)
        }
    }
}
