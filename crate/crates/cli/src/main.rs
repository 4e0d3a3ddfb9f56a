//! `ncrf`: synthesize data, train, evaluate and inspect neural CRF sleep
//! stagers from the command line.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
//! `NCRF_THREADS` caps the number of worker threads.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ncrf::model::{ModelKind, Profile};

#[derive(Parser, Debug)]
#[command(name = "ncrf", version, about = "Neural CRF sleep staging from flow signals")]
struct Cli {
    /// Size preset for newly created data and models.
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
    Tiny,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Tiny => Profile::Tiny,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Softmax,
    Crf,
    Crf2,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Softmax => ModelKind::Softmax,
            KindArg::Crf => ModelKind::Crf,
            KindArg::Crf2 => ModelKind::Crf2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (manifest, signal and label files).
    Synth(SynthArgs),
    /// Write a freshly initialized, untrained checkpoint.
    Init(InitArgs),
    /// Train on a 60/20/20 subject split and write the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a corpus.
    Eval(EvalArgs),
    /// Decode per-epoch stages for a signal file or a whole manifest.
    Predict(PredictArgs),
    /// Export the input-gradient saliency of one epoch as CSV and PGM.
    Saliency(SaliencyArgs),
    /// Compare tape gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Dump the row-normalized transition matrix of a CRF checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// key=value overrides of the synthetic generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from the profile or config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Use the class-imbalanced transition matrix (rare REM and Deep).
    #[arg(long)]
    skewed: bool,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long, value_enum)]
    model: KindArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus manifest (`subject_id,signal_path,labels_path` lines).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    model: KindArg,
    /// Weight the loss by inverse class frequency.
    #[arg(long)]
    cost_sensitive: bool,
    /// ℓ1 strength on the CRF parameters.
    #[arg(long, default_value_t = 0.005)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// History CSV path (default: `<out>.history.csv`).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    transition_lr_scale: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Split seed (default: the checkpoint's training seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Fail unless the checkpoint holds this model kind.
    #[arg(long, value_enum)]
    model: Option<KindArg>,
    /// Output directory for confusion.csv, summary.txt and subjects.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One signal file; stages are written to `--out` as a file.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    signal: Option<PathBuf>,
    /// A manifest; one `<subject>.pred.csv` per record is written into `--out`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<KindArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SaliencyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    signal: PathBuf,
    /// Zero-based epoch index.
    #[arg(long)]
    epoch: usize,
    /// Class score to explain (W, R, L or D); the decoded stage by default.
    #[arg(long)]
    class: Option<String>,
    /// Output prefix; `.csv` and `.pgm` are appended.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Use the tiny profile (overrides --profile).
    #[arg(long)]
    tiny: bool,
    #[arg(long, value_enum, default_value_t = KindArg::Crf)]
    model: KindArg,
    #[arg(long)]
    cost_sensitive: bool,
    /// Also check every tape primitive in isolation.
    #[arg(long)]
    primitives: bool,
    /// Coordinates to probe (default: all on tiny, 200 otherwise).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("NCRF_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("NCRF_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            anyhow::bail!("NCRF_THREADS must be a positive integer, got `{v}`");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let profile = Profile::from(cli.profile);
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(profile, a),
        Command::Init(a) => commands::init(profile, a),
        Command::Train(a) => commands::train(profile, a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict_cmd(a),
        Command::Saliency(a) => commands::saliency(a),
        Command::Gradcheck(a) => commands::gradcheck(profile, a),
        Command::Inspect(a) => commands::inspect(a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
