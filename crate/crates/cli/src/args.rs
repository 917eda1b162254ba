use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "par", version, about = "Panoramic masked autoregressive generation on synthetic ERP data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic panorama corpus.
    MakeData {
        n: usize,
        seed: u64,
        out_dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        height: usize,
    },
    /// Train the image codec on the corpus named in the config.
    TrainCodec(TrainArgs),
    /// Train the PAR model on top of a frozen codec.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        /// Continue from the checkpoint named in the config.
        #[arg(long)]
        resume: bool,
        /// Stop and checkpoint after this many total steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Text-to-panorama sampling.
    Generate {
        #[command(flatten)]
        sample: SampleArgs,
        /// Attribute values, one per slot, e.g. "0 3 1 2".
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value = "samples")]
        out_dir: PathBuf,
    },
    /// Fill everything outside the keep mask.
    Outpaint(EditArgs),
    /// Regenerate outside the keep mask under a new prompt.
    Edit(EditArgs),
    /// Write the metrics table for a trained checkpoint.
    Eval {
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value = "eval.txt")]
        out: PathBuf,
    },
    /// Monte-Carlo check of ERP pixel variance and independence.
    VerifyErp {
        #[arg(long = "H", default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 1000)]
        realizations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a config key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Accepted for interface stability; runs are always deterministic.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, default_value = "par.ckpt")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cfg: Option<f64>,
    #[arg(long)]
    pub ar_steps: Option<usize>,
    #[arg(long)]
    pub denoise_steps: Option<usize>,
    #[arg(long)]
    pub r_pre: Option<f64>,
    #[arg(long)]
    pub r_post: Option<f64>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    #[arg(long)]
    pub input: PathBuf,
    /// PGM mask, 255 = keep, 0 = generate.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value = "")]
    pub prompt: String,
    #[arg(long)]
    pub out: PathBuf,
}
