//! `sam`: train, apply and inspect shape and appearance models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sam_core::hyper::HyperParams;
use sam_core::likelihood::NoiseKind;
use sam_core::xval::{default_split, Variant};

#[derive(Parser, Debug)]
#[command(name = "sam", version, about = "Shape and appearance models learned from unannotated images")]
struct Cli {
    /// Worker threads for per-image work (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to a dataset.
    Train(TrainArgs),
    /// Latent modes and Hessian diagonals for every image.
    Fit(FitArgs),
    /// Posterior class probabilities from one model per class.
    Classify(ClassifyArgs),
    /// Random draws (or modes of variation) as an image grid.
    Sample(SampleArgs),
    /// Fill in unobserved voxels.
    Impute(ImputeArgs),
    /// Hide rectangles, train each variant and score the hidden voxels.
    Xval(XvalArgs),
    /// Serve a data shard to a training master.
    ServeWorker(ServeArgs),
    /// Train against remote workers.
    TrainDistributed(DistributedArgs),
    /// Write a synthetic dataset of Gaussian blobs.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Noise model: gaussian, bernoulli or categorical.
    #[arg(long, default_value = "gaussian")]
    model_kind: NoiseKind,
    /// Number of latent variables.
    #[arg(short = 'K', long = "k", default_value_t = 4)]
    k: usize,
    /// Which bases the latents drive: shared, split, shape or appearance.
    #[arg(long, default_value = "shared")]
    variant: Variant,
    /// Appearance latents of a split model (default: about 30% of K).
    #[arg(long)]
    split_appearance: Option<usize>,
    /// EM iterations.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// lambda1,lambda2: weights of the Wishart and smoothness latent priors.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.95, 0.05])]
    lambda: Vec<f64>,
    /// Shape regulariser weights (5 values).
    #[arg(long, value_delimiter = ',', default_values_t = [1e-3, 0.0, 16.0, 1.0, 1.0])]
    omega_v: Vec<f64>,
    /// Appearance regulariser weights (3 values).
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 1.0, 0.0])]
    omega_a: Vec<f64>,
    /// Mean regulariser weights (3 values), used as given.
    #[arg(long, value_delimiter = ',', default_values_t = [1e-4, 1e-2, 0.0])]
    omega_mu: Vec<f64>,
    /// Wishart degrees of freedom (default: K).
    #[arg(long)]
    nu0: Option<f64>,
    /// Integration steps for geodesic shooting.
    #[arg(long, default_value_t = sam_core::diffeo::DEFAULT_SHOOT_STEPS)]
    shoot_steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl ModelArgs {
    fn base(&self) -> HyperParams {
        let mut h = HyperParams::shared(self.k.max(1), self.model_kind);
        h.em_iters = self.iters;
        h.lambda1 = self.lambda[0];
        h.lambda2 = self.lambda[1];
        h.omega_v = self.omega_v.clone();
        h.omega_a = self.omega_a.clone();
        h.omega_mu = self.omega_mu.clone();
        h.nu0 = self.nu0.unwrap_or(self.k as f64);
        h.shoot_steps = self.shoot_steps;
        h
    }

    fn split_a(&self) -> usize {
        self.split_appearance.unwrap_or_else(|| default_split(self.k))
    }

    fn hyper(&self) -> sam_core::Result<HyperParams> {
        self.variant.hyper(&self.base(), self.k, self.split_a())
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training images (SAMD).
    #[arg(long)]
    data: PathBuf,
    /// Output model (SAMM).
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration JSONL log (default: the output path with `.jsonl` appended).
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output feature container (SAMD).
    #[arg(long)]
    out: PathBuf,
    /// Gauss-Newton iterations per image.
    #[arg(long, default_value_t = sam_core::inference::DEFAULT_FIT_ITERS)]
    iters: usize,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    /// One model per class, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output table (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Class priors (default: uniform).
    #[arg(long, value_delimiter = ',')]
    priors: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output grid (PGM for one channel, PPM otherwise).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value_t = 4)]
    cols: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Show each latent's mode of variation instead: one row per latent,
    /// columns spanning -sd..+sd standard deviations.
    #[arg(long)]
    modes: bool,
    #[arg(long, default_value_t = 2.0)]
    sd: f64,
}

#[derive(Args, Debug)]
struct ImputeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output dataset with every voxel filled (SAMD).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct XvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Fraction of each image hidden by a random rectangle.
    #[arg(long, default_value_t = 0.25)]
    fraction: f64,
    #[arg(long, default_value_t = 2)]
    mask_seed: u64,
    /// Variants to compare.
    #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL)]
    variants: Vec<Variant>,
    /// Summary table (CSV); printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// This worker's images (SAMD).
    #[arg(long)]
    data: PathBuf,
    /// Address to listen on; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
}

#[derive(Args, Debug)]
struct DistributedArgs {
    /// Worker addresses, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    workers: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Image side length.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SAM_LOG", "warn")).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
