//! `hypnerf`: batch front end for training, inversion, denoising, retrieval
//! and evaluation of hypernetwork NeRF priors.

mod commands;
mod error;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use error::{CliError, Exit};

#[derive(Parser, Debug, Serialize)]
#[command(name = "hypnerf", version, about = "Hypernetwork priors over hash-grid NeRFs")]
struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Render the bundled synthetic dataset.
    GenData(GenDataArgs),
    /// Train a prior (hypernetwork and codebook) on a dataset.
    TrainPrior(TrainPriorArgs),
    /// Recover codes for posed views with the prior frozen.
    Invert(InvertArgs),
    /// Train the image denoiser on prior renders against ground truth.
    DenoiseTrain(DenoiseTrainArgs),
    /// Render, denoise and finetune one field.
    DenoiseFinetune(DenoiseFinetuneArgs),
    /// Train the image-embedding to code network.
    TrainQuery(TrainQueryArgs),
    /// Image to codes to renders.
    Query(QueryArgs),
    /// Render a field from a ring of cameras.
    Render(RenderArgs),
    /// Extract a density isosurface as OBJ.
    Mesh(MeshArgs),
    /// Image, geometry, retrieval and storage metrics.
    Metrics(MetricsArgs),
    /// Storage of the prior against standalone fields.
    CompressReport(CompressArgs),
    /// Exchange the color codes of two instances.
    SwapCodes(SwapArgs),
    /// Finite-difference check of every gradient path.
    Gradcheck,
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    /// Image side in pixels.
    #[arg(long, default_value_t = 48)]
    size: usize,
    /// Training azimuths per instance.
    #[arg(long, default_value_t = 12)]
    views: usize,
    /// Training elevation in degrees.
    #[arg(long, default_value_t = 30.0)]
    elevation: f64,
    /// Also write `zero_density.ckpt`, a field that renders pure background.
    #[arg(long)]
    zero_density: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum EncodingKind {
    Hash,
    Posenc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum LossKind {
    Squared,
    Absolute,
}

#[derive(Args, Debug, Serialize)]
struct TrainPriorArgs {
    /// Dataset index or instance manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    #[arg(long, default_value_t = 512)]
    rays: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Final learning rate as a fraction of `--lr`.
    #[arg(long, default_value_t = 0.1)]
    lr_final: f64,
    #[arg(long, default_value_t = 1)]
    instances_per_batch: usize,
    #[arg(long, value_enum, default_value_t = LossKind::Squared)]
    loss: LossKind,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    /// Rays per gradient chunk; fixed chunks keep results thread-count independent.
    #[arg(long, default_value_t = 128)]
    chunk: usize,
    #[arg(long, default_value_t = 64)]
    shape_dim: usize,
    #[arg(long, default_value_t = 64)]
    color_dim: usize,
    #[arg(long, default_value_t = 512)]
    hidden: usize,
    #[arg(long, value_enum, default_value_t = EncodingKind::Hash)]
    encoding: EncodingKind,
    #[arg(long, default_value_t = 8)]
    levels: usize,
    /// log2 of the per-level table size.
    #[arg(long, default_value_t = 10)]
    log2_table: u32,
    #[arg(long, default_value_t = 2)]
    features: usize,
    #[arg(long, default_value_t = 4)]
    min_res: u32,
    #[arg(long, default_value_t = 64)]
    max_res: u32,
    /// Frequency bands for `--encoding posenc`.
    #[arg(long, default_value_t = 10)]
    bands: usize,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

/// Where a field comes from: a prior plus an instance or a codes file, or a
/// standalone field checkpoint.
#[derive(Args, Debug, Serialize)]
struct FieldSource {
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Instance id in the prior's codebook.
    #[arg(long)]
    instance: Option<String>,
    /// Codes JSON as written by `invert` or `query`.
    #[arg(long)]
    codes: Option<PathBuf>,
    /// Standalone field checkpoint.
    #[arg(long)]
    field: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct InvertArgs {
    #[arg(long)]
    prior: PathBuf,
    /// Instance manifest (or dataset index) holding the posed views.
    #[arg(long)]
    views: PathBuf,
    /// Which instance of `--views` to use.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Use only these view indices (comma separated); default all.
    #[arg(long, value_delimiter = ',')]
    only: Vec<usize>,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1024)]
    rays: usize,
    /// Start from this codebook entry instead of the codebook mean.
    #[arg(long)]
    init: Option<String>,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args, Debug, Serialize)]
struct DenoiseTrainArgs {
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 600)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Write an identity denoiser without training.
    #[arg(long)]
    identity: bool,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug, Serialize)]
struct DenoiseFinetuneArgs {
    #[command(flatten)]
    source: FieldSource,
    /// Denoiser checkpoint; identity when omitted.
    #[arg(long)]
    denoiser: Option<PathBuf>,
    /// Write the raw renders here and stop, for an external denoiser.
    #[arg(long)]
    export_frames: Option<PathBuf>,
    /// Finetune on frames read from here instead of applying `--denoiser`.
    #[arg(long)]
    import_frames: Option<PathBuf>,
    #[arg(long, default_value_t = 48)]
    size: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 512)]
    rays: usize,
    /// Lattice resolution for the before/after Chamfer distance (0 skips it).
    #[arg(long, default_value_t = 64)]
    mesh_resolution: usize,
    #[arg(long, default_value_t = 10.0)]
    level: f64,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug, Serialize)]
struct TrainQueryArgs {
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON map from "<instance id>/<image file>" to embedding vectors;
    /// the built-in image embedding is used when omitted.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 512)]
    hidden: usize,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug, Serialize)]
struct QueryArgs {
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    query_net: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Lookup key into `--embeddings`.
    #[arg(long)]
    key: Option<String>,
    /// Render the retrieved codebook entry rather than the raw prediction.
    #[arg(long)]
    snap: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum PoseSet {
    Train,
    Eval,
    Denoise,
}

#[derive(Args, Debug, Serialize)]
struct RenderArgs {
    #[command(flatten)]
    source: FieldSource,
    #[arg(long, value_enum, default_value_t = PoseSet::Eval)]
    poses: PoseSet,
    #[arg(long, default_value_t = 48)]
    size: usize,
    #[arg(long, default_value_t = 32)]
    samples: usize,
}

#[derive(Args, Debug, Serialize)]
struct MeshArgs {
    #[command(flatten)]
    source: FieldSource,
    #[arg(long, default_value_t = 96)]
    resolution: usize,
    /// Density level of the surface.
    #[arg(long, default_value_t = 10.0)]
    level: f64,
}

#[derive(Args, Debug, Serialize)]
struct MetricsArgs {
    #[arg(long)]
    prior: PathBuf,
    /// Views to score; instances are matched to the codebook by id.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    query_net: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Lattice resolution for Chamfer against analytic scenes (0 skips it).
    #[arg(long, default_value_t = 64)]
    mesh_resolution: usize,
    #[arg(long, default_value_t = 10.0)]
    level: f64,
    #[arg(long, default_value_t = 32)]
    samples: usize,
}

#[derive(Args, Debug, Serialize)]
struct CompressArgs {
    #[arg(long)]
    prior: PathBuf,
    /// Floats per standalone field; defaults to the prior's own field size.
    #[arg(long)]
    baseline_params: Option<usize>,
    /// Also report these instance counts (comma separated).
    #[arg(long, value_delimiter = ',')]
    instances: Vec<usize>,
}

#[derive(Args, Debug, Serialize)]
struct SwapArgs {
    #[arg(long)]
    prior: PathBuf,
    a: String,
    b: String,
    #[arg(long, default_value_t = 48)]
    size: usize,
}

/// Per-run output directory, config echo and key=value log.
pub struct Run {
    pub out: PathBuf,
    pub seed: u64,
    log: fs::File,
}

impl Run {
    fn open(out: &Path, seed: u64, echo: &serde_json::Value) -> Result<Self, CliError> {
        fs::create_dir_all(out)?;
        fs::write(out.join("config.json"), serde_json::to_string_pretty(echo)? + "\n")?;
        let log = fs::File::create(out.join("log.txt"))?;
        Ok(Self {
            out: out.to_path_buf(),
            seed,
            log,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Prints one `key=value ...` line and appends it to the log.
    pub fn log(&mut self, line: impl AsRef<str>) {
        let line = line.as_ref();
        println!("{line}");
        let _ = writeln!(self.log, "{line}");
    }

    /// Adds resolved settings to the config echo.
    pub fn echo_effective<T: Serialize>(&self, effective: &T) -> Result<(), CliError> {
        let path = self.path("config.json");
        let mut echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
        echo["effective"] = serde_json::to_value(effective)?;
        fs::write(path, serde_json::to_string_pretty(&echo)? + "\n")?;
        Ok(())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    let echo = serde_json::to_value(&cli)?;
    let mut run = Run::open(&cli.out, cli.seed, &echo)?;
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&mut run, a),
        Command::TrainPrior(a) => commands::train_prior(&mut run, a),
        Command::Invert(a) => commands::invert(&mut run, a),
        Command::DenoiseTrain(a) => commands::denoise_train(&mut run, a),
        Command::DenoiseFinetune(a) => commands::denoise_finetune(&mut run, a),
        Command::TrainQuery(a) => commands::train_query(&mut run, a),
        Command::Query(a) => commands::query(&mut run, a),
        Command::Render(a) => commands::render(&mut run, a),
        Command::Mesh(a) => commands::mesh(&mut run, a),
        Command::Metrics(a) => commands::metrics(&mut run, a),
        Command::CompressReport(a) => commands::compress_report(&mut run, a),
        Command::SwapCodes(a) => commands::swap_codes(&mut run, a),
        Command::Gradcheck => commands::gradcheck(&mut run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Exit::Usage } else { Exit::Ok } as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit as u8)
        }
    }
}
