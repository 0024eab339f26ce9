mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Train and inspect locality-constrained crowd-counting models on
/// synthetic scenes.
#[derive(Parser)]
#[command(name = "limm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set optim.lr=3e-4` or
    /// `--set model.gsa=false`. Repeatable; applied after `--config`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed (model initialisation, sampling and augmentation).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone)]
pub struct CheckpointArgs {
    /// Checkpoint directory; defaults to `<out_dir>/best`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and write train/val/test datasets.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Destination; receives `train/`, `val/` and `test/`.
        #[arg(long)]
        out: PathBuf,
        /// Benchmark seed (overrides `data.synthetic.seed`).
        #[arg(long)]
        data_seed: Option<u64>,
    },
    /// Calibrate density-level thresholds on the training split.
    Thresholds {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output JSON; defaults to `contrastive.thresholds`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes checkpoints, metrics.csv and the resolved config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Number of epochs (overrides `optim.epochs`).
        #[arg(long)]
        epochs: Option<usize>,
        /// Threshold file (overrides `contrastive.thresholds`).
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Report MAE and RMSE of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write `gt,pred` pairs to this CSV.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Write the report as JSON instead of text.
        #[arg(long)]
        json: bool,
        /// Evaluate a freshly initialised model built from the config instead
        /// of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
    },
    /// Measure the effective receptive field of a checkpoint's backbone.
    Erf {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// Scenes to probe (from the start of the split).
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        /// Feature cells probed per scene.
        #[arg(long, default_value_t = 5)]
        samples: usize,
        /// Relative gradient threshold.
        #[arg(long, default_value_t = 0.01)]
        threshold: f64,
        /// Save the gradient map of the first probe as a 16-bit PNG.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Theoretical receptive field of a layer spec or backbone preset.
    Trf {
        /// Layer spec file.
        #[arg(long, conflicts_with = "backbone")]
        spec: Option<PathBuf>,
        /// Backbone preset (tiny-limm, tiny, convnext-t).
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long, requires = "backbone")]
        ws: Option<usize>,
        /// Treat the backbone as unwindowed.
        #[arg(long, requires = "backbone")]
        no_window: bool,
        #[arg(long, requires = "backbone")]
        no_shift: bool,
    },
    /// Predicted count inside a region as everything beyond a margin is masked.
    MaskSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// Scene index within the split.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// `y0,x0,y1,x1`; defaults to the window-aligned block at the centre.
        #[arg(long)]
        region: Option<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 8, 16, 32, 64, 96, 128, 192, 256])]
        margins: Vec<usize>,
    },
    /// Histogram of head sizes for one split.
    SizeHist {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 5.0)]
        bin_width: f64,
        #[arg(long, default_value_t = 30)]
        bins: usize,
    },
    /// Write query embeddings with their density levels as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// Windows sampled per scene.
        #[arg(long, default_value_t = 5)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { cfg, out, data_seed } => commands::gen_data(&cfg, &out, data_seed),
        Command::Thresholds { cfg, out } => commands::thresholds(&cfg, out),
        Command::Train { cfg, out_dir, epochs, thresholds } => commands::train(&cfg, out_dir, epochs, thresholds),
        Command::Eval { cfg, ckpt, split, pairs, json, untrained } => commands::eval(&cfg, &ckpt, &split, pairs, json, untrained),
        Command::Erf { cfg, ckpt, split, scenes, samples, threshold, heatmap } => {
            commands::erf(&cfg, &ckpt, &split, scenes, samples, threshold, heatmap)
        }
        Command::Trf { spec, backbone, ws, no_window, no_shift } => commands::trf(spec, backbone, ws, no_window, no_shift),
        Command::MaskSweep { cfg, ckpt, split, scene, region, margins } => commands::mask_sweep(&cfg, &ckpt, &split, scene, region, &margins),
        Command::SizeHist { cfg, split, bin_width, bins } => commands::size_hist(&cfg, &split, bin_width, bins),
        Command::ExportEmbeddings { cfg, ckpt, split, samples, out } => commands::export_embeddings(&cfg, &ckpt, &split, samples, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").split_whitespace().collect::<Vec<_>>().join(" "));
            ExitCode::FAILURE
        }
    }
}
