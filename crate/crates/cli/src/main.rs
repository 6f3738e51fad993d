use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use cir_cli::{exit_code, usage, RunConfig};
use cir_core::data::Split;
use cir_core::{BackboneConfig, PredictMode, SyntheticSpec};

/// Background-debiased image classification: data generation, training,
/// evaluation, the crop experiment and the λ sweep.
#[derive(Parser)]
#[command(name = "debias", version)]
struct Cli {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as images plus manifest.csv and meta.csv.
    Generate {
        /// JSON synthetic spec; replaces the config's spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Background-class correlation of both splits.
        #[arg(long)]
        rho: Option<f64>,
        /// Test-split correlation, overriding `--rho`.
        #[arg(long)]
        rho_test: Option<f64>,
    },
    /// Train on the train split, save best.ckpt and evaluate on the test split.
    Train {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        source: EvalArgs,
        /// Also write embeddings.csv and discriminability.json.
        #[arg(long)]
        export_features: bool,
    },
    /// Test accuracy per centered crop size.
    CropExperiment {
        /// Evaluate this checkpoint under each crop instead of retraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        crops: Option<Vec<usize>>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Test accuracy per regularizer weight.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Trainings run concurrently.
        #[arg(long)]
        parallel: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write PCA embeddings and discriminability of pooled features.
    ExportFeatures {
        #[command(flatten)]
        source: EvalArgs,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest directory; omitted means the config's synthetic spec.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Backbone channel widths, one 3×3 conv + pool block each.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Prediction rule for model selection.
    #[arg(long)]
    mode: Option<PredictMode>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    mode: Option<PredictMode>,
    #[arg(long)]
    split: Option<Split>,
}

impl TrainArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.data, self.data.map(Some));
        set(&mut cfg.train.lambda, self.lambda);
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.lr, self.lr);
        set(&mut cfg.train.batch_size, self.batch_size);
        set(&mut cfg.train.val_fraction, self.val_fraction);
        if let Some(w) = self.widths {
            cfg.backbone = BackboneConfig::vgg(cfg.backbone.input_channels, cfg.backbone.input_size, &w);
        }
        set(&mut cfg.mode, self.mode.map(Some));
    }
}

impl EvalArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.checkpoint, self.checkpoint.map(Some));
        set(&mut cfg.data, self.data.map(Some));
        set(&mut cfg.mode, self.mode.map(Some));
        set(&mut cfg.split, self.split);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

type Runner = fn(&RunConfig) -> Result<()>;

fn resolve(cli: Cli) -> Result<(RunConfig, Runner)> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.out, cli.out);
    set(&mut cfg.threads, cli.threads.map(Some));
    let runner: Runner = match cli.command {
        Command::Generate { spec, rho, rho_test } => {
            if let Some(path) = spec {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| usage(format!("cannot read spec {}: {e}", path.display())))?;
                cfg.synthetic = serde_json::from_str::<SyntheticSpec>(&text)
                    .map_err(|e| usage(format!("invalid spec {}: {e}", path.display())))?;
            }
            if let Some(r) = rho {
                cfg.synthetic.rho = r;
                cfg.synthetic.rho_test = None;
            }
            set(&mut cfg.synthetic.rho_test, rho_test.map(Some));
            cir_cli::cmd_generate
        }
        Command::Train { train } => {
            train.apply(&mut cfg);
            cir_cli::cmd_train
        }
        Command::Eval { source, export_features } => {
            source.apply(&mut cfg);
            cfg.export_features |= export_features;
            cir_cli::cmd_eval
        }
        Command::CropExperiment { checkpoint, crops, train } => {
            train.apply(&mut cfg);
            set(&mut cfg.checkpoint, checkpoint.map(Some));
            set(&mut cfg.crops, crops);
            cir_cli::cmd_crop_experiment
        }
        Command::Sweep { lambdas, parallel, train } => {
            train.apply(&mut cfg);
            set(&mut cfg.lambdas, lambdas);
            set(&mut cfg.parallel, parallel);
            cir_cli::cmd_sweep
        }
        Command::ExportFeatures { source } => {
            source.apply(&mut cfg);
            cir_cli::cmd_export_features
        }
    };
    Ok((cfg.resolve()?, runner))
}

fn run(cli: Cli) -> Result<()> {
    let (cfg, runner) = resolve(cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    runner(&cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
