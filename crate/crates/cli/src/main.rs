//! `ssdbn`: train spike-and-slab RBM texture models, synthesize and inpaint
//! textures, and evaluate the results.
//!
//! A flat `key = value` config file (sections in brackets) supplies defaults;
//! command-line flags override file values. Run `ssdbn dump-config` to see
//! every key with its default.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "ssdbn", version, about, max_term_width = 100)]
struct Cli {
    /// Flat config file (`[section]` headers, `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct CommonOverrides {
    /// Master seed; all randomness derives from it [default: 42]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Default)]
struct TrainOverrides {
    /// Training patch side [default: 98]
    #[arg(long)]
    patch: Option<usize>,
    /// Layers in the stack (1-3) [default: 1]
    #[arg(long)]
    layers: Option<usize>,
    /// First-layer filters per tiling [default: 32]
    #[arg(long)]
    filters: Option<usize>,
    /// Upper-layer filter counts, comma separated [default: 128,128]
    #[arg(long)]
    upper_filters: Option<String>,
    /// Training algorithm(s), comma separated: cd, pcd, fpcd
    /// [default: fpcd for one layer, cd,...,pcd for stacks]
    #[arg(long)]
    algorithms: Option<String>,
    /// Parameter updates per layer [default: 10000]
    #[arg(long)]
    updates: Option<u64>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Momentum coefficient [default: 0]
    #[arg(long)]
    momentum: Option<f64>,
    /// Minibatch size [default: 64]
    #[arg(long)]
    minibatch: Option<usize>,
    /// Persistent chain count [default: 64]
    #[arg(long)]
    n_chains: Option<usize>,
    /// Per-chain restart probability [default: 0.01]
    #[arg(long)]
    restart_prob: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess a texture (rescale, split halves, normalize) and cache it.
    Prepare {
        /// Source texture (binary PGM).
        #[arg(long)]
        texture: PathBuf,
        /// Output dataset file.
        #[arg(long, default_value = "dataset.tex")]
        out: PathBuf,
        /// Rescale target side [default: 320]
        #[arg(long)]
        target: Option<usize>,
    },
    /// Train a 1-3 layer model on a texture.
    Train {
        /// Source texture (binary PGM); preprocessed on the fly.
        #[arg(long)]
        texture: Option<PathBuf>,
        /// Cached dataset from `prepare`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output model file.
        #[arg(long, default_value = "model.ssdbn")]
        out: PathBuf,
        /// Tab-separated training log destination.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        train: TrainOverrides,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Draw unconstrained samples from a trained model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Output directory for PGM samples.
        #[arg(long, default_value = "samples")]
        out: PathBuf,
        /// Number of samples [default: 128]
        #[arg(long)]
        count: Option<usize>,
        /// Sample side [default: 120]
        #[arg(long)]
        size: Option<usize>,
        /// Warm-up sweeps before the first sample [default: 2000]
        #[arg(long)]
        burn_in: Option<usize>,
        /// Sweeps between collected samples [default: 50]
        #[arg(long)]
        thin: Option<usize>,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Inpaint masked test patches with the border clamped.
    Inpaint {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        texture: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory for frames/results.
        #[arg(long, default_value = "inpaint")]
        out: PathBuf,
        /// Frame side [default: 76]
        #[arg(long)]
        frame: Option<usize>,
        /// Free center side [default: 54]
        #[arg(long)]
        center: Option<usize>,
        /// Gibbs iterations per inpainting [default: 500]
        #[arg(long)]
        iters: Option<usize>,
        /// Frames per texture [default: 20]
        #[arg(long)]
        frames: Option<usize>,
        /// Independent seeds per frame [default: 5]
        #[arg(long)]
        seeds: Option<usize>,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Score synthesized samples against the test half (max NCC).
    EvalTss {
        /// Directory of sample PGMs.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        texture: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Score patch side [default: 19]
        #[arg(long)]
        patch: Option<usize>,
        /// Model label for the report.
        #[arg(long, default_value = "model")]
        model_name: String,
        /// Output TSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score inpaintings against their ground truth over the free center.
    EvalMssim {
        /// Directory produced by `inpaint`.
        #[arg(long)]
        dir: PathBuf,
        /// Texture label for the report.
        #[arg(long, default_value = "texture")]
        texture_name: String,
        /// Model label for the report.
        #[arg(long, default_value = "model")]
        model_name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Autocorrelation spectrum of a consecutive-sweep sample chain.
    Mixing {
        #[arg(long)]
        model: PathBuf,
        /// Chain length [default: 300]
        #[arg(long)]
        length: Option<usize>,
        /// Warm-up sweeps [default: 500]
        #[arg(long)]
        burn_in: Option<usize>,
        /// Largest lag reported [default: 100]
        #[arg(long)]
        max_lag: Option<usize>,
        /// Chain image side [default: 120]
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Print the fully resolved configuration (defaults + file + flags).
    DumpConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            Ok(RunConfig::from_file(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn apply_common(cfg: &mut RunConfig, c: &CommonOverrides) {
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("initializing worker pool")?;
    }
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Prepare { texture, out, target } => {
            if let Some(t) = target {
                cfg.target_size = *t;
            }
            commands::prepare(&cfg, texture, out)
        }
        Command::Train {
            texture,
            dataset,
            out,
            log,
            train,
            common,
        } => {
            apply_common(&mut cfg, common);
            if let Some(v) = train.patch {
                cfg.patch = v;
            }
            if let Some(v) = train.layers {
                cfg.layers = v;
            }
            if let Some(v) = train.filters {
                cfg.filters = v;
            }
            if let Some(v) = &train.upper_filters {
                cfg.upper_filters = v
                    .split(',')
                    .map(|s| s.trim().parse().context("bad --upper-filters"))
                    .collect::<Result<_>>()?;
            }
            if let Some(v) = &train.algorithms {
                cfg.algorithms = Some(
                    v.split(',')
                        .map(|s| Ok(s.trim().parse::<ssdbn::train::Algorithm>()?))
                        .collect::<Result<_>>()?,
                );
            }
            if let Some(v) = train.updates {
                cfg.updates = v;
            }
            if let Some(v) = train.learning_rate {
                cfg.learning_rate = v;
            }
            if let Some(v) = train.momentum {
                cfg.momentum = v;
            }
            if let Some(v) = train.minibatch {
                cfg.minibatch = v;
            }
            if let Some(v) = train.n_chains {
                cfg.n_chains = v;
            }
            if let Some(v) = train.restart_prob {
                cfg.restart_prob = v;
            }
            cfg.validate()?;
            commands::train(&cfg, texture.as_deref(), dataset.as_deref(), out, log.as_deref())
        }
        Command::Sample {
            model,
            out,
            count,
            size,
            burn_in,
            thin,
            common,
        } => {
            apply_common(&mut cfg, common);
            if let Some(v) = count {
                cfg.sample_count = *v;
            }
            if let Some(v) = size {
                cfg.sample_size = *v;
            }
            if let Some(v) = burn_in {
                cfg.burn_in = *v;
            }
            if let Some(v) = thin {
                cfg.thin = *v;
            }
            commands::sample(&cfg, model, out)
        }
        Command::Inpaint {
            model,
            texture,
            dataset,
            out,
            frame,
            center,
            iters,
            frames,
            seeds,
            common,
        } => {
            apply_common(&mut cfg, common);
            if let Some(v) = frame {
                cfg.inpaint_frame = *v;
            }
            if let Some(v) = center {
                cfg.inpaint_center = *v;
            }
            if let Some(v) = iters {
                cfg.inpaint_iters = *v;
            }
            if let Some(v) = frames {
                cfg.inpaint_frames = *v;
            }
            if let Some(v) = seeds {
                cfg.inpaint_seeds = *v;
            }
            commands::inpaint(&cfg, model, texture.as_deref(), dataset.as_deref(), out)
        }
        Command::EvalTss {
            samples,
            texture,
            dataset,
            patch,
            model_name,
            out,
        } => {
            if let Some(v) = patch {
                cfg.tss_patch = *v;
            }
            commands::eval_tss(
                &cfg,
                samples,
                texture.as_deref(),
                dataset.as_deref(),
                model_name,
                out.as_deref(),
            )
        }
        Command::EvalMssim {
            dir,
            texture_name,
            model_name,
            out,
        } => commands::eval_mssim(&cfg, dir, texture_name, model_name, out.as_deref()),
        Command::Mixing {
            model,
            length,
            burn_in,
            max_lag,
            size,
            out,
            common,
        } => {
            apply_common(&mut cfg, common);
            if let Some(v) = length {
                cfg.mixing_length = *v;
            }
            if let Some(v) = burn_in {
                cfg.mixing_burn_in = *v;
            }
            if let Some(v) = max_lag {
                cfg.mixing_max_lag = *v;
            }
            if let Some(v) = size {
                cfg.mixing_size = *v;
            }
            commands::mixing(&cfg, model, out.as_deref())
        }
        Command::DumpConfig => {
            commands::dump_config(&cfg, std::io::stdout().lock())?;
            Ok(())
        }
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
