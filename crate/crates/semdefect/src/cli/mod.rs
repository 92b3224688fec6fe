//! Subcommand front end wiring the pipeline stages into reproducible runs.
//!
//! Every invocation works inside one run directory holding the resolved
//! config echo, the manifest, embedding stores, checkpoints, plots and the
//! JSON run report. Exit codes: 0 success, 1 usage/config error, 2 data
//! error, 3 numeric failure.

mod commands;
mod config;

pub use commands::{
    cmd_embed, cmd_ingest, cmd_knn, cmd_pseudo, cmd_report, cmd_split, cmd_sweep, cmd_synth,
    cmd_tsne, Ctx,
};
pub use config::{
    EmbedSection, IngestSection, KnnSection, LayerPreprocess, PreprocessSection, PseudoSection,
    RunConfig, SplitSection, SweepSection, SynthSection, TrainSection, TsneSection,
};

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};

/// Environment variable naming the default run-directory root.
pub const RUN_ROOT_ENV: &str = "SEMDEFECT_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "semdefect",
    about = "Few-shot SEM defect classification pipeline",
    version
)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory (created if missing). Defaults to
    /// $SEMDEFECT_RUN_ROOT/run-<timestamp>-seed<seed>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Master seed; mirrors the `seed` config key.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for embedding; mirrors the `threads` config key.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override any config key by dotted path, e.g. --set knn.k=5.
    #[arg(long = "set", global = true, value_name = "KEY.PATH=VALUE")]
    set: Vec<String>,

    /// Overwrite existing outputs of this stage.
    #[arg(long, global = true)]
    force: bool,

    /// Reuse existing outputs of this stage instead of failing.
    #[arg(long, global = true)]
    resume: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic defect dataset and its manifest.
    Synth {
        /// Mirrors synth.separation (low, medium, high).
        #[arg(long)]
        separation: Option<String>,
        /// Mirrors synth.images_per_class.
        #[arg(long)]
        images_per_class: Option<usize>,
        /// Mirrors synth.num_classes.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Validate an external manifest and copy it into the run directory.
    Ingest {
        /// Manifest to ingest; mirrors ingest.manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Assign wafer-disjoint train/val/test splits.
    Split {
        /// Mirrors split.ratios, e.g. --ratios 0.7,0.1,0.2.
        #[arg(long)]
        ratios: Option<String>,
    },
    /// Preprocess and embed every manifest image into stores.
    Embed {
        /// Mirrors embed.backend (reference, onnx).
        #[arg(long)]
        backend: Option<String>,
        /// Mirrors embed.model_file.
        #[arg(long)]
        model_file: Option<PathBuf>,
    },
    /// Weighted k-NN evaluation of the test split.
    Knn {
        /// Mirrors knn.k.
        #[arg(long)]
        k: Option<usize>,
        /// Extra k values, comma separated; mirrors knn.sweep_k.
        #[arg(long)]
        sweep_k: Option<String>,
        /// Mirrors knn.shots (0 = full train split).
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Train the classification head on labeled shots.
    Train {
        /// Mirrors train.shots (0 = full train split).
        #[arg(long)]
        shots: Option<usize>,
        /// Mirrors train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Mirrors train.peak_lr.
        #[arg(long)]
        peak_lr: Option<f64>,
        /// Mirrors train.head (linear, mlp).
        #[arg(long)]
        head: Option<String>,
    },
    /// Pseudo-label rounds on the unlabeled pool.
    Pseudo {
        /// Mirrors pseudo.shots.
        #[arg(long)]
        shots: Option<usize>,
        /// Mirrors pseudo.tau.
        #[arg(long)]
        tau: Option<f64>,
        /// Mirrors pseudo.rounds.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// 2-D t-SNE layout of embeddings or head representations.
    Tsne {
        /// Mirrors tsne.source (test, train, all).
        #[arg(long)]
        source: Option<String>,
        /// Mirrors tsne.representation (embedding, head).
        #[arg(long)]
        representation: Option<String>,
        /// Mirrors tsne.max_points.
        #[arg(long)]
        max_points: Option<usize>,
    },
    /// Accuracy-vs-shots curves over methods and layers.
    Sweep {
        /// Shot counts, comma separated; mirrors sweep.shots.
        #[arg(long)]
        shots: Option<String>,
        /// Methods, comma separated; mirrors sweep.methods.
        #[arg(long)]
        methods: Option<String>,
    },
    /// Recompute file digests and finalize the run report.
    Report,
}

/// CLI entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn push_override<T: std::fmt::Display>(overrides: &mut Vec<String>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        overrides.push(format!("{key}={v}"));
    }
}

fn push_list_override(overrides: &mut Vec<String>, key: &str, v: &Option<String>, quoted: bool) {
    if let Some(list) = v {
        let items: Vec<String> = list
            .split(',')
            .map(|s| {
                let s = s.trim();
                if quoted {
                    format!("\"{s}\"")
                } else {
                    s.to_string()
                }
            })
            .collect();
        overrides.push(format!("{key}=[{}]", items.join(", ")));
    }
}

fn execute(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };

    let mut overrides = Vec::new();
    push_override(&mut overrides, "seed", &cli.seed);
    push_override(&mut overrides, "threads", &cli.threads);
    match &cli.command {
        Command::Synth {
            separation,
            images_per_class,
            classes,
        } => {
            if let Some(s) = separation {
                overrides.push(format!("synth.separation=\"{s}\""));
            }
            push_override(&mut overrides, "synth.images_per_class", images_per_class);
            push_override(&mut overrides, "synth.num_classes", classes);
        }
        Command::Ingest { manifest } => {
            if let Some(m) = manifest {
                overrides.push(format!("ingest.manifest=\"{}\"", m.display()));
            }
        }
        Command::Split { ratios } => push_list_override(&mut overrides, "split.ratios", ratios, false),
        Command::Embed {
            backend,
            model_file,
        } => {
            if let Some(b) = backend {
                overrides.push(format!("embed.backend=\"{b}\""));
            }
            if let Some(m) = model_file {
                overrides.push(format!("embed.model_file=\"{}\"", m.display()));
            }
        }
        Command::Knn { k, sweep_k, shots } => {
            push_override(&mut overrides, "knn.k", k);
            push_list_override(&mut overrides, "knn.sweep_k", sweep_k, false);
            push_override(&mut overrides, "knn.shots", shots);
        }
        Command::Train {
            shots,
            epochs,
            peak_lr,
            head,
        } => {
            push_override(&mut overrides, "train.shots", shots);
            push_override(&mut overrides, "train.epochs", epochs);
            push_override(&mut overrides, "train.peak_lr", peak_lr);
            if let Some(h) = head {
                overrides.push(format!("train.head=\"{h}\""));
            }
        }
        Command::Pseudo { shots, tau, rounds } => {
            push_override(&mut overrides, "pseudo.shots", shots);
            push_override(&mut overrides, "pseudo.tau", tau);
            push_override(&mut overrides, "pseudo.rounds", rounds);
        }
        Command::Tsne {
            source,
            representation,
            max_points,
        } => {
            if let Some(s) = source {
                overrides.push(format!("tsne.source=\"{s}\""));
            }
            if let Some(r) = representation {
                overrides.push(format!("tsne.representation=\"{r}\""));
            }
            push_override(&mut overrides, "tsne.max_points", max_points);
        }
        Command::Sweep { shots, methods } => {
            push_list_override(&mut overrides, "sweep.shots", shots, false);
            push_list_override(&mut overrides, "sweep.methods", methods, true);
        }
        Command::Report => {}
    }
    overrides.extend(cli.set.iter().cloned());
    let config = base.with_overrides(&overrides)?;

    let run_dir = match cli.run_dir {
        Some(dir) => dir,
        None => {
            let root = std::env::var(RUN_ROOT_ENV).unwrap_or_else(|_| "runs".into());
            let stamp = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_err(|e| Error::Config(format!("clock error: {e}")))?
                .as_secs();
            PathBuf::from(root).join(format!("run-{stamp}-seed{}", config.seed))
        }
    };

    let ctx = Ctx {
        run_dir,
        config,
        force: cli.force,
        resume: cli.resume,
    };

    match cli.command {
        Command::Synth { .. } => cmd_synth(&ctx),
        Command::Ingest { .. } => cmd_ingest(&ctx),
        Command::Split { .. } => cmd_split(&ctx),
        Command::Embed { .. } => cmd_embed(&ctx),
        Command::Knn { .. } => cmd_knn(&ctx),
        Command::Train { .. } => cmd_train(&ctx).map(|_| ()),
        Command::Pseudo { .. } => cmd_pseudo(&ctx),
        Command::Tsne { .. } => cmd_tsne(&ctx).map(|_| ()),
        Command::Sweep { .. } => cmd_sweep(&ctx),
        Command::Report => cmd_report(&ctx),
    }
}

pub use commands::cmd_train;
