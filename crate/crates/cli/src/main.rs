//! `scenediff` command-line front end.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! numerical failures (non-finite losses or activations).

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scenediff::data::SynthManifest;

use crate::commands::{EvalArgs, SampleArgs};
use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<scenediff::Error> for CliError {
    fn from(e: scenediff::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "scenediff", version, about = "Scene-graph conditioned 3D layout diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a denoiser and write a checkpoint with its training log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Named starting configuration, overlaid by --config.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate scenes for one graph.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Guidance weight; defaults to the checkpoint's.
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of scenes, each with its own noise stream.
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Replace every typed relation of the condition by the neutral one.
        #[arg(long)]
        ablate_relations: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one scene per condition and score relationship alignment.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A graph file or a directory of graph files.
        #[arg(long)]
        graphs: PathBuf,
        /// Supplies the predicate thresholds.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also score the label-only pathway and write a second report.
        #[arg(long)]
        ablate_relations: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a scene file as a top-view SVG.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic paired scene/graph corpus.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Regenerate the corpus described by an existing manifest.
        #[arg(long, conflicts_with_all = ["config", "preset", "n", "seed"])]
        from_manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            preset,
            seed,
            out,
            epochs,
        } => {
            let mut cfg = RunConfig::load(config.as_deref(), preset.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let path = commands::train(cfg)?;
            println!("{}", path.display());
        }
        Command::Sample {
            checkpoint,
            graph,
            guidance,
            seed,
            n,
            ablate_relations,
            out,
        } => {
            let written = commands::sample(&SampleArgs {
                checkpoint,
                graph,
                guidance,
                seed,
                n,
                ablate_relations,
                out,
            })?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            checkpoint,
            graphs,
            config,
            guidance,
            seed,
            ablate_relations,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref(), None)?;
            let written = commands::eval(&EvalArgs {
                checkpoint,
                graphs,
                guidance,
                seed,
                ablate_relations,
                predicates: cfg.predicates,
                out,
            })?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Render { scene, out } => commands::render(&scene, &out)?,
        Command::Synth {
            config,
            preset,
            n,
            seed,
            from_manifest,
            out,
        } => {
            let manifest = match from_manifest {
                Some(path) => SynthManifest::read(&path)?,
                None => {
                    let cfg = RunConfig::load(config.as_deref(), preset.as_deref())?;
                    let n_scenes = n.ok_or_else(|| CliError::Input("--n is required".into()))?;
                    SynthManifest {
                        seed: seed.unwrap_or(cfg.seed),
                        n_scenes,
                        config: cfg.synth,
                        predicates: cfg.predicates,
                        relations: Vec::new(),
                        files: Vec::new(),
                    }
                }
            };
            let path = commands::synth(&manifest, &out)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
