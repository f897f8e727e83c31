//! Command-line front end of the fibresr pipeline.
//!
//! `synth` writes a procedural HR/LR corpus, `train` fits the generator on
//! it, `infer` super-resolves frames with a checkpoint, `eval` scores
//! SR/HR/LR triples and `report` summarises runs. Every command writes a
//! `run_manifest.json` next to its outputs.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fibresr::data::{Domain, SplitMode};
use fibresr::phantom::PhantomKind;
use fibresr::Error;
use toml::Value;

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::NumericalAbort { .. } => EXIT_NUMERICAL,
        Error::Data(_)
        | Error::MissingPairs(_)
        | Error::DimensionMismatch { .. }
        | Error::LengthMismatch { .. }
        | Error::DegenerateTriangulation(_)
        | Error::TooManyFibres { .. }
        | Error::Io { .. }
        | Error::Image(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_DATA,
        _ => EXIT_OTHER,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fibresr",
    version,
    about = "Unsupervised super-resolution for fibre-bundle endomicroscopy"
)]
pub struct Cli {
    /// TOML configuration with sections synth, layout, noise, data,
    /// training, generator, discriminator and metrics
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set training.lr=5e-5`
    /// (repeatable; applied after the file, before dedicated flags)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Master seed for every random stream
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory under which commands write when --out is not given
    #[arg(
        long,
        global = true,
        env = "FIBRESR_OUTPUT_ROOT",
        default_value = "fibresr-out",
        value_name = "DIR"
    )]
    pub output_root: PathBuf,

    /// More log output (repeat for debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate procedural HR phantoms, their fibre layout and synthetic LR
    /// frames
    Synth {
        /// Output directory [default: <output-root>/synth]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of frames
        #[arg(long)]
        frames: Option<usize>,
        /// Frame width and height in pixels
        #[arg(long)]
        size: Option<usize>,
        /// Phantom texture: blobs, filaments, gradient or mixed
        #[arg(long)]
        kind: Option<PhantomKind>,
        /// Fibre density in fibres per pixel
        #[arg(long)]
        density: Option<f64>,
        /// Additive noise standard deviation
        #[arg(long)]
        sigma_add: Option<f64>,
        /// Multiplicative noise standard deviation
        #[arg(long)]
        sigma_mult: Option<f64>,
    },
    /// Train the generator and discriminator on a synthesised dataset
    Train {
        /// Dataset directory holding manifest.jsonl and layout.json
        #[arg(long)]
        data: PathBuf,
        /// Output directory [default: <output-root>/train]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of training iterations
        #[arg(long)]
        iterations: Option<usize>,
        /// Target domain: nat, orig, syn or res
        #[arg(long)]
        target_domain: Option<Domain>,
        /// Directory of natural images for the nat domain
        #[arg(long)]
        natural_dir: Option<PathBuf>,
        /// Grouping for the split: cs1 (video) or cs2 (patient)
        #[arg(long)]
        split: Option<SplitMode>,
        /// Continue from a checkpoint stem (e.g. run/iter_000500)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve PNG frames at full size
    Infer {
        /// Checkpoint stem (path without .json/.bin)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory [default: <output-root>/infer]
        #[arg(long)]
        out: Option<PathBuf>,
        /// PNG files or directories of PNG files
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score SR images against HR and LR references matched by file name
    Eval {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        lr: PathBuf,
        /// Output directory [default: <output-root>/eval]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the SVG box plots
        #[arg(long)]
        no_plots: bool,
    },
    /// Summarise training runs and evaluation reports
    Report {
        /// Run directories, eval directories or report.csv files
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Also write the summary to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the fully resolved configuration as TOML
    Config,
}

fn num(v: f64) -> Value {
    Value::Float(v)
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn text(v: impl ToString) -> Value {
    Value::String(v.to_string())
}

impl Cli {
    fn flag_overrides(&self) -> Vec<(&'static str, Value)> {
        let mut f = Vec::new();
        if let Some(s) = self.seed {
            f.push(("seed", Value::Integer(s as i64)));
        }
        match &self.command {
            Command::Synth {
                frames,
                size,
                kind,
                density,
                sigma_add,
                sigma_mult,
                ..
            } => {
                if let Some(n) = frames {
                    f.push(("synth.frames", int(*n)));
                }
                if let Some(s) = size {
                    f.push(("synth.width", int(*s)));
                    f.push(("synth.height", int(*s)));
                }
                if let Some(k) = kind {
                    f.push(("synth.kind", Value::try_from(k).expect("enum serialises")));
                }
                if let Some(d) = density {
                    f.push(("layout.density", num(*d)));
                }
                if let Some(s) = sigma_add {
                    f.push(("noise.sigma_add", num(*s)));
                }
                if let Some(s) = sigma_mult {
                    f.push(("noise.sigma_mult", num(*s)));
                }
            }
            Command::Train {
                iterations,
                target_domain,
                natural_dir,
                split,
                ..
            } => {
                if let Some(n) = iterations {
                    f.push(("training.max_iterations", int(*n)));
                }
                if let Some(d) = target_domain {
                    f.push(("data.target_domain", text(d)));
                }
                if let Some(d) = natural_dir {
                    f.push(("data.natural_dir", text(d.display())));
                }
                if let Some(s) = split {
                    f.push(("data.split", Value::try_from(s).expect("enum serialises")));
                }
            }
            Command::Eval { no_plots: true, .. } => {
                f.push(("metrics.plots", Value::Boolean(false)))
            }
            _ => {}
        }
        f
    }

    pub fn resolve_config(&self) -> fibresr::Result<RunConfig> {
        RunConfig::resolve(
            self.config.as_deref(),
            &self.overrides,
            &self.flag_overrides(),
        )
    }

    fn out_dir(&self, out: &Option<PathBuf>, name: &str) -> PathBuf {
        out.clone().unwrap_or_else(|| self.output_root.join(name))
    }
}

/// Runs the parsed command, printing its human-readable result to stdout.
pub fn run(cli: &Cli) -> fibresr::Result<()> {
    let config = cli.resolve_config()?;
    match &cli.command {
        Command::Synth { out, .. } => {
            let dir = cli.out_dir(out, "synth");
            commands::synth(&config, &dir)?;
            println!("{}", dir.display());
        }
        Command::Train {
            data, out, resume, ..
        } => {
            let dir = cli.out_dir(out, "train");
            let (summary, _) = commands::train(&config, data, &dir, resume.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Infer {
            checkpoint,
            out,
            inputs,
        } => {
            let dir = cli.out_dir(out, "infer");
            let m = commands::infer(&config, checkpoint, inputs, &dir)?;
            println!("{} images written to {}", m.outputs.len(), dir.display());
        }
        Command::Eval {
            sr, hr, lr, out, ..
        } => {
            let dir = cli.out_dir(out, "eval");
            let (report, _) = commands::eval(&config, sr, hr, lr, &dir)?;
            print!("{}", report.text_table());
        }
        Command::Report { paths, out } => {
            let text = commands::report(paths)?;
            if let Some(p) = out {
                write_text(p, &text)?;
            }
            print!("{text}");
        }
        Command::Config => print!("{}", config.to_toml()?),
    }
    Ok(())
}

fn write_text(p: &Path, text: &str) -> fibresr::Result<()> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}
