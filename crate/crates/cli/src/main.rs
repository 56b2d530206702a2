//! `causalfuse` command-line interface.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use causalfuse::Modality;
use clap::{Args, Parser, Subcommand};

use crate::commands::Variant;
use crate::config::RunConfig;
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "causalfuse", version, about = "Scene-deconfounded infrared/visible image fusion")]
struct Cli {
    /// Seed for the stage being run; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration with sections data, dictionary, model, train, eval.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path of the stage (corpus root, dictionary file, run directory,
    /// fused image or CSV report).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus split.
    GenData(GenDataArgs),
    /// Build a confounder dictionary for one modality.
    BuildDict(BuildDictArgs),
    /// Train a fusion model.
    Train(TrainArgs),
    /// Fuse one infrared/visible pair.
    Fuse(FuseArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Compare dictionary sizes and the model without adjustment.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct CorpusArgs {
    /// Corpus root.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Split to read.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    street: Option<f64>,
    #[arg(long)]
    cloud: Option<f64>,
    #[arg(long)]
    bush: Option<f64>,
    /// Number of pairs drawn from the profile.
    #[arg(short = 'n', long = "count")]
    n: Option<usize>,
    /// Generate this many pairs per category instead of using the profile.
    #[arg(long, conflicts_with_all = ["street", "cloud", "bush", "n"])]
    per_category: Option<usize>,
    /// Side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Split name written under the corpus root.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Debug, Args)]
struct BuildDictArgs {
    #[arg(long)]
    modality: Modality,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Dictionary size.
    #[arg(short = 'N', long = "entries")]
    n: Option<usize>,
    /// Reduced feature dimension.
    #[arg(short = 'd', long = "dim")]
    d: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    dict_vis: Option<PathBuf>,
    #[arg(long)]
    dict_ir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    /// Zero and freeze the confounder projections.
    #[arg(long)]
    no_baffm: bool,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    ir: PathBuf,
    #[arg(long)]
    vis: PathBuf,
    /// Drop the confounder term of the loaded model.
    #[arg(long)]
    no_baffm: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    no_baffm: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Comma-separated dictionary sizes, one variant each.
    #[arg(long, value_delimiter = ',')]
    dict_sizes: Vec<usize>,
    /// Add a variant trained without the confounder term.
    #[arg(long)]
    no_baffm: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

impl CorpusArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(c) = &self.corpus {
            cfg.data.corpus = c.clone();
        }
        if let Some(s) = &self.split {
            cfg.data.split = s.clone();
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData(a) => {
            let d = &mut cfg.data;
            d.street = a.street.unwrap_or(d.street);
            d.cloud = a.cloud.unwrap_or(d.cloud);
            d.bush = a.bush.unwrap_or(d.bush);
            d.n = a.n.unwrap_or(d.n);
            d.size = a.size.unwrap_or(d.size);
            if a.per_category.is_some() {
                d.per_category = a.per_category;
            }
            if let Some(s) = a.split {
                d.split = s;
            }
            if let Some(s) = cli.seed {
                d.seed = s;
            }
            let root = cli.out.unwrap_or_else(|| cfg.data.corpus.clone());
            commands::gen_data(&cfg, &root)?;
        }
        Command::BuildDict(a) => {
            a.corpus.apply(&mut cfg);
            cfg.dictionary.n = a.n.unwrap_or(cfg.dictionary.n);
            cfg.dictionary.d = a.d.unwrap_or(cfg.dictionary.d);
            if let Some(s) = cli.seed {
                cfg.dictionary.seed = s;
            }
            let out = cli.out.unwrap_or_else(|| match a.modality {
                Modality::Visible => cfg.dictionary.visible.clone(),
                Modality::Infrared => cfg.dictionary.infrared.clone(),
            });
            commands::build_dict(&cfg, a.modality, &out)?;
        }
        Command::Train(a) => {
            a.corpus.apply(&mut cfg);
            let t = &mut cfg.train;
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.lr = a.lr.unwrap_or(t.lr);
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            t.crop = a.crop.unwrap_or(t.crop);
            if let Some(s) = cli.seed {
                t.seed = s;
            }
            if let Some(p) = a.dict_vis {
                cfg.dictionary.visible = p;
            }
            if let Some(p) = a.dict_ir {
                cfg.dictionary.infrared = p;
            }
            if a.no_baffm {
                cfg.model.adjust = false;
            }
            let run_dir = cli.out.unwrap_or_else(|| cfg.train.run_dir.clone());
            commands::train_run(&cfg, &run_dir)?;
        }
        Command::Fuse(a) => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("fused.pgm"));
            commands::fuse(&a.checkpoint, &a.ir, &a.vis, &out, a.no_baffm)?;
        }
        Command::Eval(a) => {
            if let Some(c) = &a.corpus.corpus {
                cfg.data.corpus = c.clone();
            }
            if let Some(s) = &a.corpus.split {
                cfg.eval.split = s.clone();
            }
            let out = cli.out.unwrap_or_else(|| cfg.eval.report.clone());
            commands::eval(&cfg, &a.checkpoint, &out, a.no_baffm)?;
        }
        Command::Ablate(a) => {
            cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
                cfg.dictionary.seed = s;
            }
            let mut variants: Vec<Variant> = a.dict_sizes.iter().map(|&n| Variant::DictSize(n)).collect();
            if a.no_baffm || variants.is_empty() {
                if variants.is_empty() {
                    variants.push(Variant::DictSize(cfg.dictionary.n));
                }
                variants.push(Variant::NoBaffm);
            }
            let table = commands::ablate(&cfg, &variants)?;
            if let Some(out) = &cli.out {
                causalfuse::corpus::atomic_write(out, table.as_bytes())?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
