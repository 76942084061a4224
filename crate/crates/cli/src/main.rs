use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use corrtrack_cli::commands;
use corrtrack_cli::config::{AblateAxis, RunConfig};
use corrtrack_core::metrics::Split;

#[derive(Parser)]
#[command(name = "corrtrack", version, about = "Train and evaluate a pairwise correspondence tracker on synthetic scenes")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the training and evaluation scenes to disk.
    Gen,
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Track the evaluation queries and write trajectory CSVs.
    Track {
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        sampling: Option<String>,
        /// Use ground-truth descriptors, pointmaps and visibility.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score trajectory CSVs against ground truth.
    Eval {
        /// Directory holding `scene_<seed>.csv` files; defaults to `<out>/tracks`.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Split to report; all and dynamic when omitted.
        #[arg(long)]
        split: Option<Split>,
        /// Label for the model column of `eval.csv`.
        #[arg(long, default_value = "model")]
        model: String,
    },
    /// Train and evaluate once per value of a ratio or stride sweep.
    Ablate {
        #[arg(long)]
        axis: Option<AblateAxis>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Time one optimizer step on a batch of training pairs.
    Bench,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(d) = cli.data {
        cfg.data.root = d;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
        cfg.track.workers = w;
    }
    match cli.command {
        Command::Gen => {
            cfg.validate()?;
            for dir in commands::cmd_gen(&cfg)? {
                println!("{}", dir.display());
            }
        }
        Command::Train { steps, ratio } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(r) = ratio {
                cfg.train.ratio = r;
            }
            cfg.validate()?;
            let s = commands::cmd_train(&cfg)?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Track {
            mode,
            sampling,
            oracle,
            checkpoint,
        } => {
            if let Some(m) = mode {
                cfg.track.mode = m;
            }
            if let Some(s) = sampling {
                cfg.track.sampling = s;
            }
            cfg.track.oracle |= oracle;
            if checkpoint.is_some() {
                cfg.track.checkpoint = checkpoint;
            }
            cfg.validate()?;
            for p in commands::cmd_track(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Eval { pred, split, model } => {
            cfg.validate()?;
            let pred = pred.unwrap_or_else(|| cfg.out.join("tracks"));
            let splits = match split {
                Some(s) => vec![s],
                None => vec![Split::All, Split::Dynamic],
            };
            for r in commands::cmd_eval(&cfg, &pred, &splits, &model)? {
                print!("{}", r.to_kv());
            }
        }
        Command::Ablate { axis, values } => {
            if let Some(a) = axis {
                cfg.ablate.axis = a;
            }
            if let Some(v) = values {
                cfg.ablate.values = v;
            }
            cfg.validate()?;
            for r in commands::cmd_ablate(&cfg)? {
                println!(
                    "{}: all {:?} dynamic {:?} static {:?}",
                    r.label, r.all.delta_avg, r.dynamic.delta_avg, r.r#static.delta_avg
                );
            }
        }
        Command::Bench => {
            cfg.validate()?;
            println!("{}", serde_json::to_string(&commands::cmd_bench(&cfg)?)?);
        }
    }
    Ok(())
}
