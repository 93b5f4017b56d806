use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dualview_core::data::SplitPart;
use dualview_core::model::ViewMode;
use dualview_core::train::{
    checkpoint, export, grid_csv, load_or_generate, run_ablation_grid, run_experiment, TrainConfig,
};

#[derive(Parser)]
#[command(name = "dualview", version, about = "Train and evaluate dual-view plaque grading models on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, checkpoint and embeddings.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Dataset cache to read instead of regenerating the data.
        #[arg(long)]
        dataset_cache: Option<PathBuf>,
    },
    /// Write per-sample features of every sample as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset_cache: Option<PathBuf>,
    },
    /// Run the full model and its five ablations for each seed.
    AblationGrid {
        #[arg(long)]
        config: PathBuf,
        /// Seeds to run; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/grid")]
        out: PathBuf,
    },
    /// Print a complete config file for a preset.
    PrintConfig {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SingleView {
    Long,
    Trans,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, conflicts_with_all = ["no_dsam", "no_moe", "view"])]
    no_cmcl: bool,
    #[arg(long, conflicts_with_all = ["no_moe", "view"])]
    no_dsam: bool,
    #[arg(long, conflicts_with = "view")]
    no_moe: bool,
    #[arg(long, value_enum)]
    view: Option<SingleView>,
    /// Output directory; defaults to `runs/<variant>-seed<S>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset_cache: Option<PathBuf>,
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = TrainConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let ab = &mut config.ablation;
    ab.no_cmcl |= args.no_cmcl;
    ab.no_dsam |= args.no_dsam;
    ab.no_moe |= args.no_moe;
    match args.view {
        Some(SingleView::Long) => ab.view = ViewMode::Long,
        Some(SingleView::Trans) => ab.view = ViewMode::Trans,
        None => {}
    }
    config.validate()?;
    let out = args
        .out
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", config.ablation.label(), config.seed)));
    eprintln!("training {} (seed {}) into {}", config.ablation.label(), config.seed, out.display());
    let art = run_experiment(&config, &out, args.dataset_cache.as_deref(), |log, val| {
        let gate = log.gate_entropy.map_or(String::new(), |h| format!(" gate_entropy={h:.4}"));
        eprintln!(
            "epoch {:>3} loss={:.4} ce={:.4} cmcl={:.4}{gate} | val acc={:.4} m_f1={:.4}",
            log.epoch, log.total, log.ce, log.cmcl, val.acc, val.m_f1
        );
    })?;
    let t = &art.outcome.test;
    println!(
        "best epoch {}: test acc={:.6} m_pre={:.6} m_rec={:.6} m_f1={:.6}",
        art.outcome.best_epoch, t.acc, t.m_pre, t.m_rec, t.m_f1
    );
    println!("wrote {}, {}, {}", art.metrics.display(), art.checkpoint.display(), art.embeddings.display());
    Ok(())
}

fn restore(path: &Path, cache: Option<&Path>) -> Result<dualview_core::train::Trainer> {
    let ck = checkpoint::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let dataset = load_or_generate(&ck.config, cache)?;
    Ok(ck.into_trainer_with(dataset)?)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => train(args),
        Command::Eval {
            checkpoint,
            split,
            dataset_cache,
        } => {
            let Some(part) = SplitPart::parse(&split) else {
                bail!("unknown split {split:?} (expected train, val or test)");
            };
            let trainer = restore(&checkpoint, dataset_cache.as_deref())?;
            let m = trainer.evaluate(part)?;
            println!("{}", dualview_core::train::metrics_csv(&[m]).trim_end());
            Ok(())
        }
        Command::ExportEmbeddings {
            checkpoint,
            out,
            dataset_cache,
        } => {
            let trainer = restore(&checkpoint, dataset_cache.as_deref())?;
            let all: Vec<usize> = (0..trainer.dataset.len()).collect();
            export::write_embeddings(&out, &trainer.embeddings(&all)?)?;
            println!("wrote {} rows to {}", all.len(), out.display());
            Ok(())
        }
        Command::AblationGrid { config, seeds, out } => {
            let base = TrainConfig::load(&config)?;
            let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds };
            let rows = run_ablation_grid(&base, &seeds, &out, |row| {
                eprintln!(
                    "{:<8} seed {:>3}: test acc={:.4} m_f1={:.4}",
                    row.variant, row.seed, row.test.acc, row.test.m_f1
                );
            })?;
            print!("{}", grid_csv(&rows));
            Ok(())
        }
        Command::PrintConfig { preset } => {
            print!("{}", TrainConfig::preset(&preset)?.to_toml());
            Ok(())
        }
    }
}
