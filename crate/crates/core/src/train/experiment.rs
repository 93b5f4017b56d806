//! End-to-end runs that write their artifacts to a directory.

use std::path::{Path, PathBuf};

use crate::data::{self, cache, Dataset};
use crate::error::{Error, Result};
use crate::train::checkpoint;
use crate::train::config::{Ablation, TrainConfig};
use crate::train::export::write_embeddings;
use crate::train::metrics::{metrics_csv, MetricsReport};
use crate::train::trainer::{EpochLog, RunOutcome, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

/// Paths written by [`run_experiment`].
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub embeddings: PathBuf,
    pub outcome: RunOutcome,
}

/// Text stored in a dataset cache to identify its generator settings.
pub fn cache_tag(config: &TrainConfig) -> String {
    #[derive(serde::Serialize)]
    struct Tag<'a> {
        seed: u64,
        data: &'a data::GenSpec,
    }
    toml::to_string(&Tag {
        seed: config.seed,
        data: &config.data,
    })
    .expect("serialisable")
}

/// Reads the cache when it was made with the same seed and generator
/// settings; otherwise generates and (re)writes it.
pub fn load_or_generate(config: &TrainConfig, cache_path: Option<&Path>) -> Result<Dataset> {
    let tag = cache_tag(config);
    if let Some(p) = cache_path {
        if p.exists() {
            let (ds, stored) = cache::read(p)?;
            if stored == tag {
                return Ok(ds);
            }
        }
    }
    let ds = data::generate(config.seed, &config.data)?;
    if let Some(p) = cache_path {
        cache::write(p, &ds, &tag)?;
    }
    Ok(ds)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains, keeps the best validation state, and writes the metrics CSV, the
/// checkpoint and the embedding export of every sample into `dir`.
pub fn run_experiment(
    config: &TrainConfig,
    dir: &Path,
    cache_path: Option<&Path>,
    on_epoch: impl FnMut(&EpochLog, &MetricsReport),
) -> Result<Artifacts> {
    create_dir(dir)?;
    let dataset = load_or_generate(config, cache_path)?;
    let mut trainer = Trainer::with_dataset(config.clone(), dataset)?;
    let outcome = trainer.run(on_epoch)?;

    let metrics = dir.join(METRICS_FILE);
    std::fs::write(&metrics, metrics_csv(&outcome.metrics)).map_err(|e| Error::io(&metrics, e))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &trainer)?;
    let embeddings = dir.join(EMBEDDINGS_FILE);
    let all: Vec<usize> = (0..trainer.dataset.len()).collect();
    write_embeddings(&embeddings, &trainer.embeddings(&all)?)?;
    Ok(Artifacts {
        metrics,
        checkpoint: ckpt,
        embeddings,
        outcome,
    })
}

/// One row of an ablation grid summary.
#[derive(Clone, Debug)]
pub struct GridRow {
    pub variant: String,
    pub seed: u64,
    pub test: MetricsReport,
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let k = rows.first().map_or(3, |r| r.test.per_class_acc.len());
    let mut out = MetricsReport::csv_header(k).replacen("epoch,split", "variant,seed,epoch", 1);
    out.push('\n');
    for r in rows {
        let metrics = r.test.csv_row();
        let (epoch, rest) = metrics.split_once(',').expect("row has fields");
        let (_, rest) = rest.split_once(',').expect("row has a split");
        out.push_str(&format!("{},{},{epoch},{rest}\n", r.variant, r.seed));
    }
    out
}

/// The six ablation variants of `base` for each seed, each in its own
/// subdirectory `<variant>/seed<S>` of `dir`, plus `grid.csv`.
pub fn run_ablation_grid(
    base: &TrainConfig,
    seeds: &[u64],
    dir: &Path,
    mut on_run: impl FnMut(&GridRow),
) -> Result<Vec<GridRow>> {
    create_dir(dir)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for ablation in Ablation::grid() {
            let variant = ablation.label();
            let config = TrainConfig {
                seed,
                ablation,
                ..base.clone()
            };
            let run_dir = dir.join(&variant).join(format!("seed{seed}"));
            let art = run_experiment(&config, &run_dir, None, |_, _| {})?;
            let row = GridRow {
                variant,
                seed,
                test: art.outcome.test,
            };
            on_run(&row);
            rows.push(row);
        }
    }
    let summary = dir.join("grid.csv");
    std::fs::write(&summary, grid_csv(&rows)).map_err(|e| Error::io(&summary, e))?;
    Ok(rows)
}
