//! The training loop: one step, one epoch, evaluation and a full run.

use crate::data::{self, batches, view_batch, Dataset, DatasetSplit, SpacingNorm, SplitPart, View};
use crate::error::{Error, Result};
use crate::model::{Architecture, ClassCenters, ForwardOutput, MemoryBank, Model, ViewMode};
use crate::numerics::{AdamW, Graph, ParamId, ParamStore, Tensor, Var};
use crate::train::config::{Selection, TrainConfig};
use crate::train::metrics::MetricsReport;

const MODEL_INIT_STREAM: u64 = 5;

/// Loss terms of one step. `total = ce + λ·cmcl`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub ce: f64,
    pub cmcl: f64,
}

/// Averages over one epoch of training steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub cmcl: f64,
    /// Mean entropy (nats) of the gate rows; `None` without the gate.
    pub gate_entropy: Option<f64>,
}

/// Per-sample features for export.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub index: usize,
    pub label: usize,
    pub z_long: Vec<f64>,
    pub z_trans: Vec<f64>,
    pub z_f: Vec<f64>,
}

struct StepGrads {
    params: Vec<(ParamId, Vec<f64>)>,
    z_long: Tensor,
    z_trans: Tensor,
}

/// Learnable and memory state that a checkpoint captures.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub bank: MemoryBank,
    /// Completed epochs.
    pub epoch: usize,
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub epochs: Vec<EpochLog>,
    /// One validation row per epoch, then the test row of the kept state.
    pub metrics: Vec<MetricsReport>,
    pub best_epoch: usize,
    pub test: MetricsReport,
    /// State after the final epoch, before the best one was restored.
    pub last: TrainState,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub dataset: Dataset,
    pub split: DatasetSplit,
    pub norm: SpacingNorm,
    pub model: Model,
    pub state: TrainState,
}

impl Trainer {
    /// Generates the dataset from the config and builds a fresh model.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dataset = data::generate(config.seed, &config.data)?;
        Self::with_dataset(config, dataset)
    }

    pub fn with_dataset(config: TrainConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let split = data::split(dataset.len(), config.split, config.seed)?;
        if split.train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let norm = SpacingNorm::fit(&dataset, &split.train);
        let arch = architecture(&config, &dataset);
        let mut store = ParamStore::new();
        let mut rng = data::rng_for(config.seed, MODEL_INIT_STREAM, 0);
        let model = Model::new(&mut store, &arch, &mut rng)?;
        let (z_long, z_trans) = encode_all(
            &model,
            &store,
            &dataset,
            &split.train,
            &norm,
            config.ablation.view,
            config.eval_batch_size,
        )?;
        let labels = split.train.iter().map(|&i| dataset.samples[i].label).collect();
        let bank = MemoryBank::new(
            split.train.clone(),
            labels,
            z_long,
            z_trans,
            dataset.num_classes,
            config.alpha,
            config.tau,
        )?;
        let optimizer = AdamW::new(config.lr, config.weight_decay);
        Ok(Trainer {
            config,
            dataset,
            split,
            norm,
            model,
            state: TrainState {
                store,
                optimizer,
                bank,
                epoch: 0,
            },
        })
    }

    /// Rebuilds a trainer around a saved state. The state must match the
    /// parameter layout implied by `config`.
    pub fn with_state(config: TrainConfig, dataset: Dataset, state: TrainState) -> Result<Self> {
        let mut t = Self::with_dataset(config, dataset)?;
        if state.store.len() != t.state.store.len() {
            return Err(Error::invalid(
                "restore",
                format!("{} parameters saved, model has {}", state.store.len(), t.state.store.len()),
            ));
        }
        for (id, p) in t.state.store.iter() {
            let saved = state.store.get(id);
            if saved.name != p.name || saved.value.shape() != p.value.shape() {
                return Err(Error::invalid(
                    "restore",
                    format!("parameter {} does not match saved {} {:?}", p.name, saved.name, saved.value.shape()),
                ));
            }
        }
        if state.bank.indices() != t.state.bank.indices() || state.bank.dim() != t.state.bank.dim() {
            return Err(Error::invalid("restore", "memory bank does not match the training split"));
        }
        t.state = state;
        Ok(t)
    }

    pub fn mode(&self) -> ViewMode {
        self.config.ablation.view
    }

    fn inputs(&self, g: &mut Graph<'_>, idx: &[usize]) -> Result<(Option<Var>, Option<Var>)> {
        inputs(g, &self.dataset, idx, &self.norm, self.mode())
    }

    /// Forward pass and loss terms on `batch` against the current bank.
    /// With `track` set, also returns parameter gradients and the batch
    /// embeddings needed for the memory update.
    fn forward_losses(&self, batch: &[usize], track: bool) -> Result<(StepLosses, Option<StepGrads>)> {
        let lambda = self.config.effective_lambda();
        let labels: Vec<usize> = batch.iter().map(|&i| self.dataset.samples[i].label).collect();
        let centers = self.state.bank.class_centers()?;
        let mut g = Graph::with_params(&self.state.store, track);
        let (xl, xt) = inputs(&mut g, &self.dataset, batch, &self.norm, self.mode())?;
        let (pl, pt) = self.model.encode(&mut g, xl, xt, self.mode())?;
        let (zl, zt) = (pl.z, pt.z);
        let cmcl = if self.config.ablation.no_cmcl {
            None
        } else {
            Some(self.state.bank.cmcl_loss(&mut g, &centers, zl, zt, &labels)?)
        };
        let out = self.model.head_forward(&mut g, pl, pt, Some(&centers))?;
        let ce = g.cross_entropy(out.logits, &labels)?;
        let total = match cmcl {
            Some(c) => {
                let weighted = g.scale(c, lambda)?;
                g.add(ce, weighted)?
            }
            None => ce,
        };
        let losses = StepLosses {
            total: g.value(total).item(),
            ce: g.value(ce).item(),
            cmcl: cmcl.map_or(0.0, |c| g.value(c).item()),
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                ce: losses.ce,
                cmcl: losses.cmcl,
                indices: batch.to_vec(),
            });
        }
        if !track {
            return Ok((losses, None));
        }
        g.backward(total)?;
        let grads = StepGrads {
            params: g.param_grads(),
            z_long: g.value(zl).clone(),
            z_trans: g.value(zt).clone(),
        };
        Ok((losses, Some(grads)))
    }

    /// Loss terms on `batch` without touching the state.
    pub fn batch_losses(&self, batch: &[usize]) -> Result<StepLosses> {
        Ok(self.forward_losses(batch, false)?.0)
    }

    /// One optimisation step on `batch` (dataset indices from the train split).
    ///
    /// The contrastive loss uses the bank as it was before the step; the
    /// batch's memory rows are refreshed afterwards.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<StepLosses> {
        let slots = batch
            .iter()
            .map(|&i| {
                self.state.bank.slot(i).ok_or(Error::IndexOutOfRange {
                    index: i,
                    len: self.state.bank.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (losses, grads) = self.forward_losses(batch, true)?;
        let grads = grads.expect("tracked pass returns gradients");
        self.state.store.accumulate(grads.params);
        self.state.optimizer.step(&mut self.state.store);
        for (r, &slot) in slots.iter().enumerate() {
            self.state.bank.ema_update(slot, grads.z_long.row(r), grads.z_trans.row(r))?;
        }
        Ok(losses)
    }

    /// One pass over the shuffled training split.
    pub fn train_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.state.epoch;
        let order = batches(&self.split.train, self.config.batch_size, self.config.seed, epoch as u64)?;
        let mut sums = (0.0, 0.0, 0.0);
        for batch in &order {
            let l = self.train_step(batch)?;
            sums.0 += l.total;
            sums.1 += l.ce;
            sums.2 += l.cmcl;
        }
        self.state.epoch += 1;
        let n = order.len() as f64;
        let gate_entropy = if self.model.arch.use_moe {
            Some(self.gate_entropy(SplitPart::Train)?)
        } else {
            None
        };
        Ok(EpochLog {
            epoch: self.state.epoch,
            total: sums.0 / n,
            ce: sums.1 / n,
            cmcl: sums.2 / n,
            gate_entropy,
        })
    }

    /// Runs `f` on the forward output for every evaluation batch of `indices`.
    fn for_each_batch<F>(&self, indices: &[usize], centers: &ClassCenters, mut f: F) -> Result<()>
    where
        F: FnMut(&[usize], &Graph<'_>, &ForwardOutput) -> Result<()>,
    {
        for chunk in indices.chunks(self.config.eval_batch_size) {
            let mut g = Graph::with_params(&self.state.store, false);
            let (xl, xt) = self.inputs(&mut g, chunk)?;
            let out = self.model.forward(&mut g, xl, xt, self.mode(), Some(centers))?;
            f(chunk, &g, &out)?;
        }
        Ok(())
    }

    pub fn predict(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let centers = self.state.bank.class_centers()?;
        let mut preds = Vec::with_capacity(indices.len());
        self.for_each_batch(indices, &centers, |_, g, out| {
            let logits = g.value(out.logits);
            for r in 0..logits.shape()[0] {
                preds.push(argmax(logits.row(r)));
            }
            Ok(())
        })?;
        Ok(preds)
    }

    /// Scores on a split with frozen weights and memory.
    pub fn evaluate(&self, part: SplitPart) -> Result<MetricsReport> {
        let idx = self.split.part(part);
        if idx.is_empty() {
            return Err(Error::invalid("evaluate", format!("split {} is empty", part.name())));
        }
        let preds = self.predict(idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| self.dataset.samples[i].label).collect();
        MetricsReport::from_predictions(self.state.epoch, part.name(), self.dataset.num_classes, &labels, &preds)
    }

    fn gate_entropy(&self, part: SplitPart) -> Result<f64> {
        let centers = self.state.bank.class_centers()?;
        let (mut total, mut rows) = (0.0, 0usize);
        self.for_each_batch(self.split.part(part), &centers, |_, g, out| {
            if let Some(w) = out.gate {
                let w = g.value(w);
                for r in 0..w.shape()[0] {
                    total -= w.row(r).iter().map(|p| if *p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>();
                    rows += 1;
                }
            }
            Ok(())
        })?;
        Ok(total / rows.max(1) as f64)
    }

    /// Representation and fused features for `indices`.
    pub fn embeddings(&self, indices: &[usize]) -> Result<Vec<EmbeddingRow>> {
        let centers = self.state.bank.class_centers()?;
        let mut rows = Vec::with_capacity(indices.len());
        self.for_each_batch(indices, &centers, |chunk, g, out| {
            let (zl, zt, zf) = (g.value(out.long.z), g.value(out.trans.z), g.value(out.fused.z_f));
            for (r, &i) in chunk.iter().enumerate() {
                rows.push(EmbeddingRow {
                    index: i,
                    label: self.dataset.samples[i].label,
                    z_long: zl.row(r).to_vec(),
                    z_trans: zt.row(r).to_vec(),
                    z_f: zf.row(r).to_vec(),
                });
            }
            Ok(())
        })?;
        Ok(rows)
    }

    /// Mean cosine between each training feature and the mean feature of its
    /// class, averaged over both views.
    pub fn center_alignment(&self) -> Result<f64> {
        let rows = self.embeddings(&self.split.train)?;
        let k = self.dataset.num_classes;
        let view_score = |pick: &dyn Fn(&EmbeddingRow) -> &[f64]| {
            let d = pick(&rows[0]).len();
            let mut sums = vec![vec![0.0; d]; k];
            for r in &rows {
                sums[r.label].iter_mut().zip(pick(r)).for_each(|(s, v)| *s += v);
            }
            rows.iter().map(|r| cosine(pick(r), &sums[r.label])).sum::<f64>() / rows.len() as f64
        };
        Ok(0.5 * (view_score(&|r| &r.z_long) + view_score(&|r| &r.z_trans)))
    }

    /// Full schedule with per-epoch validation. The state with the best
    /// selection score is restored before scoring the test split.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochLog, &MetricsReport)) -> Result<RunOutcome> {
        let mut epochs = Vec::with_capacity(self.config.epochs);
        let mut metrics = Vec::with_capacity(self.config.epochs + 1);
        let mut best: Option<(f64, TrainState)> = None;
        while self.state.epoch < self.config.epochs {
            let log = self.train_epoch()?;
            let val = self.evaluate(SplitPart::Val)?;
            on_epoch(&log, &val);
            let score = match self.config.selection {
                Selection::ValMF1 => val.m_f1,
                Selection::ValAcc => val.acc,
                Selection::Last => log.epoch as f64,
            };
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, self.state.clone()));
            }
            epochs.push(log);
            metrics.push(val);
        }
        let last = match best {
            Some((_, state)) => std::mem::replace(&mut self.state, state),
            None => self.state.clone(),
        };
        let test = self.evaluate(SplitPart::Test)?;
        metrics.push(test.clone());
        Ok(RunOutcome {
            epochs,
            metrics,
            best_epoch: self.state.epoch,
            test,
            last,
        })
    }
}

/// Parameter layout implied by a config and the data's image geometry.
pub fn architecture(config: &TrainConfig, dataset: &Dataset) -> Architecture {
    let (c, h, _) = dataset.image_dims();
    Architecture {
        model: config.model.clone(),
        in_channels: c + 1,
        image_size: h,
        num_classes: dataset.num_classes,
        use_dsam: !config.ablation.no_dsam,
        use_moe: !config.ablation.no_moe,
    }
}

fn inputs(
    g: &mut Graph<'_>,
    ds: &Dataset,
    idx: &[usize],
    norm: &SpacingNorm,
    mode: ViewMode,
) -> Result<(Option<Var>, Option<Var>)> {
    let mut load = |view| -> Result<Var> { Ok(g.constant(view_batch(ds, idx, view, norm)?)) };
    Ok(match mode {
        ViewMode::Both => (Some(load(View::Long)?), Some(load(View::Trans)?)),
        ViewMode::Long => (Some(load(View::Long)?), None),
        ViewMode::Trans => (None, Some(load(View::Trans)?)),
    })
}

/// Representation features of `indices` in order, as `[N, d]` per view.
pub fn encode_all(
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    indices: &[usize],
    norm: &SpacingNorm,
    mode: ViewMode,
    batch_size: usize,
) -> Result<(Tensor, Tensor)> {
    let d = model.arch.model.proj_dim;
    let (mut long, mut trans) = (Vec::with_capacity(indices.len() * d), Vec::with_capacity(indices.len() * d));
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut g = Graph::with_params(store, false);
        let (xl, xt) = inputs(&mut g, ds, chunk, norm, mode)?;
        let (pl, pt) = model.encode(&mut g, xl, xt, mode)?;
        long.extend_from_slice(g.value(pl.z).data());
        trans.extend_from_slice(g.value(pt.z).data());
    }
    Ok((Tensor::new(vec![indices.len(), d], long)?, Tensor::new(vec![indices.len(), d], trans)?))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
