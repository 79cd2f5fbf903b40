//! Training loop: two parameter groups with their own Adam optimizers and
//! schedules, checkpointing, and run-directory logging.

mod checkpoint;
mod data;
mod optim;

pub use checkpoint::{load_detector, Checkpoint, CheckpointMeta, RunDir};
pub use data::{batch_indices, AugmentConfig, AugmentedSource, EpochSource, GraphPipeline, StaticSource};
pub use optim::{clip_scale, grad_norm, interval_lr, node_lr, Adam};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{param_group, Detector, ParamGroup};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::events::{evaluate, CollarConfig, EvalReport, EventRecord};
use crate::graphify::{collate, BatchGraph, ClipGraph};
use crate::objective::LossReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_node: f64,
    pub node_decay: f64,
    /// Steps per decay period of the node schedule.
    pub node_decay_every: u64,
    pub lr_interval: f64,
    pub lr_interval_min: f64,
    /// Cosine period in steps; 0 means epochs x steps per epoch.
    pub t_max: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_node: 1e-3,
            node_decay: 0.99,
            node_decay_every: 126,
            lr_interval: 1e-3,
            lr_interval_min: 2e-4,
            t_max: 0,
            epochs: 400,
            batch_size: 16,
            seed: 0,
            grad_clip: 5.0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_node > 0.0 && self.lr_interval > 0.0 && self.lr_interval_min > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lr_interval_min > self.lr_interval {
            return Err(Error::Config("lr_interval_min exceeds lr_interval".into()));
        }
        if !(self.node_decay > 0.0 && self.node_decay <= 1.0) || self.node_decay_every == 0 {
            return Err(Error::Config("node decay needs base in (0, 1] and a positive period".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be > 0".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        self.augment.validate()
    }

    /// Cosine period for a dataset of `n_clips`.
    pub fn resolved_t_max(&self, n_clips: usize) -> u64 {
        if self.t_max > 0 {
            return self.t_max;
        }
        let per_epoch = n_clips.div_ceil(self.batch_size).max(1);
        (self.epochs * per_epoch).max(1) as u64
    }
}

pub struct Trainer {
    pub det: Detector,
    pub cfg: TrainConfig,
    pub node_opt: Adam,
    pub interval_opt: Adam,
    pub step: u64,
    pub t_max: u64,
    pub best_f1: Option<f64>,
    /// Recorded in checkpoints so inference can rebuild the same inputs.
    pub features: Option<FeatureConfig>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(det: Detector, cfg: TrainConfig, t_max: u64) -> Result<Self> {
        cfg.validate()?;
        if t_max == 0 {
            return Err(Error::Config("t_max must be >= 1".into()));
        }
        let (node, interval): (Vec<_>, Vec<_>) =
            det.store.params().into_iter().partition(|(n, _)| param_group(n) == ParamGroup::Node);
        Ok(Self {
            node_opt: Adam::new(node),
            interval_opt: Adam::new(interval),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            det,
            cfg,
            step: 0,
            t_max,
            best_f1: None,
            features: None,
        })
    }

    /// Current learning rates (node, interval).
    pub fn learning_rates(&self) -> (f64, f64) {
        let c = &self.cfg;
        (
            node_lr(self.step, c.lr_node, c.node_decay, c.node_decay_every),
            interval_lr(self.step.min(self.t_max), self.t_max, c.lr_interval, c.lr_interval_min),
        )
    }

    /// Forward, total loss, backward, clip, and one step of each optimizer.
    pub fn train_step(&mut self, batch: &BatchGraph) -> Result<LossReport> {
        let out = self.det.forward(batch, true)?;
        let losses = self.det.losses(batch, &out)?;
        let report = LossReport::from_losses(&losses)?;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                clips: batch.ids.clone(),
            });
        }
        let grads = losses.total.backward()?;
        let mut all = self.node_opt.params().to_vec();
        all.extend_from_slice(self.interval_opt.params());
        let scale = clip_scale(grad_norm(&grads, &all)?, self.cfg.grad_clip);
        let (lr_n, lr_i) = self.learning_rates();
        self.node_opt.step(&grads, lr_n, scale)?;
        self.interval_opt.step(&grads, lr_i, scale)?;
        self.step += 1;
        Ok(report)
    }

    /// One pass over `graphs` in shuffled clip-count batches.
    pub fn train_epoch(&mut self, graphs: &[ClipGraph]) -> Result<Vec<LossReport>> {
        let batches = batch_indices(graphs.len(), self.cfg.batch_size, &mut self.rng);
        let mut reports = Vec::with_capacity(batches.len());
        for idx in batches {
            let picked: Vec<ClipGraph> = idx.iter().map(|&i| graphs[i].clone()).collect();
            reports.push(self.train_step(&collate(&picked)?)?);
        }
        Ok(reports)
    }

    /// Decoded predictions per clip id.
    pub fn predict(&self, graphs: &[ClipGraph]) -> Result<BTreeMap<String, Vec<EventRecord>>> {
        predict_graphs(&self.det, graphs, self.cfg.batch_size)
    }

    pub fn evaluate(&self, graphs: &[ClipGraph], collar: &CollarConfig) -> Result<EvalReport> {
        let sys = self.predict(graphs)?;
        Ok(evaluate(&reference_events(graphs, &self.det.cfg.classes), &sys, &self.det.cfg.classes, collar))
    }

    /// Full loop with per-epoch validation. Logs to `run` when given and
    /// keeps the best checkpoint by overall F1.
    pub fn fit(
        &mut self,
        source: &mut dyn EpochSource,
        val: Option<&[ClipGraph]>,
        collar: &CollarConfig,
        run: Option<&RunDir>,
    ) -> Result<Vec<LossReport>> {
        let mut history = Vec::new();
        for epoch in 0..self.cfg.epochs {
            let graphs = source.epoch_graphs(epoch)?;
            let first = self.step;
            let reports = self.train_epoch(&graphs)?;
            if let Some(run) = run {
                for (i, r) in reports.iter().enumerate() {
                    run.append_loss(first + i as u64, r)?;
                }
            }
            let mean = reports.iter().map(|r| r.total).sum::<f64>() / reports.len().max(1) as f64;
            log::info!("epoch {epoch}: step {} mean loss {mean:.4}", self.step);
            history.extend(reports);
            let Some(val) = val else { continue };
            let report = self.evaluate(val, collar)?;
            let f1 = report.overall.metrics.f1;
            log::info!("epoch {epoch}: validation F1 {f1:.4}");
            let improved = f1.is_finite() && self.best_f1.is_none_or(|b| f1 > b);
            if improved {
                self.best_f1 = Some(f1);
            }
            if let Some(run) = run {
                run.write_eval(epoch, &report)?;
                if improved {
                    self.checkpoint().save(&run.checkpoint_path("best"))?;
                }
            }
        }
        if let Some(run) = run {
            self.checkpoint().save(&run.checkpoint_path("last"))?;
        }
        Ok(history)
    }

    pub fn checkpoint(&self) -> Checkpoint<'_> {
        Checkpoint { trainer: self }
    }
}

/// Ground-truth events of each graph, keyed by clip id.
pub fn reference_events(graphs: &[ClipGraph], classes: &[String]) -> BTreeMap<String, Vec<EventRecord>> {
    graphs
        .iter()
        .map(|g| {
            let evs = g
                .truth
                .iter()
                .map(|t| EventRecord::new(t.start, t.end, classes[t.class].clone()))
                .collect();
            (g.id.clone(), evs)
        })
        .collect()
}

/// Eval-mode predictions, `batch_size` clips at a time.
pub fn predict_graphs(
    det: &Detector,
    graphs: &[ClipGraph],
    batch_size: usize,
) -> Result<BTreeMap<String, Vec<EventRecord>>> {
    let mut out = BTreeMap::new();
    for chunk in graphs.chunks(batch_size.max(1)) {
        let batch = collate(chunk)?;
        for (id, evs) in batch.ids.iter().zip(det.predict(&batch)?) {
            out.insert(id.clone(), evs);
        }
    }
    Ok(out)
}
