//! The full detector: node network, anchor generation, refiner, losses and
//! decoding, driven from a collated [`BatchGraph`].

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::anchors::{assign, generate, AnchorConfig, AnchorLabel, AnchorSet};
use crate::error::{Error, Result};
use crate::events::{decode, DecodeConfig, EventRecord};
use crate::graphify::{BatchGraph, MetaVocab};
use crate::model::{GraphTensors, ModelConfig, NodeNetwork, NodeOutputs, ParamStore};
use crate::objective::{self, IouMode, LossInputs, LossWeights, Losses};
use crate::refiner::{IntervalPredictions, Refiner, RefinerConfig, RefinerInput};

pub fn default_classes() -> Vec<String> {
    ["wheeze", "rhonchi", "stridor", "crackle"].map(String::from).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Abnormal event classes in logit order.
    pub classes: Vec<String>,
    pub model: ModelConfig,
    pub refiner: RefinerConfig,
    pub anchors: AnchorConfig,
    pub loss: LossWeights,
    pub iou_mode: IouMode,
    pub decode: DecodeConfig,
    /// Metadata vocabulary; its width must equal `model.meta_dim`.
    pub meta_vocab: Option<MetaVocab>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            model: ModelConfig::default(),
            refiner: RefinerConfig::default(),
            anchors: AnchorConfig::default(),
            loss: LossWeights::default(),
            iou_mode: IouMode::Union,
            decode: DecodeConfig::default(),
            meta_vocab: None,
        }
    }
}

impl DetectorConfig {
    /// Enables metadata conditioning with `vocab`.
    pub fn with_meta(mut self, vocab: MetaVocab) -> Self {
        self.model.meta_dim = vocab.width();
        self.meta_vocab = Some(vocab);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.model.n_classes {
            return Err(Error::Config(format!(
                "{} class names for a {}-class model",
                self.classes.len(),
                self.model.n_classes
            )));
        }
        self.model.validate()?;
        let meta_width = self.meta_vocab.as_ref().map_or(0, MetaVocab::width);
        if meta_width != self.model.meta_dim {
            return Err(Error::Config(format!(
                "metadata vocabulary width {meta_width} but model.meta_dim = {}",
                self.model.meta_dim
            )));
        }
        self.anchors.validate()?;
        self.refiner.validate(self.anchors.num_scales())?;
        if self.loss.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Which optimizer a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Node,
    Interval,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("refiner.") {
        ParamGroup::Interval
    } else {
        ParamGroup::Node
    }
}

pub struct ForwardOutput {
    pub nodes: NodeOutputs,
    pub intervals: IntervalPredictions,
    pub anchors: Vec<AnchorSet>,
}

#[derive(Clone)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub store: ParamStore,
    pub nodes: NodeNetwork,
    pub refiner: Refiner,
}

impl Detector {
    pub fn new(cfg: &DetectorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, dtype, device.clone());
        let root = store.root();
        let nodes = NodeNetwork::new(&root, &cfg.model)?;
        let refiner = Refiner::new(&root, &cfg.refiner, &cfg.anchors, cfg.model.d_node, cfg.model.n_classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            nodes,
            refiner,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn graph_tensors(&self, batch: &BatchGraph) -> Result<GraphTensors> {
        let dev = self.device();
        let dims = batch.chunk_inputs.dim();
        let data: Vec<f32> = batch.chunk_inputs.iter().copied().collect();
        let x = Tensor::from_vec(data, dims, dev)?.to_dtype(self.dtype())?;
        let meta = if self.cfg.model.meta_dim > 0 {
            let (n, m) = batch.meta_onehot.dim();
            if m != self.cfg.model.meta_dim {
                return Err(Error::Shape(format!(
                    "metadata width {m}, model expects {}",
                    self.cfg.model.meta_dim
                )));
            }
            let v: Vec<f32> = batch.meta_onehot.iter().copied().collect();
            Some(Tensor::from_vec(v, (n, m), dev)?.to_dtype(self.dtype())?)
        } else {
            None
        };
        let node_time = Tensor::from_slice(&batch.node_time, batch.node_time.len(), dev)?.to_dtype(self.dtype())?;
        Ok(GraphTensors {
            x,
            meta,
            node_time,
            edges: batch.edge_index.clone(),
        })
    }

    pub fn anchors_for(&self, batch: &BatchGraph) -> Result<Vec<AnchorSet>> {
        batch.durations.iter().map(|&l| generate(l, &self.cfg.anchors)).collect()
    }

    pub fn forward(&self, batch: &BatchGraph, train: bool) -> Result<ForwardOutput> {
        let g = self.graph_tensors(batch)?;
        let nodes = self.nodes.forward(&g, train)?;
        let anchors = self.anchors_for(batch)?;
        let intervals = self.refiner.forward(&RefinerInput {
            encoded: &nodes.encoded,
            node_logits: &nodes.node_logits,
            node_time: &batch.node_time,
            offsets: &batch.offsets,
            durations: &batch.durations,
            anchors: &anchors,
        })?;
        Ok(ForwardOutput {
            nodes,
            intervals,
            anchors,
        })
    }

    /// Anchor labels for every interval row, clip-major.
    pub fn anchor_labels(&self, batch: &BatchGraph, anchors: &[AnchorSet]) -> Vec<AnchorLabel> {
        anchors
            .iter()
            .zip(&batch.truth)
            .flat_map(|(set, truth)| assign(set, truth, self.cfg.anchors.iou_threshold))
            .collect()
    }

    pub fn losses(&self, batch: &BatchGraph, out: &ForwardOutput) -> Result<Losses> {
        let labels = self.anchor_labels(batch, &out.anchors);
        let iv = &out.intervals;
        objective::compute(
            &LossInputs {
                node_logits: &out.nodes.node_logits,
                node_conf: &batch.node_conf,
                node_class: &batch.node_class,
                start: &iv.start,
                end: &iv.end,
                conf_logit: &iv.conf_logit,
                cls_logits: &iv.cls_logits,
                anchor_labels: &labels,
            },
            &self.cfg.loss,
            self.cfg.iou_mode,
        )
    }

    /// Decoded events per clip, in batch order.
    pub fn decode(&self, out: &ForwardOutput) -> Result<Vec<Vec<EventRecord>>> {
        (0..out.anchors.len())
            .map(|b| Ok(decode(&out.intervals.candidates(b)?, &self.cfg.classes, &self.cfg.decode)))
            .collect()
    }

    pub fn predict(&self, batch: &BatchGraph) -> Result<Vec<Vec<EventRecord>>> {
        self.decode(&self.forward(batch, false)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::EventRecord;
    use crate::features::SpectrogramStack;
    use crate::graphify::{build_clip_graph, collate, GraphInput};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> DetectorConfig {
        let mut cfg = DetectorConfig::default();
        cfg.model.conv_channels = vec![4, 4, 4];
        cfg.model.n_basis = 2;
        cfg.model.d_node = 8;
        cfg.model.bands = 64;
        cfg
    }

    fn batch(cfg: &DetectorConfig, frames: &[usize], seed: u64) -> BatchGraph {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let graphs: Vec<_> = frames
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let n = f * 128;
                let st = SpectrogramStack {
                    values: Array3::from_shape_fn((3, cfg.model.bands, f), |_| rng.random_range(-1.0..1.0)),
                    frame_times: (0..f).map(|j| j as f64 * 0.016).collect(),
                    source_duration_s: n as f64 / 8000.0,
                    n_samples: n,
                    hop_len: 128,
                };
                let ev = [EventRecord::new(0.2, 0.6, "crackle")];
                build_clip_graph(
                    GraphInput { id: &format!("c{i}"), stack: &st, events: &ev, meta: None },
                    &cfg.classes,
                    5,
                )
                .unwrap()
            })
            .collect();
        collate(&graphs).unwrap()
    }

    #[test]
    fn forward_loss_backward() {
        let cfg = small_cfg();
        let det = Detector::new(&cfg, 0, DType::F32, &Device::Cpu).unwrap();
        let b = batch(&cfg, &[50, 63], 1);
        let out = det.forward(&b, true).unwrap();
        assert_eq!(out.nodes.node_logits.dims(), &[b.n_nodes(), 5]);
        assert_eq!(out.intervals.len(), 140);
        let losses = det.losses(&b, &out).unwrap();
        let total = losses.total.to_scalar::<f32>().unwrap();
        assert!(total.is_finite() && total > 0.0);
        let grads = losses.total.backward().unwrap();
        for (name, var) in det.store.params() {
            assert!(grads.get(var.as_tensor()).is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn param_groups_partition() {
        let det = Detector::new(&small_cfg(), 0, DType::F32, &Device::Cpu).unwrap();
        let params = det.store.params();
        let node = params.iter().filter(|(n, _)| param_group(n) == ParamGroup::Node).count();
        let interval = params.iter().filter(|(n, _)| param_group(n) == ParamGroup::Interval).count();
        assert!(node > 0 && interval > 0);
        assert_eq!(node + interval, params.len());
    }
}
