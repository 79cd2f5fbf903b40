use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig, Trainer};
use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::events::EvalReport;
use crate::features::{config_hash, FeatureConfig};
use crate::objective::LossReport;

/// JSON sidecar stored next to the tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    /// Hash of the detector configuration the tensors belong to.
    pub config_hash: u64,
    pub best_f1: Option<f64>,
    pub node_t: u64,
    pub interval_t: u64,
    pub t_max: u64,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    /// Front end the model was trained on, when known.
    #[serde(default)]
    pub features: Option<FeatureConfig>,
}

fn tensor_path(stem: &Path) -> PathBuf {
    stem.with_extension("safetensors")
}

fn meta_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

const MOMENT_PREFIXES: [(&str, &str); 2] = [("adam.node", "node"), ("adam.interval", "interval")];

pub struct Checkpoint<'a> {
    pub trainer: &'a Trainer,
}

impl Checkpoint<'_> {
    /// Writes `<stem>.safetensors` (parameters, buffers, Adam moments) and
    /// `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let t = self.trainer;
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        }
        let mut tensors: BTreeMap<String, Tensor> = t.det.store.state();
        for ((prefix, _), opt) in MOMENT_PREFIXES.iter().zip([&t.node_opt, &t.interval_opt]) {
            for (name, (m, v)) in &opt.moments {
                tensors.insert(format!("{prefix}.m:{name}"), m.clone());
                tensors.insert(format!("{prefix}.v:{name}"), v.clone());
            }
        }
        let map: HashMap<String, Tensor> = tensors.into_iter().collect();
        candle_core::safetensors::save(&map, tensor_path(stem))?;
        let meta = CheckpointMeta {
            step: t.step,
            config_hash: config_hash(&t.det.cfg),
            best_f1: t.best_f1,
            node_t: t.node_opt.t,
            interval_t: t.interval_opt.t,
            t_max: t.t_max,
            detector: t.det.cfg.clone(),
            train: t.cfg.clone(),
            features: t.features.clone(),
        };
        let p = meta_path(stem);
        fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::path(&p, e))
    }

    /// Restores model and optimizer state into `trainer`; the checkpoint must
    /// come from the same detector configuration.
    pub fn restore(trainer: &mut Trainer, stem: &Path) -> Result<CheckpointMeta> {
        let (meta, mut tensors) = read(stem, trainer.det.device())?;
        let expected = config_hash(&trainer.det.cfg);
        if meta.config_hash != expected {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different model configuration",
                stem.display()
            )));
        }
        let moments = split_moments(&mut tensors);
        trainer.det.store.load_state(&tensors)?;
        for ((_, group), opt) in MOMENT_PREFIXES.iter().zip([&mut trainer.node_opt, &mut trainer.interval_opt]) {
            opt.moments = moments.get(*group).cloned().unwrap_or_default();
            check_moments(opt)?;
        }
        trainer.node_opt.t = meta.node_t;
        trainer.interval_opt.t = meta.interval_t;
        trainer.step = meta.step;
        trainer.best_f1 = meta.best_f1;
        Ok(meta)
    }
}

fn read(stem: &Path, device: &Device) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let mp = meta_path(stem);
    let text = fs::read_to_string(&mp).map_err(|e| Error::path(&mp, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let tp = tensor_path(stem);
    if !tp.exists() {
        return Err(Error::Container {
            path: tp,
            reason: "missing tensor file".into(),
        });
    }
    let tensors = candle_core::safetensors::load(&tp, device)?.into_iter().collect();
    Ok((meta, tensors))
}

/// Removes Adam moments from `tensors`, grouped as node / interval.
fn split_moments(tensors: &mut BTreeMap<String, Tensor>) -> HashMap<String, BTreeMap<String, (Tensor, Tensor)>> {
    let mut out: HashMap<String, BTreeMap<String, (Tensor, Tensor)>> = HashMap::new();
    for (prefix, group) in MOMENT_PREFIXES {
        let m_prefix = format!("{prefix}.m:");
        let names: Vec<String> = tensors.keys().filter_map(|k| k.strip_prefix(&m_prefix)).map(String::from).collect();
        for name in names {
            let m = tensors.remove(&format!("{m_prefix}{name}"));
            let v = tensors.remove(&format!("{prefix}.v:{name}"));
            if let (Some(m), Some(v)) = (m, v) {
                out.entry(group.to_string()).or_default().insert(name, (m, v));
            }
        }
    }
    out
}

fn check_moments(opt: &Adam) -> Result<()> {
    for (name, (m, _)) in &opt.moments {
        let var = opt
            .params()
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Shape(format!("optimizer state for unknown parameter `{name}`")))?;
        if m.dims() != var.1.dims() {
            return Err(Error::Shape(format!("optimizer state shape mismatch for `{name}`")));
        }
    }
    Ok(())
}

/// Builds a detector from a checkpoint, ignoring optimizer state.
pub fn load_detector(stem: &Path, dtype: DType, device: &Device) -> Result<(Detector, CheckpointMeta)> {
    let (meta, mut tensors) = read(stem, device)?;
    split_moments(&mut tensors);
    let det = Detector::new(&meta.detector, 0, dtype, device)?;
    det.store.load_state(&tensors)?;
    Ok((det, meta))
}

/// Output directory of one training run:
///
/// ```text
/// config.toml        resolved configuration
/// losses.csv         one row per step
/// eval/epoch_NNNN.json
/// checkpoints/{last,best}.{safetensors,json}
/// ```
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create<C: Serialize>(root: &Path, config: &C) -> Result<Self> {
        for sub in ["eval", "checkpoints"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::path(&d, e))?;
        }
        let cfg = root.join("config.toml");
        let text = toml::to_string(config).map_err(|e| Error::Toml(e.to_string()))?;
        fs::write(&cfg, text).map_err(|e| Error::path(&cfg, e))?;
        let losses = root.join("losses.csv");
        fs::write(&losses, format!("{}\n", LossReport::CSV_HEADER)).map_err(|e| Error::path(&losses, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn losses_path(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn append_loss(&self, step: u64, report: &LossReport) -> Result<()> {
        let p = self.losses_path();
        let mut f = OpenOptions::new().append(true).open(&p).map_err(|e| Error::path(&p, e))?;
        writeln!(f, "{}", report.csv_row(step)).map_err(|e| Error::path(&p, e))
    }

    pub fn write_eval(&self, epoch: usize, report: &EvalReport) -> Result<()> {
        let p = self.root.join("eval").join(format!("epoch_{epoch:04}.json"));
        fs::write(&p, serde_json::to_string_pretty(report)?).map_err(|e| Error::path(&p, e))
    }
}
