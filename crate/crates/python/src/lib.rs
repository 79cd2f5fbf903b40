//! Python bindings: features, anchors, evaluation, schedules, and a small
//! train/predict surface over in-memory clips.

use candle_core::{DType, Device};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use respsed::anchors::{assign, generate, AnchorConfig, TruthEvent};
use respsed::config::RunConfig;
use respsed::detector::Detector;
use respsed::events::{evaluate, CollarConfig, EventRecord};
use respsed::features::{compute_stack, row_normalize, AudioClip};
use respsed::graphify::{collate, ClipGraph};
use respsed::trainer::{load_detector, GraphPipeline, Trainer};

fn err(e: respsed::Error) -> PyErr {
    match e {
        respsed::Error::Config(_) | respsed::Error::Domain(_) | respsed::Error::UnknownLabel(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

type PyEvent = (f64, f64, String);

fn records(events: Vec<PyEvent>) -> Vec<EventRecord> {
    events.into_iter().map(|(on, off, label)| EventRecord::new(on, off, label)).collect()
}

fn parse_config(toml_text: Option<&str>) -> PyResult<RunConfig> {
    let cfg: RunConfig = match toml_text {
        Some(t) => toml::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Row-normalized spectrogram stack as nested lists `[channel][band][frame]`.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, config=None))]
fn spectrogram(samples: Vec<f32>, sample_rate: u32, config: Option<&str>) -> PyResult<Vec<Vec<Vec<f32>>>> {
    let cfg = parse_config(config)?;
    let mut clip = AudioClip::new("clip", samples, sample_rate);
    if sample_rate != cfg.features.sample_rate {
        clip.samples = respsed::features::resample(&clip.samples, sample_rate, cfg.features.sample_rate).map_err(err)?;
        clip.sample_rate = cfg.features.sample_rate;
    }
    let stack = row_normalize(&compute_stack(&clip, &cfg.features).map_err(err)?);
    Ok(stack
        .values
        .outer_iter()
        .map(|ch| ch.outer_iter().map(|row| row.to_vec()).collect())
        .collect())
}

/// `(scale, start, end)` for every anchor of a clip of `duration` seconds.
#[pyfunction]
fn anchors(duration: f64) -> PyResult<Vec<(usize, f64, f64)>> {
    let set = generate(duration, &AnchorConfig::default()).map_err(err)?;
    Ok(set.anchors.iter().map(|a| (a.scale, a.start, a.end)).collect())
}

/// `(conf, cls, (target_start, target_end))` per anchor; `cls` is -1 for background.
#[pyfunction]
fn assign_anchors(duration: f64, truth: Vec<(f64, f64, usize)>) -> PyResult<Vec<(f64, i64, (f64, f64))>> {
    let cfg = AnchorConfig::default();
    let set = generate(duration, &cfg).map_err(err)?;
    let truth: Vec<TruthEvent> = truth.into_iter().map(|(start, end, class)| TruthEvent { start, end, class }).collect();
    Ok(assign(&set, &truth, cfg.iou_threshold).into_iter().map(|l| (l.conf, l.cls, l.target)).collect())
}

/// Collared event-based metrics. Inputs map clip id to `(onset, offset, label)` lists.
#[pyfunction]
fn evaluate_events(
    py: Python<'_>,
    reference: std::collections::BTreeMap<String, Vec<PyEvent>>,
    system: std::collections::BTreeMap<String, Vec<PyEvent>>,
) -> PyResult<Py<PyDict>> {
    let refs = reference.into_iter().map(|(k, v)| (k, records(v))).collect();
    let sys = system.into_iter().map(|(k, v)| (k, records(v))).collect();
    let classes = respsed::detector::default_classes();
    let report = evaluate(&refs, &sys, &classes, &CollarConfig::default());
    let out = PyDict::new(py);
    let m = &report.overall.metrics;
    out.set_item("f1", m.f1)?;
    out.set_item("precision", m.precision)?;
    out.set_item("recall", m.recall)?;
    out.set_item("error_rate", m.er)?;
    out.set_item("tp", report.overall.tp)?;
    out.set_item("fp", report.overall.fp)?;
    out.set_item("fn", report.overall.fn_)?;
    out.set_item("json", serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)?;
    Ok(out.unbind())
}

#[pyfunction]
#[pyo3(signature = (step, lr0=1e-3, base=0.99, every=126))]
fn node_lr(step: u64, lr0: f64, base: f64, every: u64) -> f64 {
    respsed::trainer::node_lr(step, lr0, base, every)
}

#[pyfunction]
#[pyo3(signature = (step, t_max, lr0=1e-3, lr_min=2e-4))]
fn interval_lr(step: u64, t_max: u64, lr0: f64, lr_min: f64) -> f64 {
    respsed::trainer::interval_lr(step, t_max, lr0, lr_min)
}

/// `(samples, sample_rate, events)` of one synthetic burst clip.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn synth_clip(seed: u64) -> PyResult<(Vec<f32>, u32, Vec<PyEvent>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = respsed::synth::synth_clip("synth", &respsed::synth::SynthConfig::default(), &mut rng).map_err(err)?;
    let ev = c.events.iter().map(|e| (e.onset_s, e.offset_s, e.label.clone())).collect();
    Ok((c.samples, c.sample_rate, ev))
}

fn pipeline(cfg: &RunConfig, det: &Detector) -> GraphPipeline {
    GraphPipeline {
        features: cfg.features.clone(),
        classes: det.cfg.classes.clone(),
        group: det.cfg.model.group,
        meta: det.cfg.meta_vocab.clone(),
    }
}

fn graph(pipe: &GraphPipeline, id: &str, samples: Vec<f32>, sample_rate: u32, events: Vec<PyEvent>) -> PyResult<ClipGraph> {
    let mut clip = AudioClip::new(id, samples, sample_rate).with_events(records(events));
    if sample_rate != pipe.features.sample_rate {
        clip.samples = respsed::features::resample(&clip.samples, sample_rate, pipe.features.sample_rate).map_err(err)?;
        clip.sample_rate = pipe.features.sample_rate;
    }
    pipe.build::<ChaCha8Rng>(&clip, None).map_err(err)
}

fn to_py_events(evs: &[EventRecord]) -> Vec<(f64, f64, String, f64)> {
    evs.iter().map(|e| (e.onset_s, e.offset_s, e.label.clone(), e.score.unwrap_or(f64::NAN))).collect()
}

/// A detector plus its two optimizers, trained on clips added from Python.
#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: Trainer,
    cfg: RunConfig,
    clips: Vec<ClipGraph>,
}

#[pymethods]
impl PyTrainer {
    /// `config` is a TOML document in the run-configuration layout.
    #[new]
    #[pyo3(signature = (config=None, seed=0, t_max=1000))]
    fn new(config: Option<&str>, seed: u64, t_max: u64) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        let det = Detector::new(&cfg.detector, seed, DType::F32, &Device::Cpu).map_err(err)?;
        let mut train = cfg.train.clone();
        train.seed = seed;
        let mut inner = Trainer::new(det, train, t_max).map_err(err)?;
        inner.features = Some(cfg.features.clone());
        Ok(Self { inner, cfg, clips: Vec::new() })
    }

    fn param_count(&self) -> usize {
        self.inner.det.store.param_count()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    /// Adds a training clip with `(onset, offset, label)` events.
    fn add_clip(&mut self, clip_id: &str, samples: Vec<f32>, sample_rate: u32, events: Vec<PyEvent>) -> PyResult<()> {
        let g = graph(&pipeline(&self.cfg, &self.inner.det), clip_id, samples, sample_rate, events)?;
        self.clips.push(g);
        Ok(())
    }

    /// One optimization step on all added clips; returns the loss terms.
    fn train_step(&mut self, py: Python<'_>) -> PyResult<Py<PyDict>> {
        if self.clips.is_empty() {
            return Err(PyValueError::new_err("add clips before training"));
        }
        let batch = collate(&self.clips).map_err(err)?;
        let r = self.inner.train_step(&batch).map_err(err)?;
        let d = PyDict::new(py);
        for (k, v) in ["node_conf", "node_cls", "interval_conf", "interval_cls", "interval_loc"]
            .iter()
            .zip(r.components())
        {
            d.set_item(*k, v)?;
        }
        d.set_item("total", r.total)?;
        Ok(d.unbind())
    }

    /// Overall F1 on the added clips.
    fn evaluate(&self) -> PyResult<f64> {
        let report = self.inner.evaluate(&self.clips, &self.cfg.collar).map_err(err)?;
        Ok(report.overall.metrics.f1)
    }

    /// Decoded `(onset, offset, label, score)` events for one clip.
    fn predict(&self, samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<(f64, f64, String, f64)>> {
        let g = graph(&pipeline(&self.cfg, &self.inner.det), "clip", samples, sample_rate, Vec::new())?;
        let evs = self.inner.det.predict(&collate(&[g]).map_err(err)?).map_err(err)?;
        Ok(to_py_events(&evs[0]))
    }

    /// Writes `<stem>.safetensors` and `<stem>.json`.
    fn save(&self, stem: &str) -> PyResult<()> {
        self.inner.checkpoint().save(std::path::Path::new(stem)).map_err(err)
    }
}

/// Inference-only detector restored from a checkpoint.
#[pyclass(name = "Detector")]
struct PyDetector {
    det: Detector,
    cfg: RunConfig,
}

#[pymethods]
impl PyDetector {
    #[staticmethod]
    fn load(stem: &str) -> PyResult<Self> {
        let (det, meta) = load_detector(std::path::Path::new(stem), DType::F32, &Device::Cpu).map_err(err)?;
        let cfg = RunConfig {
            features: meta.features.unwrap_or_default(),
            detector: meta.detector,
            train: meta.train,
            ..RunConfig::default()
        };
        Ok(Self { det, cfg })
    }

    fn param_count(&self) -> usize {
        self.det.store.param_count()
    }

    fn predict(&self, samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<(f64, f64, String, f64)>> {
        let g = graph(&pipeline(&self.cfg, &self.det), "clip", samples, sample_rate, Vec::new())?;
        let evs = self.det.predict(&collate(&[g]).map_err(err)?).map_err(err)?;
        Ok(to_py_events(&evs[0]))
    }
}

#[pymodule]
fn respsed_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(anchors, m)?)?;
    m.add_function(wrap_pyfunction!(assign_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_events, m)?)?;
    m.add_function(wrap_pyfunction!(node_lr, m)?)?;
    m.add_function(wrap_pyfunction!(interval_lr, m)?)?;
    m.add_function(wrap_pyfunction!(synth_clip, m)?)?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyDetector>()?;
    Ok(())
}
