//! Command-line front end: dataset ingestion, training, prediction,
//! evaluation and plotting.

pub mod ingest;
pub mod manifest;
pub mod plots;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{resolve, ConfigLayers, RunConfig};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::events::{evaluate, group_by_clip, read_event_file, write_event_file, EvalReport, EventLine};
use crate::features::{config_hash, write_wav, FeatureConfig};
use crate::graphify::{read_graph, write_graph, ClipGraph};
use crate::synth::{synth_clip, SynthConfig};
use crate::trainer::{
    load_detector, predict_graphs, AugmentedSource, Checkpoint, EpochSource, GraphPipeline, RunDir, StaticSource,
    Trainer,
};
use ingest::{ingest, Format, LabelMap};
use manifest::{Manifest, ManifestEvent, ManifestRecord};

#[derive(Debug, Parser)]
#[command(name = "respsed", version, about = "Respiratory sound event detection")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct CommonArgs {
    /// TOML configuration layered over defaults and the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Architecture preset, e.g. `integrated-c-1.0`.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Condition on recording position/gender.
    #[arg(long, global = true)]
    pub use_meta: bool,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest a dataset into a manifest and cache clip graphs.
    Prepare {
        /// Dataset directory to ingest; omit to only cache an existing manifest.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sprsound")]
        format: Format,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train on the manifest's `train` split, validating on `val`/`valid`/`test`.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Resume from this checkpoint stem.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a system event file against a reference.
    Evaluate {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "sys")]
        system: PathBuf,
    },
    /// Write predicted events for a manifest split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to one split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Duration histograms per class and loss curves.
    Inspect {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Run directory containing `losses.csv`.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Generate a synthetic burst dataset with a manifest.
    Synth {
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value = "train")]
        split: String,
    },
}

impl CommonArgs {
    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = toml::Table::new();
        if let Some(seed) = self.seed {
            let mut train = toml::Table::new();
            train.insert("seed".into(), toml::Value::Integer(seed as i64));
            overrides.insert("train".into(), toml::Value::Table(train));
        }
        if self.use_meta {
            overrides.insert("use_meta".into(), toml::Value::Boolean(true));
        }
        resolve(&ConfigLayers {
            preset: self.preset.as_deref(),
            file: self.config.as_deref(),
            env: std::env::vars().collect(),
            overrides: Some(overrides),
        })
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    dispatch(cli)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let out = common.out_dir();
    match cli.command {
        Command::Prepare { data_dir, format, manifest } => prepare(common, &out, data_dir.as_deref(), format, manifest),
        Command::Train { manifest, checkpoint } => train(common, &out, &manifest, checkpoint.as_deref()),
        Command::Evaluate { reference, system } => {
            let cfg = common.resolve()?;
            let report = evaluate_files(&reference, &system, &cfg.detector.classes, &cfg)?;
            println!("{}", report.to_table());
            println!("overall F1 = {}", report.overall.metrics.f1);
            if common.out_dir.is_some() {
                write_json(&out.join("eval.json"), &report)?;
            }
            Ok(())
        }
        Command::Predict { checkpoint, manifest, split } => predict(common, &out, &checkpoint, &manifest, split),
        Command::Inspect { manifest, run } => inspect(common, &out, manifest.as_deref(), run.as_deref()),
        Command::Synth { n, split } => synth(common, &out, n, &split),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::path(p, e))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::path(path, e))
}

pub fn evaluate_files(reference: &Path, system: &Path, classes: &[String], cfg: &RunConfig) -> Result<EvalReport> {
    let refs = group_by_clip(&read_event_file(reference)?);
    let sys = group_by_clip(&read_event_file(system)?);
    Ok(evaluate(&refs, &sys, classes, &cfg.collar))
}

fn pipeline(features: &FeatureConfig, det: &crate::detector::DetectorConfig) -> GraphPipeline {
    GraphPipeline {
        features: features.clone(),
        classes: det.classes.clone(),
        group: det.model.group,
        meta: det.meta_vocab.clone(),
    }
}

fn cache_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default().join("cache")
}

fn graph_hash(p: &GraphPipeline) -> u64 {
    config_hash(&(&p.features, &p.classes, p.group, &p.meta))
}

/// Clip graphs for `records`, read from `cache` when fresh and written
/// there otherwise.
fn load_graphs(m: &Manifest, records: &[&ManifestRecord], p: &GraphPipeline, cache: Option<&Path>) -> Result<Vec<ClipGraph>> {
    let hash = graph_hash(p);
    records
        .iter()
        .map(|r| {
            let path = cache.map(|c| c.join(format!("{}.rspg", r.id)));
            if let Some(path) = path.as_ref().filter(|p| p.exists()) {
                match read_graph(path, hash) {
                    Ok(g) => return Ok(g),
                    Err(Error::StaleCache(_)) => log::info!("{}: stale cache, rebuilding", r.id),
                    Err(e) => return Err(e),
                }
            }
            let g = p.build::<ChaCha8Rng>(&m.load_clip(r, p.features.sample_rate)?, None)?;
            if let Some(path) = path {
                write_graph(&path, &g, hash)?;
            }
            Ok(g)
        })
        .collect()
}

fn with_meta(mut cfg: RunConfig, m: &Manifest) -> RunConfig {
    if cfg.use_meta && cfg.detector.meta_vocab.is_none() {
        cfg.detector = cfg.detector.with_meta(m.meta_vocab());
    }
    cfg
}

fn prepare(common: &CommonArgs, out: &Path, data_dir: Option<&Path>, format: Format, manifest: Option<PathBuf>) -> Result<()> {
    let cfg = common.resolve()?;
    create_dir(out)?;
    let (m, mpath) = match (data_dir, manifest) {
        (Some(dir), _) => {
            let (m, report) = ingest(dir, format, &LabelMap::default(), out)?;
            let mpath = out.join("manifest.jsonl");
            m.write(&mpath)?;
            write_json(&out.join("ingest_report.json"), &report)?;
            println!("{} clips, {} events -> {}", report.clips, report.events, mpath.display());
            (m, mpath)
        }
        (None, Some(p)) => (Manifest::load(&p, &cfg.detector.classes)?, p),
        (None, None) => return Err(Error::Config("prepare needs --data-dir or --manifest".into())),
    };
    m.validate(&cfg.detector.classes, true)?;
    let cfg = with_meta(cfg, &m);
    let all: Vec<&ManifestRecord> = m.records.iter().collect();
    write_event_file(&out.join("reference.jsonl"), &Manifest::reference_lines(&all))?;
    let cache = cache_dir(&mpath);
    create_dir(&cache)?;
    let graphs = load_graphs(&m, &all, &pipeline(&cfg.features, &cfg.detector), Some(&cache))?;
    println!("cached {} clip graphs in {}", graphs.len(), cache.display());
    Ok(())
}

fn train(common: &CommonArgs, out: &Path, mpath: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = common.resolve()?;
    let m = Manifest::load(mpath, &cfg.detector.classes)?;
    let cfg = with_meta(cfg, &m);
    let train_recs = m.split("train");
    if train_recs.is_empty() {
        return Err(Error::Ingest("manifest has no `train` split".into()));
    }
    let val_recs = ["val", "valid", "validation", "test"]
        .iter()
        .map(|s| m.split(s))
        .find(|v| !v.is_empty())
        .unwrap_or_default();
    let pipe = pipeline(&cfg.features, &cfg.detector);
    let cache = cache_dir(mpath);
    create_dir(&cache)?;
    let val = load_graphs(&m, &val_recs, &pipe, Some(&cache))?;
    let mut source: Box<dyn EpochSource> = if cfg.train.augment.enabled {
        let clips = train_recs
            .iter()
            .map(|r| m.load_clip(r, cfg.features.sample_rate))
            .collect::<Result<Vec<_>>>()?;
        Box::new(AugmentedSource::new(clips, pipe.clone(), cfg.train.augment.clone(), cfg.train.seed ^ 0x5eed)?)
    } else {
        Box::new(StaticSource(load_graphs(&m, &train_recs, &pipe, Some(&cache))?))
    };
    let det = Detector::new(&cfg.detector, cfg.train.seed, DType::F32, &Device::Cpu)?;
    log::info!("{} parameters", det.store.param_count());
    let t_max = cfg.train.resolved_t_max(train_recs.len());
    let mut trainer = Trainer::new(det, cfg.train.clone(), t_max)?;
    trainer.features = Some(cfg.features.clone());
    if let Some(stem) = resume {
        Checkpoint::restore(&mut trainer, stem)?;
    }
    let run = RunDir::create(out, &cfg)?;
    let val = (!val.is_empty()).then_some(val.as_slice());
    let hist = trainer.fit(source.as_mut(), val, &cfg.collar, Some(&run))?;
    println!(
        "trained {} steps; final loss {:.4}; best validation F1 {}",
        trainer.step,
        hist.last().map_or(f64::NAN, |r| r.total),
        trainer.best_f1.map_or("n/a".into(), |f| format!("{f:.4}"))
    );
    Ok(())
}

fn predict(common: &CommonArgs, out: &Path, stem: &Path, mpath: &Path, split: Option<String>) -> Result<()> {
    let (det, meta) = load_detector(stem, DType::F32, &Device::Cpu)?;
    let features = match meta.features {
        Some(f) => f,
        None => common.resolve()?.features,
    };
    let m = Manifest::load(mpath, &det.cfg.classes)?;
    let recs: Vec<&ManifestRecord> = match &split {
        Some(s) => m.split(s),
        None => m.records.iter().collect(),
    };
    if recs.is_empty() {
        return Err(Error::Ingest("no clips selected".into()));
    }
    let graphs = load_graphs(&m, &recs, &pipeline(&features, &det.cfg), None)?;
    let sys = predict_graphs(&det, &graphs, meta.train.batch_size)?;
    create_dir(out)?;
    let lines: Vec<EventLine> = sys
        .iter()
        .flat_map(|(id, evs)| evs.iter().map(|e| EventLine { clip_id: id.clone(), event: e.clone() }))
        .collect();
    write_event_file(&out.join("predictions.jsonl"), &lines)?;
    write_event_file(&out.join("reference.jsonl"), &Manifest::reference_lines(&recs))?;
    let refs = recs.iter().map(|r| (r.id.clone(), r.event_records())).collect();
    let collar = common.resolve().map(|c| c.collar).unwrap_or_default();
    let report = evaluate(&refs, &sys, &det.cfg.classes, &collar);
    write_json(&out.join("eval.json"), &report)?;
    println!("{} events over {} clips -> {}", lines.len(), recs.len(), out.join("predictions.jsonl").display());
    println!("overall F1 = {}", report.overall.metrics.f1);
    Ok(())
}

fn inspect(common: &CommonArgs, out: &Path, mpath: Option<&Path>, run: Option<&Path>) -> Result<()> {
    if mpath.is_none() && run.is_none() {
        return Err(Error::Config("inspect needs --manifest and/or --run".into()));
    }
    create_dir(out)?;
    if let Some(mpath) = mpath {
        let classes = common.resolve()?.detector.classes;
        let m = Manifest::read(mpath)?;
        for class in &classes {
            let durations: Vec<f64> = m
                .records
                .iter()
                .flat_map(|r| &r.events)
                .filter(|e| &e.label == class)
                .map(|e| e.offset_s - e.onset_s)
                .collect();
            let p = out.join(format!("durations_{class}.svg"));
            plots::write_histogram(&p, class, &durations)?;
            println!("{class}: {:?} -> {}", plots::duration_histogram(&durations), p.display());
        }
    }
    if let Some(run) = run {
        let rows = plots::read_loss_csv(&run.join("losses.csv"))?;
        let p = out.join("losses.svg");
        plots::write_loss_curves(&p, &rows)?;
        println!("{} steps -> {}", rows.len(), p.display());
    }
    Ok(())
}

fn synth(common: &CommonArgs, out: &Path, n: usize, split: &str) -> Result<()> {
    let cfg = SynthConfig::default();
    let seed = common.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let audio = out.join("audio");
    create_dir(&audio)?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("synth{i:03}");
        let clip = synth_clip(&id, &cfg, &mut rng)?;
        let rel = PathBuf::from("audio").join(format!("{id}.wav"));
        write_wav(&out.join(&rel), &clip.samples, clip.sample_rate)?;
        records.push(ManifestRecord {
            id,
            audio: rel,
            sample_rate: clip.sample_rate,
            duration_s: clip.duration_s(),
            events: clip
                .events
                .iter()
                .map(|e| ManifestEvent { onset_s: e.onset_s, offset_s: e.offset_s, label: e.label.clone() })
                .collect(),
            position: None,
            gender: None,
            split: split.to_string(),
        });
    }
    let m = Manifest { records, root: out.to_path_buf() };
    let p = out.join("manifest.jsonl");
    m.write(&p)?;
    println!("{n} synthetic clips -> {}", p.display());
    Ok(())
}
