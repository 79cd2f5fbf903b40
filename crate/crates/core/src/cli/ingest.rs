//! Dataset adapters that normalize annotation layouts into a [`Manifest`].
//!
//! * `sprsound`: `<stem>.wav` + `<stem>.json` holding `event_annotation`
//!   entries with millisecond `start`/`end` and a `type` label. File stems of
//!   the form `patient_age_gender_position_rec` supply metadata.
//! * `hf-lung`: `<stem>.wav` + `<stem>_label.txt` (or `<stem>.txt`) with
//!   lines `label hh:mm:ss.ffffff hh:mm:ss.ffffff`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestEvent, ManifestRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Sprsound,
    HfLung,
}

/// Source label (case-insensitive) to canonical class; `None` drops it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub canonical: Vec<String>,
    pub map: BTreeMap<String, Option<String>>,
}

impl Default for LabelMap {
    fn default() -> Self {
        let canonical = crate::detector::default_classes();
        let mut map = BTreeMap::new();
        for c in &canonical {
            map.insert(c.clone(), Some(c.clone()));
        }
        for s in ["fine crackle", "coarse crackle", "crackles", "d", "das"] {
            map.insert(s.into(), Some("crackle".into()));
        }
        map.insert("wheezes".into(), Some("wheeze".into()));
        // breath phases, generic continuous sounds and mixed labels carry no
        // single canonical class
        for s in ["normal", "i", "e", "c", "cas", "wheeze+crackle", "poor quality"] {
            map.insert(s.into(), None);
        }
        Self { canonical, map }
    }
}

pub enum Mapped {
    Class(String),
    Dropped,
    Unknown,
}

impl LabelMap {
    pub fn map(&self, source: &str) -> Mapped {
        match self.map.get(&source.trim().to_lowercase()) {
            Some(Some(c)) => Mapped::Class(c.clone()),
            Some(None) => Mapped::Dropped,
            None => Mapped::Unknown,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (src, dst) in &self.map {
            if let Some(d) = dst {
                if !self.canonical.contains(d) {
                    return Err(Error::Config(format!("label map sends `{src}` to unknown class `{d}`")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub clips: usize,
    pub events: usize,
    pub clipped: usize,
    pub dropped_zero_length: usize,
    pub dropped_by_map: usize,
}

/// Raw event before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    pub label: String,
}

/// Clips events to `[0, duration]`, maps labels, drops empty results.
/// Unknown labels are collected into `unknown`.
pub fn normalize_events(
    raw: &[RawEvent],
    duration_s: f64,
    labels: &LabelMap,
    report: &mut IngestReport,
    unknown: &mut BTreeSet<String>,
) -> Vec<ManifestEvent> {
    let mut out = Vec::new();
    for e in raw {
        let label = match labels.map(&e.label) {
            Mapped::Class(c) => c,
            Mapped::Dropped => {
                report.dropped_by_map += 1;
                continue;
            }
            Mapped::Unknown => {
                unknown.insert(e.label.clone());
                continue;
            }
        };
        let (on, off) = (e.onset_s.clamp(0.0, duration_s), e.offset_s.clamp(0.0, duration_s));
        if (on, off) != (e.onset_s, e.offset_s) {
            report.clipped += 1;
            log::warn!("event ({}, {}) clipped to ({on}, {off})", e.onset_s, e.offset_s);
        }
        if !(off > on) {
            report.dropped_zero_length += 1;
            continue;
        }
        out.push(ManifestEvent { onset_s: on, offset_s: off, label });
    }
    out.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    report.events += out.len();
    out
}

fn wav_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::path(dir, e))?;
    for entry in entries {
        let p = entry.map_err(|e| Error::path(dir, e))?.path();
        if p.is_dir() {
            wav_files(&p, out)?;
        } else if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    Ok(())
}

/// Split tag from the first directory below the dataset root, when it
/// names a split; otherwise `train`.
fn split_of(root: &Path, wav: &Path) -> String {
    let rel = wav.strip_prefix(root).unwrap_or(wav);
    let mut comps = rel.components();
    let first = comps.next().and_then(|c| c.as_os_str().to_str()).map(str::to_lowercase);
    match (first, comps.next()) {
        (Some(s), Some(_)) if ["train", "val", "valid", "validation", "test"].contains(&s.as_str()) => s,
        _ => "train".into(),
    }
}

fn parse_hms(s: &str) -> Option<f64> {
    let parts: Vec<&str> = s.split(':').collect();
    let mut t = 0.0;
    for p in &parts {
        t = t * 60.0 + p.parse::<f64>().ok()?;
    }
    (parts.len() <= 3).then_some(t)
}

fn parse_number(v: &serde_json::Value) -> Option<f64> {
    match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn sprsound_annotation(path: &Path) -> Result<Vec<RawEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let events = v
        .get("event_annotation")
        .and_then(|e| e.as_array())
        .ok_or_else(|| Error::Ingest(format!("{}: missing `event_annotation` array", path.display())))?;
    events
        .iter()
        .map(|e| {
            let num = |k: &str| e.get(k).and_then(parse_number);
            match (num("start"), num("end"), e.get("type").and_then(|t| t.as_str())) {
                (Some(s), Some(t), Some(label)) => Ok(RawEvent { onset_s: s / 1000.0, offset_s: t / 1000.0, label: label.into() }),
                _ => Err(Error::Ingest(format!("{}: malformed event {e}", path.display()))),
            }
        })
        .collect()
}

fn hf_lung_annotation(path: &Path) -> Result<Vec<RawEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let n = fields.len();
        let parsed = (n >= 3).then(|| (parse_hms(fields[n - 2]), parse_hms(fields[n - 1])));
        match parsed {
            Some((Some(on), Some(off))) => out.push(RawEvent { onset_s: on, offset_s: off, label: fields[..n - 2].join(" ") }),
            _ => return Err(Error::Ingest(format!("{}:{}: expected `label start end`", path.display(), i + 1))),
        }
    }
    Ok(out)
}

fn sprsound_meta(stem: &str) -> (Option<String>, Option<String>) {
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() >= 5 {
        (Some(parts[3].to_string()), Some(parts[2].to_string()))
    } else {
        (None, None)
    }
}

fn annotation_for(wav: &Path, format: Format) -> Option<PathBuf> {
    let stem = wav.file_stem()?.to_str()?;
    let candidates = match format {
        Format::Sprsound => vec![wav.with_extension("json")],
        Format::HfLung => vec![wav.with_file_name(format!("{stem}_label.txt")), wav.with_extension("txt")],
    };
    candidates.into_iter().find(|p| p.exists())
}

/// Scans `dir` for annotated clips. Audio paths in the manifest are made
/// relative to `manifest_dir` when possible.
pub fn ingest(dir: &Path, format: Format, labels: &LabelMap, manifest_dir: &Path) -> Result<(Manifest, IngestReport)> {
    labels.validate()?;
    let mut wavs = Vec::new();
    if dir.is_dir() {
        wav_files(dir, &mut wavs)?;
    }
    wavs.sort();
    let mut report = IngestReport::default();
    let mut unknown = BTreeSet::new();
    let mut records = Vec::new();
    for wav in wavs {
        let Some(ann) = annotation_for(&wav, format) else {
            log::warn!("{}: no annotation file, skipped", wav.display());
            continue;
        };
        let raw = match format {
            Format::Sprsound => sprsound_annotation(&ann)?,
            Format::HfLung => hf_lung_annotation(&ann)?,
        };
        let reader = hound::WavReader::open(&wav)?;
        let spec = reader.spec();
        let duration_s = reader.duration() as f64 / spec.sample_rate as f64;
        let events = normalize_events(&raw, duration_s, labels, &mut report, &mut unknown);
        let stem = wav.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let (position, gender) = match format {
            Format::Sprsound => sprsound_meta(&stem),
            Format::HfLung => (None, None),
        };
        let audio = pathdiff(&wav, manifest_dir);
        let id = audio.with_extension("").to_string_lossy().replace(['/', '\\'], "__");
        records.push(ManifestRecord {
            id,
            audio,
            sample_rate: spec.sample_rate,
            duration_s,
            events,
            position,
            gender,
            split: split_of(dir, &wav),
        });
    }
    if !unknown.is_empty() {
        return Err(Error::UnmappedLabels(unknown.into_iter().collect()));
    }
    if records.is_empty() {
        return Err(Error::Ingest("no clips found".into()));
    }
    if report.clipped + report.dropped_zero_length > 0 {
        log::warn!(
            "{} events clipped to the clip span, {} zero-length events dropped",
            report.clipped,
            report.dropped_zero_length
        );
    }
    report.clips = records.len();
    Ok((Manifest { records, root: manifest_dir.to_path_buf() }, report))
}

/// `path` relative to `base` when it lies beneath it, else absolute.
fn pathdiff(path: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    p.strip_prefix(&b).map(Path::to_path_buf).unwrap_or(p)
}
