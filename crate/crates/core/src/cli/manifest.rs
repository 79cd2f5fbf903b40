//! JSON-lines clip manifest: one clip per line.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventLine, EventRecord};
use crate::features::{read_wav, resample, AudioClip, ClipMeta};
use crate::graphify::MetaVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Absolute, or relative to the manifest's directory.
    pub audio: PathBuf,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub events: Vec<ManifestEvent>,
    pub position: Option<String>,
    pub gender: Option<String>,
    pub split: String,
}

impl ManifestRecord {
    pub fn event_records(&self) -> Vec<EventRecord> {
        self.events.iter().map(|e| EventRecord::new(e.onset_s, e.offset_s, e.label.clone())).collect()
    }

    pub fn meta(&self) -> ClipMeta {
        ClipMeta {
            position: self.position.clone(),
            gender: self.gender.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative audio paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::path(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::path(path, e))
    }

    /// Parses without touching the filesystem beyond `path`.
    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::path(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::path(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Ingest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { records, root })
    }

    /// Reads and checks: unique ids, disjoint splits, labels in `vocab`,
    /// audio files present.
    pub fn load(path: &Path, vocab: &[String]) -> Result<Self> {
        let m = Self::read(path)?;
        m.validate(vocab, true)?;
        Ok(m)
    }

    pub fn validate(&self, vocab: &[String], check_paths: bool) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut audio_split: BTreeMap<&Path, &str> = BTreeMap::new();
        for r in &self.records {
            if !ids.insert(&r.id) {
                return Err(Error::Ingest(format!("duplicate clip id `{}`", r.id)));
            }
            if let Some(other) = audio_split.insert(&r.audio, &r.split) {
                if other != r.split {
                    return Err(Error::Ingest(format!(
                        "{} appears in splits `{other}` and `{}`",
                        r.audio.display(),
                        r.split
                    )));
                }
            }
            for e in r.event_records() {
                e.validate(Some(vocab))?;
            }
            if check_paths && !self.audio_path(r).exists() {
                return Err(Error::Ingest(format!("audio file {} not found", self.audio_path(r).display())));
            }
        }
        Ok(())
    }

    pub fn audio_path(&self, r: &ManifestRecord) -> PathBuf {
        if r.audio.is_absolute() {
            r.audio.clone()
        } else {
            self.root.join(&r.audio)
        }
    }

    pub fn split(&self, name: &str) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == name).collect()
    }

    /// Position and gender tokens seen in the manifest, sorted.
    pub fn meta_vocab(&self) -> MetaVocab {
        let collect = |f: fn(&ManifestRecord) -> &Option<String>| {
            self.records
                .iter()
                .filter_map(|r| f(r).clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        };
        MetaVocab {
            positions: collect(|r| &r.position),
            genders: collect(|r| &r.gender),
        }
    }

    /// Loads a clip's audio, resampled to `sample_rate`.
    pub fn load_clip(&self, r: &ManifestRecord, sample_rate: u32) -> Result<AudioClip> {
        let (samples, sr) = read_wav(&self.audio_path(r))?;
        let samples = if sr == sample_rate { samples } else { resample(&samples, sr, sample_rate)? };
        let mut clip = AudioClip::new(r.id.clone(), samples, sample_rate).with_events(r.event_records());
        clip.meta = r.meta();
        Ok(clip)
    }

    /// Reference event lines for `records`.
    pub fn reference_lines(records: &[&ManifestRecord]) -> Vec<EventLine> {
        records
            .iter()
            .flat_map(|r| {
                r.event_records().into_iter().map(|event| EventLine {
                    clip_id: r.id.clone(),
                    event,
                })
            })
            .collect()
    }
}
