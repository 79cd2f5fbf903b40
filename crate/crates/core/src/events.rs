//! Event records, prediction decoding and collared event-based evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::iou;
use crate::error::{Error, Result};

/// A reference or detected event on a clip timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub onset_s: f64,
    pub offset_s: f64,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl EventRecord {
    pub fn new(onset_s: f64, offset_s: f64, label: impl Into<String>) -> Self {
        Self {
            onset_s,
            offset_s,
            label: label.into(),
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn duration(&self) -> f64 {
        self.offset_s - self.onset_s
    }

    pub fn validate(&self, vocab: Option<&[String]>) -> Result<()> {
        if !(self.onset_s.is_finite() && self.offset_s.is_finite()) || self.onset_s >= self.offset_s
        {
            return Err(Error::Domain(format!(
                "event ({}, {}) must satisfy onset < offset",
                self.onset_s, self.offset_s
            )));
        }
        if let Some(vocab) = vocab {
            if !vocab.iter().any(|v| v == &self.label) {
                return Err(Error::UnknownLabel(self.label.clone()));
            }
        }
        Ok(())
    }
}

/// One line of a reference or system event file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLine {
    pub clip_id: String,
    #[serde(flatten)]
    pub event: EventRecord,
}

pub fn read_event_file(path: &Path) -> Result<Vec<EventLine>> {
    let file = std::fs::File::open(path).map_err(|e| Error::path(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_event_file(path: &Path, lines: &[EventLine]) -> Result<()> {
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::path(path, e))?);
    for line in lines {
        serde_json::to_writer(&mut file, line)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Groups event lines by clip id, keeping file order within each clip.
pub fn group_by_clip(lines: &[EventLine]) -> BTreeMap<String, Vec<EventRecord>> {
    let mut map: BTreeMap<String, Vec<EventRecord>> = BTreeMap::new();
    for line in lines {
        map.entry(line.clip_id.clone())
            .or_default()
            .push(line.event.clone());
    }
    map
}

// ---------------------------------------------------------------------------
// Decoding

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.5,
            nms_iou: 0.4,
        }
    }
}

/// A refined anchor interval as produced by the refiner, in host memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub start: f64,
    pub end: f64,
    pub conf_logit: f64,
    pub cls_logits: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Turns one clip's refined anchors into events: threshold on sigmoid
/// confidence, drop zero-width intervals, label by argmax, then greedy
/// per-class NMS keeping the higher-confidence interval.
pub fn decode(candidates: &[Candidate], vocab: &[String], cfg: &DecodeConfig) -> Vec<EventRecord> {
    let mut kept: Vec<(usize, EventRecord)> = candidates
        .iter()
        .filter_map(|c| {
            let score = sigmoid(c.conf_logit);
            if score < cfg.conf_threshold || c.end - c.start <= 0.0 {
                return None;
            }
            let cls = argmax(&c.cls_logits);
            let label = vocab.get(cls)?.clone();
            Some((cls, EventRecord::new(c.start, c.end, label).with_score(score)))
        })
        .collect();
    // Stable sort: equal scores keep candidate order.
    kept.sort_by(|a, b| {
        b.1.score
            .unwrap_or(0.0)
            .partial_cmp(&a.1.score.unwrap_or(0.0))
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut out: Vec<(usize, EventRecord)> = Vec::new();
    for (cls, ev) in kept {
        let suppressed = out.iter().any(|(c, k)| {
            *c == cls && iou((k.onset_s, k.offset_s), (ev.onset_s, ev.offset_s)) >= cfg.nms_iou
        });
        if !suppressed {
            out.push((cls, ev));
        }
    }
    let mut events: Vec<EventRecord> = out.into_iter().map(|(_, e)| e).collect();
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    events
}

// ---------------------------------------------------------------------------
// Matching and metrics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollarConfig {
    pub onset_s: f64,
    pub offset_min_s: f64,
    pub offset_fraction: f64,
    pub matching: Matching,
}

/// How references are paired with system events inside one clip and class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// References in onset order each take one compatible system event.
    #[default]
    Greedy,
    /// Maximum one-to-one matching.
    Optimal,
}

impl Default for CollarConfig {
    fn default() -> Self {
        Self {
            onset_s: 0.2,
            offset_min_s: 0.2,
            offset_fraction: 0.1,
            matching: Matching::Greedy,
        }
    }
}

// Absorbs representation error in decimal endpoints such as 1.15 - 1.0.
const COLLAR_SLACK: f64 = 1e-9;

/// Onset within a fixed collar and offset within max(collar, fraction of the
/// reference length). Class agreement is the caller's job.
pub fn collar_match(reference: &EventRecord, system: &EventRecord, collar: &CollarConfig) -> bool {
    let offset_collar = collar
        .offset_min_s
        .max(collar.offset_fraction * reference.duration());
    (system.onset_s - reference.onset_s).abs() <= collar.onset_s + COLLAR_SLACK
        && (system.offset_s - reference.offset_s).abs() <= offset_collar + COLLAR_SLACK
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

/// One-to-one matching for a single clip and class.
///
/// Greedy: references in onset order each take, among the unmatched system
/// events satisfying the collar, the one fewest later references could still
/// use (earliest onset on ties). Not always maximal on crowded clips; use
/// [`Matching::Optimal`] when that matters.
pub fn match_events(
    refs: &[EventRecord],
    syss: &[EventRecord],
    collar: &CollarConfig,
) -> Counts {
    let mut ref_order: Vec<usize> = (0..refs.len()).collect();
    ref_order.sort_by(|&a, &b| refs[a].onset_s.total_cmp(&refs[b].onset_s));
    let mut sys_order: Vec<usize> = (0..syss.len()).collect();
    sys_order.sort_by(|&a, &b| syss[a].onset_s.total_cmp(&syss[b].onset_s));
    // compatibility in sorted order: ok[i][j] for the i-th ref and j-th sys
    let ok: Vec<Vec<bool>> = ref_order
        .iter()
        .map(|&r| sys_order.iter().map(|&s| collar_match(&refs[r], &syss[s], collar)).collect())
        .collect();
    let tp = match collar.matching {
        Matching::Greedy => greedy_matches(&ok, syss.len()),
        Matching::Optimal => maximum_matches(&ok, syss.len()),
    };
    Counts {
        tp,
        fp: syss.len() - tp,
        fn_: refs.len() - tp,
    }
}

fn greedy_matches(ok: &[Vec<bool>], n_sys: usize) -> usize {
    let mut used = vec![false; n_sys];
    let mut tp = 0;
    for (i, row) in ok.iter().enumerate() {
        let demand = |j: usize| ok[i + 1..].iter().filter(|later| later[j]).count();
        if let Some(j) = (0..n_sys).filter(|&j| !used[j] && row[j]).min_by_key(|&j| (demand(j), j)) {
            used[j] = true;
            tp += 1;
        }
    }
    tp
}

fn maximum_matches(ok: &[Vec<bool>], n_sys: usize) -> usize {
    fn augment(i: usize, ok: &[Vec<bool>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for j in 0..seen.len() {
            if ok[i][j] && !seen[j] {
                seen[j] = true;
                if owner[j].is_none_or(|o| augment(o, ok, seen, owner)) {
                    owner[j] = Some(i);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; n_sys];
    (0..ok.len())
        .filter(|&i| augment(i, ok, &mut vec![false; n_sys], &mut owner))
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// NaN (serialized as null) when there are no references but insertions.
    pub er: f64,
    pub s: usize,
    pub d: usize,
    pub i: usize,
    pub del: f64,
    pub ins: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn metrics(tp: usize, fp: usize, fn_: usize, n: usize) -> Metrics {
    let s = fn_.min(fp);
    let d = fn_.saturating_sub(fp);
    let i = fp.saturating_sub(fn_);
    let er = if n == 0 {
        if s + d + i == 0 {
            0.0
        } else {
            f64::NAN
        }
    } else {
        (s + d + i) as f64 / n as f64
    };
    let (nf, tpf) = (n as f64, tp as f64);
    Metrics {
        f1: ratio(2.0 * tpf, 2.0 * tpf + fp as f64 + fn_ as f64),
        precision: ratio(tpf, tpf + fp as f64),
        recall: ratio(tpf, tpf + fn_ as f64),
        er,
        s,
        d,
        i,
        del: ratio(d as f64, nf),
        ins: ratio(i as f64, nf),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub nref: usize,
    pub nsys: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

impl ClassReport {
    fn from_counts(label: &str, c: Counts) -> Self {
        let nref = c.tp + c.fn_;
        Self {
            label: label.to_string(),
            nref,
            nsys: c.tp + c.fp,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            metrics: metrics(c.tp, c.fp, c.fn_, nref),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Micro-averaged over classes.
    pub overall: ClassReport,
}

/// Class-wise evaluation over clips. Clips present in only one side count
/// entirely as misses or insertions. Labels outside `vocab` are reported in
/// extra rows after the vocabulary classes.
pub fn evaluate(
    refs: &BTreeMap<String, Vec<EventRecord>>,
    syss: &BTreeMap<String, Vec<EventRecord>>,
    vocab: &[String],
    collar: &CollarConfig,
) -> EvalReport {
    let mut labels: Vec<String> = vocab.to_vec();
    for ev in refs.values().chain(syss.values()).flatten() {
        if !labels.contains(&ev.label) {
            labels.push(ev.label.clone());
        }
    }
    let mut per_class: Vec<Counts> = vec![Counts::default(); labels.len()];
    let empty = Vec::new();
    let clip_ids: std::collections::BTreeSet<&String> = refs.keys().chain(syss.keys()).collect();
    for clip in clip_ids {
        let r = refs.get(clip).unwrap_or(&empty);
        let s = syss.get(clip).unwrap_or(&empty);
        for (ci, label) in labels.iter().enumerate() {
            let rc: Vec<EventRecord> = r.iter().filter(|e| &e.label == label).cloned().collect();
            let sc: Vec<EventRecord> = s.iter().filter(|e| &e.label == label).cloned().collect();
            per_class[ci] += match_events(&rc, &sc, collar);
        }
    }
    let mut overall = Counts::default();
    for c in &per_class {
        overall += *c;
    }
    EvalReport {
        classes: labels
            .iter()
            .zip(&per_class)
            .map(|(l, c)| ClassReport::from_counts(l, *c))
            .collect(),
        overall: ClassReport::from_counts("overall", overall),
    }
}

impl EvalReport {
    /// Human-readable table with the usual event-based columns.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>6} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}",
            "label", "Nref", "Nsys", "F(%)", "Pre(%)", "Rec(%)", "ER", "Del", "Ins"
        );
        for row in self.classes.iter().chain(std::iter::once(&self.overall)) {
            let m = &row.metrics;
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>6} {:>7.1} {:>7.1} {:>7.1} {:>6.2} {:>6.2} {:>6.2}",
                row.label,
                row.nref,
                row.nsys,
                100.0 * m.f1,
                100.0 * m.precision,
                100.0 * m.recall,
                m.er,
                m.del,
                m.ins
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ev(on: f64, off: f64) -> EventRecord {
        EventRecord::new(on, off, "wheeze")
    }

    #[test]
    fn collar_offset_uses_ten_percent_for_long_events() {
        let c = CollarConfig::default();
        assert!(collar_match(&ev(1.0, 4.0), &ev(1.15, 4.25), &c));
        assert!(!collar_match(&ev(1.0, 2.0), &ev(1.25, 2.0), &c));
        assert!(collar_match(&ev(1.0, 2.0), &ev(1.0, 2.0), &c));
    }

    #[test]
    fn matching_is_one_to_one() {
        let c = CollarConfig::default();
        let refs = vec![ev(1.0, 2.0), ev(1.1, 2.1)];
        let syss = vec![ev(1.05, 2.05)];
        assert_eq!(match_events(&refs, &syss, &c), Counts { tp: 1, fp: 0, fn_: 1 });
        assert_eq!(match_events(&refs[..1], &[], &c), Counts { tp: 0, fp: 0, fn_: 1 });
        assert_eq!(match_events(&refs, &refs, &c), Counts { tp: 2, fp: 0, fn_: 0 });
    }

    #[test]
    fn greedy_leaves_shared_events_for_later_references() {
        // the earliest-onset candidate of the first reference is the only one
        // the second reference can use
        let refs = vec![ev(0.0, 1.0), ev(0.3, 0.8)];
        let syss = vec![ev(0.15, 1.0), ev(0.2, 1.15)];
        assert_eq!(match_events(&refs, &syss, &CollarConfig::default()).tp, 2);
    }

    #[test]
    fn crowded_clip_greedy_falls_one_short_of_optimal() {
        let refs = vec![ev(0.0, 1.0), ev(0.0, 1.2), ev(0.1, 0.8)];
        let syss = vec![ev(0.0, 0.8), ev(0.0, 1.2), ev(0.1, 1.2)];
        let greedy = CollarConfig::default();
        let optimal = CollarConfig { matching: Matching::Optimal, ..greedy };
        assert_eq!(match_events(&refs, &syss, &greedy).tp, 2);
        assert_eq!(match_events(&refs, &syss, &optimal), Counts { tp: 3, fp: 0, fn_: 0 });
    }

    #[test]
    fn metric_worked_cases() {
        let m = metrics(1, 1, 1, 2);
        assert_relative_eq!(m.f1, 0.5);
        assert_eq!((m.s, m.d, m.i), (1, 0, 0));
        assert_relative_eq!(m.er, 0.5);

        let m = metrics(3, 0, 0, 3);
        assert_relative_eq!(m.f1, 1.0);
        assert_relative_eq!(m.er, 0.0);

        let m = metrics(3, 2, 0, 3);
        assert_relative_eq!(m.f1, 0.75);
        assert_eq!((m.s, m.d, m.i), (0, 0, 2));
        assert_relative_eq!(m.er, 2.0 / 3.0);

        let m = metrics(0, 0, 0, 0);
        assert_eq!((m.f1, m.er), (0.0, 0.0));
        assert!(metrics(0, 2, 0, 0).er.is_nan());
    }

    #[test]
    fn decode_applies_threshold_and_per_class_nms() {
        let vocab: Vec<String> = ["wheeze", "crackle"].iter().map(|s| s.to_string()).collect();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let cfg = DecodeConfig::default();
        let c = |s, e, p, cls: usize| Candidate {
            start: s,
            end: e,
            conf_logit: logit(p),
            cls_logits: if cls == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] },
        };
        assert!(decode(&[c(1.0, 2.0, 0.3, 0)], &vocab, &cfg).is_empty());

        let out = decode(&[c(1.0, 2.0, 0.8, 0), c(1.0, 2.0, 0.9, 0)], &vocab, &cfg);
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out[0].score.unwrap(), 0.9, epsilon = 1e-12);

        let out = decode(&[c(1.0, 2.0, 0.8, 0), c(1.0, 2.0, 0.9, 1)], &vocab, &cfg);
        assert_eq!(out.len(), 2);

        // zero width is dropped
        assert!(decode(&[c(1.0, 1.0, 0.9, 0)], &vocab, &cfg).is_empty());
    }

    #[test]
    fn evaluate_counts_missing_clips() {
        let vocab = vec!["wheeze".to_string()];
        let mut refs = BTreeMap::new();
        refs.insert("a".to_string(), vec![ev(1.0, 2.0)]);
        refs.insert("b".to_string(), vec![ev(1.0, 2.0)]);
        let mut syss = BTreeMap::new();
        syss.insert("a".to_string(), vec![ev(1.0, 2.0)]);
        let r = evaluate(&refs, &syss, &vocab, &CollarConfig::default());
        assert_eq!((r.overall.tp, r.overall.fn_, r.overall.fp), (1, 1, 0));
        assert!(r.to_table().contains("overall"));
    }

    #[test]
    fn event_line_json_shape() {
        let line = EventLine {
            clip_id: "c1".into(),
            event: ev(0.5, 1.25).with_score(0.75),
        };
        let s = serde_json::to_string(&line).unwrap();
        assert_eq!(
            s,
            r#"{"clip_id":"c1","onset_s":0.5,"offset_s":1.25,"label":"wheeze","score":0.75}"#
        );
        let back: EventLine = serde_json::from_str(&s).unwrap();
        assert_eq!(back, line);
    }
}
