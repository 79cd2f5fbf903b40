//! Spectrogram → chain graph: fixed-width frame groups become nodes, adjacent
//! groups are joined by directed edges, and clips are collated into one
//! disconnected batch graph.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, s, Array2, Array4, Axis};

use crate::anchors::TruthEvent;
use crate::error::{Error, Result};
use crate::events::EventRecord;
use crate::features::{ClipMeta, SpectrogramStack};

/// Frames per node.
pub const DEFAULT_GROUP: usize = 5;

/// Per-frame class: 0 is normal, `k >= 1` is vocabulary entry `k - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLabels(pub Vec<usize>);

/// Labels frames by the event containing their center time. Intervals are
/// closed; where events overlap the later onset wins.
pub fn frame_labels_from_events(
    events: &[EventRecord],
    frame_times: &[f64],
    vocab: &[String],
) -> Result<FrameLabels> {
    let mut indexed = events
        .iter()
        .map(|e| {
            let k = vocab
                .iter()
                .position(|v| *v == e.label)
                .ok_or_else(|| Error::UnknownLabel(e.label.clone()))?;
            Ok((e.onset_s, e.offset_s, k + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    // stable: equal onsets keep file order, the later entry still wins
    indexed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let labels = frame_times
        .iter()
        .map(|&t| {
            indexed
                .iter()
                .rev()
                .find(|(on, off, _)| *on <= t && t <= *off)
                .map_or(0, |&(_, _, k)| k)
        })
        .collect();
    Ok(FrameLabels(labels))
}

/// Abnormal fraction and majority abnormal class of one group of frame labels.
/// Class ties go to the class whose first frame appears earliest.
pub fn node_label(frames: &[usize]) -> (f32, i64) {
    let abnormal = frames.iter().filter(|&&f| f > 0).count();
    if abnormal == 0 {
        return (0.0, -1);
    }
    let mut best: Option<(usize, usize)> = None; // (class, count)
    for &f in frames.iter().filter(|&&f| f > 0) {
        let count = frames.iter().filter(|&&g| g == f).count();
        if best.map_or(true, |(_, c)| count > c) {
            best = Some((f, count));
        }
    }
    let class = best.expect("non-empty").0 as i64 - 1;
    (abnormal as f32 / frames.len() as f32, class)
}

/// Splits frame labels into groups of `w`, padding the tail with the last label.
pub fn node_labels(frames: &FrameLabels, w: usize) -> (Vec<f32>, Vec<i64>) {
    let padded = pad_tail(&frames.0, w);
    padded.chunks(w).map(node_label).unzip()
}

fn pad_tail(v: &[usize], w: usize) -> Vec<usize> {
    let n = v.len().div_ceil(w) * w;
    let mut out = v.to_vec();
    out.resize(n, *v.last().unwrap_or(&0));
    out
}

pub fn edge_labels(node_class: &[i64]) -> Vec<u8> {
    node_class
        .windows(2)
        .map(|p| u8::from(p[0] >= 0 || p[1] >= 0))
        .collect()
}

pub fn chain_edges(n_nodes: usize) -> Vec<(usize, usize)> {
    (1..n_nodes).map(|j| (j - 1, j)).collect()
}

/// Groups frames into nodes. Returns inputs shaped (nodes, channels, w, bands)
/// and normalized node center times.
pub fn chunk(stack: &SpectrogramStack, w: usize) -> Result<(Array4<f32>, Vec<f64>)> {
    let (c, bands, frames) = stack.values.dim();
    if frames == 0 || w == 0 {
        return Err(Error::Shape("chunking needs at least one frame and w >= 1".into()));
    }
    let n_nodes = frames.div_ceil(w);
    let mut out = Array4::<f32>::zeros((n_nodes, c, w, bands));
    for n in 0..n_nodes {
        for j in 0..w {
            let f = (n * w + j).min(frames - 1);
            out.slice_mut(s![n, .., j, ..])
                .assign(&stack.values.slice(s![.., .., f]));
        }
    }
    let samples = stack.n_samples.max(1) as f64;
    let times = (1..=n_nodes)
        .map(|n| (((n as f64 - 0.5) * (w * stack.hop_len) as f64) / samples).clamp(0.0, 1.0))
        .collect();
    Ok((out, times))
}

/// Vocabularies for the optional recording-metadata encoding.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MetaVocab {
    pub positions: Vec<String>,
    pub genders: Vec<String>,
}

impl MetaVocab {
    pub fn width(&self) -> usize {
        self.positions.len() + self.genders.len()
    }

    /// `[position one-hot | gender one-hot]`; unknown or missing tokens give zeros.
    pub fn encode(&self, meta: &ClipMeta) -> Vec<f32> {
        let mut v = vec![0.0; self.width()];
        let hot = |vocab: &[String], tok: &Option<String>| tok.as_ref().and_then(|t| vocab.iter().position(|x| x == t));
        if let Some(i) = hot(&self.positions, &meta.position) {
            v[i] = 1.0;
        }
        if let Some(i) = hot(&self.genders, &meta.gender) {
            v[self.positions.len() + i] = 1.0;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipGraph {
    pub id: String,
    pub duration_s: f64,
    /// (nodes, channels, w, bands).
    pub chunk_inputs: Array4<f32>,
    pub node_conf: Vec<f32>,
    /// -1 for all-normal nodes.
    pub node_class: Vec<i64>,
    pub edge_index: Vec<(usize, usize)>,
    pub edge_label: Vec<u8>,
    pub node_time: Vec<f64>,
    /// (nodes, meta width); width 0 when metadata is unused.
    pub meta_onehot: Array2<f32>,
    pub truth: Vec<TruthEvent>,
}

impl ClipGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_conf.len()
    }
}

pub struct GraphInput<'a> {
    pub id: &'a str,
    pub stack: &'a SpectrogramStack,
    pub events: &'a [EventRecord],
    pub meta: Option<(&'a MetaVocab, &'a ClipMeta)>,
}

pub fn build_clip_graph(input: GraphInput<'_>, vocab: &[String], w: usize) -> Result<ClipGraph> {
    let stack = input.stack;
    let frames = frame_labels_from_events(input.events, &stack.frame_times, vocab)?;
    let (chunk_inputs, node_time) = chunk(stack, w)?;
    let (node_conf, node_class) = node_labels(&frames, w);
    let n = node_conf.len();
    let meta_row = input.meta.map(|(mv, m)| mv.encode(m)).unwrap_or_default();
    let meta_onehot = Array2::from_shape_fn((n, meta_row.len()), |(_, j)| meta_row[j]);
    let truth = input
        .events
        .iter()
        .map(|e| TruthEvent {
            start: e.onset_s,
            end: e.offset_s,
            class: vocab.iter().position(|v| *v == e.label).expect("validated above"),
        })
        .collect();
    Ok(ClipGraph {
        id: input.id.to_string(),
        duration_s: stack.source_duration_s,
        chunk_inputs,
        edge_label: edge_labels(&node_class),
        edge_index: chain_edges(n),
        node_conf,
        node_class,
        node_time,
        meta_onehot,
        truth,
    })
}

/// Disjoint union of clip graphs with node indices offset per clip.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGraph {
    pub chunk_inputs: Array4<f32>,
    pub node_conf: Vec<f32>,
    pub node_class: Vec<i64>,
    pub edge_index: Vec<(usize, usize)>,
    pub edge_label: Vec<u8>,
    pub node_time: Vec<f64>,
    pub meta_onehot: Array2<f32>,
    /// Clip index of each node, 0-based.
    pub batch: Vec<usize>,
    /// First node of each clip, plus a final entry equal to the node count.
    pub offsets: Vec<usize>,
    pub durations: Vec<f64>,
    pub ids: Vec<String>,
    pub truth: Vec<Vec<TruthEvent>>,
}

impl BatchGraph {
    pub fn n_clips(&self) -> usize {
        self.durations.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.node_conf.len()
    }

    pub fn nodes_of(&self, clip: usize) -> std::ops::Range<usize> {
        self.offsets[clip]..self.offsets[clip + 1]
    }
}

pub fn collate(graphs: &[ClipGraph]) -> Result<BatchGraph> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::Shape("cannot collate an empty batch".into()))?;
    let geom = first.chunk_inputs.dim();
    let meta_w = first.meta_onehot.ncols();
    for g in graphs {
        let d = g.chunk_inputs.dim();
        if (d.1, d.2, d.3) != (geom.1, geom.2, geom.3) || g.meta_onehot.ncols() != meta_w {
            return Err(Error::Shape(format!("clip {} has mismatched node geometry", g.id)));
        }
    }
    let mut offsets = vec![0];
    let mut b = BatchGraph {
        chunk_inputs: concatenate(Axis(0), &graphs.iter().map(|g| g.chunk_inputs.view()).collect::<Vec<_>>())
            .map_err(|e| Error::Shape(e.to_string()))?,
        meta_onehot: concatenate(Axis(0), &graphs.iter().map(|g| g.meta_onehot.view()).collect::<Vec<_>>())
            .map_err(|e| Error::Shape(e.to_string()))?,
        node_conf: Vec::new(),
        node_class: Vec::new(),
        edge_index: Vec::new(),
        edge_label: Vec::new(),
        node_time: Vec::new(),
        batch: Vec::new(),
        offsets: Vec::new(),
        durations: Vec::new(),
        ids: Vec::new(),
        truth: Vec::new(),
    };
    for (i, g) in graphs.iter().enumerate() {
        let off = *offsets.last().expect("non-empty");
        b.node_conf.extend_from_slice(&g.node_conf);
        b.node_class.extend_from_slice(&g.node_class);
        b.node_time.extend_from_slice(&g.node_time);
        b.edge_index.extend(g.edge_index.iter().map(|&(u, v)| (u + off, v + off)));
        b.edge_label.extend_from_slice(&g.edge_label);
        b.batch.extend(std::iter::repeat_n(i, g.n_nodes()));
        b.durations.push(g.duration_s);
        b.ids.push(g.id.clone());
        b.truth.push(g.truth.clone());
        offsets.push(off + g.n_nodes());
    }
    b.offsets = offsets;
    Ok(b)
}

const GRAPH_MAGIC: &[u8; 4] = b"RSPG";
const GRAPH_VERSION: u32 = 1;

/// Writes a clip graph container: header, f32 inputs and confidences,
/// i32 classes and edge labels, f64 times, then truth events.
pub fn write_graph(path: &Path, g: &ClipGraph, hash: u64) -> Result<()> {
    let (n, c, w, bands) = g.chunk_inputs.dim();
    let mut buf = Vec::new();
    buf.extend_from_slice(GRAPH_MAGIC);
    buf.extend_from_slice(&GRAPH_VERSION.to_le_bytes());
    buf.extend_from_slice(&hash.to_le_bytes());
    for d in [n, c, w, bands, g.meta_onehot.ncols(), g.truth.len(), g.id.len()] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&g.duration_s.to_le_bytes());
    buf.extend_from_slice(g.id.as_bytes());
    g.chunk_inputs.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    g.meta_onehot.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    g.node_conf.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    g.node_class.iter().for_each(|&v| buf.extend_from_slice(&(v as i32).to_le_bytes()));
    g.edge_label.iter().for_each(|&v| buf.extend_from_slice(&(v as i32).to_le_bytes()));
    g.node_time.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    for t in &g.truth {
        buf.extend_from_slice(&t.start.to_le_bytes());
        buf.extend_from_slice(&t.end.to_le_bytes());
        buf.extend_from_slice(&(t.class as i32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::path(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::path(path, e))
}

pub fn read_graph(path: &Path, expected_hash: u64) -> Result<ClipGraph> {
    let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
    let bad = || Error::Container {
        path: path.to_path_buf(),
        reason: "malformed graph container".into(),
    };
    if bytes.len() < 16 || &bytes[..4] != GRAPH_MAGIC {
        return Err(bad());
    }
    let mut pos = 4;
    let mut take = |k: usize| -> Result<&[u8]> {
        let out = bytes.get(pos..pos + k).ok_or_else(bad)?;
        pos += k;
        Ok(out)
    };
    let u32_ = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    if u32_(take(4)?) != GRAPH_VERSION {
        return Err(bad());
    }
    if u64::from_le_bytes(take(8)?.try_into().unwrap()) != expected_hash {
        return Err(Error::StaleCache(path.to_path_buf()));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = u32_(take(4)?) as usize;
    }
    let [n, c, w, bands, mw, nt, idl] = dims;
    let duration_s = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let id = String::from_utf8(take(idl)?.to_vec()).map_err(|_| bad())?;
    let f32s = |b: &[u8]| -> Vec<f32> { b.chunks(4).map(|x| f32::from_le_bytes(x.try_into().unwrap())).collect() };
    let i32s = |b: &[u8]| -> Vec<i32> { b.chunks(4).map(|x| i32::from_le_bytes(x.try_into().unwrap())).collect() };
    let chunk_inputs = Array4::from_shape_vec((n, c, w, bands), f32s(take(n * c * w * bands * 4)?)).map_err(|_| bad())?;
    let meta_onehot = Array2::from_shape_vec((n, mw), f32s(take(n * mw * 4)?)).map_err(|_| bad())?;
    let node_conf = f32s(take(n * 4)?);
    let node_class = i32s(take(n * 4)?).into_iter().map(i64::from).collect();
    let edge_label = i32s(take(n.saturating_sub(1) * 4)?).into_iter().map(|v| v as u8).collect();
    let node_time = take(n * 8)?
        .chunks(8)
        .map(|x| f64::from_le_bytes(x.try_into().unwrap()))
        .collect();
    let mut truth = Vec::with_capacity(nt);
    for _ in 0..nt {
        let start = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let end = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let class = i32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        truth.push(TruthEvent { start, end, class });
    }
    if pos != bytes.len() {
        return Err(bad());
    }
    Ok(ClipGraph {
        id,
        duration_s,
        chunk_inputs,
        node_conf,
        node_class,
        edge_index: chain_edges(n),
        edge_label,
        node_time,
        meta_onehot,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn vocab() -> Vec<String> {
        ["wheeze", "crackle", "rhonchi", "stridor"].map(String::from).to_vec()
    }

    fn stack(frames: usize, samples: usize) -> SpectrogramStack {
        SpectrogramStack {
            values: Array3::from_shape_fn((3, 4, frames), |(c, b, t)| (c * 1000 + b * 100 + t) as f32),
            frame_times: (0..frames).map(|j| j as f64 * 128.0 / 8000.0).collect(),
            source_duration_s: samples as f64 / 8000.0,
            n_samples: samples,
            hop_len: 128,
        }
    }

    #[test]
    fn frame_labels_cases() {
        let times: Vec<f64> = (0..30).map(|j| j as f64 * 0.1).collect();
        assert!(frame_labels_from_events(&[], &times, &vocab()).unwrap().0.iter().all(|&f| f == 0));
        let ev = [EventRecord::new(1.0, 2.0, "wheeze")];
        let fl = frame_labels_from_events(&ev, &times, &vocab()).unwrap().0;
        for (j, &f) in fl.iter().enumerate() {
            let inside = (10..=20).contains(&j);
            assert_eq!(f, if inside { 1 } else { 0 }, "frame {j}");
        }
        // abutting: frame at exactly 1.5 goes to the later event
        let ev = [EventRecord::new(1.0, 1.5, "wheeze"), EventRecord::new(1.5, 2.0, "crackle")];
        let fl = frame_labels_from_events(&ev, &[1.4, 1.5, 1.6], &vocab()).unwrap().0;
        assert_eq!(fl, vec![1, 2, 2]);
        let err = frame_labels_from_events(&[EventRecord::new(0.0, 1.0, "cough")], &times, &vocab()).unwrap_err();
        assert!(err.to_string().contains("cough"));
    }

    #[test]
    fn node_label_cases() {
        assert_eq!(node_label(&[0, 0, 0, 0, 0]), (0.0, -1));
        assert_eq!(node_label(&[1, 1, 0, 0, 0]), (0.4, 0));
        assert_eq!(node_label(&[1, 1, 2, 2, 0]), (0.8, 0));
        assert_eq!(node_label(&[0, 3, 2, 2, 3]), (0.8, 2));
        assert_eq!(node_label(&[0, 3, 2, 2, 2]), (0.8, 1));
    }

    #[test]
    fn edge_label_cases() {
        assert_eq!(edge_labels(&[-1, -1]), vec![0]);
        assert_eq!(edge_labels(&[-1, 2]), vec![1]);
        assert_eq!(edge_labels(&[3, 1]), vec![1]);
        assert!(edge_labels(&[0]).is_empty());
    }

    #[test]
    fn chunk_geometry() {
        let (x, t) = chunk(&stack(576, 73600), 5).unwrap();
        assert_eq!(x.dim(), (116, 3, 5, 4));
        // last chunk holds frame 575 once and four repeats of it
        for j in 0..5 {
            assert_eq!(x[[115, 1, j, 2]], (1000 + 200 + 575) as f32);
        }
        assert_eq!(x[[1, 0, 2, 3]], (300 + 7) as f32);
        assert!(t.windows(2).all(|p| p[1] > p[0]));

        let (x, t) = chunk(&stack(5, 600), 5).unwrap();
        assert_eq!(x.dim().0, 1);
        assert!((t[0] - 2.5 * 128.0 / 600.0).abs() < 1e-12);
        let (_, t) = chunk(&stack(10, 1200), 5).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t[1] > t[0]);
    }

    fn graph(id: &str, frames: usize) -> ClipGraph {
        let st = stack(frames, frames * 128);
        build_clip_graph(
            GraphInput { id, stack: &st, events: &[], meta: None },
            &vocab(),
            5,
        )
        .unwrap()
    }

    #[test]
    fn collate_offsets() {
        let b = collate(&[graph("a", 15), graph("b", 10)]).unwrap();
        assert_eq!(b.edge_index, vec![(0, 1), (1, 2), (3, 4)]);
        assert_eq!(b.batch, vec![0, 0, 0, 1, 1]);
        assert_eq!(b.offsets, vec![0, 3, 5]);
        assert_eq!(b.nodes_of(1), 3..5);

        let single = collate(&[graph("a", 15)]).unwrap();
        assert_eq!(single.edge_index, graph("a", 15).edge_index);

        let b = collate(&[graph("a", 5), graph("b", 3), graph("c", 4)]).unwrap();
        assert!(b.edge_index.is_empty());
        assert_eq!(b.batch, vec![0, 1, 2]);
        assert!(collate(&[]).is_err());
    }

    #[test]
    fn meta_encoding() {
        let mv = MetaVocab {
            positions: vec!["p1".into(), "p2".into()],
            genders: vec!["m".into(), "f".into()],
        };
        let meta = ClipMeta {
            position: Some("p2".into()),
            gender: Some("f".into()),
        };
        assert_eq!(mv.encode(&meta), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(mv.encode(&ClipMeta::default()), vec![0.0; 4]);
    }

    #[test]
    fn graph_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let st = stack(23, 23 * 128);
        let ev = [EventRecord::new(0.05, 0.2, "crackle")];
        let mv = MetaVocab {
            positions: vec!["p".into()],
            genders: vec![],
        };
        let meta = ClipMeta {
            position: Some("p".into()),
            gender: None,
        };
        let g = build_clip_graph(
            GraphInput { id: "clip-7", stack: &st, events: &ev, meta: Some((&mv, &meta)) },
            &vocab(),
            5,
        )
        .unwrap();
        let p = dir.path().join("g.bin");
        write_graph(&p, &g, 9).unwrap();
        assert_eq!(read_graph(&p, 9).unwrap(), g);
        assert!(matches!(read_graph(&p, 8), Err(Error::StaleCache(_))));
    }
}
