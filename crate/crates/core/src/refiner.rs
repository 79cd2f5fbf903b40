//! Anchor refinement: smoothed node scores, per-anchor node gathering,
//! two recurrent encoders per scale, and soft-binned boundary offsets.

use std::fmt::Write as _;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorConfig, AnchorSet};
use crate::error::{Error, Result};
use crate::events::Candidate;
use crate::model::nn::{sigmoid, softmax, GruCell, Linear};
use crate::model::params::{Builder, Init};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// One map emits offsets, confidence and class together.
    Integrated,
    /// Offsets and confidence/class come from separate maps.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub head_mode: HeadMode,
    /// Offset bins per scale.
    pub bins: Vec<usize>,
    /// Bin centers start evenly spaced on `[-offset_range, offset_range]` seconds.
    pub offset_range: f64,
    pub smooth_kernel: usize,
    pub smooth_sigma: f64,
    /// Hidden width of the head MLPs; 0 means the node width.
    pub head_hidden: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            head_mode: HeadMode::Integrated,
            bins: vec![10, 10, 10],
            offset_range: 1.0,
            smooth_kernel: 5,
            smooth_sigma: 1.0,
            head_hidden: 0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self, n_scales: usize) -> Result<()> {
        if self.bins.len() != n_scales {
            return Err(Error::Config(format!(
                "{} bin counts for {n_scales} anchor scales",
                self.bins.len()
            )));
        }
        if self.bins.iter().any(|&b| b < 2) {
            return Err(Error::Config("every scale needs at least two offset bins".into()));
        }
        if !(self.offset_range > 0.0) {
            return Err(Error::Config("offset range must be > 0".into()));
        }
        if self.smooth_kernel % 2 == 0 || !(self.smooth_sigma > 0.0) {
            return Err(Error::Config("smoothing kernel must be odd with sigma > 0".into()));
        }
        Ok(())
    }
}

/// Expected offset under softmaxed bin logits: `u` (M, B), `centers` (B).
pub fn soft_offset(u: &Tensor, centers: &Tensor) -> Result<Tensor> {
    let b = centers.elem_count();
    Ok(softmax(u)?.matmul(&centers.reshape((b, 1))?)?.squeeze(1)?)
}

/// Shifts anchor endpoints, clamps to `[0, L]`, and collapses an inverted
/// interval to its midpoint.
pub fn refine_interval(start: f64, end: f64, ds: f64, de: f64, length: f64) -> (f64, f64) {
    let s = (start + ds).clamp(0.0, length);
    let e = (end + de).clamp(0.0, length);
    let m = 0.5 * (s + e);
    (s.min(m), e.max(m))
}

/// Tensor form of [`refine_interval`]; all inputs are (M,).
fn refine_tensors(start: &Tensor, end: &Tensor, ds: &Tensor, de: &Tensor, len: &Tensor) -> Result<(Tensor, Tensor)> {
    let zero = len.zeros_like()?;
    let s = (start + ds)?.minimum(len)?.maximum(&zero)?;
    let e = (end + de)?.minimum(len)?.maximum(&zero)?;
    let m = ((&s + &e)? * 0.5)?;
    Ok((s.minimum(&m)?, e.maximum(&m)?))
}

/// Nodes whose normalized time lies in `[alpha, beta]`; if none does, the
/// single node nearest the anchor center (lowest index on ties).
pub fn select_nodes(alpha: f64, beta: f64, node_time: &[f64]) -> Vec<usize> {
    let inside: Vec<usize> = node_time
        .iter()
        .enumerate()
        .filter(|(_, &t)| alpha <= t && t <= beta)
        .map(|(i, _)| i)
        .collect();
    if !inside.is_empty() || node_time.is_empty() {
        return inside;
    }
    let c = 0.5 * (alpha + beta);
    let mut best = 0;
    for (i, &t) in node_time.iter().enumerate() {
        if (t - c).abs() < (node_time[best] - c).abs() {
            best = i;
        }
    }
    vec![best]
}

/// Normalized Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

#[derive(Clone)]
enum Head {
    Integrated(Mlp),
    Separate { offsets: Mlp, scores: Mlp },
}

#[derive(Clone)]
struct Mlp(Linear, Linear);

impl Mlp {
    fn new(vb: &Builder, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self(
            Linear::new(&vb.pp("fc1"), d_in, hidden, true)?,
            Linear::new(&vb.pp("fc2"), hidden, d_out, true)?,
        ))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.1.forward(&self.0.forward(x)?.relu()?)
    }
}

#[derive(Clone)]
struct ScaleBranch {
    features: GruCell,
    scores: GruCell,
    head: Head,
    centers: Var,
    bins: usize,
}

/// Raw outputs of one scale head, already sliced.
pub struct HeadOutputs {
    pub start_logits: Tensor,
    pub end_logits: Tensor,
    pub conf: Tensor,
    pub cls: Tensor,
}

impl ScaleBranch {
    fn predict(&self, z: &Tensor, n_classes: usize) -> Result<HeadOutputs> {
        let b = self.bins;
        let (offsets, scores) = match &self.head {
            Head::Integrated(mlp) => {
                let y = mlp.forward(z)?;
                (y.narrow(1, 0, 2 * b)?, y.narrow(1, 2 * b, 1 + n_classes)?)
            }
            Head::Separate { offsets, scores } => (offsets.forward(z)?, scores.forward(z)?),
        };
        Ok(HeadOutputs {
            start_logits: offsets.narrow(1, 0, b)?,
            end_logits: offsets.narrow(1, b, b)?,
            conf: scores.narrow(1, 0, 1)?.squeeze(1)?,
            cls: scores.narrow(1, 1, n_classes)?,
        })
    }
}

/// Per-anchor predictions for a batch, rows ordered clip-major and, within a
/// clip, in anchor-set order.
#[derive(Clone)]
pub struct IntervalPredictions {
    pub start: Tensor,
    pub end: Tensor,
    pub conf_logit: Tensor,
    /// (M, C).
    pub cls_logits: Tensor,
    pub scale: Vec<usize>,
    pub clip: Vec<usize>,
    /// Row range of each clip.
    pub clip_rows: Vec<std::ops::Range<usize>>,
}

impl IntervalPredictions {
    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    /// Host copies of one clip's rows for decoding.
    pub fn candidates(&self, clip: usize) -> Result<Vec<Candidate>> {
        let r = self.clip_rows[clip].clone();
        let f = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1()?) };
        let (s, e, c) = (f(&self.start)?, f(&self.end)?, f(&self.conf_logit)?);
        let cls: Vec<Vec<f64>> = self.cls_logits.to_dtype(DType::F64)?.to_vec2()?;
        Ok(r.map(|i| Candidate {
            start: s[i],
            end: e[i],
            conf_logit: c[i],
            cls_logits: cls[i].clone(),
        })
        .collect())
    }

    /// Text rows: clip id, scale, anchor index, start, end, confidence logit,
    /// argmax class, class logits.
    pub fn dump(&self, ids: &[String], anchors: &[AnchorSet]) -> Result<String> {
        let mut out = String::from("clip_id\tscale\tanchor\tstart\tend\tconf_logit\tclass\tcls_logits\n");
        for (b, set) in anchors.iter().enumerate().take(self.clip_rows.len()) {
            for (row, a) in self.candidates(b)?.iter().zip(&set.anchors) {
                let arg = row
                    .cls_logits
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > row.cls_logits[best] { i } else { best });
                let logits: Vec<String> = row.cls_logits.iter().map(|v| format!("{v:.4}")).collect();
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}",
                    ids[b],
                    a.scale,
                    a.index,
                    row.start,
                    row.end,
                    row.conf_logit,
                    arg,
                    logits.join(",")
                );
            }
        }
        Ok(out)
    }
}

pub struct RefinerInput<'a> {
    /// Time-encoded node embeddings (N, D).
    pub encoded: &'a Tensor,
    /// Node head output (N, 1 + C).
    pub node_logits: &'a Tensor,
    pub node_time: &'a [f64],
    /// Clip node ranges as cumulative offsets (len = clips + 1).
    pub offsets: &'a [usize],
    pub durations: &'a [f64],
    pub anchors: &'a [AnchorSet],
}

#[derive(Clone)]
pub struct Refiner {
    smooth: Var,
    branches: Vec<ScaleBranch>,
    n_classes: usize,
    radius: usize,
}

impl Refiner {
    /// Registers parameters under `refiner.*`.
    pub fn new(
        root: &Builder,
        cfg: &RefinerConfig,
        anchors: &AnchorConfig,
        d_node: usize,
        n_classes: usize,
    ) -> Result<Self> {
        cfg.validate(anchors.num_scales())?;
        let vb = root.pp("refiner");
        let channels = 1 + n_classes;
        let taps = gaussian_kernel(cfg.smooth_kernel, cfg.smooth_sigma);
        let init: Vec<f64> = (0..channels).flat_map(|_| taps.iter().copied()).collect();
        let smooth = vb.param("smooth", (channels, cfg.smooth_kernel), Init::Values(init))?;
        let hidden = if cfg.head_hidden == 0 { d_node } else { cfg.head_hidden };
        let z = d_node + 3;
        let mut branches = Vec::new();
        for (k, &b) in cfg.bins.iter().enumerate() {
            let s = vb.pp(&format!("scale{k}"));
            let head = match cfg.head_mode {
                HeadMode::Integrated => Head::Integrated(Mlp::new(&s.pp("head"), z, hidden, 2 * b + 1 + n_classes)?),
                HeadMode::Separate => Head::Separate {
                    offsets: Mlp::new(&s.pp("offset_head"), z, hidden, 2 * b)?,
                    scores: Mlp::new(&s.pp("score_head"), z, hidden, 1 + n_classes)?,
                },
            };
            let r = cfg.offset_range;
            let centers: Vec<f64> = (0..b).map(|i| -r + 2.0 * r * i as f64 / (b - 1) as f64).collect();
            branches.push(ScaleBranch {
                features: GruCell::new(&s.pp("feature_gru"), d_node, d_node)?,
                scores: GruCell::new(&s.pp("score_gru"), 1, 1)?,
                head,
                centers: s.param("centers", b, Init::Values(centers))?,
                bins: b,
            });
        }
        Ok(Self {
            smooth,
            branches,
            n_classes,
            radius: cfg.smooth_kernel / 2,
        })
    }

    pub fn smoothing_kernel(&self) -> &Var {
        &self.smooth
    }

    pub fn centers(&self, scale: usize) -> &Var {
        &self.branches[scale].centers
    }

    /// Depthwise smoothing of node logits along each clip's node axis with
    /// edge replication; returns (smoothed logits, anomaly scores).
    pub fn smooth_scores(&self, node_logits: &Tensor, offsets: &[usize]) -> Result<(Tensor, Tensor)> {
        let n = node_logits.dim(0)?;
        let dev = node_logits.device();
        let r = self.radius as isize;
        let mut acc: Option<Tensor> = None;
        for (tap, o) in (-r..=r).enumerate() {
            let mut idx = vec![0u32; n];
            for w in offsets.windows(2) {
                for i in w[0]..w[1] {
                    idx[i] = (i as isize + o).clamp(w[0] as isize, w[1] as isize - 1) as u32;
                }
            }
            let idx = Tensor::from_vec(idx, n, dev)?;
            let weight = self.smooth.as_tensor().narrow(1, tap, 1)?.squeeze(1)?;
            let term = node_logits.index_select(&idx, 0)?.broadcast_mul(&weight)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        let smoothed = acc.expect("kernel has at least one tap");
        let s = sigmoid(&smoothed.narrow(1, 0, 1)?)?;
        Ok((smoothed, s))
    }

    /// Final hidden states of both encoders over per-row node sequences.
    pub fn encode_local(&self, scale: usize, x: &Tensor, s: &Tensor, seqs: &[Vec<usize>]) -> Result<(Tensor, Tensor)> {
        let br = &self.branches[scale];
        let m = seqs.len();
        let dev = x.device();
        let d = br.features.hidden();
        let mut h = Tensor::zeros((m, d), x.dtype(), dev)?;
        let mut a = Tensor::zeros((m, 1), x.dtype(), dev)?;
        let steps = seqs.iter().map(Vec::len).max().unwrap_or(0);
        for t in 0..steps {
            let idx: Vec<u32> = seqs.iter().map(|q| *q.get(t).unwrap_or(&q[0]) as u32).collect();
            let live: Vec<u8> = seqs.iter().map(|q| u8::from(t < q.len())).collect();
            let idx = Tensor::from_vec(idx, m, dev)?;
            let live = Tensor::from_vec(live, (m, 1), dev)?;
            let h_new = br.features.step(&x.index_select(&idx, 0)?, &h)?;
            let a_new = br.scores.step(&s.index_select(&idx, 0)?, &a)?;
            h = live.broadcast_as((m, d))?.where_cond(&h_new, &h)?;
            a = live.where_cond(&a_new, &a)?;
        }
        Ok((h, a))
    }

    pub fn predict(&self, scale: usize, z: &Tensor) -> Result<HeadOutputs> {
        self.branches[scale].predict(z, self.n_classes)
    }

    pub fn forward(&self, input: &RefinerInput<'_>) -> Result<IntervalPredictions> {
        let x = input.encoded;
        let (dev, dt) = (x.device(), x.dtype());
        let (_, s) = self.smooth_scores(input.node_logits, input.offsets)?;
        let n_clips = input.anchors.len();
        if input.offsets.len() != n_clips + 1 || input.durations.len() != n_clips {
            return Err(Error::Shape("anchor sets, offsets and durations disagree".into()));
        }
        // Clip-major row number of each (clip, position-in-anchor-set).
        let mut base = Vec::with_capacity(n_clips);
        let mut total = 0;
        for set in input.anchors {
            base.push(total);
            total += set.len();
        }
        let mut parts: Vec<[Tensor; 4]> = Vec::new();
        let mut order: Vec<usize> = Vec::with_capacity(total);
        let mut scale_of = vec![0; total];
        let mut clip_of = vec![0; total];
        for (k, _) in self.branches.iter().enumerate() {
            let mut seqs = Vec::new();
            let mut feats = Vec::new();
            for (b, set) in input.anchors.iter().enumerate() {
                let lo = input.offsets[b];
                let times = &input.node_time[lo..input.offsets[b + 1]];
                let len = input.durations[b];
                for (pos, a) in set.anchors.iter().enumerate().filter(|(_, a)| a.scale == k) {
                    let local = select_nodes(a.alpha, a.beta, times);
                    if local.is_empty() {
                        return Err(Error::Shape(format!("clip {b} has no nodes")));
                    }
                    seqs.push(local.into_iter().map(|i| i + lo).collect::<Vec<_>>());
                    feats.push([a.center(), a.width(), a.start, a.end, len]);
                    let row = base[b] + pos;
                    order.push(row);
                    scale_of[row] = k;
                    clip_of[row] = b;
                }
            }
            if seqs.is_empty() {
                continue;
            }
            let m = seqs.len();
            let (h, a) = self.encode_local(k, x, &s, &seqs)?;
            let col = |j: usize| -> Result<Tensor> {
                let v: Vec<f64> = feats.iter().map(|f| f[j]).collect();
                Ok(Tensor::from_vec(v, m, dev)?.to_dtype(dt)?)
            };
            let cw = Tensor::stack(&[col(0)?, col(1)?], 1)?;
            let z = Tensor::cat(&[&h, &a, &cw], 1)?;
            let out = self.predict(k, &z)?;
            let centers = self.branches[k].centers.as_tensor();
            let ds = soft_offset(&out.start_logits, centers)?;
            let de = soft_offset(&out.end_logits, centers)?;
            let (start, end) = refine_tensors(&col(2)?, &col(3)?, &ds, &de, &col(4)?)?;
            parts.push([start, end, out.conf, out.cls]);
        }
        // `order[j]` is the clip-major row of stacked row j; invert it.
        let mut inverse = vec![0u32; total];
        for (j, &row) in order.iter().enumerate() {
            inverse[row] = j as u32;
        }
        let perm = Tensor::from_vec(inverse, total, dev)?;
        let gather = |i: usize| -> Result<Tensor> {
            let cols: Vec<&Tensor> = parts.iter().map(|p| &p[i]).collect();
            Ok(Tensor::cat(&cols, 0)?.index_select(&perm, 0)?)
        };
        let clip_rows = (0..n_clips).map(|b| base[b]..base[b] + input.anchors[b].len()).collect();
        Ok(IntervalPredictions {
            start: gather(0)?,
            end: gather(1)?,
            conf_logit: gather(2)?,
            cls_logits: gather(3)?,
            scale: scale_of,
            clip: clip_of,
            clip_rows,
        })
    }
}
