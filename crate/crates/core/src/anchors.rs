//! Multi-scale anchor intervals and IoU-based label assignment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// Target anchor duration per scale, seconds.
    pub durations: Vec<f64>,
    /// Density weight per scale; scale `k` gets `floor(base_count * w_k)` centers.
    pub weights: Vec<f64>,
    pub base_count: usize,
    pub iou_threshold: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            durations: vec![0.5, 0.8, 1.5],
            weights: vec![0.75, 2.0, 0.75],
            base_count: 20,
            iou_threshold: 0.3,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.durations.is_empty() || self.durations.len() != self.weights.len() {
            return Err(Error::Config(
                "anchor durations and weights must be non-empty and of equal length".into(),
            ));
        }
        if self.durations.iter().chain(&self.weights).any(|&v| !(v > 0.0)) {
            return Err(Error::Config("anchor durations and weights must be > 0".into()));
        }
        if self.base_count == 0 {
            return Err(Error::Config("anchor base count must be >= 1".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config("iou threshold must lie in (0, 1)".into()));
        }
        for k in 0..self.num_scales() {
            if self.count(k) == 0 {
                return Err(Error::Config(format!("scale {k} has no anchors")));
            }
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        self.durations.len()
    }

    /// Number of anchor centers at scale `k`.
    pub fn count(&self, k: usize) -> usize {
        (self.base_count as f64 * self.weights[k]).floor() as usize
    }

    pub fn total(&self) -> usize {
        (0..self.num_scales()).map(|k| self.count(k)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub scale: usize,
    pub index: usize,
    /// Normalized endpoints in [0, 1].
    pub alpha: f64,
    pub beta: f64,
    /// Absolute endpoints in seconds.
    pub start: f64,
    pub end: f64,
}

impl Anchor {
    pub fn center(&self) -> f64 {
        0.5 * (self.alpha + self.beta)
    }

    pub fn width(&self) -> f64 {
        self.beta - self.alpha
    }
}

/// All anchors of one clip, ordered by scale then index.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub duration: f64,
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

pub fn generate(duration: f64, cfg: &AnchorConfig) -> Result<AnchorSet> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::Domain(format!("clip length must be > 0, got {duration}")));
    }
    cfg.validate()?;
    let mut anchors = Vec::with_capacity(cfg.total());
    for (k, &d) in cfg.durations.iter().enumerate() {
        let half = 0.5 * d / duration;
        let n = cfg.count(k);
        for i in 0..n {
            let c = (i as f64 + 0.5) / n as f64;
            let alpha = (c - half).max(0.0);
            let beta = (c + half).min(1.0);
            anchors.push(Anchor {
                scale: k,
                index: i,
                alpha,
                beta,
                start: alpha * duration,
                end: beta * duration,
            });
        }
    }
    Ok(AnchorSet { duration, anchors })
}

/// Interval IoU with a 1e-6 guard in the denominator.
pub fn iou(a: (f64, f64), g: (f64, f64)) -> f64 {
    let inter = (a.1.min(g.1) - a.0.max(g.0)).max(0.0);
    let union = (a.1 - a.0) + (g.1 - g.0) - inter;
    inter / (union + 1e-6)
}

/// Ground-truth event in class-index form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthEvent {
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorLabel {
    pub conf: f64,
    /// -1 for background.
    pub cls: i64,
    pub target: (f64, f64),
}

impl AnchorLabel {
    pub const BACKGROUND: AnchorLabel = AnchorLabel {
        conf: 0.0,
        cls: -1,
        target: (0.0, 0.0),
    };

    pub fn is_foreground(&self) -> bool {
        self.cls >= 0
    }
}

/// Labels each anchor with its best-IoU truth event when that IoU reaches
/// the threshold. Ties go to the lowest event index.
pub fn assign(anchors: &AnchorSet, truth: &[TruthEvent], iou_threshold: f64) -> Vec<AnchorLabel> {
    anchors
        .anchors
        .iter()
        .map(|a| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in truth.iter().enumerate() {
                let v = iou((a.start, a.end), (g.start, g.end));
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, gamma)) if gamma >= iou_threshold && gamma > 0.0 => AnchorLabel {
                    conf: gamma,
                    cls: truth[j].class as i64,
                    target: (truth[j].start, truth[j].end),
                },
                _ => AnchorLabel::BACKGROUND,
            }
        })
        .collect()
}

/// Debug dump: one row per anchor, `k i t_s t_e conf cls tau_s tau_e`.
pub fn dump(anchors: &AnchorSet, labels: &[AnchorLabel]) -> String {
    let mut s = String::from("k\ti\tt_s\tt_e\tconf\tcls\ttau_s\ttau_e\n");
    for (a, l) in anchors.anchors.iter().zip(labels) {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}\t{:.6}",
            a.scale, a.index, a.start, a.end, l.conf, l.cls, l.target.0, l.target.1
        );
    }
    s
}
