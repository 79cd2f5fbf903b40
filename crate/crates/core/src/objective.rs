//! Node and interval losses and their weighted total.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorLabel;
use crate::error::Result;
use crate::model::nn::{bce_with_logits, log_softmax};

/// Guard shared with the anchor IoU.
const IOU_EPS: f64 = 1e-6;
/// Lower clip on IoU inside the log.
pub const IOU_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub node_conf: f64,
    pub node_cls: f64,
    pub interval_conf: f64,
    pub interval_cls: f64,
    pub interval_loc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            node_conf: 1.0,
            node_cls: 1.0,
            interval_conf: 1.0,
            interval_cls: 1.0,
            interval_loc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.node_conf,
            self.node_cls,
            self.interval_conf,
            self.interval_cls,
            self.interval_loc,
        ]
    }
}

/// Denominator of the localization IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// Intersection over union, as used for anchor assignment.
    #[default]
    Union,
    /// Intersection over the span enclosing both intervals.
    EnclosingSpan,
}

fn scalar_zero(dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, device)?)
}

/// Mean binary cross-entropy with logits.
pub fn bce_mean(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.elem_count() == 0 {
        return scalar_zero(logits.dtype(), logits.device());
    }
    Ok(bce_with_logits(logits, &targets.to_dtype(logits.dtype())?)?.mean_all()?)
}

/// Cross-entropy averaged over rows whose label is not -1; zero when no row
/// qualifies.
pub fn masked_cross_entropy(logits: &Tensor, labels: &[i64]) -> Result<Tensor> {
    let fg: Vec<u32> = (0..labels.len() as u32).filter(|&i| labels[i as usize] >= 0).collect();
    if fg.is_empty() {
        return scalar_zero(logits.dtype(), logits.device());
    }
    let dev = logits.device();
    let idx = Tensor::from_slice(&fg, fg.len(), dev)?;
    let target: Vec<u32> = fg.iter().map(|&i| labels[i as usize] as u32).collect();
    let target = Tensor::from_vec(target, (fg.len(), 1), dev)?;
    let lp = log_softmax(&logits.contiguous()?.index_select(&idx, 0)?)?;
    Ok(lp.gather(&target, 1)?.mean_all()?.neg()?)
}

/// Element-wise IoU of predicted and target intervals.
pub fn interval_iou(s: &Tensor, e: &Tensor, ts: &Tensor, te: &Tensor, mode: IouMode) -> Result<Tensor> {
    let inter = (e.minimum(te)? - s.maximum(ts)?)?.relu()?;
    let denom = match mode {
        IouMode::Union => (((e - s)? + (te - ts)?)? - &inter)?,
        IouMode::EnclosingSpan => (e.maximum(te)? - s.minimum(ts)?)?,
    };
    Ok((inter / (denom + IOU_EPS)?)?)
}

/// Mean `-log IoU` over foreground rows with IoU clipped to `[1e-6, 1]`.
pub fn localization_loss(start: &Tensor, end: &Tensor, labels: &[AnchorLabel], mode: IouMode) -> Result<Tensor> {
    let fg: Vec<u32> = (0..labels.len() as u32)
        .filter(|&i| labels[i as usize].is_foreground())
        .collect();
    if fg.is_empty() {
        return scalar_zero(start.dtype(), start.device());
    }
    let (dev, dt) = (start.device(), start.dtype());
    let idx = Tensor::from_slice(&fg, fg.len(), dev)?;
    let col = |f: fn(&AnchorLabel) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = fg.iter().map(|&i| f(&labels[i as usize])).collect();
        Ok(Tensor::from_vec(v, fg.len(), dev)?.to_dtype(dt)?)
    };
    let iou = interval_iou(
        &start.index_select(&idx, 0)?,
        &end.index_select(&idx, 0)?,
        &col(|l| l.target.0)?,
        &col(|l| l.target.1)?,
        mode,
    )?;
    Ok(iou.clamp(IOU_FLOOR, 1.0)?.log()?.mean_all()?.neg()?)
}

/// The five loss terms as differentiable scalars.
pub struct Losses {
    pub node_conf: Tensor,
    pub node_cls: Tensor,
    pub interval_conf: Tensor,
    pub interval_cls: Tensor,
    pub interval_loc: Tensor,
    pub total: Tensor,
    pub n_fg: usize,
    pub m_fg: usize,
}

pub struct LossInputs<'a> {
    /// (N, 1 + C) node head output.
    pub node_logits: &'a Tensor,
    pub node_conf: &'a [f32],
    pub node_class: &'a [i64],
    pub start: &'a Tensor,
    pub end: &'a Tensor,
    pub conf_logit: &'a Tensor,
    pub cls_logits: &'a Tensor,
    /// One label per interval row, same order.
    pub anchor_labels: &'a [AnchorLabel],
}

pub fn compute(inputs: &LossInputs<'_>, weights: &LossWeights, mode: IouMode) -> Result<Losses> {
    let nl = inputs.node_logits;
    let (dev, dt) = (nl.device(), nl.dtype());
    let c = nl.dim(1)? - 1;
    let node_t = Tensor::from_vec(
        inputs.node_conf.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        inputs.node_conf.len(),
        dev,
    )?;
    let node_conf = bce_mean(&nl.narrow(1, 0, 1)?.squeeze(1)?, &node_t)?;
    let node_cls = masked_cross_entropy(&nl.narrow(1, 1, c)?, inputs.node_class)?;
    let anchor_t: Vec<f64> = inputs.anchor_labels.iter().map(|l| l.conf).collect();
    let anchor_t = Tensor::from_vec(anchor_t, inputs.anchor_labels.len(), dev)?;
    let interval_conf = bce_mean(inputs.conf_logit, &anchor_t)?;
    let anchor_cls: Vec<i64> = inputs.anchor_labels.iter().map(|l| l.cls).collect();
    let interval_cls = masked_cross_entropy(inputs.cls_logits, &anchor_cls)?;
    let interval_loc = localization_loss(inputs.start, inputs.end, inputs.anchor_labels, mode)?;
    let terms = [&node_conf, &node_cls, &interval_conf, &interval_cls, &interval_loc];
    let mut total = scalar_zero(dt, dev)?;
    for (t, w) in terms.iter().zip(weights.as_array()) {
        total = (total + (*t * w)?)?;
    }
    Ok(Losses {
        n_fg: inputs.node_class.iter().filter(|&&k| k >= 0).count(),
        m_fg: inputs.anchor_labels.iter().filter(|l| l.is_foreground()).count(),
        node_conf,
        node_cls,
        interval_conf,
        interval_cls,
        interval_loc,
        total,
    })
}

/// Host-side snapshot of [`Losses`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub node_conf: f64,
    pub node_cls: f64,
    pub interval_conf: f64,
    pub interval_cls: f64,
    pub interval_loc: f64,
    pub total: f64,
    pub n_fg: usize,
    pub m_fg: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "step,node_conf,node_cls,interval_conf,interval_cls,interval_loc,total,n_fg,m_fg";

    pub fn from_losses(l: &Losses) -> Result<Self> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(Self {
            node_conf: v(&l.node_conf)?,
            node_cls: v(&l.node_cls)?,
            interval_conf: v(&l.interval_conf)?,
            interval_cls: v(&l.interval_cls)?,
            interval_loc: v(&l.interval_loc)?,
            total: v(&l.total)?,
            n_fg: l.n_fg,
            m_fg: l.m_fg,
        })
    }

    pub fn components(&self) -> [f64; 5] {
        [
            self.node_conf,
            self.node_cls,
            self.interval_conf,
            self.interval_cls,
            self.interval_loc,
        ]
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{}",
            self.node_conf,
            self.node_cls,
            self.interval_conf,
            self.interval_cls,
            self.interval_loc,
            self.total,
            self.n_fg,
            self.m_fg
        )
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components().iter().all(|v| v.is_finite())
    }
}
