//! Small differentiable building blocks on top of candle tensors.

use candle_core::{DType, Tensor, Var, D};

use super::params::{Builder, Init};
use crate::error::Result;

/// Affine map with weight stored as (in, out).
#[derive(Clone)]
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn new(vb: &Builder, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = vb.param("weight", (d_in, d_out), Init::Uniform(bound))?;
        let b = if bias {
            Some(vb.param("bias", d_out, Init::Uniform(bound)))
        } else {
            None
        }
        .transpose()?;
        Ok(Self { w, b })
    }

    /// `x` is (rows, in).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(self.w.as_tensor())?;
        Ok(match &self.b {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
}

impl LayerNorm {
    pub fn new(vb: &Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: vb.param("weight", dim, Init::Const(1.0))?,
            beta: vb.param("bias", dim, Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mu = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mu)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(y.broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Batch normalization over (N, C, T, F) with running statistics kept as
/// non-trainable buffers.
#[derive(Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(vb: &Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: vb.param("weight", channels, Init::Const(1.0))?,
            beta: vb.param("bias", channels, Init::Const(0.0))?,
            running_mean: vb.buffer("running_mean", channels, 0.0)?,
            running_var: vb.buffer("running_var", channels, 1.0)?,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = (x.elem_count() / c) as f64;
            let unbiased = (var.detach().flatten_all()? * (n / (n - 1.0).max(1.0)))?;
            let m = self.momentum;
            self.running_mean.set(
                &((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?,
            )?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            )
        };
        let y = x.broadcast_sub(&mean)?.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma.as_tensor().reshape(shape)?)?
            .broadcast_add(&self.beta.as_tensor().reshape(shape)?)?)
    }
}

/// Gated recurrent unit cell: reset, update and candidate gates.
#[derive(Clone)]
pub struct GruCell {
    ih: Linear,
    hh: Linear,
    hidden: usize,
}

impl GruCell {
    pub fn new(vb: &Builder, d_in: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let lin = |name: &str, d: usize| -> Result<Linear> {
            let vb = vb.pp(name);
            Ok(Linear {
                w: vb.param("weight", (d, 3 * hidden), Init::Uniform(bound))?,
                b: Some(vb.param("bias", 3 * hidden, Init::Uniform(bound))?),
            })
        };
        Ok(Self {
            ih: lin("ih", d_in)?,
            hh: lin("hh", hidden)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `x` (rows, in), `h` (rows, hidden).
    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let gi = self.ih.forward(x)?;
        let gh = self.hh.forward(h)?;
        let n = self.hidden;
        let r = sigmoid(&(gi.narrow(1, 0, n)? + gh.narrow(1, 0, n)?)?)?;
        let z = sigmoid(&(gi.narrow(1, n, n)? + gh.narrow(1, n, n)?)?)?;
        let cand = (gi.narrow(1, 2 * n, n)? + (r * gh.narrow(1, 2 * n, n)?)?)?.tanh()?;
        // h' = (1 - z) * cand + z * h = cand + z * (h - cand)
        Ok((&cand + (z * (h - &cand)?)?)?)
    }
}

/// Logistic function in its tanh form, which keeps gradients finite for
/// large-magnitude inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let xs = x.broadcast_sub(&m)?;
    let lse = xs.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(xs.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(x)?.exp()?)
}

/// `log(1 + exp(x))` split at zero so neither branch can overflow; the
/// split keeps the derivative exact at `x = 0`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let zero = x.zeros_like()?;
    let hi = x.maximum(&zero)?;
    let lo = x.minimum(&zero)?;
    let a = (&hi + (hi.neg()?.exp()? + 1.0)?.log()?)?;
    let b = (lo.exp()? + 1.0)?.log()?;
    Ok(((a + b)? - std::f64::consts::LN_2)?)
}

/// Element-wise binary cross-entropy with logits: `softplus(x) - x t`.
pub fn bce_with_logits(x: &Tensor, t: &Tensor) -> Result<Tensor> {
    Ok((softplus(x)? - (x * t)?)?)
}

/// Softmax of per-edge scores grouped by destination node. The per-group max
/// is a constant shift, so it is taken off the autograd graph.
pub fn segment_softmax(scores: &Tensor, dst: &[u32], n_nodes: usize) -> Result<Tensor> {
    let dev = scores.device();
    let host: Vec<f64> = scores.detach().to_dtype(DType::F64)?.to_vec1()?;
    let mut max = vec![f64::NEG_INFINITY; n_nodes];
    for (&d, &s) in dst.iter().zip(&host) {
        max[d as usize] = max[d as usize].max(s);
    }
    let shift: Vec<f64> = dst.iter().map(|&d| max[d as usize]).collect();
    let shift = Tensor::from_vec(shift, dst.len(), dev)?.to_dtype(scores.dtype())?;
    let idx = Tensor::from_slice(dst, dst.len(), dev)?;
    let e = (scores - shift)?.exp()?;
    let denom = Tensor::zeros(n_nodes, scores.dtype(), dev)?.index_add(&idx, &e, 0)?;
    Ok((e / denom.index_select(&idx, 0)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use candle_core::Device;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn sigmoid_matches_closed_form() {
        let x = t(&[-30.0, -1.0, 0.0, 2.0, 40.0]);
        let y: Vec<f64> = sigmoid(&x).unwrap().to_vec1().unwrap();
        for (a, b) in [-30.0f64, -1.0, 0.0, 2.0, 40.0].iter().zip(&y) {
            assert!((1.0 / (1.0 + (-a).exp()) - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_reference_points() {
        let v: Vec<f64> = bce_with_logits(&t(&[0.0, 0.0, 20.0, 3f64.ln()]), &t(&[0.5, 0.0, 1.0, 0.75]))
            .unwrap()
            .to_vec1()
            .unwrap();
        let ln2 = 2f64.ln();
        assert!((v[0] - ln2).abs() < 1e-12);
        assert!((v[1] - ln2).abs() < 1e-12);
        assert!(v[2] < 1e-8);
        let want = -0.75 * 0.75f64.ln() - 0.25 * 0.25f64.ln();
        assert!((v[3] - want).abs() < 1e-12);
    }

    #[test]
    fn segment_softmax_groups() {
        let s = t(&[1.0, 1.0, 5.0, 0.3]);
        let a: Vec<f64> = segment_softmax(&s, &[0, 0, 1, 2], 3).unwrap().to_vec1().unwrap();
        assert!((a[0] - 0.5).abs() < 1e-12 && (a[1] - 0.5).abs() < 1e-12);
        assert_eq!(a[2], 1.0);
        assert_eq!(a[3], 1.0);
    }

    #[test]
    fn gru_zero_input_moves_toward_candidate() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let cell = GruCell::new(&store.root().pp("g"), 2, 3).unwrap();
        let h = cell
            .step(&Tensor::zeros((4, 2), DType::F64, &Device::Cpu).unwrap(), &Tensor::zeros((4, 3), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(h.dims(), &[4, 3]);
        let rows: Vec<Vec<f64>> = h.to_vec2().unwrap();
        assert!(rows.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn layer_norm_normalizes() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let ln = LayerNorm::new(&store.root(), 4).unwrap();
        let y: Vec<Vec<f64>> = ln
            .forward(&Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap())
            .unwrap()
            .to_vec2()
            .unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
