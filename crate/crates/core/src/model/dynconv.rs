//! Dynamic convolution: a bank of basis kernels mixed per (sample, frame) by
//! softmax weights predicted from the input itself.

use candle_core::Tensor;

use super::nn::{softmax, Linear};
use super::params::{Builder, Init};
use crate::error::{Error, Result};

#[derive(Clone)]
pub struct DynConv2d {
    /// (c_in * k * k, n_basis * c_out), im2col layout.
    weight: candle_core::Var,
    bias: candle_core::Var,
    attention: Linear,
    c_in: usize,
    c_out: usize,
    n_basis: usize,
    k: usize,
}

impl DynConv2d {
    pub fn new(vb: &Builder, c_in: usize, c_out: usize, n_basis: usize, k: usize) -> Result<Self> {
        if k % 2 == 0 || n_basis == 0 {
            return Err(Error::Config("conv kernel must be odd and n_basis >= 1".into()));
        }
        let fan_in = (c_in * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Ok(Self {
            weight: vb.param("weight", (c_in * k * k, n_basis * c_out), Init::Uniform(bound))?,
            bias: vb.param("bias", n_basis * c_out, Init::Uniform(bound))?,
            attention: Linear::new(&vb.pp("attention"), c_in, n_basis, true)?,
            c_in,
            c_out,
            n_basis,
            k,
        })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    /// Kernel-mixing weights, shape (N, T, n_basis): frequency-averaged input,
    /// a 1x1 temporal convolution, softmax over kernels.
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, t, _) = x.dims4()?;
        let pooled = x.mean(3)?.transpose(1, 2)?.reshape((n * t, self.c_in))?;
        softmax(&self.attention.forward(&pooled)?)?.reshape((n, t, self.n_basis)).map_err(Into::into)
    }

    /// Output of every basis kernel, shape (N, T, F, n_basis, c_out).
    pub fn basis_outputs(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, t, f) = x.dims4()?;
        if c != self.c_in {
            return Err(Error::Shape(format!("conv expects {} input channels, got {c}", self.c_in)));
        }
        let p = self.k / 2;
        let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
        let mut cols = Vec::with_capacity(self.k * self.k);
        for dt in 0..self.k {
            for df in 0..self.k {
                cols.push(xp.narrow(2, dt, t)?.narrow(3, df, f)?);
            }
        }
        let kk = self.k * self.k;
        let u = Tensor::stack(&cols, 2)?
            .reshape((n, c * kk, t * f))?
            .transpose(1, 2)?
            .reshape((n * t * f, c * kk))?;
        let y = u.matmul(self.weight.as_tensor())?.broadcast_add(self.bias.as_tensor())?;
        Ok(y.reshape((n, t, f, self.n_basis, self.c_out))?)
    }

    /// Mixes basis outputs with explicit weights `alpha` of shape (N, T, n_basis).
    pub fn forward_with(&self, x: &Tensor, alpha: &Tensor) -> Result<Tensor> {
        let y = self.basis_outputs(x)?;
        let (n, t, _, nb, _) = y.dims5()?;
        let a = alpha.reshape((n, t, 1, nb, 1))?;
        Ok(y.broadcast_mul(&a)?.sum(3)?.permute((0, 3, 1, 2))?.contiguous()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let alpha = self.attention(x)?;
        self.forward_with(x, &alpha)
    }

    /// Basis kernel `j` as (c_out, c_in, k, k) plus its bias, for oracles.
    pub fn kernel(&self, j: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let w: Vec<Vec<f64>> = self.weight.as_tensor().to_dtype(candle_core::DType::F64)?.to_vec2()?;
        let b: Vec<f64> = self.bias.as_tensor().to_dtype(candle_core::DType::F64)?.to_vec1()?;
        let kk = self.k * self.k;
        let mut out = vec![0.0; self.c_out * self.c_in * kk];
        for o in 0..self.c_out {
            for ci in 0..self.c_in {
                for q in 0..kk {
                    out[(o * self.c_in + ci) * kk + q] = w[ci * kk + q][j * self.c_out + o];
                }
            }
        }
        Ok((out, b[j * self.c_out..(j + 1) * self.c_out].to_vec()))
    }
}
