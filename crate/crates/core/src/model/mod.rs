//! Node-level network: dynamic-convolution node generator, edge-feature
//! projection, two edge-aware graph attention layers, the node head and the
//! sinusoidal temporal encoding.

pub mod dynconv;
pub mod nn;
pub mod params;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use dynconv::DynConv2d;
use nn::{leaky_relu, segment_softmax, BatchNorm2d, GruCell, LayerNorm, Linear};
use params::{Builder, Init};

pub use params::ParamStore;

/// Frequency pooling factor applied after every conv block.
pub const POOL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    /// One linear projection of the concatenated endpoint embeddings.
    Compressed,
    /// A two-step recurrent pass over (source, target).
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Frames per node.
    pub group: usize,
    pub bands: usize,
    /// Output channels of the three conv blocks.
    pub conv_channels: Vec<usize>,
    pub n_basis: usize,
    pub kernel: usize,
    pub d_node: usize,
    pub edge_dim: usize,
    pub edge_mode: EdgeMode,
    pub leaky_slope: f64,
    /// Amplitude of the temporal encoding.
    pub time_gamma: f64,
    pub n_classes: usize,
    /// Width of the per-node metadata one-hot; 0 disables it.
    pub meta_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            group: 5,
            bands: 84,
            conv_channels: vec![16, 32, 64],
            n_basis: 4,
            kernel: 3,
            d_node: 64,
            edge_dim: 12,
            edge_mode: EdgeMode::Compressed,
            leaky_slope: 0.2,
            time_gamma: 0.05,
            n_classes: 4,
            meta_dim: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != 3 || self.conv_channels.contains(&0) {
            return Err(Error::Config("exactly three non-empty conv blocks are required".into()));
        }
        if self.pooled_bands() == 0 {
            return Err(Error::Config(format!(
                "{} bands cannot survive three {POOL}x frequency pools",
                self.bands
            )));
        }
        if self.d_node < 2 {
            return Err(Error::Config("d_node must be >= 2 for the temporal encoding".into()));
        }
        if self.kernel % 2 == 0 || self.n_basis == 0 || self.group == 0 || self.edge_dim == 0 {
            return Err(Error::Config("kernel must be odd; n_basis, group, edge_dim >= 1".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("at least one event class is required".into()));
        }
        Ok(())
    }

    pub fn pooled_bands(&self) -> usize {
        self.bands / POOL / POOL / POOL
    }

    /// Width of the flattened conv output.
    pub fn flatten_dim(&self) -> usize {
        self.conv_channels[2] * self.group * self.pooled_bands()
    }
}

/// Chunk (N, C, T, F) → node embedding (N, D).
#[derive(Clone)]
pub struct NodeGenerator {
    blocks: Vec<(DynConv2d, BatchNorm2d)>,
    proj: Linear,
    norm: LayerNorm,
    meta_dim: usize,
}

impl NodeGenerator {
    pub fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, &c) in cfg.conv_channels.iter().enumerate() {
            let b = vb.pp(&format!("block{i}"));
            blocks.push((
                DynConv2d::new(&b.pp("conv"), c_in, c, cfg.n_basis, cfg.kernel)?,
                BatchNorm2d::new(&b.pp("bn"), c)?,
            ));
            c_in = c;
        }
        Ok(Self {
            blocks,
            proj: Linear::new(&vb.pp("proj"), cfg.flatten_dim() + cfg.meta_dim, cfg.d_node, true)?,
            norm: LayerNorm::new(&vb.pp("norm"), cfg.d_node)?,
            meta_dim: cfg.meta_dim,
        })
    }

    pub fn blocks(&self) -> &[(DynConv2d, BatchNorm2d)] {
        &self.blocks
    }

    pub fn forward(&self, x: &Tensor, meta: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, bn) in &self.blocks {
            h = bn.forward(&conv.forward(&h)?, train)?.relu()?.avg_pool2d((1, POOL))?;
        }
        let n = h.dim(0)?;
        let mut flat = h.reshape((n, ()))?;
        if self.meta_dim > 0 {
            let m = meta.ok_or_else(|| Error::Shape("model expects per-node metadata".into()))?;
            flat = Tensor::cat(&[&flat, m], 1)?;
        }
        Ok(self.norm.forward(&self.proj.forward(&flat)?)?.relu()?)
    }
}

#[derive(Clone)]
pub enum EdgeEncoder {
    Compressed(Linear),
    Sequential(GruCell),
}

impl EdgeEncoder {
    pub fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        Ok(match cfg.edge_mode {
            EdgeMode::Compressed => Self::Compressed(Linear::new(vb, 2 * cfg.d_node, cfg.edge_dim, true)?),
            EdgeMode::Sequential => Self::Sequential(GruCell::new(vb, cfg.d_node, cfg.edge_dim)?),
        })
    }

    /// Edge attributes (E, edge_dim) for ordered pairs `src → dst`.
    pub fn forward(&self, h: &Tensor, src: &Tensor, dst: &Tensor) -> Result<Tensor> {
        let hs = h.index_select(src, 0)?;
        let hd = h.index_select(dst, 0)?;
        match self {
            Self::Compressed(lin) => Ok(lin.forward(&Tensor::cat(&[&hs, &hd], 1)?)?.relu()?),
            Self::Sequential(gru) => {
                let h0 = Tensor::zeros((hs.dim(0)?, gru.hidden()), hs.dtype(), hs.device())?;
                gru.step(&hd, &gru.step(&hs, &h0)?)
            }
        }
    }
}

/// Which nonlinearity closes a GAT layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatActivation {
    Elu,
    Relu,
}

#[derive(Clone)]
pub struct GatLayer {
    w: Linear,
    /// Attention vector split as [a_dst (D), a_src (D), a_edge (edge_dim)].
    a: candle_core::Var,
    d: usize,
    slope: f64,
    act: GatActivation,
}

/// Chain edges plus one self-loop per node.
pub struct Adjacency {
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
    /// Number of non-loop edges; loops occupy the tail.
    pub n_edges: usize,
    pub n_nodes: usize,
}

impl Adjacency {
    pub fn with_self_loops(edges: &[(usize, usize)], n_nodes: usize) -> Self {
        let mut src: Vec<u32> = edges.iter().map(|e| e.0 as u32).collect();
        let mut dst: Vec<u32> = edges.iter().map(|e| e.1 as u32).collect();
        src.extend(0..n_nodes as u32);
        dst.extend(0..n_nodes as u32);
        Self {
            src,
            dst,
            n_edges: edges.len(),
            n_nodes,
        }
    }

    pub fn tensors(&self, device: &Device) -> Result<(Tensor, Tensor)> {
        Ok((
            Tensor::from_slice(&self.src, self.src.len(), device)?,
            Tensor::from_slice(&self.dst, self.dst.len(), device)?,
        ))
    }

    /// Attributes for every edge including loops: a loop carries the mean of
    /// its node's incoming edge attributes (zeros when there are none).
    pub fn with_loop_attributes(&self, edge_attr: &Tensor) -> Result<Tensor> {
        let (dev, dt) = (edge_attr.device(), edge_attr.dtype());
        let width = edge_attr.dim(1)?;
        if self.n_edges == 0 {
            return Ok(Tensor::zeros((self.n_nodes, width), dt, dev)?);
        }
        let mut deg = vec![0f64; self.n_nodes];
        for &d in &self.dst[..self.n_edges] {
            deg[d as usize] += 1.0;
        }
        let inv: Vec<f64> = deg.iter().map(|&k| if k > 0.0 { 1.0 / k } else { 0.0 }).collect();
        let inv = Tensor::from_vec(inv, (self.n_nodes, 1), dev)?.to_dtype(dt)?;
        let dst = Tensor::from_slice(&self.dst[..self.n_edges], self.n_edges, dev)?;
        let loops = Tensor::zeros((self.n_nodes, width), dt, dev)?
            .index_add(&dst, edge_attr, 0)?
            .broadcast_mul(&inv)?;
        Ok(Tensor::cat(&[edge_attr, &loops], 0)?)
    }
}

impl GatLayer {
    pub fn new(vb: &Builder, cfg: &ModelConfig, act: GatActivation) -> Result<Self> {
        let d = cfg.d_node;
        let width = 2 * d + cfg.edge_dim;
        Ok(Self {
            w: Linear::new(&vb.pp("lin"), d, d, false)?,
            a: vb.param("att", (width, 1), Init::Uniform((6.0 / (width + 1) as f64).sqrt()))?,
            d,
            slope: cfg.leaky_slope,
            act,
        })
    }

    /// Returns updated embeddings and the attention weight of every edge
    /// (loops last), as ordered in `adj`.
    pub fn forward(&self, h: &Tensor, adj: &Adjacency, attr: &Tensor) -> Result<(Tensor, Tensor)> {
        let (src, dst) = adj.tensors(h.device())?;
        let wh = self.w.forward(h)?;
        let a = self.a.as_tensor();
        let s_dst = wh.matmul(&a.narrow(0, 0, self.d)?)?.squeeze(1)?;
        let s_src = wh.matmul(&a.narrow(0, self.d, self.d)?)?.squeeze(1)?;
        let s_edge = attr.matmul(&a.narrow(0, 2 * self.d, attr.dim(1)?)?)?.squeeze(1)?;
        let e = ((s_dst.index_select(&dst, 0)? + s_src.index_select(&src, 0)?)? + s_edge)?;
        let alpha = segment_softmax(&leaky_relu(&e, self.slope)?, &adj.dst, adj.n_nodes)?;
        let msg = wh.index_select(&src, 0)?.broadcast_mul(&alpha.unsqueeze(1)?)?;
        let agg = Tensor::zeros(wh.dims(), wh.dtype(), wh.device())?.index_add(&dst, &msg, 0)?;
        let out = match self.act {
            GatActivation::Elu => agg.elu(1.0)?,
            GatActivation::Relu => agg.relu()?,
        };
        Ok((out, alpha))
    }
}

/// Adds `gamma * sin(t * omega)` with `omega_d = 10 (d - 1) / (D - 1)`.
pub fn temporal_encode(e: &Tensor, node_time: &Tensor, gamma: f64) -> Result<Tensor> {
    let d = e.dim(1)?;
    if d < 2 {
        return Err(Error::Config("temporal encoding needs an embedding width >= 2".into()));
    }
    let omega: Vec<f64> = (0..d).map(|i| 10.0 * i as f64 / (d - 1) as f64).collect();
    let omega = Tensor::from_vec(omega, (1, d), e.device())?.to_dtype(e.dtype())?;
    let t = node_time.reshape((node_time.elem_count(), 1))?.to_dtype(e.dtype())?;
    Ok((e + (t.matmul(&omega)?.sin()? * gamma)?)?)
}

#[derive(Clone)]
pub struct NodeOutputs {
    /// Generator output before message passing, (N, D).
    pub raw: Tensor,
    /// Embeddings after both attention layers, (N, D).
    pub embeddings: Tensor,
    /// Column 0 is the confidence logit, columns 1.. the class logits.
    pub node_logits: Tensor,
    /// Time-encoded embeddings fed to the refiner.
    pub encoded: Tensor,
    pub attention: [Tensor; 2],
}

/// Graph inputs in tensor form.
pub struct GraphTensors {
    pub x: Tensor,
    pub meta: Option<Tensor>,
    pub node_time: Tensor,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Clone)]
pub struct NodeNetwork {
    pub generator: NodeGenerator,
    pub edge: EdgeEncoder,
    pub gat1: GatLayer,
    pub gat2: GatLayer,
    pub head: Linear,
    pub cfg: ModelConfig,
}

impl NodeNetwork {
    /// Registers parameters under `trunk.*` and `node_head.*`.
    pub fn new(root: &Builder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let trunk = root.pp("trunk");
        Ok(Self {
            generator: NodeGenerator::new(&trunk.pp("generator"), cfg)?,
            edge: EdgeEncoder::new(&trunk.pp("edge"), cfg)?,
            gat1: GatLayer::new(&trunk.pp("gat1"), cfg, GatActivation::Elu)?,
            gat2: GatLayer::new(&trunk.pp("gat2"), cfg, GatActivation::Relu)?,
            head: Linear::new(&root.pp("node_head"), cfg.d_node, 1 + cfg.n_classes, true)?,
            cfg: cfg.clone(),
        })
    }

    pub fn forward(&self, g: &GraphTensors, train: bool) -> Result<NodeOutputs> {
        let (n, c, t, f) = g.x.dims4()?;
        if (c, t, f) != (self.cfg.in_channels, self.cfg.group, self.cfg.bands) {
            return Err(Error::Shape(format!(
                "node inputs are ({c}, {t}, {f}), model expects ({}, {}, {})",
                self.cfg.in_channels, self.cfg.group, self.cfg.bands
            )));
        }
        let raw = self.generator.forward(&g.x, g.meta.as_ref(), train)?;
        let adj = Adjacency::with_self_loops(&g.edges, n);
        let (src, dst) = {
            let s: Vec<u32> = g.edges.iter().map(|e| e.0 as u32).collect();
            let d: Vec<u32> = g.edges.iter().map(|e| e.1 as u32).collect();
            (
                Tensor::from_vec(s, g.edges.len(), raw.device())?,
                Tensor::from_vec(d, g.edges.len(), raw.device())?,
            )
        };
        let edge_attr = if g.edges.is_empty() {
            Tensor::zeros((0, self.cfg.edge_dim), raw.dtype(), raw.device())?
        } else {
            self.edge.forward(&raw, &src, &dst)?
        };
        let attr = adj.with_loop_attributes(&edge_attr)?;
        let (h1, a1) = self.gat1.forward(&raw, &adj, &attr)?;
        let (h2, a2) = self.gat2.forward(&h1, &adj, &attr)?;
        let node_logits = self.head.forward(&h2)?;
        let encoded = temporal_encode(&h2, &g.node_time, self.cfg.time_gamma)?;
        Ok(NodeOutputs {
            raw,
            embeddings: h2,
            node_logits,
            encoded,
            attention: [a1, a2],
        })
    }
}
