//! A small pre-norm transformer used to exercise the quantization pipeline.
//!
//! Each block is `x += Attn(LN(x)); x += MLP(LN(x))` with multi-head softmax
//! attention, a GELU MLP and no positional encoding. The attention and MLP
//! branches are the network's *submodules*: submodule `2i` is block `i`'s
//! attention, `2i + 1` its MLP.

mod backward;
mod forward;
mod pipeline;
mod pool;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub use backward::{backward_wrt_activations, AttentionGrads, MlpGrads, SubmoduleGrads};
pub use forward::{
    layer_norm, LN_VAR_GUARD, AttentionTaps, MlpTaps, QuantPoint, SubmoduleQuant, SubmoduleTaps, TapPoint,
    ForwardHook,
};
pub use pipeline::{
    measure_accumulated_error, run_pipeline_on, run_taptq_pipeline, ModuleIo, ModuleOutputs, ModuleReport, PipelineConfig,
    PipelineReport, PipelineTotals, QuantizedToyNet, SimilarityScope, TracedPoint, selection_rng,
};
pub use pool::{gen_calibration_pool, gen_probe_inputs, OUTLIER_DF, OUTLIER_NOISE_SCALE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyNetConfig {
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub outlier_channels: usize,
    pub outlier_scale: f64,
    pub seed: u64,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            seq_len: 32,
            outlier_channels: 4,
            outlier_scale: 8.0,
            seed: 0,
        }
    }
}

impl ToyNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.d_model == 0 || self.d_ff == 0 || self.seq_len == 0 || self.n_heads == 0 {
            return Err(Error::param("toy net dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::param(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.outlier_channels > self.d_model {
            return Err(Error::param(format!(
                "outlier_channels {} exceeds d_model {}",
                self.outlier_channels, self.d_model
            )));
        }
        if !(self.outlier_scale > 0.0) || !self.outlier_scale.is_finite() {
            return Err(Error::param("outlier_scale must be positive"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_submodules(&self) -> usize {
        2 * self.depth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Weights are stored `[out × in]`; a linear map is `x · Wᵀ + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2: LayerNormParams,
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubmoduleKind {
    Attention,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNet {
    pub config: ToyNetConfig,
    pub blocks: Vec<Block>,
    /// Residual channels whose attention output and MLP hidden units are amplified.
    pub outlier_channels: Vec<usize>,
}

impl ToyNet {
    /// Seeded Gaussian initialisation, `N(0, 1/fan_in)`, with the designated
    /// outlier channels' rows of `W_o` and `W_1` scaled by `outlier_scale`.
    /// Values are rounded through `f32` so a saved net reloads bit-exactly.
    pub fn new(config: ToyNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(config.seed, "toynet.weights");
        let (d, f) = (config.d_model, config.d_ff);
        let mut channels: Vec<usize> = (0..d).collect();
        Rng::derive(config.seed, "toynet.outliers").shuffle(&mut channels);
        let mut outlier_channels = channels[..config.outlier_channels].to_vec();
        outlier_channels.sort_unstable();

        let mut linear = |out: usize, inp: usize| rng.normal(&[out, inp], 0.0, (1.0 / inp as f64).sqrt());
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let wq = linear(d, d);
            let wk = linear(d, d);
            let wv = linear(d, d);
            let mut wo = linear(d, d);
            let mut w1 = linear(f, d);
            let w2 = linear(d, f);
            for &c in &outlier_channels {
                wo.row_mut(c).iter_mut().for_each(|v| *v *= config.outlier_scale);
                w1.row_mut(c % f).iter_mut().for_each(|v| *v *= config.outlier_scale);
            }
            let ln = || LayerNormParams {
                gamma: vec![1.0; d],
                beta: vec![0.0; d],
            };
            blocks.push(Block {
                ln1: ln(),
                wq: wq.round_to_f32(),
                wk: wk.round_to_f32(),
                wv: wv.round_to_f32(),
                wo: wo.round_to_f32(),
                ln2: ln(),
                w1: w1.round_to_f32(),
                b1: vec![0.0; f],
                w2: w2.round_to_f32(),
                b2: vec![0.0; d],
            });
        }
        Ok(Self {
            config,
            blocks,
            outlier_channels,
        })
    }

    /// Same architecture with every parameter zero.
    pub fn zeroed(config: ToyNetConfig) -> Result<Self> {
        let mut net = Self::new(config)?;
        for b in &mut net.blocks {
            for t in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2] {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            b.ln1.gamma.iter_mut().for_each(|v| *v = 0.0);
            b.ln2.gamma.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(net)
    }

    pub fn n_submodules(&self) -> usize {
        self.config.n_submodules()
    }

    pub fn submodule_kind(m: usize) -> SubmoduleKind {
        if m % 2 == 0 {
            SubmoduleKind::Attention
        } else {
            SubmoduleKind::Mlp
        }
    }

    pub fn submodule_name(m: usize) -> String {
        match Self::submodule_kind(m) {
            SubmoduleKind::Attention => format!("block{}.attn", m / 2),
            SubmoduleKind::Mlp => format!("block{}.mlp", m / 2),
        }
    }

    /// Named parameter tensors in a fixed order (biases and norms as 1-D).
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            let v = |x: &[f64]| Tensor::from_vec(x.to_vec());
            out.push((format!("{p}.ln1.gamma"), v(&b.ln1.gamma)));
            out.push((format!("{p}.ln1.beta"), v(&b.ln1.beta)));
            out.push((format!("{p}.attn.wq"), b.wq.clone()));
            out.push((format!("{p}.attn.wk"), b.wk.clone()));
            out.push((format!("{p}.attn.wv"), b.wv.clone()));
            out.push((format!("{p}.attn.wo"), b.wo.clone()));
            out.push((format!("{p}.ln2.gamma"), v(&b.ln2.gamma)));
            out.push((format!("{p}.ln2.beta"), v(&b.ln2.beta)));
            out.push((format!("{p}.mlp.w1"), b.w1.clone()));
            out.push((format!("{p}.mlp.b1"), v(&b.b1)));
            out.push((format!("{p}.mlp.w2"), b.w2.clone()));
            out.push((format!("{p}.mlp.b2"), v(&b.b2)));
        }
        out
    }

    /// Rebuilds a net from [`ToyNet::named_tensors`] output.
    pub fn from_named_tensors(
        config: ToyNetConfig,
        outlier_channels: Vec<usize>,
        tensors: &[(String, Tensor)],
    ) -> Result<Self> {
        config.validate()?;
        let find = |name: &str| -> Result<Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
        };
        let (d, f) = (config.d_model, config.d_ff);
        let mat = |name: &str, r: usize, c: usize| -> Result<Tensor> {
            let t = find(name)?;
            if t.shape() != [r, c] {
                return Err(Error::Format(format!("`{name}` has shape {:?}, expected [{r}, {c}]", t.shape())));
            }
            Ok(t)
        };
        let vec = |name: &str, n: usize| -> Result<Vec<f64>> {
            let t = find(name)?;
            if t.len() != n {
                return Err(Error::Format(format!("`{name}` has {} values, expected {n}", t.len())));
            }
            Ok(t.into_data())
        };
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("block{i}");
                Ok(Block {
                    ln1: LayerNormParams {
                        gamma: vec(&format!("{p}.ln1.gamma"), d)?,
                        beta: vec(&format!("{p}.ln1.beta"), d)?,
                    },
                    wq: mat(&format!("{p}.attn.wq"), d, d)?,
                    wk: mat(&format!("{p}.attn.wk"), d, d)?,
                    wv: mat(&format!("{p}.attn.wv"), d, d)?,
                    wo: mat(&format!("{p}.attn.wo"), d, d)?,
                    ln2: LayerNormParams {
                        gamma: vec(&format!("{p}.ln2.gamma"), d)?,
                        beta: vec(&format!("{p}.ln2.beta"), d)?,
                    },
                    w1: mat(&format!("{p}.mlp.w1"), f, d)?,
                    b1: vec(&format!("{p}.mlp.b1"), f)?,
                    w2: mat(&format!("{p}.mlp.w2"), d, f)?,
                    b2: vec(&format!("{p}.mlp.b2"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            blocks,
            outlier_channels,
        })
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = [self.config.seq_len, self.config.d_model];
        if x.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "toynet input",
                left: expected.to_vec(),
                right: x.shape().to_vec(),
            });
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
