use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{gelu, LayerNormParams, SubmoduleKind, ToyNet};
use crate::calibration::TokenTaps;
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, Tensor};
use crate::quantizer::Quantizer;

/// Variance below which a token is treated as constant and normalizes to zero.
pub const LN_VAR_GUARD: f64 = 1e-12;

/// Where a quantizer can sit inside a submodule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantPoint {
    /// Normalized input feeding the q/k/v projections.
    AttnIn,
    Wq,
    Wk,
    Wv,
    /// Post-softmax attention probabilities.
    Probs,
    Wo,
    /// Attention context feeding the output projection.
    Ctx,
    /// Normalized input feeding the first MLP layer.
    MlpIn,
    W1,
    W2,
    /// Post-GELU hidden activations.
    Hidden,
}

impl QuantPoint {
    pub fn name(&self) -> &'static str {
        match self {
            QuantPoint::AttnIn => "attn_in",
            QuantPoint::Wq => "wq",
            QuantPoint::Wk => "wk",
            QuantPoint::Wv => "wv",
            QuantPoint::Probs => "probs",
            QuantPoint::Wo => "wo",
            QuantPoint::Ctx => "ctx",
            QuantPoint::MlpIn => "mlp_in",
            QuantPoint::W1 => "w1",
            QuantPoint::W2 => "w2",
            QuantPoint::Hidden => "hidden",
        }
    }

    pub fn is_weight(&self) -> bool {
        matches!(
            self,
            QuantPoint::Wq | QuantPoint::Wk | QuantPoint::Wv | QuantPoint::Wo | QuantPoint::W1 | QuantPoint::W2
        )
    }

    /// Calibration order within a submodule: each linear unit's weights,
    /// then the activation feeding it.
    pub fn calibration_order(kind: SubmoduleKind) -> &'static [QuantPoint] {
        match kind {
            SubmoduleKind::Attention => &[
                QuantPoint::Wq,
                QuantPoint::Wk,
                QuantPoint::Wv,
                QuantPoint::AttnIn,
                QuantPoint::Probs,
                QuantPoint::Wo,
                QuantPoint::Ctx,
            ],
            SubmoduleKind::Mlp => &[QuantPoint::W1, QuantPoint::MlpIn, QuantPoint::W2, QuantPoint::Hidden],
        }
    }
}

/// Quantizers attached to one submodule; absent points stay full precision.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubmoduleQuant {
    pub points: BTreeMap<QuantPoint, Quantizer>,
}

impl SubmoduleQuant {
    fn apply(&self, point: QuantPoint, t: Tensor) -> Result<Tensor> {
        match self.points.get(&point) {
            Some(q) => q.apply(&t),
            None => Ok(t),
        }
    }

    fn weight(&self, point: QuantPoint, w: &Tensor) -> Result<Tensor> {
        match self.points.get(&point) {
            Some(q) => q.apply(w),
            None => Ok(w.clone()),
        }
    }
}

/// Tensors observable (and perturbable) during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TapPoint {
    Input,
    Normed,
    Q,
    K,
    V,
    Probs(usize),
    Ctx,
    HiddenPre,
    Hidden,
    Branch,
    Output,
}

/// Called with `(submodule, point, tensor)` right after a tapped tensor is
/// computed and before it is consumed; may modify it in place.
pub type ForwardHook<'a> = &'a mut dyn FnMut(usize, TapPoint, &mut Tensor);

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTaps {
    pub input: Tensor,
    /// Normalized tokens before the affine map.
    pub xhat: Tensor,
    /// `1/σ` per token, zero for guarded (constant) tokens.
    pub rstd: Vec<f64>,
    pub normed: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Softmax probabilities per head, `[seq × seq]`.
    pub probs: Vec<Tensor>,
    pub ctx: Tensor,
    pub branch: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpTaps {
    pub input: Tensor,
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
    pub normed: Tensor,
    pub hidden_pre: Tensor,
    pub hidden: Tensor,
    pub branch: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SubmoduleTaps {
    Attention(AttentionTaps),
    Mlp(MlpTaps),
}

impl SubmoduleTaps {
    pub fn input(&self) -> &Tensor {
        match self {
            SubmoduleTaps::Attention(t) => &t.input,
            SubmoduleTaps::Mlp(t) => &t.input,
        }
    }

    pub fn output(&self) -> &Tensor {
        match self {
            SubmoduleTaps::Attention(t) => &t.output,
            SubmoduleTaps::Mlp(t) => &t.output,
        }
    }

    pub fn normed(&self) -> &Tensor {
        match self {
            SubmoduleTaps::Attention(t) => &t.normed,
            SubmoduleTaps::Mlp(t) => &t.normed,
        }
    }

    pub fn into_output(self) -> Tensor {
        match self {
            SubmoduleTaps::Attention(t) => t.output,
            SubmoduleTaps::Mlp(t) => t.output,
        }
    }
}

/// Per-token layer norm. Returns `(output, x̂, 1/σ)`.
pub fn layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (rows, cols) = x.dims2()?;
    if p.gamma.len() != cols || p.beta.len() != cols {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: vec![p.gamma.len()],
        });
    }
    let c = cols as f64;
    let mut xhat = Tensor::zeros(&[rows, cols]);
    let mut out = Tensor::zeros(&[rows, cols]);
    let mut rstd = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let r = if var > LN_VAR_GUARD { 1.0 / var.sqrt() } else { 0.0 };
        rstd.push(r);
        for j in 0..cols {
            let h = (row[j] - mean) * r;
            xhat.set(i, j, h);
            out.set(i, j, p.gamma[j] * h + p.beta[j]);
        }
    }
    Ok((out, xhat, rstd))
}

fn softmax_rows(s: &mut Tensor) {
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
}

fn tap(hook: &mut Option<ForwardHook<'_>>, m: usize, p: TapPoint, t: &mut Tensor) {
    if let Some(h) = hook.as_mut() {
        h(m, p, t);
    }
}

impl ToyNet {
    /// Runs submodule `m` on stream `x`, applying `quant` where present.
    pub fn run_submodule(
        &self,
        m: usize,
        x: &Tensor,
        quant: Option<&SubmoduleQuant>,
        mut hook: Option<ForwardHook<'_>>,
    ) -> Result<SubmoduleTaps> {
        if m >= self.n_submodules() {
            return Err(Error::param(format!("submodule {m} out of range")));
        }
        self.check_input(x)?;
        let empty = SubmoduleQuant::default();
        let quant = quant.unwrap_or(&empty);
        let block = &self.blocks[m / 2];
        let mut input = x.clone();
        tap(&mut hook, m, TapPoint::Input, &mut input);

        match ToyNet::submodule_kind(m) {
            SubmoduleKind::Attention => {
                let (mut normed, xhat, rstd) = layer_norm(&input, &block.ln1)?;
                tap(&mut hook, m, TapPoint::Normed, &mut normed);
                let a = quant.apply(QuantPoint::AttnIn, normed.clone())?;
                let mut q = matmul_nt(&a, &quant.weight(QuantPoint::Wq, &block.wq)?)?;
                tap(&mut hook, m, TapPoint::Q, &mut q);
                let mut k = matmul_nt(&a, &quant.weight(QuantPoint::Wk, &block.wk)?)?;
                tap(&mut hook, m, TapPoint::K, &mut k);
                let mut v = matmul_nt(&a, &quant.weight(QuantPoint::Wv, &block.wv)?)?;
                tap(&mut hook, m, TapPoint::V, &mut v);

                let dh = self.config.d_head();
                let scale = 1.0 / (dh as f64).sqrt();
                let mut probs = Vec::with_capacity(self.config.n_heads);
                let mut heads = Vec::with_capacity(self.config.n_heads);
                for h in 0..self.config.n_heads {
                    let (qh, kh, vh) = (q.slice_cols(h * dh, dh)?, k.slice_cols(h * dh, dh)?, v.slice_cols(h * dh, dh)?);
                    let mut p = matmul_nt(&qh, &kh)?.scale(scale);
                    softmax_rows(&mut p);
                    tap(&mut hook, m, TapPoint::Probs(h), &mut p);
                    let pq = quant.apply(QuantPoint::Probs, p.clone())?;
                    heads.push(matmul(&pq, &vh)?);
                    probs.push(p);
                }
                let mut ctx = Tensor::concat_cols(&heads)?;
                tap(&mut hook, m, TapPoint::Ctx, &mut ctx);
                let cq = quant.apply(QuantPoint::Ctx, ctx.clone())?;
                let mut branch = matmul_nt(&cq, &quant.weight(QuantPoint::Wo, &block.wo)?)?;
                tap(&mut hook, m, TapPoint::Branch, &mut branch);
                let mut output = input.add(&branch)?;
                tap(&mut hook, m, TapPoint::Output, &mut output);
                Ok(SubmoduleTaps::Attention(AttentionTaps {
                    input,
                    xhat,
                    rstd,
                    normed,
                    q,
                    k,
                    v,
                    probs,
                    ctx,
                    branch,
                    output,
                }))
            }
            SubmoduleKind::Mlp => {
                let (mut normed, xhat, rstd) = layer_norm(&input, &block.ln2)?;
                tap(&mut hook, m, TapPoint::Normed, &mut normed);
                let a = quant.apply(QuantPoint::MlpIn, normed.clone())?;
                let mut hidden_pre = matmul_nt(&a, &quant.weight(QuantPoint::W1, &block.w1)?)?.add_row_vector(&block.b1)?;
                tap(&mut hook, m, TapPoint::HiddenPre, &mut hidden_pre);
                let mut hidden = hidden_pre.map(gelu);
                tap(&mut hook, m, TapPoint::Hidden, &mut hidden);
                let hq = quant.apply(QuantPoint::Hidden, hidden.clone())?;
                let mut branch = matmul_nt(&hq, &quant.weight(QuantPoint::W2, &block.w2)?)?.add_row_vector(&block.b2)?;
                tap(&mut hook, m, TapPoint::Branch, &mut branch);
                let mut output = input.add(&branch)?;
                tap(&mut hook, m, TapPoint::Output, &mut output);
                Ok(SubmoduleTaps::Mlp(MlpTaps {
                    input,
                    xhat,
                    rstd,
                    normed,
                    hidden_pre,
                    hidden,
                    branch,
                    output,
                }))
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_from(0, x)
    }

    /// Continues the forward pass from the input of submodule `start`.
    pub fn forward_from(&self, start: usize, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for m in start..self.n_submodules() {
            h = self.run_submodule(m, &h, None, None)?.into_output();
        }
        Ok(h)
    }

    pub fn forward_with_taps(&self, x: &Tensor) -> Result<(Tensor, Vec<SubmoduleTaps>)> {
        let mut taps = Vec::with_capacity(self.n_submodules());
        let mut h = x.clone();
        for m in 0..self.n_submodules() {
            let t = self.run_submodule(m, &h, None, None)?;
            h = t.output().clone();
            taps.push(t);
        }
        Ok((h, taps))
    }

    pub fn forward_hooked(&self, x: &Tensor, hook: ForwardHook<'_>) -> Result<Tensor> {
        let mut h = x.clone();
        for m in 0..self.n_submodules() {
            h = self.run_submodule(m, &h, None, Some(&mut *hook))?.into_output();
        }
        Ok(h)
    }

    /// Residual stream after every submodule, in forward order.
    pub fn submodule_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, taps) = self.forward_with_taps(x)?;
        Ok(taps.into_iter().map(SubmoduleTaps::into_output).collect())
    }
}

impl TokenTaps for ToyNet {
    /// Block outputs (the stream after each MLP submodule).
    fn token_representations(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let outs = self.submodule_outputs(input)?;
        Ok(outs.into_iter().skip(1).step_by(2).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::toynet::ToyNetConfig;

    fn small() -> ToyNetConfig {
        ToyNetConfig {
            depth: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            seq_len: 6,
            outlier_channels: 2,
            outlier_scale: 8.0,
            seed: 1,
        }
    }

    #[test]
    fn zero_net_zero_input() {
        let net = ToyNet::zeroed(small()).unwrap();
        let y = net.forward(&Tensor::zeros(&[6, 16])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_and_layer_norm_stats() {
        let net = ToyNet::new(small()).unwrap();
        let x = Rng::seeded(2).normal(&[6, 16], 0.0, 3.0);
        let (_, taps) = net.forward_with_taps(&x).unwrap();
        for t in &taps {
            if let SubmoduleTaps::Attention(a) = t {
                for p in &a.probs {
                    for i in 0..p.rows() {
                        assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
                    }
                }
            }
            let n = t.normed();
            for i in 0..n.rows() {
                let row = n.row(i);
                let mean = row.iter().sum::<f64>() / 16.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn permutation_equivariant() {
        let net = ToyNet::new(small()).unwrap();
        let x = Rng::seeded(3).normal(&[6, 16], 0.0, 1.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let (y, yp) = (net.forward(&x).unwrap(), net.forward(&xp).unwrap());
        for (r, &i) in perm.iter().enumerate() {
            for (a, b) in yp.row(r).iter().zip(y.row(i)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let net = ToyNet::new(small()).unwrap();
        let x = Rng::seeded(4).normal(&[6, 16], 0.0, 1.0);
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert!(net.forward(&Tensor::zeros(&[5, 16])).is_err());
        let outs = net.submodule_outputs(&x).unwrap();
        assert_eq!(outs.len(), 4);
        assert_eq!(net.forward_from(2, &outs[1]).unwrap(), outs[3]);
        assert_eq!(net.token_representations(&x).unwrap().len(), 2);
    }
}
