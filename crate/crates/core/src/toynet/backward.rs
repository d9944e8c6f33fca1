use super::forward::{AttentionTaps, MlpTaps, SubmoduleTaps};
use super::{gelu_grad, LayerNormParams, ToyNet};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Tensor};

/// Loss gradients at the attention taps.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub input: Tensor,
    pub normed: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub probs: Vec<Tensor>,
    pub ctx: Tensor,
    pub branch: Tensor,
    pub output: Tensor,
}

/// Loss gradients at the MLP taps.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub input: Tensor,
    pub normed: Tensor,
    pub hidden_pre: Tensor,
    pub hidden: Tensor,
    pub branch: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SubmoduleGrads {
    Attention(AttentionGrads),
    Mlp(MlpGrads),
}

impl SubmoduleGrads {
    pub fn input(&self) -> &Tensor {
        match self {
            SubmoduleGrads::Attention(g) => &g.input,
            SubmoduleGrads::Mlp(g) => &g.input,
        }
    }

    pub fn branch(&self) -> &Tensor {
        match self {
            SubmoduleGrads::Attention(g) => &g.branch,
            SubmoduleGrads::Mlp(g) => &g.branch,
        }
    }
}

fn layer_norm_backward(g_a: &Tensor, xhat: &Tensor, rstd: &[f64], p: &LayerNormParams) -> Tensor {
    let (rows, cols) = (g_a.rows(), g_a.cols());
    let c = cols as f64;
    let mut g_x = Tensor::zeros(&[rows, cols]);
    for i in 0..rows {
        if rstd[i] == 0.0 {
            continue;
        }
        let gh: Vec<f64> = g_a.row(i).iter().zip(&p.gamma).map(|(g, w)| g * w).collect();
        let xh = xhat.row(i);
        let m1 = gh.iter().sum::<f64>() / c;
        let m2 = gh.iter().zip(xh).map(|(g, h)| g * h).sum::<f64>() / c;
        let out = g_x.row_mut(i);
        for j in 0..cols {
            out[j] = rstd[i] * (gh[j] - m1 - xh[j] * m2);
        }
    }
    g_x
}

impl ToyNet {
    fn attention_backward(&self, m: usize, t: &AttentionTaps, g_out: &Tensor) -> Result<AttentionGrads> {
        let block = &self.blocks[m / 2];
        let dh = self.config.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let g_ctx = matmul(g_out, &block.wo)?;
        let (mut gq, mut gk, mut gv) = (Vec::new(), Vec::new(), Vec::new());
        let mut g_probs = Vec::with_capacity(self.config.n_heads);
        for (h, p) in t.probs.iter().enumerate() {
            let g_ch = g_ctx.slice_cols(h * dh, dh)?;
            let (qh, kh, vh) = (t.q.slice_cols(h * dh, dh)?, t.k.slice_cols(h * dh, dh)?, t.v.slice_cols(h * dh, dh)?);
            let g_p = matmul_nt(&g_ch, &vh)?;
            gv.push(matmul_tn(p, &g_ch)?);
            let mut g_s = Tensor::zeros(p.shape());
            for i in 0..p.rows() {
                let (pr, gr) = (p.row(i), g_p.row(i));
                let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                let out = g_s.row_mut(i);
                for j in 0..pr.len() {
                    out[j] = pr[j] * (gr[j] - inner);
                }
            }
            gq.push(matmul(&g_s, &kh)?.scale(scale));
            gk.push(matmul_tn(&g_s, &qh)?.scale(scale));
            g_probs.push(g_p);
        }
        let (q, k, v) = (Tensor::concat_cols(&gq)?, Tensor::concat_cols(&gk)?, Tensor::concat_cols(&gv)?);
        let normed = matmul(&q, &block.wq)?.add(&matmul(&k, &block.wk)?)?.add(&matmul(&v, &block.wv)?)?;
        let input = g_out.add(&layer_norm_backward(&normed, &t.xhat, &t.rstd, &block.ln1))?;
        Ok(AttentionGrads {
            input,
            normed,
            q,
            k,
            v,
            probs: g_probs,
            ctx: g_ctx,
            branch: g_out.clone(),
            output: g_out.clone(),
        })
    }

    fn mlp_backward(&self, m: usize, t: &MlpTaps, g_out: &Tensor) -> Result<MlpGrads> {
        let block = &self.blocks[m / 2];
        let hidden = matmul(g_out, &block.w2)?;
        let hidden_pre = hidden.zip_map(&t.hidden_pre, |g, z| g * gelu_grad(z))?;
        let normed = matmul(&hidden_pre, &block.w1)?;
        let input = g_out.add(&layer_norm_backward(&normed, &t.xhat, &t.rstd, &block.ln2))?;
        Ok(MlpGrads {
            input,
            normed,
            hidden_pre,
            hidden,
            branch: g_out.clone(),
            output: g_out.clone(),
        })
    }
}

/// Gradients of a scalar loss with respect to every tapped activation of the
/// full-precision network. With `g_final = None` the loss is `½‖f(x)‖²`;
/// otherwise `g_final` is the gradient at the network output.
pub fn backward_wrt_activations(net: &ToyNet, x: &Tensor, g_final: Option<&Tensor>) -> Result<Vec<SubmoduleGrads>> {
    let (out, taps) = net.forward_with_taps(x)?;
    let mut g = match g_final {
        Some(g) => {
            out.same_shape(g, "backward")?;
            g.clone()
        }
        None => out,
    };
    let mut grads = Vec::with_capacity(taps.len());
    for (m, t) in taps.iter().enumerate().rev() {
        let sg = match t {
            SubmoduleTaps::Attention(a) => SubmoduleGrads::Attention(net.attention_backward(m, a, &g)?),
            SubmoduleTaps::Mlp(p) => SubmoduleGrads::Mlp(net.mlp_backward(m, p, &g)?),
        };
        g = sg.input().clone();
        if !g.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at submodule {m}")));
        }
        grads.push(sg);
    }
    grads.reverse();
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::toynet::{TapPoint, ToyNetConfig};

    fn cfg(seed: u64, depth: usize) -> ToyNetConfig {
        ToyNetConfig {
            depth,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            seq_len: 5,
            outlier_channels: 1,
            outlier_scale: 2.0,
            seed,
        }
    }

    fn loss_with(net: &ToyNet, x: &Tensor, m: usize, p: TapPoint, idx: usize, delta: f64) -> f64 {
        let mut hook = |mm: usize, pp: TapPoint, t: &mut Tensor| {
            if mm == m && pp == p {
                t.data_mut()[idx] += delta;
            }
        };
        0.5 * net.forward_hooked(x, &mut hook).unwrap().sum_squares()
    }

    fn grad_at(g: &SubmoduleGrads, p: TapPoint) -> Tensor {
        match (g, p) {
            (SubmoduleGrads::Attention(a), TapPoint::Input) => a.input.clone(),
            (SubmoduleGrads::Attention(a), TapPoint::Normed) => a.normed.clone(),
            (SubmoduleGrads::Attention(a), TapPoint::Q) => a.q.clone(),
            (SubmoduleGrads::Attention(a), TapPoint::K) => a.k.clone(),
            (SubmoduleGrads::Attention(a), TapPoint::V) => a.v.clone(),
            (SubmoduleGrads::Attention(a), TapPoint::Probs(h)) => a.probs[h].clone(),
            (SubmoduleGrads::Attention(a), TapPoint::Ctx) => a.ctx.clone(),
            (SubmoduleGrads::Attention(a), TapPoint::Branch) => a.branch.clone(),
            (SubmoduleGrads::Mlp(g), TapPoint::Input) => g.input.clone(),
            (SubmoduleGrads::Mlp(g), TapPoint::Normed) => g.normed.clone(),
            (SubmoduleGrads::Mlp(g), TapPoint::HiddenPre) => g.hidden_pre.clone(),
            (SubmoduleGrads::Mlp(g), TapPoint::Hidden) => g.hidden.clone(),
            (SubmoduleGrads::Mlp(g), TapPoint::Branch) => g.branch.clone(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn matches_finite_differences() {
        let h = 1e-4;
        for seed in 0..20u64 {
            let depth = 1 + (seed as usize % 2);
            let net = ToyNet::new(cfg(seed, depth)).unwrap();
            let mut rng = Rng::seeded(100 + seed);
            let x = rng.normal(&[5, 8], 0.0, 1.0);
            let grads = backward_wrt_activations(&net, &x, None).unwrap();
            for (m, g) in grads.iter().enumerate() {
                let points: Vec<TapPoint> = match g {
                    SubmoduleGrads::Attention(_) => vec![
                        TapPoint::Input,
                        TapPoint::Normed,
                        TapPoint::Q,
                        TapPoint::K,
                        TapPoint::V,
                        TapPoint::Probs(0),
                        TapPoint::Probs(1),
                        TapPoint::Ctx,
                        TapPoint::Branch,
                    ],
                    SubmoduleGrads::Mlp(_) => vec![
                        TapPoint::Input,
                        TapPoint::Normed,
                        TapPoint::HiddenPre,
                        TapPoint::Hidden,
                        TapPoint::Branch,
                    ],
                };
                for p in points {
                    let an = grad_at(g, p);
                    for _ in 0..3 {
                        let idx = rng.index(an.len());
                        let fd = (loss_with(&net, &x, m, p, idx, h) - loss_with(&net, &x, m, p, idx, -h)) / (2.0 * h);
                        let a = an.data()[idx];
                        let scale = a.abs().max(fd.abs()).max(1e-3);
                        assert!(
                            (fd - a).abs() <= 1e-4 * scale,
                            "seed {seed} module {m} {p:?}[{idx}]: analytic {a} vs numeric {fd}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn upstream_gradient_shape_checked() {
        let net = ToyNet::new(cfg(0, 1)).unwrap();
        let x = Rng::seeded(1).normal(&[5, 8], 0.0, 1.0);
        assert!(backward_wrt_activations(&net, &x, Some(&Tensor::zeros(&[5, 7]))).is_err());
        let g = backward_wrt_activations(&net, &x, Some(&Tensor::zeros(&[5, 8]))).unwrap();
        assert!(g[0].input().data().iter().all(|&v| v == 0.0));
    }
}
