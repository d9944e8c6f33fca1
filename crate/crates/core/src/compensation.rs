//! Low-rank residual compensation gated by tail relative error (TRE).
//!
//! For a quantized module with input `x`, full-precision output `y` and
//! quantized output `y_q`, the corrected output is `y_q + U·V·x + b`. The
//! residual map is fitted in closed form by (ridge) least squares, then
//! truncated to rank `r` by SVD. An adapter is only switched on when the
//! module's TRE exceeds a threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, solve_least_squares, top_k_indices, truncated_svd, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TreMode {
    /// Flatten the whole calibration batch into one vector.
    Pooled,
    /// Average the per-sample TRE values.
    PerSampleMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreConfig {
    /// Tail fraction in `(0, 1]`.
    pub rho: f64,
    /// Gate threshold; an adapter is active when TRE > tau.
    pub tau: f64,
    pub eps: f64,
    pub mode: TreMode,
}

impl Default for TreConfig {
    fn default() -> Self {
        Self {
            rho: 0.01,
            tau: 0.007,
            eps: 1e-12,
            mode: TreMode::Pooled,
        }
    }
}

impl TreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::param(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::param(format!("tau must be >= 0, got {}", self.tau)));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::param(format!("eps must be a small positive number, got {}", self.eps)));
        }
        Ok(())
    }

    /// Tail size `max(1, ⌊rho·n⌋)`.
    pub fn tail_size(&self, n: usize) -> usize {
        ((self.rho * n as f64).floor() as usize).clamp(1, n.max(1))
    }
}

/// Tail relative error over the flattened tensors: squared error on the
/// `k` largest-magnitude entries of `y` divided by their energy plus `eps`.
pub fn tre(y: &Tensor, y_q: &Tensor, cfg: &TreConfig) -> Result<f64> {
    y.same_shape(y_q, "tre")?;
    cfg.validate()?;
    let k = cfg.tail_size(y.len());
    let tail = top_k_indices(y.data(), k)?;
    let (yd, qd) = (y.data(), y_q.data());
    let (mut err, mut energy) = (0.0, 0.0);
    for &i in &tail {
        let d = yd[i] - qd[i];
        err += d * d;
        energy += yd[i] * yd[i];
    }
    Ok(err / (energy + cfg.eps))
}

/// TRE for a batch stacked as `samples` equal row blocks, honouring `cfg.mode`.
pub fn tre_batch(y: &Tensor, y_q: &Tensor, samples: usize, cfg: &TreConfig) -> Result<f64> {
    match cfg.mode {
        TreMode::Pooled => tre(y, y_q, cfg),
        TreMode::PerSampleMean => {
            y.same_shape(y_q, "tre_batch")?;
            let rows = y.rows();
            if samples == 0 || rows % samples != 0 {
                return Err(Error::param(format!("{rows} rows do not split into {samples} samples")));
            }
            let per = rows / samples;
            let mut total = 0.0;
            for s in 0..samples {
                total += tre(&y.slice_rows(s * per, per)?, &y_q.slice_rows(s * per, per)?, cfg)?;
            }
            Ok(total / samples as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    /// `[d_out × r]`, singular values folded in.
    pub u: Tensor,
    /// `[r × d_in]`.
    pub v: Tensor,
    /// `[d_out]`.
    pub b: Tensor,
    pub rank: usize,
    pub active: bool,
    pub tre_at_fit: f64,
    /// Whether `u`, `v`, `b` hold a fitted solution (false when the fit was skipped).
    pub fitted: bool,
}

impl Adapter {
    pub fn inactive(d_in: usize, d_out: usize, rank: usize, tre_at_fit: f64) -> Self {
        Self {
            u: Tensor::zeros(&[d_out, rank]),
            v: Tensor::zeros(&[rank, d_in]),
            b: Tensor::zeros(&[d_out]),
            rank,
            active: false,
            tre_at_fit,
            fitted: false,
        }
    }

    pub fn d_in(&self) -> usize {
        self.v.cols()
    }

    pub fn d_out(&self) -> usize {
        self.u.rows()
    }

    /// Dense `U·V`, `[d_out × d_in]`.
    pub fn product(&self) -> Result<Tensor> {
        matmul(&self.u, &self.v)
    }

    /// Re-applies the gate at a new threshold. Activating an adapter whose
    /// fit was skipped is an error.
    pub fn regate(&mut self, tau: f64) -> Result<()> {
        let on = self.tre_at_fit > tau;
        if on && !self.fitted {
            return Err(Error::param(format!(
                "adapter was never fitted (TRE {} gated out); refit to activate at tau={tau}",
                self.tre_at_fit
            )));
        }
        self.active = on;
        Ok(())
    }
}

/// Closed-form `(W, b) = argmin ‖Y − (Y_q + X·Wᵀ + 1·bᵀ)‖² + λ‖W‖²`.
///
/// The bias is unpenalized, which is equivalent to solving the ridge problem
/// on column-centred data and recovering `b` from the means.
pub fn solve_compensation(x: &Tensor, y_fp: &Tensor, y_q: &Tensor, lambda: f64) -> Result<(Tensor, Tensor)> {
    let (s, d_in) = x.dims2()?;
    y_fp.same_shape(y_q, "solve_compensation")?;
    let (s2, d_out) = y_fp.dims2()?;
    if s != s2 {
        return Err(Error::ShapeMismatch {
            op: "solve_compensation",
            left: x.shape().to_vec(),
            right: y_fp.shape().to_vec(),
        });
    }
    let residual = y_fp.sub(y_q)?;
    let x_mean = column_means(x);
    let r_mean = column_means(&residual);
    let xc = x.add_row_vector(&x_mean.iter().map(|m| -m).collect::<Vec<_>>())?;
    let rc = residual.add_row_vector(&r_mean.iter().map(|m| -m).collect::<Vec<_>>())?;
    let wt = solve_least_squares(&xc, &rc, lambda)?; // [d_in × d_out]
    let w = wt.transpose()?;
    let mut b = r_mean;
    for (o, bo) in b.iter_mut().enumerate() {
        for i in 0..d_in {
            *bo -= x_mean[i] * wt.get(i, o);
        }
    }
    debug_assert_eq!(b.len(), d_out);
    Ok((w, Tensor::from_vec(b)))
}

fn column_means(t: &Tensor) -> Vec<f64> {
    let (r, c) = (t.rows(), t.cols());
    let mut m = vec![0.0; c];
    for i in 0..r {
        for (acc, v) in m.iter_mut().zip(t.row(i)) {
            *acc += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= r as f64);
    m
}

/// Options for [`fit_adapter`] beyond the TRE settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub rank: usize,
    pub lambda: f64,
    /// Fit factors even when the gate stays closed (the adapter is still inactive).
    pub fit_always: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            rank: 16,
            lambda: 1e-6,
            fit_always: false,
        }
    }
}

/// Fits the gated adapter for one module from its calibration batch.
/// `samples` is the number of row blocks, used by per-sample TRE.
pub fn fit_adapter(
    x_cal: &Tensor,
    y_fp: &Tensor,
    y_q: &Tensor,
    samples: usize,
    opts: &FitOptions,
    cfg: &TreConfig,
) -> Result<Adapter> {
    let (s, d_in) = x_cal.dims2()?;
    let (s2, d_out) = y_fp.dims2()?;
    if s == 0 || s != s2 {
        return Err(Error::ShapeMismatch {
            op: "fit_adapter",
            left: x_cal.shape().to_vec(),
            right: y_fp.shape().to_vec(),
        });
    }
    if opts.rank == 0 || opts.rank > d_in.min(d_out) {
        return Err(Error::param(format!(
            "adapter rank {} out of range 1..={}",
            opts.rank,
            d_in.min(d_out)
        )));
    }
    let score = tre_batch(y_fp, y_q, samples, cfg)?;
    let active = score > cfg.tau;
    if !active && !opts.fit_always {
        return Ok(Adapter::inactive(d_in, d_out, opts.rank, score));
    }

    let (w, b) = solve_compensation(x_cal, y_fp, y_q, opts.lambda)?;
    let svd = truncated_svd(&w, opts.rank)?;
    let mut u = svd.u;
    for i in 0..u.rows() {
        for (v, s) in u.row_mut(i).iter_mut().zip(&svd.s) {
            *v *= s;
        }
    }
    Ok(Adapter {
        u,
        v: svd.v,
        b,
        rank: opts.rank,
        active,
        tre_at_fit: score,
        fitted: true,
    })
}

/// `y_q + x·(U·V)ᵀ + b` for an active adapter, `y_q` otherwise.
pub fn apply_adapter(a: &Adapter, x: &Tensor, y_q: &Tensor) -> Result<Tensor> {
    let (rows, d_in) = x.dims2()?;
    let (rows2, d_out) = y_q.dims2()?;
    if rows != rows2 || d_in != a.d_in() || d_out != a.d_out() {
        return Err(Error::ShapeMismatch {
            op: "apply_adapter",
            left: x.shape().to_vec(),
            right: y_q.shape().to_vec(),
        });
    }
    if !a.active {
        return Ok(y_q.clone());
    }
    let low = matmul_nt(x, &a.v)?; // [rows × r]
    let corr = matmul_nt(&low, &a.u)?; // [rows × d_out]
    y_q.add(&corr)?.add_row_vector(a.b.data())
}

/// Storage for the adapter's factors at 32-bit precision.
pub fn adapter_param_bytes(a: &Adapter) -> usize {
    if !a.active {
        return 0;
    }
    4 * (a.d_out() * a.rank + a.rank * a.d_in() + a.d_out())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{mse, Rng};

    #[test]
    fn tre_examples() {
        let cfg = TreConfig::default();
        let mut y = vec![0.5; 100];
        y[0] = 10.0;
        let y = Tensor::from_vec(y);
        assert_eq!(tre(&y, &y, &cfg).unwrap(), 0.0);

        let mut q = y.clone();
        q.data_mut()[0] = 9.0;
        let v = tre(&y, &q, &cfg).unwrap();
        assert!((v - 0.01).abs() < 1e-12);

        let mut rng = Rng::seeded(1);
        let a = rng.normal(&[300], 0.0, 1.0);
        let b = a.add(&rng.normal(&[300], 0.0, 0.1)).unwrap();
        let base = tre(&a, &b, &cfg).unwrap();
        for c in [3.0, -0.5, 10.0] {
            let scaled = tre(&a.scale(c), &b.scale(c), &cfg).unwrap();
            assert!((scaled - base).abs() < 1e-9 * base.max(1.0));
        }
        assert!(tre(&a, &Tensor::from_vec(vec![1.0]), &cfg).is_err());
    }

    #[test]
    fn tail_size_clamps_to_one() {
        let cfg = TreConfig::default();
        assert_eq!(cfg.tail_size(10), 1);
        assert_eq!(cfg.tail_size(100), 1);
        assert_eq!(cfg.tail_size(250), 2);
    }

    #[test]
    fn closed_gate_gives_zero_adapter() {
        let mut rng = Rng::seeded(2);
        let x = rng.normal(&[20, 4], 0.0, 1.0);
        let y = rng.normal(&[20, 3], 0.0, 1.0);
        let a = fit_adapter(&x, &y, &y, 1, &FitOptions { rank: 2, ..Default::default() }, &TreConfig::default())
            .unwrap();
        assert!(!a.active && !a.fitted);
        assert_eq!(a.tre_at_fit, 0.0);
        assert!(a.u.data().iter().chain(a.v.data()).chain(a.b.data()).all(|&v| v == 0.0));
        assert_eq!(adapter_param_bytes(&a), 0);
        assert_eq!(apply_adapter(&a, &x, &y).unwrap(), y);
    }

    #[test]
    fn recovers_exact_low_rank_residual() {
        let mut rng = Rng::seeded(3);
        let x = rng.normal(&[60, 6], 0.0, 1.0);
        let w0 = matmul(&rng.normal(&[5, 2], 0.0, 1.0), &rng.normal(&[2, 6], 0.0, 1.0)).unwrap();
        let y_q = rng.normal(&[60, 5], 0.0, 1.0);
        let y = y_q.add(&matmul_nt(&x, &w0).unwrap()).unwrap();
        let opts = FitOptions { rank: 2, lambda: 0.0, fit_always: false };
        let cfg = TreConfig { tau: 0.0, ..Default::default() };
        let a = fit_adapter(&x, &y, &y_q, 1, &opts, &cfg).unwrap();
        assert!(a.active);
        let diff = a.product().unwrap().sub(&w0).unwrap().max_abs();
        assert!(diff < 1e-6, "max |UV - W0| = {diff}");
        assert!(a.b.max_abs() < 1e-8);
    }

    #[test]
    fn full_rank_never_hurts_and_matches_regression() {
        let mut rng = Rng::seeded(4);
        let x = rng.normal(&[40, 4], 0.0, 1.0);
        let y = rng.normal(&[40, 4], 0.0, 1.0);
        let y_q = y.add(&rng.normal(&[40, 4], 0.3, 0.5)).unwrap();
        let opts = FitOptions { rank: 4, lambda: 0.0, fit_always: false };
        let cfg = TreConfig { tau: 0.0, ..Default::default() };
        let a = fit_adapter(&x, &y, &y_q, 1, &opts, &cfg).unwrap();
        let comp = apply_adapter(&a, &x, &y_q).unwrap();
        assert!(mse(&y, &comp).unwrap() <= mse(&y, &y_q).unwrap());

        let (w, b) = solve_compensation(&x, &y, &y_q, 0.0).unwrap();
        let fitted = y_q.add(&matmul_nt(&x, &w).unwrap()).unwrap().add_row_vector(b.data()).unwrap();
        assert!(fitted.sub(&comp).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn truncation_is_monotone() {
        let mut rng = Rng::seeded(5);
        let x = rng.normal(&[50, 6], 0.0, 1.0);
        let y = rng.normal(&[50, 6], 0.0, 1.0);
        let y_q = rng.normal(&[50, 6], 0.0, 1.0);
        let (w, _) = solve_compensation(&x, &y, &y_q, 1e-6).unwrap();
        let cfg = TreConfig { tau: 0.0, ..Default::default() };
        let mut prev = f64::INFINITY;
        for r in 1..=6 {
            let a = fit_adapter(&x, &y, &y_q, 1, &FitOptions { rank: r, ..Default::default() }, &cfg).unwrap();
            let err = w.sub(&a.product().unwrap()).unwrap().frobenius_norm();
            assert!(err <= prev + 1e-12);
            prev = err;
        }
        assert!(fit_adapter(&x, &y, &y_q, 1, &FitOptions { rank: 7, ..Default::default() }, &cfg).is_err());
    }

    #[test]
    fn apply_scalar_case() {
        let a = Adapter {
            u: Tensor::from_rows(&[vec![2.0]]).unwrap(),
            v: Tensor::from_rows(&[vec![1.0]]).unwrap(),
            b: Tensor::from_vec(vec![1.0]),
            rank: 1,
            active: true,
            tre_at_fit: 1.0,
            fitted: true,
        };
        let x = Tensor::from_rows(&[vec![3.0]]).unwrap();
        let yq = Tensor::from_rows(&[vec![0.0]]).unwrap();
        assert_eq!(apply_adapter(&a, &x, &yq).unwrap().data(), &[7.0]);

        let mut zero = Adapter::inactive(1, 1, 1, 1.0);
        zero.active = true;
        assert_eq!(apply_adapter(&zero, &x, &yq).unwrap(), yq);
        assert!(apply_adapter(&a, &Tensor::zeros(&[1, 2]), &yq).is_err());
    }

    #[test]
    fn param_bytes() {
        let mut a = Adapter::inactive(64, 64, 16, 1.0);
        assert_eq!(adapter_param_bytes(&a), 0);
        a.active = true;
        assert_eq!(adapter_param_bytes(&a), 8448);
        let bytes: Vec<usize> = (1..=8)
            .map(|r| {
                let mut a = Adapter::inactive(64, 64, r, 1.0);
                a.active = true;
                adapter_param_bytes(&a)
            })
            .collect();
        assert!(bytes.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn regate_requires_fit() {
        let mut a = Adapter::inactive(2, 2, 1, 0.5);
        assert!(a.regate(1.0).is_ok());
        assert!(a.regate(0.1).is_err());
    }
}
