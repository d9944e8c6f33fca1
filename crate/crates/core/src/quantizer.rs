//! Uniform and twin-uniform fake quantization.
//!
//! A value `x` in a region with interval `Δ` maps to
//! `clip(round(x / Δ), q_min, q_max) · Δ`, where rounding is half-to-even.
//! The twin variant splits the input into two regions, each with its own `Δ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mse, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitWidthSpec {
    pub bits: u32,
    pub signed: bool,
}

impl BitWidthSpec {
    pub fn new(bits: u32, signed: bool) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::param(format!("bit width must be in [2,16], got {bits}")));
        }
        Ok(Self { bits, signed })
    }

    pub fn signed(bits: u32) -> Result<Self> {
        Self::new(bits, true)
    }

    pub fn unsigned(bits: u32) -> Result<Self> {
        Self::new(bits, false)
    }

    pub fn q_min(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.bits - 1))
        } else {
            0
        }
    }

    pub fn q_max(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub delta: f64,
    pub bitwidth: BitWidthSpec,
}

impl QuantParams {
    pub fn new(delta: f64, bitwidth: BitWidthSpec) -> Result<Self> {
        check_delta(delta)?;
        Ok(Self { delta, bitwidth })
    }

    #[inline]
    pub fn quantize_value(&self, x: f64) -> f64 {
        quantize_scalar(x, self.delta, self.bitwidth)
    }
}

/// How the twin quantizer splits values between its two regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "threshold")]
pub enum Partition {
    /// `x < 0` in R1, `x >= 0` in R2.
    BySign,
    /// `|x| <= t` in R1, `|x| > t` in R2.
    ByThreshold(f64),
}

impl Partition {
    /// `true` when `x` belongs to region R1.
    #[inline]
    pub fn in_r1(&self, x: f64) -> bool {
        match *self {
            Partition::BySign => x < 0.0,
            Partition::ByThreshold(t) => x.abs() <= t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwinQuantParams {
    pub delta_r1: f64,
    pub delta_r2: f64,
    pub bitwidth: BitWidthSpec,
    pub partition: Partition,
}

impl TwinQuantParams {
    pub fn new(delta_r1: f64, delta_r2: f64, bitwidth: BitWidthSpec, partition: Partition) -> Result<Self> {
        check_delta(delta_r1)?;
        check_delta(delta_r2)?;
        if let Partition::ByThreshold(t) = partition {
            if !t.is_finite() {
                return Err(Error::param("twin threshold must be finite"));
            }
        }
        Ok(Self {
            delta_r1,
            delta_r2,
            bitwidth,
            partition,
        })
    }

    #[inline]
    pub fn quantize_value(&self, x: f64) -> f64 {
        let delta = if self.partition.in_r1(x) {
            self.delta_r1
        } else {
            self.delta_r2
        };
        quantize_scalar(x, delta, self.bitwidth)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!(
            "quantization interval must be positive and finite, got {delta}"
        )))
    }
}

#[inline]
fn quantize_scalar(x: f64, delta: f64, bw: BitWidthSpec) -> f64 {
    let q = (x / delta)
        .round_ties_even()
        .clamp(bw.q_min() as f64, bw.q_max() as f64);
    q * delta
}

pub fn quantize_uniform(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    check_delta(p.delta)?;
    x.ensure_finite("quantize_uniform input")?;
    Ok(x.map(|v| p.quantize_value(v)))
}

pub fn quantize_twin(x: &Tensor, p: &TwinQuantParams) -> Result<Tensor> {
    check_delta(p.delta_r1)?;
    check_delta(p.delta_r2)?;
    x.ensure_finite("quantize_twin input")?;
    Ok(x.map(|v| p.quantize_value(v)))
}

/// Mean squared quantization error.
pub fn quant_error(x: &Tensor, xq: &Tensor) -> Result<f64> {
    mse(x, xq)
}

/// Either flavour of quantizer, as attached to one quantization point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Quantizer {
    Uniform(QuantParams),
    Twin(TwinQuantParams),
}

impl Quantizer {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Quantizer::Uniform(p) => quantize_uniform(x, p),
            Quantizer::Twin(p) => quantize_twin(x, p),
        }
    }

    pub fn bitwidth(&self) -> BitWidthSpec {
        match self {
            Quantizer::Uniform(p) => p.bitwidth,
            Quantizer::Twin(p) => p.bitwidth,
        }
    }

    /// Intervals in region order (one for uniform, two for twin).
    pub fn deltas(&self) -> Vec<f64> {
        match self {
            Quantizer::Uniform(p) => vec![p.delta],
            Quantizer::Twin(p) => vec![p.delta_r1, p.delta_r2],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s3() -> BitWidthSpec {
        BitWidthSpec::signed(3).unwrap()
    }

    #[test]
    fn ranges() {
        assert_eq!((s3().q_min(), s3().q_max()), (-4, 3));
        let u = BitWidthSpec::unsigned(4).unwrap();
        assert_eq!((u.q_min(), u.q_max()), (0, 15));
        assert!(BitWidthSpec::signed(1).is_err());
        assert!(BitWidthSpec::signed(17).is_err());
    }

    #[test]
    fn uniform_examples() {
        let p = QuantParams::new(0.5, s3()).unwrap();
        let x = Tensor::from_vec(vec![0.4, -0.6, 0.0, 100.0, -100.0]);
        let q = quantize_uniform(&x, &p).unwrap();
        assert_eq!(q.data(), &[0.5, -0.5, 0.0, 1.5, -2.0]);
    }

    #[test]
    fn ties_round_to_even() {
        let p = QuantParams::new(1.0, BitWidthSpec::signed(8).unwrap()).unwrap();
        let q = quantize_uniform(&Tensor::from_vec(vec![0.5, 1.5, 2.5, -0.5]), &p).unwrap();
        assert_eq!(q.data(), &[0.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn uniform_rejects_non_finite() {
        let p = QuantParams::new(0.5, s3()).unwrap();
        assert!(quantize_uniform(&Tensor::from_vec(vec![f64::NAN]), &p).is_err());
        assert!(QuantParams::new(0.0, s3()).is_err());
        assert!(QuantParams::new(f64::INFINITY, s3()).is_err());
    }

    #[test]
    fn twin_examples() {
        let bw = BitWidthSpec::signed(4).unwrap();
        let p = TwinQuantParams::new(0.2, 0.5, bw, Partition::BySign).unwrap();
        let q = quantize_twin(&Tensor::from_vec(vec![-0.6, 0.6]), &p).unwrap();
        assert!((q.data()[0] + 0.6).abs() < 1e-12);
        assert_eq!(q.data()[1], 0.5);

        // Equal intervals degenerate to the uniform quantizer.
        let x = Tensor::from_vec(vec![-1.3, -0.2, 0.0, 0.7, 2.9]);
        let twin = TwinQuantParams::new(0.3, 0.3, bw, Partition::ByThreshold(0.5)).unwrap();
        let uni = QuantParams::new(0.3, bw).unwrap();
        assert_eq!(quantize_twin(&x, &twin).unwrap(), quantize_uniform(&x, &uni).unwrap());

        // All-nonnegative input under by-sign uses the R2 interval throughout.
        let pos = Tensor::from_vec(vec![0.0, 0.3, 0.9]);
        let r2 = QuantParams::new(0.5, bw).unwrap();
        assert_eq!(quantize_twin(&pos, &p).unwrap(), quantize_uniform(&pos, &r2).unwrap());
    }

    #[test]
    fn quant_error_examples() {
        let x = Tensor::from_vec(vec![1.0, 3.0]);
        assert_eq!(quant_error(&x, &x).unwrap(), 0.0);
        assert_eq!(quant_error(&x, &Tensor::from_vec(vec![0.0, 3.0])).unwrap(), 0.5);
        assert!(quant_error(&x, &Tensor::from_vec(vec![0.0])).is_err());
    }

    proptest! {
        #[test]
        fn idempotent_bounded_on_grid(
            x in -50.0f64..50.0,
            delta in 1e-3f64..2.0,
            bits in 2u32..=16,
            signed in any::<bool>(),
        ) {
            let bw = BitWidthSpec::new(bits, signed).unwrap();
            let p = QuantParams::new(delta, bw).unwrap();
            let q = p.quantize_value(x);
            prop_assert_eq!(p.quantize_value(q), q);
            let k = q / delta;
            prop_assert!((k - k.round()).abs() < 1e-9);
            prop_assert!(k.round() >= bw.q_min() as f64 && k.round() <= bw.q_max() as f64);
            if x >= delta * bw.q_min() as f64 && x <= delta * bw.q_max() as f64 {
                prop_assert!((x - q).abs() <= delta / 2.0 + 1e-12);
            }
        }

        #[test]
        fn monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, delta in 1e-2f64..1.0) {
            let p = QuantParams::new(delta, BitWidthSpec::signed(4).unwrap()).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(p.quantize_value(lo) <= p.quantize_value(hi));
        }
    }
}
