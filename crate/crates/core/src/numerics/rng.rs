use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Seeded deterministic generator (ChaCha8). The same seed yields the same
/// stream on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream keyed by `label`, so adding draws to one
    /// consumer does not shift another's.
    pub fn derive(seed: u64, label: &str) -> Self {
        let mut h = fnv::FnvHasher::default();
        std::hash::Hasher::write(&mut h, label.as_bytes());
        let tag = std::hash::Hasher::finish(&h);
        Self::seeded(seed ^ tag.rotate_left(17))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn normal(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor {
        self.try_normal(shape, mean, std).expect("normal: invalid parameters")
    }

    pub fn try_normal(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
        if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::param(format!("normal needs finite mean and std >= 0, got {mean}, {std}")));
        }
        let dist = Normal::new(mean, std)
            .map_err(|e| Error::param(format!("normal(mean={mean}, std={std}): {e}")))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.inner)).collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Student-t draws scaled by `scale`. Requires `df > 2` so the variance exists.
    pub fn student_t(&mut self, shape: &[usize], df: f64, scale: f64) -> Result<Tensor> {
        if !(df > 2.0) || !df.is_finite() {
            return Err(Error::param(format!(
                "student-t degrees of freedom must be > 2, got {df}"
            )));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::param(format!("student-t scale must be > 0, got {scale}")));
        }
        let dist = StudentT::new(df).map_err(|e| Error::param(format!("student-t: {e}")))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| scale * dist.sample(&mut self.inner)).collect();
        Tensor::new(shape.to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kurtosis(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        m4 / (m2 * m2)
    }

    #[test]
    fn same_seed_same_stream() {
        let a = Rng::seeded(42).normal(&[4, 5], 0.0, 1.0);
        let b = Rng::seeded(42).normal(&[4, 5], 0.0, 1.0);
        assert_eq!(a, b);
        let c = Rng::seeded(42).student_t(&[10], 5.0, 1.0).unwrap();
        let d = Rng::seeded(42).student_t(&[10], 5.0, 1.0).unwrap();
        assert_eq!(c, d);
        assert_ne!(Rng::derive(1, "a").uniform(), Rng::derive(1, "b").uniform());
    }

    #[test]
    fn student_t_has_heavy_tails() {
        let t = Rng::seeded(7).student_t(&[100_000], 3.0, 1.0).unwrap();
        assert!(kurtosis(t.data()) > 3.0);
    }

    #[test]
    fn student_t_rejects_low_df() {
        assert!(Rng::seeded(0).student_t(&[3], 2.0, 1.0).is_err());
        assert!(Rng::seeded(0).student_t(&[3], 1.5, 1.0).is_err());
        assert!(Rng::seeded(0).try_normal(&[3], 0.0, -1.0).is_err());
    }
}
