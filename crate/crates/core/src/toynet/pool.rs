use super::ToyNetConfig;
use crate::calibration::{CalibrationPool, MomentExtractor};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Degrees of freedom of the student-t noise planted in outlier samples.
pub const OUTLIER_DF: f64 = 3.0;
/// Scale of the planted noise relative to the unit-variance clean signal.
pub const OUTLIER_NOISE_SCALE: f64 = 20.0;

/// `m` synthetic `[seq_len × d_model]` inputs. Clean samples are standard
/// Gaussian; `round(m · outlier_fraction)` of them, chosen at random, also
/// carry student-t noise on a random set of `max(1, outlier_channels)`
/// channels. Ids are `sample-00`, `sample-01`, ...
pub fn gen_calibration_pool(cfg: &ToyNetConfig, m: usize, outlier_fraction: f64, rng: &mut Rng) -> Result<CalibrationPool> {
    cfg.validate()?;
    if m < 2 {
        return Err(Error::param(format!("pool size must be at least 2, got {m}")));
    }
    if !(0.0..=1.0).contains(&outlier_fraction) {
        return Err(Error::param(format!("outlier_fraction {outlier_fraction} outside [0, 1]")));
    }
    let (seq, d) = (cfg.seq_len, cfg.d_model);
    let n_out = (m as f64 * outlier_fraction).round() as usize;

    let mut order: Vec<usize> = (0..m).collect();
    rng.shuffle(&mut order);
    let planted = &order[..n_out];
    let mut channels: Vec<usize> = (0..d).collect();
    rng.shuffle(&mut channels);
    channels.truncate(cfg.outlier_channels.max(1));

    let width = (m.max(1) - 1).to_string().len().max(2);
    let id = |i: usize| format!("sample-{i:0width$}");
    let mut payloads = Vec::with_capacity(m);
    for i in 0..m {
        let mut x = rng.normal(&[seq, d], 0.0, 1.0);
        if planted.contains(&i) {
            let noise = rng.student_t(&[seq, channels.len()], OUTLIER_DF, OUTLIER_NOISE_SCALE)?;
            for t in 0..seq {
                for (j, &c) in channels.iter().enumerate() {
                    let v = x.get(t, c) + noise.get(t, j);
                    x.set(t, c, v);
                }
            }
        }
        payloads.push((id(i), x.round_to_f32()));
    }
    let mut pool = CalibrationPool::from_payloads(payloads, &MomentExtractor)?;
    let mut ids: Vec<String> = planted.iter().map(|&i| id(i)).collect();
    ids.sort();
    pool.planted_outliers = ids;
    Ok(pool)
}

/// Clean held-out inputs for measuring output error.
pub fn gen_probe_inputs(cfg: &ToyNetConfig, count: usize, rng: &mut Rng) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    Ok((0..count)
        .map(|_| rng.normal(&[cfg.seq_len, cfg.d_model], 0.0, 1.0).round_to_f32())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_counts_and_determinism() {
        let cfg = ToyNetConfig::default();
        let a = gen_calibration_pool(&cfg, 20, 0.25, &mut Rng::seeded(5)).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.planted_outliers.len(), 5);
        let b = gen_calibration_pool(&cfg, 20, 0.25, &mut Rng::seeded(5)).unwrap();
        assert_eq!(a.ids(), b.ids());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.payload, y.payload);
        }
        assert_eq!(a.planted_outliers, b.planted_outliers);
        let clean = gen_calibration_pool(&cfg, 20, 0.0, &mut Rng::seeded(5)).unwrap();
        assert!(clean.planted_outliers.is_empty());
    }

    #[test]
    fn rejects_bad_arguments() {
        let cfg = ToyNetConfig::default();
        assert!(gen_calibration_pool(&cfg, 1, 0.0, &mut Rng::seeded(0)).is_err());
        assert!(gen_calibration_pool(&cfg, 20, 1.5, &mut Rng::seeded(0)).is_err());
        assert!(gen_calibration_pool(&cfg, 20, f64::NAN, &mut Rng::seeded(0)).is_err());
    }
}
