use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use taptq::interval_search::SearchMethod;
use taptq::toynet::{PipelineConfig, SimilarityScope, ToyNetConfig};

use crate::CliError;

/// Every hyperparameter of a run. Embedded verbatim in each report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for the pool and probe inputs.
    pub seed: u64,
    pub net: ToyNetConfig,
    pub pool_size: usize,
    pub outlier_fraction: f64,
    /// Held-out inputs used for the accumulated-error profile.
    pub probe_count: usize,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            net: ToyNetConfig::default(),
            pool_size: 20,
            outlier_fraction: 0.25,
            probe_count: 8,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: taptq::Error| CliError::Usage(e.to_string());
        self.net.validate().map_err(usage)?;
        self.pipeline.validate().map_err(usage)?;
        if self.pool_size < 2 {
            return Err(CliError::Usage(format!("pool_size must be at least 2, got {}", self.pool_size)));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(CliError::Usage(format!("outlier_fraction {} outside [0, 1]", self.outlier_fraction)));
        }
        if self.probe_count == 0 {
            return Err(CliError::Usage("probe_count must be positive".into()));
        }
        let rank = self.pipeline.fit.rank;
        if rank == 0 || rank > self.net.d_model {
            return Err(CliError::Usage(format!("rank {rank} outside 1..={}", self.net.d_model)));
        }
        Ok(())
    }

    /// `--seed` sets both the master seed and the network seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.net.seed = seed;
    }
}

/// Command-line overrides for the pipeline section.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<SearchMethod>,
    pub bits: Option<(u32, u32)>,
    pub rho: Option<f64>,
    pub tau: Option<f64>,
    pub rank: Option<usize>,
    pub lambda: Option<f64>,
    pub grid_n: Option<usize>,
    pub scope: Option<SimilarityScope>,
    pub fit_always: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        let p = &mut cfg.pipeline;
        if let Some(m) = self.method {
            p.search.method = m;
        }
        if let Some((w, a)) = self.bits {
            p.weight_bits = w;
            p.act_bits = a;
        }
        if let Some(r) = self.rho {
            p.tre.rho = r;
        }
        if let Some(t) = self.tau {
            p.tre.tau = t;
        }
        if let Some(r) = self.rank {
            p.fit.rank = r;
        }
        if let Some(l) = self.lambda {
            p.fit.lambda = l;
        }
        if let Some(n) = self.grid_n {
            p.search.grid_n = n;
        }
        if let Some(s) = self.scope {
            p.scope = s;
        }
        if self.fit_always {
            p.fit.fit_always = true;
        }
    }
}

/// Parses `W,A`.
pub fn parse_bits(s: &str) -> Result<(u32, u32), String> {
    let (w, a) = s.split_once(',').ok_or_else(|| format!("expected W,A, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|_| format!("bad bit width `{v}`"));
    Ok((parse(w)?, parse(a)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(c.pool_size, 20);
        assert_eq!(c.pipeline.n_target, 8);
        assert_eq!(c.pipeline.tre.rho, 0.01);
        assert_eq!(c.pipeline.tre.tau, 0.007);
        assert_eq!(c.pipeline.fit.rank, 16);
        c.validate().unwrap();
    }

    #[test]
    fn json_roundtrip_and_partial_configs() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 4, "pool_size": 12}"#).unwrap();
        assert_eq!(partial.pool_size, 12);
        assert_eq!(partial.net, ToyNetConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn bits_and_overrides() {
        assert_eq!(parse_bits("4,8").unwrap(), (4, 8));
        assert!(parse_bits("4").is_err());
        assert!(parse_bits("x,8").is_err());
        let mut c = RunConfig::default();
        Overrides {
            seed: Some(9),
            bits: Some((6, 6)),
            tau: Some(0.0),
            ..Overrides::default()
        }
        .apply(&mut c);
        assert_eq!((c.seed, c.net.seed, c.pipeline.weight_bits, c.pipeline.tre.tau), (9, 9, 6, 0.0));
        c.pipeline.fit.rank = 65;
        assert!(c.validate().is_err());
    }
}
