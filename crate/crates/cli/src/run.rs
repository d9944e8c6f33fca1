//! Run-directory layout and the report embedded in it.
//!
//! ```text
//! <run>/report.json          RunReport (config, inputs, pipeline report)
//! <run>/qnet/                quantized network bundle
//! <run>/adapters/            adapter factors bundle
//! <run>/calib_io/            per-module X, Y, Y_q on the calibration batch
//! <run>/curves/<label>.csv   similarity vs candidate, one file per search
//! <run>/curves/depth_profile.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taptq::bundle::{write_atomic, TensorBundle};
use taptq::toynet::PipelineReport;
use taptq::Error;

use crate::{CliError, RunConfig};

pub const REPORT_FILE: &str = "report.json";
pub const QNET_DIR: &str = "qnet";
pub const ADAPTERS_DIR: &str = "adapters";
pub const CALIB_IO_DIR: &str = "calib_io";
pub const CURVES_DIR: &str = "curves";
pub const DEPTH_PROFILE: &str = "depth_profile.csv";

/// FNV-1a digests of the manifests a run was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigests {
    pub net: String,
    pub calib: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub config: RunConfig,
    pub inputs: InputDigests,
    pub calibration_ids: Vec<String>,
    /// Per-module output MSE on held-out probe inputs.
    pub probe_curve: Vec<f64>,
    pub pipeline: PipelineReport,
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn load_report(&self) -> Result<RunReport, CliError> {
        let p = self.path(REPORT_FILE);
        let text = fs::read(&p).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(p.display().to_string())
            } else {
                Error::Io {
                    path: p.display().to_string(),
                    source: e,
                }
            }
        })?;
        serde_json::from_slice(&text).map_err(|e| CliError::Core(Error::Format(format!("{}: {e}", p.display()))))
    }

    pub fn save_report(&self, r: &RunReport) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(r)?;
        bytes.push(b'\n');
        write_atomic(self.path(REPORT_FILE), &bytes)?;
        Ok(())
    }

    pub fn bundle(&self, name: &str) -> Result<TensorBundle, CliError> {
        Ok(TensorBundle::read(self.path(name))?)
    }

    pub fn curve_path(&self, label: &str) -> PathBuf {
        self.path(CURVES_DIR).join(format!("{}.csv", sanitize(label)))
    }
}

/// File-system-safe form of a trace label.
pub fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Core(Error::Format(e.to_string())))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Core(Error::Format(e.to_string())))?;
    write_atomic(path, &bytes)?;
    Ok(())
}
