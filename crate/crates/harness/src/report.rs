use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use muguide::error::{Error, Result};
use muguide::forward::ModelId;
use muguide::io;

/// Written into every report that uses direction averages as the manual
/// summary statistic.
pub const BASELINE_NOTE: &str =
    "manual summary statistics: direction-averaged diffusion-weighted shells (used for every model)";

/// Equal-width histogram over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins.max(1)];
        let w = (hi - lo) / counts.len() as f64;
        for &v in values {
            if v.is_finite() && w > 0.0 {
                let k = (((v - lo) / w).floor().max(0.0) as usize).min(counts.len() - 1);
                counts[k] += 1;
            }
        }
        Histogram { lo, hi, counts }
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n).map(|k| self.lo + (self.hi - self.lo) * k as f64 / n as f64).collect()
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Symmetric range covering both value sets, for paired histograms.
pub(crate) fn symmetric_range(a: &[f64], b: &[f64]) -> f64 {
    let m = a.iter().chain(b).filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Common save/load for JSON reports.
pub trait Report: Serialize + DeserializeOwned {
    fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json(path, self)
    }

    fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        io::read_json(path)
    }
}

/// SHA-256 of the compact JSON form of any serializable value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub model: Option<ModelId>,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub version: String,
    pub started_unix: f64,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}

impl Report for Manifest {}

impl Manifest {
    pub fn new<T: Serialize>(command: &str, model: Option<ModelId>, config: &T, seeds: Vec<u64>) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        Manifest {
            command: command.to_string(),
            model,
            config_hash: config_hash(config),
            seeds,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix,
            wall_clock_seconds: 0.0,
            outputs: Vec::new(),
        }
    }

    /// Stamps the elapsed time and writes the manifest.
    pub fn finish(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        self.wall_clock_seconds = (now - self.started_unix).max(0.0);
        self.save_json(path)?;
        Ok(self)
    }
}

pub(crate) fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn num(v: f64) -> String {
    format!("{v:?}")
}
