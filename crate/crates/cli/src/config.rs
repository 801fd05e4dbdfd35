//! Run configuration: one JSON document, overridden by command-line flags.

use std::path::{Path, PathBuf};

use muguide::flow::TrainingConfig;
use muguide::mcmc::McmcConfig;
use muguide::priors::PriorSpec;
use muguide::protocol::AcquisitionProtocol;
use muguide::{Error, ModelId, Result};
use muguide_harness::{HarnessOptions, InputKind};
use serde::{Deserialize, Serialize};

/// Environment override for the output directory.
pub const OUTPUT_ENV: &str = "MUGUIDE_OUTPUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundOverride {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelId>,
    /// Gradient table; the built-in multi-shell scheme when absent.
    pub protocol: Option<PathBuf>,
    pub prior_overrides: Vec<BoundOverride>,
    pub training: TrainingConfig,
    pub mcmc: McmcConfig,
    pub harness: HarnessOptions,
    pub snr: Option<f64>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    /// Keep only measurements with b ≤ this value (s/mm²).
    pub max_bvalue: Option<f64>,
    /// Simulations, voxels or truths, depending on the command.
    pub n: Option<usize>,
    /// Training-set size when a command trains its own flow.
    pub n_train: Option<usize>,
    pub input: InputKind,
    pub workers: Option<usize>,
    /// Posterior samples per voxel for `infer` (default 50000).
    pub infer_samples: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        muguide::io::read_json(path)
    }

    pub fn model(&self) -> Result<ModelId> {
        self.model.ok_or_else(|| Error::Config("no model given (use --model)".into()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a seed is required (use --seed)".into()))
    }

    pub fn n(&self, default: Option<usize>) -> Result<usize> {
        let n = self.n.or(default).ok_or_else(|| Error::Config("no count given (use --n)".into()))?;
        if n == 0 {
            return Err(Error::Config("--n must be at least 1".into()));
        }
        Ok(n)
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        let dir = self
            .output
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("muguide-out"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    /// Full protocol, then the reduced one and the kept columns when a
    /// b-value cutoff is set.
    pub fn protocol(&self) -> Result<(AcquisitionProtocol, Option<(AcquisitionProtocol, Vec<usize>)>)> {
        let full = match &self.protocol {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::Config(format!("protocol file {} does not exist", p.display())));
                }
                AcquisitionProtocol::load(p)?
            }
            None => AcquisitionProtocol::reference_multishell(),
        };
        let reduced = match self.max_bvalue {
            Some(b) => Some(full.with_max_bvalue(b)?),
            None => None,
        };
        Ok((full, reduced))
    }

    pub fn prior(&self) -> Result<PriorSpec> {
        let mut space = muguide::ParameterSpace::for_model(self.model()?);
        for o in &self.prior_overrides {
            space = space.with_bounds(&o.name, o.lower, o.upper)?;
        }
        PriorSpec::for_space(space)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(snr) = self.snr {
            if !(snr > 0.0 && snr.is_finite()) {
                return Err(Error::Config(format!("snr must be positive, got {snr}")));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.harness.n_samples == 0 {
            return Err(Error::Config("harness.n_samples must be at least 1".into()));
        }
        self.training.validate()?;
        self.mcmc.validate()
    }
}
