//! Simulation experiments: flow against MCMC, degeneracy census, learned
//! features against direction-averaged summaries, SNR sweep, posterior
//! predictive checks, feature correlations and synthetic phantom maps.
//!
//! Every experiment is seed-deterministic. Voxels run on the rayon pool
//! (sized with [`WORKERS_ENV`]) and results are collected in voxel order.
//! Reports are plain serde structs written as JSON, with CSV tables and
//! optional SVG plots alongside.

mod experiments;
mod report;
pub mod svg;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use muguide::error::{Error, Result};
use muguide::flow::{self, FlowModel, TrainingConfig, TrainingReport};
use muguide::forward::dataset::{generate_with, random_orientation};
use muguide::forward::noise::add_noise_in_place;
use muguide::forward::{ParameterVector, Simulator};
use muguide::io;
use muguide::posterior::{rejection_sample, summarize, FlowSampler, PosteriorSamples, PosteriorSummary, SummaryOptions};
use muguide::priors::PriorSpec;
use muguide::protocol::AcquisitionProtocol;
use muguide::rng;

pub use experiments::*;
pub use report::*;

/// Environment variable holding the worker-pool size.
pub const WORKERS_ENV: &str = "MUGUIDE_WORKERS";

/// Builds the global rayon pool from `workers`, else [`WORKERS_ENV`], else
/// the rayon default. Has no effect if the pool already exists.
pub fn init_worker_pool(workers: Option<usize>) -> Result<()> {
    let n = match workers {
        Some(n) => Some(n),
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(v.parse::<usize>().map_err(|_| Error::Config(format!("{WORKERS_ENV}={v} is not a count")))?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = n {
        b = b.num_threads(n);
    }
    let _ = b.build_global();
    Ok(())
}

/// What the flow is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Full signal through the learned embedding.
    #[default]
    RawSignal,
    /// Direction-averaged diffusion-weighted shells, no embedding.
    ShellMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PipelineMeta {
    prior: PriorSpec,
    protocol: String,
    quadrature_order: usize,
    input: InputKind,
    snr: Option<f64>,
    columns: Option<Vec<usize>>,
}

/// A trained flow together with the simulator and input convention it was
/// trained for.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub spec: PriorSpec,
    pub sim: Simulator,
    pub flow: FlowModel,
    pub input: InputKind,
    /// Training noise level, `None` when noise-free.
    pub snr: Option<f64>,
    /// Columns of a full acquisition kept by a b-value cutoff, if any.
    pub columns: Option<Vec<usize>>,
}

/// Timed posterior draws for one voxel.
#[derive(Debug, Clone)]
pub struct VoxelPosterior {
    pub samples: PosteriorSamples,
    pub seconds: f64,
}

impl Pipeline {
    /// Simulates `n_train` prior-predictive pairs and trains a flow on them.
    pub fn train(
        spec: &PriorSpec,
        sim: &Simulator,
        input: InputKind,
        snr: Option<f64>,
        n_train: usize,
        config: &TrainingConfig,
    ) -> Result<(Self, TrainingReport)> {
        let set = generate_with(sim, spec, n_train, snr, rng::derive(config.rng_seed, 100))?;
        Self::fit(spec, sim, input, snr, &set.theta, &set.x, config)
    }

    /// Trains on given pairs; `x` holds full signals on `sim`'s protocol.
    pub fn fit(
        spec: &PriorSpec,
        sim: &Simulator,
        input: InputKind,
        snr: Option<f64>,
        theta: &Array2<f64>,
        x: &Array2<f64>,
        config: &TrainingConfig,
    ) -> Result<(Self, TrainingReport)> {
        let mut cfg = config.clone();
        if input == InputKind::ShellMeans {
            cfg.architecture.conditioner = flow::Conditioner::Identity;
        }
        let reduced;
        let x = match input {
            InputKind::RawSignal => x,
            InputKind::ShellMeans => {
                reduced = shell_mean_matrix(sim.protocol(), x)?;
                &reduced
            }
        };
        let (flow, report) = flow::train(&spec.space, theta.view(), x.view(), &cfg)?;
        let p = Pipeline { spec: spec.clone(), sim: sim.clone(), flow, input, snr, columns: None };
        Ok((p, report))
    }

    /// Conditioning vector for a signal on the pipeline's protocol.
    pub fn condition(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.input {
            InputKind::RawSignal => {
                self.sim.protocol().check_signal_len(x.len())?;
                Ok(x.to_vec())
            }
            InputKind::ShellMeans => self.sim.protocol().shell_means(x),
        }
    }

    /// Applies the b-value column selection to a full-acquisition signal.
    pub fn select_columns(&self, full: &[f64]) -> Result<Vec<f64>> {
        match &self.columns {
            None => Ok(full.to_vec()),
            Some(cols) => cols
                .iter()
                .map(|&c| full.get(c).copied().ok_or(Error::Dimension { expected: c + 1, got: full.len() }))
                .collect(),
        }
    }

    /// Rejection-sampled posterior draws for signal `x`.
    pub fn posterior(&self, x: &[f64], n: usize, seed: u64, voxel: &str) -> Result<VoxelPosterior> {
        let t = Instant::now();
        let c = self.condition(x)?;
        let samples = rejection_sample(&FlowSampler { flow: &self.flow, x: &c }, n, &self.spec, seed, voxel)?;
        Ok(VoxelPosterior { samples, seconds: t.elapsed().as_secs_f64() })
    }

    pub fn infer(&self, x: &[f64], n: usize, seed: u64, voxel: &str, opts: &SummaryOptions) -> Result<PosteriorSummary> {
        summarize(&self.posterior(x, n, seed, voxel)?.samples, opts)
    }

    fn meta_path(stem: &Path) -> PathBuf {
        let mut s = stem.as_os_str().to_owned();
        s.push(".pipeline.json");
        PathBuf::from(s)
    }

    fn flow_path(stem: &Path) -> PathBuf {
        let mut s = stem.as_os_str().to_owned();
        s.push(".flow");
        PathBuf::from(s)
    }

    /// Writes `<stem>.flow` and `<stem>.pipeline.json`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        self.flow.save(Self::flow_path(stem))?;
        let meta = PipelineMeta {
            prior: self.spec.clone(),
            protocol: self.sim.protocol().to_text(),
            quadrature_order: self.sim.quadrature_order(),
            input: self.input,
            snr: self.snr,
            columns: self.columns.clone(),
        };
        io::write_json(Self::meta_path(stem), &meta)
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let meta_path = Self::meta_path(stem);
        if !meta_path.exists() {
            return Err(Error::Config(format!("missing checkpoint {}", meta_path.display())));
        }
        let meta: PipelineMeta = io::read_json(&meta_path)?;
        let protocol = AcquisitionProtocol::parse(&meta.protocol, &meta_path)?;
        let sim = Simulator::new(meta.prior.space.clone(), protocol, meta.quadrature_order)?;
        let flow = FlowModel::load(Self::flow_path(stem))?;
        if flow.space() != &meta.prior.space {
            return Err(Error::Format("checkpoint and pipeline parameter spaces differ".into()));
        }
        Ok(Pipeline { spec: meta.prior, sim, flow, input: meta.input, snr: meta.snr, columns: meta.columns })
    }
}

/// Row-wise direction-averaged diffusion-weighted shells.
pub fn shell_mean_matrix(protocol: &AcquisitionProtocol, x: &Array2<f64>) -> Result<Array2<f64>> {
    let k = protocol.n_weighted_shells();
    let mut out = Array2::zeros((x.nrows(), k));
    for (i, row) in x.rows().into_iter().enumerate() {
        let m = protocol.shell_means(&row.to_vec())?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&m));
    }
    Ok(out)
}

/// Ground truth with a uniformly random orientation; depends only on
/// `(seed, i)`.
pub fn draw_truth(spec: &PriorSpec, seed: u64, i: usize) -> ParameterVector {
    let mut r = rng::stream(seed, i as u64);
    let mut values = vec![0.0; spec.dim()];
    spec.sample_one(&mut r, &mut values);
    ParameterVector::new(values, random_orientation(&mut r))
}

/// Clean and observed signals for a truth. The noise stream depends only on
/// `(seed, i)`, so different SNRs share the same standard-normal draws.
pub fn observe(sim: &Simulator, truth: &ParameterVector, snr: Option<f64>, seed: u64, i: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let clean = sim.simulate(truth)?;
    let mut x = clean.clone();
    if let Some(snr) = snr {
        let mut r = rng::stream(seed, i as u64);
        add_noise_in_place(&mut x, snr, &mut r)?;
    }
    Ok((clean, x))
}

