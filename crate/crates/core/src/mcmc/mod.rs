//! Adaptive Metropolis-within-Gibbs reference sampler.
//!
//! The voxel target is the offset-Gaussian likelihood under a uniform prior.
//! The state is θ followed by the fibre orientation as `(cos polar,
//! azimuth)`; antipodal symmetry restricts the polar cosine to `[0, 1]` and
//! the azimuth wraps modulo 2π. Orientation is dropped from the reported
//! trace.

use std::f64::consts::{PI, TAU};
use std::path::Path;
use std::time::Instant;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{unit_from_angles, ParameterVector, Simulator};
use crate::io;
use crate::priors::PriorSpec;
use crate::protocol::AcquisitionProtocol;
use crate::rng;

pub const TARGET_ACCEPTANCE: f64 = 0.44;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_samples: usize,
    pub burn_in: usize,
    pub thinning: usize,
    /// Initial random-walk scales; `None` uses 5% of each prior range and
    /// 0.1 for the orientation coordinates.
    pub proposal_stds: Option<Vec<f64>>,
    pub adaptation_interval: usize,
    pub sigma_noise: f64,
    pub rng_seed: u64,
    pub mle: MleOptions,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_samples: 15_200,
            burn_in: 200,
            thinning: 1,
            proposal_stds: None,
            adaptation_interval: 50,
            sigma_noise: 0.02,
            rng_seed: 0,
            mle: MleOptions::default(),
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.burn_in >= self.n_samples {
            return Err(Error::Config(format!(
                "burn_in ({}) must be below n_samples ({})",
                self.burn_in, self.n_samples
            )));
        }
        if self.thinning == 0 || self.adaptation_interval == 0 {
            return Err(Error::Config("thinning and adaptation_interval must be at least 1".into()));
        }
        if !(self.sigma_noise > 0.0) {
            return Err(Error::Config("sigma_noise must be positive".into()));
        }
        Ok(())
    }

    /// Number of trace rows produced.
    pub fn trace_len(&self) -> usize {
        (self.n_samples - self.burn_in).div_ceil(self.thinning)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleOptions {
    pub starts: usize,
    pub max_iterations: u64,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions { starts: 20, max_iterations: 2000 }
    }
}

/// Unnormalized log-density over a state vector.
pub trait Target {
    fn dim(&self) -> usize;
    /// `−∞` outside the support.
    fn log_density(&self, state: &[f64]) -> f64;
    /// Maps a proposal for coordinate `i` back into its domain (periodic
    /// coordinates).
    fn wrap(&self, _i: usize, v: f64) -> f64 {
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenericChain {
    pub trace: Array2<f64>,
    /// Post-burn-in acceptance rate per coordinate.
    pub acceptance_rates: Vec<f64>,
    pub final_proposal_stds: Vec<f64>,
}

/// Component-wise Gaussian random-walk Metropolis. Every
/// `adaptation_interval` sweeps each log-scale moves by `±1/√sweep` toward
/// 44% acceptance.
pub fn amwg<T: Target + ?Sized>(target: &T, init: &[f64], stds: &[f64], config: &McmcConfig) -> Result<GenericChain> {
    config.validate()?;
    let d = target.dim();
    if init.len() != d || stds.len() != d {
        return Err(Error::Dimension { expected: d, got: init.len().min(stds.len()) });
    }
    let mut x = init.to_vec();
    let mut lp = target.log_density(&x);
    if !lp.is_finite() {
        return Err(Error::Numeric("chain initialized outside the support".into()));
    }
    let mut r = rng::seeded(config.rng_seed);
    let mut log_sd: Vec<f64> = stds.iter().map(|s| s.ln()).collect();
    let mut batch_accepts = vec![0usize; d];
    let mut kept_accepts = vec![0usize; d];
    let mut rows = Vec::with_capacity(config.trace_len() * d);
    for sweep in 1..=config.n_samples {
        for i in 0..d {
            let old = x[i];
            let step: f64 = r.sample(StandardNormal);
            x[i] = target.wrap(i, old + log_sd[i].exp() * step);
            let lp_new = target.log_density(&x);
            let u: f64 = r.gen();
            if lp_new > f64::NEG_INFINITY && u.ln() < lp_new - lp {
                lp = lp_new;
                batch_accepts[i] += 1;
                if sweep > config.burn_in {
                    kept_accepts[i] += 1;
                }
            } else {
                x[i] = old;
            }
        }
        if sweep % config.adaptation_interval == 0 {
            let delta = 1.0 / (sweep as f64).sqrt();
            for i in 0..d {
                let rate = batch_accepts[i] as f64 / config.adaptation_interval as f64;
                log_sd[i] += if rate > TARGET_ACCEPTANCE { delta } else { -delta };
                batch_accepts[i] = 0;
            }
        }
        if sweep > config.burn_in && (sweep - config.burn_in - 1) % config.thinning == 0 {
            rows.extend_from_slice(&x);
        }
    }
    let kept = (config.n_samples - config.burn_in) as f64;
    let n_rows = rows.len() / d;
    Ok(GenericChain {
        trace: Array2::from_shape_vec((n_rows, d), rows).expect("rows of width d"),
        acceptance_rates: kept_accepts.iter().map(|&a| a as f64 / kept).collect(),
        final_proposal_stds: log_sd.iter().map(|v| v.exp()).collect(),
    })
}

/// `Σ log N(x_i; sqrt(M_i² + σ²), σ²)`.
pub fn log_likelihood_offset_gaussian(x: &[f64], model: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Validation(format!("sigma must be positive, got {sigma}")));
    }
    if x.len() != model.len() {
        return Err(Error::Dimension { expected: x.len(), got: model.len() });
    }
    let s2 = sigma * sigma;
    let mut sum = 0.0;
    for (&xi, &mi) in x.iter().zip(model) {
        if !mi.is_finite() {
            return Err(Error::Numeric("non-finite model signal".into()));
        }
        let r = xi - (mi * mi + s2).sqrt();
        sum += r * r;
    }
    Ok(-sum / (2.0 * s2) - x.len() as f64 * (sigma * (2.0 * PI).sqrt()).ln())
}

pub fn log_likelihood(x: &[f64], theta: &ParameterVector, sim: &Simulator, sigma: f64) -> Result<f64> {
    log_likelihood_offset_gaussian(x, &sim.simulate(theta)?, sigma)
}

/// Voxel posterior over `(θ, cos polar, azimuth)`.
pub struct VoxelTarget<'a> {
    pub sim: &'a Simulator,
    pub spec: &'a PriorSpec,
    pub x: &'a [f64],
    pub sigma: f64,
}

impl VoxelTarget<'_> {
    fn split(&self, state: &[f64]) -> ParameterVector {
        let d = self.spec.dim();
        ParameterVector::new(state[..d].to_vec(), unit_from_angles(state[d].clamp(-1.0, 1.0).acos(), state[d + 1]))
    }
}

impl Target for VoxelTarget<'_> {
    fn dim(&self) -> usize {
        self.spec.dim() + 2
    }

    fn log_density(&self, state: &[f64]) -> f64 {
        let d = self.spec.dim();
        if !self.spec.contains(&state[..d]) || !(0.0..=1.0).contains(&state[d]) {
            return f64::NEG_INFINITY;
        }
        log_likelihood(self.x, &self.split(state), self.sim, self.sigma).unwrap_or(f64::NEG_INFINITY)
    }

    fn wrap(&self, i: usize, v: f64) -> f64 {
        if i == self.spec.dim() + 1 {
            v.rem_euclid(TAU)
        } else {
            v
        }
    }
}

/// Orientation as `(cos polar ∈ [0, 1], azimuth ∈ [0, 2π))` on the upper
/// hemisphere.
pub fn hemisphere_angles(n: [f64; 3]) -> (f64, f64) {
    let n = if n[2] < 0.0 { [-n[0], -n[1], -n[2]] } else { n };
    (n[2].clamp(0.0, 1.0), n[1].atan2(n[0]).rem_euclid(TAU))
}

struct Objective<'a> {
    target: &'a VoxelTarget<'a>,
}

fn logistic(y: f64) -> f64 {
    1.0 / (1.0 + (-y).exp())
}

fn logit(u: f64) -> f64 {
    let u = u.clamp(1e-6, 1.0 - 1e-6);
    (u / (1.0 - u)).ln()
}

impl Objective<'_> {
    fn decode(&self, y: &[f64]) -> ParameterVector {
        let d = self.target.spec.dim();
        let u: Vec<f64> = y[..d].iter().map(|&v| logistic(v)).collect();
        let mut theta = vec![0.0; d];
        self.target.spec.from_unit_cube(&u, &mut theta);
        ParameterVector::new(theta, unit_from_angles(y[d], y[d + 1]))
    }
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, y: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let t = self.target;
        Ok(match log_likelihood(t.x, &self.decode(y), t.sim, t.sigma) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::MAX,
        })
    }
}

/// Multi-start Nelder-Mead over unconstrained coordinates (logistic map to
/// the unit cube, then the prior transform; two free orientation angles).
/// Starts are a Latin hypercube over the unit cube.
pub fn mle_init_with(
    sim: &Simulator,
    spec: &PriorSpec,
    x: &[f64],
    sigma: f64,
    seed: u64,
    opts: &MleOptions,
) -> Result<ParameterVector> {
    if x.len() != sim.protocol().len() {
        return Err(Error::Dimension { expected: sim.protocol().len(), got: x.len() });
    }
    if opts.starts == 0 {
        return Err(Error::Config("at least one optimizer start is required".into()));
    }
    let target = VoxelTarget { sim, spec, x, sigma };
    let d = spec.dim();
    let k = opts.starts;
    let mut r = rng::seeded(seed);
    let strata: Vec<Vec<usize>> = (0..d + 2)
        .map(|_| {
            let mut p: Vec<usize> = (0..k).collect();
            p.shuffle(&mut r);
            p
        })
        .collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut last_error = None;
    for s in 0..k {
        let mut start = Vec::with_capacity(d + 2);
        for (j, st) in strata.iter().enumerate() {
            let u = (st[s] as f64 + r.gen::<f64>()) / k as f64;
            start.push(match j {
                j if j < d => logit(u),
                j if j == d => u.acos(),
                _ => u * TAU,
            });
        }
        let mut simplex = vec![start.clone()];
        for j in 0..start.len() {
            let mut v = start.clone();
            v[j] += 0.5;
            simplex.push(v);
        }
        let solver = NelderMead::new(simplex).with_sd_tolerance(1e-10).map_err(|e| Error::Optimizer(e.to_string()))?;
        let run = Executor::new(Objective { target: &target }, solver)
            .configure(|c| c.max_iters(opts.max_iterations))
            .run();
        match run {
            Ok(res) => {
                let state = res.state();
                let cost = state.get_best_cost();
                if let Some(p) = state.get_best_param() {
                    if cost < f64::MAX && best.as_ref().map_or(true, |b| cost < b.0) {
                        best = Some((cost, p.clone()));
                    }
                }
            }
            Err(e) => last_error = Some(e.to_string()),
        }
    }
    match best {
        Some((_, y)) => Ok(Objective { target: &target }.decode(&y)),
        None => Err(Error::Optimizer(last_error.unwrap_or_else(|| "no start produced a finite likelihood".into()))),
    }
}

pub fn mle_init(
    x: &[f64],
    spec: &PriorSpec,
    protocol: &AcquisitionProtocol,
    sigma: f64,
    seed: u64,
) -> Result<ParameterVector> {
    let sim = Simulator::with_default_quadrature(spec.space.clone(), protocol.clone())?;
    mle_init_with(&sim, spec, x, sigma, seed, &MleOptions::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub config: McmcConfig,
    pub names: Vec<String>,
    pub acceptance_rates: Vec<f64>,
    pub orientation_acceptance_rates: [f64; 2],
    pub mle_init: ParameterVector,
    pub mle_seconds: f64,
    pub sampling_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcChain {
    /// Post-burn-in θ rows (orientation marginalized).
    pub trace: Array2<f64>,
    pub meta: ChainMeta,
}

impl McmcChain {
    pub fn acceptance_rates(&self) -> &[f64] {
        &self.meta.acceptance_rates
    }

    /// Total wall-clock seconds (MLE plus sampling).
    pub fn seconds(&self) -> f64 {
        self.meta.mle_seconds + self.meta.sampling_seconds
    }

    /// Writes `<stem>.trace.bin` and `<stem>.json`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref().as_os_str().to_owned();
        let with = |ext: &str| {
            let mut s = stem.clone();
            s.push(ext);
            std::path::PathBuf::from(s)
        };
        io::write_matrix(with(".trace.bin"), &self.trace)?;
        io::write_json(with(".json"), &self.meta)
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref().as_os_str().to_owned();
        let with = |ext: &str| {
            let mut s = stem.clone();
            s.push(ext);
            std::path::PathBuf::from(s)
        };
        let trace = io::read_matrix(with(".trace.bin"))?;
        let meta: ChainMeta = io::read_json(with(".json"))?;
        if trace.ncols() != meta.names.len() {
            return Err(Error::Format("trace width disagrees with metadata".into()));
        }
        Ok(McmcChain { trace, meta })
    }
}

/// MLE initialization followed by AMWG sampling of one voxel.
pub fn run_amwg_with(sim: &Simulator, spec: &PriorSpec, x: &[f64], config: &McmcConfig) -> Result<McmcChain> {
    config.validate()?;
    let d = spec.dim();
    let t0 = Instant::now();
    let mle = mle_init_with(sim, spec, x, config.sigma_noise, rng::derive(config.rng_seed, 1), &config.mle)?;
    let mle_seconds = t0.elapsed().as_secs_f64();
    let target = VoxelTarget { sim, spec, x, sigma: config.sigma_noise };
    let (c, phi) = hemisphere_angles(mle.orientation);
    let mut init = mle.values.clone();
    init.extend([c, phi]);
    let stds = match &config.proposal_stds {
        Some(s) if s.len() == d + 2 => s.clone(),
        Some(s) if s.len() == d => s.iter().copied().chain([0.1, 0.1]).collect(),
        Some(s) => return Err(Error::Dimension { expected: d + 2, got: s.len() }),
        None => (0..d).map(|i| 0.05 * spec.space.range(i)).chain([0.1, 0.1]).collect(),
    };
    let t1 = Instant::now();
    let chain = amwg(&target, &init, &stds, config)?;
    let sampling_seconds = t1.elapsed().as_secs_f64();
    let trace = chain.trace.slice(ndarray::s![.., ..d]).to_owned();
    Ok(McmcChain {
        trace,
        meta: ChainMeta {
            config: config.clone(),
            names: spec.space.names.clone(),
            acceptance_rates: chain.acceptance_rates[..d].to_vec(),
            orientation_acceptance_rates: [chain.acceptance_rates[d], chain.acceptance_rates[d + 1]],
            mle_init: mle,
            mle_seconds,
            sampling_seconds,
        },
    })
}

pub fn run_amwg(x: &[f64], spec: &PriorSpec, protocol: &AcquisitionProtocol, config: &McmcConfig) -> Result<McmcChain> {
    let sim = Simulator::with_default_quadrature(spec.space.clone(), protocol.clone())?;
    run_amwg_with(&sim, spec, x, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_gaussian_hand_values() {
        let v = log_likelihood_offset_gaussian(&[1.0], &[1.0], 0.02).unwrap();
        assert!((v - 2.993034).abs() < 1e-5, "{v}");
        let s: f64 = 0.05;
        let x = [(0.3f64.powi(2) + s * s).sqrt(), (0.8f64.powi(2) + s * s).sqrt()];
        let z = log_likelihood_offset_gaussian(&x, &[0.3, 0.8], s).unwrap();
        assert!((z + 2.0 * (s * (2.0 * PI).sqrt()).ln()).abs() < 1e-12);
        let x2 = [(0.3f64.powi(2) + 4.0 * s * s).sqrt(), (0.8f64.powi(2) + 4.0 * s * s).sqrt()];
        let z2 = log_likelihood_offset_gaussian(&x2, &[0.3, 0.8], 2.0 * s).unwrap();
        assert!((z2 - z + 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(log_likelihood_offset_gaussian(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        let c = McmcConfig { burn_in: 10, n_samples: 10, ..Default::default() };
        assert!(c.validate().is_err());
        let c = McmcConfig { thinning: 0, ..Default::default() };
        assert!(c.validate().is_err());
        assert_eq!(McmcConfig::default().trace_len(), 15_000);
    }

    #[test]
    fn hemisphere_angles_round_trip() {
        let n = unit_from_angles(2.5, 4.0);
        let (c, phi) = hemisphere_angles(n);
        let m = unit_from_angles(c.acos(), phi);
        let dot: f64 = (0..3).map(|i| n[i] * m[i]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-12);
    }
}
