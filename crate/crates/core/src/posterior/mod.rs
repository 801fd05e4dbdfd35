//! Posterior samples and their per-parameter summaries: MAP, uncertainty,
//! ambiguity and a degeneracy flag.
//!
//! * MAP: argmax of the kernel density estimate on the grid.
//! * Uncertainty: interquartile range of the samples whose estimated density
//!   is at least the median sample density (the most probable half), as a
//!   percentage of the prior range.
//! * Ambiguity: full width at half maximum of the density, outermost
//!   crossings, as a percentage of the prior range.
//! * Degeneracy: a two-Gaussian fit whose density has at least two local
//!   maxima and whose means are further apart than the sum of the standard
//!   deviations.

pub mod kde;
pub mod mixture;

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::forward::ParameterSpace;
use crate::priors::PriorSpec;
use crate::rng;
pub use kde::{Bandwidth, Kde};
pub use mixture::{EmOptions, MixtureFit};

/// Minimum number of samples for degeneracy detection.
pub const MIN_DEGENERACY_SAMPLES: usize = 1000;
/// Minimum target for rejection sampling.
pub const MIN_REJECTION_TARGET: usize = 1000;
/// Attempted draws are capped at this multiple of the target.
pub const REJECTION_CAP_FACTOR: usize = 100;
pub const MIN_ACCEPTANCE: f64 = 0.01;

/// Anything that yields batches of parameter draws.
pub trait Sampler {
    fn draw(&self, n: usize, seed: u64) -> Result<Array2<f64>>;
}

/// A flow conditioned on one observed signal.
pub struct FlowSampler<'a> {
    pub flow: &'a FlowModel,
    pub x: &'a [f64],
}

impl Sampler for FlowSampler<'_> {
    fn draw(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        self.flow.sample(self.x, n, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub samples: Array2<f64>,
    pub space: ParameterSpace,
    pub accepted_fraction: f64,
}

impl PosteriorSamples {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.samples.column(j).to_vec()
    }
}

/// Draws batches until `n_target` rows fall in the prior support, giving up
/// after `100 × n_target` attempts.
pub fn rejection_sample<S: Sampler + ?Sized>(
    sampler: &S,
    n_target: usize,
    spec: &PriorSpec,
    seed: u64,
    voxel: &str,
) -> Result<PosteriorSamples> {
    if n_target < MIN_REJECTION_TARGET {
        return Err(Error::InsufficientSamples { required: MIN_REJECTION_TARGET, got: n_target });
    }
    let d = spec.dim();
    let cap = REJECTION_CAP_FACTOR * n_target;
    let mut kept: Vec<f64> = Vec::with_capacity(n_target * d);
    let (mut accepted, mut attempted) = (0usize, 0usize);
    let mut batch_index = 0u64;
    while accepted < n_target && attempted < cap {
        let rate = if attempted == 0 { 1.0 } else { (accepted as f64 / attempted as f64).max(MIN_ACCEPTANCE) };
        let want = (((n_target - accepted) as f64 / rate * 1.1).ceil() as usize).clamp(256, cap - attempted);
        let draws = sampler.draw(want, rng::derive(seed, batch_index))?;
        batch_index += 1;
        attempted += draws.nrows();
        for row in draws.axis_iter(Axis(0)) {
            let row = row.as_slice().expect("row-major draws");
            if spec.contains(row) {
                accepted += 1;
                if kept.len() < n_target * d {
                    kept.extend_from_slice(row);
                }
            }
        }
    }
    let accepted_fraction = accepted as f64 / attempted as f64;
    if accepted < n_target {
        return Err(Error::LowAcceptance { voxel: voxel.to_string(), accepted_fraction, attempted });
    }
    let samples = Array2::from_shape_vec((n_target, d), kept).expect("kept rows");
    Ok(PosteriorSamples { samples, space: spec.space.clone(), accepted_fraction })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummaryOptions {
    pub grid: usize,
    pub bandwidth: Bandwidth,
    pub em: EmOptions,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        SummaryOptions { grid: kde::DEFAULT_GRID, bandwidth: Bandwidth::Silverman, em: EmOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub map: f64,
    pub uncertainty_pct: f64,
    pub ambiguity_pct: f64,
    pub degenerate: bool,
    pub mixture: MixtureFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub parameters: Vec<ParameterSummary>,
}

impl PosteriorSummary {
    pub fn get(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn any_degenerate(&self) -> bool {
        self.parameters.iter().any(|p| p.degenerate)
    }
}

/// Two-Gaussian degeneracy test over the prior range `(lo, hi)`.
pub fn detect_degeneracy(samples: &[f64], range: (f64, f64), opts: &EmOptions) -> Result<(bool, MixtureFit)> {
    if samples.len() < MIN_DEGENERACY_SAMPLES {
        return Err(Error::InsufficientSamples { required: MIN_DEGENERACY_SAMPLES, got: samples.len() });
    }
    let (lo, hi) = range;
    let fit = mixture::fit_two_gaussians(samples, lo, hi, opts);
    let changes = mixture::derivative_sign_changes(|x| fit.density(x), lo, hi, kde::DEFAULT_GRID);
    let separated = (fit.mu1 - fit.mu2).abs() > fit.sigma1 + fit.sigma2;
    Ok((changes > 1 && separated, fit))
}

/// Uncertainty percentage from a fitted density.
pub fn uncertainty_pct(values: &[f64], density: &Kde) -> f64 {
    let dens: Vec<f64> = values.iter().map(|&v| density.at(v)).collect();
    let threshold = kde::quantile_sorted(&kde::sorted(&dens), 0.5);
    let top: Vec<f64> = values.iter().zip(&dens).filter(|(_, &d)| d >= threshold).map(|(&v, _)| v).collect();
    let top = kde::sorted(&top);
    let iqr = kde::quantile_sorted(&top, 0.75) - kde::quantile_sorted(&top, 0.25);
    (100.0 * iqr / (density.hi - density.lo)).clamp(0.0, 100.0)
}

pub fn summarize_parameter(
    name: &str,
    values: &[f64],
    lo: f64,
    hi: f64,
    opts: &SummaryOptions,
) -> Result<ParameterSummary> {
    if values.is_empty() {
        return Err(Error::InsufficientSamples { required: 1, got: 0 });
    }
    if !(hi > lo) {
        return Err(Error::Config(format!("empty prior range for {name}")));
    }
    let density = Kde::fit(values, lo, hi, opts.grid, opts.bandwidth);
    let ambiguity_pct = (100.0 * density.fwhm_grid_units() / (opts.grid - 1) as f64).clamp(0.0, 100.0);
    let uncertainty_pct = uncertainty_pct(values, &density);
    let (degenerate, mixture) = detect_degeneracy(values, (lo, hi), &opts.em)?;
    Ok(ParameterSummary { name: name.to_string(), map: density.mode(), uncertainty_pct, ambiguity_pct, degenerate, mixture })
}

pub fn summarize(samples: &PosteriorSamples, opts: &SummaryOptions) -> Result<PosteriorSummary> {
    let s = &samples.space;
    let parameters = (0..s.dim())
        .map(|j| summarize_parameter(&s.names[j], &samples.column(j), s.lower[j], s.upper[j], opts))
        .collect::<Result<_>>()?;
    Ok(PosteriorSummary { parameters })
}

/// One row per voxel: `voxel_id, <p>_map, <p>_uncertainty, <p>_ambiguity,
/// <p>_degenerate` for every parameter.
pub fn write_summary_csv(path: impl AsRef<Path>, names: &[String], rows: &[(String, PosteriorSummary)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["voxel_id".to_string()];
    for n in names {
        for suffix in ["map", "uncertainty", "ambiguity", "degenerate"] {
            header.push(format!("{n}_{suffix}"));
        }
    }
    w.write_record(&header)?;
    for (id, summary) in rows {
        let mut rec = vec![id.clone()];
        for p in &summary.parameters {
            rec.push(format!("{:?}", p.map));
            rec.push(format!("{:?}", p.uncertainty_pct));
            rec.push(format!("{:?}", p.ambiguity_pct));
            rec.push(u8::from(p.degenerate).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
