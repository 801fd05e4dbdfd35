use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{mean, num, symmetric_range, write_rows, Histogram, Report, BASELINE_NOTE};
use super::{draw_truth, observe, InputKind, Pipeline};
use muguide::error::{Error, Result};
use muguide::flow::Conditioner;
use muguide::forward::dataset::random_orientation;
use muguide::forward::{ModelId, ParameterVector};
use muguide::mcmc::{run_amwg_with, McmcConfig};
use muguide::posterior::{summarize, PosteriorSamples, PosteriorSummary, SummaryOptions};
use muguide::rng;

const TRUTH_TAG: u64 = 1;
const NOISE_TAG: u64 = 2;
const FLOW_TAG: u64 = 3;
const MCMC_TAG: u64 = 4;
const RECON_TAG: u64 = 5;

/// Operationalizes "not or weakly correlated".
pub const WEAK_CORRELATION: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessOptions {
    /// Retained posterior samples per voxel for either method.
    pub n_samples: usize,
    pub summary: SummaryOptions,
    pub histogram_bins: usize,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        HarnessOptions { n_samples: 15_000, summary: SummaryOptions::default(), histogram_bins: 30 }
    }
}

fn check_count(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        Err(Error::Config(format!("{what} must be at least 1")))
    } else {
        Ok(())
    }
}

fn maps(s: &PosteriorSummary) -> Vec<f64> {
    s.parameters.iter().map(|p| p.map).collect()
}

fn flags(s: &PosteriorSummary) -> Vec<bool> {
    s.parameters.iter().map(|p| p.degenerate).collect()
}

/// Per-voxel result of one inference method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub map: Vec<f64>,
    pub uncertainty_pct: Vec<f64>,
    pub ambiguity_pct: Vec<f64>,
    pub degenerate: Vec<bool>,
    /// Wall-clock to obtain the posterior samples.
    pub posterior_seconds: f64,
    pub summary_seconds: f64,
}

impl MethodResult {
    fn new(s: &PosteriorSummary, posterior_seconds: f64, summary_seconds: f64) -> Self {
        MethodResult {
            map: maps(s),
            uncertainty_pct: s.parameters.iter().map(|p| p.uncertainty_pct).collect(),
            ambiguity_pct: s.parameters.iter().map(|p| p.ambiguity_pct).collect(),
            degenerate: flags(s),
            posterior_seconds,
            summary_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelComparison {
    pub truth: Vec<f64>,
    /// `None` when rejection sampling gave up on this voxel.
    pub flow: Option<MethodResult>,
    pub mcmc: MethodResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterComparison {
    pub name: String,
    pub mean_abs_bias_flow: f64,
    pub mean_abs_bias_mcmc: f64,
    pub degenerate_flow: usize,
    pub degenerate_mcmc: usize,
    pub bias_flow: Histogram,
    pub bias_mcmc: Histogram,
}

/// Flow against MCMC on shared simulations. Bias is MAP minus truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub model: ModelId,
    pub snr: Option<f64>,
    pub n_sims: usize,
    pub n_samples: usize,
    pub names: Vec<String>,
    pub voxels: Vec<VoxelComparison>,
    pub parameters: Vec<ParameterComparison>,
    pub flow_failures: usize,
    pub mean_flow_seconds: f64,
    pub mean_mcmc_seconds: f64,
    /// Ratio of mean per-voxel times to obtain posterior samples (MCMC
    /// includes its maximum-likelihood initialization).
    pub speedup: f64,
}

impl Report for ComparisonReport {}

impl ComparisonReport {
    /// One row per voxel: truths, both MAPs, both degeneracy flags, times.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut header = vec!["voxel".to_string()];
        for n in &self.names {
            for s in ["truth", "flow_map", "mcmc_map", "flow_degenerate", "mcmc_degenerate"] {
                header.push(format!("{n}_{s}"));
            }
        }
        header.extend(["flow_seconds", "mcmc_seconds"].map(String::from));
        let rows = self.voxels.iter().enumerate().map(|(i, v)| {
            let mut r = vec![i.to_string()];
            for j in 0..self.names.len() {
                r.push(num(v.truth[j]));
                r.push(v.flow.as_ref().map_or("nan".into(), |f| num(f.map[j])));
                r.push(num(v.mcmc.map[j]));
                r.push(v.flow.as_ref().map_or("".into(), |f| u8::from(f.degenerate[j]).to_string()));
                r.push(u8::from(v.mcmc.degenerate[j]).to_string());
            }
            r.push(v.flow.as_ref().map_or("nan".into(), |f| num(f.posterior_seconds)));
            r.push(num(v.mcmc.posterior_seconds));
            r
        });
        write_rows(path.as_ref(), &header, rows)
    }
}

fn mcmc_config_for(base: &McmcConfig, snr: Option<f64>, seed: u64) -> McmcConfig {
    let mut c = base.clone();
    if let Some(snr) = snr {
        c.sigma_noise = 1.0 / snr;
    }
    c.rng_seed = seed;
    c
}

/// Simulates `n_sims` voxels at `snr`, infers each with the flow and with
/// MLE-initialized AMWG, and compares MAP bias and time per voxel.
pub fn compare_with_mcmc(
    pipeline: &Pipeline,
    n_sims: usize,
    snr: Option<f64>,
    mcmc: &McmcConfig,
    opts: &HarnessOptions,
    seed: u64,
) -> Result<ComparisonReport> {
    check_count(n_sims, "number of simulations")?;
    if pipeline.input != InputKind::RawSignal {
        return Err(Error::Config("MCMC comparison needs a raw-signal pipeline".into()));
    }
    mcmc.validate()?;
    let spec = &pipeline.spec;
    let mcmc = McmcConfig { n_samples: opts.n_samples + mcmc.burn_in, ..mcmc.clone() };
    let voxels: Vec<VoxelComparison> = (0..n_sims)
        .into_par_iter()
        .map(|i| {
            let truth = draw_truth(spec, rng::derive(seed, TRUTH_TAG), i);
            let (_, x) = observe(&pipeline.sim, &truth, snr, rng::derive(seed, NOISE_TAG), i)?;
            let flow = match pipeline.posterior(&x, opts.n_samples, rng::derive(rng::derive(seed, FLOW_TAG), i as u64), &i.to_string()) {
                Ok(p) => {
                    let t = Instant::now();
                    let s = summarize(&p.samples, &opts.summary)?;
                    Some(MethodResult::new(&s, p.seconds, t.elapsed().as_secs_f64()))
                }
                Err(Error::LowAcceptance { .. }) => None,
                Err(e) => return Err(e),
            };
            let cfg = mcmc_config_for(&mcmc, snr, rng::derive(rng::derive(seed, MCMC_TAG), i as u64));
            let t = Instant::now();
            let chain = run_amwg_with(&pipeline.sim, spec, &x, &cfg)?;
            let mcmc_seconds = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let s = summarize(
                &PosteriorSamples { samples: chain.trace, space: spec.space.clone(), accepted_fraction: 1.0 },
                &opts.summary,
            )?;
            let mcmc = MethodResult::new(&s, mcmc_seconds, t.elapsed().as_secs_f64());
            Ok(VoxelComparison { truth: truth.values, flow, mcmc })
        })
        .collect::<Result<_>>()?;

    let names = spec.space.names.clone();
    let ok: Vec<&VoxelComparison> = voxels.iter().filter(|v| v.flow.is_some()).collect();
    let parameters = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let bf: Vec<f64> = ok.iter().map(|v| v.flow.as_ref().expect("filtered").map[j] - v.truth[j]).collect();
            let bm: Vec<f64> = ok.iter().map(|v| v.mcmc.map[j] - v.truth[j]).collect();
            let r = symmetric_range(&bf, &bm);
            ParameterComparison {
                name: name.clone(),
                mean_abs_bias_flow: mean(&bf.iter().map(|b| b.abs()).collect::<Vec<_>>()),
                mean_abs_bias_mcmc: mean(&bm.iter().map(|b| b.abs()).collect::<Vec<_>>()),
                degenerate_flow: ok.iter().filter(|v| v.flow.as_ref().expect("filtered").degenerate[j]).count(),
                degenerate_mcmc: voxels.iter().filter(|v| v.mcmc.degenerate[j]).count(),
                bias_flow: Histogram::new(&bf, -r, r, opts.histogram_bins),
                bias_mcmc: Histogram::new(&bm, -r, r, opts.histogram_bins),
            }
        })
        .collect();
    let mean_flow_seconds = mean(&ok.iter().map(|v| v.flow.as_ref().expect("filtered").posterior_seconds).collect::<Vec<_>>());
    let mean_mcmc_seconds = mean(&voxels.iter().map(|v| v.mcmc.posterior_seconds).collect::<Vec<_>>());
    Ok(ComparisonReport {
        model: spec.space.model_id,
        snr,
        n_sims,
        n_samples: opts.n_samples,
        names,
        flow_failures: voxels.len() - ok.len(),
        voxels,
        parameters,
        mean_flow_seconds,
        mean_mcmc_seconds,
        speedup: mean_mcmc_seconds / mean_flow_seconds,
    })
}

/// Degenerate counts per parameter over a batch of simulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusReport {
    pub model: ModelId,
    pub snr: Option<f64>,
    pub n_sims: usize,
    pub n_samples: usize,
    pub names: Vec<String>,
    pub counts: Vec<usize>,
    /// Voxels degenerate in at least one parameter.
    pub any_degenerate: usize,
    /// Voxels where rejection sampling gave up; excluded from the counts.
    pub failed: usize,
    pub any_fraction: f64,
    pub seconds: f64,
    pub flags: Vec<Vec<bool>>,
}

impl Report for CensusReport {}

impl CensusReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = ["parameter", "degenerate", "fraction"].map(String::from);
        let ok = (self.n_sims - self.failed).max(1) as f64;
        let rows = self
            .names
            .iter()
            .zip(&self.counts)
            .map(|(n, &c)| vec![n.clone(), c.to_string(), num(c as f64 / ok)])
            .chain(std::iter::once(vec!["any".into(), self.any_degenerate.to_string(), num(self.any_fraction)]));
        write_rows(path.as_ref(), &header, rows)
    }
}

/// A voxel counts toward parameter `p` iff its `p` marginal is flagged.
pub fn degeneracy_census(
    pipeline: &Pipeline,
    n_sims: usize,
    snr: Option<f64>,
    opts: &HarnessOptions,
    seed: u64,
) -> Result<CensusReport> {
    check_count(n_sims, "number of simulations")?;
    let spec = &pipeline.spec;
    let t = Instant::now();
    let results: Vec<Option<Vec<bool>>> = (0..n_sims)
        .into_par_iter()
        .map(|i| {
            let truth = draw_truth(spec, rng::derive(seed, TRUTH_TAG), i);
            let (_, x) = observe(&pipeline.sim, &truth, snr, rng::derive(seed, NOISE_TAG), i)?;
            match pipeline.posterior(&x, opts.n_samples, rng::derive(rng::derive(seed, FLOW_TAG), i as u64), &i.to_string()) {
                Ok(p) => Ok(Some(flags(&summarize(&p.samples, &opts.summary)?))),
                Err(Error::LowAcceptance { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let seconds = t.elapsed().as_secs_f64();
    let d = spec.dim();
    let flags: Vec<Vec<bool>> = results.iter().flatten().cloned().collect();
    let counts = (0..d).map(|j| flags.iter().filter(|f| f[j]).count()).collect();
    let any_degenerate = flags.iter().filter(|f| f.iter().any(|&b| b)).count();
    Ok(CensusReport {
        model: spec.space.model_id,
        snr,
        n_sims,
        n_samples: opts.n_samples,
        names: spec.space.names.clone(),
        counts,
        any_degenerate,
        failed: n_sims - flags.len(),
        any_fraction: any_degenerate as f64 / flags.len().max(1) as f64,
        seconds,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureParameter {
    pub name: String,
    /// Voxels where neither variant is degenerate on this parameter.
    pub n_kept: usize,
    pub rmse_learned: f64,
    pub rmse_summary: f64,
}

/// Learned embedding against direction-averaged summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureComparisonReport {
    pub model: ModelId,
    pub snr: Option<f64>,
    pub n_sims: usize,
    pub baseline: String,
    pub names: Vec<String>,
    pub truths: Vec<Vec<f64>>,
    pub learned_map: Vec<Vec<f64>>,
    pub summary_map: Vec<Vec<f64>>,
    pub learned_degenerate: Vec<Vec<bool>>,
    pub summary_degenerate: Vec<Vec<bool>>,
    pub parameters: Vec<FeatureParameter>,
}

impl Report for FeatureComparisonReport {}

impl FeatureComparisonReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut header = vec!["voxel".to_string()];
        for n in &self.names {
            for s in ["truth", "learned_map", "summary_map", "kept"] {
                header.push(format!("{n}_{s}"));
            }
        }
        let rows = (0..self.truths.len()).map(|i| {
            let mut r = vec![i.to_string()];
            for j in 0..self.names.len() {
                r.push(num(self.truths[i][j]));
                r.push(num(self.learned_map[i][j]));
                r.push(num(self.summary_map[i][j]));
                r.push(u8::from(!self.learned_degenerate[i][j] && !self.summary_degenerate[i][j]).to_string());
            }
            r
        });
        write_rows(path.as_ref(), &header, rows)
    }
}

fn rmse(pairs: &[(f64, f64)]) -> f64 {
    (pairs.iter().map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pairs.len().max(1) as f64).sqrt()
}

/// `learned` must condition on raw signals, `summary` on shell means.
/// Per parameter, only voxels non-degenerate under both variants count.
pub fn compare_feature_extraction(
    learned: &Pipeline,
    summary: &Pipeline,
    n_sims: usize,
    snr: Option<f64>,
    opts: &HarnessOptions,
    seed: u64,
) -> Result<FeatureComparisonReport> {
    check_count(n_sims, "number of simulations")?;
    if learned.input != InputKind::RawSignal || summary.input != InputKind::ShellMeans {
        return Err(Error::Config("feature comparison needs a raw-signal and a shell-mean pipeline".into()));
    }
    if learned.spec != summary.spec {
        return Err(Error::Config("pipelines were trained on different priors".into()));
    }
    let spec = &learned.spec;
    let rows: Vec<(Vec<f64>, PosteriorSummary, PosteriorSummary)> = (0..n_sims)
        .into_par_iter()
        .map(|i| {
            let truth = draw_truth(spec, rng::derive(seed, TRUTH_TAG), i);
            let (_, x) = observe(&learned.sim, &truth, snr, rng::derive(seed, NOISE_TAG), i)?;
            let s = rng::derive(rng::derive(seed, FLOW_TAG), i as u64);
            let a = learned.infer(&x, opts.n_samples, s, &i.to_string(), &opts.summary)?;
            let b = summary.infer(&x, opts.n_samples, s, &i.to_string(), &opts.summary)?;
            Ok((truth.values, a, b))
        })
        .collect::<Result<_>>()?;
    let names = spec.space.names.clone();
    let truths: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
    let learned_map: Vec<Vec<f64>> = rows.iter().map(|r| maps(&r.1)).collect();
    let summary_map: Vec<Vec<f64>> = rows.iter().map(|r| maps(&r.2)).collect();
    let learned_degenerate: Vec<Vec<bool>> = rows.iter().map(|r| flags(&r.1)).collect();
    let summary_degenerate: Vec<Vec<bool>> = rows.iter().map(|r| flags(&r.2)).collect();
    let parameters = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let kept: Vec<usize> =
                (0..n_sims).filter(|&i| !learned_degenerate[i][j] && !summary_degenerate[i][j]).collect();
            let a: Vec<(f64, f64)> = kept.iter().map(|&i| (learned_map[i][j], truths[i][j])).collect();
            let b: Vec<(f64, f64)> = kept.iter().map(|&i| (summary_map[i][j], truths[i][j])).collect();
            FeatureParameter { name: name.clone(), n_kept: kept.len(), rmse_learned: rmse(&a), rmse_summary: rmse(&b) }
        })
        .collect();
    Ok(FeatureComparisonReport {
        model: spec.space.model_id,
        snr,
        n_sims,
        baseline: BASELINE_NOTE.to_string(),
        names,
        truths,
        learned_map,
        summary_map,
        learned_degenerate,
        summary_degenerate,
        parameters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrLevel {
    pub snr: Option<f64>,
    /// `[voxel][parameter]`, percent of the prior range.
    pub uncertainty: Vec<Vec<f64>>,
    pub mean_per_parameter: Vec<f64>,
    pub mean_overall: f64,
    pub histograms: Vec<Histogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrSweepReport {
    pub model: ModelId,
    pub n_sims: usize,
    pub names: Vec<String>,
    pub levels: Vec<SnrLevel>,
}

impl Report for SnrSweepReport {}

impl SnrSweepReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut header = vec!["snr".to_string()];
        header.extend(self.names.iter().map(|n| format!("{n}_mean_uncertainty")));
        header.push("overall".into());
        let rows = self.levels.iter().map(|l| {
            let mut r = vec![l.snr.map_or("none".into(), num)];
            r.extend(l.mean_per_parameter.iter().map(|&v| num(v)));
            r.push(num(l.mean_overall));
            r
        });
        write_rows(path.as_ref(), &header, rows)
    }
}

/// Uncertainty per noise level over one shared set of ground truths. Each
/// level uses its own pipeline, trained at that level's noise. Noise draws
/// are shared across levels and scaled by `1/snr`.
pub fn snr_sweep(levels: &[(Option<f64>, &Pipeline)], n_sims: usize, opts: &HarnessOptions, seed: u64) -> Result<SnrSweepReport> {
    check_count(n_sims, "number of simulations")?;
    let first = levels.first().ok_or_else(|| Error::Config("no SNR levels given".into()))?.1;
    if levels.iter().any(|(_, p)| p.spec != first.spec) {
        return Err(Error::Config("SNR pipelines were trained on different priors".into()));
    }
    let spec = &first.spec;
    let out = levels
        .iter()
        .map(|&(snr, p)| {
            let uncertainty: Vec<Vec<f64>> = (0..n_sims)
                .into_par_iter()
                .map(|i| {
                    let truth = draw_truth(spec, rng::derive(seed, TRUTH_TAG), i);
                    let (_, x) = observe(&p.sim, &truth, snr, rng::derive(seed, NOISE_TAG), i)?;
                    let s = p.infer(&x, opts.n_samples, rng::derive(rng::derive(seed, FLOW_TAG), i as u64), &i.to_string(), &opts.summary)?;
                    Ok(s.parameters.iter().map(|q| q.uncertainty_pct).collect())
                })
                .collect::<Result<_>>()?;
            let d = spec.dim();
            let mean_per_parameter: Vec<f64> =
                (0..d).map(|j| mean(&uncertainty.iter().map(|u| u[j]).collect::<Vec<_>>())).collect();
            let histograms = (0..d)
                .map(|j| Histogram::new(&uncertainty.iter().map(|u| u[j]).collect::<Vec<_>>(), 0.0, 100.0, opts.histogram_bins))
                .collect();
            Ok(SnrLevel {
                snr,
                mean_overall: mean(&mean_per_parameter),
                uncertainty,
                mean_per_parameter,
                histograms,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SnrSweepReport { model: spec.space.model_id, n_sims, names: spec.space.names.clone(), levels: out })
}

/// Direction-averaged model signals against the envelope of signals
/// re-simulated from posterior draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcReport {
    pub model: ModelId,
    pub snr: Option<f64>,
    pub n_truths: usize,
    pub n_pp: usize,
    pub shell_bvalues: Vec<f64>,
    pub truths: Vec<Vec<f64>>,
    /// `[truth][shell]` shell means of M(θ_i).
    pub observed: Vec<Vec<f64>>,
    /// `[truth][shell]` shell means of the (possibly noisy) inference input.
    pub input: Vec<Vec<f64>>,
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    /// Fraction of (truth, shell) pairs inside the envelope.
    pub inside_fraction: f64,
    pub mean_width: f64,
}

impl Report for PpcReport {}

impl PpcReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = ["truth", "bvalue", "observed", "input", "lower", "upper", "inside"].map(String::from);
        let mut rows = Vec::new();
        for i in 0..self.n_truths {
            for (k, b) in self.shell_bvalues.iter().enumerate() {
                let (o, lo, hi) = (self.observed[i][k], self.lower[i][k], self.upper[i][k]);
                let inside = u8::from(o >= lo && o <= hi).to_string();
                rows.push(vec![i.to_string(), num(*b), num(o), num(self.input[i][k]), num(lo), num(hi), inside]);
            }
        }
        write_rows(path.as_ref(), &header, rows)
    }
}

/// θ_i from the prior, x_i = M(θ_i), inference on x_i (plus noise at
/// `snr`), `n_pp` posterior draws θ_{i,s}, reconstructions M(θ_{i,s}) with
/// random orientations, and a per-shell min-max envelope of their direction
/// averages that x_i is checked against.
pub fn posterior_predictive_check(
    pipeline: &Pipeline,
    n_truths: usize,
    n_pp: usize,
    snr: Option<f64>,
    seed: u64,
) -> Result<PpcReport> {
    check_count(n_truths, "number of truths")?;
    check_count(n_pp, "number of reconstructions")?;
    let spec = &pipeline.spec;
    let protocol = pipeline.sim.protocol();
    let draws = n_pp.max(muguide::posterior::MIN_REJECTION_TARGET);
    type Row = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
    let rows: Vec<Row> = (0..n_truths)
        .into_par_iter()
        .map(|i| {
            let truth = draw_truth(spec, rng::derive(seed, TRUTH_TAG), i);
            let (clean, x) = observe(&pipeline.sim, &truth, snr, rng::derive(seed, NOISE_TAG), i)?;
            let observed = protocol.shell_means(&clean)?;
            let input = protocol.shell_means(&x)?;
            let post = pipeline.posterior(&x, draws, rng::derive(rng::derive(seed, FLOW_TAG), i as u64), &i.to_string())?;
            let mut r = rng::stream(rng::derive(seed, RECON_TAG), i as u64);
            let k = observed.len();
            let (mut lo, mut hi) = (vec![f64::INFINITY; k], vec![f64::NEG_INFINITY; k]);
            for row in post.samples.samples.rows().into_iter().take(n_pp) {
                let theta = ParameterVector::new(row.to_vec(), random_orientation(&mut r));
                let m = protocol.shell_means(&pipeline.sim.simulate(&theta)?)?;
                for s in 0..k {
                    lo[s] = lo[s].min(m[s]);
                    hi[s] = hi[s].max(m[s]);
                }
            }
            Ok((truth.values, observed, input, lo, hi))
        })
        .collect::<Result<_>>()?;
    let (mut inside, mut total, mut width) = (0usize, 0usize, 0.0);
    for (_, o, _, lo, hi) in &rows {
        for s in 0..o.len() {
            total += 1;
            inside += usize::from(o[s] >= lo[s] && o[s] <= hi[s]);
            width += hi[s] - lo[s];
        }
    }
    Ok(PpcReport {
        model: spec.space.model_id,
        snr,
        n_truths,
        n_pp,
        shell_bvalues: protocol.weighted_shells().map(|s| s.bvalue_s_mm2).collect(),
        truths: rows.iter().map(|r| r.0.clone()).collect(),
        observed: rows.iter().map(|r| r.1.clone()).collect(),
        input: rows.iter().map(|r| r.2.clone()).collect(),
        lower: rows.iter().map(|r| r.3.clone()).collect(),
        upper: rows.iter().map(|r| r.4.clone()).collect(),
        inside_fraction: inside as f64 / total as f64,
        mean_width: width / total as f64,
    })
}

/// Pearson correlation; 0 when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// `[feature][statistic]` correlations between the columns of two matrices
/// with matching rows.
pub fn correlation_matrix(features: &Array2<f64>, statistics: &Array2<f64>) -> Result<Vec<Vec<f64>>> {
    if features.nrows() != statistics.nrows() {
        return Err(Error::Dimension { expected: features.nrows(), got: statistics.nrows() });
    }
    Ok(features
        .columns()
        .into_iter()
        .map(|f| {
            let f = f.to_vec();
            statistics.columns().into_iter().map(|s| pearson(&f, &s.to_vec())).collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub model: ModelId,
    pub snr: Option<f64>,
    pub n_sims: usize,
    pub baseline: String,
    pub shell_bvalues: Vec<f64>,
    /// `[feature][shell]`
    pub matrix: Vec<Vec<f64>>,
    pub max_abs_per_feature: Vec<f64>,
    pub weak_threshold: f64,
    /// Features whose largest |correlation| is below the threshold.
    pub weakly_correlated: Vec<usize>,
}

impl Report for CorrelationReport {}

impl CorrelationReport {
    pub fn from_matrix(
        model: ModelId,
        snr: Option<f64>,
        n_sims: usize,
        shell_bvalues: Vec<f64>,
        matrix: Vec<Vec<f64>>,
    ) -> Self {
        let max_abs_per_feature: Vec<f64> =
            matrix.iter().map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect();
        let weakly_correlated = (0..matrix.len()).filter(|&k| max_abs_per_feature[k] < WEAK_CORRELATION).collect();
        CorrelationReport {
            model,
            snr,
            n_sims,
            baseline: BASELINE_NOTE.to_string(),
            shell_bvalues,
            matrix,
            max_abs_per_feature,
            weak_threshold: WEAK_CORRELATION,
            weakly_correlated,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut header = vec!["feature".to_string()];
        header.extend(self.shell_bvalues.iter().map(|b| format!("b{b}")));
        let rows = self.matrix.iter().enumerate().map(|(k, r)| {
            let mut row = vec![k.to_string()];
            row.extend(r.iter().map(|&v| num(v)));
            row
        });
        write_rows(path.as_ref(), &header, rows)
    }
}

/// Learned features against shell means over `n_sims` simulations.
pub fn feature_correlation(pipeline: &Pipeline, n_sims: usize, snr: Option<f64>, seed: u64) -> Result<CorrelationReport> {
    if n_sims < 2 {
        return Err(Error::Config("correlation needs at least 2 simulations".into()));
    }
    if pipeline.input != InputKind::RawSignal || pipeline.flow.architecture().conditioner != Conditioner::Mlp {
        return Err(Error::Config("feature correlation needs a pipeline with a learned embedding".into()));
    }
    let spec = &pipeline.spec;
    let protocol = pipeline.sim.protocol();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n_sims)
        .into_par_iter()
        .map(|i| {
            let truth = draw_truth(spec, rng::derive(seed, TRUTH_TAG), i);
            let (_, x) = observe(&pipeline.sim, &truth, snr, rng::derive(seed, NOISE_TAG), i)?;
            Ok((pipeline.flow.features(&x)?.to_vec(), protocol.shell_means(&x)?))
        })
        .collect::<Result<_>>()?;
    let to_matrix = |k: usize, pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> Vec<f64>| {
        Array2::from_shape_vec((n_sims, k), rows.iter().flat_map(pick).collect()).expect("rectangular rows")
    };
    let nf = rows[0].0.len();
    let ns = rows[0].1.len();
    let features = to_matrix(nf, &|r| r.0.clone());
    let stats = to_matrix(ns, &|r| r.1.clone());
    let matrix = correlation_matrix(&features, &stats)?;
    Ok(CorrelationReport::from_matrix(
        spec.space.model_id,
        snr,
        n_sims,
        protocol.weighted_shells().map(|s| s.bvalue_s_mm2).collect(),
        matrix,
    ))
}

/// Parametric maps of a synthetic 2-D phantom, `[parameter][pixel]` in
/// row-major pixel order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomReport {
    pub model: ModelId,
    pub snr: Option<f64>,
    pub nx: usize,
    pub ny: usize,
    pub names: Vec<String>,
    pub truth: Vec<Vec<f64>>,
    pub map: Vec<Vec<f64>>,
    pub uncertainty_pct: Vec<Vec<f64>>,
    pub ambiguity_pct: Vec<Vec<f64>>,
    pub degenerate: Vec<Vec<bool>>,
}

impl Report for PhantomReport {}

/// Smooth unit-cube pattern mapped through the prior, with the fibre
/// direction rotating across the image.
pub fn phantom_truth(spec: &muguide::priors::PriorSpec, nx: usize, ny: usize, ix: usize, iy: usize) -> ParameterVector {
    let (x, y) = (ix as f64 / nx.max(2).saturating_sub(1) as f64, iy as f64 / ny.max(2).saturating_sub(1) as f64);
    let u: Vec<f64> = (0..spec.dim())
        .map(|j| {
            let a = 1.0 + j as f64 * 0.37;
            let phase = j as f64 * 1.3;
            0.15 + 0.7 * (0.5 + 0.5 * (std::f64::consts::PI * (a * x + (2.0 - a * 0.5) * y) + phase).sin())
        })
        .collect();
    let mut values = vec![0.0; spec.dim()];
    spec.from_unit_cube(&u, &mut values);
    let polar = std::f64::consts::FRAC_PI_2 * y;
    let azimuth = std::f64::consts::PI * x;
    ParameterVector::new(values, muguide::forward::unit_from_angles(polar, azimuth))
}

pub fn phantom_maps(pipeline: &Pipeline, nx: usize, ny: usize, snr: Option<f64>, opts: &HarnessOptions, seed: u64) -> Result<PhantomReport> {
    check_count(nx * ny, "phantom size")?;
    let spec = &pipeline.spec;
    let pixels: Vec<(Vec<f64>, Option<PosteriorSummary>)> = (0..nx * ny)
        .into_par_iter()
        .map(|p| {
            let truth = phantom_truth(spec, nx, ny, p % nx, p / nx);
            let (_, x) = observe(&pipeline.sim, &truth, snr, rng::derive(seed, NOISE_TAG), p)?;
            match pipeline.infer(&x, opts.n_samples, rng::derive(rng::derive(seed, FLOW_TAG), p as u64), &p.to_string(), &opts.summary) {
                Ok(s) => Ok((truth.values, Some(s))),
                Err(Error::LowAcceptance { .. }) => Ok((truth.values, None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let d = spec.dim();
    let field = |f: &dyn Fn(&muguide::posterior::ParameterSummary) -> f64| -> Vec<Vec<f64>> {
        (0..d).map(|j| pixels.iter().map(|(_, s)| s.as_ref().map_or(f64::NAN, |s| f(&s.parameters[j]))).collect()).collect()
    };
    Ok(PhantomReport {
        model: spec.space.model_id,
        snr,
        nx,
        ny,
        names: spec.space.names.clone(),
        truth: (0..d).map(|j| pixels.iter().map(|(t, _)| t[j]).collect()).collect(),
        map: field(&|p| p.map),
        uncertainty_pct: field(&|p| p.uncertainty_pct),
        ambiguity_pct: field(&|p| p.ambiguity_pct),
        degenerate: (0..d)
            .map(|j| pixels.iter().map(|(_, s)| s.as_ref().is_some_and(|s| s.parameters[j].degenerate)).collect())
            .collect(),
    })
}
