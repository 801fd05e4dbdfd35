//! Subcommand bodies. Each writes its outputs plus `manifest.json` into the
//! output directory.

use std::path::{Path, PathBuf};

use muguide::forward::dataset::{generate_with, TrainingSet};
use muguide::io::{read_signals, write_matrix};
use muguide::mcmc::run_amwg_with;
use muguide::posterior::{summarize, PosteriorSamples, PosteriorSummary};
use muguide::{rng, Error, Result, Simulator};
use muguide_harness::{self as harness, svg, HarnessOptions, InputKind, Manifest, Pipeline, Report};
use rayon::prelude::*;

use crate::config::RunConfig;

const DEFAULT_TRAINING_ROWS: usize = 100_000;
const DEFAULT_INFER_SAMPLES: usize = 50_000;

/// Output directory plus a manifest that collects written files.
struct Run {
    dir: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn start(command: &str, cfg: &RunConfig) -> Result<Self> {
        harness::init_worker_pool(cfg.workers)?;
        let dir = cfg.output_dir()?;
        let manifest = Manifest::new(command, cfg.model, cfg, cfg.seed.into_iter().collect());
        Ok(Run { dir, manifest })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn finish(self) -> Result<()> {
        let path = self.dir.join("manifest.json");
        self.manifest.finish(path)?;
        Ok(())
    }
}

/// Simulator on the effective protocol and, with a b-value cutoff, the
/// retained columns of the full protocol.
fn simulator(cfg: &RunConfig) -> Result<(Simulator, Option<Vec<usize>>)> {
    let space = cfg.prior()?.space;
    let (full, reduced) = cfg.protocol()?;
    match reduced {
        Some((p, cols)) => Ok((Simulator::with_default_quadrature(space, p)?, Some(cols))),
        None => Ok((Simulator::with_default_quadrature(space, full)?, None)),
    }
}

fn train_and_save(run: &mut Run, cfg: &RunConfig, snr: Option<f64>, input: InputKind, tag: &str) -> Result<Pipeline> {
    let spec = cfg.prior()?;
    let (sim, cols) = simulator(cfg)?;
    let n = cfg.n_train.unwrap_or(DEFAULT_TRAINING_ROWS);
    let (mut p, report) = Pipeline::train(&spec, &sim, input, snr, n, &cfg.training)?;
    p.columns = cols;
    p.save(run.path(tag))?;
    run.manifest.outputs.push(format!("{tag}.flow"));
    report.write_csv(run.path(&format!("{tag}_training.csv")))?;
    muguide::io::write_json(run.path(&format!("{tag}_training.json")), &report)?;
    Ok(p)
}

/// Loads `checkpoint` or trains a fresh pipeline at `snr`.
fn pipeline(run: &mut Run, cfg: &RunConfig, checkpoint: Option<&PathBuf>, snr: Option<f64>, input: InputKind, tag: &str) -> Result<Pipeline> {
    match checkpoint {
        Some(c) => {
            let p = Pipeline::load(c)?;
            if let Some(m) = cfg.model {
                if m != p.spec.space.model_id {
                    return Err(Error::Config(format!("checkpoint is for {}, not {m}", p.spec.space.model_id)));
                }
            }
            Ok(p)
        }
        None => train_and_save(run, cfg, snr, input, tag),
    }
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let n = cfg.n(None)?;
    let spec = cfg.prior()?;
    let mut run = Run::start("simulate", cfg)?;
    let (sim, _) = simulator(cfg)?;
    let mut set = generate_with(&sim, &spec, n, cfg.snr, seed)?;
    set.meta.protocol_path.clone_from(&cfg.protocol);
    set.save(run.path("dataset"))?;
    run.manifest.outputs.extend(["dataset.theta.bin", "dataset.x.bin", "dataset.json"].map(String::from));
    println!("wrote {n} simulations to {}", run.dir.display());
    run.finish()
}

pub fn train(cfg: &RunConfig, dataset: Option<&Path>) -> Result<()> {
    cfg.seed()?;
    let mut run = Run::start("train", cfg)?;
    let (pipeline, report) = match dataset {
        None => {
            let spec = cfg.prior()?;
            let (sim, cols) = simulator(cfg)?;
            let n = cfg.n_train.unwrap_or(DEFAULT_TRAINING_ROWS);
            let (mut p, r) = Pipeline::train(&spec, &sim, cfg.input, cfg.snr, n, &cfg.training)?;
            p.columns = cols;
            (p, r)
        }
        Some(stem) => {
            let set = TrainingSet::load(stem)?;
            if let Some(m) = cfg.model {
                if m != set.meta.prior.space.model_id {
                    return Err(Error::Config(format!("dataset is for {}, not {m}", set.meta.prior.space.model_id)));
                }
            }
            let spec = set.meta.prior.clone();
            let mut c = cfg.clone();
            c.model = Some(spec.space.model_id);
            if c.protocol.is_none() {
                c.protocol.clone_from(&set.meta.protocol_path);
            }
            let (full, reduced) = c.protocol()?;
            let x = match &reduced {
                Some((p, cols)) if set.x.ncols() == full.len() && cols.len() == p.len() => set.x.select(ndarray::Axis(1), cols),
                _ => set.x.clone(),
            };
            let (protocol, cols) = match reduced {
                Some((p, cols)) => (p, Some(cols)),
                None => (full, None),
            };
            protocol.check_signal_len(x.ncols())?;
            let sim = Simulator::new(spec.space.clone(), protocol, set.meta.quadrature_order)?;
            let (mut p, r) = Pipeline::fit(&spec, &sim, cfg.input, set.meta.snr, &set.theta, &x, &cfg.training)?;
            p.columns = cols;
            (p, r)
        }
    };
    pipeline.save(run.path("model"))?;
    run.manifest.outputs.push("model.flow".into());
    report.write_csv(run.path("training.csv"))?;
    muguide::io::write_json(run.path("training.json"), &report)?;
    let last = report.epochs.last().map_or(f64::NAN, |e| e.validation_loss);
    println!(
        "final validation loss {last:.6} (best {:.6} at epoch {} of {})",
        report.best_validation_loss, report.best_epoch, report.stopped_epoch
    );
    run.finish()
}

/// Divides by the mean b0 signal; `None` when that mean is not positive.
fn normalize(x: &[f64], b0: &[usize]) -> Option<Vec<f64>> {
    if b0.is_empty() {
        return Some(x.to_vec());
    }
    let m = b0.iter().map(|&i| x[i]).sum::<f64>() / b0.len() as f64;
    (m > 0.0 && m.is_finite()).then(|| x.iter().map(|v| v / m).collect())
}

struct VoxelRow {
    summary: Option<PosteriorSummary>,
    accepted_fraction: f64,
    error: String,
}

fn write_voxel_table(path: &Path, names: &[String], rows: &[VoxelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut header = vec!["voxel_id".to_string()];
    for n in names {
        for s in ["map", "uncertainty", "ambiguity", "degenerate"] {
            header.push(format!("{n}_{s}"));
        }
    }
    header.extend(["accepted_fraction", "errors"].map(String::from));
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        match &r.summary {
            Some(s) => {
                for p in &s.parameters {
                    rec.extend([format!("{:?}", p.map), format!("{:?}", p.uncertainty_pct), format!("{:?}", p.ambiguity_pct)]);
                    rec.push(u8::from(p.degenerate).to_string());
                }
            }
            None => rec.extend(std::iter::repeat(String::new()).take(4 * names.len())),
        }
        rec.push(format!("{:?}", r.accepted_fraction));
        rec.push(r.error.clone());
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn infer(cfg: &RunConfig, checkpoints: &[PathBuf], signals: &Path, save_samples: bool) -> Result<()> {
    let seed = cfg.seed()?;
    let ckpt = checkpoints.first().ok_or_else(|| Error::Config("infer needs --checkpoint".into()))?;
    let mut run = Run::start("infer", cfg)?;
    let p = Pipeline::load(ckpt)?;
    let table = read_signals(signals)?;
    let n = cfg.infer_samples.unwrap_or(DEFAULT_INFER_SAMPLES);
    let b0 = p.sim.protocol().b0_indices().to_vec();
    if save_samples {
        std::fs::create_dir_all(run.dir.join("samples")).map_err(|e| Error::io(run.dir.join("samples"), e))?;
    }
    let dir = run.dir.clone();
    let rows: Vec<VoxelRow> = (0..table.signals.nrows())
        .into_par_iter()
        .map(|i| {
            let full = table.signals.row(i).to_vec();
            let x = p.select_columns(&full)?;
            p.sim.protocol().check_signal_len(x.len())?;
            let Some(x) = normalize(&x, &b0) else {
                return Ok(VoxelRow { summary: None, accepted_fraction: 0.0, error: "b0_not_positive".into() });
            };
            match p.posterior(&x, n, rng::derive(seed, i as u64), &i.to_string()) {
                Ok(post) => {
                    if save_samples {
                        write_matrix(dir.join("samples").join(format!("voxel_{i}.bin")), &post.samples.samples)?;
                    }
                    let s = summarize(&post.samples, &cfg.harness.summary)?;
                    Ok(VoxelRow { summary: Some(s), accepted_fraction: post.samples.accepted_fraction, error: String::new() })
                }
                Err(Error::LowAcceptance { accepted_fraction, .. }) => {
                    Ok(VoxelRow { summary: None, accepted_fraction, error: "low_acceptance".into() })
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    write_voxel_table(&run.path("summary.csv"), &p.spec.space.names, &rows)?;
    let flagged = rows.iter().filter(|r| !r.error.is_empty()).count();
    println!("{} voxels, {flagged} flagged", rows.len());
    run.finish()
}

pub fn mcmc(cfg: &RunConfig, signals: &Path) -> Result<()> {
    let seed = cfg.seed()?;
    let spec = cfg.prior()?;
    let mut run = Run::start("mcmc", cfg)?;
    let (sim, cols) = simulator(cfg)?;
    let table = read_signals(signals)?;
    let b0 = sim.protocol().b0_indices().to_vec();
    let chains = run.dir.join("chains");
    std::fs::create_dir_all(&chains).map_err(|e| Error::io(&chains, e))?;
    let mut mcfg = cfg.mcmc.clone();
    if let Some(snr) = cfg.snr {
        mcfg.sigma_noise = 1.0 / snr;
    }
    let rows: Vec<VoxelRow> = (0..table.signals.nrows())
        .into_par_iter()
        .map(|i| {
            let full = table.signals.row(i).to_vec();
            let x = match &cols {
                Some(c) => c.iter().map(|&j| full.get(j).copied().ok_or(Error::Dimension { expected: j + 1, got: full.len() })).collect::<Result<Vec<_>>>()?,
                None => full,
            };
            sim.protocol().check_signal_len(x.len())?;
            let Some(x) = normalize(&x, &b0) else {
                return Ok(VoxelRow { summary: None, accepted_fraction: 0.0, error: "b0_not_positive".into() });
            };
            let c = muguide::mcmc::McmcConfig { rng_seed: rng::derive(seed, i as u64), ..mcfg.clone() };
            let chain = run_amwg_with(&sim, &spec, &x, &c)?;
            chain.save(chains.join(format!("voxel_{i}")))?;
            let acc = chain.acceptance_rates().iter().sum::<f64>() / spec.dim() as f64;
            let s = summarize(&PosteriorSamples { samples: chain.trace, space: spec.space.clone(), accepted_fraction: 1.0 }, &cfg.harness.summary)?;
            Ok(VoxelRow { summary: Some(s), accepted_fraction: acc, error: String::new() })
        })
        .collect::<Result<_>>()?;
    write_voxel_table(&run.path("summary.csv"), &spec.space.names, &rows)?;
    println!("{} voxels sampled", rows.len());
    run.finish()
}

fn harness_opts(cfg: &RunConfig) -> &HarnessOptions {
    &cfg.harness
}

pub fn compare(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<()> {
    let seed = cfg.seed()?;
    cfg.model()?;
    let n = cfg.n(Some(200))?;
    let mut run = Run::start("compare", cfg)?;
    let p = pipeline(&mut run, cfg, checkpoints.first(), cfg.snr, InputKind::RawSignal, "model")?;
    let r = harness::compare_with_mcmc(&p, n, cfg.snr, &cfg.mcmc, harness_opts(cfg), seed)?;
    r.save_json(run.path("comparison.json"))?;
    r.write_csv(run.path("comparison.csv"))?;
    svg::bias_histograms(&r, run.path("bias_histograms.svg"))?;
    for q in &r.parameters {
        println!("{}: mean |bias| flow {:.4}, MCMC {:.4}", q.name, q.mean_abs_bias_flow, q.mean_abs_bias_mcmc);
    }
    println!("per-voxel seconds: flow {:.4}, MCMC {:.3} ({:.0}x)", r.mean_flow_seconds, r.mean_mcmc_seconds, r.speedup);
    run.finish()
}

pub fn ppc(cfg: &RunConfig, checkpoints: &[PathBuf], n_pp: usize) -> Result<()> {
    let seed = cfg.seed()?;
    cfg.model()?;
    let n = cfg.n(Some(10))?;
    let mut run = Run::start("ppc", cfg)?;
    let p = pipeline(&mut run, cfg, checkpoints.first(), cfg.snr, InputKind::RawSignal, "model")?;
    let r = harness::posterior_predictive_check(&p, n, n_pp, cfg.snr, seed)?;
    r.save_json(run.path("ppc.json"))?;
    r.write_csv(run.path("ppc.csv"))?;
    svg::ppc_envelopes(&r, run.path("ppc.svg"))?;
    println!("inside envelope: {:.3}, mean width {:.4}", r.inside_fraction, r.mean_width);
    run.finish()
}

pub fn census(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<()> {
    let seed = cfg.seed()?;
    cfg.model()?;
    let n = cfg.n(Some(1000))?;
    let mut run = Run::start("census", cfg)?;
    let p = pipeline(&mut run, cfg, checkpoints.first(), cfg.snr, InputKind::RawSignal, "model")?;
    let r = harness::degeneracy_census(&p, n, cfg.snr, harness_opts(cfg), seed)?;
    r.save_json(run.path("census.json"))?;
    r.write_csv(run.path("census.csv"))?;
    for (name, c) in r.names.iter().zip(&r.counts) {
        println!("{name}: {c} degenerate");
    }
    println!("any parameter: {:.4} of {} voxels ({:.1}s)", r.any_fraction, r.n_sims - r.failed, r.seconds);
    run.finish()
}

fn parse_levels(s: &str) -> Result<Vec<Option<f64>>> {
    s.split(',')
        .map(|t| match t.trim() {
            "none" | "inf" => Ok(None),
            v => match v.parse::<f64>() {
                Ok(x) if x > 0.0 && x.is_finite() => Ok(Some(x)),
                _ => Err(Error::Config(format!("bad SNR level `{v}`"))),
            },
        })
        .collect()
}

pub fn snr_sweep(cfg: &RunConfig, checkpoints: &[PathBuf], levels: &str) -> Result<()> {
    let seed = cfg.seed()?;
    cfg.model()?;
    let levels = parse_levels(levels)?;
    if !checkpoints.is_empty() && checkpoints.len() != levels.len() {
        return Err(Error::Config(format!("{} checkpoints for {} SNR levels", checkpoints.len(), levels.len())));
    }
    let n = cfg.n(Some(1000))?;
    let mut run = Run::start("snr-sweep", cfg)?;
    let pipelines = levels
        .iter()
        .enumerate()
        .map(|(k, &snr)| {
            let tag = format!("model_{}", snr.map_or("none".to_string(), |s| s.to_string()));
            pipeline(&mut run, cfg, checkpoints.get(k), snr, InputKind::RawSignal, &tag)
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(Option<f64>, &Pipeline)> = levels.iter().copied().zip(&pipelines).collect();
    let r = harness::snr_sweep(&pairs, n, harness_opts(cfg), seed)?;
    r.save_json(run.path("snr_sweep.json"))?;
    r.write_csv(run.path("snr_sweep.csv"))?;
    for l in &r.levels {
        println!("snr {:?}: mean uncertainty {:.3}", l.snr, l.mean_overall);
    }
    run.finish()
}

pub fn correlation(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<()> {
    let seed = cfg.seed()?;
    cfg.model()?;
    let n = cfg.n(Some(1000))?;
    let mut run = Run::start("correlation", cfg)?;
    let p = pipeline(&mut run, cfg, checkpoints.first(), cfg.snr, InputKind::RawSignal, "model")?;
    let r = harness::feature_correlation(&p, n, cfg.snr, seed)?;
    r.save_json(run.path("correlation.json"))?;
    r.write_csv(run.path("correlation.csv"))?;
    svg::correlation_heatmap(&r, run.path("correlation.svg"))?;
    println!("features with max |r| < {}: {:?}", r.weak_threshold, r.weakly_correlated);
    run.finish()
}

pub fn features(cfg: &RunConfig, checkpoints: &[PathBuf], summary: Option<&Path>) -> Result<()> {
    let seed = cfg.seed()?;
    cfg.model()?;
    let n = cfg.n(Some(100))?;
    let mut run = Run::start("features", cfg)?;
    let learned = pipeline(&mut run, cfg, checkpoints.first(), cfg.snr, InputKind::RawSignal, "model")?;
    let summary_ckpt = summary.map(Path::to_path_buf);
    let summary = pipeline(&mut run, cfg, summary_ckpt.as_ref(), cfg.snr, InputKind::ShellMeans, "summary_model")?;
    let r = harness::compare_feature_extraction(&learned, &summary, n, cfg.snr, harness_opts(cfg), seed)?;
    r.save_json(run.path("features.json"))?;
    r.write_csv(run.path("features.csv"))?;
    for q in &r.parameters {
        println!("{}: RMSE learned {:.4}, summary {:.4} over {} voxels", q.name, q.rmse_learned, q.rmse_summary, q.n_kept);
    }
    run.finish()
}

pub fn phantom(cfg: &RunConfig, checkpoints: &[PathBuf], nx: usize, ny: usize) -> Result<()> {
    let seed = cfg.seed()?;
    cfg.model()?;
    let mut run = Run::start("phantom", cfg)?;
    let p = pipeline(&mut run, cfg, checkpoints.first(), cfg.snr, InputKind::RawSignal, "model")?;
    let r = harness::phantom_maps(&p, nx, ny, cfg.snr, harness_opts(cfg), seed)?;
    r.save_json(run.path("phantom.json"))?;
    svg::phantom_grid(&r, run.path("phantom.svg"))?;
    println!("{}x{} phantom written", nx, ny);
    run.finish()
}
