use muguide::error::Error;
use muguide::forward::{ModelId, ParameterSpace};
use muguide::posterior::{
    detect_degeneracy, rejection_sample, summarize, summarize_parameter, Bandwidth, EmOptions, PosteriorSamples,
    Sampler, SummaryOptions,
};
use muguide::priors::PriorSpec;
use muguide::rng;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn normal_samples(mu: f64, sd: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    let d = Normal::new(mu, sd).unwrap();
    (0..n).map(|_| d.sample(&mut r)).collect()
}

fn mixture_samples(a: (f64, f64), b: (f64, f64), n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    let (da, db) = (Normal::new(a.0, a.1).unwrap(), Normal::new(b.0, b.1).unwrap());
    (0..n).map(|i| if i % 2 == 0 { da.sample(&mut r) } else { db.sample(&mut r) }).collect()
}

#[test]
fn gaussian_ambiguity_matches_fwhm_identity() {
    let v = normal_samples(0.5, 0.1, 15_000, 1);
    let s = summarize_parameter("p", &v, 0.0, 1.0, &SummaryOptions::default()).unwrap();
    let expected = 2.0 * (2.0 * 2f64.ln()).sqrt() * 0.1 * 100.0;
    assert!((s.ambiguity_pct - expected).abs() < 1.5, "{} vs {expected}", s.ambiguity_pct);
    assert!((s.map - 0.5).abs() < 0.03);
    assert!(!s.degenerate);
}

#[test]
fn uncertainty_matches_brute_force() {
    let v = normal_samples(0.5, 0.1, 2000, 2);
    let opts = SummaryOptions::default();
    let s = summarize_parameter("p", &v, 0.0, 1.0, &opts).unwrap();
    // exact KDE at every sample with the same bandwidth and reflections
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = v.clone();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (sorted.len() - 1) as f64 * p;
        let i = h.floor() as usize;
        sorted[i] + (h - i as f64) * (sorted[(i + 1).min(sorted.len() - 1)] - sorted[i])
    };
    let h = 0.9 * sd.min((q(0.75) - q(0.25)) / 1.34) * n.powf(-0.2);
    let dens: Vec<f64> = v
        .iter()
        .map(|&x| {
            v.iter()
                .map(|&y| {
                    let k = |c: f64| (-0.5 * ((x - c) / h).powi(2)).exp();
                    k(y) + k(-y) + k(2.0 - y)
                })
                .sum::<f64>()
        })
        .collect();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| dens[b].total_cmp(&dens[a]));
    let mut top: Vec<f64> = idx[..v.len() / 2].iter().map(|&i| v[i]).collect();
    top.sort_by(f64::total_cmp);
    let tq = |p: f64| {
        let h = (top.len() - 1) as f64 * p;
        let i = h.floor() as usize;
        top[i] + (h - i as f64) * (top[(i + 1).min(top.len() - 1)] - top[i])
    };
    let brute = 100.0 * (tq(0.75) - tq(0.25));
    assert!((s.uncertainty_pct - brute).abs() < 0.5, "{} vs {brute}", s.uncertainty_pct);
}

#[test]
fn near_delta_posterior() {
    let mut r = rng::seeded(3);
    let v: Vec<f64> = (0..5000).map(|_| 0.5 + r.gen_range(-1e-6..1e-6)).collect();
    let s = summarize_parameter("p", &v, 0.0, 1.0, &SummaryOptions::default()).unwrap();
    assert!(s.uncertainty_pct < 0.5 && s.ambiguity_pct < 0.5, "{s:?}");
    assert!((s.map - 0.5).abs() < 2e-3);
}

#[test]
fn affine_equivariance() {
    let v = mixture_samples((0.3, 0.05), (0.6, 0.1), 4000, 4);
    let opts = SummaryOptions::default();
    let a = summarize_parameter("p", &v, 0.0, 1.0, &opts).unwrap();
    let (scale, shift) = (2.9, 0.1);
    let w: Vec<f64> = v.iter().map(|x| x * scale + shift).collect();
    let b = summarize_parameter("p", &w, shift, scale + shift, &opts).unwrap();
    assert!((a.uncertainty_pct - b.uncertainty_pct).abs() < 1e-9);
    assert!((a.ambiguity_pct - b.ambiguity_pct).abs() < 1e-9);
    assert!((a.map * scale + shift - b.map).abs() < 1e-9);
    assert_eq!(a.degenerate, b.degenerate);
}

#[test]
fn wider_dispersion_does_not_decrease_ambiguity() {
    let v = normal_samples(0.5, 0.05, 5000, 5);
    let opts = SummaryOptions::default();
    let base = summarize_parameter("p", &v, 0.0, 1.0, &opts).unwrap().ambiguity_pct;
    for c in [1.2, 1.5, 2.0] {
        let w: Vec<f64> = v.iter().map(|x| 0.5 + c * (x - 0.5)).collect();
        assert!(summarize_parameter("p", &w, 0.0, 1.0, &opts).unwrap().ambiguity_pct >= base);
    }
}

#[test]
fn duplication_invariance_with_fixed_bandwidth() {
    let v = mixture_samples((0.3, 0.05), (0.6, 0.1), 3000, 6);
    let opts = SummaryOptions { bandwidth: Bandwidth::FractionOfRange(0.02), ..Default::default() };
    let a = summarize_parameter("p", &v, 0.0, 1.0, &opts).unwrap();
    let vv: Vec<f64> = v.iter().chain(&v).copied().collect();
    let b = summarize_parameter("p", &vv, 0.0, 1.0, &opts).unwrap();
    assert!((a.uncertainty_pct - b.uncertainty_pct).abs() < 1e-9);
    assert!((a.ambiguity_pct - b.ambiguity_pct).abs() < 1e-9);
    assert!((a.map - b.map).abs() < 1e-9);
}

#[test]
fn degeneracy_examples() {
    let o = EmOptions::default();
    let (d, _) = detect_degeneracy(&normal_samples(0.5, 0.05, 5000, 7), (0.0, 1.0), &o).unwrap();
    assert!(!d);
    let (d, fit) = detect_degeneracy(&mixture_samples((0.2, 0.03), (0.8, 0.03), 5000, 8), (0.0, 1.0), &o).unwrap();
    assert!(d);
    assert!((fit.mu1 - 0.2).abs() < 0.01 && (fit.mu2 - 0.8).abs() < 0.01 && (fit.weight - 0.5).abs() < 0.05);
    let (d, _) = detect_degeneracy(&mixture_samples((0.45, 0.2), (0.55, 0.2), 5000, 9), (0.0, 1.0), &o).unwrap();
    assert!(!d);
    assert!(matches!(
        detect_degeneracy(&[0.5; 10], (0.0, 1.0), &o),
        Err(Error::InsufficientSamples { .. })
    ));
}

#[test]
fn degeneracy_is_order_invariant() {
    let o = EmOptions::default();
    for (i, v) in [
        mixture_samples((0.2, 0.03), (0.8, 0.03), 3000, 10),
        mixture_samples((0.4, 0.05), (0.6, 0.05), 3000, 11),
        normal_samples(0.3, 0.1, 3000, 12),
    ]
    .into_iter()
    .enumerate()
    {
        let (a, _) = detect_degeneracy(&v, (0.0, 1.0), &o).unwrap();
        let mut w = v.clone();
        w.shuffle(&mut rng::seeded(i as u64));
        let (b, _) = detect_degeneracy(&w, (0.0, 1.0), &o).unwrap();
        assert_eq!(a, b);
    }
}

struct HalfOut;

impl Sampler for HalfOut {
    fn draw(&self, n: usize, seed: u64) -> muguide::Result<Array2<f64>> {
        let mut r = rng::seeded(seed);
        Ok(Array2::from_shape_fn((n, 3), |(_, j)| {
            if j == 0 && r.gen_bool(0.5) {
                2.0
            } else {
                0.5 + 0.1 * r.gen::<f64>()
            }
        }))
    }
}

struct AllOut;

impl Sampler for AllOut {
    fn draw(&self, n: usize, _: u64) -> muguide::Result<Array2<f64>> {
        Ok(Array2::from_elem((n, 3), -1.0))
    }
}

struct AllIn;

impl Sampler for AllIn {
    fn draw(&self, n: usize, _: u64) -> muguide::Result<Array2<f64>> {
        Ok(Array2::from_elem((n, 3), 0.5))
    }
}

#[test]
fn rejection_sampling_fractions() {
    let spec = PriorSpec::for_model(ModelId::BallStick);
    let s = rejection_sample(&AllIn, 10_000, &spec, 1, "v0").unwrap();
    assert_eq!(s.accepted_fraction, 1.0);
    assert_eq!(s.samples.nrows(), 10_000);
    let s = rejection_sample(&HalfOut, 10_000, &spec, 1, "v1").unwrap();
    assert!((s.accepted_fraction - 0.5).abs() < 0.02, "{}", s.accepted_fraction);
    assert!(s.samples.rows().into_iter().all(|r| spec.contains(r.as_slice().unwrap())));
    match rejection_sample(&AllOut, 1000, &spec, 1, "v2") {
        Err(Error::LowAcceptance { voxel, .. }) => assert_eq!(voxel, "v2"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn summary_csv_layout() {
    let space = ParameterSpace::for_model(ModelId::BallStick);
    let samples = PosteriorSamples {
        samples: Array2::from_shape_fn((2000, 3), |(i, j)| 0.3 + 0.1 * j as f64 + 1e-4 * (i % 50) as f64),
        space: space.clone(),
        accepted_fraction: 1.0,
    };
    let s = summarize(&samples, &SummaryOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    muguide::posterior::write_summary_csv(&p, &space.names, &[("0".into(), s)]).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("voxel_id,f_in_map,f_in_uncertainty,f_in_ambiguity,f_in_degenerate,D_in_map"));
    assert_eq!(text.lines().nth(1).unwrap().split(',').count(), 13);
}
