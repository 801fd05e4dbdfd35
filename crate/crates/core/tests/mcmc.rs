use muguide::forward::{unit_from_angles, ModelId, ParameterVector, Simulator};
use muguide::mcmc::{amwg, mle_init, run_amwg_with, McmcConfig, Target};
use muguide::priors::PriorSpec;
use muguide::protocol::AcquisitionProtocol;
use statrs::distribution::{ContinuousCDF, Normal};

struct Gaussian {
    mu: f64,
    sd: f64,
}

impl Target for Gaussian {
    fn dim(&self) -> usize {
        1
    }
    fn log_density(&self, s: &[f64]) -> f64 {
        -0.5 * ((s[0] - self.mu) / self.sd).powi(2)
    }
}

/// Density is finite only at the initial point.
struct Spike;

impl Target for Spike {
    fn dim(&self) -> usize {
        2
    }
    fn log_density(&self, s: &[f64]) -> f64 {
        if s == [0.25, 0.75] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

fn batch_means_se(v: &[f64]) -> f64 {
    let b = 50;
    let means: Vec<f64> = v.chunks_exact(v.len() / b).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let m = means.iter().sum::<f64>() / b as f64;
    (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1) as f64 / b as f64).sqrt()
}

#[test]
fn gaussian_fixture_moments() {
    let t = Gaussian { mu: 1.3, sd: 0.7 };
    let cfg = McmcConfig { rng_seed: 7, ..Default::default() };
    let chain = amwg(&t, &[1.3], &[0.5], &cfg).unwrap();
    let v = chain.trace.column(0).to_vec();
    assert_eq!(v.len(), 15_000);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se_mean = batch_means_se(&v);
    let sq: Vec<f64> = v.iter().map(|x| (x - 1.3).powi(2)).collect();
    let se_var = batch_means_se(&sq);
    assert!((mean - 1.3).abs() < 3.0 * se_mean, "mean {mean} se {se_mean}");
    // delta method for the standard deviation
    assert!((sd - 0.7).abs() < 3.0 * se_var / (2.0 * 0.7), "sd {sd}");
    assert!((0.2..=0.6).contains(&chain.acceptance_rates[0]));
}

#[test]
fn forced_rejection_keeps_initial_state() {
    let cfg = McmcConfig { n_samples: 1, burn_in: 0, ..Default::default() };
    let chain = amwg(&Spike, &[0.25, 0.75], &[0.1, 0.1], &cfg).unwrap();
    assert_eq!(chain.trace.nrows(), 1);
    assert_eq!(chain.trace.row(0).to_vec(), vec![0.25, 0.75]);
    assert_eq!(chain.acceptance_rates, vec![0.0, 0.0]);
}

#[test]
fn thinning_preserves_mean() {
    let t = Gaussian { mu: -0.4, sd: 2.0 };
    let full = amwg(&t, &[0.0], &[1.0], &McmcConfig { rng_seed: 3, ..Default::default() }).unwrap();
    let thin = amwg(&t, &[0.0], &[1.0], &McmcConfig { rng_seed: 4, thinning: 5, ..Default::default() }).unwrap();
    assert_eq!(thin.trace.nrows(), 3000);
    let a = full.trace.column(0).to_vec();
    let b = thin.trace.column(0).to_vec();
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    let se = (batch_means_se(&a).powi(2) + batch_means_se(&b).powi(2)).sqrt();
    assert!((ma - mb).abs() < 3.0 * se, "{ma} vs {mb} (se {se})");
}

#[test]
fn gaussian_fixture_ks() {
    let t = Gaussian { mu: 0.0, sd: 1.0 };
    let chain = amwg(&t, &[0.0], &[1.0], &McmcConfig { rng_seed: 11, ..Default::default() }).unwrap();
    let mut v = chain.trace.column(0).to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let cdf = Normal::new(0.0, 1.0).unwrap();
    let ks = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS {ks}");
}

#[test]
fn ball_stick_mle_recovers_truth() {
    let p = AcquisitionProtocol::reference_multishell();
    let spec = PriorSpec::for_model(ModelId::BallStick);
    let truth = ParameterVector::new(vec![0.6, 2.2, 1.1], unit_from_angles(0.9, 2.0));
    let sim = Simulator::with_default_quadrature(spec.space.clone(), p.clone()).unwrap();
    let x = sim.simulate(&truth).unwrap();
    let est = mle_init(&x, &spec, &p, 0.02, 5).unwrap();
    for i in 0..3 {
        assert!((est.values[i] - truth.values[i]).abs() < 0.05 * spec.space.range(i), "{est:?}");
    }
    assert_eq!(est, mle_init(&x, &spec, &p, 0.02, 5).unwrap());

    let ones = vec![1.0; p.len()];
    let est = mle_init(&ones, &spec, &p, 0.02, 1).unwrap();
    assert!(spec.contains(&est.values));
}

#[test]
fn ball_stick_chain_acceptance_and_support() {
    let p = AcquisitionProtocol::reference_multishell();
    let spec = PriorSpec::for_model(ModelId::BallStick);
    let sim = Simulator::with_default_quadrature(spec.space.clone(), p.clone()).unwrap();
    let truth = ParameterVector::new(vec![0.5, 1.8, 0.9], unit_from_angles(0.4, 1.0));
    let clean = sim.simulate(&truth).unwrap();
    let x = muguide::forward::add_noise(&clean, 50.0, Default::default(), &mut muguide::rng::seeded(2)).unwrap();
    let cfg = McmcConfig { n_samples: 3200, burn_in: 200, rng_seed: 1, ..Default::default() };
    let chain = run_amwg_with(&sim, &spec, &x, &cfg).unwrap();
    assert_eq!(chain.trace.nrows(), 3000);
    for r in chain.acceptance_rates() {
        assert!((0.2..=0.6).contains(r), "{:?}", chain.acceptance_rates());
    }
    assert!(chain.trace.rows().into_iter().all(|r| spec.contains(r.as_slice().unwrap())));
    let dir = tempfile::tempdir().unwrap();
    chain.save(dir.path().join("c")).unwrap();
    let back = muguide::mcmc::McmcChain::load(dir.path().join("c")).unwrap();
    assert_eq!(back, chain);
}
