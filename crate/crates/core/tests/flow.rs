use muguide::flow::{train, Architecture, Conditioner, FlowModel, TrainingConfig};
use muguide::forward::ParameterSpace;
use muguide::rng;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn space(names: &[&str], lo: f64, hi: f64) -> ParameterSpace {
    ParameterSpace::custom(names, &vec![lo; names.len()], &vec![hi; names.len()]).unwrap()
}

fn perturbed(d: usize, m: usize, seed: u64) -> FlowModel {
    let names: Vec<String> = (0..d).map(|i| format!("t{i}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let arch = Architecture { made_hidden: 16, embedding_hidden: [12, 8], n_features: 3, ..Default::default() };
    let mut model = FlowModel::new(space(&names, -10.0, 10.0), m, arch, seed).unwrap();
    let mut r = rng::seeded(seed + 100);
    for p in model.parameters_mut() {
        *p += r.gen_range(-0.3..0.3);
    }
    model
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut r))
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut model = perturbed(2, 4, 3);
    let theta = random_matrix(10, 2, 4);
    let x = random_matrix(10, 4, 5);
    let (_, grad) = model.loss_and_gradient(theta.view(), x.view()).unwrap();
    let n = grad.len();
    let mut checked = 0;
    for i in (0..n).step_by(7) {
        let orig = model.parameters()[i];
        let h = 1e-5;
        model.parameters_mut()[i] = orig + h;
        let lp = model.loss_and_gradient(theta.view(), x.view()).unwrap().0;
        model.parameters_mut()[i] = orig - h;
        let lm = model.loss_and_gradient(theta.view(), x.view()).unwrap().0;
        model.parameters_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs());
        if scale > 1e-6 {
            assert!((grad[i] - fd).abs() / scale < 1e-4, "param {i}: analytic {} vs fd {fd}", grad[i]);
            checked += 1;
        } else {
            assert!((grad[i] - fd).abs() < 1e-9);
        }
    }
    assert!(checked > 50);
}

#[test]
fn identity_conditioner_gradient() {
    let names = ["a", "b"];
    let arch = Architecture { made_hidden: 8, conditioner: Conditioner::Identity, ..Default::default() };
    let mut model = FlowModel::new(space(&names, -10.0, 10.0), 3, arch, 1).unwrap();
    let mut r = rng::seeded(9);
    for p in model.parameters_mut() {
        *p += r.gen_range(-0.3..0.3);
    }
    let theta = random_matrix(10, 2, 1);
    let x = random_matrix(10, 3, 2);
    let (_, grad) = model.loss_and_gradient(theta.view(), x.view()).unwrap();
    for i in (0..grad.len()).step_by(3) {
        let orig = model.parameters()[i];
        model.parameters_mut()[i] = orig + 1e-5;
        let lp = model.loss_and_gradient(theta.view(), x.view()).unwrap().0;
        model.parameters_mut()[i] = orig - 1e-5;
        let lm = model.loss_and_gradient(theta.view(), x.view()).unwrap().0;
        model.parameters_mut()[i] = orig;
        let fd = (lp - lm) / 2e-5;
        let scale = grad[i].abs().max(fd.abs()).max(1e-6);
        assert!((grad[i] - fd).abs() / scale < 1e-4, "param {i}");
    }
}

#[test]
fn inverse_round_trips() {
    for d in [1, 2, 3, 6] {
        let model = perturbed(d, 5, d as u64);
        let x = [0.2, -0.1, 0.5, 1.0, 0.3];
        let z = random_matrix(1000, d, 7);
        let theta = model.inverse(z.view(), &x).unwrap();
        let xs = Array2::from_shape_fn((1000, 5), |(_, j)| x[j]);
        let (z2, _) = model.transform(theta.view(), xs.view()).unwrap();
        let err = (&z2 - &z).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-6, "d={d}: {err}");
    }
}

#[test]
fn log_det_is_additive_over_blocks() {
    let model = perturbed(3, 2, 11);
    let theta = random_matrix(20, 3, 1);
    let x = random_matrix(20, 2, 2);
    let (z, lds) = model.transform(theta.view(), x.view()).unwrap();
    let total: Array1<f64> = lds.iter().fold(Array1::zeros(20), |a, l| a + l);
    let lp = model.log_prob_batch(theta.view(), x.view()).unwrap();
    for i in 0..20 {
        let base = -0.5 * z.row(i).dot(&z.row(i)) - 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp[i] - (base + total[i])).abs() < 1e-9);
    }
}

#[test]
fn blocks_are_autoregressive_and_unmasked_control_fails() {
    let model = perturbed(3, 4, 2);
    for k in 0..model.blocks().len() {
        assert!(model.autoregressive_check(k));
    }
    let broken = model.with_unmasked_blocks();
    assert!(!broken.autoregressive_check(0));
}

#[test]
fn identity_flow_samples_are_standard_normal() {
    let model = FlowModel::new(space(&["a", "b"], -10.0, 10.0), 3, Architecture::default(), 4).unwrap();
    let s = model.sample(&[0.0, 1.0, 2.0], 10_000, 5).unwrap();
    for col in s.columns() {
        let mean = col.mean().unwrap();
        let var = col.var(0.0);
        assert!(mean.abs() < 0.05 && (0.9..=1.1).contains(&var), "{mean} {var}");
    }
    assert_eq!(s, model.sample(&[0.0, 1.0, 2.0], 10_000, 5).unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let model = perturbed(3, 4, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.bin");
    model.save(&path).unwrap();
    let loaded = FlowModel::load(&path).unwrap();
    assert_eq!(loaded, model);
    std::fs::write(&path, b"garbage").unwrap();
    assert!(FlowModel::load(&path).unwrap_err().is_config());
}

fn quick_config(epochs: usize, seed: u64) -> TrainingConfig {
    TrainingConfig { max_epochs: epochs, rng_seed: seed, patience_epochs: 10, ..Default::default() }
}

#[test]
fn trained_standard_normal_density() {
    // θ ~ N(0, 1) truncated to ±10, x carries no information
    let n = 5000;
    let mut r = rng::seeded(1);
    let theta = Array2::from_shape_simple_fn((n, 1), || StandardNormal.sample(&mut r));
    let x = Array2::from_shape_simple_fn((n, 2), || r.gen::<f64>());
    let (model, report) = train(&space(&["t"], -10.0, 10.0), theta.view(), x.view(), &quick_config(15, 2)).unwrap();
    assert!(report.best_validation_loss <= report.epochs[0].validation_loss);
    assert!(report.embedding_delta_norm > 0.0);
    let xo = [0.5, 0.5];
    let lp0 = model.log_prob(&[0.0], &xo).unwrap();
    assert!((lp0 + 0.9189).abs() < 0.05, "{lp0}");
    // grid normalization over [−10, 10]
    let g = 10_000;
    let h = 20.0 / g as f64;
    let grid = Array2::from_shape_fn((g, 1), |(i, _)| -10.0 + (i as f64 + 0.5) * h);
    let mass: f64 = model.log_prob_given(grid.view(), &xo).unwrap().mapv(f64::exp).sum() * h;
    assert!((mass - 1.0).abs() < 0.02, "{mass}");

    let (again, report2) = train(&space(&["t"], -10.0, 10.0), theta.view(), x.view(), &quick_config(15, 2)).unwrap();
    assert!((report.best_validation_loss - report2.best_validation_loss).abs() < 1e-6);
    assert_eq!(again, model);
}

#[test]
fn bimodal_posterior_recovers_both_modes() {
    // θ ~ U(−1, 1)², x = (θ0², θ1) + noise: the sign of θ0 is unidentifiable
    let n = 20_000;
    let mut r = rng::seeded(3);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let theta = Array2::from_shape_simple_fn((n, 2), || r.gen_range(-1.0..1.0));
    let mut x = Array2::zeros((n, 2));
    for (i, t) in theta.axis_iter(Axis(0)).enumerate() {
        x[[i, 0]] = t[0] * t[0] + noise.sample(&mut r);
        x[[i, 1]] = t[1] + noise.sample(&mut r);
    }
    let (model, _) = train(&space(&["a", "b"], -1.0, 1.0), theta.view(), x.view(), &quick_config(30, 4)).unwrap();
    let s = model.sample(&[0.36, 0.2], 10_000, 1).unwrap();
    let pos = s.column(0).iter().filter(|&&v| v > 0.0).count() as f64;
    let neg = s.nrows() as f64 - pos;
    let ratio = pos / neg;
    assert!((ratio - 1.0).abs() <= 0.1, "mass ratio {ratio}");
    let near = s.column(0).iter().filter(|v| (v.abs() - 0.6).abs() < 0.15).count() as f64;
    assert!(near / s.nrows() as f64 > 0.8);
}
