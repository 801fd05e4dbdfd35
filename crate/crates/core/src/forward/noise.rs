use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Rician,
    /// Gaussian noise on real and imaginary channels, then magnitude. Same
    /// construction as `Rician`.
    ComplexGaussianMagnitude,
}

/// Magnitude of the signal after complex Gaussian noise with σ = 1/snr.
pub fn add_noise<R: Rng + ?Sized>(signal: &[f64], snr: f64, _mode: NoiseMode, rng: &mut R) -> Result<Vec<f64>> {
    let mut out = signal.to_vec();
    add_noise_in_place(&mut out, snr, rng)?;
    Ok(out)
}

pub fn add_noise_in_place<R: Rng + ?Sized>(signal: &mut [f64], snr: f64, rng: &mut R) -> Result<()> {
    if !(snr > 0.0) {
        return Err(Error::Validation(format!("snr must be positive, got {snr}")));
    }
    let sigma = 1.0 / snr;
    for s in signal.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *s = (*s + sigma * re).hypot(sigma * im);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn huge_snr_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = vec![0.1, 0.5, 1.0];
        let out = add_noise(&s, 1e12, NoiseMode::Rician, &mut rng).unwrap();
        for (a, b) in s.iter().zip(&out) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let s = vec![0.3; 10];
        let a = add_noise(&s, 50.0, NoiseMode::Rician, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = add_noise(&s, 50.0, NoiseMode::ComplexGaussianMagnitude, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_nonpositive_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(add_noise(&[1.0], 0.0, NoiseMode::Rician, &mut rng).is_err());
    }

    #[test]
    fn rayleigh_mean_at_zero_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = vec![0.0; 1_000_000];
        let out = add_noise(&s, 50.0, NoiseMode::Rician, &mut rng).unwrap();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        let expected = 0.02 * (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean - expected).abs() / expected < 0.01, "{mean}");
    }

    #[test]
    fn rician_mean_at_unit_signal() {
        // E ≈ s + σ²/(2s) for s ≫ σ
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = vec![1.0; 1_000_000];
        let out = add_noise(&s, 50.0, NoiseMode::Rician, &mut rng).unwrap();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean - 1.0002).abs() < 0.001, "{mean}");
    }

    #[test]
    fn high_snr_std_matches_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = vec![1.0; 200_000];
        let out = add_noise(&s, 100.0, NoiseMode::Rician, &mut rng).unwrap();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (out.len() - 1) as f64;
        assert!((var.sqrt() - 0.01).abs() / 0.01 < 0.02);
    }
}
