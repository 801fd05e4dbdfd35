//! Prior-predictive training sets.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::noise::add_noise_in_place;
use super::{ParameterVector, Simulator};
use crate::error::{Error, Result};
use crate::io;
use crate::priors::PriorSpec;
use crate::protocol::AcquisitionProtocol;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub prior: PriorSpec,
    pub n: usize,
    /// `None` for noise-free signals.
    pub snr: Option<f64>,
    pub seed: u64,
    pub protocol_path: Option<PathBuf>,
    pub quadrature_order: usize,
    pub measurements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub theta: Array2<f64>,
    pub x: Array2<f64>,
    pub meta: DatasetMeta,
}

/// Uniform direction on the sphere.
pub fn random_orientation<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// Draws θ from the prior, a random orientation, simulates and adds noise.
/// Row `i` only depends on `(seed, i)`.
pub fn generate_with(sim: &Simulator, prior: &PriorSpec, n: usize, snr: Option<f64>, seed: u64) -> Result<TrainingSet> {
    if n == 0 {
        return Err(Error::Config("training set size must be at least 1".into()));
    }
    if prior.space != *sim.space() {
        return Err(Error::Config("prior and simulator parameter spaces differ".into()));
    }
    let d = prior.dim();
    let m = sim.protocol().len();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let mut theta = vec![0.0; d];
            prior.sample_one(&mut r, &mut theta);
            let orientation = random_orientation(&mut r);
            let pv = ParameterVector::new(theta, orientation);
            let mut x = sim.simulate(&pv)?;
            if let Some(snr) = snr {
                add_noise_in_place(&mut x, snr, &mut r)?;
            }
            Ok((pv.values, x))
        })
        .collect::<Result<_>>()?;
    let mut theta = Array2::zeros((n, d));
    let mut x = Array2::zeros((n, m));
    for (i, (t, s)) in rows.into_iter().enumerate() {
        theta.row_mut(i).assign(&ndarray::ArrayView1::from(&t));
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&s));
    }
    Ok(TrainingSet {
        theta,
        x,
        meta: DatasetMeta {
            prior: prior.clone(),
            n,
            snr,
            seed,
            protocol_path: None,
            quadrature_order: sim.quadrature_order(),
            measurements: m,
        },
    })
}

pub fn generate_training_set(
    prior: &PriorSpec,
    protocol: &AcquisitionProtocol,
    n: usize,
    snr: Option<f64>,
    seed: u64,
) -> Result<TrainingSet> {
    let sim = Simulator::with_default_quadrature(prior.space.clone(), protocol.clone())?;
    generate_with(&sim, prior, n, snr, seed)
}

impl TrainingSet {
    pub fn paths(stem: &Path) -> (PathBuf, PathBuf, PathBuf) {
        let with = |ext: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        (with(".theta.bin"), with(".x.bin"), with(".json"))
    }

    /// Writes `<stem>.theta.bin`, `<stem>.x.bin` and the `<stem>.json` sidecar.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let (t, x, j) = Self::paths(stem.as_ref());
        io::write_matrix(t, &self.theta)?;
        io::write_matrix(x, &self.x)?;
        io::write_json(j, &self.meta)
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let (t, x, j) = Self::paths(stem.as_ref());
        let meta: DatasetMeta = io::read_json(j)?;
        meta.prior.space.validate()?;
        let theta = io::read_matrix(t)?;
        let x = io::read_matrix(x)?;
        if theta.nrows() != x.nrows() || theta.nrows() != meta.n {
            return Err(Error::Format(format!(
                "row counts disagree: theta {}, x {}, sidecar {}",
                theta.nrows(),
                x.nrows(),
                meta.n
            )));
        }
        if theta.ncols() != meta.prior.dim() || x.ncols() != meta.measurements {
            return Err(Error::Format("matrix widths disagree with sidecar".into()));
        }
        Ok(TrainingSet { theta, x, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::ModelId;

    #[test]
    fn reproducible_and_round_trips() {
        let prior = PriorSpec::for_model(ModelId::BallStick);
        let p = AcquisitionProtocol::reference_multishell();
        let a = generate_training_set(&prior, &p, 3, Some(50.0), 7).unwrap();
        let b = generate_training_set(&prior, &p, 3, Some(50.0), 7).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("set");
        a.save(&stem).unwrap();
        assert_eq!(TrainingSet::load(&stem).unwrap(), a);
    }

    #[test]
    fn zero_rows_is_config_error() {
        let prior = PriorSpec::for_model(ModelId::BallStick);
        let p = AcquisitionProtocol::reference_multishell();
        assert!(matches!(generate_training_set(&prior, &p, 0, None, 1), Err(Error::Config(_))));
    }

    #[test]
    fn corrupted_sidecar_is_rejected() {
        let prior = PriorSpec::for_model(ModelId::BallStick);
        let p = AcquisitionProtocol::reference_multishell();
        let a = generate_training_set(&prior, &p, 2, None, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("set");
        a.save(&stem).unwrap();
        std::fs::write(TrainingSet::paths(&stem).2, "{ not json").unwrap();
        assert!(TrainingSet::load(&stem).unwrap_err().is_config());
    }
}
