//! Biophysical signal models for diffusion MRI.
//!
//! Units: b in ms/µm², diffusivities in µm²/ms, C_s in µm². Signals are
//! normalized so that the noise-free b = 0 signal is exactly 1.

pub mod dataset;
pub mod noise;
pub mod sphere;
pub mod watson;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::AcquisitionProtocol;

pub use dataset::{generate_training_set, TrainingSet};
pub use noise::{add_noise, NoiseMode};
pub use sphere::{sphere_cs, SphereRootTable};
pub use watson::{odi_to_kappa, WatsonQuadrature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    BallStick,
    StandardModel,
    ExtendedSandi,
}

impl ModelId {
    pub const ALL: [ModelId; 3] = [ModelId::BallStick, ModelId::StandardModel, ModelId::ExtendedSandi];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelId::BallStick => "ball_stick",
            ModelId::StandardModel => "standard_model",
            ModelId::ExtendedSandi => "extended_sandi",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ball_stick" | "ballstick" => Ok(ModelId::BallStick),
            "standard_model" | "sm" => Ok(ModelId::StandardModel),
            "extended_sandi" | "sandi" => Ok(ModelId::ExtendedSandi),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

const FRACTION: (f64, f64) = (0.0, 1.0);
const DIFFUSIVITY: (f64, f64) = (0.1, 3.0);
const ODI: (f64, f64) = (0.03, 0.95);
const SOMA_CS: (f64, f64) = (0.15, 1105.0);

/// Named parameters with uniform prior bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpace {
    pub model_id: ModelId,
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParameterSpace {
    pub fn new(model_id: ModelId, names: Vec<String>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let space = ParameterSpace {
            model_id,
            names,
            lower,
            upper,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn for_model(model_id: ModelId) -> Self {
        let spec: &[(&str, (f64, f64))] = match model_id {
            ModelId::BallStick => &[("f_in", FRACTION), ("D_in", DIFFUSIVITY), ("D_e", DIFFUSIVITY)],
            ModelId::StandardModel => &[
                ("f", FRACTION),
                ("D_a", DIFFUSIVITY),
                ("ODI", ODI),
                ("D_e_par", DIFFUSIVITY),
                ("D_e_perp", DIFFUSIVITY),
            ],
            ModelId::ExtendedSandi => &[
                ("f_n", FRACTION),
                ("f_s", FRACTION),
                ("D_n", DIFFUSIVITY),
                ("ODI", ODI),
                ("D_e", DIFFUSIVITY),
                ("C_s", SOMA_CS),
            ],
        };
        ParameterSpace {
            model_id,
            names: spec.iter().map(|(n, _)| n.to_string()).collect(),
            lower: spec.iter().map(|(_, b)| b.0).collect(),
            upper: spec.iter().map(|(_, b)| b.1).collect(),
        }
    }

    /// Generic space for toy problems that bypass the tissue simulators.
    /// `model_id` is only used for bookkeeping in that case.
    pub fn custom(names: &[&str], lower: &[f64], upper: &[f64]) -> Result<Self> {
        Self::new(
            ModelId::BallStick,
            names.iter().map(|s| s.to_string()).collect(),
            lower.to_vec(),
            upper.to_vec(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.names.len();
        if d == 0 || self.lower.len() != d || self.upper.len() != d {
            return Err(Error::Validation("parameter names and bounds disagree in length".into()));
        }
        for i in 0..d {
            if !(self.lower[i] < self.upper[i]) {
                return Err(Error::Validation(format!(
                    "bounds for {} are not ordered: [{}, {}]",
                    self.names[i], self.lower[i], self.upper[i]
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn range(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Overrides the bounds of a named parameter.
    pub fn with_bounds(mut self, name: &str, lower: f64, upper: f64) -> Result<Self> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("no parameter `{name}` in {}", self.model_id)))?;
        self.lower[i] = lower;
        self.upper[i] = upper;
        self.validate()?;
        Ok(self)
    }
}

/// Model parameters plus the (nuisance) fibre orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub orientation: [f64; 3],
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, orientation: [f64; 3]) -> Self {
        ParameterVector { values, orientation }
    }
}

/// Spherical angles (polar, azimuth) to a unit vector.
pub fn unit_from_angles(polar: f64, azimuth: f64) -> [f64; 3] {
    let (sp, cp) = polar.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    [sp * ca, sp * sa, cp]
}

fn check_values(theta: &ParameterVector, space: &ParameterSpace) -> Result<()> {
    if theta.values.len() != space.dim() {
        return Err(Error::Dimension {
            expected: space.dim(),
            got: theta.values.len(),
        });
    }
    for (i, &v) in theta.values.iter().enumerate() {
        if !v.is_finite() || v < space.lower[i] || v > space.upper[i] {
            return Err(Error::Validation(format!(
                "{} = {v} outside [{}, {}]",
                space.names[i], space.lower[i], space.upper[i]
            )));
        }
    }
    let n = theta.orientation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!("orientation has norm {n}")));
    }
    Ok(())
}

/// Evaluates one of the tissue models over a protocol.
#[derive(Debug, Clone)]
pub struct Simulator {
    space: ParameterSpace,
    protocol: AcquisitionProtocol,
    quadrature: WatsonQuadrature,
    /// Shell index (into `shell_bvalues`) per entry; `None` for b = 0.
    entry_shell: Vec<Option<usize>>,
    shell_bvalues: Vec<f64>,
    shell_q2: Vec<f64>,
}

impl Simulator {
    pub fn new(space: ParameterSpace, protocol: AcquisitionProtocol, quadrature_order: usize) -> Result<Self> {
        space.validate()?;
        let quadrature = WatsonQuadrature::new(quadrature_order)?;
        // Exact b-values (and timings) are grouped, not rounded shells, so
        // the kernel moments are exact for every entry.
        let mut keys: Vec<(f64, f64, f64)> = Vec::new();
        let mut entry_shell = Vec::with_capacity(protocol.len());
        for e in protocol.entries() {
            if e.bvalue == 0.0 {
                entry_shell.push(None);
                continue;
            }
            let key = (e.bvalue, e.delta_small, e.delta_big);
            let idx = match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    keys.len() - 1
                }
            };
            entry_shell.push(Some(idx));
        }
        let shell_bvalues = keys.iter().map(|k| k.0).collect();
        let shell_q2 = keys.iter().map(|k| k.0 / (k.2 - k.1 / 3.0)).collect();
        Ok(Simulator {
            space,
            protocol,
            quadrature,
            entry_shell,
            shell_bvalues,
            shell_q2,
        })
    }

    pub fn with_default_quadrature(space: ParameterSpace, protocol: AcquisitionProtocol) -> Result<Self> {
        Self::new(space, protocol, watson::DEFAULT_ORDER)
    }

    pub fn space(&self) -> &ParameterSpace {
        &self.space
    }

    pub fn protocol(&self) -> &AcquisitionProtocol {
        &self.protocol
    }

    pub fn model_id(&self) -> ModelId {
        self.space.model_id
    }

    pub fn quadrature_order(&self) -> usize {
        self.quadrature.order()
    }

    pub fn simulate(&self, theta: &ParameterVector) -> Result<Vec<f64>> {
        check_values(theta, &self.space)?;
        let mut out = vec![0.0; self.protocol.len()];
        match self.space.model_id {
            ModelId::BallStick => self.ball_stick_into(theta, &mut out),
            ModelId::StandardModel => {
                let v = &theta.values;
                if v[4] > v[3] + 1e-12 {
                    return Err(Error::Validation(format!(
                        "D_e_perp = {} exceeds D_e_par = {}",
                        v[4], v[3]
                    )));
                }
                self.standard_model_into(theta, &mut out)
            }
            ModelId::ExtendedSandi => {
                let v = &theta.values;
                if v[0] + v[1] > 1.0 + 1e-12 {
                    return Err(Error::Validation(format!("f_n + f_s = {} exceeds 1", v[0] + v[1])));
                }
                self.extended_sandi_into(theta, &mut out)
            }
        }
        if out.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite signal for {:?}", theta.values)));
        }
        Ok(out)
    }

    fn ball_stick_into(&self, theta: &ParameterVector, out: &mut [f64]) {
        let (f_in, d_in, d_e) = (theta.values[0], theta.values[1], theta.values[2]);
        for (e, s) in self.protocol.entries().iter().zip(out.iter_mut()) {
            if e.bvalue == 0.0 {
                *s = 1.0;
                continue;
            }
            let c = dot(&e.direction, &theta.orientation);
            *s = f_in * (-e.bvalue * d_in * c * c).exp() + (1.0 - f_in) * (-e.bvalue * d_e).exp();
        }
    }

    /// Per-shell series coefficients for `exp(-b·a_scale·(g·n)²)` under
    /// Watson dispersion.
    fn dispersed_series(&self, watson: &[f64], diffusivity: f64) -> Vec<Vec<f64>> {
        self.shell_bvalues
            .iter()
            .map(|&b| self.quadrature.series(watson, &self.quadrature.kernel_moments(b * diffusivity)))
            .collect()
    }

    fn standard_model_into(&self, theta: &ParameterVector, out: &mut [f64]) {
        let v = &theta.values;
        let (f, d_a, odi, d_par, d_perp) = (v[0], v[1], v[2], v[3], v[4]);
        let watson = self.quadrature.watson_moments(odi_to_kappa(odi));
        let stick = self.dispersed_series(&watson, d_a);
        let zeppelin = self.dispersed_series(&watson, d_par - d_perp);
        let mut scratch = self.quadrature.scratch();
        for ((e, s), shell) in self.protocol.entries().iter().zip(out.iter_mut()).zip(&self.entry_shell) {
            let Some(k) = *shell else {
                *s = 1.0;
                continue;
            };
            let c = dot(&e.direction, &theta.orientation);
            watson::legendre_all(c, &mut scratch);
            let intra = series_dot(&stick[k], &scratch);
            let extra = (-e.bvalue * d_perp).exp() * series_dot(&zeppelin[k], &scratch);
            *s = f * intra + (1.0 - f) * extra;
        }
    }

    fn extended_sandi_into(&self, theta: &ParameterVector, out: &mut [f64]) {
        let v = &theta.values;
        let (f_n, f_s, d_n, odi, d_e, c_s) = (v[0], v[1], v[2], v[3], v[4], v[5]);
        let f_e = (1.0 - f_n - f_s).max(0.0);
        let watson = self.quadrature.watson_moments(odi_to_kappa(odi));
        let stick = self.dispersed_series(&watson, d_n);
        let mut scratch = self.quadrature.scratch();
        for ((e, s), shell) in self.protocol.entries().iter().zip(out.iter_mut()).zip(&self.entry_shell) {
            let Some(k) = *shell else {
                *s = 1.0;
                continue;
            };
            let c = dot(&e.direction, &theta.orientation);
            watson::legendre_all(c, &mut scratch);
            let neurite = series_dot(&stick[k], &scratch);
            let soma = (-self.shell_q2[k] * c_s).exp();
            let extra = (-e.bvalue * d_e).exp();
            *s = f_n * neurite + f_s * soma + f_e * extra;
        }
    }
}

fn series_dot(coeffs: &[f64], legendre: &[f64]) -> f64 {
    coeffs.iter().enumerate().map(|(k, a)| a * legendre[2 * k]).sum()
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn signal_ball_stick(theta: &ParameterVector, protocol: &AcquisitionProtocol) -> Result<Vec<f64>> {
    Simulator::new(ParameterSpace::for_model(ModelId::BallStick), protocol.clone(), watson::MIN_ORDER)?.simulate(theta)
}

pub fn signal_standard_model(
    theta: &ParameterVector,
    protocol: &AcquisitionProtocol,
    quadrature_order: usize,
) -> Result<Vec<f64>> {
    Simulator::new(ParameterSpace::for_model(ModelId::StandardModel), protocol.clone(), quadrature_order)?
        .simulate(theta)
}

pub fn signal_extended_sandi(
    theta: &ParameterVector,
    protocol: &AcquisitionProtocol,
    quadrature_order: usize,
) -> Result<Vec<f64>> {
    Simulator::new(ParameterSpace::for_model(ModelId::ExtendedSandi), protocol.clone(), quadrature_order)?
        .simulate(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::GradientEntry;

    fn single(b: f64, dir: [f64; 3]) -> AcquisitionProtocol {
        AcquisitionProtocol::new(vec![GradientEntry::new(b, dir, 7.0, 24.0).unwrap()]).unwrap()
    }

    const Z: [f64; 3] = [0.0, 0.0, 1.0];
    const X: [f64; 3] = [1.0, 0.0, 0.0];

    #[test]
    fn ball_stick_hand_values() {
        let p = single(1.0, Z);
        let s = signal_ball_stick(&ParameterVector::new(vec![0.5, 2.0, 1.0], Z), &p).unwrap();
        let expected = 0.5 * (-2f64).exp() + 0.5 * (-1f64).exp();
        assert!((s[0] - expected).abs() < 1e-12);
        assert!((s[0] - 0.251607).abs() < 1e-6);
    }

    #[test]
    fn ball_stick_perpendicular_stick_is_unattenuated() {
        let p = single(3.0, X);
        let s = signal_ball_stick(&ParameterVector::new(vec![1.0, 2.5, 1.0], Z), &p).unwrap();
        assert_eq!(s[0], 1.0);
    }

    #[test]
    fn b0_is_exactly_one() {
        let p = AcquisitionProtocol::reference_multishell();
        let idx = p.b0_indices().to_vec();
        for (model, values) in [
            (ModelId::BallStick, vec![0.3, 1.7, 0.9]),
            (ModelId::StandardModel, vec![0.3, 1.7, 0.4, 2.0, 0.7]),
            (ModelId::ExtendedSandi, vec![0.3, 0.2, 1.7, 0.4, 2.0, 50.0]),
        ] {
            let sim = Simulator::with_default_quadrature(ParameterSpace::for_model(model), p.clone()).unwrap();
            let s = sim.simulate(&ParameterVector::new(values, [0.6, 0.0, 0.8])).unwrap();
            for &i in &idx {
                assert_eq!(s[i], 1.0);
            }
            assert!(s.iter().all(|&v| (0.0..=1.0 + 1e-9).contains(&v)));
        }
    }

    #[test]
    fn standard_model_isotropic_zeppelin_is_ball() {
        let p = single(1.0, [0.6, 0.8, 0.0]);
        for odi in [0.03, 0.5, 0.95] {
            let theta = ParameterVector::new(vec![0.0, 2.0, odi, 1.0, 1.0], Z);
            let s = signal_standard_model(&theta, &p, 64).unwrap();
            assert!((s[0] - (-1f64).exp()).abs() < 1e-10);
        }
    }

    /// Brute-force product integral over the sphere in (cos, azimuth).
    fn brute_force_dispersed_stick(b: f64, d: f64, kappa: f64, g: [f64; 3], mu: [f64; 3]) -> f64 {
        let (nt, np) = (2000, 400);
        let (mut num, mut den) = (0.0, 0.0);
        // frame with mu as the pole
        let a = if mu[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let e1 = normalize(cross(mu, a));
        let e2 = cross(mu, e1);
        for i in 0..nt {
            let c = -1.0 + (i as f64 + 0.5) * 2.0 / nt as f64;
            let s = (1.0 - c * c).sqrt();
            let w = (kappa * c * c).exp();
            for j in 0..np {
                let phi = (j as f64 + 0.5) * std::f64::consts::TAU / np as f64;
                let n: Vec<f64> = (0..3).map(|k| c * mu[k] + s * (phi.cos() * e1[k] + phi.sin() * e2[k])).collect();
                let gn = g[0] * n[0] + g[1] * n[1] + g[2] * n[2];
                num += w * (-b * d * gn * gn).exp();
                den += w;
            }
        }
        num / den
    }

    fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    }

    fn normalize(a: [f64; 3]) -> [f64; 3] {
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        [a[0] / n, a[1] / n, a[2] / n]
    }

    #[test]
    fn standard_model_matches_brute_force_integral() {
        let g = normalize([0.3, -0.5, 0.8]);
        let p = single(3.0, g);
        let mu = unit_from_angles(0.7, 1.1);
        for odi in [0.03, 0.2, 0.6] {
            let s = signal_standard_model(&ParameterVector::new(vec![1.0, 2.0, odi, 1.0, 1.0], mu), &p, 64).unwrap();
            let expected = brute_force_dispersed_stick(3.0, 2.0, odi_to_kappa(odi), g, mu);
            assert!((s[0] - expected).abs() < 1e-5, "odi {odi}: {} vs {expected}", s[0]);
        }
    }

    #[test]
    fn standard_model_rejects_unordered_diffusivities() {
        let p = single(1.0, Z);
        let theta = ParameterVector::new(vec![0.5, 2.0, 0.3, 1.0, 2.0], Z);
        assert!(matches!(signal_standard_model(&theta, &p, 64), Err(Error::Validation(_))));
        assert!(matches!(
            signal_standard_model(&ParameterVector::new(vec![0.5, 2.0, 0.3, 2.0, 1.0], Z), &p, 8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sandi_limits() {
        let p = single(2.0, X);
        let ball = signal_extended_sandi(&ParameterVector::new(vec![0.0, 0.0, 1.0, 0.5, 1.0, 10.0], Z), &p, 64).unwrap();
        assert!((ball[0] - (-2f64).exp()).abs() < 1e-12);
        assert!((ball[0] - 0.13534).abs() < 1e-5);

        let space = ParameterSpace::for_model(ModelId::ExtendedSandi).with_bounds("C_s", 1e-9, 1105.0).unwrap();
        let sim = Simulator::new(space, AcquisitionProtocol::reference_multishell(), 64).unwrap();
        let s = sim.simulate(&ParameterVector::new(vec![0.0, 1.0, 1.0, 0.5, 1.0, 1e-9], Z)).unwrap();
        assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn sandi_rejects_fractions_over_one() {
        let p = single(2.0, X);
        let theta = ParameterVector::new(vec![0.7, 0.5, 1.0, 0.5, 1.0, 10.0], Z);
        assert!(matches!(signal_extended_sandi(&theta, &p, 64), Err(Error::Validation(_))));
    }

    #[test]
    fn out_of_bounds_parameters_are_rejected() {
        let p = single(1.0, Z);
        assert!(signal_ball_stick(&ParameterVector::new(vec![1.5, 2.0, 1.0], Z), &p).is_err());
        assert!(signal_ball_stick(&ParameterVector::new(vec![0.5, 2.0], Z), &p).is_err());
    }

    #[test]
    fn model_id_parses() {
        for m in ModelId::ALL {
            assert_eq!(m.as_str().parse::<ModelId>().unwrap(), m);
        }
        assert!("nexi".parse::<ModelId>().is_err());
    }
}
