//! Uniform priors over the biophysically plausible parameter region.
//!
//! Constrained models are sampled through a map from the unit cube so the
//! samples are uniform over the constrained region:
//!
//! * ordered diffusivities: `D∥ = lo + sqrt((hi − lo)² u0)`,
//!   `D⊥ = (D∥ − lo) u1 + lo`
//! * simplex fractions: `f_n = k2 √k1`, `f_s = (1 − k2) √k1`, `f_e = 1 − √k1`

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ModelId, ParameterSpace, ParameterVector};
use crate::rng;

/// Tolerance for constraint boundaries (D⊥ = D∥, f_n + f_s = 1).
pub const BOUNDARY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    None,
    /// `(parallel, perpendicular)` indices with `θ[perp] ≤ θ[par]`.
    OrderedDiffusivities { parallel: usize, perpendicular: usize },
    /// Indices of two fractions whose sum is at most 1.
    SimplexFractions { first: usize, second: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub space: ParameterSpace,
    pub constraint: Constraint,
}

impl PriorSpec {
    pub fn new(space: ParameterSpace, constraint: Constraint) -> Result<Self> {
        space.validate()?;
        let d = space.dim();
        match constraint {
            Constraint::None => {}
            Constraint::OrderedDiffusivities { parallel, perpendicular } => {
                if parallel >= d || perpendicular >= d || parallel == perpendicular {
                    return Err(Error::Config("invalid ordered-diffusivity indices".into()));
                }
                if space.lower[parallel] != space.lower[perpendicular]
                    || space.upper[parallel] != space.upper[perpendicular]
                {
                    return Err(Error::Config("ordered diffusivities need identical bounds".into()));
                }
            }
            Constraint::SimplexFractions { first, second } => {
                if first >= d || second >= d || first == second {
                    return Err(Error::Config("invalid simplex indices".into()));
                }
                if space.lower[first] != 0.0 || space.lower[second] != 0.0 {
                    return Err(Error::Config("simplex fractions must start at 0".into()));
                }
            }
        }
        Ok(PriorSpec { space, constraint })
    }

    /// Prior for a tissue model with the matching constraint.
    pub fn for_space(space: ParameterSpace) -> Result<Self> {
        let constraint = match space.model_id {
            ModelId::BallStick => Constraint::None,
            ModelId::StandardModel => Constraint::OrderedDiffusivities {
                parallel: space.index_of("D_e_par").ok_or_else(|| Error::Config("missing D_e_par".into()))?,
                perpendicular: space.index_of("D_e_perp").ok_or_else(|| Error::Config("missing D_e_perp".into()))?,
            },
            ModelId::ExtendedSandi => Constraint::SimplexFractions {
                first: space.index_of("f_n").ok_or_else(|| Error::Config("missing f_n".into()))?,
                second: space.index_of("f_s").ok_or_else(|| Error::Config("missing f_s".into()))?,
            },
        };
        Self::new(space, constraint)
    }

    pub fn for_model(model: ModelId) -> Self {
        Self::for_space(ParameterSpace::for_model(model)).expect("built-in spaces are consistent")
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    /// Maps a point of the unit cube onto the prior support.
    pub fn from_unit_cube(&self, u: &[f64], out: &mut [f64]) {
        let s = &self.space;
        for i in 0..s.dim() {
            out[i] = s.lower[i] + s.range(i) * u[i];
        }
        match self.constraint {
            Constraint::None => {}
            Constraint::OrderedDiffusivities { parallel, perpendicular } => {
                let lo = s.lower[parallel];
                let span = s.range(parallel);
                let par = (span * span * u[parallel]).sqrt() + lo;
                out[parallel] = par.min(s.upper[parallel]);
                out[perpendicular] = ((par - lo) * u[perpendicular] + lo).min(out[parallel]);
            }
            Constraint::SimplexFractions { first, second } => {
                let (k1, k2) = (u[first], u[second]);
                let r = k1.sqrt();
                out[first] = k2 * r;
                out[second] = ((1.0 - k2) * r).min(1.0 - out[first]);
            }
        }
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let u: Vec<f64> = (0..self.dim()).map(|_| rng.gen::<f64>()).collect();
        self.from_unit_cube(&u, out);
    }

    /// `n × d` matrix of prior draws. Row `i` depends only on `(seed, i)`.
    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let mut r: ChaCha8Rng = rng::stream(seed, i as u64);
            self.sample_one(&mut r, row.as_slice_mut().expect("row-major"));
        }
        out
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        let s = &self.space;
        if values.len() != s.dim() {
            return false;
        }
        for i in 0..s.dim() {
            let v = values[i];
            if !(v >= s.lower[i] && v <= s.upper[i]) {
                return false;
            }
        }
        match self.constraint {
            Constraint::None => true,
            Constraint::OrderedDiffusivities { parallel, perpendicular } => {
                values[perpendicular] <= values[parallel] + BOUNDARY_TOLERANCE
            }
            Constraint::SimplexFractions { first, second } => values[first] + values[second] <= 1.0 + BOUNDARY_TOLERANCE,
        }
    }

    /// Volume of the support (for the uniform log-density).
    pub fn support_volume(&self) -> f64 {
        let s = &self.space;
        let box_volume: f64 = (0..s.dim()).map(|i| s.range(i)).product();
        match self.constraint {
            Constraint::None => box_volume,
            Constraint::OrderedDiffusivities { .. } => box_volume / 2.0,
            Constraint::SimplexFractions { first, second } => {
                // triangle {a + b ≤ 1} clipped to the box
                let (ua, ub) = (s.upper[first].min(1.0), s.upper[second].min(1.0));
                let area = clipped_triangle_area(ua, ub);
                box_volume / (s.range(first) * s.range(second)) * area
            }
        }
    }

    pub fn log_density(&self, values: &[f64]) -> f64 {
        if self.contains(values) {
            -self.support_volume().ln()
        } else {
            f64::NEG_INFINITY
        }
    }
}

fn clipped_triangle_area(ua: f64, ub: f64) -> f64 {
    // area of {0 ≤ a ≤ ua, 0 ≤ b ≤ ub, a + b ≤ 1}
    let full = 0.5;
    let cut_a = if ua < 1.0 { 0.5 * (1.0 - ua).powi(2) } else { 0.0 };
    let cut_b = if ub < 1.0 { 0.5 * (1.0 - ub).powi(2) } else { 0.0 };
    let overlap = if ua + ub < 1.0 { 0.5 * (1.0 - ua - ub).powi(2) } else { 0.0 };
    full - cut_a - cut_b + overlap
}

pub fn sample_prior(spec: &PriorSpec, n: usize, seed: u64) -> Array2<f64> {
    spec.sample(n, seed)
}

pub fn in_support(spec: &PriorSpec, theta: &ParameterVector) -> bool {
    spec.contains(&theta.values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec(), [0.0, 0.0, 1.0])
    }

    #[test]
    fn ordered_transform_corner() {
        let spec = PriorSpec::for_model(ModelId::StandardModel);
        let mut out = [0.0; 5];
        spec.from_unit_cube(&[0.5, 0.5, 0.5, 1.0, 1.0], &mut out);
        assert!((out[3] - 3.0).abs() < 1e-15);
        assert!((out[4] - 3.0).abs() < 1e-15);
        assert!(spec.contains(&out));
    }

    #[test]
    fn simplex_transform_corner() {
        let spec = PriorSpec::for_model(ModelId::ExtendedSandi);
        let mut out = [0.0; 6];
        spec.from_unit_cube(&[1.0, 0.0, 0.5, 0.5, 0.5, 0.5], &mut out);
        // k1 = u[f_n] = 1, k2 = u[f_s] = 0 → (f_n, f_s) = (0, 1)
        assert_eq!((out[0], out[1]), (0.0, 1.0));
        spec.from_unit_cube(&[1.0, 1.0, 0.5, 0.5, 0.5, 0.5], &mut out);
        assert_eq!((out[0], out[1]), (1.0, 0.0));
    }

    #[test]
    fn support_examples() {
        assert!(in_support(&PriorSpec::for_model(ModelId::BallStick), &pv(&[0.5, 1.0, 1.0])));
        assert!(!in_support(&PriorSpec::for_model(ModelId::StandardModel), &pv(&[0.5, 1.0, 0.3, 1.0, 2.0])));
        assert!(!in_support(
            &PriorSpec::for_model(ModelId::ExtendedSandi),
            &pv(&[0.7, 0.5, 1.0, 0.3, 1.0, 10.0])
        ));
        // boundary equality is inside
        assert!(in_support(&PriorSpec::for_model(ModelId::StandardModel), &pv(&[0.5, 1.0, 0.3, 2.0, 2.0])));
        assert!(!in_support(&PriorSpec::for_model(ModelId::BallStick), &pv(&[0.5, 1.0])));
    }

    #[test]
    fn samples_are_in_support_and_reproducible() {
        for m in ModelId::ALL {
            let spec = PriorSpec::for_model(m);
            let a = spec.sample(2000, 11);
            for row in a.rows() {
                assert!(spec.contains(row.as_slice().unwrap()));
            }
            assert_eq!(a, spec.sample(2000, 11));
        }
    }

    #[test]
    fn support_volumes() {
        let v = PriorSpec::for_model(ModelId::StandardModel).support_volume();
        assert!((v - 1.0 * 2.9 * 0.92 * 2.9 * 2.9 / 2.0).abs() < 1e-12);
        let v = PriorSpec::for_model(ModelId::ExtendedSandi).support_volume();
        assert!((v - 0.5 * 2.9 * 0.92 * 2.9 * 1104.85).abs() < 1e-9);
    }

    #[test]
    fn invalid_constraint_indices() {
        let space = ParameterSpace::for_model(ModelId::BallStick);
        assert!(PriorSpec::new(space, Constraint::OrderedDiffusivities { parallel: 1, perpendicular: 1 }).is_err());
    }
}
