//! Restricted diffusion in a sphere under the Gaussian phase approximation.

use crate::error::{Error, Result};

pub const DEFAULT_TERMS: usize = 20;

/// Soma diffusivity used to relate C_s to radius (µm²/ms).
pub const SOMA_DIFFUSIVITY: f64 = 3.0;

/// `J_{3/2}(x)/x - J_{5/2}(x)`, written with elementary functions.
pub fn boundary_condition(x: f64) -> f64 {
    let (s, c) = x.sin_cos();
    let scale = (2.0 / (std::f64::consts::PI * x)).sqrt();
    let j32 = scale * (s / x - c);
    let j52 = scale * ((3.0 / (x * x) - 1.0) * s - 3.0 * c / x);
    j32 / x - j52
}

/// First roots β_m of the sphere boundary condition (α_m = β_m / r_s).
#[derive(Debug, Clone, PartialEq)]
pub struct SphereRootTable {
    roots: Vec<f64>,
}

impl SphereRootTable {
    pub fn new(n: usize) -> Self {
        let mut roots = Vec::with_capacity(n);
        let step = 0.05;
        let mut lo = 0.5;
        let mut f_lo = boundary_condition(lo);
        while roots.len() < n {
            let hi = lo + step;
            let f_hi = boundary_condition(hi);
            if f_lo == 0.0 {
                roots.push(lo);
            } else if f_lo * f_hi < 0.0 {
                roots.push(bisect(lo, hi, f_lo));
            }
            lo = hi;
            f_lo = f_hi;
        }
        SphereRootTable { roots }
    }

    pub fn roots(&self) -> &[f64] {
        &self.roots
    }
}

impl Default for SphereRootTable {
    fn default() -> Self {
        Self::new(DEFAULT_TERMS)
    }
}

fn bisect(mut lo: f64, mut hi: f64, mut f_lo: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f_mid = boundary_condition(mid);
        if f_mid == 0.0 || hi - lo < 1e-15 * mid {
            return mid;
        }
        if f_lo * f_mid < 0.0 {
            hi = mid;
        } else {
            lo = mid;
            f_lo = f_mid;
        }
    }
    0.5 * (lo + hi)
}

/// Soma proxy C_s (µm²) for radius `r_s` (µm), diffusivity `d_s`
/// (µm²/ms) and gradient timings (ms), truncated at the table length.
/// The sphere attenuation is `exp(-q² C_s)`.
pub fn sphere_cs(r_s: f64, d_s: f64, delta_small: f64, delta_big: f64, roots: &SphereRootTable) -> Result<f64> {
    for (name, v) in [("r_s", r_s), ("D_s", d_s), ("delta", delta_small), ("Delta", delta_big)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Validation(format!("{name} must be positive, got {v}")));
        }
    }
    let sum: f64 = roots
        .roots()
        .iter()
        .map(|&beta| {
            let alpha = beta / r_s;
            let a2 = alpha * alpha;
            let ad = a2 * d_s;
            let tail = 2.0 + (-ad * (delta_big - delta_small)).exp()
                - 2.0 * (-ad * delta_small).exp()
                - 2.0 * (-ad * delta_big).exp()
                + (-ad * (delta_big + delta_small)).exp();
            (2.0 * delta_small - tail / ad) / (a2 * a2 * (beta * beta - 2.0))
        })
        .sum();
    Ok(2.0 / (d_s * delta_small * delta_small) * sum)
}
