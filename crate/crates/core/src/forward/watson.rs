//! Orientation-dispersed axially symmetric kernels.
//!
//! For a kernel `K(g·n) = exp(-a (g·n)²)` averaged over a Watson density
//! `W(n; µ, κ) ∝ exp(κ (µ·n)²)`, both factors are zonal, so the sphere
//! integral reduces to a Legendre series in `c = g·µ`:
//!
//! ```text
//! ∫ W K dn = Σ_l (2l+1)/2 · ω_l(κ) · k_l(a) · P_l(c)      (even l)
//! ω_l = ∫ exp(κt²) P_l dt / ∫ exp(κt²) dt,   k_l = ∫_{-1}^{1} K(t) P_l(t) dt
//! ```
//!
//! Both coefficient integrals are evaluated with Gauss-Legendre nodes; the
//! series is truncated at degree equal to the half-order.

use crate::error::{Error, Result};

pub const MIN_ORDER: usize = 16;
pub const DEFAULT_ORDER: usize = 64;

/// κ = 1 / tan(ODI·π/2).
pub fn odi_to_kappa(odi: f64) -> f64 {
    1.0 / (odi * std::f64::consts::FRAC_PI_2).tan()
}

pub fn kappa_to_odi(kappa: f64) -> f64 {
    (1.0 / kappa).atan() / std::f64::consts::FRAC_PI_2
}

#[derive(Debug, Clone)]
pub struct WatsonQuadrature {
    order: usize,
    /// Non-negative Gauss-Legendre nodes of an `order`-point rule on [-1, 1].
    nodes: Vec<f64>,
    /// Matching weights, doubled so even integrands cover [-1, 1].
    weights: Vec<f64>,
    /// `legendre[k][j] = P_{2k}(nodes[j])`.
    legendre: Vec<Vec<f64>>,
}

impl WatsonQuadrature {
    pub fn new(order: usize) -> Result<Self> {
        if order < MIN_ORDER {
            return Err(Error::Config(format!(
                "quadrature order {order} below minimum {MIN_ORDER}"
            )));
        }
        let order = order + order % 2;
        let (x, w) = gauss_legendre(order);
        let (nodes, weights): (Vec<f64>, Vec<f64>) = x
            .iter()
            .zip(&w)
            .filter(|(&xi, _)| xi > 0.0)
            .map(|(&xi, &wi)| (xi, 2.0 * wi))
            .unzip();
        let max_degree = order / 2;
        let n_terms = max_degree / 2 + 1;
        let mut legendre = vec![vec![0.0; nodes.len()]; n_terms];
        let mut p = vec![0.0; max_degree + 1];
        for (j, &t) in nodes.iter().enumerate() {
            legendre_all(t, &mut p);
            for (k, row) in legendre.iter_mut().enumerate() {
                row[j] = p[2 * k];
            }
        }
        Ok(WatsonQuadrature {
            order,
            nodes,
            weights,
            legendre,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn max_degree(&self) -> usize {
        2 * (self.legendre.len() - 1)
    }

    pub fn n_terms(&self) -> usize {
        self.legendre.len()
    }

    /// Normalized Watson moments ω_{2k}.
    pub fn watson_moments(&self, kappa: f64) -> Vec<f64> {
        let dens: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * (kappa * (t * t - 1.0)).exp())
            .collect();
        let norm: f64 = dens.iter().sum();
        self.legendre
            .iter()
            .map(|row| row.iter().zip(&dens).map(|(p, d)| p * d).sum::<f64>() / norm)
            .collect()
    }

    /// Legendre moments of `exp(-a t²)` over [-1, 1].
    pub fn kernel_moments(&self, a: f64) -> Vec<f64> {
        let vals: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * (-a * t * t).exp())
            .collect();
        self.legendre
            .iter()
            .map(|row| row.iter().zip(&vals).map(|(p, v)| p * v).sum::<f64>())
            .collect()
    }

    /// Series coefficients `(4k+1)/2 · ω_{2k} · k_{2k}`.
    pub fn series(&self, watson: &[f64], kernel: &[f64]) -> Vec<f64> {
        watson
            .iter()
            .zip(kernel)
            .enumerate()
            .map(|(k, (w, q))| (4 * k + 1) as f64 * 0.5 * w * q)
            .collect()
    }

    /// Dispersed kernel value at `c = g·µ` for precomputed series
    /// coefficients. `scratch` must hold `max_degree + 1` values.
    pub fn evaluate(&self, coeffs: &[f64], c: f64, scratch: &mut [f64]) -> f64 {
        legendre_all(c, scratch);
        coeffs.iter().enumerate().map(|(k, a)| a * scratch[2 * k]).sum()
    }

    pub fn scratch(&self) -> Vec<f64> {
        vec![0.0; self.max_degree() + 1]
    }
}

/// P_0(x) ..= P_{out.len()-1}(x) by the three-term recurrence.
pub fn legendre_all(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = x;
    }
    for l in 2..out.len() {
        let lf = l as f64;
        out[l] = ((2.0 * lf - 1.0) * x * out[l - 1] - (lf - 1.0) * out[l - 2]) / lf;
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1] (Newton on P_n).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for l in 2..=n {
                let lf = l as f64;
                let p2 = ((2.0 * lf - 1.0) * z * p1 - (lf - 1.0) * p0) / lf;
                p0 = p1;
                p1 = p2;
            }
            // p1 = P_n(z), p0 = P_{n-1}(z)
            dp = nf * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(10);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        let x18: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
        assert!((x18 - 2.0 / 19.0).abs() < 1e-14);
    }

    #[test]
    fn odi_kappa_round_trip() {
        for odi in [0.03, 0.2, 0.5, 0.95] {
            assert!((kappa_to_odi(odi_to_kappa(odi)) - odi).abs() < 1e-12);
        }
        assert!((odi_to_kappa(0.03) - 21.2).abs() < 0.05);
        assert!(odi_to_kappa(0.95) < 0.1);
    }

    #[test]
    fn rejects_low_order() {
        assert!(matches!(WatsonQuadrature::new(8), Err(Error::Config(_))));
    }

    #[test]
    fn isotropic_dispersion_gives_powder_average() {
        // κ = 0: ∫ exp(-a t²) dt / 2 = √π erf(√a) / (4√a)·2
        let q = WatsonQuadrature::new(64).unwrap();
        let a: f64 = 3.0;
        let coeffs = q.series(&q.watson_moments(0.0), &q.kernel_moments(a));
        let mut s = q.scratch();
        let expected = (std::f64::consts::PI / a).sqrt() * 0.5 * erf(a.sqrt());
        for c in [0.0, 0.3, 1.0] {
            assert!((q.evaluate(&coeffs, c, &mut s) - expected).abs() < 1e-10);
        }
    }

    // Abramowitz-Stegun 7.1.26 is too coarse here; integrate directly.
    fn erf(x: f64) -> f64 {
        let (t, w) = gauss_legendre(80);
        let s: f64 = t
            .iter()
            .zip(&w)
            .map(|(t, w)| {
                let u = 0.5 * x * (t + 1.0);
                w * (-u * u).exp()
            })
            .sum();
        s * 0.5 * x * 2.0 / std::f64::consts::PI.sqrt()
    }
}
