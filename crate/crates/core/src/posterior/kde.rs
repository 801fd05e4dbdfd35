//! Binned Gaussian kernel density estimate on a uniform grid over the prior
//! range, with reflection at both edges.

use serde::{Deserialize, Serialize};

pub const DEFAULT_GRID: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `0.9 · min(sd, IQR/1.34) · n^(−1/5)`.
    #[default]
    Silverman,
    /// Fixed bandwidth as a fraction of the prior range.
    FractionOfRange(f64),
}

#[derive(Debug, Clone)]
pub struct Kde {
    pub lo: f64,
    pub hi: f64,
    /// Density at grid point `lo + i · step`.
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

/// Type-1 (inverse empirical CDF) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((n as f64 * p).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Linear binning onto `grid` points spanning `[lo, hi]`; values outside are
/// clamped to the edges.
pub fn linear_bin(values: &[f64], lo: f64, hi: f64, grid: usize) -> Vec<f64> {
    let step = (hi - lo) / (grid - 1) as f64;
    let mut w = vec![0.0; grid];
    for &v in values {
        let p = ((v - lo) / step).clamp(0.0, (grid - 1) as f64);
        let i = (p.floor() as usize).min(grid - 2);
        let f = p - i as f64;
        w[i] += 1.0 - f;
        w[i + 1] += f;
    }
    w
}

pub fn silverman(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let s = sorted(values);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

impl Kde {
    pub fn fit(values: &[f64], lo: f64, hi: f64, grid: usize, bandwidth: Bandwidth) -> Kde {
        let step = (hi - lo) / (grid - 1) as f64;
        let h = match bandwidth {
            Bandwidth::Silverman => silverman(values),
            Bandwidth::FractionOfRange(f) => f * (hi - lo),
        }
        .max(step);
        let weights = linear_bin(values, lo, hi, grid);
        let hg = h / step;
        let reach = ((5.0 * hg).ceil() as usize).min(2 * grid);
        let kernel: Vec<f64> = (0..=reach).map(|k| (-0.5 * (k as f64 / hg).powi(2)).exp()).collect();
        let last = (grid - 1) as i64;
        let mut density = vec![0.0; grid];
        for (j, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let j = j as i64;
            // direct, reflected about the lower edge, reflected about the upper edge
            for centre in [j, -j, 2 * last - j] {
                let a = (centre - reach as i64).max(0);
                let b = (centre + reach as i64).min(last);
                for i in a..=b {
                    density[i as usize] += w * kernel[(i - centre).unsigned_abs() as usize];
                }
            }
        }
        let norm = values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt();
        density.iter_mut().for_each(|d| *d /= norm);
        Kde { lo, hi, density, bandwidth: h }
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.density.len() - 1) as f64
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &d) in self.density.iter().enumerate() {
            if d > self.density[best] {
                best = i;
            }
        }
        best
    }

    pub fn mode(&self) -> f64 {
        self.lo + self.argmax() as f64 * self.step()
    }

    /// Linearly interpolated density at `v`.
    pub fn at(&self, v: f64) -> f64 {
        let n = self.density.len();
        let p = ((v - self.lo) / self.step()).clamp(0.0, (n - 1) as f64);
        let i = (p.floor() as usize).min(n - 2);
        let f = p - i as f64;
        self.density[i] * (1.0 - f) + self.density[i + 1] * f
    }

    /// Full width at half maximum in grid units, from the outermost
    /// half-maximum crossings.
    pub fn fwhm_grid_units(&self) -> f64 {
        let d = &self.density;
        let half = d[self.argmax()] / 2.0;
        let a = d.iter().position(|&v| v >= half).expect("maximum exists");
        let b = d.iter().rposition(|&v| v >= half).expect("maximum exists");
        let left = if a == 0 { 0.0 } else { (a - 1) as f64 + (half - d[a - 1]) / (d[a] - d[a - 1]) };
        let right = if b == d.len() - 1 { b as f64 } else { b as f64 + (d[b] - half) / (d[b] - d[b + 1]) };
        right - left
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type_one_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.25), 1.0);
        assert_eq!(quantile_sorted(&v, 0.5), 2.0);
        assert_eq!(quantile_sorted(&v, 0.75), 3.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
    }

    #[test]
    fn binning_preserves_mass() {
        let w = linear_bin(&[0.0, 0.3337, 1.0, 2.0], 0.0, 1.0, 11);
        assert!((w.iter().sum::<f64>() - 4.0).abs() < 1e-12);
        assert_eq!(w[10], 2.0);
    }

    #[test]
    fn reflected_density_integrates_to_one() {
        let v: Vec<f64> = (0..2000).map(|i| (i as f64 / 2000.0).powi(3)).collect();
        let k = Kde::fit(&v, 0.0, 1.0, 1000, Bandwidth::Silverman);
        let mass: f64 = k.density.iter().sum::<f64>() * k.step() - 0.5 * (k.density[0] + k.density[999]) * k.step();
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    }
}
