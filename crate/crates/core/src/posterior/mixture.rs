//! Two-component Gaussian mixture fitted by EM to binned samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kde::linear_bin;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
    /// Weight of the first component.
    pub weight: f64,
}

impl MixtureFit {
    pub fn density(&self, x: f64) -> f64 {
        self.weight * normal_pdf(x, self.mu1, self.sigma1) + (1.0 - self.weight) * normal_pdf(x, self.mu2, self.sigma2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    pub max_restarts: usize,
    /// Stop restarting after this many restarts without improvement.
    pub stall_restarts: usize,
    pub max_iterations: usize,
    /// On the mean per-sample log-likelihood.
    pub tolerance: f64,
    pub bins: usize,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { max_restarts: 100, stall_restarts: 10, max_iterations: 500, tolerance: 1e-8, bins: 1000, seed: 0 }
    }
}

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

struct Binned {
    centres: Vec<f64>,
    weights: Vec<f64>,
    total: f64,
}

fn em(data: &Binned, init: MixtureFit, opts: &EmOptions, sigma_floor: f64) -> (MixtureFit, f64) {
    let mut fit = init;
    let mut prev = f64::NEG_INFINITY;
    let mut resp = vec![0.0; data.centres.len()];
    let mut ll = prev;
    let half_ln_tau = 0.5 * (2.0 * std::f64::consts::PI).ln();
    for _ in 0..opts.max_iterations {
        ll = 0.0;
        let k1 = fit.weight.ln() - fit.sigma1.ln() - half_ln_tau;
        let k2 = (1.0 - fit.weight).ln() - fit.sigma2.ln() - half_ln_tau;
        let (q1, q2) = (0.5 / (fit.sigma1 * fit.sigma1), 0.5 / (fit.sigma2 * fit.sigma2));
        let (mut w1, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for ((&c, &w), r) in data.centres.iter().zip(&data.weights).zip(resp.iter_mut()) {
            let a = k1 - q1 * (c - fit.mu1).powi(2);
            let b = k2 - q2 * (c - fit.mu2).powi(2);
            // log-sum-exp with a single exponential
            let e = (-(a - b).abs()).exp();
            let lse = a.max(b) + e.ln_1p();
            *r = if a >= b { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
            ll += w * lse;
            w1 += w * *r;
            s1 += w * *r * c;
            s2 += w * (1.0 - *r) * c;
        }
        ll /= data.total;
        let w2 = data.total - w1;
        if w1 <= 1e-12 * data.total || w2 <= 1e-12 * data.total {
            break;
        }
        let (mu1, mu2) = (s1 / w1, s2 / w2);
        let (mut v1, mut v2) = (0.0, 0.0);
        for ((&c, &w), &r) in data.centres.iter().zip(&data.weights).zip(&resp) {
            v1 += w * r * (c - mu1).powi(2);
            v2 += w * (1.0 - r) * (c - mu2).powi(2);
        }
        fit = MixtureFit {
            mu1,
            sigma1: (v1 / w1).sqrt().max(sigma_floor),
            mu2,
            sigma2: (v2 / w2).sqrt().max(sigma_floor),
            weight: w1 / data.total,
        };
        if (ll - prev).abs() < opts.tolerance {
            break;
        }
        prev = ll;
    }
    (fit, ll)
}

fn weighted_quantile(data: &Binned, p: f64) -> f64 {
    let target = p * data.total;
    let mut acc = 0.0;
    for (&c, &w) in data.centres.iter().zip(&data.weights) {
        acc += w;
        if acc >= target {
            return c;
        }
    }
    *data.centres.last().expect("non-empty")
}

fn pick<R: Rng>(r: &mut R, data: &Binned, score: impl Fn(usize) -> f64) -> f64 {
    let total: f64 = (0..data.centres.len()).map(&score).sum();
    if total <= 0.0 {
        return data.centres[r.gen_range(0..data.centres.len())];
    }
    let u = r.gen::<f64>() * total;
    let mut acc = 0.0;
    for k in 0..data.centres.len() {
        acc += score(k);
        if acc >= u {
            return data.centres[k];
        }
    }
    *data.centres.last().expect("non-empty")
}

/// Best-likelihood fit over deterministic restarts: the first starts from
/// the quartiles, the rest from k-means++-style seeding.
pub fn fit_two_gaussians(values: &[f64], lo: f64, hi: f64, opts: &EmOptions) -> MixtureFit {
    let step = (hi - lo) / (opts.bins - 1) as f64;
    let w = linear_bin(values, lo, hi, opts.bins);
    let (centres, weights): (Vec<f64>, Vec<f64>) = w
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, &w)| (lo + i as f64 * step, w))
        .unzip();
    let total = weights.iter().sum();
    let data = Binned { centres, weights, total };
    let mean = data.centres.iter().zip(&data.weights).map(|(c, w)| c * w).sum::<f64>() / total;
    let sd = (data.centres.iter().zip(&data.weights).map(|(c, w)| w * (c - mean).powi(2)).sum::<f64>() / total).sqrt();
    let floor = step / 2.0;
    let sd = sd.max(floor);
    let start = |a: f64, b: f64| {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        MixtureFit { mu1: a, sigma1: sd, mu2: b, sigma2: sd, weight: 0.5 }
    };

    let mut r = rng::seeded(opts.seed);
    let mut best = em(&data, start(weighted_quantile(&data, 0.25), weighted_quantile(&data, 0.75)), opts, floor);
    let mut stall = 0;
    for _ in 1..opts.max_restarts {
        let c1 = pick(&mut r, &data, |k| data.weights[k]);
        let c2 = pick(&mut r, &data, |k| data.weights[k] * (data.centres[k] - c1).powi(2));
        let cand = em(&data, start(c1, c2), opts, floor);
        if cand.1 > best.1 + opts.tolerance {
            best = cand;
            stall = 0;
        } else {
            stall += 1;
            if stall >= opts.stall_restarts {
                break;
            }
        }
    }
    let f = best.0;
    if f.mu1 <= f.mu2 {
        f
    } else {
        MixtureFit { mu1: f.mu2, sigma1: f.sigma2, mu2: f.mu1, sigma2: f.sigma1, weight: 1.0 - f.weight }
    }
}

/// Number of sign changes of the finite-difference derivative of `f` on a
/// uniform grid (flat steps are skipped).
pub fn derivative_sign_changes(f: impl Fn(f64) -> f64, lo: f64, hi: f64, grid: usize) -> usize {
    let step = (hi - lo) / (grid - 1) as f64;
    let values: Vec<f64> = (0..grid).map(|i| f(lo + i as f64 * step)).collect();
    let mut last = 0i8;
    let mut changes = 0;
    for w in values.windows(2) {
        let s = if w[1] > w[0] {
            1
        } else if w[1] < w[0] {
            -1
        } else {
            0
        };
        if s != 0 {
            if last != 0 && s != last {
                changes += 1;
            }
            last = s;
        }
    }
    changes
}
