//! Conditional affine MADE block.
//!
//! Inputs carry degrees `1..=d` in block order. Hidden units get degrees in
//! `1..d` (all 0 when `d = 1`), assigned in contiguous, balanced groups.
//! Hidden connections are kept when the receiving degree is at least the
//! sending degree; output connections need a strictly larger degree. Output
//! `i` is the shift `t_i` and output `d + i` the raw log-scale of dimension
//! `i`, both with degree `i + 1`. The context enters the first hidden layer
//! and the outputs unmasked.
//!
//! Forward transform: `z_i = u_i · exp(s̃_i) + t_i` with the soft clamp
//! `s̃ = C · tanh(s / C)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use super::layers::Dense;

/// Bound `C` of the soft log-scale clamp.
pub const LOG_SCALE_BOUND: f64 = 7.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MadeBlock {
    pub d: usize,
    pub hidden: usize,
    pub context_width: usize,
    /// `order[j]` is the parameter index read at autoregressive position `j`.
    pub order: Vec<usize>,
    pub input_degrees: Vec<usize>,
    pub hidden_degrees: Vec<usize>,
    pub output_degrees: Vec<usize>,
    pub(crate) input_layer: Dense,
    pub(crate) context_layer: Dense,
    pub(crate) hidden_layer: Dense,
    pub(crate) output_layer: Dense,
    pub(crate) context_output: Dense,
}

pub(crate) struct BlockCache {
    u: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    s_tilde: Array2<f64>,
    scale: Array2<f64>,
}

pub fn hidden_degrees(d: usize, hidden: usize) -> Vec<usize> {
    if d <= 1 {
        return vec![0; hidden];
    }
    (0..hidden).map(|k| 1 + k * (d - 1) / hidden).collect()
}

fn mask(rows: &[usize], cols: &[usize], strict: bool) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(r, c)| {
        let keep = if strict { rows[r] > cols[c] } else { rows[r] >= cols[c] };
        if keep {
            1.0
        } else {
            0.0
        }
    })
}

fn soft_clamp(s: f64) -> f64 {
    LOG_SCALE_BOUND * (s / LOG_SCALE_BOUND).tanh()
}

impl MadeBlock {
    pub(crate) fn allocate(cursor: &mut usize, d: usize, hidden: usize, context_width: usize, order: Vec<usize>) -> Self {
        let input_degrees: Vec<usize> = (1..=d).collect();
        let hidden_degrees = hidden_degrees(d, hidden);
        let output_degrees: Vec<usize> = (1..=d).chain(1..=d).collect();
        let input_layer = Dense::allocate(cursor, d, hidden, true, Some(mask(&hidden_degrees, &input_degrees, false)));
        let context_layer = Dense::allocate(cursor, context_width, hidden, false, None);
        let hidden_layer =
            Dense::allocate(cursor, hidden, hidden, true, Some(mask(&hidden_degrees, &hidden_degrees, false)));
        let output_layer =
            Dense::allocate(cursor, hidden, 2 * d, true, Some(mask(&output_degrees, &hidden_degrees, true)));
        let context_output = Dense::allocate(cursor, context_width, 2 * d, false, None);
        MadeBlock {
            d,
            hidden,
            context_width,
            order,
            input_degrees,
            hidden_degrees,
            output_degrees,
            input_layer,
            context_layer,
            hidden_layer,
            output_layer,
            context_output,
        }
    }

    /// Random weights everywhere except the output layers, which start at
    /// zero so the block is the identity map.
    pub(crate) fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        self.input_layer.init(p, rng);
        self.context_layer.init(p, rng);
        self.hidden_layer.init(p, rng);
        self.output_layer.zero(p);
        self.context_output.zero(p);
    }

    /// Copy with every mask replaced by all-ones (negative control).
    pub fn unmasked(&self) -> Self {
        let mut b = self.clone();
        for l in [&mut b.input_layer, &mut b.hidden_layer, &mut b.output_layer] {
            l.set_mask(None);
        }
        b
    }

    /// Raw conditioner outputs `[t | s]`, `n × 2d`.
    pub fn net_outputs(&self, p: &[f64], u: ArrayView2<f64>, ctx: ArrayView2<f64>) -> Array2<f64> {
        let (_, _, o) = self.hidden_and_outputs(p, u, ctx);
        o
    }

    fn hidden_and_outputs(
        &self,
        p: &[f64],
        u: ArrayView2<f64>,
        ctx: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut h1 = self.input_layer.forward(p, u);
        self.context_layer.forward_acc(p, ctx, &mut h1);
        h1.mapv_inplace(|v| v.max(0.0));
        let mut h2 = self.hidden_layer.forward(p, h1.view());
        h2.mapv_inplace(|v| v.max(0.0));
        let mut o = self.output_layer.forward(p, h2.view());
        self.context_output.forward_acc(p, ctx, &mut o);
        (h1, h2, o)
    }

    /// `u → z`; returns `z`, the per-row log-determinant and a cache for the
    /// backward pass.
    pub(crate) fn forward(
        &self,
        p: &[f64],
        u: ArrayView2<f64>,
        ctx: ArrayView2<f64>,
    ) -> (Array2<f64>, Array1<f64>, BlockCache) {
        let d = self.d;
        let (h1, h2, o) = self.hidden_and_outputs(p, u, ctx);
        let s_tilde = o.slice(s![.., d..]).mapv(soft_clamp);
        let scale = s_tilde.mapv(f64::exp);
        let mut z = &u * &scale;
        z += &o.slice(s![.., ..d]);
        let logdet = s_tilde.sum_axis(Axis(1));
        let cache = BlockCache { u: u.to_owned(), h1, h2, s_tilde, scale };
        (z, logdet, cache)
    }

    /// Backpropagates `g_z = ∂L/∂z` and a weight `w_logdet = ∂L/∂(Σ s̃)`
    /// (same for every row). Accumulates parameter gradients and context
    /// gradients; returns `∂L/∂u`.
    pub(crate) fn backward(
        &self,
        p: &[f64],
        grad: &mut [f64],
        cache: &BlockCache,
        ctx: ArrayView2<f64>,
        g_z: ArrayView2<f64>,
        w_logdet: f64,
        g_ctx: &mut Array2<f64>,
    ) -> Array2<f64> {
        let d = self.d;
        let n = g_z.nrows();
        let mut g_o = Array2::zeros((n, 2 * d));
        g_o.slice_mut(s![.., ..d]).assign(&g_z);
        {
            let mut g_s = g_o.slice_mut(s![.., d..]);
            Zip::from(&mut g_s)
                .and(&g_z)
                .and(&cache.u)
                .and(&cache.scale)
                .and(&cache.s_tilde)
                .for_each(|gs, &gz, &u, &sc, &st| {
                    let r = st / LOG_SCALE_BOUND;
                    *gs = (gz * u * sc + w_logdet) * (1.0 - r * r);
                });
        }
        let mut g_u = &g_z * &cache.scale;

        self.output_layer.accumulate_grad(grad, g_o.view(), cache.h2.view());
        self.context_output.accumulate_grad(grad, g_o.view(), ctx);
        let wo = self.context_output.effective(p);
        general_mat_mul(1.0, &g_o, &wo, 1.0, g_ctx);

        let mut g_a2 = self.output_layer.input_grad(p, g_o.view());
        Zip::from(&mut g_a2).and(&cache.h2).for_each(|g, &h| {
            if h <= 0.0 {
                *g = 0.0
            }
        });
        self.hidden_layer.accumulate_grad(grad, g_a2.view(), cache.h1.view());
        let mut g_a1 = self.hidden_layer.input_grad(p, g_a2.view());
        Zip::from(&mut g_a1).and(&cache.h1).for_each(|g, &h| {
            if h <= 0.0 {
                *g = 0.0
            }
        });
        self.input_layer.accumulate_grad(grad, g_a1.view(), cache.u.view());
        self.context_layer.accumulate_grad(grad, g_a1.view(), ctx);
        let w1 = self.input_layer.effective(p);
        general_mat_mul(1.0, &g_a1, &w1, 1.0, &mut g_u);
        let wc = self.context_layer.effective(p);
        general_mat_mul(1.0, &g_a1, &wc, 1.0, g_ctx);
        g_u
    }

    /// Context contributions `(first hidden pre-activation, outputs)` for one
    /// context vector.
    pub(crate) fn context_terms(&self, p: &[f64], ctx: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
        let c = ctx.insert_axis(Axis(0));
        let mut h = self.input_layer.bias(p).expect("input bias").to_owned().insert_axis(Axis(0));
        self.context_layer.forward_acc(p, c, &mut h);
        let mut o = self.output_layer.bias(p).expect("output bias").to_owned().insert_axis(Axis(0));
        self.context_output.forward_acc(p, c, &mut o);
        (h.remove_axis(Axis(0)), o.remove_axis(Axis(0)))
    }

    /// `z → u` for a shared context, one dimension at a time. Hidden units
    /// are evaluated once, as soon as all their inputs are known.
    pub(crate) fn inverse(&self, p: &[f64], z: ArrayView2<f64>, c1: ArrayView1<f64>, co: ArrayView1<f64>) -> Array2<f64> {
        let (n, d, h) = (z.nrows(), self.d, self.hidden);
        let w1 = self.input_layer.effective(p);
        let w2 = self.hidden_layer.effective(p);
        let wo = self.output_layer.effective(p);
        let b2 = self.hidden_layer.bias(p).expect("hidden bias");
        let mut u = Array2::zeros((n, d));
        let mut h1 = Array2::zeros((n, h));
        let mut h2 = Array2::zeros((n, h));
        let mut done = 0;
        for i in 0..d {
            let end = self.hidden_degrees.iter().take_while(|&&g| g <= i).count();
            if end > done {
                let r = done..end;
                {
                    let mut blk = h1.slice_mut(s![.., r.clone()]);
                    blk.assign(&c1.slice(s![r.clone()]));
                    if i > 0 {
                        general_mat_mul(1.0, &u.slice(s![.., ..i]), &w1.slice(s![r.clone(), ..i]).t(), 1.0, &mut blk);
                    }
                    blk.mapv_inplace(|v| v.max(0.0));
                }
                let h1p = h1.slice(s![.., ..end]).to_owned();
                let mut blk = h2.slice_mut(s![.., r.clone()]);
                blk.assign(&b2.slice(s![r.clone()]));
                general_mat_mul(1.0, &h1p, &w2.slice(s![r, ..end]).t(), 1.0, &mut blk);
                blk.mapv_inplace(|v| v.max(0.0));
                done = end;
            }
            let hp = h2.slice(s![.., ..end]);
            let t = hp.dot(&wo.slice(s![i, ..end])) + co[i];
            let sv = hp.dot(&wo.slice(s![d + i, ..end])) + co[d + i];
            let mut col = u.column_mut(i);
            Zip::from(&mut col).and(&z.column(i)).and(&t).and(&sv).for_each(|u, &z, &t, &s| {
                *u = (z - t) * (-soft_clamp(s)).exp();
            });
        }
        u
    }
}

/// True iff every conditioner output `i` is insensitive (finite-difference
/// derivative below 1e-7) to inputs at positions `j ≥ i`.
pub fn autoregressive_check(block: &MadeBlock, p: &[f64], context: &[f64]) -> bool {
    let d = block.d;
    let ctx = ArrayView2::from_shape((1, context.len()), context).expect("context row");
    let base: Vec<f64> = (0..d).map(|j| 0.3 + 0.4 * j as f64 / d as f64 - 0.2).collect();
    let eps = 1e-5;
    for j in 0..d {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[j] += eps;
        minus[j] -= eps;
        let op = block.net_outputs(p, ArrayView2::from_shape((1, d), &plus).unwrap(), ctx);
        let om = block.net_outputs(p, ArrayView2::from_shape((1, d), &minus).unwrap(), ctx);
        for i in 0..=j {
            for k in [i, d + i] {
                let deriv = (op[[0, k]] - om[[0, k]]) / (2.0 * eps);
                if deriv.abs() >= 1e-7 {
                    return false;
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degrees_are_balanced() {
        assert_eq!(hidden_degrees(1, 4), vec![0; 4]);
        let h = hidden_degrees(3, 64);
        assert_eq!(h.iter().filter(|&&g| g == 1).count(), 32);
        assert_eq!(h.iter().filter(|&&g| g == 2).count(), 32);
        let h = hidden_degrees(6, 64);
        assert!(h.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!((h[0], h[63]), (1, 5));
    }

    #[test]
    fn output_mask_is_strict() {
        let mut c = 0;
        let b = MadeBlock::allocate(&mut c, 3, 8, 2, vec![0, 1, 2]);
        let m = b.output_layer.mask().unwrap();
        for i in 0..6 {
            for k in 0..8 {
                assert_eq!(m[[i, k]] == 1.0, b.output_degrees[i] > b.hidden_degrees[k]);
            }
        }
        // first dimension depends on the context only
        assert!(m.row(0).iter().all(|&v| v == 0.0));
    }
}
