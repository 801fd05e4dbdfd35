//! Dense layers addressing a flat parameter buffer, plus Adam.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, CowArray, Ix2};
use rand::Rng;

/// Fully connected layer `y = x Wᵀ + b`. `W` is `outputs × inputs`, row-major,
/// stored in the model's flat parameter vector; an optional 0/1 mask is
/// applied to `W` on every use.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    weight_offset: usize,
    bias_offset: Option<usize>,
    mask: Option<Array2<f64>>,
}

impl Dense {
    pub(crate) fn allocate(
        cursor: &mut usize,
        inputs: usize,
        outputs: usize,
        bias: bool,
        mask: Option<Array2<f64>>,
    ) -> Self {
        let weight_offset = *cursor;
        *cursor += inputs * outputs;
        let bias_offset = bias.then(|| {
            let o = *cursor;
            *cursor += outputs;
            o
        });
        Dense { inputs, outputs, weight_offset, bias_offset, mask }
    }

    pub fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        let n = self.inputs * self.outputs;
        ArrayView2::from_shape((self.outputs, self.inputs), &p[self.weight_offset..self.weight_offset + n])
            .expect("layout is consistent")
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> Option<ArrayView1<'a, f64>> {
        self.bias_offset.map(|o| ArrayView1::from(&p[o..o + self.outputs]))
    }

    pub fn mask(&self) -> Option<&Array2<f64>> {
        self.mask.as_ref()
    }

    pub(crate) fn set_mask(&mut self, mask: Option<Array2<f64>>) {
        self.mask = mask;
    }

    /// Masked weight matrix.
    pub fn effective<'a>(&self, p: &'a [f64]) -> CowArray<'a, f64, Ix2> {
        let w = self.weight(p);
        match &self.mask {
            None => CowArray::from(w),
            Some(m) => CowArray::from(&w * m),
        }
    }

    /// `x Wᵀ + b`.
    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = match self.bias(p) {
            Some(b) => b.broadcast((x.nrows(), self.outputs)).expect("bias width").to_owned(),
            None => Array2::zeros((x.nrows(), self.outputs)),
        };
        self.forward_acc(p, x, &mut y);
        y
    }

    /// `out += x Wᵀ` (no bias).
    pub fn forward_acc(&self, p: &[f64], x: ArrayView2<f64>, out: &mut Array2<f64>) {
        let w = self.effective(p);
        general_mat_mul(1.0, &x, &w.t(), 1.0, out);
    }

    /// `g W`: gradient with respect to the layer input.
    pub fn input_grad(&self, p: &[f64], g: ArrayView2<f64>) -> Array2<f64> {
        g.dot(&self.effective(p))
    }

    /// Accumulates `∂W += gᵀ x` (masked) and `∂b += Σ g` into `grad`.
    pub fn accumulate_grad(&self, grad: &mut [f64], g: ArrayView2<f64>, x: ArrayView2<f64>) {
        let n = self.inputs * self.outputs;
        {
            let mut gw = ArrayViewMut2::from_shape(
                (self.outputs, self.inputs),
                &mut grad[self.weight_offset..self.weight_offset + n],
            )
            .expect("layout is consistent");
            general_mat_mul(1.0, &g.t(), &x, 1.0, &mut gw);
            if let Some(m) = &self.mask {
                gw.zip_mut_with(m, |a, &k| *a *= k);
            }
        }
        if let Some(o) = self.bias_offset {
            let gb: Array1<f64> = g.sum_axis(Axis(0));
            for (a, b) in grad[o..o + self.outputs].iter_mut().zip(gb.iter()) {
                *a += b;
            }
        }
    }

    /// Uniform in `±1/√fan_in` for weights and bias.
    pub(crate) fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        let bound = 1.0 / (self.inputs.max(1) as f64).sqrt();
        let n = self.inputs * self.outputs;
        for v in &mut p[self.weight_offset..self.weight_offset + n] {
            *v = rng.gen_range(-bound..bound);
        }
        if let Some(o) = self.bias_offset {
            for v in &mut p[o..o + self.outputs] {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }

    pub(crate) fn zero(&self, p: &mut [f64]) {
        let n = self.inputs * self.outputs;
        p[self.weight_offset..self.weight_offset + n].fill(0.0);
        if let Some(o) = self.bias_offset {
            p[o..o + self.outputs].fill(0.0);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_and_masked_gradient() {
        let mut cursor = 0;
        let mask = array![[1.0, 0.0], [1.0, 1.0]];
        let layer = Dense::allocate(&mut cursor, 2, 2, true, Some(mask));
        assert_eq!(cursor, 6);
        let p = vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5];
        let y = layer.forward(&p, array![[1.0, 1.0]].view());
        assert_eq!(y, array![[1.5, 6.5]]);
        let mut g = vec![0.0; 6];
        layer.accumulate_grad(&mut g, array![[1.0, 1.0]].view(), array![[2.0, 3.0]].view());
        assert_eq!(g, vec![2.0, 0.0, 2.0, 3.0, 1.0, 1.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }
}
