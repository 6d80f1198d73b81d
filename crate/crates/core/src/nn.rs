//! Small dense-network building blocks: the activation, Adam, and batched
//! feed-forward encoders with cached activations for backpropagation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

/// Squareplus, `(x + √(x² + 4)) / 2`: a smooth rectifier that needs only a
/// square root. Returns the value and the derivative.
#[inline]
pub fn act(x: f64) -> (f64, f64) {
    let r = (x * x + 4.0).sqrt();
    (0.5 * (x + r), 0.5 * (1.0 + x / r))
}

#[inline]
pub fn act_value(x: f64) -> f64 {
    0.5 * (x + (x * x + 4.0).sqrt())
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Location of one affine layer `y = W x + b` inside a flat parameter vector.
/// `W` is stored row-major with shape `(out, inp)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub out: usize,
    pub inp: usize,
}

impl Linear {
    pub fn alloc(cursor: &mut usize, out: usize, inp: usize, bias: bool) -> Self {
        let w = *cursor;
        *cursor += out * inp;
        let b = bias.then(|| {
            let b = *cursor;
            *cursor += out;
            b
        });
        Linear { w, b, out, inp }
    }

    pub fn size(&self) -> usize {
        self.out * self.inp + if self.b.is_some() { self.out } else { 0 }
    }

    pub fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.out, self.inp), &p[self.w..self.w + self.out * self.inp]).unwrap()
    }

    pub fn weight_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.out, self.inp), &mut p[self.w..self.w + self.out * self.inp]).unwrap()
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> Option<ArrayView1<'a, f64>> {
        self.b.map(|b| ArrayView1::from(&p[b..b + self.out]))
    }

    pub fn bias_mut<'a>(&self, p: &'a mut [f64]) -> Option<ArrayViewMut1<'a, f64>> {
        self.b.map(|b| ArrayViewMut1::from(&mut p[b..b + self.out]))
    }

    /// Batched forward for row-major inputs `(n, inp)`.
    pub fn forward_rows(&self, p: &[f64], x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight(p).t());
        if let Some(b) = self.bias(p) {
            y += &b;
        }
        y
    }

    pub fn forward_vec(&self, p: &[f64], x: ArrayView1<f64>) -> Array1<f64> {
        let mut y = self.weight(p).dot(&x);
        if let Some(b) = self.bias(p) {
            y += &b;
        }
        y
    }

    /// Accumulates parameter gradients for a batched layer and returns the
    /// gradient with respect to the inputs.
    pub fn backward_rows(
        &self,
        p: &[f64],
        grad: &mut [f64],
        x: &ArrayView2<f64>,
        dy: &ArrayView2<f64>,
    ) -> Array2<f64> {
        {
            let mut gw = self.weight_mut(grad);
            gw += &dy.t().dot(x);
        }
        if let Some(mut gb) = self.bias_mut(grad) {
            gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight(p))
    }

    /// Single-vector variant of [`backward_rows`](Self::backward_rows).
    pub fn backward_vec(
        &self,
        p: &[f64],
        grad: &mut [f64],
        x: ArrayView1<f64>,
        dy: ArrayView1<f64>,
    ) -> Array1<f64> {
        {
            let mut gw = self.weight_mut(grad);
            for (o, &d) in dy.iter().enumerate() {
                if d != 0.0 {
                    gw.row_mut(o).scaled_add(d, &x);
                }
            }
        }
        if let Some(mut gb) = self.bias_mut(grad) {
            gb += &dy;
        }
        self.weight(p).t().dot(&dy)
    }

    /// Fan-in scaled uniform initialisation `U(-1/√inp, 1/√inp)`; zero when
    /// `zero` is set.
    pub fn init(&self, p: &mut [f64], zero: bool, rng: &mut impl rand::Rng) {
        let bound = 1.0 / (self.inp as f64).sqrt();
        for v in &mut p[self.w..self.w + self.out * self.inp] {
            *v = if zero { 0.0 } else { rng.gen_range(-bound..bound) };
        }
        if let Some(b) = self.b {
            for v in &mut p[b..b + self.out] {
                *v = if zero { 0.0 } else { rng.gen_range(-bound..bound) };
            }
        }
    }
}

/// Stack of `Linear` + activation layers applied row-wise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub layers: Vec<Linear>,
}

/// Inputs and activations of an encoder pass over a batch of rows.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    input: Array2<f64>,
    /// Output of each layer after the activation.
    outputs: Vec<Array2<f64>>,
    /// Activation derivative at each layer's pre-activation.
    slopes: Vec<Array2<f64>>,
}

impl EncoderCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().unwrap_or(&self.input)
    }
}

impl Encoder {
    pub fn alloc(cursor: &mut usize, inp: usize, hidden: usize, depth: usize) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut d = inp;
        for _ in 0..depth {
            layers.push(Linear::alloc(cursor, hidden, d, true));
            d = hidden;
        }
        Encoder { layers }
    }

    pub fn forward(&self, p: &[f64], input: Array2<f64>) -> EncoderCache {
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        let mut slopes = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let x = if k == 0 { input.view() } else { outputs[k - 1].view() };
            let mut z = layer.forward_rows(p, &x);
            let mut s = Array2::<f64>::zeros(z.raw_dim());
            ndarray::Zip::from(&mut z).and(&mut s).for_each(|z, s| {
                let (a, d) = act(*z);
                *z = a;
                *s = d;
            });
            outputs.push(z);
            slopes.push(s);
        }
        EncoderCache { input, outputs, slopes }
    }

    /// Backpropagates `d_out` (gradient w.r.t. the encoder output rows).
    pub fn backward(&self, p: &[f64], grad: &mut [f64], cache: &EncoderCache, d_out: Array2<f64>) {
        let mut d = d_out;
        for k in (0..self.layers.len()).rev() {
            d *= &cache.slopes[k];
            let x = if k == 0 { cache.input.view() } else { cache.outputs[k - 1].view() };
            let dx = self.layers[k].backward_rows(p, grad, &x, &d.view());
            d = dx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_derivative() {
        for &x in &[-5.0, -1.0, -0.1, 0.0, 0.3, 2.0, 8.0] {
            let h = 1e-6;
            let fd = (act_value(x + h) - act_value(x - h)) / (2.0 * h);
            assert!((fd - act(x).1).abs() < 1e-8);
            assert_eq!(act(x).0, act_value(x));
        }
        assert_eq!(act(0.0), (1.0, 0.5));
        assert!(act_value(-1e6) > 0.0 && act_value(-1e6) < 1e-5);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut a = Adam::new(3);
        a.step(&mut p, &[0.0; 3], 0.001);
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = vec![0.0; 4];
        let g = [0.3, -7.0, 1e-3, -0.05];
        let mut a = Adam::new(4);
        a.step(&mut p, &g, 0.001);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        for (pi, gi) in p.iter().zip(g) {
            let want = -0.001 * gi / (gi.abs() + 1e-8);
            assert!((pi - want).abs() < 1e-15);
            assert!((pi.abs() - 0.001).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_second_identical_step_is_not_larger() {
        let mut p = vec![0.0; 2];
        let g = [0.5, -0.2];
        let mut a = Adam::new(2);
        a.step(&mut p, &g, 0.01);
        let first = p.clone();
        a.step(&mut p, &g, 0.01);
        for i in 0..2 {
            let second = (p[i] - first[i]).abs();
            assert!(second <= 0.01 + 1e-12);
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut cursor = 0;
        let enc = Encoder::alloc(&mut cursor, 2, 5, 2);
        let mut p = vec![0.0; cursor];
        for l in &enc.layers {
            l.init(&mut p, false, &mut rng);
        }
        let input = Array2::from_shape_fn((4, 2), |(i, j)| (i as f64 - 1.5) * 0.7 + j as f64 * 0.3);
        let w = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64).sin());
        let loss = |p: &[f64]| (enc.forward(p, input.clone()).output() * &w).sum();
        let cache = enc.forward(&p, input.clone());
        let mut grad = vec![0.0; cursor];
        enc.backward(&p, &mut grad, &cache, w.clone());
        for k in 0..cursor {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[k] += 1e-6;
            lo[k] -= 1e-6;
            let fd = (loss(&hi) - loss(&lo)) / 2e-6;
            assert!((fd - grad[k]).abs() < 1e-7, "k={k} fd={fd} g={}", grad[k]);
        }
    }
}
