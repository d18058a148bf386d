//! Two-layer tanh perceptron with hand-derived backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// `y = W2 tanh(W1 x + b1) + b2`, parameters stored flat as
/// `[W1 (hidden x input, row-major), b1, W2 (output x hidden), b2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    input: usize,
    hidden: usize,
    output: usize,
    params: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut params = vec![0.0; hidden * input + hidden + output * hidden + output];
        let s1 = (6.0 / (input + hidden) as f64).sqrt();
        for w in &mut params[..hidden * input] {
            *w = rng.random_range(-s1..s1);
        }
        let s2 = (6.0 / (hidden + output) as f64).sqrt();
        let off = hidden * input + hidden;
        for w in &mut params[off..off + output * hidden] {
            *w = rng.random_range(-s2..s2);
        }
        Mlp { input, hidden, output, params }
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.params.split_at(self.hidden * self.input);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.output * self.hidden);
        (w1, b1, w2, b2)
    }

    /// Returns `(hidden activations, output)`.
    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.input);
        let (w1, b1, w2, b2) = self.split();
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &w1[j * self.input..(j + 1) * self.input];
                (b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect();
        let y = (0..self.output)
            .map(|k| {
                let row = &w2[k * self.hidden..(k + 1) * self.hidden];
                b2[k] + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        (h, y)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).1
    }

    /// Accumulates dL/dparams into `grad` and returns dL/dx.
    pub fn backward(&self, x: &[f64], h: &[f64], grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (w1, _, w2, _) = self.split();
        let (gw1, rest) = grad.split_at_mut(self.hidden * self.input);
        let (gb1, rest) = rest.split_at_mut(self.hidden);
        let (gw2, gb2) = rest.split_at_mut(self.output * self.hidden);

        let mut grad_h = vec![0.0; self.hidden];
        for k in 0..self.output {
            let g = grad_out[k];
            gb2[k] += g;
            let row = &w2[k * self.hidden..(k + 1) * self.hidden];
            let grow = &mut gw2[k * self.hidden..(k + 1) * self.hidden];
            for j in 0..self.hidden {
                grow[j] += g * h[j];
                grad_h[j] += g * row[j];
            }
        }
        let mut grad_x = vec![0.0; self.input];
        for j in 0..self.hidden {
            let g = grad_h[j] * (1.0 - h[j] * h[j]);
            gb1[j] += g;
            let row = &w1[j * self.input..(j + 1) * self.input];
            let grow = &mut gw1[j * self.input..(j + 1) * self.input];
            for i in 0..self.input {
                grow[i] += g * x[i];
                grad_x[i] += g * row[i];
            }
        }
        grad_x
    }

    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    /// `self = tau * self + (1 - tau) * other`.
    pub fn interpolate_from(&mut self, other: &Mlp, tau: f64) {
        for (p, o) in self.params.iter_mut().zip(&other.params) {
            *p = tau * *p + (1.0 - tau) * o;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(3, 5, 2, &mut rng);
        let x = [0.3, -0.7, 1.1];
        let w = [0.6, -1.3];
        let loss = |n: &Mlp| n.forward(&x).iter().zip(&w).map(|(y, w)| y * w).sum::<f64>();
        let (h, _) = net.forward_cached(&x);
        let mut grad = vec![0.0; net.num_params()];
        let gx = net.backward(&x, &h, &w, &mut grad);
        for i in 0..net.num_params() {
            let old = net.params[i];
            net.params[i] = old + 1e-6;
            let up = loss(&net);
            net.params[i] = old - 1e-6;
            let down = loss(&net);
            net.params[i] = old;
            let fd = (up - down) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grad[i]);
        }
        for i in 0..3 {
            let mut xp = x;
            xp[i] += 1e-6;
            let mut xm = x;
            xm[i] -= 1e-6;
            let f = |x: &[f64]| net.forward(x).iter().zip(&w).map(|(y, w)| y * w).sum::<f64>();
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - gx[i]).abs() < 1e-7);
        }
    }
}
