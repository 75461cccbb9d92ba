//! Fully-connected networks over a flat parameter slice, with a recorded forward pass
//! ("tape") that the backward pass replays in reverse.
//!
//! Layer `l` stores its weight matrix row-major as `outputs x inputs`, followed by the
//! bias vector. Batches are row-major `batch x features`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hash_grid::truncated_normal;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(T::zero()),
            Activation::Softplus => z.max(T::zero()) + (-z.abs()).exp().ln_1p(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Softplus => T::one() - (-y).exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LayerSpec>,
    param_count: usize,
}

/// Activations recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpTape<T> {
    pub batch: usize,
    /// `acts[0]` is the input, `acts[l + 1]` the post-activation output of layer `l`.
    pub acts: Vec<Vec<T>>,
}

impl<T: Real> MlpTape<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    pub fn new(inputs: usize, hidden: &[usize], outputs: usize, hidden_activation: Activation, output_activation: Activation) -> Self {
        let mut dims = vec![inputs];
        dims.extend_from_slice(hidden);
        dims.push(outputs);
        let mut offset = 0;
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (l, w) in dims.windows(2).enumerate() {
            let activation = if l + 2 == dims.len() {
                output_activation
            } else {
                hidden_activation
            };
            let weight_offset = offset;
            offset += w[0] * w[1];
            let bias_offset = offset;
            offset += w[1];
            layers.push(LayerSpec {
                inputs: w[0],
                outputs: w[1],
                activation,
                weight_offset,
                bias_offset,
            });
        }
        Mlp {
            layers,
            param_count: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    /// Fan-in scaled truncated-normal weights, zero biases.
    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> Vec<T> {
        let mut params = vec![T::zero(); self.param_count];
        for layer in &self.layers {
            let std = (2.0 / layer.inputs as f64).sqrt();
            for w in &mut params[layer.weight_offset..layer.bias_offset] {
                *w = T::lit(truncated_normal(rng) * std);
            }
        }
        params
    }

    pub fn last_layer_range(&self) -> std::ops::Range<usize> {
        let l = self.layers.last().expect("mlp has layers");
        l.weight_offset..l.bias_offset + l.outputs
    }

    pub fn forward<T: Real>(&self, params: &[T], input: &[T], batch: usize) -> MlpTape<T> {
        debug_assert_eq!(params.len(), self.param_count);
        debug_assert_eq!(input.len(), batch * self.inputs());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for layer in &self.layers {
            let x = acts.last().expect("input recorded");
            let w = &params[layer.weight_offset..layer.bias_offset];
            let b = &params[layer.bias_offset..layer.bias_offset + layer.outputs];
            let mut y = Vec::with_capacity(batch * layer.outputs);
            for _ in 0..batch {
                y.extend_from_slice(b);
            }
            T::gemm(
                batch,
                layer.inputs,
                layer.outputs,
                T::one(),
                x,
                layer.inputs as isize,
                1,
                w,
                1,
                layer.inputs as isize,
                T::one(),
                &mut y,
                layer.outputs as isize,
                1,
            );
            if layer.activation != Activation::Identity {
                for v in &mut y {
                    *v = layer.activation.apply(*v);
                }
            }
            acts.push(y);
        }
        MlpTape { batch, acts }
    }

    /// Replays `tape` backwards: accumulates parameter gradients into `grad` and, when
    /// requested, returns the gradient with respect to the input batch.
    pub fn backward<T: Real>(&self, params: &[T], tape: &MlpTape<T>, d_out: &[T], grad: &mut [T], want_input_grad: bool) -> Option<Vec<T>> {
        let batch = tape.batch;
        debug_assert_eq!(d_out.len(), batch * self.outputs());
        let mut dy = d_out.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let y = &tape.acts[l + 1];
            let x = &tape.acts[l];
            if layer.activation != Activation::Identity {
                for (d, v) in dy.iter_mut().zip(y) {
                    *d *= layer.activation.derivative_from_output(*v);
                }
            }
            // dW += dZ^T X
            T::gemm(
                layer.outputs,
                batch,
                layer.inputs,
                T::one(),
                &dy,
                1,
                layer.outputs as isize,
                x,
                layer.inputs as isize,
                1,
                T::one(),
                &mut grad[layer.weight_offset..layer.bias_offset],
                layer.inputs as isize,
                1,
            );
            let gb = &mut grad[layer.bias_offset..layer.bias_offset + layer.outputs];
            for row in dy.chunks_exact(layer.outputs) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += *d;
                }
            }
            if l == 0 && !want_input_grad {
                return None;
            }
            let w = &params[layer.weight_offset..layer.bias_offset];
            let mut dx = vec![T::zero(); batch * layer.inputs];
            T::gemm(
                batch,
                layer.outputs,
                layer.inputs,
                T::one(),
                &dy,
                layer.outputs as isize,
                1,
                w,
                layer.inputs as isize,
                1,
                T::zero(),
                &mut dx,
                layer.inputs as isize,
                1,
            );
            dy = dx;
        }
        Some(dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_forward(mlp: &Mlp, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in &mlp.layers {
            let mut next = vec![0.0; layer.outputs];
            for (o, n) in next.iter_mut().enumerate() {
                let mut z = params[layer.bias_offset + o];
                for (i, xi) in cur.iter().enumerate() {
                    z += params[layer.weight_offset + o * layer.inputs + i] * xi;
                }
                *n = layer.activation.apply(z);
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn batched_forward_matches_per_sample_loops() {
        let mlp = Mlp::new(5, &[7, 6], 3, Activation::Relu, Activation::Identity);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params: Vec<f64> = mlp.init_params(&mut rng);
        let x: Vec<f64> = (0..4 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = mlp.forward(&params, &x, 4);
        for b in 0..4 {
            let expect = naive_forward(&mlp, &params, &x[b * 5..b * 5 + 5]);
            for (a, e) in tape.output()[b * 3..b * 3 + 3].iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    fn check_gradients(act: Activation, seed: u64) {
        let mlp = Mlp::new(4, &[6, 5], 2, act, Activation::Identity);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<f64> = mlp.init_params(&mut rng);
        for b in params.iter_mut() {
            *b += rng.random_range(-0.1..0.1);
        }
        let x: Vec<f64> = (0..3 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..3 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |p: &[f64], x: &[f64]| -> f64 {
            mlp.forward(p, x, 3).output().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let tape = mlp.forward(&params, &x, 3);
        let mut grad = vec![0.0; mlp.param_count()];
        let dx = mlp.backward(&params, &tape, &up, &mut grad, true).unwrap();
        let h = 1e-6;
        let mut skipped = 0;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let up_v = f(&params, &x);
            let kink_up = mlp.forward(&params, &x, 3).acts.clone();
            params[i] = orig - h;
            let down_v = f(&params, &x);
            let kink_down = mlp.forward(&params, &x, 3).acts.clone();
            params[i] = orig;
            // relu sign flips inside the stencil make the derivative undefined there
            let flipped = kink_up.iter().zip(&kink_down).any(|(a, b)| a.iter().zip(b).any(|(u, d)| (*u > 0.0) != (*d > 0.0)));
            if act == Activation::Relu && flipped {
                skipped += 1;
                continue;
            }
            let fd = (up_v - down_v) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1.0), "param {i}: {fd} vs {}", grad[i]);
        }
        assert!(skipped < params.len() / 10);
        let mut xm = x.clone();
        for i in 0..x.len() {
            xm[i] = x[i] + h;
            let a = f(&params, &xm);
            xm[i] = x[i] - h;
            let b = f(&params, &xm);
            xm[i] = x[i];
            assert!(((a - b) / (2.0 * h) - dx[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn relu_backward_matches_finite_differences() {
        check_gradients(Activation::Relu, 2);
    }

    #[test]
    fn softplus_backward_matches_finite_differences() {
        check_gradients(Activation::Softplus, 3);
    }

    #[test]
    fn param_layout_is_contiguous() {
        let mlp = Mlp::new(3, &[4], 2, Activation::Relu, Activation::Identity);
        assert_eq!(mlp.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(mlp.last_layer_range(), 16..26);
    }
}
