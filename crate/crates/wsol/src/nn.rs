//! Layers, initialization, and the optimizer.
//!
//! Model structs own plain `f32` tensors. Each training step binds them
//! onto a fresh tape (`bind`), runs forward/backward, and applies the
//! gradients back to the owned tensors. Binding, `params_mut`, and
//! `named_params` must all traverse parameters in the same order; the
//! checkpoint tests pin this down.

use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;
use wsol_tensor::{Tape, Tensor, Var};

use crate::error::Result;

/// Kaiming-uniform fan-in initialization: U(±sqrt(6 / fan_in)).
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Weight matrix (rows = inputs) for a bias-free linear map.
pub fn linear_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    kaiming_uniform(rng, &[rows, cols], rows)
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Conv2dLayer {
        let fan_in = in_c * k * k;
        let weight = kaiming_uniform(rng, &[out_c, in_c, k, k], fan_in);
        let bound = (1.0 / fan_in as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-bound, bound);
        let bias = Tensor::from_fn(&[out_c], |_| dist.sample(rng));
        Conv2dLayer {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool, vars: &mut Vec<Var>) -> BoundConv {
        let (w, b) = if trainable {
            (
                tape.parameter(self.weight.clone()),
                tape.parameter(self.bias.clone()),
            )
        } else {
            (
                tape.constant(self.weight.clone()),
                tape.constant(self.bias.clone()),
            )
        };
        vars.push(w);
        vars.push(b);
        BoundConv {
            w,
            b,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundConv {
    pub w: Var,
    pub b: Var,
    stride: usize,
    pad: usize,
}

impl BoundConv {
    pub fn forward(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, self.w, self.stride, self.pad)?;
        Ok(tape.add(y, self.b)?)
    }
}

/// Binds a bias-free linear weight; used for heads and attention
/// projections.
pub fn bind_tensor(
    t: &Tensor<f32>,
    tape: &mut Tape<f32>,
    trainable: bool,
    vars: &mut Vec<Var>,
) -> Var {
    let v = if trainable {
        tape.parameter(t.clone())
    } else {
        tape.constant(t.clone())
    };
    vars.push(v);
    v
}

/// Shuffles `0..n` and chunks it into mini-batches. The final batch may
/// be short; no sample is dropped.
pub fn shuffled_batches(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    indices.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// SGD with classical momentum: v ← m·v + g, p ← p − lr·v.
pub struct Sgd {
    lr: f32,
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Sgd {
        Sgd {
            lr: lr as f32,
            momentum: momentum as f32,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. `params` and `grads` must be in the same
    /// (canonical) order on every call.
    pub fn step(&mut self, params: Vec<&mut Tensor<f32>>, grads: &[Tensor<f32>]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            assert_eq!(p.numel(), g.numel(), "param/grad shape mismatch");
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kaiming_bound_respects_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = kaiming_uniform(&mut rng, &[8, 4, 3, 3], 36);
        let bound = (6.0f64 / 36.0).sqrt() as f32;
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        // Values actually spread out rather than collapsing to zero.
        assert!(t.data().iter().any(|v| v.abs() > bound * 0.5));
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut p = Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5f32, 1.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0);
        opt.step(vec![&mut p], &[g]);
        assert!((p.data()[0] - 0.95).abs() < 1e-7);
        assert!((p.data()[1] - -2.1).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        let g = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let mut opt = Sgd::new(1.0, 0.5);
        opt.step(vec![&mut p], &[g.clone()]); // v=1, p=-1
        opt.step(vec![&mut p], &[g]); // v=1.5, p=-2.5
        assert!((p.data()[0] - -2.5).abs() < 1e-6);
    }

    #[test]
    fn conv_layer_bind_pushes_weight_then_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Conv2dLayer::new(&mut rng, 2, 3, 3, 1, 1);
        let mut tape: Tape<f32> = Tape::new();
        let mut vars = Vec::new();
        let bound = layer.bind(&mut tape, true, &mut vars);
        assert_eq!(vars.len(), 2);
        assert_eq!(tape.value(bound.w).shape(), &[3, 2, 3, 3]);
        assert_eq!(tape.value(bound.b).shape(), &[3]);
    }
}
