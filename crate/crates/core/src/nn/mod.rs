//! A small layer library with explicit backward passes.
//!
//! Forward passes take `&self` and return a [`Tape`] of whatever the backward pass needs, so a
//! frozen model can be differentiated with respect to its input without touching its parameters.
//! Parameter gradients live outside the model in a `Vec<Tensor>` aligned with [`Sequential::params`].

mod adam;
mod conv;
mod linear;
pub mod ops;

pub use adam::{cosine_lr, Adam};
pub use conv::Conv2d;
pub use linear::Linear;

use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Linear(Linear<T>),
    Relu,
    AvgPool2,
    GlobalAvgPool,
    Upsample2,
    /// `y = x + body(x)`
    Residual(Sequential<T>),
}

impl<T: Real> Layer<T> {
    fn param_count(&self) -> usize {
        match self {
            Layer::Conv(_) | Layer::Linear(_) => 2,
            Layer::Residual(body) => body.param_count(),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Cache<T> {
    Input(Tensor<T>),
    Shape(Vec<usize>),
    Nested(Tape<T>),
}

/// Saved activations from one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

/// A chain of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, Tape<T>) {
        let mut tape = Tape {
            caches: Vec::with_capacity(self.layers.len()),
        };
        let y = self.run(x.clone(), Some(&mut tape));
        (y, tape)
    }

    /// Forward pass without recording a tape.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x.clone(), None)
    }

    fn run(&self, mut x: Tensor<T>, mut tape: Option<&mut Tape<T>>) -> Tensor<T> {
        for layer in &self.layers {
            let (y, cache) = match layer {
                Layer::Conv(c) => (c.forward(&x), Cache::Input(x)),
                Layer::Linear(l) => (l.forward(&x), Cache::Input(x)),
                Layer::Relu => (ops::relu(&x), Cache::Input(x)),
                Layer::AvgPool2 => (ops::avg_pool2(&x), Cache::Shape(x.shape().to_vec())),
                Layer::GlobalAvgPool => (ops::global_avg_pool(&x), Cache::Shape(x.shape().to_vec())),
                Layer::Upsample2 => (ops::upsample2(&x), Cache::Shape(x.shape().to_vec())),
                Layer::Residual(body) => match tape.as_deref_mut() {
                    Some(_) => {
                        let (mut h, inner) = body.forward(&x);
                        h.add_assign(&x);
                        (h, Cache::Nested(inner))
                    }
                    None => {
                        let mut h = body.infer(&x);
                        h.add_assign(&x);
                        (h, Cache::Shape(Vec::new()))
                    }
                },
            };
            if let Some(t) = tape.as_deref_mut() {
                t.caches.push(cache);
            }
            x = y;
        }
        x
    }

    /// Back-propagates `dy`. Parameter gradients are accumulated into `grads` (aligned with
    /// [`Self::params`]) when given; the input gradient is returned when requested.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        dy: Tensor<T>,
        mut grads: Option<&mut [Tensor<T>]>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        assert_eq!(tape.caches.len(), self.layers.len(), "tape/model mismatch");
        let mut offset = self.param_count();
        let mut dy = Some(dy);
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            let n = layer.param_count();
            offset -= n;
            let g = dy.take().expect("gradient present while layers remain");
            let want_dx = need_input_grad || i > 0;
            let layer_grads = grads.as_deref_mut().map(|gs| &mut gs[offset..offset + n]);
            let dx = match (layer, cache) {
                (Layer::Conv(c), Cache::Input(x)) => {
                    let pair = layer_grads.map(|gs| {
                        let (w, b) = gs.split_at_mut(1);
                        (&mut w[0], &mut b[0])
                    });
                    c.backward(x, &g, pair, want_dx)
                }
                (Layer::Linear(l), Cache::Input(x)) => {
                    let pair = layer_grads.map(|gs| {
                        let (w, b) = gs.split_at_mut(1);
                        (&mut w[0], &mut b[0])
                    });
                    l.backward(x, &g, pair, want_dx)
                }
                (Layer::Relu, Cache::Input(x)) => Some(ops::relu_backward(x, &g)),
                (Layer::AvgPool2, Cache::Shape(s)) => Some(ops::avg_pool2_backward(s, &g)),
                (Layer::GlobalAvgPool, Cache::Shape(s)) => Some(ops::global_avg_pool_backward(s, &g)),
                (Layer::Upsample2, Cache::Shape(s)) => Some(ops::upsample2_backward(s, &g)),
                (Layer::Residual(body), Cache::Nested(inner)) => {
                    let mut dx = body
                        .backward(inner, g.clone(), layer_grads, true)
                        .expect("residual input gradient");
                    dx.add_assign(&g);
                    Some(dx)
                }
                _ => panic!("cache kind does not match layer {i}"),
            };
            if !want_dx {
                return None;
            }
            dy = dx;
        }
        dy
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&c.weight, &c.bias]),
                Layer::Linear(l) => out.extend([&l.weight, &l.bias]),
                Layer::Residual(body) => out.extend(body.params()),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::Linear(l) => out.extend([&mut l.weight, &mut l.bias]),
                Layer::Residual(body) => out.extend(body.params_mut()),
                _ => {}
            }
        }
        out
    }

    /// Parameter names in [`Self::params`] order, e.g. `3.weight` or `4.2.bias`.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(_) | Layer::Linear(_) => {
                    out.push(format!("{prefix}{i}.weight"));
                    out.push(format!("{prefix}{i}.bias"));
                }
                Layer::Residual(body) => out.extend(body.param_names(&format!("{prefix}{i}."))),
                _ => {}
            }
        }
        out
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params().into_iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    /// The last linear layer, i.e. the classifier head.
    pub fn last_linear(&self) -> Option<&Linear<T>> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Linear(lin) => Some(lin),
            _ => None,
        })
    }

    pub fn cast<U: Real>(&self) -> Sequential<U> {
        Sequential {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => Layer::Conv(Conv2d {
                        weight: c.weight.cast(),
                        bias: c.bias.cast(),
                        stride: c.stride,
                        padding: c.padding,
                    }),
                    Layer::Linear(lin) => Layer::Linear(Linear {
                        weight: lin.weight.cast(),
                        bias: lin.bias.cast(),
                    }),
                    Layer::Relu => Layer::Relu,
                    Layer::AvgPool2 => Layer::AvgPool2,
                    Layer::GlobalAvgPool => Layer::GlobalAvgPool,
                    Layer::Upsample2 => Layer::Upsample2,
                    Layer::Residual(body) => Layer::Residual(body.cast()),
                })
                .collect(),
        }
    }
}

/// Flattens parameters into one vector; used for freeze checks and hashing.
pub fn flatten_params<T: Real>(params: &[&Tensor<T>]) -> Vec<T> {
    params.iter().flat_map(|p| p.data().iter().copied()).collect()
}

/// SHA-256 over parameter values; changes iff any parameter changes.
pub fn params_fingerprint<T: Real>(params: &[&Tensor<T>]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in params {
        h.update((p.len() as u64).to_le_bytes());
        for v in p.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(rng: &mut ChaCha8Rng) -> Sequential<f64> {
        Sequential::new(vec![
            Layer::Conv(Conv2d::new(2, 4, 3, 2, 1, rng)),
            Layer::Relu,
            Layer::Residual(Sequential::new(vec![
                Layer::Conv(Conv2d::new(4, 4, 3, 1, 1, rng)),
                Layer::Relu,
                Layer::Conv(Conv2d::new(4, 4, 3, 1, 1, rng)),
            ])),
            Layer::Upsample2,
            Layer::Conv(Conv2d::new(4, 3, 3, 1, 1, rng)),
            Layer::AvgPool2,
            Layer::GlobalAvgPool,
            Layer::Linear(Linear::new(3, 5, rng)),
        ])
    }

    #[test]
    fn sequential_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = tiny(&mut rng);
        // Non-zero biases keep pre-activations off the ReLU kink.
        for (i, p) in net.params_mut().into_iter().enumerate() {
            if p.shape().len() == 1 {
                *p = Tensor::from_fn(p.shape(), |j| 0.05 + 0.01 * ((i + j) % 5) as f64);
            }
        }
        let x = Tensor::from_fn(&[2, 2, 6, 6], |i| ((i * 31 % 17) as f64) / 17.0);
        let (y, tape) = net.forward(&x);
        assert_eq!(y.shape(), &[2, 5]);
        let dy = Tensor::from_fn(y.shape(), |i| (i as f64 - 4.0) * 0.1);
        let mut grads = net.zero_grads();
        let dx = net.backward(&tape, dy.clone(), Some(&mut grads), true).unwrap();
        let objective = |n: &Sequential<f64>, x: &Tensor<f64>| -> f64 {
            n.infer(x).data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for k in [0usize, 13, 40, 71] {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            let fd = (objective(&net, &p) - objective(&net, &m)) / (2.0 * h);
            assert!((fd - dx.data()[k]).abs() < 1e-6, "dx[{k}]: fd {fd} vs {}", dx.data()[k]);
        }
        let count = net.params().len();
        assert_eq!(count, grads.len());
        assert_eq!(net.param_names("").len(), count);
        for pi in 0..count {
            for k in [0usize, 3] {
                if k >= grads[pi].len() {
                    continue;
                }
                let mut p = net.clone();
                p.params_mut()[pi].data_mut()[k] += h;
                let mut m = net.clone();
                m.params_mut()[pi].data_mut()[k] -= h;
                let fd = (objective(&p, &x) - objective(&m, &x)) / (2.0 * h);
                let an = grads[pi].data()[k];
                assert!((fd - an).abs() < 1e-6, "param {pi}[{k}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn infer_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = tiny(&mut rng);
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64 / 32.0);
        assert_eq!(net.forward(&x).0, net.infer(&x));
    }
}
