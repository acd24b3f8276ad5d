use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

/// Fully connected layer; `weight` is `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / input as f64).sqrt()).expect("finite std");
        Self {
            weight: Tensor::from_fn(&[output, input], |_| T::from_f64(normal.sample(rng))),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn outputs(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, i) = (x.dim(0), x.item_len());
        assert_eq!(i, self.inputs(), "linear expects {} inputs, got {i}", self.inputs());
        let o = self.outputs();
        let mut y = Tensor::zeros(&[b, o]);
        for r in 0..b {
            y.item_mut(r).copy_from_slice(self.bias.data());
        }
        T::gemm(
            b,
            i,
            o,
            T::one(),
            x.data(),
            i as isize,
            1,
            self.weight.data(),
            1,
            i as isize,
            T::one(),
            y.data_mut(),
            o as isize,
            1,
        );
        y
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (b, i, o) = (x.dim(0), self.inputs(), self.outputs());
        if let Some((dw, db)) = grads {
            T::gemm(
                o,
                b,
                i,
                T::one(),
                dy.data(),
                1,
                o as isize,
                x.data(),
                i as isize,
                1,
                T::one(),
                dw.data_mut(),
                i as isize,
                1,
            );
            let dbd = db.data_mut();
            for r in 0..b {
                for (d, &g) in dbd.iter_mut().zip(dy.item(r)) {
                    *d = *d + g;
                }
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            b,
            o,
            i,
            T::one(),
            dy.data(),
            o as isize,
            1,
            self.weight.data(),
            i as isize,
            1,
            T::zero(),
            dx.data_mut(),
            i as isize,
            1,
        );
        Some(dx)
    }
}
