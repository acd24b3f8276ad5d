use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

/// 2-D convolution with square kernels, zero padding and a uniform stride.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn cols(&self) -> usize {
        self.batch * self.plane()
    }
}

impl<T: Real> Conv2d<T> {
    /// He-normal initialised convolution.
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_c * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight = Tensor::from_fn(&[out_c, in_c, kernel, kernel], |_| T::from_f64(normal.sample(rng)));
        Self {
            weight,
            bias: Tensor::zeros(&[out_c]),
            stride,
            padding,
        }
    }

    pub fn zeroed(in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_c, in_c, kernel, kernel]),
            bias: Tensor::zeros(&[out_c]),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn geometry(&self, x: &Tensor<T>) -> Geometry {
        assert_eq!(x.shape().len(), 4, "conv input must be [B,C,H,W]");
        assert_eq!(
            x.dim(1),
            self.in_channels(),
            "conv expects {} input channels, got {}",
            self.in_channels(),
            x.dim(1)
        );
        let (out_h, out_w) = self.output_hw(x.dim(2), x.dim(3));
        Geometry {
            batch: x.dim(0),
            in_c: x.dim(1),
            h: x.dim(2),
            w: x.dim(3),
            k: self.kernel(),
            stride: self.stride,
            pad: self.padding,
            out_h,
            out_w,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let col = im2col(x.data(), &g);
        let co = self.out_channels();
        let mut flat = vec![T::zero(); co * g.cols()];
        T::gemm(
            co,
            g.rows(),
            g.cols(),
            T::one(),
            self.weight.data(),
            g.rows() as isize,
            1,
            &col,
            g.cols() as isize,
            1,
            T::zero(),
            &mut flat,
            g.cols() as isize,
            1,
        );
        let plane = g.plane();
        let mut out = Tensor::zeros(&[g.batch, co, g.out_h, g.out_w]);
        let od = out.data_mut();
        for b in 0..g.batch {
            for c in 0..co {
                let bias = self.bias.data()[c];
                let src = &flat[c * g.cols() + b * plane..c * g.cols() + (b + 1) * plane];
                let dst = &mut od[(b * co + c) * plane..(b * co + c + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grads` (when given) and returns the input gradient
    /// when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let g = self.geometry(x);
        let co = self.out_channels();
        let plane = g.plane();
        let mut flat = vec![T::zero(); co * g.cols()];
        let dyd = dy.data();
        for b in 0..g.batch {
            for c in 0..co {
                let src = &dyd[(b * co + c) * plane..(b * co + c + 1) * plane];
                flat[c * g.cols() + b * plane..c * g.cols() + (b + 1) * plane].copy_from_slice(src);
            }
        }
        if let Some((dw, db)) = grads {
            let col = im2col(x.data(), &g);
            T::gemm(
                co,
                g.cols(),
                g.rows(),
                T::one(),
                &flat,
                g.cols() as isize,
                1,
                &col,
                1,
                g.cols() as isize,
                T::one(),
                dw.data_mut(),
                g.rows() as isize,
                1,
            );
            let dbd = db.data_mut();
            for c in 0..co {
                let s = flat[c * g.cols()..(c + 1) * g.cols()]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
                dbd[c] = dbd[c] + s;
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dcol = vec![T::zero(); g.rows() * g.cols()];
        T::gemm(
            g.rows(),
            co,
            g.cols(),
            T::one(),
            self.weight.data(),
            1,
            g.rows() as isize,
            &flat,
            g.cols() as isize,
            1,
            T::zero(),
            &mut dcol,
            g.cols() as isize,
            1,
        );
        let mut dx = Tensor::zeros(x.shape());
        col2im(&dcol, dx.data_mut(), &g);
        Some(dx)
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.cols();
    let plane = g.plane();
    let mut col = vec![T::zero(); g.rows() * cols];
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let src = &x[(b * g.in_c + c) * g.h * g.w..(b * g.in_c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_seg = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, d) in dst_seg.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], dx: &mut [T], g: &Geometry) {
    let cols = g.cols();
    let plane = g.plane();
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.in_c + c) * g.h * g.w..(b * g.in_c + c + 1) * g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let d = &mut dst_row[ix as usize];
                                *d = *d + src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
