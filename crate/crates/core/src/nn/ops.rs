//! Parameter-free layers and the depthwise spatial filter shared by the generator and attacks.

use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |v, g| if v > T::zero() { g } else { T::zero() })
}

fn dims4<T: Real>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    assert_eq!(x.shape().len(), 4, "expected [B,C,H,W], got {:?}", x.shape());
    (x.dim(0), x.dim(1), x.dim(2), x.dim(3))
}

/// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = dims4(x);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..b * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut od[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = Tensor::zeros(input_shape);
    let dd = dx.data_mut();
    for p in 0..b * c {
        let src = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dd[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let g = src[y * ow + xx] * quarter;
                let i = 2 * y * w + 2 * xx;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    dx
}

/// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = dims4(x);
    let n = T::from_f64((h * w) as f64);
    Tensor::from_fn(&[b, c], |p| {
        x.data()[p * h * w..(p + 1) * h * w]
            .iter()
            .fold(T::zero(), |a, &v| a + v)
            / n
    })
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let n = T::from_f64(hw as f64);
    Tensor::from_fn(input_shape, |i| dy.data()[i / hw] / n)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = dims4(x);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..b * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut od[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(input_shape);
    let dd = dx.data_mut();
    for p in 0..b * c {
        let src = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dd[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let d = &mut dst[(y / 2) * w + xx / 2];
                *d = *d + src[y * ow + xx];
            }
        }
    }
    dx
}

/// Same-size zero-padded correlation of every `[H,W]` plane with a square odd kernel.
pub fn depthwise_filter<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Tensor<T> {
    filter_planes(x, kernel, false)
}

/// Adjoint of [`depthwise_filter`] (correlation with the flipped kernel).
pub fn depthwise_filter_adjoint<T: Real>(dy: &Tensor<T>, kernel: &Tensor<T>) -> Tensor<T> {
    filter_planes(dy, kernel, true)
}

fn filter_planes<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, flip: bool) -> Tensor<T> {
    let (b, c, h, w) = dims4(x);
    let k = kernel.dim(0);
    assert!(k % 2 == 1 && kernel.dim(1) == k, "kernel must be square and odd");
    let r = (k / 2) as isize;
    let kd = kernel.data();
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..b * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut od[p * h * w..(p + 1) * h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = T::zero();
                for i in -r..=r {
                    let sy = y + i;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in -r..=r {
                        let sx = xx + j;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let (ki, kj) = if flip { (r - i, r - j) } else { (i + r, j + r) };
                        acc = acc + kd[ki as usize * k + kj as usize] * src[sy as usize * w + sx as usize];
                    }
                }
                dst[y as usize * w + xx as usize] = acc;
            }
        }
    }
    out
}

/// Scales each row to unit ℓ2 norm.
pub fn normalize_rows<T: Real>(raw: &Tensor<T>) -> Tensor<T> {
    let mut out = raw.clone();
    for r in 0..raw.dim(0) {
        let row = out.item_mut(r);
        let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        let norm = norm.max(T::from_f64(1e-12));
        row.iter_mut().for_each(|v| *v = *v / norm);
    }
    out
}

pub fn normalize_rows_backward<T: Real>(raw: &Tensor<T>, unit: &Tensor<T>, d_unit: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(raw.shape());
    for r in 0..raw.dim(0) {
        let norm = raw
            .item(r)
            .iter()
            .fold(T::zero(), |a, &v| a + v * v)
            .sqrt()
            .max(T::from_f64(1e-12));
        let u = unit.item(r);
        let g = d_unit.item(r);
        let proj = u.iter().zip(g).fold(T::zero(), |a, (&x, &y)| a + x * y);
        for ((o, &uv), &gv) in out.item_mut(r).iter_mut().zip(u).zip(g) {
            *o = (gv - uv * proj) / norm;
        }
    }
    out
}
