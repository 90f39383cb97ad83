//! 2-D convolution kernels (im2col + GEMM), NCHW layout, square kernels.

use crate::tensor::{gemm, Element, Tensor};

/// Static geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x_shape.len(), 4, "conv input must be NCHW");
        assert_eq!(w_shape.len(), 4, "conv weight must be OIKK");
        assert_eq!(w_shape[1], x_shape[1], "conv channel mismatch");
        assert_eq!(w_shape[2], w_shape[3], "only square kernels are supported");
        assert!(stride >= 1);
        let kernel = w_shape[2];
        let (h, w) = (x_shape[2], x_shape[3]);
        assert!(
            h + 2 * pad >= kernel && w + 2 * pad >= kernel,
            "kernel larger than input"
        );
        Self {
            batch: x_shape[0],
            c_in: x_shape[1],
            h,
            w,
            c_out: w_shape[0],
            kernel,
            stride,
            pad,
            h_out: (h + 2 * pad - kernel) / stride + 1,
            w_out: (w + 2 * pad - kernel) / stride + 1,
        }
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds the whole batch into a `[C*K*K, N*P]` column matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_plane();
    let np = g.batch * p;
    let mut cols = vec![T::zero(); g.patch_len() * np];
    for n in 0..g.batch {
        let xs = &x[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w];
        for c in 0..g.c_in {
            let plane = &xs[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let row = (c * g.kernel + ki) * g.kernel + kj;
                    let dst = &mut cols[row * np + n * p..row * np + (n + 1) * p];
                    for oh in 0..g.h_out {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..g.w_out {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[oh * g.w_out + ow] = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a `[C*K*K, N*P]` column gradient back onto the input, accumulating.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_plane();
    let np = g.batch * p;
    for n in 0..g.batch {
        let xs = &mut dx[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w];
        for c in 0..g.c_in {
            let plane = &mut xs[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let row = (c * g.kernel + ki) * g.kernel + kj;
                    let src = &cols[row * np + n * p..row * np + (n + 1) * p];
                    for oh in 0..g.h_out {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..g.w_out {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[iw as usize] = dst[iw as usize] + src[oh * g.w_out + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[O, N*P]` -> `[N, O, P]`
fn channel_major_to_batch_major<T: Element>(src: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * o * p];
    for oc in 0..o {
        for b in 0..n {
            out[(b * o + oc) * p..(b * o + oc + 1) * p]
                .copy_from_slice(&src[oc * n * p + b * p..oc * n * p + (b + 1) * p]);
        }
    }
    out
}

/// `[N, O, P]` -> `[O, N*P]`
fn batch_major_to_channel_major<T: Element>(src: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * o * p];
    for b in 0..n {
        for oc in 0..o {
            out[oc * n * p + b * p..oc * n * p + (b + 1) * p]
                .copy_from_slice(&src[(b * o + oc) * p..(b * o + oc + 1) * p]);
        }
    }
    out
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad);
    let p = g.out_plane();
    let np = g.batch * p;
    let cols = im2col(x.data(), &g);
    let mut out_cm = vec![T::zero(); g.c_out * np];
    gemm(
        g.c_out,
        g.patch_len(),
        np,
        weight.data(),
        false,
        &cols,
        false,
        &mut out_cm,
        false,
    );
    if let Some(b) = bias {
        assert_eq!(b.len(), g.c_out, "conv bias length mismatch");
        for (oc, &bv) in b.data().iter().enumerate() {
            for v in &mut out_cm[oc * np..(oc + 1) * np] {
                *v = *v + bv;
            }
        }
    }
    let out = channel_major_to_batch_major(&out_cm, g.batch, g.c_out, p);
    Tensor::new(vec![g.batch, g.c_out, g.h_out, g.w_out], out)
}

/// Gradients of a convolution. Each requested output is `Some`.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad);
    let p = g.out_plane();
    let np = g.batch * p;
    let k = g.patch_len();
    let dy_cm = batch_major_to_channel_major(grad_out.data(), g.batch, g.c_out, p);

    let bias = need_b.then(|| {
        let data = (0..g.c_out)
            .map(|oc| dy_cm[oc * np..(oc + 1) * np].iter().copied().sum())
            .collect();
        Tensor::new(vec![g.c_out], data)
    });

    let weight_grad = need_w.then(|| {
        let cols = im2col(x.data(), &g);
        let mut dw = vec![T::zero(); g.c_out * k];
        gemm(g.c_out, np, k, &dy_cm, false, &cols, true, &mut dw, false);
        Tensor::new(weight.shape().to_vec(), dw)
    });

    let input = need_x.then(|| {
        let mut dcols = vec![T::zero(); k * np];
        gemm(k, g.c_out, np, weight.data(), true, &dy_cm, false, &mut dcols, false);
        let mut dx = vec![T::zero(); x.len()];
        col2im(&dcols, &g, &mut dx);
        Tensor::new(x.shape().to_vec(), dx)
    });

    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}
