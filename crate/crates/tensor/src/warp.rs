//! Bilinear resampling of images by a dense per-pixel flow field.
//!
//! The flow has shape `[N, 2, H, W]`: channel 0 is the horizontal offset
//! `u`, channel 1 the vertical offset `v`. Output pixel `(i, j)` samples the
//! input at `(i + v, j + u)`; samples falling outside the image read zero.

use crate::tensor::{Element, Tensor};

struct Tap<T> {
    y0: isize,
    x0: isize,
    wy: T,
    wx: T,
}

fn tap<T: Element>(i: usize, j: usize, u: T, v: T) -> Tap<T> {
    let sy = T::from_usize(i).unwrap() + v;
    let sx = T::from_usize(j).unwrap() + u;
    let fy = sy.floor();
    let fx = sx.floor();
    Tap {
        y0: fy.to_isize().unwrap_or(isize::MIN / 2),
        x0: fx.to_isize().unwrap_or(isize::MIN / 2),
        wy: sy - fy,
        wx: sx - fx,
    }
}

#[inline]
fn at<T: Element>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

fn check_shapes<T: Element>(img: &Tensor<T>, flow: &Tensor<T>) -> (usize, usize, usize, usize) {
    let (n, c, h, w) = img.dims4();
    assert_eq!(flow.shape(), &[n, 2, h, w], "flow must be [N, 2, H, W]");
    (n, c, h, w)
}

pub fn warp_forward<T: Element>(img: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = check_shapes(img, flow);
    let hw = h * w;
    let mut out = Tensor::zeros(img.shape().to_vec());
    for b in 0..n {
        let fl = flow.row(b);
        for i in 0..h {
            for j in 0..w {
                let t = tap(i, j, fl[i * w + j], fl[hw + i * w + j]);
                let one = T::one();
                for ch in 0..c {
                    let plane = &img.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let v00 = at(plane, h, w, t.y0, t.x0);
                    let v01 = at(plane, h, w, t.y0, t.x0 + 1);
                    let v10 = at(plane, h, w, t.y0 + 1, t.x0);
                    let v11 = at(plane, h, w, t.y0 + 1, t.x0 + 1);
                    let val =
                        (one - t.wy) * ((one - t.wx) * v00 + t.wx * v01) + t.wy * ((one - t.wx) * v10 + t.wx * v11);
                    out.data_mut()[(b * c + ch) * hw + i * w + j] = val;
                }
            }
        }
    }
    out
}

/// Returns `(d_img, d_flow)` for an upstream gradient on the warped image.
pub fn warp_backward<T: Element>(img: &Tensor<T>, flow: &Tensor<T>, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = check_shapes(img, flow);
    let hw = h * w;
    let mut d_img = Tensor::zeros(img.shape().to_vec());
    let mut d_flow = Tensor::zeros(flow.shape().to_vec());
    let one = T::one();
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let fl = flow.row(b);
                let t = tap(i, j, fl[i * w + j], fl[hw + i * w + j]);
                let mut du = T::zero();
                let mut dv = T::zero();
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let g = grad_out.data()[base + i * w + j];
                    let plane = &img.data()[base..base + hw];
                    let v00 = at(plane, h, w, t.y0, t.x0);
                    let v01 = at(plane, h, w, t.y0, t.x0 + 1);
                    let v10 = at(plane, h, w, t.y0 + 1, t.x0);
                    let v11 = at(plane, h, w, t.y0 + 1, t.x0 + 1);
                    du = du + g * ((one - t.wy) * (v01 - v00) + t.wy * (v11 - v10));
                    dv = dv + g * ((one - t.wx) * (v10 - v00) + t.wx * (v11 - v01));
                    let taps = [
                        (t.y0, t.x0, (one - t.wy) * (one - t.wx)),
                        (t.y0, t.x0 + 1, (one - t.wy) * t.wx),
                        (t.y0 + 1, t.x0, t.wy * (one - t.wx)),
                        (t.y0 + 1, t.x0 + 1, t.wy * t.wx),
                    ];
                    let dplane = &mut d_img.data_mut()[base..base + hw];
                    for (y, x, wgt) in taps {
                        if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                            let idx = y as usize * w + x as usize;
                            dplane[idx] = dplane[idx] + g * wgt;
                        }
                    }
                }
                let dfl = d_flow.row_mut(b);
                dfl[i * w + j] = du;
                dfl[hw + i * w + j] = dv;
            }
        }
    }
    (d_img, d_flow)
}

/// Sum over the batch and both flow channels of squared differences between
/// each pixel's displacement and its right and lower neighbours.
pub fn smoothness_forward<T: Element>(flow: &Tensor<T>) -> T {
    let (n, c, h, w) = flow.dims4();
    let mut acc = T::zero();
    for plane in flow.data().chunks(h * w).take(n * c) {
        for i in 0..h {
            for j in 0..w {
                let f = plane[i * w + j];
                if i + 1 < h {
                    let d = f - plane[(i + 1) * w + j];
                    acc = acc + d * d;
                }
                if j + 1 < w {
                    let d = f - plane[i * w + j + 1];
                    acc = acc + d * d;
                }
            }
        }
    }
    acc
}

pub fn smoothness_backward<T: Element>(flow: &Tensor<T>, grad: T) -> Tensor<T> {
    let (_, _, h, w) = flow.dims4();
    let two = T::from_f64_lossy(2.0) * grad;
    let mut out = Tensor::zeros(flow.shape().to_vec());
    for (plane, dplane) in flow.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        for i in 0..h {
            for j in 0..w {
                let f = plane[i * w + j];
                if i + 1 < h {
                    let d = two * (f - plane[(i + 1) * w + j]);
                    dplane[i * w + j] = dplane[i * w + j] + d;
                    dplane[(i + 1) * w + j] = dplane[(i + 1) * w + j] - d;
                }
                if j + 1 < w {
                    let d = two * (f - plane[i * w + j + 1]);
                    dplane[i * w + j] = dplane[i * w + j] + d;
                    dplane[i * w + j + 1] = dplane[i * w + j + 1] - d;
                }
            }
        }
    }
    out
}
