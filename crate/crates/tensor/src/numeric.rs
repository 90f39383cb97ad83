//! Central finite differences, used as the independent oracle in gradient
//! tests across the workspace.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`.
pub fn central_difference(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `‖a − b‖₂ / max(‖b‖₂, floor)`.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).norm_l2();
    diff / b.norm_l2().max(floor)
}
