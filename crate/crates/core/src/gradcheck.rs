//! Finite-difference helpers shared by unit tests and the acceptance suite.

use crate::tensor::Tensor;

/// Central differences of a scalar function at every entry of `x`.
pub fn central_difference(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y, floor)).fold(0.0, f64::max)
}
