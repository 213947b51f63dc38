//! Central finite differences, used as an independent oracle for `backward`.

use crate::diffcore::Tensor;
use crate::error::Result;

/// `(f(p + h·eᵢ) − f(p − h·eᵢ)) / 2h` for every coordinate `i` of `params`.
pub fn finite_difference_gradient<F>(mut f: F, params: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert!(h > 0.0, "step must be positive");
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.numel());
    for i in 0..params.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(params.shape().to_vec(), grad)
}

/// Largest coordinate-wise relative error between two gradients.
///
/// Each coordinate's error is scaled by `max(|a|, |b|, 1)`, so coordinates
/// with magnitude below one are compared absolutely.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
