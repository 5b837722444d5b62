use super::{Result, Tensor, TensorError};

/// Central-difference gradient of a tensor-to-scalar function.
///
/// The step actually taken is the representable `f32` displacement, so the
/// quotient divides by `(x+h) - (x-h)` as stored rather than by `2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f32>,
{
    if !(h > 0.0) {
        return Err(TensorError::Invalid(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let plus = orig + h;
        let minus = orig - h;
        probe.data_mut()[i] = plus;
        let fp = f(&probe)? as f64;
        probe.data_mut()[i] = minus;
        let fm = f(&probe)? as f64;
        probe.data_mut()[i] = orig;
        grad.push(((fp - fm) / (plus as f64 - minus as f64)) as f32);
    }
    Tensor::new(x.shape(), grad)
}

/// Error of `analytic` against `reference`, scaled by the larger of the two
/// gradients' max-norms. Below `floor` the absolute error is returned instead.
pub fn grad_rel_error(analytic: &[f32], reference: &[f32], floor: f64) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let diff = analytic
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(reference)
        .map(|&v| (v as f64).abs())
        .fold(0.0, f64::max);
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}
