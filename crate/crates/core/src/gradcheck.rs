//! Central finite differences, the reference every backward rule is checked against.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Central-difference gradient `(f(x+h·e) − f(x−h·e)) / 2h` for every element.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, h: f64) -> Result<Tensor<T>>
where
    T: Element,
    F: FnMut(&Tensor<T>) -> f64,
{
    let idx: Vec<usize> = (0..x.len()).collect();
    let g = finite_difference_at(&mut f, x, h, &idx)?;
    Tensor::from_f64(x.shape(), &g)
}

/// Central differences at selected flat indices only.
pub fn finite_difference_at<T, F>(mut f: F, x: &Tensor<T>, h: f64, indices: &[usize]) -> Result<Vec<f64>>
where
    T: Element,
    F: FnMut(&Tensor<T>) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Parameter(format!("step {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::from_f64_lossy(orig.as_f64() + h);
        let up = f(&probe);
        probe.data_mut()[i] = T::from_f64_lossy(orig.as_f64() - h);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps exact zeros comparable.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
