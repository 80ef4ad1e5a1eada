//! Central finite-difference gradient checking.
//!
//! Used by the operator, loss and detector tests. Nothing here touches the
//! analytic backward code; it only evaluates forward functions.

use rand::Rng;

use crate::neuralops::{Real, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// `(f(x + h) - f(x - h)) / 2h` for a scalar function.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error of two gradient vectors in the 2-norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Compares `analytic` against central differences of `f` at every element of `x`.
pub fn check_gradient(
    x: &Tensor<f64>,
    analytic: &[f64],
    h: f64,
    f: impl Fn(&Tensor<f64>) -> f64,
) -> GradCheck {
    let indices: Vec<usize> = (0..x.len()).collect();
    check_gradient_at(x, analytic, h, &indices, f)
}

/// Like [`check_gradient`] but only at the listed element indices.
pub fn check_gradient_at(
    x: &Tensor<f64>,
    analytic: &[f64],
    h: f64,
    indices: &[usize],
    f: impl Fn(&Tensor<f64>) -> f64,
) -> GradCheck {
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(indices.len());
    let mut picked = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
        picked.push(analytic[i]);
    }
    let max_abs_error = picked
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    GradCheck {
        rel_error: relative_error(&picked, &numeric),
        max_abs_error,
        checked: indices.len(),
    }
}

/// Uniform values in `[-1, 1)`.
pub fn random_tensor<T: Real, R: Rng>(rng: &mut R, shape: [usize; 4]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, data).expect("non-empty shape")
}
