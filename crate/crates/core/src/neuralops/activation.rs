use serde::{Deserialize, Serialize};

use super::{mismatch, OpError, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn pointwise<T: Real>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => input.map(|v| T::of(sigmoid(v.as_f64()))),
    }
}

/// `output` is the forward result for `input`.
pub fn pointwise_backward<T: Real>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: Activation,
) -> Result<Tensor<T>, OpError> {
    if input.shape() != grad_out.shape() || output.shape() != input.shape() {
        return Err(mismatch("pointwise_backward", "shapes differ"));
    }
    let data = input
        .data()
        .iter()
        .zip(output.data())
        .zip(grad_out.data())
        .map(|((&x, &y), &g)| match kind {
            Activation::Relu => {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let y = y.as_f64();
                T::of(g.as_f64() * y * (1.0 - y))
            }
        })
        .collect();
    Tensor::from_vec(input.shape(), data)
}
