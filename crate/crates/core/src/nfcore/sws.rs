//! Scaled weight standardization.
//!
//! Row `i` of the flattened weight matrix becomes
//! `gain * (W_i - mean_i) / (sqrt(var_i + eps) * sqrt(fan_in))`, where
//! `fan_in` is the row length (input channels times kernel area, or the input
//! dimension of a dense layer).

use crate::autograd::{Graph, Tensor};
use crate::error::{arg_err, shape_err, Result};

/// Row length of a weight tensor whose first axis indexes output units.
pub fn fan_in(shape: &[usize]) -> Result<usize> {
    if shape.len() < 2 || shape.iter().any(|&d| d == 0) {
        return Err(shape_err(format!("weight shape {shape:?} has no rows to standardize")));
    }
    Ok(shape[1..].iter().product())
}

/// Standardizes `w` outside of any graph. `eps = 0` is accepted for exact
/// arithmetic checks, in which case a constant row divides zero by zero.
pub fn scaled_weight_standardize(w: &Tensor, gain: f64, eps: f64) -> Result<Tensor> {
    fan_in(w.shape())?;
    if !(eps >= 0.0) || !gain.is_finite() {
        return Err(arg_err(format!("sws needs eps >= 0 and finite gain, got eps {eps}, gain {gain}")));
    }
    let g = Graph::new();
    let v = g.constant(w.clone());
    let out = g.sws(v, gain, eps)?;
    Ok((*out.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn worked_row() {
        let w = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 3.0]).unwrap();
        let out = scaled_weight_standardize(&w, 1.0, 0.0).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[[0, 0]] + r).abs() < 1e-15);
        assert!((out[[0, 1]] - r).abs() < 1e-15);
    }

    #[test]
    fn degenerate_rows_and_gain() {
        let w = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![4.0, 4.0, -1.0, 5.0]).unwrap();
        let out = scaled_weight_standardize(&w, 1.3, 1e-5).unwrap();
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[0, 1]], 0.0);
        let zero = scaled_weight_standardize(&w, 0.0, 1e-5).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_is_an_error() {
        let w = ArrayD::<f64>::zeros(IxDyn(&[0, 4]));
        assert!(matches!(scaled_weight_standardize(&w, 1.0, 1e-5), Err(crate::Error::InvalidShape(_))));
        let v = ArrayD::<f64>::zeros(IxDyn(&[3]));
        assert!(scaled_weight_standardize(&v, 1.0, 1e-5).is_err());
    }

    #[test]
    fn fan_in_of_conv_and_dense() {
        assert_eq!(fan_in(&[8, 3, 3, 3]).unwrap(), 27);
        assert_eq!(fan_in(&[10, 64]).unwrap(), 64);
    }
}
