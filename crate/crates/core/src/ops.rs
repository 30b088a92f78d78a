//! Row-wise numeric kernels shared by the tape and by tape-free callers.
//!
//! Every kernel treats its input as rows over the last dimension.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Lower bound on the divisor when L2-normalizing.
pub const NORM_EPS: f64 = 1e-12;

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `log(sum(exp(row)))` with max subtraction.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

/// Softmax over the last dimension.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if !logits.is_finite() {
        return Err(Error::Domain("softmax requires finite logits".into()));
    }
    let mut out = Tensor::zeros(logits.shape());
    let d = logits.last_dim();
    for (src, dst) in logits.rows().zip(out.data_mut().chunks_mut(d)) {
        softmax_row(src, dst);
    }
    Ok(out)
}

/// Softmax of a plain slice; an empty slice is a domain error.
pub fn softmax_slice<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    softmax(&Tensor::vector(logits.to_vec())?).map(Tensor::into_data)
}

/// Per-row statistics kept for the backward pass of layer normalization.
pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    d: usize,
    gain: &[T],
    shift: &[T],
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / d;
    let dt = T::from_usize(d).expect("dimension fits the scalar type");
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dt;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        for c in 0..d {
            let h = (row[c] - mean) * istd;
            xhat[r * d + c] = h;
            out[r * d + c] = gain[c] * h + shift[c];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Layer normalization over the last dimension with biased variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    check_affine(x, gain, shift)?;
    if eps <= T::zero() {
        return Err(Error::Domain("layer norm eps must be positive".into()));
    }
    let (out, _) = layer_norm_forward(x.data(), x.last_dim(), gain.data(), shift.data(), eps);
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn check_affine<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, shift: &Tensor<T>) -> Result<()> {
    let d = x.last_dim();
    if gain.shape() != [d] || shift.shape() != [d] {
        return Err(Error::Shape(format!(
            "layer norm affine parameters {:?}/{:?} do not match feature size {d}",
            gain.shape(),
            shift.shape()
        )));
    }
    Ok(())
}

const GELU_CUBIC: f64 = 0.044715;

/// Tanh-approximated GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(GELU_CUBIC) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0 * GELU_CUBIC) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// L2-normalizes each row in place and returns the row norms.
pub(crate) fn l2_normalize_rows_in_place<T: Scalar>(data: &mut [T], d: usize) -> Vec<T> {
    let eps = T::lit(NORM_EPS);
    data.chunks_mut(d)
        .map(|row| {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let div = norm.max(eps);
            for v in row.iter_mut() {
                *v /= div;
            }
            norm
        })
        .collect()
}

/// `v / max(||v||_2, 1e-12)`.
pub fn l2_normalize<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut out = v.to_vec();
    if !out.is_empty() {
        let d = out.len();
        l2_normalize_rows_in_place(&mut out, d);
    }
    out
}

pub(crate) fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels supplied for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy of `[B, C]` logits against class indices.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (b, c) = logits.matrix_dims()?;
    check_labels(labels, b, c)?;
    let total: T = logits
        .rows()
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum();
    Ok(total / T::from_usize(b).expect("batch size fits the scalar type"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        for c in [-3.0, 0.0, 7.5] {
            let p = softmax_slice(&[c; 4]).unwrap();
            for v in p {
                assert!((v - 0.25f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_closed_form_two_entries() {
        let p = softmax_slice(&[0.0f64, 2f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty_and_non_finite() {
        assert!(matches!(softmax_slice::<f64>(&[]), Err(Error::Domain(_))));
        assert!(matches!(softmax_slice(&[1.0, f64::NAN]), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax_slice(&[1000.0f64, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_edge_rows() {
        let ones = Tensor::<f64>::ones(&[4]);
        let zeros = Tensor::<f64>::zeros(&[4]);
        let constant = Tensor::from_f64(&[4], &[5.0; 4]).unwrap();
        let out = layer_norm(&constant, &ones, &zeros, 1e-6).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let g2 = Tensor::<f64>::ones(&[2]);
        let s2 = Tensor::<f64>::zeros(&[2]);
        let pm = Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap();
        let out = layer_norm(&pm, &g2, &s2, 1e-12).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-11);
        assert!((out.data()[1] + 1.0).abs() < 1e-11);

        let shift = Tensor::from_f64(&[2], &[0.5, -2.0]).unwrap();
        let x = Tensor::from_f64(&[3, 2], &[1.0, 4.0, -3.0, 2.0, 0.0, 0.1]).unwrap();
        let out = layer_norm(&x, &Tensor::zeros(&[2]), &shift, 1e-6).unwrap();
        for row in out.rows() {
            assert_eq!(row, shift.data());
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = Tensor::from_f64(&[2, 5], &[0.3, -1.2, 4.0, 2.2, 0.0, 9.0, 8.0, -7.0, 1.0, 0.5])
            .unwrap();
        let out = layer_norm(&x, &Tensor::ones(&[5]), &Tensor::zeros(&[5]), 1e-6).unwrap();
        for row in out.rows() {
            let mean: f64 = row.iter().sum::<f64>() / 5.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-10);
            // eps shifts the variance by eps / (var + eps)
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rejects_bad_affine_and_eps() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(layer_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[3]), 1e-6).is_err());
        assert!(layer_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), 0.0).is_err());
    }

    #[test]
    fn cross_entropy_reference_values() {
        let uniform = Tensor::<f64>::zeros(&[3, 4]);
        let l = cross_entropy(&uniform, &[0, 3, 1]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);

        let saturated = Tensor::<f64>::from_f64(&[1, 3], &[0.0, 1000.0, 0.0]).unwrap();
        assert!(cross_entropy(&saturated, &[1]).unwrap() < 1e-12);

        let a = Tensor::<f64>::from_f64(&[1, 3], &[0.2, -1.0, 0.7]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 3], &[1.5, 0.0, -0.3]).unwrap();
        let both = Tensor::<f64>::from_f64(&[2, 3], &[0.2, -1.0, 0.7, 1.5, 0.0, -0.3]).unwrap();
        let l1: f64 = cross_entropy(&a, &[2]).unwrap();
        let l2: f64 = cross_entropy(&b, &[1]).unwrap();
        let l: f64 = cross_entropy(&both, &[2, 1]).unwrap();
        assert!((l - (l1 + l2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matches!(cross_entropy(&x, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn normalize_guards_zero_vector() {
        let z = l2_normalize(&[0.0f64, 0.0]);
        assert_eq!(z, vec![0.0, 0.0]);
        let u = l2_normalize(&[3.0f64, 4.0]);
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
    }
}
