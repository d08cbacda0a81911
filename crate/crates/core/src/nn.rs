//! Pointwise and normalisation kernels (no gradient recording).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Epsilon added to the variance inside [`layernorm`].
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Softmax over the last axis, shifted by each slice's maximum.
pub fn softmax_last_axis<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Intermediate values of [`layernorm`] that its backward pass reuses.
pub struct LayerNormCache<T: Scalar> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Layer normalisation of each token of a `K×M` token matrix.
///
/// The feature axis is axis 0, so every column is normalised independently:
/// `gain ⊙ (x − mean)/√(var + eps) + bias` with the biased variance.
pub fn layernorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    layernorm_cached(x, gain, bias).map(|(y, _)| y)
}

pub fn layernorm_cached<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (k, m) = x.dims2()?;
    if gain.numel() != k || bias.numel() != k {
        return Err(Error::Shape {
            op: "layernorm",
            detail: format!("tokens {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        });
    }
    let xv = x.data();
    let kk = T::lit(k as f64);
    let eps = T::lit(LAYERNORM_EPS);
    let mut normalized = vec![T::zero(); k * m];
    let mut out = vec![T::zero(); k * m];
    let mut inv_std = vec![T::zero(); m];
    for j in 0..m {
        let mean = (0..k).map(|r| xv[r * m + j]).sum::<T>() / kk;
        let var = (0..k)
            .map(|r| {
                let d = xv[r * m + j] - mean;
                d * d
            })
            .sum::<T>()
            / kk;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[j] = inv;
        for r in 0..k {
            let h = (xv[r * m + j] - mean) * inv;
            normalized[r * m + j] = h;
            out[r * m + j] = gain.data()[r] * h + bias.data()[r];
        }
    }
    Ok((Tensor::from_vec(&[k, m], out)?, LayerNormCache { normalized: Tensor::from_vec(&[k, m], normalized)?, inv_std }))
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    T::lit(0.5 * v * (1.0 + libm::erf(v * INV_SQRT_2)))
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(v * INV_SQRT_2));
    T::lit(cdf + v * INV_SQRT_2PI * (-0.5 * v * v).exp())
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow for large `x`.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits() {
        let y = softmax_last_axis(&Tensor::<f64>::zeros(&[3]));
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_is_one() {
        let y = softmax_last_axis(&Tensor::<f32>::scalar(7.3));
        assert_eq!(y.item(), 1.0);
    }

    #[test]
    fn two_logit_case() {
        let x = Tensor::<f64>::from_vec(&[2], vec![std::f64::consts::FRAC_1_SQRT_2, 0.0]).unwrap();
        let y = softmax_last_axis(&x);
        let e = std::f64::consts::FRAC_1_SQRT_2.exp();
        assert!((y.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((y.data()[0] - 0.66986).abs() < 1e-4);
        assert!((y.data()[1] - 0.33014).abs() < 1e-4);
    }

    #[test]
    fn large_logits_stay_finite() {
        let x = Tensor::<f32>::from_vec(&[3], vec![1000.0, 999.0, -1000.0]).unwrap();
        let y = softmax_last_axis(&x);
        assert!(y.all_finite());
        assert!((y.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_token_normalises_to_zero() {
        let x = Tensor::<f64>::full(&[4, 2], 3.25);
        let y = layernorm(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_variance_token_unchanged() {
        let x = Tensor::<f64>::from_vec(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let y = layernorm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2])).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[6, 3], 2.0, &mut rng);
        let g = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
        let y = layernorm(&x, &g, &b).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..6).map(|r| x.data()[r * 3 + j]).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            for r in 0..6 {
                let want = g.data()[r] * (col[r] - mean) / (var + 1e-5).sqrt() + b.data()[r];
                assert!((y.data()[r * 3 + j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gain_length_checked() {
        let x = Tensor::<f32>::zeros(&[4, 2]);
        assert!(layernorm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn activations_at_zero() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
        assert!(softplus(100.0f32).is_finite() && sigmoid(-100.0f32) >= 0.0);
    }
}
