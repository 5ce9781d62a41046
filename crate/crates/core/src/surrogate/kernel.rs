use super::{PlsProjection, SurrogateError};

/// Squared-exponential correlation between two points.
///
/// Without a projection this is the Kriging kernel
/// `∏_i exp(-θ_i (x_i - x'_i)²)`, where a single-element `theta` is shared
/// by every dimension. With a projection it is the KPLS kernel
/// `∏_k ∏_i exp(-θ_k (w_ik x_i - w_ik x'_i)²)`.
pub fn kernel(
    x: &[f64],
    x2: &[f64],
    theta: &[f64],
    projection: Option<&PlsProjection>,
) -> Result<f64, SurrogateError> {
    if x.len() != x2.len() {
        return Err(SurrogateError::Dimension {
            expected: x.len(),
            found: x2.len(),
        });
    }
    if !x.iter().chain(x2).chain(theta).all(|v| v.is_finite()) {
        return Err(SurrogateError::NonFinite);
    }
    let m = x.len();
    let exponent = match projection {
        None => {
            if theta.len() == 1 {
                theta[0] * x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            } else if theta.len() == m {
                x.iter()
                    .zip(x2)
                    .zip(theta)
                    .map(|((a, b), t)| t * (a - b) * (a - b))
                    .sum()
            } else {
                return Err(SurrogateError::Dimension {
                    expected: m,
                    found: theta.len(),
                });
            }
        }
        Some(p) => {
            if p.dim() != m {
                return Err(SurrogateError::Dimension {
                    expected: p.dim(),
                    found: m,
                });
            }
            if theta.len() != p.components() {
                return Err(SurrogateError::Dimension {
                    expected: p.components(),
                    found: theta.len(),
                });
            }
            let mut total = 0.0;
            for (k, w) in p.weights.column_iter().enumerate() {
                let mut s = 0.0;
                for i in 0..m {
                    let d = w[i] * x[i] - w[i] * x2[i];
                    s += d * d;
                }
                total += theta[k] * s;
            }
            total
        }
    };
    Ok((-exponent).exp())
}

/// Per-dimension length weights `c_i = Σ_k θ_k w_ik²`, so that the KPLS
/// kernel equals `exp(-Σ_i c_i (x_i - x'_i)²)`.
pub(crate) fn dimension_weights(theta: &[f64], projection: &PlsProjection) -> Vec<f64> {
    let w = &projection.weights;
    (0..w.nrows())
        .map(|i| (0..w.ncols()).map(|k| theta[k] * w[(i, k)] * w[(i, k)]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    #[test]
    fn identical_points_correlate_fully() {
        let x = [0.3, -1.0, 2.0];
        assert_eq!(kernel(&x, &x, &[5.0], None).unwrap(), 1.0);
    }

    #[test]
    fn two_dim_example() {
        let k = kernel(&[0.0, 0.0], &[1.0, 1.0], &[1.0], None).unwrap();
        let expected = (-1.0f64).exp() * (-1.0f64).exp();
        assert!((k - expected).abs() < 1e-15);
        assert!((k - 0.135_335_283_236_612_7).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(kernel(&[0.0], &[0.0, 1.0], &[1.0], None).is_err());
        assert!(matches!(kernel(&[f64::NAN], &[0.0], &[1.0], None), Err(SurrogateError::NonFinite)));
        assert!(kernel(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 2.0, 3.0], None).is_err());
    }

    #[test]
    fn weights_match_kernel() {
        let p = PlsProjection {
            weights: DMatrix::from_row_slice(3, 2, &[0.6, 0.0, 0.8, 0.6, 0.0, 0.8]),
            ..PlsProjection::identity(3)
        };
        let theta = [0.7, 2.0];
        let (a, b): ([f64; 3], [f64; 3]) = ([0.1, 0.4, -0.3], [0.5, -0.2, 0.9]);
        let c = dimension_weights(&theta, &p);
        let via_weights = (-(0..3).map(|i| c[i] * (a[i] - b[i]).powi(2)).sum::<f64>()).exp();
        let direct = kernel(&a, &b, &theta, Some(&p)).unwrap();
        assert!((via_weights - direct).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(
            x in prop::collection::vec(-5.0f64..5.0, 4),
            y in prop::collection::vec(-5.0f64..5.0, 4),
            t in 1e-6f64..1e2,
        ) {
            let a = kernel(&x, &y, &[t], None).unwrap();
            let b = kernel(&y, &x, &[t], None).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a <= 1.0 && a >= 0.0);
            let p = PlsProjection::identity(4);
            let thetas = [t, t * 0.5, 1.0, 3.0];
            let kp = kernel(&x, &y, &thetas, Some(&p)).unwrap();
            let kk = kernel(&x, &y, &thetas, None).unwrap();
            prop_assert!((kp - kk).abs() <= 1e-12);
        }
    }
}
