use nalgebra::{DMatrix, DVector};

use super::SurrogateError;

/// PLS1 directions mapping centred inputs onto `components` latent scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PlsProjection {
    /// `m x h` rotations `W (PᵀW)⁻¹`, each column scaled to unit norm.
    pub weights: DMatrix<f64>,
    pub x_mean: DVector<f64>,
    pub y_mean: f64,
}

impl PlsProjection {
    pub fn components(&self) -> usize {
        self.weights.ncols()
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Latent scores of the rows of `x`.
    pub fn scores(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= self.x_mean.transpose();
        }
        xc * &self.weights
    }

    /// Identity directions, for plain anisotropic Kriging through the KPLS
    /// kernel.
    pub fn identity(m: usize) -> Self {
        Self {
            weights: DMatrix::identity(m, m),
            x_mean: DVector::zeros(m),
            y_mean: 0.0,
        }
    }
}

/// NIPALS PLS1: each weight vector is `Xᵀy` of the deflated residuals,
/// normalised; `X` and `y` are then deflated by the component scores.
///
/// Columns are centred but not scaled, so constant columns contribute
/// nothing. If the residual covariance vanishes before `h` components are
/// found, the achieved number is returned.
pub fn pls_directions(x: &DMatrix<f64>, y: &[f64], h: usize) -> Result<PlsProjection, SurrogateError> {
    let (n, m) = x.shape();
    if n < 2 {
        return Err(SurrogateError::InsufficientData(n));
    }
    if y.len() != n {
        return Err(SurrogateError::Dimension {
            expected: n,
            found: y.len(),
        });
    }
    if m == 0 {
        return Err(SurrogateError::Dimension { expected: 1, found: 0 });
    }
    let h_max = h.min(n - 1).min(m);
    if h_max < h {
        log::warn!("requested {h} PLS components, at most {h_max} are possible with n={n}, m={m}");
    }

    let x_mean = DVector::from_iterator(m, x.column_iter().map(|c| c.mean()));
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut xk = x.clone();
    for mut row in xk.row_iter_mut() {
        row -= x_mean.transpose();
    }
    let mut yk = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));

    let x_scale = xk.norm().max(f64::MIN_POSITIVE);
    let y_scale = yk.norm();
    let mut ws: Vec<DVector<f64>> = Vec::with_capacity(h_max);
    let mut ps: Vec<DVector<f64>> = Vec::with_capacity(h_max);
    for _ in 0..h_max {
        let mut w = xk.tr_mul(&yk);
        let norm = w.norm();
        if norm <= 1e-12 * x_scale * y_scale.max(f64::MIN_POSITIVE) || y_scale == 0.0 {
            break;
        }
        w /= norm;
        let t = &xk * &w;
        let tt = t.dot(&t);
        if tt <= 1e-24 * x_scale * x_scale {
            break;
        }
        let p = xk.tr_mul(&t) / tt;
        let q = yk.dot(&t) / tt;
        xk -= &t * p.transpose();
        yk -= &t * q;
        ws.push(w);
        ps.push(p);
    }
    if ws.len() < h_max {
        log::warn!("PLS reached rank {} before the requested {h_max} components", ws.len());
    }

    let k = ws.len();
    let weights = if k == 0 {
        DMatrix::zeros(m, 0)
    } else {
        let w = DMatrix::from_columns(&ws);
        let p = DMatrix::from_columns(&ps);
        let ptw = p.tr_mul(&w);
        let inv = ptw.try_inverse().ok_or_else(|| {
            SurrogateError::Numerical("PLS loading matrix is singular".into())
        })?;
        let mut rot = w * inv;
        for mut col in rot.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        rot
    };
    Ok(PlsProjection {
        weights,
        x_mean,
        y_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_column_gives_unit_direction() {
        let x = DMatrix::from_column_slice(4, 1, &[0.1, 0.5, 0.2, 0.9]);
        let p = pls_directions(&x, &[1.0, 2.0, 0.5, 3.0], 1).unwrap();
        assert_eq!(p.weights.shape(), (1, 1));
        assert!((p.weights[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_in_first_column_gives_e1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 12;
        let mut x = DMatrix::zeros(n, 5);
        for i in 0..n {
            x[(i, 0)] = rng.gen_range(-1.0..1.0);
        }
        let y: Vec<f64> = (0..n).map(|i| 3.0 * x[(i, 0)] + 1.0).collect();
        let p = pls_directions(&x, &y, 1).unwrap();
        let col = p.weights.column(0);
        assert!((col[0].abs() - 1.0).abs() < 1e-12);
        for v in col.iter().skip(1) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn columns_are_unit_norm_and_h_is_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(4, 10, |_, _| rng.gen_range(0.0..1.0));
        let y = [0.3, 0.1, 0.7, 0.2];
        let p = pls_directions(&x, &y, 8).unwrap();
        assert_eq!(p.components(), 3);
        for c in p.weights.column_iter() {
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p, pls_directions(&x, &y, 8).unwrap());
    }

    #[test]
    fn constant_response_has_no_directions() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, 0.0, 0.5, 0.5]);
        let p = pls_directions(&x, &[2.0, 2.0, 2.0], 2).unwrap();
        assert_eq!(p.components(), 0);
    }

    fn lstsq_residual(design: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        // normal equations with an intercept column
        let n = design.nrows();
        let mut a = DMatrix::from_element(n, design.ncols() + 1, 1.0);
        a.view_mut((0, 1), (n, design.ncols())).copy_from(design);
        let ata = a.tr_mul(&a);
        let coef = ata.lu().solve(&a.tr_mul(y)).unwrap();
        (y - a * coef).norm_squared()
    }

    #[test]
    fn scores_beat_best_single_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, m) = (20, 50);
        let x = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let beta = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let y: DVector<f64> = &x * beta + DVector::from_fn(n, |_, _| rng.gen_range(-0.1..0.1));
        let p = pls_directions(&x, y.as_slice(), 3).unwrap();
        let pls_res = lstsq_residual(&p.scores(&x), &y);
        let best_single = (0..m)
            .map(|j| lstsq_residual(&x.columns(j, 1).into_owned(), &y))
            .fold(f64::INFINITY, f64::min);
        assert!(pls_res < best_single, "{pls_res} vs {best_single}");
    }

    #[test]
    fn too_few_rows() {
        let x = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!(matches!(pls_directions(&x, &[1.0], 1), Err(SurrogateError::InsufficientData(1))));
    }
}
