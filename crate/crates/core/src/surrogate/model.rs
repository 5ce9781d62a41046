//! Ordinary Kriging fitted by concentrated maximum likelihood.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::kernel::dimension_weights;
use super::{pls_directions, PlsProjection, SurrogateError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// One θ per PLS component.
    Kpls,
    /// One θ shared by every input dimension.
    Kriging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub kind: KernelKind,
    /// PLS components `h`.
    pub components: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub nugget: f64,
    /// Largest nugget tried when the correlation matrix will not factor.
    pub max_nugget: f64,
    pub starts: usize,
    pub rounds: usize,
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            kind: KernelKind::Kpls,
            components: 3,
            theta_min: 1e-6,
            theta_max: 1e2,
            nugget: 1e-8,
            max_nugget: 1e-6,
            starts: 5,
            rounds: 3,
            grid_points: 20,
            seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<(), SurrogateError> {
        let bad = |m: &str| Err(SurrogateError::Config(m.to_string()));
        if !(self.theta_min > 0.0 && self.theta_min < self.theta_max && self.theta_max.is_finite()) {
            return bad("need 0 < theta_min < theta_max");
        }
        if !(self.nugget > 0.0 && self.nugget <= self.max_nugget) {
            return bad("need 0 < nugget <= max_nugget");
        }
        if self.kind == KernelKind::Kpls && self.components == 0 {
            return bad("KPLS needs at least one component");
        }
        if self.starts == 0 || self.rounds == 0 || self.grid_points < 2 {
            return bad("optimizer needs starts >= 1, rounds >= 1, grid_points >= 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// A fitted surrogate. Immutable; `predict` may be called concurrently.
#[derive(Debug, Clone)]
pub struct KplsModel {
    pub kind: KernelKind,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub theta: Vec<f64>,
    pub projection: Option<PlsProjection>,
    pub beta: f64,
    pub sigma2: f64,
    pub nugget: f64,
    pub log_likelihood: f64,
    chol: Cholesky<f64, Dyn>,
    /// `R⁻¹ (y - 1β)`
    alpha: DVector<f64>,
    /// `R⁻¹ 1`
    r_inv_ones: DVector<f64>,
    ones_r_inv_ones: f64,
    /// `c_i` in `k = exp(-Σ c_i (x_i - x'_i)²)`.
    dim_weights: Vec<f64>,
}

/// Parameters written to the run directory after each refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDump {
    pub kind: KernelKind,
    /// Per-component θ for KPLS; a single shared θ for Kriging.
    pub theta: Vec<f64>,
    pub components: usize,
    pub beta: f64,
    pub sigma2: f64,
    pub nugget: f64,
    pub log_likelihood: f64,
    pub n_train: usize,
    pub dim: usize,
    pub training_set_sha256: String,
}

/// Exact duplicate rows collapse to one, keeping the largest response.
fn dedup_rows(x: &[Vec<f64>], y: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(x.len());
    let mut ys: Vec<f64> = Vec::with_capacity(x.len());
    for (row, &v) in x.iter().zip(y) {
        match rows.iter().position(|r| r == row) {
            Some(i) => ys[i] = ys[i].max(v),
            None => {
                rows.push(row.clone());
                ys.push(v);
            }
        }
    }
    (rows, ys)
}

/// Pairwise squared distances per kernel component: for KPLS,
/// `D_k(a, b) = Σ_i w_ik² (x_ai - x_bi)²`; for Kriging a single component
/// `Σ_i (x_ai - x_bi)²`.
struct PairDistances {
    n: usize,
    /// `[pair][component]`, pairs in upper-triangle row order.
    d: Vec<Vec<f64>>,
}

impl PairDistances {
    fn new(x: &[Vec<f64>], projection: Option<&PlsProjection>) -> Self {
        let n = x.len();
        let sq_weights: Option<Vec<Vec<f64>>> = projection.map(|p| {
            p.weights
                .column_iter()
                .map(|c| c.iter().map(|w| w * w).collect())
                .collect()
        });
        let mut d = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
        for a in 0..n {
            for b in a + 1..n {
                let diff2: Vec<f64> = x[a].iter().zip(&x[b]).map(|(p, q)| (p - q) * (p - q)).collect();
                let comps = match &sq_weights {
                    Some(ws) => ws
                        .iter()
                        .map(|w| w.iter().zip(&diff2).map(|(w, d)| w * d).sum())
                        .collect(),
                    None => vec![diff2.iter().sum()],
                };
                d.push(comps);
            }
        }
        Self { n, d }
    }

    fn correlation(&self, theta: &[f64], nugget: f64) -> DMatrix<f64> {
        let n = self.n;
        let mut r = DMatrix::identity(n, n);
        for i in 0..n {
            r[(i, i)] += nugget;
        }
        let mut pair = 0;
        for a in 0..n {
            for b in a + 1..n {
                let e: f64 = theta.iter().zip(&self.d[pair]).map(|(t, d)| t * d).sum();
                let v = (-e).exp();
                r[(a, b)] = v;
                r[(b, a)] = v;
                pair += 1;
            }
        }
        r
    }
}

struct Concentrated {
    chol: Cholesky<f64, Dyn>,
    beta: f64,
    sigma2: f64,
    alpha: DVector<f64>,
    r_inv_ones: DVector<f64>,
    ones_r_inv_ones: f64,
    log_likelihood: f64,
}

/// GLS mean, process variance and concentrated log-likelihood
/// `-n ln σ² - ln det R` for one θ. `None` if `R` does not factor.
fn concentrate(dist: &PairDistances, y: &DVector<f64>, theta: &[f64], nugget: f64) -> Option<Concentrated> {
    let n = dist.n;
    let chol = Cholesky::new(dist.correlation(theta, nugget))?;
    let ones = DVector::from_element(n, 1.0);
    let r_inv_ones = chol.solve(&ones);
    let r_inv_y = chol.solve(y);
    let ones_r_inv_ones = ones.dot(&r_inv_ones);
    if !(ones_r_inv_ones > 0.0 && ones_r_inv_ones.is_finite()) {
        return None;
    }
    let constant = y.iter().all(|v| *v == y[0]);
    let (beta, alpha, sigma2) = if constant {
        // exact, rather than a GLS solve that leaves rounding residue
        (y[0], DVector::zeros(n), 0.0)
    } else {
        let beta = ones.dot(&r_inv_y) / ones_r_inv_ones;
        let alpha = &r_inv_y - &r_inv_ones * beta;
        let resid = y - &ones * beta;
        let sigma2 = (resid.dot(&alpha) / n as f64).max(0.0);
        (beta, alpha, sigma2)
    };
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_likelihood = -(n as f64) * sigma2.max(1e-300).ln() - log_det;
    if !log_likelihood.is_finite() || !beta.is_finite() {
        return None;
    }
    Some(Concentrated {
        chol,
        beta,
        sigma2,
        alpha,
        r_inv_ones,
        ones_r_inv_ones,
        log_likelihood,
    })
}

/// Multi-start coordinate search on log10 θ. Each round scans every
/// coordinate on an evenly spaced grid and the next round narrows the
/// bracket to two grid spacings around the incumbent.
fn maximize_likelihood(
    dist: &PairDistances,
    y: &DVector<f64>,
    dims: usize,
    nugget: f64,
    cfg: &SurrogateConfig,
) -> Option<(Vec<f64>, f64)> {
    let (lo, hi) = (cfg.theta_min.log10(), cfg.theta_max.log10());
    let eval = |log_theta: &[f64]| -> f64 {
        let theta: Vec<f64> = log_theta.iter().map(|l| 10f64.powf(*l)).collect();
        concentrate(dist, y, &theta, nugget)
            .map(|c| c.log_likelihood)
            .unwrap_or(f64::NEG_INFINITY)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in 0..cfg.starts {
        let mut cur: Vec<f64> = if start == 0 {
            vec![(lo + hi) / 2.0; dims]
        } else {
            (0..dims).map(|_| rng.gen_range(lo..=hi)).collect()
        };
        let mut cur_val = eval(&cur);
        let mut half_width = hi - lo;
        for _ in 0..cfg.rounds {
            let mut spacing = 0.0;
            for k in 0..dims {
                let a = (cur[k] - half_width).max(lo);
                let b = (cur[k] + half_width).min(hi);
                spacing = (b - a) / (cfg.grid_points - 1) as f64;
                for g in 0..cfg.grid_points {
                    let mut cand = cur.clone();
                    cand[k] = a + spacing * g as f64;
                    let v = eval(&cand);
                    if v > cur_val {
                        cur = cand;
                        cur_val = v;
                    }
                }
            }
            half_width = 2.0 * spacing;
        }
        if cur_val.is_finite() && best.as_ref().map_or(true, |(_, b)| cur_val > *b) {
            best = Some((cur, cur_val));
        }
    }
    best.map(|(l, v)| (l.iter().map(|l| 10f64.powf(*l)).collect(), v))
}

impl KplsModel {
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &SurrogateConfig) -> Result<Self, SurrogateError> {
        cfg.validate()?;
        if x.len() != y.len() {
            return Err(SurrogateError::Dimension {
                expected: x.len(),
                found: y.len(),
            });
        }
        let m = x.first().map_or(0, Vec::len);
        if m == 0 {
            return Err(SurrogateError::InsufficientData(0));
        }
        if let Some(row) = x.iter().find(|r| r.len() != m) {
            return Err(SurrogateError::Dimension {
                expected: m,
                found: row.len(),
            });
        }
        if !x.iter().flatten().chain(y).all(|v| v.is_finite()) {
            return Err(SurrogateError::NonFinite);
        }
        let (x, y) = dedup_rows(x, y);
        let n = x.len();
        if n < 2 {
            return Err(SurrogateError::InsufficientData(n));
        }

        let projection = match cfg.kind {
            KernelKind::Kpls => {
                let xm = DMatrix::from_fn(n, m, |i, j| x[i][j]);
                Some(pls_directions(&xm, &y, cfg.components)?)
            }
            KernelKind::Kriging => None,
        };
        let dims = projection.as_ref().map_or(1, PlsProjection::components);
        let dist = PairDistances::new(&x, projection.as_ref());
        let yv = DVector::from_column_slice(&y);

        let mut nugget = cfg.nugget;
        loop {
            let found = if dims == 0 {
                Some((Vec::new(), 0.0))
            } else {
                maximize_likelihood(&dist, &yv, dims, nugget, cfg)
            };
            if let Some((theta, _)) = found {
                if let Some(c) = concentrate(&dist, &yv, &theta, nugget) {
                    let dim_weights = match &projection {
                        Some(p) => dimension_weights(&theta, p),
                        None => vec![theta[0]; m],
                    };
                    return Ok(Self {
                        kind: cfg.kind,
                        x,
                        y,
                        theta,
                        projection,
                        beta: c.beta,
                        sigma2: c.sigma2,
                        nugget,
                        log_likelihood: c.log_likelihood,
                        chol: c.chol,
                        alpha: c.alpha,
                        r_inv_ones: c.r_inv_ones,
                        ones_r_inv_ones: c.ones_r_inv_ones,
                        dim_weights,
                    });
                }
            }
            if nugget >= cfg.max_nugget {
                return Err(SurrogateError::Factorization(nugget));
            }
            nugget = (nugget * 10.0).min(cfg.max_nugget);
            log::warn!("correlation matrix not positive definite; retrying with nugget {nugget:e}");
        }
    }

    pub fn dim(&self) -> usize {
        self.dim_weights.len()
    }

    pub fn n_train(&self) -> usize {
        self.x.len()
    }

    fn correlations(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|row| {
                let e: f64 = row
                    .iter()
                    .zip(x)
                    .zip(&self.dim_weights)
                    .map(|((a, b), c)| c * (a - b) * (a - b))
                    .sum();
                (-e).exp()
            }),
        )
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction, SurrogateError> {
        if x.len() != self.dim() {
            return Err(SurrogateError::Dimension {
                expected: self.dim(),
                found: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(SurrogateError::NonFinite);
        }
        let r = self.correlations(x);
        let mean = self.beta + r.dot(&self.alpha);
        let r_inv_r = self.chol.solve(&r);
        let u = 1.0 - r.dot(&self.r_inv_ones);
        let variance = self.sigma2 * (1.0 - r.dot(&r_inv_r) + u * u / self.ones_r_inv_ones);
        Ok(Prediction {
            mean,
            variance: variance.max(0.0),
        })
    }

    pub fn training_set_hash(&self) -> String {
        let mut h = Sha256::new();
        for row in &self.x {
            for v in row {
                h.update(v.to_le_bytes());
            }
        }
        for v in &self.y {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn dump(&self) -> ModelDump {
        ModelDump {
            kind: self.kind,
            theta: self.theta.clone(),
            components: self.projection.as_ref().map_or(0, PlsProjection::components),
            beta: self.beta,
            sigma2: self.sigma2,
            nugget: self.nugget,
            log_likelihood: self.log_likelihood,
            n_train: self.n_train(),
            dim: self.dim(),
            training_set_sha256: self.training_set_hash(),
        }
    }
}
