use rand::seq::index;
use rand::Rng;
use statrs::function::erf::erfc;

use super::EngineError;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Expected improvement of a Gaussian prediction over `f_best`, for
/// maximisation. Zero when `sigma` is zero.
pub fn expected_improvement(mean: f64, sigma: f64, f_best: f64) -> Result<f64, EngineError> {
    if !(sigma >= 0.0) || !mean.is_finite() || !f_best.is_finite() || !sigma.is_finite() {
        return Err(EngineError::InvalidPrediction { mean, sigma });
    }
    if sigma == 0.0 {
        return Ok(0.0);
    }
    let diff = mean - f_best;
    let z = diff / sigma;
    let cdf = 0.5 * erfc(-z / std::f64::consts::SQRT_2);
    let pdf = INV_SQRT_2PI * (-0.5 * z * z).exp();
    Ok((diff * cdf + sigma * pdf).max(0.0))
}

/// Tournament among `k` distinct individuals drawn uniformly (the whole
/// population when `k` exceeds its size). Returns the index of the fittest
/// contestant; ties go to the lower index.
pub fn select_parent<R: Rng + ?Sized>(fitness: &[f64], k: usize, rng: &mut R) -> usize {
    assert!(!fitness.is_empty() && k >= 1, "tournament needs a population and k >= 1");
    let n = fitness.len();
    let mut best = usize::MAX;
    for c in index::sample(rng, n, k.min(n)) {
        if best == usize::MAX || fitness[c] > fitness[best] || (fitness[c] == fitness[best] && c < best) {
            best = c;
        }
    }
    best
}
