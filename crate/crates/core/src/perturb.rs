//! Parameter-space perturbations.
//!
//! Base noise `ε` is drawn at unit scale: symmetric triangular on `[-1, 1]`
//! (density `1 - |x|`, variance 1/6) or standard normal. Candidates apply the
//! single scale factor `σ_ES`, so triangular candidates satisfy
//! `‖θ± - θ‖_∞ ≤ σ_ES`.
//!
//! With `standardize = true` triangular samples are multiplied by `√6` so that
//! `E[εεᵀ] = I`; the radius then becomes `√6 σ_ES`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::policy::ParameterVector;
use crate::rng::{derive_seed, stream_from_seed, Domain, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Triangular,
    Gaussian,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::Triangular => "triangular",
            NoiseKind::Gaussian => "gaussian",
        })
    }
}

/// Per-coordinate base-noise law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseDistribution {
    pub kind: NoiseKind,
    /// Half-width (triangular) or standard deviation (gaussian) of `ε`.
    pub scale: f64,
    #[serde(default)]
    pub standardize: bool,
}

impl NoiseDistribution {
    pub fn triangular() -> Self {
        Self { kind: NoiseKind::Triangular, scale: 1.0, standardize: false }
    }

    pub fn gaussian() -> Self {
        Self { kind: NoiseKind::Gaussian, scale: 1.0, standardize: false }
    }

    pub fn of_kind(kind: NoiseKind) -> Self {
        match kind {
            NoiseKind::Triangular => Self::triangular(),
            NoiseKind::Gaussian => Self::gaussian(),
        }
    }

    /// Rescale triangular samples to unit variance.
    pub fn standardized(mut self) -> Self {
        self.standardize = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(contract(format!("noise scale must be > 0, got {}", self.scale)));
        }
        Ok(())
    }

    /// Effective triangular half-width after standardization.
    fn half_width(&self) -> f64 {
        if self.standardize {
            self.scale * 6f64.sqrt()
        } else {
            self.scale
        }
    }

    /// Largest possible `|ε_k|`, infinite for gaussian noise.
    pub fn support_bound(&self) -> f64 {
        match self.kind {
            NoiseKind::Triangular => self.half_width(),
            NoiseKind::Gaussian => f64::INFINITY,
        }
    }

    /// Population variance of one coordinate.
    pub fn variance(&self) -> f64 {
        match self.kind {
            NoiseKind::Triangular => self.half_width().powi(2) / 6.0,
            NoiseKind::Gaussian => self.scale * self.scale,
        }
    }

    pub fn sample(&self, dim: usize, rng: &mut Stream) -> Vec<f64> {
        match self.kind {
            NoiseKind::Triangular => sample_triangular(self.half_width(), dim, rng),
            NoiseKind::Gaussian => sample_gaussian(self.scale, dim, rng),
        }
    }
}

/// `a (U - V)` for independent uniforms; symmetric triangular on `[-a, a]`.
#[inline]
pub fn triangular_from_uniforms(u: f64, v: f64, half_width: f64) -> f64 {
    half_width * (u - v)
}

pub fn sample_triangular(half_width: f64, dim: usize, rng: &mut Stream) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let u: f64 = rng.gen();
            let v: f64 = rng.gen();
            triangular_from_uniforms(u, v, half_width)
        })
        .collect()
}

pub fn sample_gaussian(std: f64, dim: usize, rng: &mut Stream) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Seed of the noise stream for candidate pair `index` in `generation`.
pub fn noise_seed(master_seed: u64, generation: u64, index: u64) -> u64 {
    derive_seed(master_seed, Domain::Perturbation, generation, index)
}

/// The `m` base-noise vectors of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBatch {
    pub epsilons: Vec<Vec<f64>>,
    pub sigma_es: f64,
    pub generation: u64,
    pub seed_table: Vec<u64>,
    pub noise: NoiseDistribution,
}

impl PerturbationBatch {
    /// A batch with caller-chosen noise vectors (finite-difference probes,
    /// replayed batches).
    pub fn from_epsilons(epsilons: Vec<Vec<f64>>, sigma_es: f64, noise: NoiseDistribution) -> Result<Self> {
        if epsilons.is_empty() {
            return Err(contract("a batch needs at least one noise vector"));
        }
        let dim = epsilons[0].len();
        if epsilons.iter().any(|e| e.len() != dim) {
            return Err(contract("noise vectors differ in length"));
        }
        check_sigma(sigma_es)?;
        let m = epsilons.len();
        Ok(Self { epsilons, sigma_es, generation: 0, seed_table: vec![0; m], noise })
    }

    pub fn pairs(&self) -> usize {
        self.epsilons.len()
    }

    pub fn dim(&self) -> usize {
        self.epsilons.first().map_or(0, Vec::len)
    }
}

fn check_sigma(sigma_es: f64) -> Result<()> {
    if !(sigma_es > 0.0 && sigma_es.is_finite()) {
        return Err(contract(format!("sigma_es must be > 0, got {sigma_es}")));
    }
    Ok(())
}

/// Draws `pairs` independent factorized noise vectors for `generation`.
/// The result is a pure function of `(master_seed, generation)`.
pub fn make_batch(
    noise: &NoiseDistribution,
    sigma_es: f64,
    pairs: usize,
    dim: usize,
    generation: u64,
    master_seed: u64,
) -> Result<PerturbationBatch> {
    if pairs == 0 {
        return Err(contract("need at least one antithetic pair"));
    }
    noise.validate()?;
    check_sigma(sigma_es)?;
    let seed_table: Vec<u64> = (0..pairs as u64).map(|i| noise_seed(master_seed, generation, i)).collect();
    let epsilons = seed_table
        .iter()
        .map(|&s| noise.sample(dim, &mut stream_from_seed(s)))
        .collect();
    Ok(PerturbationBatch { epsilons, sigma_es, generation, seed_table, noise: *noise })
}

/// One antithetic pair `θ ± σ_ES ε_i`.
///
/// `offset` is the step `σ_ES ε_i` itself; `plus` and `minus` are `θ + offset`
/// and `θ - offset` rounded once each.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePair {
    pub offset: Vec<f64>,
    pub plus: ParameterVector,
    pub minus: ParameterVector,
}

pub fn antithetic_candidates(center: &ParameterVector, batch: &PerturbationBatch) -> Result<Vec<CandidatePair>> {
    if center.len() != batch.dim() {
        return Err(contract(format!(
            "center has {} parameters, batch noise has {}",
            center.len(),
            batch.dim()
        )));
    }
    batch
        .epsilons
        .iter()
        .map(|eps| {
            let offset: Vec<f64> = eps.iter().map(|e| batch.sigma_es * e).collect();
            let plus = center.as_slice().iter().zip(&offset).map(|(c, s)| c + s).collect();
            let minus = center.as_slice().iter().zip(&offset).map(|(c, s)| c - s).collect();
            Ok(CandidatePair { plus: ParameterVector::new(plus)?, minus: ParameterVector::new(minus)?, offset })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use proptest::prelude::*;

    #[test]
    fn triangular_boundary_cases() {
        assert_eq!(triangular_from_uniforms(0.3, 0.3, 0.03), 0.0);
        assert_eq!(triangular_from_uniforms(1.0, 0.0, 0.03), 0.03);
        assert_eq!(triangular_from_uniforms(0.0, 1.0, 0.03), -0.03);
    }

    #[test]
    fn single_pair_single_dim_batch() {
        let b = make_batch(&NoiseDistribution::triangular(), 0.5, 1, 1, 0, 42).unwrap();
        assert_eq!(b.pairs(), 1);
        assert!(b.epsilons[0][0].abs() <= 1.0);
    }

    #[test]
    fn batches_regenerate_from_seed_and_generation() {
        let n = NoiseDistribution::gaussian();
        let a = make_batch(&n, 0.1, 4, 16, 7, 99).unwrap();
        let b = make_batch(&n, 0.1, 4, 16, 7, 99).unwrap();
        let c = make_batch(&n, 0.1, 4, 16, 8, 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.epsilons, c.epsilons);
    }

    #[test]
    fn golden_prefixes() {
        // First draws of the (seed 0, generation 0, pair 0) stream. Any change to
        // the seeding or samplers shows up here.
        let b = make_batch(&NoiseDistribution::gaussian(), 1.0, 1, 4, 0, 0).unwrap();
        assert_eq!(b.epsilons[0], [-0.4518595976855741, 0.1996881941886973, -0.036313505661618756, 0.5894808954353254]);
        let t = make_batch(&NoiseDistribution::triangular(), 1.0, 1, 4, 0, 0).unwrap();
        assert_eq!(t.epsilons[0], [-0.2161110579494775, 0.3617490721509734, 0.8284713798334974, 0.037685667125760935]);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = stream(3, Domain::Perturbation, 0, 0);
        let n = 1_000_000;
        let x = sample_gaussian(1.0, n, &mut rng);
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn large_batch_respects_bound_exhaustively() {
        let b = make_batch(&NoiseDistribution::triangular(), 0.03, 64, 10_000, 3, 5).unwrap();
        let worst = b.epsilons.iter().flatten().fold(0.0f64, |m, e| m.max(e.abs()));
        assert!(worst <= 1.0);
        let center = ParameterVector::zeros(10_000);
        for p in antithetic_candidates(&center, &b).unwrap() {
            assert!(p.offset.iter().all(|s| s.abs() <= 0.03));
            assert!(p.plus.max_abs_diff(&center) <= 0.03);
            assert!(p.minus.max_abs_diff(&center) <= 0.03);
        }
    }

    #[test]
    fn standardized_triangular_has_unit_variance() {
        let n = NoiseDistribution::triangular().standardized();
        assert!((n.variance() - 1.0).abs() < 1e-15);
        let x = n.sample(400_000, &mut stream(1, Domain::Perturbation, 0, 0));
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((var - 1.0).abs() < 0.02);
        assert!(x.iter().all(|v| v.abs() <= 6f64.sqrt()));
    }

    #[test]
    fn candidate_arithmetic() {
        let center = ParameterVector::zeros(2);
        let b = PerturbationBatch::from_epsilons(vec![vec![1.0, -1.0]], 0.1, NoiseDistribution::triangular()).unwrap();
        let c = &antithetic_candidates(&center, &b).unwrap()[0];
        assert_eq!(c.plus.as_slice(), &[0.1, -0.1]);
        assert_eq!(c.minus.as_slice(), &[-0.1, 0.1]);

        let zero = PerturbationBatch::from_epsilons(vec![vec![0.0, 0.0]], 0.1, NoiseDistribution::triangular()).unwrap();
        let c = &antithetic_candidates(&center, &zero).unwrap()[0];
        assert_eq!(c.plus, center);
        assert_eq!(c.minus, center);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let b = make_batch(&NoiseDistribution::triangular(), 0.1, 2, 3, 0, 0).unwrap();
        assert!(antithetic_candidates(&ParameterVector::zeros(4), &b).is_err());
        assert!(make_batch(&NoiseDistribution::triangular(), 0.1, 0, 3, 0, 0).is_err());
        assert!(make_batch(&NoiseDistribution::triangular(), 0.0, 1, 3, 0, 0).is_err());
    }

    #[test]
    fn triangular_histogram_matches_density() {
        let n = 1_000_000usize;
        let x = sample_triangular(1.0, n, &mut stream(11, Domain::Perturbation, 0, 0));
        let bins = 40;
        let width = 2.0 / bins as f64;
        let mut counts = vec![0usize; bins];
        for v in &x {
            let b = (((v + 1.0) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, &c) in counts.iter().enumerate() {
            let lo = -1.0 + b as f64 * width;
            let hi = lo + width;
            // exact bin mass of the density 1 - |x|
            let cdf = |t: f64| if t < 0.0 { 0.5 * (1.0 + t).powi(2) } else { 1.0 - 0.5 * (1.0 - t).powi(2) };
            let p = cdf(hi) - cdf(lo);
            let expected = p * n as f64;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((c as f64 - expected).abs() <= 3.0 * sd + 1.0, "bin {b}: {c} vs {expected:.1}");
        }
    }

    proptest! {
        #[test]
        fn candidates_reflect_exactly(seed in any::<u64>(), generation in 0u64..1000, sigma in 1e-4f64..1.0,
                                      center in proptest::collection::vec(-5.0f64..5.0, 1..40), gaussian in any::<bool>()) {
            let noise = if gaussian { NoiseDistribution::gaussian() } else { NoiseDistribution::triangular() };
            let center = ParameterVector::new(center).unwrap();
            let b = make_batch(&noise, sigma, 3, center.len(), generation, seed).unwrap();
            for p in antithetic_candidates(&center, &b).unwrap() {
                for (k, &c) in center.as_slice().iter().enumerate() {
                    let s = p.offset[k];
                    prop_assert_eq!(p.plus.as_slice()[k], c + s);
                    prop_assert_eq!(p.minus.as_slice()[k], c + (-s));
                    let ulp = f64::EPSILON * (c.abs() + s.abs());
                    prop_assert!((p.plus.as_slice()[k] + p.minus.as_slice()[k] - 2.0 * c).abs() <= 2.0 * ulp);
                    if !gaussian {
                        prop_assert!(s.abs() <= sigma);
                    }
                }
            }
        }
    }
}
