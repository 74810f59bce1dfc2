//! Fitness shaping and ES gradient estimators.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::perturb::{make_batch, NoiseDistribution, NoiseKind, PerturbationBatch};

/// Episodic returns of one generation, aligned with the batch's noise vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnTable {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl ReturnTable {
    pub fn new(plus: Vec<f64>, minus: Vec<f64>) -> Result<Self> {
        if plus.len() != minus.len() || plus.is_empty() {
            return Err(contract(format!(
                "need equal, non-empty plus/minus returns, got {} and {}",
                plus.len(),
                minus.len()
            )));
        }
        if plus.iter().chain(&minus).any(|v| !v.is_finite()) {
            return Err(contract("returns must be finite"));
        }
        Ok(Self { plus, minus })
    }

    pub fn pairs(&self) -> usize {
        self.plus.len()
    }

    pub fn mean(&self) -> f64 {
        self.plus.iter().chain(&self.minus).sum::<f64>() / (2 * self.pairs()) as f64
    }

    pub fn best(&self) -> f64 {
        self.plus.iter().chain(&self.minus).copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Standardized rank scores `J̃±`, laid out like [`ReturnTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteredRanks {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

/// Rank-based scores for arbitrary values.
///
/// Values are ranked ascending (ties share the average of their 0-based
/// positions), rank `k` maps to `k/(n-1) - 1/2`, and the result is centered
/// and divided by its population standard deviation. If every value is equal
/// the scores are all zero.
pub fn centered_rank_scores(values: &[f64]) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 2 {
        return Err(contract(format!("centered ranks need at least 2 values, got {n}")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(contract("cannot rank NaN returns"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end - 1) as f64 / 2.0;
        for &ix in &order[start..end] {
            ranks[ix] = avg;
        }
        start = end;
    }
    if ranks.iter().all(|&r| r == ranks[0]) {
        return Ok(vec![0.0; n]);
    }

    let denom = (n - 1) as f64;
    let mut scores: Vec<f64> = ranks.iter().map(|r| r / denom - 0.5).collect();
    let mean = scores.iter().sum::<f64>() / n as f64;
    for s in &mut scores {
        *s -= mean;
    }
    let std = (scores.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
    for s in &mut scores {
        *s /= std;
    }
    Ok(scores)
}

/// Ranks all `2m` returns of a generation jointly.
pub fn centered_ranks(returns: &ReturnTable) -> Result<CenteredRanks> {
    let m = returns.pairs();
    let all: Vec<f64> = returns.plus.iter().chain(&returns.minus).copied().collect();
    let mut scores = centered_rank_scores(&all)?;
    let minus = scores.split_off(m);
    Ok(CenteredRanks { plus: scores, minus })
}

/// Per-generation estimator summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorDiagnostics {
    pub g_norm: f64,
    /// Mean over coordinates of the sampling variance of `g`, estimated from
    /// the spread of the per-pair contributions (zero for `m = 1`).
    pub coord_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub g: Vec<f64>,
    pub diagnostics: EstimatorDiagnostics,
}

impl GradientEstimate {
    fn from_terms(g: Vec<f64>, terms: impl Fn(usize, usize) -> f64, count: usize) -> Self {
        let g_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let coord_variance = if count < 2 || g.is_empty() {
            0.0
        } else {
            let total: f64 = (0..g.len())
                .map(|k| {
                    let ss: f64 = (0..count).map(|i| (terms(i, k) - g[k]).powi(2)).sum();
                    ss / (count - 1) as f64 / count as f64
                })
                .sum();
            total / g.len() as f64
        };
        Self { g, diagnostics: EstimatorDiagnostics { g_norm, coord_variance } }
    }

    /// `‖α g‖ / ‖θ‖`, the relative size of an update.
    pub fn update_ratio(&self, alpha: f64, params: &[f64]) -> f64 {
        let p = params.iter().map(|v| v * v).sum::<f64>().sqrt();
        if p == 0.0 {
            f64::INFINITY
        } else {
            alpha * self.diagnostics.g_norm / p
        }
    }
}

/// `g = 1/(m σ) Σ_i (s_i⁺ - s_i⁻) ε_i` for arbitrary per-candidate scores.
/// Summation runs in pair-index order.
pub fn antithetic_gradient(batch: &PerturbationBatch, plus: &[f64], minus: &[f64]) -> Result<GradientEstimate> {
    let m = batch.pairs();
    if plus.len() != m || minus.len() != m {
        return Err(contract(format!(
            "batch has {m} pairs but {} / {} scores were given",
            plus.len(),
            minus.len()
        )));
    }
    if !(batch.sigma_es > 0.0) {
        return Err(contract(format!("sigma_es must be > 0, got {}", batch.sigma_es)));
    }
    let d = batch.dim();
    let diffs: Vec<f64> = plus.iter().zip(minus).map(|(p, q)| p - q).collect();
    let mut g = vec![0.0; d];
    for (diff, eps) in diffs.iter().zip(&batch.epsilons) {
        for (gk, e) in g.iter_mut().zip(eps) {
            *gk += diff * e;
        }
    }
    let scale = 1.0 / (m as f64 * batch.sigma_es);
    for gk in &mut g {
        *gk *= scale;
    }
    let per_pair = |i: usize, k: usize| diffs[i] * batch.epsilons[i][k] / batch.sigma_es;
    Ok(GradientEstimate::from_terms(g, per_pair, m))
}

/// The TD-ES search direction from centered-rank scores.
pub fn tdes_gradient(batch: &PerturbationBatch, ranks: &CenteredRanks) -> Result<GradientEstimate> {
    antithetic_gradient(batch, &ranks.plus, &ranks.minus)
}

/// The score-function estimator `g = 1/(n σ) Σ_i J(θ + σ δ_i) δ_i` over `n`
/// one-sided Gaussian samples.
pub fn classic_es_gradient(deltas: &[Vec<f64>], returns: &[f64], sigma_es: f64) -> Result<GradientEstimate> {
    let n = deltas.len();
    if n == 0 || returns.len() != n {
        return Err(contract(format!("{n} perturbations but {} returns", returns.len())));
    }
    if !(sigma_es > 0.0) {
        return Err(contract(format!("sigma_es must be > 0, got {sigma_es}")));
    }
    let d = deltas[0].len();
    let mut g = vec![0.0; d];
    for (j, delta) in returns.iter().zip(deltas) {
        for (gk, e) in g.iter_mut().zip(delta) {
            *gk += j * e;
        }
    }
    let scale = 1.0 / (n as f64 * sigma_es);
    for gk in &mut g {
        *gk *= scale;
    }
    let per_sample = |i: usize, k: usize| returns[i] * deltas[i][k] / sigma_es;
    Ok(GradientEstimate::from_terms(g, per_sample, n))
}

/// How candidate returns become scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTransform {
    Raw,
    #[default]
    CenteredRanks,
}

/// Evaluates `objective` on a batch's antithetic candidates and returns the
/// resulting gradient estimate.
pub fn estimate_on_objective<F>(
    objective: &F,
    center: &[f64],
    batch: &PerturbationBatch,
    transform: ScoreTransform,
) -> Result<GradientEstimate>
where
    F: Fn(&[f64]) -> f64,
{
    let mut plus = Vec::with_capacity(batch.pairs());
    let mut minus = Vec::with_capacity(batch.pairs());
    let mut buf = vec![0.0; center.len()];
    for eps in &batch.epsilons {
        for ((b, c), e) in buf.iter_mut().zip(center).zip(eps) {
            *b = c + batch.sigma_es * e;
        }
        plus.push(objective(&buf));
        for ((b, c), e) in buf.iter_mut().zip(center).zip(eps) {
            *b = c - batch.sigma_es * e;
        }
        minus.push(objective(&buf));
    }
    match transform {
        ScoreTransform::Raw => antithetic_gradient(batch, &plus, &minus),
        ScoreTransform::CenteredRanks => tdes_gradient(batch, &centered_ranks(&ReturnTable::new(plus, minus)?)?),
    }
}

/// Settings for an estimator-variance study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceStudy {
    pub sigma_es: f64,
    pub pairs: usize,
    pub trials: usize,
    pub transform: ScoreTransform,
    pub seed: u64,
}

/// Trace of the empirical covariance of `g` for each noise kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComparison {
    pub triangular: f64,
    pub gaussian: f64,
}

impl VarianceComparison {
    /// Percentage by which triangular noise lowers the variance.
    pub fn reduction_percent(&self) -> f64 {
        100.0 * (1.0 - self.triangular / self.gaussian)
    }
}

/// Trace of the sample covariance of `trials` independent estimates drawn at
/// `center` with noise `noise`. Trial `t` uses generation `t` of `study.seed`,
/// so every kind sees the same stream counters.
pub fn estimator_variance<F>(objective: &F, center: &[f64], noise: &NoiseDistribution, study: &VarianceStudy) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if study.trials < 2 {
        return Err(contract("variance study needs at least 2 trials"));
    }
    let estimates: Vec<Vec<f64>> = (0..study.trials as u64)
        .into_par_iter()
        .map(|t| {
            let batch = make_batch(noise, study.sigma_es, study.pairs, center.len(), t, study.seed)?;
            Ok(estimate_on_objective(objective, center, &batch, study.transform)?.g)
        })
        .collect::<Result<_>>()?;
    Ok(covariance_trace(&estimates))
}

/// Runs [`estimator_variance`] for both kinds at equal `σ_ES` and `m`.
pub fn compare_variance<F>(objective: &F, center: &[f64], study: &VarianceStudy) -> Result<VarianceComparison>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    Ok(VarianceComparison {
        triangular: estimator_variance(objective, center, &NoiseDistribution::of_kind(NoiseKind::Triangular), study)?,
        gaussian: estimator_variance(objective, center, &NoiseDistribution::of_kind(NoiseKind::Gaussian), study)?,
    })
}

/// `Σ_k Var(x_k)` with the unbiased (n - 1) normalization.
pub fn covariance_trace(samples: &[Vec<f64>]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let d = samples[0].len();
    (0..d)
        .map(|k| {
            let mean = samples.iter().map(|s| s[k]).sum::<f64>() / n as f64;
            samples.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .sum()
}
