//! Aggregate statistics over multi-seed runs.
//!
//! Conventions:
//!
//! - IQM drops `floor(n/4)` sorted samples from each end and averages the
//!   rest, so for `n <= 3` it is the plain mean.
//! - Confidence intervals are percentile intervals of a stratified bootstrap:
//!   seeds are resampled with replacement independently inside every stratum
//!   (one stratum per task, and per method when two methods are compared).
//!   Percentiles interpolate linearly between order statistics.
//! - Probability of improvement counts ties as one half.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::{stream, Domain};

pub fn mean(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(contract("mean of an empty sample"));
    }
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

/// Sample standard deviation (n - 1 denominator); 0 for a single sample.
pub fn std_dev(samples: &[f64]) -> Result<f64> {
    let m = mean(samples)?;
    if samples.len() < 2 {
        return Ok(0.0);
    }
    let ss: f64 = samples.iter().map(|x| (x - m) * (x - m)).sum();
    Ok((ss / (samples.len() - 1) as f64).sqrt())
}

/// Interquartile mean.
pub fn iqm(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(contract("IQM of an empty sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut = sorted.len() / 4;
    mean(&sorted[cut..sorted.len() - cut])
}

/// `P(A > B)` for a random draw from each sample, ties counted as 1/2.
pub fn prob_improvement(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(contract("probability of improvement needs non-empty samples"));
    }
    let mut score = 0.0;
    for x in a {
        for y in b {
            if x > y {
                score += 1.0;
            } else if x == y {
                score += 0.5;
            }
        }
    }
    Ok(score / (a.len() * b.len()) as f64)
}

/// Fraction of `scores` strictly above each threshold.
pub fn performance_profile(scores: &[f64], taus: &[f64]) -> Vec<f64> {
    let n = scores.len().max(1) as f64;
    taus.iter().map(|t| scores.iter().filter(|s| *s > t).count() as f64 / n).collect()
}

/// `count` evenly spaced thresholds on `[0, 1]`.
pub fn tau_grid(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count).map(|i| i as f64 / (count - 1) as f64).collect(),
    }
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { resamples: 2000, level: 0.95, seed: 0 }
    }
}

/// Percentile interval of `statistic` under stratified resampling.
///
/// Each entry of `strata` is resampled with replacement to its own size; the
/// statistic sees the resampled strata in the original order. Resample `r`
/// uses its own derived stream, so the result does not depend on thread
/// count.
pub fn stratified_bootstrap_ci<F>(strata: &[Vec<f64>], statistic: F, config: &BootstrapConfig) -> Result<(f64, f64)>
where
    F: Fn(&[Vec<f64>]) -> f64 + Sync,
{
    if strata.is_empty() || strata.iter().any(|s| s.is_empty()) {
        return Err(contract("bootstrap needs non-empty strata"));
    }
    if config.resamples == 0 || !(config.level > 0.0 && config.level < 1.0) {
        return Err(contract("bootstrap needs resamples >= 1 and level in (0, 1)"));
    }
    let mut stats: Vec<f64> = (0..config.resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(config.seed, Domain::Bootstrap, r as u64, 0);
            let resampled: Vec<Vec<f64>> = strata
                .iter()
                .map(|s| (0..s.len()).map(|_| s[rng.gen_range(0..s.len())]).collect())
                .collect();
            statistic(&resampled)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - config.level) / 2.0;
    Ok((percentile_sorted(&stats, tail), percentile_sorted(&stats, 1.0 - tail)))
}

/// Final success rates: `method -> task -> per-seed scores`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub tasks: Vec<String>,
    pub scores: BTreeMap<String, Vec<Vec<f64>>>,
}

impl ScoreMatrix {
    pub fn new(tasks: Vec<String>) -> Self {
        Self { tasks, scores: BTreeMap::new() }
    }

    /// Adds one method's per-task scores; every task needs the same number of
    /// seeds and every score must lie in `[0, 1]`.
    pub fn insert(&mut self, method: &str, per_task: Vec<Vec<f64>>) -> Result<()> {
        if per_task.len() != self.tasks.len() {
            return Err(contract(format!("{method}: {} task rows for {} tasks", per_task.len(), self.tasks.len())));
        }
        let seeds = per_task.first().map_or(0, Vec::len);
        if seeds == 0 || per_task.iter().any(|row| row.len() != seeds) {
            return Err(contract(format!("{method}: score rows must be non-empty and equally long")));
        }
        if per_task.iter().flatten().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(contract(format!("{method}: success rates must lie in [0, 1]")));
        }
        self.scores.insert(method.to_owned(), per_task);
        Ok(())
    }

    pub fn methods(&self) -> impl Iterator<Item = &str> {
        self.scores.keys().map(String::as_str)
    }

    pub fn get(&self, method: &str) -> Option<&[Vec<f64>]> {
        self.scores.get(method).map(Vec::as_slice)
    }

    /// All of a method's scores, task-major.
    pub fn flat(&self, method: &str) -> Option<Vec<f64>> {
        self.get(method).map(|rows| rows.iter().flatten().copied().collect())
    }
}

fn pooled_iqm(strata: &[Vec<f64>]) -> f64 {
    let flat: Vec<f64> = strata.iter().flatten().copied().collect();
    iqm(&flat).expect("strata are non-empty")
}

fn pooled_mean(strata: &[Vec<f64>]) -> f64 {
    let flat: Vec<f64> = strata.iter().flatten().copied().collect();
    mean(&flat).expect("strata are non-empty")
}

/// Mean over tasks of per-task probability of improvement; the first half of
/// `strata` belongs to A, the second half to B.
fn paired_prob_improvement(strata: &[Vec<f64>]) -> f64 {
    let k = strata.len() / 2;
    let total: f64 = (0..k)
        .map(|t| prob_improvement(&strata[t], &strata[k + t]).expect("strata are non-empty"))
        .sum();
    total / k as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    /// A percentile interval need not contain the full-sample estimate; the
    /// reported interval is widened to include it.
    pub fn new(point: f64, (lo, hi): (f64, f64)) -> Self {
        Self { point, lo: lo.min(point), hi: hi.max(point) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub iqm: Interval,
    pub mean: Interval,
    /// Against the report baseline; absent for the baseline itself.
    pub prob_improvement: Option<Interval>,
    pub per_task: Vec<TaskSummary>,
    /// Fraction of runs above each threshold in [`AggregateReport::taus`].
    pub profile: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub baseline: Option<String>,
    pub bootstrap: BootstrapConfig,
    pub taus: Vec<f64>,
    pub methods: Vec<MethodSummary>,
}

/// Summarizes every method in `matrix`, comparing against `baseline` when
/// it is present in the matrix.
pub fn aggregate(matrix: &ScoreMatrix, baseline: Option<&str>, config: &BootstrapConfig) -> Result<AggregateReport> {
    if matrix.scores.is_empty() {
        return Err(contract("no scores to aggregate"));
    }
    let base = baseline.and_then(|b| matrix.get(b).map(|rows| (b, rows)));
    if let (Some(b), None) = (baseline, base) {
        log::warn!("baseline `{b}` has no runs; skipping probability of improvement");
    }
    let taus = tau_grid(21);
    let mut methods = Vec::new();
    for (name, rows) in &matrix.scores {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let iqm_iv = Interval::new(iqm(&flat)?, stratified_bootstrap_ci(rows, pooled_iqm, config)?);
        let mean_iv = Interval::new(mean(&flat)?, stratified_bootstrap_ci(rows, pooled_mean, config)?);
        let prob = match base {
            Some((b, base_rows)) if b != name => {
                let joint: Vec<Vec<f64>> = rows.iter().chain(base_rows.iter()).cloned().collect();
                let ci = stratified_bootstrap_ci(&joint, paired_prob_improvement, config)?;
                Some(Interval::new(paired_prob_improvement(&joint), ci))
            }
            _ => None,
        };
        let per_task = matrix
            .tasks
            .iter()
            .zip(rows)
            .map(|(task, row)| {
                Ok(TaskSummary { task: task.clone(), mean: mean(row)?, std: std_dev(row)?, seeds: row.len() })
            })
            .collect::<Result<_>>()?;
        methods.push(MethodSummary {
            method: name.clone(),
            iqm: iqm_iv,
            mean: mean_iv,
            prob_improvement: prob,
            per_task,
            profile: performance_profile(&flat, &taus),
        });
    }
    Ok(AggregateReport { baseline: base.map(|(b, _)| b.to_owned()), bootstrap: *config, taus, methods })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn iqm_examples() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap(), 4.5);
        assert_eq!(iqm(&[0.7; 9]).unwrap(), 0.7);
        assert_eq!(iqm(&[1.0, 5.0, 9.0]).unwrap(), 5.0);
        assert_eq!(iqm(&[3.0, 1.0, 2.0]).unwrap(), mean(&[1.0, 2.0, 3.0]).unwrap());
        assert!(iqm(&[]).is_err());
    }

    #[test]
    fn prob_improvement_examples() {
        assert_eq!(prob_improvement(&[0.4], &[0.4]).unwrap(), 0.5);
        assert_eq!(prob_improvement(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(prob_improvement(&[], &[1.0]).is_err());
    }

    #[test]
    fn profile_edges() {
        let s = [0.0, 0.3, 1.0, 0.8];
        assert_eq!(performance_profile(&s, &[0.0, 1.0]), vec![0.75, 0.0]);
        let taus = tau_grid(11);
        assert_eq!(taus.len(), 11);
        assert_eq!(taus[10], 1.0);
    }

    #[test]
    fn dominating_sample_has_dominating_profile() {
        let mut rng = stream_from_seed(4);
        let b: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..0.8)).collect();
        // a_i >= b_i pointwise, so P(a > τ) >= P(b > τ) for every τ
        let a: Vec<f64> = b.iter().map(|x| (x + rng.gen_range(0.0..0.2)).min(1.0)).collect();
        let taus = tau_grid(101);
        let pa = performance_profile(&a, &taus);
        let pb = performance_profile(&b, &taus);
        assert!(pa.iter().zip(&pb).all(|(x, y)| x >= y));
    }

    #[test]
    fn bootstrap_constant_data_is_degenerate() {
        let strata = vec![vec![0.6; 9], vec![0.6; 9]];
        let (lo, hi) = stratified_bootstrap_ci(&strata, pooled_iqm, &BootstrapConfig::default()).unwrap();
        assert_eq!(lo, hi);
        assert_eq!(lo, pooled_iqm(&strata));
        assert!((lo - 0.6).abs() < 1e-15);
    }

    #[test]
    fn bootstrap_is_seeded_and_brackets_the_estimate() {
        let mut rng = stream_from_seed(8);
        let strata: Vec<Vec<f64>> = (0..2).map(|_| (0..9).map(|_| rng.gen_range(0.3..1.0)).collect()).collect();
        let cfg = BootstrapConfig { seed: 3, ..BootstrapConfig::default() };
        let a = stratified_bootstrap_ci(&strata, pooled_iqm, &cfg).unwrap();
        let b = stratified_bootstrap_ci(&strata, pooled_iqm, &cfg).unwrap();
        assert_eq!(a, b);
        let point = pooled_iqm(&strata);
        assert!(a.0 <= point && point <= a.1);
    }

    #[test]
    fn bootstrap_width_shrinks_with_more_seeds() {
        let mut rng = stream_from_seed(9);
        let mut width = |n: usize| {
            let s: Vec<Vec<f64>> = vec![(0..n).map(|_| rng.gen_range(0.0..1.0)).collect()];
            let (lo, hi) = stratified_bootstrap_ci(&s, pooled_mean, &BootstrapConfig::default()).unwrap();
            hi - lo
        };
        let small = width(5);
        let large = width(200);
        assert!(large < small / 2.0, "{large} vs {small}");
    }

    #[test]
    fn aggregate_orders_intervals_and_skips_baseline() {
        let mut m = ScoreMatrix::new(vec!["t1".into(), "t2".into()]);
        m.insert("ppo_only", vec![vec![0.2, 0.5, 0.4], vec![0.1, 0.3, 0.3]]).unwrap();
        m.insert("ppo_then_tdes", vec![vec![0.6, 0.7, 0.9], vec![0.5, 0.4, 0.8]]).unwrap();
        let rep = aggregate(&m, Some("ppo_only"), &BootstrapConfig::default()).unwrap();
        assert_eq!(rep.baseline.as_deref(), Some("ppo_only"));
        for s in &rep.methods {
            assert!(s.iqm.lo <= s.iqm.point && s.iqm.point <= s.iqm.hi);
            assert!(s.mean.lo <= s.mean.point && s.mean.point <= s.mean.hi);
        }
        assert!(rep.methods[0].prob_improvement.is_none());
        let p = rep.methods[1].prob_improvement.as_ref().unwrap();
        assert!(p.point > 0.9);
        assert_eq!(rep.methods[1].per_task[0].seeds, 3);
    }

    #[test]
    fn score_matrix_rejects_ragged_or_out_of_range() {
        let mut m = ScoreMatrix::new(vec!["t".into()]);
        assert!(m.insert("a", vec![vec![]]).is_err());
        assert!(m.insert("a", vec![vec![1.2]]).is_err());
        assert!(m.insert("a", vec![vec![0.2], vec![0.3]]).is_err());
        let mut two = ScoreMatrix::new(vec!["t".into(), "u".into()]);
        assert!(two.insert("a", vec![vec![0.2, 0.1], vec![0.3]]).is_err());
    }

    proptest! {
        #[test]
        fn prob_improvement_is_complementary(a in prop::collection::vec(0u8..5, 1..12), b in prop::collection::vec(0u8..5, 1..12)) {
            let a: Vec<f64> = a.into_iter().map(|v| v as f64 / 4.0).collect();
            let b: Vec<f64> = b.into_iter().map(|v| v as f64 / 4.0).collect();
            let s = prob_improvement(&a, &b).unwrap() + prob_improvement(&b, &a).unwrap();
            prop_assert_eq!(s, 1.0);
        }

        #[test]
        fn iqm_lies_between_extremes(v in prop::collection::vec(-10.0f64..10.0, 1..40)) {
            let q = iqm(&v).unwrap();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo - 1e-12 <= q && q <= hi + 1e-12);
        }

        #[test]
        fn profiles_are_non_increasing(v in prop::collection::vec(0.0f64..=1.0, 1..30)) {
            let p = performance_profile(&v, &tau_grid(51));
            prop_assert!(p.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
