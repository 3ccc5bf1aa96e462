//! The detection-error bound and a Monte-Carlo check of it.
//!
//! With `q = C * r_K^alpha`, the bound is
//!
//! ```text
//!   sum_{k = ceil((K-1)/2)+1}^{K}   C(K,k) e^k (1-e)^(K-k) q^k
//! + sum_{k = 0}^{floor((K+1)/2)-1}  C(K,k) e^k (1-e)^(K-k) q^(K-k)
//! ```
//!
//! The simulator measures the error the bound is about: an unknown-class
//! query whose K labeled neighbours all carry known labels, so the all-K rule
//! wrongly admits it.
//!
//! On the synthetic clusters the smoothness assumption holds by construction.
//! Two points of one cluster share a true label, and points of different
//! clusters are at least `gap = cross_cluster_gap()` apart. Any `alpha` then
//! works with `C = gap^-alpha`, because `C * rho^alpha >= 1` whenever the true
//! labels can differ.

use std::collections::BTreeSet;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::neighbor_known_fraction;
use crate::error::{Error, Result};
use crate::feature_store::{ClassId, ClusterSampler, SampleId, SyntheticSpec};
use crate::knn::{Annotation, KnnIndex};

/// Exponent used with generator-derived constants.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Largest K whose binomial coefficients all fit in a `u128`.
pub const MAX_BOUND_K: usize = 128;

pub const MIN_TRIALS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub k: usize,
    /// Labeling-error rate.
    pub e: f64,
    pub c_smooth: f64,
    pub alpha: f64,
    pub r_k: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_BOUND_K).contains(&self.k) {
            return Err(Error::Config(format!(
                "K must lie in [1, {MAX_BOUND_K}], got {}",
                self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.e) {
            return Err(Error::Config(format!("e must lie in [0, 1], got {}", self.e)));
        }
        if !(self.c_smooth > 0.0 && self.c_smooth.is_finite()) {
            return Err(Error::Config(format!(
                "C must be positive, got {}",
                self.c_smooth
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.r_k >= 0.0 && self.r_k.is_finite()) {
            return Err(Error::Config(format!(
                "r_K must be non-negative, got {}",
                self.r_k
            )));
        }
        Ok(())
    }

    /// `C * r_K^alpha`.
    pub fn smoothness_term(&self) -> f64 {
        self.c_smooth * self.r_k.powf(self.alpha)
    }
}

/// Indices of the first sum: `ceil((K-1)/2) + 1 ..= K`.
pub fn first_sum_range(k: usize) -> RangeInclusive<usize> {
    (k.saturating_sub(1)).div_ceil(2) + 1..=k
}

/// Indices of the second sum: `0 ..= floor((K+1)/2) - 1`.
pub fn second_sum_range(k: usize) -> RangeInclusive<usize> {
    // floor((K+1)/2) == ceil(K/2)
    0..=k.div_ceil(2).saturating_sub(1)
}

/// Row `n` of Pascal's triangle. Built by addition, so nothing overflows
/// for `n <= MAX_BOUND_K`.
pub fn binomial_row(n: usize) -> Vec<u128> {
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(1);
        next.extend(row.windows(2).map(|w| w[0] + w[1]));
        next.push(1);
        row = next;
    }
    row
}

pub fn detection_error_bound(p: &BoundParams) -> Result<f64> {
    p.validate()?;
    let k = p.k;
    let q = p.smoothness_term();
    let binom = binomial_row(k);
    let weight = |j: usize| binom[j] as f64 * p.e.powi(j as i32) * (1.0 - p.e).powi((k - j) as i32);
    let first: f64 = first_sum_range(k).map(|j| weight(j) * q.powi(j as i32)).sum();
    let second: f64 = second_sum_range(k)
        .map(|j| weight(j) * q.powi((k - j) as i32))
        .sum();
    Ok((first + second).max(0.0))
}

/// Smoothness constant of the synthetic construction for a given exponent.
pub fn generator_constant(spec: &SyntheticSpec, alpha: f64) -> Result<f64> {
    let gap = spec.cross_cluster_gap();
    if gap <= 0.0 {
        return Err(Error::Config(
            "clusters may touch (noise cap reaches the other centres); no finite smoothness constant".into(),
        ));
    }
    Ok(gap.powf(-alpha))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationResult {
    pub trials: usize,
    pub errors: usize,
    pub empirical_error: f64,
    /// Binomial standard error of `empirical_error`.
    pub stderr: f64,
    /// Largest K-th neighbour distance seen in any trial.
    pub r_k_max: f64,
    /// Share of trials whose neighbourhood held a point of another true cluster.
    pub impure_fraction: f64,
}

struct Trial {
    error: bool,
    radius: f64,
    impure: bool,
}

fn run_trial(
    sampler: &ClusterSampler,
    spec: &SyntheticSpec,
    known: &BTreeSet<ClassId>,
    k: usize,
    seed: u64,
    trial: usize,
) -> Result<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let mut truth = Vec::with_capacity(spec.n_clusters * spec.per_cluster);
    let mut items = Vec::with_capacity(truth.capacity());
    for cluster in 0..spec.n_clusters as ClassId {
        for _ in 0..spec.per_cluster {
            let feature = sampler.sample_unit_point(cluster, &mut rng);
            let observed = sampler.observe_label(cluster, &mut rng);
            items.push((truth.len() as SampleId, Annotation::Class(observed), feature));
            truth.push(cluster);
        }
    }
    let index = KnnIndex::build(spec.dim, items)?;
    let query_cluster = rng.random_range(spec.known_clusters..spec.n_clusters) as ClassId;
    let x = sampler.sample_unit_point(query_cluster, &mut rng);
    let list = index.query(&x, k)?;
    let impure = list
        .neighbors
        .iter()
        .any(|n| truth[n.id as usize] != query_cluster);
    Ok(Trial {
        error: neighbor_known_fraction(&list, known) == 1.0,
        radius: list.radius(),
        impure,
    })
}

/// Runs `trials` independent detection episodes. Each draws a labeled set of
/// `per_cluster` points from every cluster with observed labels flipped at
/// `spec.label_flip_rate`, then an unknown-class query, and counts an error
/// when the all-K rule admits the query.
pub fn simulate_detection_error(
    spec: &SyntheticSpec,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<SimulationResult> {
    if trials < MIN_TRIALS {
        return Err(Error::Config(format!(
            "trials must be at least {MIN_TRIALS}, got {trials}"
        )));
    }
    if k < 1 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if spec.known_clusters == 0 || spec.known_clusters == spec.n_clusters {
        return Err(Error::Config(
            "simulation needs at least one known and one unknown cluster".into(),
        ));
    }
    let sampler = ClusterSampler::new(spec)?;
    let known: BTreeSet<ClassId> = spec.known_classes().into_iter().collect();
    let outcomes: Vec<Trial> = (0..trials)
        .into_par_iter()
        .map(|t| run_trial(&sampler, spec, &known, k, seed, t))
        .collect::<Result<_>>()?;
    let errors = outcomes.iter().filter(|t| t.error).count();
    let impure = outcomes.iter().filter(|t| t.impure).count();
    let r_k_max = outcomes.iter().map(|t| t.radius).fold(0.0, f64::max);
    let n = trials as f64;
    let p = errors as f64 / n;
    Ok(SimulationResult {
        trials,
        errors,
        empirical_error: p,
        stderr: (p * (1.0 - p) / n).sqrt(),
        r_k_max,
        impure_fraction: impure as f64 / n,
    })
}

/// The synthetic construction used for bound verification: six orthogonal
/// clusters (three known), with noise small enough that clusters never touch.
pub fn default_theory_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_clusters: 6,
        known_clusters: 3,
        per_cluster: 20,
        dim: 16,
        cluster_separation: 1.0,
        noise_sigma: 0.05,
        label_flip_rate: 0.0,
        sigma_k: 1.0,
        seed: 0,
    }
}

/// A bound-verification grid. Each `(K, e)` cell runs one simulation with
/// `spec.label_flip_rate` replaced by `e`; the optional axes then override
/// the constants used in the bound. Without overrides, `alpha` is
/// [`DEFAULT_ALPHA`], `C` comes from [`generator_constant`] and `r_K` is the
/// largest radius the simulation observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundGrid {
    pub k: Vec<usize>,
    pub e: Vec<f64>,
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub c_smooth: Option<Vec<f64>>,
    #[serde(default)]
    pub r_k: Option<Vec<f64>>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_theory_spec")]
    pub spec: SyntheticSpec,
}

fn default_trials() -> usize {
    10_000
}

impl Default for BoundGrid {
    fn default() -> Self {
        Self {
            k: vec![1, 3, 5, 7],
            e: vec![0.0, 0.05, 0.1],
            alpha: None,
            c_smooth: None,
            r_k: None,
            trials: default_trials(),
            seed: 0,
            spec: default_theory_spec(),
        }
    }
}

impl BoundGrid {
    pub fn validate(&self) -> Result<()> {
        if let Some(&k) = self.k.iter().find(|&&k| !(1..=MAX_BOUND_K).contains(&k)) {
            return Err(Error::Config(format!(
                "grid K must lie in [1, {MAX_BOUND_K}], got {k}"
            )));
        }
        if let Some(e) = self.e.iter().find(|e| !(0.0..0.5).contains(*e)) {
            return Err(Error::Config(format!("grid e must lie in [0, 0.5), got {e}")));
        }
        if self.trials < MIN_TRIALS {
            return Err(Error::Config(format!("trials must be at least {MIN_TRIALS}")));
        }
        let mut probe = self.spec.clone();
        probe.label_flip_rate = 0.0;
        probe.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub e: f64,
    #[serde(rename = "C")]
    pub c_smooth: f64,
    pub alpha: f64,
    #[serde(rename = "r_K")]
    pub r_k: f64,
    pub bound: f64,
    pub empirical: f64,
    pub stderr: f64,
    pub pass: bool,
    /// The bound exceeds 1 and says nothing.
    pub vacuous: bool,
    #[serde(skip)]
    pub impure_fraction: f64,
}

pub fn verify_bound_grid(grid: &BoundGrid) -> Result<Vec<BoundRow>> {
    grid.validate()?;
    let alphas = grid.alpha.clone().unwrap_or_else(|| vec![DEFAULT_ALPHA]);
    let mut rows = Vec::new();
    for &k in &grid.k {
        for &e in &grid.e {
            let spec = SyntheticSpec {
                label_flip_rate: e,
                ..grid.spec.clone()
            };
            let sim = simulate_detection_error(&spec, k, grid.trials, grid.seed)?;
            let radii = grid.r_k.clone().unwrap_or_else(|| vec![sim.r_k_max]);
            for &alpha in &alphas {
                let constants = match &grid.c_smooth {
                    Some(c) => c.clone(),
                    None => vec![generator_constant(&spec, alpha)?],
                };
                for &c_smooth in &constants {
                    for &r_k in &radii {
                        let params = BoundParams {
                            k,
                            e,
                            c_smooth,
                            alpha,
                            r_k,
                        };
                        let bound = detection_error_bound(&params)?;
                        rows.push(BoundRow {
                            k,
                            e,
                            c_smooth,
                            alpha,
                            r_k,
                            bound,
                            empirical: sim.empirical_error,
                            stderr: sim.stderr,
                            pass: sim.empirical_error <= bound + 3.0 * sim.stderr,
                            vacuous: bound > 1.0,
                            impure_fraction: sim.impure_fraction,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub const BOUND_CSV_HEADER: [&str; 10] = [
    "K",
    "e",
    "C",
    "alpha",
    "r_K",
    "bound",
    "empirical",
    "stderr",
    "pass",
    "vacuous",
];

pub fn write_bound_csv<W: Write>(rows: &[BoundRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(BOUND_CSV_HEADER)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn save_bound_csv(rows: &[BoundRow], path: &Path) -> Result<()> {
    crate::io::write_atomic(path, |f| {
        write_bound_csv(rows, &mut *f).map_err(std::io::Error::other)
    })
}
