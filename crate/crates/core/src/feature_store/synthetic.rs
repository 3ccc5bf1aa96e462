//! Gaussian-cluster generator with controlled label noise.
//!
//! Cluster `c` is centred at `cluster_separation * e_c` (the `c`-th basis
//! vector), so every pair of centres is orthogonal. Each point adds isotropic
//! Gaussian noise of scale `noise_sigma` whose norm is capped at
//! [`SyntheticSpec::support_radius`]. The cap bounds how far a point can drift
//! from its centre, which gives a hard lower bound on the cosine distance
//! between points of different clusters ([`SyntheticSpec::cross_cluster_gap`]).
//!
//! Observed labels equal the cluster index, except that with probability
//! `label_flip_rate` the label is replaced by a uniformly random other class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassId, FeatureStore, SampleId, SampleRecord};
use crate::error::{Error, Result};
use crate::knn::{Annotation, KnnIndex};

/// Extra standard deviations allowed beyond the typical noise norm `sigma * sqrt(dim)`.
const NOISE_CAP_SLACK: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    /// Clusters `0..known_clusters` are the known classes.
    pub known_clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub label_flip_rate: f64,
    /// Target clusterability slack: the largest tolerated fraction of samples
    /// whose K nearest neighbours include another cluster.
    #[serde(default = "default_sigma_k")]
    pub sigma_k: f64,
    pub seed: u64,
}

fn default_sigma_k() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.n_clusters == 0 {
            return bad("n_clusters", "must be at least 1");
        }
        if self.known_clusters > self.n_clusters {
            return bad("known_clusters", "must not exceed n_clusters");
        }
        if self.per_cluster == 0 {
            return bad("per_cluster", "must be at least 1");
        }
        if self.dim < self.n_clusters {
            return bad("dim", "must be at least n_clusters (centres are orthogonal)");
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return bad("cluster_separation", "must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be non-negative");
        }
        if !(0.0..0.5).contains(&self.label_flip_rate) {
            return bad("label_flip_rate", "must lie in [0, 0.5)");
        }
        if self.label_flip_rate > 0.0 && self.n_clusters < 2 {
            return bad("label_flip_rate", "flips need at least two clusters");
        }
        if !(0.0..=1.0).contains(&self.sigma_k) {
            return bad("sigma_k", "must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn known_classes(&self) -> Vec<ClassId> {
        (0..self.known_clusters as ClassId).collect()
    }

    /// Largest norm a noise vector may take.
    pub fn support_radius(&self) -> f64 {
        self.noise_sigma * ((self.dim as f64).sqrt() + NOISE_CAP_SLACK)
    }

    /// Largest angle (radians) between a point and its cluster centre.
    pub fn max_center_angle(&self) -> f64 {
        let ratio = self.support_radius() / self.cluster_separation;
        if ratio >= 1.0 {
            std::f64::consts::PI
        } else {
            ratio.asin()
        }
    }

    /// Lower bound on the cosine distance between any two points drawn from
    /// different clusters; zero when the supports may touch.
    pub fn cross_cluster_gap(&self) -> f64 {
        let spread = 2.0 * self.max_center_angle();
        if spread >= std::f64::consts::FRAC_PI_2 {
            0.0
        } else {
            1.0 - spread.sin()
        }
    }

    /// Upper bound on the cosine distance between two points of one cluster.
    pub fn within_cluster_diameter(&self) -> f64 {
        1.0 - (2.0 * self.max_center_angle()).min(std::f64::consts::PI).cos()
    }
}

/// Draws points and noisy labels for the clusters of a [`SyntheticSpec`].
#[derive(Debug, Clone)]
pub struct ClusterSampler {
    n_clusters: usize,
    dim: usize,
    separation: f64,
    sigma: f64,
    cap: f64,
    flip_rate: f64,
}

impl ClusterSampler {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            n_clusters: spec.n_clusters,
            dim: spec.dim,
            separation: spec.cluster_separation,
            sigma: spec.noise_sigma,
            cap: spec.support_radius(),
            flip_rate: spec.label_flip_rate,
        })
    }

    /// An unnormalized point from `cluster`.
    pub fn sample_point<R: Rng + ?Sized>(&self, cluster: ClassId, rng: &mut R) -> Vec<f64> {
        let mut noise: Vec<f64> = (0..self.dim)
            .map(|_| self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.cap {
            let scale = self.cap / norm;
            noise.iter_mut().for_each(|v| *v *= scale);
        }
        noise[cluster as usize] += self.separation;
        noise
    }

    /// A unit-norm point from `cluster`, in the precision the index stores.
    pub fn sample_unit_point<R: Rng + ?Sized>(&self, cluster: ClassId, rng: &mut R) -> Vec<f32> {
        let p = self.sample_point(cluster, rng);
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        p.iter().map(|v| (v / norm) as f32).collect()
    }

    /// The observed label of a sample whose true cluster is `cluster`.
    pub fn observe_label<R: Rng + ?Sized>(&self, cluster: ClassId, rng: &mut R) -> ClassId {
        let u: f64 = rng.random();
        if u < self.flip_rate {
            let other = rng.random_range(0..self.n_clusters as ClassId - 1);
            if other >= cluster {
                other + 1
            } else {
                other
            }
        } else {
            cluster
        }
    }
}

/// A generated store together with each sample's true cluster.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub store: FeatureStore,
    /// True cluster of each record, parallel to `store.records()`.
    pub clusters: Vec<ClassId>,
}

pub fn generate_synthetic_with_truth(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let sampler = ClusterSampler::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_clusters * spec.per_cluster;
    let mut records = Vec::with_capacity(n);
    let mut clusters = Vec::with_capacity(n);
    for cluster in 0..spec.n_clusters as ClassId {
        for _ in 0..spec.per_cluster {
            let feature = sampler
                .sample_point(cluster, &mut rng)
                .into_iter()
                .map(|v| v as f32)
                .collect();
            let label = sampler.observe_label(cluster, &mut rng);
            records.push(SampleRecord {
                id: records.len() as SampleId,
                label,
                feature,
            });
            clusters.push(cluster);
        }
    }
    let store = FeatureStore::from_records(spec.dim, spec.n_clusters, records)?;
    Ok(SyntheticDataset { store, clusters })
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureStore> {
    generate_synthetic_with_truth(spec).map(|d| d.store)
}

/// Fraction of samples whose `k` nearest other samples include a different
/// true cluster.
pub fn measure_clusterability_slack(dataset: &SyntheticDataset, k: usize) -> Result<f64> {
    let store = &dataset.store;
    if store.n_samples() < 2 {
        return Ok(0.0);
    }
    let index = KnnIndex::build(
        store.dim(),
        store
            .records()
            .iter()
            .zip(&dataset.clusters)
            .map(|(r, &c)| (r.id, Annotation::Class(c), r.feature.clone())),
    )?;
    let impure = store
        .records()
        .iter()
        .zip(&dataset.clusters)
        .filter(|(r, &c)| {
            let neighbors = index.query_excluding(&r.feature, k, r.id);
            neighbors
                .neighbors
                .iter()
                .any(|n| n.annotation != Annotation::Class(c))
        })
        .count();
    Ok(impure as f64 / store.n_samples() as f64)
}
