//! Known-class detection by label clusterability: a pool sample is admitted
//! when every one of its K labeled neighbours carries a known class.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::Result;
use crate::feature_store::{ClassId, FeatureStore, SampleId};
use crate::knn::{KnnIndex, NeighborList};

/// Neighbour lists for a set of pool samples, keyed by id.
pub type Neighborhoods = BTreeMap<SampleId, NeighborList>;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub round: usize,
    /// Pool samples whose neighbours are all known-class.
    pub members: BTreeSet<SampleId>,
    /// Fraction of known-class neighbours for every inspected pool sample.
    pub known_fraction: BTreeMap<SampleId, f64>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Share of `neighbors` annotated with a class in `known`.
pub fn neighbor_known_fraction(neighbors: &NeighborList, known: &BTreeSet<ClassId>) -> f64 {
    if neighbors.neighbors.is_empty() {
        return 0.0;
    }
    let hits = neighbors
        .neighbors
        .iter()
        .filter(|n| n.annotation.class().is_some_and(|c| known.contains(&c)))
        .count();
    hits as f64 / neighbors.neighbors.len() as f64
}

/// Searches the index for the `k` nearest labeled neighbours of each pool sample.
pub fn compute_neighborhoods<'a, I>(
    store: &FeatureStore,
    pool: I,
    index: &KnnIndex,
    k: usize,
) -> Result<Neighborhoods>
where
    I: IntoIterator<Item = &'a SampleId>,
{
    let ids: Vec<SampleId> = pool.into_iter().copied().collect();
    ids.par_iter()
        .map(|&id| {
            let record = store.record(id)?;
            Ok((id, index.query_sample(id, &record.feature, k)?))
        })
        .collect()
}

/// Applies the all-K rule to precomputed neighbourhoods.
pub fn detect_from_neighborhoods(
    neighborhoods: &Neighborhoods,
    known: &BTreeSet<ClassId>,
    round: usize,
) -> CandidateSet {
    let known_fraction: BTreeMap<SampleId, f64> = neighborhoods
        .iter()
        .map(|(&id, list)| (id, neighbor_known_fraction(list, known)))
        .collect();
    let members = known_fraction
        .iter()
        .filter(|(_, &f)| f == 1.0)
        .map(|(&id, _)| id)
        .collect();
    CandidateSet {
        round,
        members,
        known_fraction,
    }
}

pub fn detect_known<'a, I>(
    store: &FeatureStore,
    pool: I,
    index: &KnnIndex,
    k: usize,
    known: &BTreeSet<ClassId>,
    round: usize,
) -> Result<CandidateSet>
where
    I: IntoIterator<Item = &'a SampleId>,
{
    let hoods = compute_neighborhoods(store, pool, index, k)?;
    Ok(detect_from_neighborhoods(&hoods, known, round))
}

pub fn known_neighbor_fraction(
    x: &[f32],
    index: &KnnIndex,
    k: usize,
    known: &BTreeSet<ClassId>,
) -> Result<f64> {
    Ok(neighbor_known_fraction(&index.query(x, k)?, known))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionQuality {
    /// `None` when the candidate set is empty.
    pub precision: Option<f64>,
    pub recall: f64,
}

/// Scores the detector against ground-truth labels. The inspected pool is
/// taken from `candidates.known_fraction`.
pub fn measure_detection_quality(
    candidates: &CandidateSet,
    store: &FeatureStore,
    known: &BTreeSet<ClassId>,
) -> Result<DetectionQuality> {
    let mut truly_known_members = 0usize;
    for &id in &candidates.members {
        if known.contains(&store.record(id)?.label) {
            truly_known_members += 1;
        }
    }
    let mut known_in_pool = 0usize;
    for &id in candidates.known_fraction.keys() {
        if known.contains(&store.record(id)?.label) {
            known_in_pool += 1;
        }
    }
    let precision = (!candidates.members.is_empty())
        .then(|| truly_known_members as f64 / candidates.members.len() as f64);
    let recall = if known_in_pool == 0 {
        0.0
    } else {
        truly_known_members as f64 / known_in_pool as f64
    };
    Ok(DetectionQuality { precision, recall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::{generate_synthetic_with_truth, SampleRecord, SyntheticSpec};
    use crate::knn::{Annotation, Neighbor};

    fn list(annotations: &[Annotation]) -> NeighborList {
        NeighborList {
            query_id: None,
            neighbors: annotations
                .iter()
                .enumerate()
                .map(|(i, &a)| Neighbor {
                    id: i as SampleId,
                    annotation: a,
                    distance: i as f64 * 0.1,
                })
                .collect(),
        }
    }

    #[test]
    fn fraction_examples() {
        let known = BTreeSet::from([0, 1]);
        use Annotation::*;
        assert_eq!(neighbor_known_fraction(&list(&[Class(0), Class(1)]), &known), 1.0);
        assert_eq!(neighbor_known_fraction(&list(&[Invalid, Class(4)]), &known), 0.0);
        let f = neighbor_known_fraction(&list(&[Class(0), Invalid, Class(1), Class(7), Class(0)]), &known);
        assert!((f - 0.6).abs() < 1e-15);
    }

    fn micro_store() -> FeatureStore {
        // class 0 along +x, class 1 along +y, pool points between them
        let pts: [(u32, [f32; 2]); 6] = [
            (0, [1.0, 0.0]),
            (0, [0.95, 0.1]),
            (1, [0.0, 1.0]),
            (0, [0.9, 0.2]),
            (0, [1.0, 0.05]),
            (1, [0.1, 0.9]),
        ];
        FeatureStore::from_records(
            2,
            2,
            pts.iter()
                .enumerate()
                .map(|(i, (l, f))| SampleRecord {
                    id: i as SampleId,
                    label: *l,
                    feature: f.to_vec(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn index_over(store: &FeatureStore, entries: &[(SampleId, Annotation)]) -> KnnIndex {
        KnnIndex::build(
            store.dim(),
            entries
                .iter()
                .map(|&(id, a)| (id, a, store.get(id).unwrap().feature.clone())),
        )
        .unwrap()
    }

    #[test]
    fn all_known_labeled_set_admits_whole_pool() {
        let s = micro_store();
        let idx = index_over(&s, &[(0, Annotation::Class(0)), (1, Annotation::Class(0))]);
        let pool = [3, 4, 5];
        let c = detect_known(&s, &pool, &idx, 2, &BTreeSet::from([0]), 1).unwrap();
        assert_eq!(c.members, BTreeSet::from(pool));
    }

    #[test]
    fn one_invalid_neighbor_excludes() {
        let s = micro_store();
        let idx = index_over(
            &s,
            &[
                (0, Annotation::Class(0)),
                (1, Annotation::Class(0)),
                (2, Annotation::Invalid),
            ],
        );
        // 5 sits next to the invalid sample 2; 3 and 4 have 0 and 1 nearer
        let c = detect_known(&s, &[3, 4, 5], &idx, 3, &BTreeSet::from([0]), 1).unwrap();
        assert!(!c.members.contains(&5));
        let c2 = detect_known(&s, &[3, 4, 5], &idx, 2, &BTreeSet::from([0]), 1).unwrap();
        assert_eq!(c2.members, BTreeSet::from([3, 4]));
        assert!((c2.known_fraction[&5] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quality_examples() {
        let s = micro_store();
        let known = BTreeSet::from([0]);
        let c = CandidateSet {
            round: 0,
            members: BTreeSet::from([3, 4]),
            known_fraction: BTreeMap::from([(3, 1.0), (4, 1.0), (5, 0.0)]),
        };
        let q = measure_detection_quality(&c, &s, &known).unwrap();
        assert_eq!(q.precision, Some(1.0));
        assert_eq!(q.recall, 1.0);
        let empty = CandidateSet {
            members: BTreeSet::new(),
            ..c
        };
        let q = measure_detection_quality(&empty, &s, &known).unwrap();
        assert_eq!(q.precision, None);
        assert_eq!(q.recall, 0.0);
    }

    fn mixture() -> (
        crate::feature_store::SyntheticDataset,
        Vec<(SampleId, Annotation)>,
        Vec<SampleId>,
    ) {
        let spec = SyntheticSpec {
            n_clusters: 4,
            known_clusters: 2,
            per_cluster: 60,
            dim: 6,
            cluster_separation: 1.0,
            noise_sigma: 0.35,
            label_flip_rate: 0.1,
            sigma_k: 1.0,
            seed: 21,
        };
        let d = generate_synthetic_with_truth(&spec).unwrap();
        // every third sample is annotated: known labels as classes, the rest invalid
        let mut labeled = Vec::new();
        let mut pool = Vec::new();
        for r in d.store.records() {
            if r.id % 3 == 0 {
                let a = if r.label < 2 {
                    Annotation::Class(r.label)
                } else {
                    Annotation::Invalid
                };
                labeled.push((r.id, a));
            } else {
                pool.push(r.id);
            }
        }
        (d, labeled, pool)
    }

    #[test]
    fn matches_brute_force_detector() {
        let (d, labeled, pool) = mixture();
        let known = BTreeSet::from([0, 1]);
        let idx = index_over(&d.store, &labeled);
        let k = 5;
        let got = detect_known(&d.store, &pool, &idx, k, &known, 0).unwrap();
        // independent oracle: full sort of every labeled point per query
        let mut expected = BTreeSet::new();
        for &id in &pool {
            let x = &d.store.get(id).unwrap().feature;
            let mut all: Vec<(f64, SampleId, Annotation)> = labeled
                .iter()
                .map(|&(lid, a)| {
                    let f = &d.store.get(lid).unwrap().feature;
                    let dot: f64 = f.iter().zip(x).map(|(&p, &q)| p as f64 * q as f64).sum();
                    ((1.0 - dot).clamp(0.0, 2.0), lid, a)
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if all[..k]
                .iter()
                .all(|(_, _, a)| matches!(a, Annotation::Class(c) if known.contains(c)))
            {
                expected.insert(id);
            }
        }
        assert_eq!(got.members, expected);
        assert!(!expected.is_empty() && expected.len() < pool.len());
        for &id in &pool {
            assert_eq!(got.members.contains(&id), got.known_fraction[&id] == 1.0);
        }
    }

    #[test]
    fn candidate_sets_shrink_with_k() {
        let (d, labeled, pool) = mixture();
        let known = BTreeSet::from([0, 1]);
        let idx = index_over(&d.store, &labeled);
        let mut prev = detect_known(&d.store, &pool, &idx, 1, &known, 0).unwrap().members;
        for k in 2..12 {
            let cur = detect_known(&d.store, &pool, &idx, k, &known, 0).unwrap().members;
            assert!(cur.is_subset(&prev), "K={k}");
            prev = cur;
        }
    }

    #[test]
    fn hand_counted_quality() {
        let (d, labeled, pool) = mixture();
        let known = BTreeSet::from([0, 1]);
        let idx = index_over(&d.store, &labeled);
        let c = detect_known(&d.store, &pool, &idx, 5, &known, 0).unwrap();
        let q = measure_detection_quality(&c, &d.store, &known).unwrap();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for &id in &pool {
            let truly = d.store.get(id).unwrap().label < 2;
            match (c.members.contains(&id), truly) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        assert_eq!(q.precision, Some(tp as f64 / (tp + fp) as f64));
        assert_eq!(q.recall, tp as f64 / (tp + fn_) as f64);
    }
}
