use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassId, FeatureStore, SampleId};
use crate::error::{Error, Result};

/// The evolving split of a store into labeled, pool, test, and invalid sets.
///
/// The four id sets are pairwise disjoint, and every labeled sample carries a
/// known class. `invalid` holds queried samples that turned out to belong to
/// unknown classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionState {
    pub(crate) labeled: BTreeMap<SampleId, ClassId>,
    pub(crate) pool: BTreeSet<SampleId>,
    pub(crate) test: BTreeSet<SampleId>,
    pub(crate) invalid: BTreeSet<SampleId>,
    pub(crate) known_classes: BTreeSet<ClassId>,
}

impl PartitionState {
    /// Builds a state directly, checking every invariant.
    pub fn new(
        labeled: BTreeMap<SampleId, ClassId>,
        pool: BTreeSet<SampleId>,
        test: BTreeSet<SampleId>,
        known_classes: BTreeSet<ClassId>,
    ) -> Result<Self> {
        let state = Self {
            labeled,
            pool,
            test,
            invalid: BTreeSet::new(),
            known_classes,
        };
        state.check_invariants()?;
        Ok(state)
    }

    pub fn labeled(&self) -> &BTreeMap<SampleId, ClassId> {
        &self.labeled
    }

    pub fn pool(&self) -> &BTreeSet<SampleId> {
        &self.pool
    }

    pub fn test(&self) -> &BTreeSet<SampleId> {
        &self.test
    }

    pub fn invalid(&self) -> &BTreeSet<SampleId> {
        &self.invalid
    }

    pub fn known_classes(&self) -> &BTreeSet<ClassId> {
        &self.known_classes
    }

    pub fn is_known(&self, class: ClassId) -> bool {
        self.known_classes.contains(&class)
    }

    /// Total number of ids tracked across all four sets.
    pub fn total(&self) -> usize {
        self.labeled.len() + self.pool.len() + self.test.len() + self.invalid.len()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let corrupt = |m: String| Err(Error::State(m));
        for (&id, &class) in &self.labeled {
            if !self.known_classes.contains(&class) {
                return corrupt(format!("labeled sample {id} has non-known class {class}"));
            }
            if self.pool.contains(&id) || self.test.contains(&id) || self.invalid.contains(&id) {
                return corrupt(format!("labeled sample {id} also appears in another set"));
            }
        }
        if let Some(id) = self
            .pool
            .iter()
            .find(|id| self.test.contains(id) || self.invalid.contains(id))
        {
            return corrupt(format!("pool sample {id} also appears in another set"));
        }
        if let Some(id) = self.test.iter().find(|id| self.invalid.contains(id)) {
            return corrupt(format!("test sample {id} is also marked invalid"));
        }
        Ok(())
    }
}

/// Draws the initial labeled set and the test set from the known classes.
///
/// Per known class, `floor(test_fraction * n)` samples go to the test set and
/// `max(1, floor(init_fraction * remaining))` of the rest to the labeled set.
/// Everything else, including every unknown-class sample, forms the pool.
pub fn split_initial(
    store: &FeatureStore,
    known: &BTreeSet<ClassId>,
    init_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<PartitionState> {
    if known.is_empty() {
        return Err(Error::Config("known class set is empty".into()));
    }
    if !(init_fraction > 0.0 && init_fraction < 1.0) {
        return Err(Error::Config(format!(
            "init_fraction {init_fraction} must lie in (0, 1)"
        )));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test_fraction {test_fraction} must lie in [0, 1)"
        )));
    }
    let mut by_class: BTreeMap<ClassId, Vec<SampleId>> = BTreeMap::new();
    for r in store.records() {
        by_class.entry(r.label).or_default().push(r.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = BTreeMap::new();
    let mut pool = BTreeSet::new();
    let mut test = BTreeSet::new();
    for &class in known {
        let Some(ids) = by_class.get_mut(&class) else {
            return Err(Error::Config(format!("known class {class} has no samples")));
        };
        ids.shuffle(&mut rng);
        let n_test = (test_fraction * ids.len() as f64).floor() as usize;
        let rest = ids.len() - n_test;
        if rest == 0 {
            return Err(Error::Config(format!(
                "known class {class} has no samples left after drawing the test set"
            )));
        }
        let n_labeled = ((init_fraction * rest as f64).floor() as usize).max(1);
        test.extend(&ids[..n_test]);
        labeled.extend(ids[n_test..n_test + n_labeled].iter().map(|&id| (id, class)));
        pool.extend(&ids[n_test + n_labeled..]);
    }
    for (class, ids) in &by_class {
        if !known.contains(class) {
            pool.extend(ids);
        }
    }
    PartitionState::new(labeled, pool, test, known.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::SampleRecord;

    fn store(counts: &[usize]) -> FeatureStore {
        let mut records = Vec::new();
        for (class, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let id = records.len() as SampleId;
                records.push(SampleRecord {
                    id,
                    label: class as ClassId,
                    feature: vec![1.0, id as f32],
                });
            }
        }
        FeatureStore::from_records(2, counts.len(), records).unwrap()
    }

    #[test]
    fn one_percent_of_a_hundred() {
        let s = store(&[100]);
        let p = split_initial(&s, &BTreeSet::from([0]), 0.01, 0.0, 1).unwrap();
        assert_eq!(p.labeled().len(), 1);
        assert_eq!(p.pool().len(), 99);
        assert!(p.test().is_empty());
    }

    #[test]
    fn unknown_samples_always_pooled() {
        let s = store(&[20, 20, 30, 30, 30]);
        let p = split_initial(&s, &BTreeSet::from([0, 1]), 0.5, 0.1, 2).unwrap();
        for r in s.records() {
            if r.label >= 2 {
                assert!(p.pool().contains(&r.id));
            }
        }
        assert!(p.test().iter().all(|id| s.get(*id).unwrap().label < 2));
        // 20 per known class: 2 test, 9 labeled
        assert_eq!(p.test().len(), 4);
        assert_eq!(p.labeled().len(), 18);
        assert_eq!(p.total(), s.n_samples());
    }

    #[test]
    fn same_seed_same_partition() {
        let s = store(&[50, 50, 50]);
        let known = BTreeSet::from([0, 2]);
        assert_eq!(
            split_initial(&s, &known, 0.1, 0.2, 9).unwrap(),
            split_initial(&s, &known, 0.1, 0.2, 9).unwrap()
        );
    }

    #[test]
    fn empty_known_class_is_config_error() {
        let s = store(&[10, 0, 10]);
        let err = split_initial(&s, &BTreeSet::from([1]), 0.1, 0.0, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn fractions_validated() {
        let s = store(&[10]);
        let known = BTreeSet::from([0]);
        assert!(split_initial(&s, &known, 0.0, 0.0, 0).is_err());
        assert!(split_initial(&s, &known, 0.5, 1.0, 0).is_err());
    }
}
