//! Feature tables, their on-disk formats, the synthetic generator, and the
//! initial labeled / pool / test partition.

mod format;
mod partition;
mod synthetic;

use std::collections::HashMap;

use crate::error::{Error, Result};

pub use format::{load_feature_store, read_binary, read_jsonl, save_feature_store, write_binary};
pub use partition::{split_initial, PartitionState};
pub use synthetic::{
    generate_synthetic, generate_synthetic_with_truth, measure_clusterability_slack, ClusterSampler,
    SyntheticDataset, SyntheticSpec,
};

pub type SampleId = u64;
pub type ClassId = u32;

/// Vectors whose norm is already this close to one are kept bit-for-bit.
const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: SampleId,
    pub label: ClassId,
    pub feature: Vec<f32>,
}

/// An immutable table of samples with L2-normalized feature vectors.
///
/// Ids are unique and strictly increasing, and every label lies in
/// `0..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    n_classes: usize,
    records: Vec<SampleRecord>,
    positions: HashMap<SampleId, usize>,
}

impl FeatureStore {
    /// Validates `records` and normalizes every feature vector to unit length.
    pub fn from_records(dim: usize, n_classes: usize, mut records: Vec<SampleRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Schema("feature dimension must be positive".into()));
        }
        let mut positions = HashMap::with_capacity(records.len());
        let mut previous: Option<SampleId> = None;
        for (pos, record) in records.iter_mut().enumerate() {
            if let Some(prev) = previous {
                if record.id <= prev {
                    return Err(Error::Schema(format!(
                        "sample ids must be strictly increasing: {} follows {}",
                        record.id, prev
                    )));
                }
            }
            previous = Some(record.id);
            if record.feature.len() != dim {
                return Err(Error::Schema(format!(
                    "sample {} has {} feature entries, expected {}",
                    record.id,
                    record.feature.len(),
                    dim
                )));
            }
            if record.label as usize >= n_classes {
                return Err(Error::Schema(format!(
                    "sample {} has label {} outside 0..{}",
                    record.id, record.label, n_classes
                )));
            }
            normalize_in_place(record.id, &mut record.feature)?;
            positions.insert(record.id, pos);
        }
        Ok(Self {
            dim,
            n_classes,
            records,
            positions,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.records.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn get(&self, id: SampleId) -> Option<&SampleRecord> {
        self.positions.get(&id).map(|&pos| &self.records[pos])
    }

    pub fn contains(&self, id: SampleId) -> bool {
        self.positions.contains_key(&id)
    }

    /// Looks up a record, turning a missing id into a data error.
    pub fn record(&self, id: SampleId) -> Result<&SampleRecord> {
        self.get(id)
            .ok_or_else(|| Error::Data(format!("sample {id} is not in the feature store")))
    }

    /// Number of samples carrying each label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for r in &self.records {
            counts[r.label as usize] += 1;
        }
        counts
    }
}

fn normalize_in_place(id: SampleId, feature: &mut [f32]) -> Result<()> {
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("sample {id} has a non-finite feature entry")));
    }
    let norm = feature
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        return Err(Error::Data(format!("sample {id} has a zero-norm feature vector")));
    }
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        for v in feature.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: SampleId, label: ClassId, feature: &[f32]) -> SampleRecord {
        SampleRecord {
            id,
            label,
            feature: feature.to_vec(),
        }
    }

    #[test]
    fn vectors_are_normalized() {
        let store =
            FeatureStore::from_records(2, 2, vec![rec(0, 0, &[3.0, 4.0]), rec(5, 1, &[0.0, 2.0])]).unwrap();
        let f = &store.get(0).unwrap().feature;
        assert!((f[0] - 0.6).abs() < 1e-7 && (f[1] - 0.8).abs() < 1e-7);
        assert_eq!(store.get(5).unwrap().feature, vec![0.0, 1.0]);
        assert_eq!(store.class_counts(), vec![1, 1]);
    }

    #[test]
    fn zero_vector_names_the_sample() {
        let err = FeatureStore::from_records(3, 1, vec![rec(42, 0, &[0.0, 0.0, 0.0])]).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("42")), "{err}");
    }

    #[test]
    fn non_finite_entries_rejected() {
        let err = FeatureStore::from_records(2, 1, vec![rec(1, 0, &[f32::NAN, 1.0])]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn ids_must_increase() {
        let err = FeatureStore::from_records(1, 1, vec![rec(2, 0, &[1.0]), rec(2, 0, &[1.0])]).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn label_range_checked() {
        let err = FeatureStore::from_records(1, 2, vec![rec(0, 2, &[1.0])]).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }
}
