//! The inconsistency score between a classifier's prediction and the label
//! histogram of a sample's labeled neighbours, plus the entropy used by the
//! uncertainty baselines. All logarithms are natural.
//!
//! With neighbour counts `V` and prediction `P`, the score is the
//! cross-entropy `-sum_c P[c] * log softmax(V)[c]`, which simplifies to
//! `logsumexp(V) - <P, V>`. Softmax runs over raw counts at temperature one,
//! so the score's range grows with K.

use crate::class_map::ClassMap;
use crate::error::{Error, Result};
use crate::feature_store::SampleId;
use crate::knn::{Annotation, NeighborList};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub id: SampleId,
    /// Classifier prediction over the known classes.
    pub prediction: Vec<f64>,
    /// Neighbour label counts over the known classes.
    pub counts: Vec<u32>,
    /// `softmax(counts)`.
    pub normalized: Vec<f64>,
    pub score: f64,
}

/// Counts labels given as dense class indices.
pub fn count_labels(labels: &[usize], n_classes: usize) -> Result<Vec<u32>> {
    let mut v = vec![0u32; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::Contract(format!("label index {l} outside 0..{n_classes}")));
        }
        v[l] += 1;
    }
    Ok(v)
}

/// Per-known-class neighbour counts. Every neighbour must carry a known class.
pub fn neighbor_histogram(neighbors: &NeighborList, classes: &ClassMap) -> Result<Vec<u32>> {
    let mut v = vec![0u32; classes.len()];
    for n in &neighbors.neighbors {
        let idx = match n.annotation {
            Annotation::Class(c) => classes.try_index_of(c)?,
            Annotation::Invalid => {
                return Err(Error::Contract(format!(
                    "neighbour {} is marked invalid and cannot be counted",
                    n.id
                )))
            }
        };
        v[idx] += 1;
    }
    Ok(v)
}

/// Per-known-class counts that silently skip invalid or non-known neighbours.
pub fn known_neighbor_histogram(neighbors: &NeighborList, classes: &ClassMap) -> Vec<u32> {
    let mut v = vec![0u32; classes.len()];
    for n in &neighbors.neighbors {
        if let Some(idx) = n.annotation.class().and_then(|c| classes.index_of(c)) {
            v[idx] += 1;
        }
    }
    v
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| x - lse).collect()
}

/// `exp(v[c]) / sum_j exp(v[j])`, computed after subtracting the maximum.
pub fn softmax_normalize(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn as_f64(counts: &[u32]) -> Vec<f64> {
    counts.iter().map(|&c| f64::from(c)).collect()
}

/// Cross-entropy of `softmax(counts)` under the prediction `p`.
pub fn inconsistency_score(p: &[f64], counts: &[u32]) -> Result<f64> {
    inconsistency_score_real(p, &as_f64(counts))
}

/// [`inconsistency_score`] for real-valued counts.
pub fn inconsistency_score_real(p: &[f64], v: &[f64]) -> Result<f64> {
    if p.len() != v.len() {
        return Err(Error::Contract(format!(
            "prediction has {} classes but the histogram has {}",
            p.len(),
            v.len()
        )));
    }
    let log_v = log_softmax(v);
    Ok(-p
        .iter()
        .zip(&log_v)
        .filter(|(&pc, _)| pc != 0.0)
        .map(|(pc, lv)| pc * lv)
        .sum::<f64>())
}

/// Shannon entropy in nats, with `0 * log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Builds the full score record for one candidate.
pub fn score_candidate(
    id: SampleId,
    prediction: Vec<f64>,
    neighbors: &NeighborList,
    classes: &ClassMap,
) -> Result<ScoreRecord> {
    let counts = neighbor_histogram(neighbors, classes)?;
    let score = inconsistency_score(&prediction, &counts)?;
    let normalized = softmax_normalize(&as_f64(&counts));
    Ok(ScoreRecord {
        id,
        prediction,
        counts,
        normalized,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::Neighbor;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn closed_form(p: &[f64], v: &[u32]) -> f64 {
        let v = as_f64(v);
        log_sum_exp(&v) - p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(count_labels(&[0, 0, 0, 0], 2).unwrap(), vec![4, 0]);
        assert_eq!(count_labels(&[0, 1, 1, 2], 3).unwrap(), vec![1, 2, 1]);
        assert_eq!(count_labels(&[], 3).unwrap(), vec![0, 0, 0]);
        assert!(matches!(count_labels(&[3], 3), Err(Error::Contract(_))));
    }

    #[test]
    fn neighbor_histogram_maps_classes() {
        let classes = ClassMap::new(&BTreeSet::from([2, 5]));
        let mk = |a: Annotation| Neighbor {
            id: 0,
            annotation: a,
            distance: 0.0,
        };
        let list = NeighborList {
            query_id: None,
            neighbors: vec![
                mk(Annotation::Class(5)),
                mk(Annotation::Class(2)),
                mk(Annotation::Class(5)),
            ],
        };
        assert_eq!(neighbor_histogram(&list, &classes).unwrap(), vec![1, 2]);
        let bad = NeighborList {
            query_id: None,
            neighbors: vec![mk(Annotation::Invalid)],
        };
        assert!(matches!(
            neighbor_histogram(&bad, &classes),
            Err(Error::Contract(_))
        ));
        assert_eq!(known_neighbor_histogram(&bad, &classes), vec![0, 0]);
        let unknown = NeighborList {
            query_id: None,
            neighbors: vec![mk(Annotation::Class(3))],
        };
        assert!(neighbor_histogram(&unknown, &classes).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_normalize(&[2.0, 2.0]), vec![0.5, 0.5]);
        let s = softmax_normalize(&[4.0, 0.0]);
        assert!(close(s[0], 0.982_013_790_037_908_4, 1e-15));
        assert!(close(s[1], 0.017_986_209_962_091_56, 1e-15));
        let s = softmax_normalize(&[1000.0, 0.0]);
        assert!(s.iter().all(|x| x.is_finite()));
        assert_eq!(s[0], 1.0);
        assert!(s[1] >= 0.0 && s[1] < 1e-300);
    }

    #[test]
    fn score_examples() {
        let ln2 = std::f64::consts::LN_2;
        for p in [[1.0, 0.0], [0.3, 0.7], [0.5, 0.5]] {
            assert!(close(inconsistency_score(&p, &[2, 2]).unwrap(), ln2, 1e-15));
        }
        assert!(close(
            inconsistency_score(&[1.0, 0.0], &[4, 0]).unwrap(),
            0.018_149_927_917_809_74,
            1e-15
        ));
        assert!(close(
            inconsistency_score(&[1.0, 0.0], &[0, 4]).unwrap(),
            4.018_149_927_917_81,
            1e-14
        ));
        assert!(matches!(
            inconsistency_score(&[1.0], &[1, 2]),
            Err(Error::Contract(_))
        ));
        // saturated counts stay finite
        assert!(inconsistency_score(&[0.5, 0.5], &[1000, 0]).unwrap().is_finite());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!(close(entropy(&[0.25; 4]), 4f64.ln(), 1e-15));
        assert!(close(entropy(&[0.9, 0.1]), 0.325_082_973_391_448_2, 1e-15));
    }

    fn prob_and_counts() -> impl Strategy<Value = (Vec<f64>, Vec<u32>)> {
        (2usize..=10, 1u32..=20).prop_flat_map(|(c, k)| {
            (
                proptest::collection::vec(0.0f64..1.0, c),
                proptest::collection::vec(0usize..c, k as usize),
            )
                .prop_map(move |(raw, labels)| {
                    let total: f64 = raw.iter().sum::<f64>() + 1e-12;
                    let p = raw.iter().map(|x| (x + 1e-12 / c as f64) / total).collect();
                    (p, count_labels(&labels, c).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn prop_closed_form_and_nonnegative((p, v) in prob_and_counts()) {
            let s = inconsistency_score(&p, &v).unwrap();
            prop_assert!((s - closed_form(&p, &v)).abs() <= 1e-9);
            prop_assert!(s >= 0.0);
        }

        #[test]
        fn prop_shift_invariant((p, v) in prob_and_counts(), shift in 0u32..50) {
            let shifted: Vec<u32> = v.iter().map(|x| x + shift).collect();
            let a = inconsistency_score(&p, &v).unwrap();
            let b = inconsistency_score(&p, &shifted).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn prop_one_hot_at_argmax_is_minimal((p, v) in prob_and_counts()) {
            let c = v.len();
            let vf = as_f64(&v);
            let argmax = (0..c).fold(0, |best, i| if v[i] > v[best] { i } else { best });
            let normalized = softmax_normalize(&vf);
            let nargmax = (0..c).fold(0, |best, i| if normalized[i] > normalized[best] { i } else { best });
            prop_assert_eq!(argmax, nargmax);
            let mut onehot = vec![0.0; c];
            onehot[argmax] = 1.0;
            let best = inconsistency_score(&onehot, &v).unwrap();
            prop_assert!(best <= inconsistency_score(&p, &v).unwrap() + 1e-12);
            for i in 0..c {
                let mut other = vec![0.0; c];
                other[i] = 1.0;
                prop_assert!(best <= inconsistency_score(&other, &v).unwrap() + 1e-12);
            }
        }

        #[test]
        fn prop_normalized_is_strictly_positive((_p, v) in prob_and_counts()) {
            let s = softmax_normalize(&as_f64(&v));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(s.iter().all(|&x| x > 0.0));
        }
    }
}
