//! Exact K-nearest-neighbour search under cosine distance.
//!
//! Every query scans the whole index. Results are ordered by ascending
//! distance with ties broken by ascending sample id, so the answer never
//! depends on insertion order.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use crate::error::{Error, Result};
use crate::feature_store::{ClassId, SampleId};

/// `1 - <u, v>` for unit vectors, clamped to `[0, 2]`.
///
/// # Panics
///
/// If the slices differ in length.
pub fn cosine_distance(u: &[f32], v: &[f32]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine_distance: dimension mismatch");
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
    (1.0 - dot).clamp(0.0, 2.0)
}

/// What the annotator said about an indexed sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Annotation {
    Class(ClassId),
    /// Queried, found to belong to no known class.
    Invalid,
}

impl Annotation {
    pub fn class(self) -> Option<ClassId> {
        match self {
            Annotation::Class(c) => Some(c),
            Annotation::Invalid => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: SampleId,
    pub annotation: Annotation,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub query_id: Option<SampleId>,
    /// Nearest first; length `min(k, index size)`.
    pub neighbors: Vec<Neighbor>,
}

impl NeighborList {
    /// Distance to the farthest returned neighbour.
    pub fn radius(&self) -> f64 {
        self.neighbors.last().map_or(0.0, |n| n.distance)
    }
}

#[derive(Debug, Clone)]
struct Entry {
    id: SampleId,
    annotation: Annotation,
    feature: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct KnnIndex {
    dim: usize,
    entries: Vec<Entry>,
    ids: HashSet<SampleId>,
}

impl KnnIndex {
    pub fn build<I>(dim: usize, items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (SampleId, Annotation, Vec<f32>)>,
    {
        let mut index = Self {
            dim,
            entries: Vec::new(),
            ids: HashSet::new(),
        };
        for (id, annotation, feature) in items {
            index.insert(id, annotation, feature)?;
        }
        if index.entries.is_empty() {
            return Err(Error::State(
                "cannot build a neighbour index over an empty labeled set".into(),
            ));
        }
        Ok(index)
    }

    /// Adds one sample. Querying afterwards is identical to a fresh build that
    /// includes it.
    pub fn insert(&mut self, id: SampleId, annotation: Annotation, feature: Vec<f32>) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::Contract(format!(
                "sample {id} has dimension {}, index expects {}",
                feature.len(),
                self.dim
            )));
        }
        if !self.ids.insert(id) {
            return Err(Error::State(format!("sample {id} is already indexed")));
        }
        self.entries.push(Entry {
            id,
            annotation,
            feature,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, id: SampleId) -> bool {
        self.ids.contains(&id)
    }

    pub fn query(&self, x: &[f32], k: usize) -> Result<NeighborList> {
        self.check_query(x, k)?;
        Ok(self.scan(x, k, None))
    }

    /// Like [`query`](Self::query) but records `query_id` in the result.
    pub fn query_sample(&self, query_id: SampleId, x: &[f32], k: usize) -> Result<NeighborList> {
        let mut list = self.query(x, k)?;
        list.query_id = Some(query_id);
        Ok(list)
    }

    /// Neighbours of an indexed sample, skipping the sample itself.
    pub(crate) fn query_excluding(&self, x: &[f32], k: usize, exclude: SampleId) -> NeighborList {
        let mut list = self.scan(x, k, Some(exclude));
        list.query_id = Some(exclude);
        list
    }

    fn check_query(&self, x: &[f32], k: usize) -> Result<()> {
        if k < 1 {
            return Err(Error::Contract("K must be at least 1".into()));
        }
        if x.len() != self.dim {
            return Err(Error::Contract(format!(
                "query has dimension {}, index expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn scan(&self, x: &[f32], k: usize, exclude: Option<SampleId>) -> NeighborList {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        for (pos, e) in self.entries.iter().enumerate() {
            if Some(e.id) == exclude {
                continue;
            }
            let c = Candidate {
                distance: cosine_distance(x, &e.feature),
                id: e.id,
                pos,
            };
            if heap.len() < k {
                heap.push(c);
            } else if c < *heap.peek().expect("heap holds k > 0 items") {
                heap.pop();
                heap.push(c);
            }
        }
        let neighbors = heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                id: c.id,
                annotation: self.entries[c.pos].annotation,
                distance: c.distance,
            })
            .collect();
        NeighborList {
            query_id: None,
            neighbors,
        }
    }
}

/// Max-heap key: the worst kept neighbour sits on top.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    distance: f64,
    id: SampleId,
    pos: usize,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}
