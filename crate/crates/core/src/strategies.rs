//! Query strategies. Each returns up to `budget` distinct pool ids.
//!
//! Ties in every ranking fall back to ascending sample id.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class_map::ClassMap;
use crate::detection::{compute_neighborhoods, detect_from_neighborhoods, CandidateSet, Neighborhoods};
use crate::error::{Error, Result};
use crate::feature_store::{FeatureStore, PartitionState, SampleId};
use crate::knn::KnnIndex;
use crate::model::{Classifier, ExternalPredictions};
use crate::scoring::{entropy, inconsistency_score, known_neighbor_histogram, score_candidate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Neat,
    NeatPassive,
    Random,
    Uncertainty,
    Certainty,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Neat => "neat",
            StrategyKind::NeatPassive => "neat_passive",
            StrategyKind::Random => "random",
            StrategyKind::Uncertainty => "uncertainty",
            StrategyKind::Certainty => "certainty",
        }
    }

    /// Whether the strategy always restricts itself to detected candidates.
    pub fn uses_detection(self) -> bool {
        matches!(self, StrategyKind::Neat | StrategyKind::NeatPassive)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "neat" => StrategyKind::Neat,
            "neat_passive" => StrategyKind::NeatPassive,
            "random" => StrategyKind::Random,
            "uncertainty" => StrategyKind::Uncertainty,
            "certainty" => StrategyKind::Certainty,
            other => return Err(Error::Config(format!("unknown strategy {other:?}"))),
        })
    }
}

/// Optional candidate filter for the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prefilter {
    #[default]
    None,
    KnownDetection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub round: usize,
    pub ids: Vec<SampleId>,
    /// Selection score of each id, when the strategy ranks by one.
    pub scores: Option<Vec<f64>>,
}

/// Where prediction vectors come from.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Classifier),
    External(&'a ExternalPredictions),
}

impl Predictor<'_> {
    pub fn predict(&self, store: &FeatureStore, id: SampleId) -> Result<Vec<f64>> {
        match self {
            Predictor::Model(clf) => clf.predict_proba(&store.record(id)?.feature),
            Predictor::External(ext) => Ok(ext.get(id)?.to_vec()),
        }
    }
}

/// Everything a strategy may look at in one round.
#[derive(Debug, Clone, Copy)]
pub struct SelectionContext<'a> {
    pub store: &'a FeatureStore,
    pub state: &'a PartitionState,
    pub index: &'a KnnIndex,
    pub predictor: Predictor<'a>,
    pub classes: &'a ClassMap,
    pub k: usize,
    pub round: usize,
}

impl SelectionContext<'_> {
    fn neighborhoods(&self) -> Result<Neighborhoods> {
        compute_neighborhoods(self.store, self.state.pool(), self.index, self.k)
    }

    fn detect(&self, hoods: &Neighborhoods) -> CandidateSet {
        detect_from_neighborhoods(hoods, self.state.known_classes(), self.round)
    }
}

/// A batch plus the detector output it was drawn from, if any.
#[derive(Debug, Clone)]
pub struct Selection {
    pub batch: QueryBatch,
    pub candidates: Option<CandidateSet>,
}

fn by_score_desc(a: &(SampleId, f64), b: &(SampleId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn by_score_asc(a: &(SampleId, f64), b: &(SampleId, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

/// Ranks non-candidates for filling a short batch: most known-labeled
/// neighbours first, then larger inconsistency against those known neighbours.
fn fallback_ranking(
    ctx: &SelectionContext,
    hoods: &Neighborhoods,
    candidates: &CandidateSet,
) -> Result<Vec<(SampleId, f64)>> {
    let rest: Vec<SampleId> = hoods
        .keys()
        .copied()
        .filter(|id| !candidates.members.contains(id))
        .collect();
    let mut ranked: Vec<(SampleId, f64, f64)> = rest
        .par_iter()
        .map(|&id| {
            let p = ctx.predictor.predict(ctx.store, id)?;
            let v = known_neighbor_histogram(&hoods[&id], ctx.classes);
            let score = inconsistency_score(&p, &v)?;
            Ok((id, candidates.known_fraction[&id], score))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().map(|(id, _, s)| (id, s)).collect())
}

fn finish(
    round: usize,
    mut chosen: Vec<(SampleId, f64)>,
    budget: usize,
    fill: impl FnOnce() -> Result<Vec<(SampleId, f64)>>,
) -> Result<QueryBatch> {
    chosen.truncate(budget);
    if chosen.len() < budget {
        let need = budget - chosen.len();
        chosen.extend(fill()?.into_iter().take(need));
    }
    let (ids, scores) = chosen.into_iter().unzip();
    Ok(QueryBatch {
        round,
        ids,
        scores: Some(scores),
    })
}

/// Detects candidates, ranks them by descending inconsistency, and takes the
/// top `budget`; short batches are filled by the fallback ranking.
pub fn select_neat(ctx: &SelectionContext, budget: usize) -> Result<Selection> {
    let hoods = ctx.neighborhoods()?;
    let candidates = ctx.detect(&hoods);
    let members: Vec<SampleId> = candidates.members.iter().copied().collect();
    let mut scored: Vec<(SampleId, f64)> = members
        .par_iter()
        .map(|&id| {
            let p = ctx.predictor.predict(ctx.store, id)?;
            Ok((id, score_candidate(id, p, &hoods[&id], ctx.classes)?.score))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(by_score_desc);
    let batch = finish(ctx.round, scored, budget, || {
        fallback_ranking(ctx, &hoods, &candidates)
    })?;
    Ok(Selection {
        batch,
        candidates: Some(candidates),
    })
}

/// A uniform random subset of the detected candidates.
pub fn select_neat_passive(ctx: &SelectionContext, budget: usize, seed: u64) -> Result<Selection> {
    let hoods = ctx.neighborhoods()?;
    let candidates = ctx.detect(&hoods);
    let mut members: Vec<SampleId> = candidates.members.iter().copied().collect();
    members.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let chosen = members.into_iter().map(|id| (id, f64::NAN)).collect();
    let mut batch = finish(ctx.round, chosen, budget, || {
        fallback_ranking(ctx, &hoods, &candidates)
    })?;
    batch.scores = None;
    Ok(Selection {
        batch,
        candidates: Some(candidates),
    })
}

/// A uniform random subset of `pool`.
pub fn select_random(pool: &BTreeSet<SampleId>, budget: usize, seed: u64, round: usize) -> QueryBatch {
    let ids: Vec<SampleId> = pool.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = budget.min(ids.len());
    let ids = rand::seq::index::sample(&mut rng, ids.len(), amount)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    QueryBatch {
        round,
        ids,
        scores: None,
    }
}

fn entropies(ctx: &SelectionContext, ids: &[SampleId]) -> Result<Vec<(SampleId, f64)>> {
    ids.par_iter()
        .map(|&id| Ok((id, entropy(&ctx.predictor.predict(ctx.store, id)?))))
        .collect()
}

fn entropy_select(
    ctx: &SelectionContext,
    budget: usize,
    prefilter: Prefilter,
    highest: bool,
) -> Result<Selection> {
    let order = if highest { by_score_desc } else { by_score_asc };
    match prefilter {
        Prefilter::None => {
            let ids: Vec<SampleId> = ctx.state.pool().iter().copied().collect();
            let mut scored = entropies(ctx, &ids)?;
            scored.sort_by(order);
            let batch = finish(ctx.round, scored, budget, || Ok(Vec::new()))?;
            Ok(Selection {
                batch,
                candidates: None,
            })
        }
        Prefilter::KnownDetection => {
            let hoods = ctx.neighborhoods()?;
            let candidates = ctx.detect(&hoods);
            let ids: Vec<SampleId> = candidates.members.iter().copied().collect();
            let mut scored = entropies(ctx, &ids)?;
            scored.sort_by(order);
            let batch = finish(ctx.round, scored, budget, || {
                fallback_ranking(ctx, &hoods, &candidates)
            })?;
            Ok(Selection {
                batch,
                candidates: Some(candidates),
            })
        }
    }
}

/// Highest predictive entropy first.
pub fn select_uncertainty(ctx: &SelectionContext, budget: usize, prefilter: Prefilter) -> Result<Selection> {
    entropy_select(ctx, budget, prefilter, true)
}

/// Lowest predictive entropy first.
pub fn select_certainty(ctx: &SelectionContext, budget: usize, prefilter: Prefilter) -> Result<Selection> {
    entropy_select(ctx, budget, prefilter, false)
}

/// Dispatches on `kind`. `seed` feeds the randomized strategies.
pub fn select(
    kind: StrategyKind,
    prefilter: Prefilter,
    ctx: &SelectionContext,
    budget: usize,
    seed: u64,
) -> Result<Selection> {
    match kind {
        StrategyKind::Neat => select_neat(ctx, budget),
        StrategyKind::NeatPassive => select_neat_passive(ctx, budget, seed),
        StrategyKind::Uncertainty => select_uncertainty(ctx, budget, prefilter),
        StrategyKind::Certainty => select_certainty(ctx, budget, prefilter),
        StrategyKind::Random => match prefilter {
            Prefilter::None => Ok(Selection {
                batch: select_random(ctx.state.pool(), budget, seed, ctx.round),
                candidates: None,
            }),
            Prefilter::KnownDetection => {
                let hoods = ctx.neighborhoods()?;
                let candidates = ctx.detect(&hoods);
                let mut batch = select_random(&candidates.members, budget, seed, ctx.round);
                if batch.ids.len() < budget {
                    let need = budget - batch.ids.len();
                    batch.ids.extend(
                        fallback_ranking(ctx, &hoods, &candidates)?
                            .into_iter()
                            .take(need)
                            .map(|(id, _)| id),
                    );
                }
                Ok(Selection {
                    batch,
                    candidates: Some(candidates),
                })
            }
        },
    }
}
