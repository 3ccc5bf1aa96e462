//! The T-round query loop: select, annotate with ground truth, update the
//! partition, retrain, and record per-round metrics.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::class_map::ClassMap;
use crate::error::{Error, Result};
use crate::feature_store::{split_initial, ClassId, FeatureStore, PartitionState, SampleId};
use crate::knn::{Annotation, KnnIndex};
use crate::model::{evaluate_accuracy, train_classifier, Classifier, ExternalPredictions, TrainConfig};
use crate::strategies::{select, Predictor, Prefilter, QueryBatch, SelectionContext, StrategyKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub rounds: usize,
    pub budget: usize,
    pub k: usize,
    pub strategy: StrategyKind,
    pub prefilter: Prefilter,
    pub known_classes: BTreeSet<ClassId>,
    pub init_fraction: f64,
    pub test_fraction: f64,
    /// Index invalid-marked samples as non-known neighbours.
    pub use_invalid_neighbors: bool,
    pub train: TrainConfig,
    pub seed: u64,
}

impl ProtocolConfig {
    /// Defaults: 9 rounds of 400 queries with K = 10.
    pub fn new(known_classes: BTreeSet<ClassId>, strategy: StrategyKind, seed: u64) -> Self {
        Self {
            rounds: 9,
            budget: 400,
            k: 10,
            strategy,
            prefilter: Prefilter::None,
            known_classes,
            init_fraction: 0.08,
            test_fraction: 0.1,
            use_invalid_neighbors: true,
            train: TrainConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.budget < 1 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.train.validate()
    }
}

/// Metrics for one query round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected: usize,
    pub known_selected: usize,
    pub precision: f64,
    #[serde(rename = "recall_cum")]
    pub recall_cumulative: f64,
    /// Absent when the test set is empty.
    pub test_accuracy: Option<f64>,
    pub labeled_size: usize,
    pub candidate_set_size: usize,
    #[serde(skip)]
    pub pool_size: usize,
    #[serde(skip)]
    pub invalid_size: usize,
    #[serde(skip)]
    pub test_size: usize,
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub reports: Vec<RoundReport>,
    /// The pool emptied before the configured number of rounds.
    pub truncated: bool,
    /// Known-class samples in the initial pool.
    pub n_total_known: usize,
    pub n_samples: usize,
    pub initial_labeled: usize,
    pub final_state: PartitionState,
}

/// Ground-truth annotation of a queried batch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Annotated {
    pub known_labeled: Vec<(SampleId, ClassId)>,
    pub invalid: Vec<SampleId>,
}

pub fn oracle_annotate(
    batch: &QueryBatch,
    store: &FeatureStore,
    known: &BTreeSet<ClassId>,
) -> Result<Annotated> {
    let mut out = Annotated::default();
    for &id in &batch.ids {
        let label = store.record(id)?.label;
        if known.contains(&label) {
            out.known_labeled.push((id, label));
        } else {
            out.invalid.push(id);
        }
    }
    Ok(out)
}

/// Moves an annotated batch out of the pool: known samples join the labeled
/// set, the rest are recorded as invalid. The state is unchanged on error.
pub fn apply_round(state: &mut PartitionState, annotated: &Annotated) -> Result<()> {
    let mut seen = BTreeSet::new();
    let ids = annotated
        .known_labeled
        .iter()
        .map(|(id, _)| *id)
        .chain(annotated.invalid.iter().copied());
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::State(format!("sample {id} appears twice in one batch")));
        }
        if state.labeled.contains_key(&id) {
            return Err(Error::State(format!("sample {id} is already labeled")));
        }
        if state.invalid.contains(&id) {
            return Err(Error::State(format!("sample {id} was already marked invalid")));
        }
        if !state.pool.contains(&id) {
            return Err(Error::State(format!("sample {id} is not in the pool")));
        }
    }
    if let Some((id, c)) = annotated.known_labeled.iter().find(|(_, c)| !state.is_known(*c)) {
        return Err(Error::State(format!(
            "sample {id} labeled with non-known class {c}"
        )));
    }
    for &(id, class) in &annotated.known_labeled {
        state.pool.remove(&id);
        state.labeled.insert(id, class);
    }
    for &id in &annotated.invalid {
        state.pool.remove(&id);
        state.invalid.insert(id);
    }
    Ok(())
}

/// Running precision and cumulative recall.
#[derive(Debug, Clone)]
pub struct MetricsTracker {
    n_total_known: usize,
    cumulative_known: usize,
}

impl MetricsTracker {
    pub fn new(n_total_known: usize) -> Self {
        Self {
            n_total_known,
            cumulative_known: 0,
        }
    }

    /// Records one round and returns `(precision, recall_cumulative)`.
    pub fn record(&mut self, selected: usize, known_selected: usize) -> (f64, f64) {
        self.cumulative_known += known_selected;
        let precision = if selected == 0 {
            0.0
        } else {
            known_selected as f64 / selected as f64
        };
        let recall = if self.n_total_known == 0 {
            0.0
        } else {
            self.cumulative_known as f64 / self.n_total_known as f64
        };
        (precision, recall)
    }
}

/// Recomputes `(precision, recall_cumulative)` for a sequence of
/// `(selected, known_selected)` rounds.
pub fn compute_metrics(rounds: &[(usize, usize)], n_total_known: usize) -> Vec<(f64, f64)> {
    let mut tracker = MetricsTracker::new(n_total_known);
    rounds.iter().map(|&(s, k)| tracker.record(s, k)).collect()
}

/// Derives an independent stream seed from the run seed.
pub fn derive_seed(seed: u64, round: usize, stream: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed
        .wrapping_add((round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TRAIN_STREAM: u64 = 1;
const SELECT_STREAM: u64 = 2;

fn train_on_labeled(
    store: &FeatureStore,
    state: &PartitionState,
    classes: &ClassMap,
    cfg: &ProtocolConfig,
    round: usize,
) -> Result<Classifier> {
    let samples: Vec<(&[f32], ClassId)> = state
        .labeled()
        .iter()
        .map(|(&id, &c)| Ok((store.record(id)?.feature.as_slice(), c)))
        .collect::<Result<_>>()?;
    let train = TrainConfig {
        seed: derive_seed(cfg.seed ^ cfg.train.seed, round, TRAIN_STREAM),
        ..cfg.train.clone()
    };
    train_classifier(&samples, classes, &train)
}

fn test_accuracy(store: &FeatureStore, state: &PartitionState, clf: &Classifier) -> Result<Option<f64>> {
    if state.test().is_empty() {
        return Ok(None);
    }
    let test: Vec<(&[f32], ClassId)> = state
        .test()
        .iter()
        .map(|&id| store.record(id).map(|r| (r.feature.as_slice(), r.label)))
        .collect::<Result<_>>()?;
    evaluate_accuracy(clf, &test).map(Some)
}

fn initial_index(store: &FeatureStore, state: &PartitionState) -> Result<KnnIndex> {
    KnnIndex::build(
        store.dim(),
        state
            .labeled()
            .iter()
            .map(|(&id, &c)| Ok((id, Annotation::Class(c), store.record(id)?.feature.clone())))
            .collect::<Result<Vec<_>>>()?,
    )
}

pub fn run_protocol(cfg: &ProtocolConfig, store: &FeatureStore) -> Result<ProtocolRun> {
    run_protocol_with_predictions(cfg, store, None)
}

/// Runs the full loop. When `external` is given, strategies read prediction
/// vectors from it; the feature classifier is still trained for test accuracy.
pub fn run_protocol_with_predictions(
    cfg: &ProtocolConfig,
    store: &FeatureStore,
    external: Option<&ExternalPredictions>,
) -> Result<ProtocolRun> {
    cfg.validate()?;
    let classes = ClassMap::new(&cfg.known_classes);
    if let Some(ext) = external {
        if ext.n_classes != classes.len() {
            return Err(Error::Schema(format!(
                "external predictions cover {} classes, run has {} known classes",
                ext.n_classes,
                classes.len()
            )));
        }
    }
    let mut state = split_initial(
        store,
        &cfg.known_classes,
        cfg.init_fraction,
        cfg.test_fraction,
        cfg.seed,
    )?;
    let n_total_known = state
        .pool()
        .iter()
        .map(|&id| store.record(id).map(|r| state.is_known(r.label)))
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&k| k)
        .count();
    let initial_labeled = state.labeled().len();
    let mut index = initial_index(store, &state)?;
    let mut clf = train_on_labeled(store, &state, &classes, cfg, 0)?;
    let mut tracker = MetricsTracker::new(n_total_known);
    let mut reports = Vec::with_capacity(cfg.rounds);
    let mut truncated = false;

    for round in 1..=cfg.rounds {
        if state.pool().is_empty() {
            truncated = true;
            break;
        }
        let wrap = |e: Error| Error::Round {
            round,
            source: Box::new(e),
        };
        let predictor = match external {
            Some(ext) => Predictor::External(ext),
            None => Predictor::Model(&clf),
        };
        let ctx = SelectionContext {
            store,
            state: &state,
            index: &index,
            predictor,
            classes: &classes,
            k: cfg.k,
            round,
        };
        let selection = select(
            cfg.strategy,
            cfg.prefilter,
            &ctx,
            cfg.budget,
            derive_seed(cfg.seed, round, SELECT_STREAM),
        )
        .map_err(wrap)?;
        let candidate_set_size = selection
            .candidates
            .as_ref()
            .map_or(state.pool().len(), |c| c.len());
        let batch = selection.batch;
        let annotated = oracle_annotate(&batch, store, state.known_classes()).map_err(wrap)?;
        apply_round(&mut state, &annotated).map_err(wrap)?;
        state.check_invariants().map_err(wrap)?;
        for &(id, c) in &annotated.known_labeled {
            let f = store.record(id).map_err(wrap)?.feature.clone();
            index.insert(id, Annotation::Class(c), f).map_err(wrap)?;
        }
        if cfg.use_invalid_neighbors {
            for &id in &annotated.invalid {
                let f = store.record(id).map_err(wrap)?.feature.clone();
                index.insert(id, Annotation::Invalid, f).map_err(wrap)?;
            }
        }
        clf = train_on_labeled(store, &state, &classes, cfg, round).map_err(wrap)?;
        let accuracy = test_accuracy(store, &state, &clf).map_err(wrap)?;
        let selected = batch.ids.len();
        let known_selected = annotated.known_labeled.len();
        let (precision, recall_cumulative) = tracker.record(selected, known_selected);
        reports.push(RoundReport {
            round,
            selected,
            known_selected,
            precision,
            recall_cumulative,
            test_accuracy: accuracy,
            labeled_size: state.labeled().len(),
            candidate_set_size,
            pool_size: state.pool().len(),
            invalid_size: state.invalid().len(),
            test_size: state.test().len(),
        });
    }
    Ok(ProtocolRun {
        reports,
        truncated,
        n_total_known,
        n_samples: store.n_samples(),
        initial_labeled,
        final_state: state,
    })
}

pub const ROUNDS_CSV_HEADER: [&str; 8] = [
    "round",
    "selected",
    "known_selected",
    "precision",
    "recall_cum",
    "test_accuracy",
    "labeled_size",
    "candidate_set_size",
];

pub fn write_rounds_csv<W: Write>(reports: &[RoundReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    if reports.is_empty() {
        w.write_record(ROUNDS_CSV_HEADER)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_rounds_csv<R: Read>(input: R) -> Result<Vec<RoundReport>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if headers.iter().ne(ROUNDS_CSV_HEADER) {
        return Err(Error::Schema(format!("unexpected round CSV header {headers:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

pub fn save_rounds_csv(reports: &[RoundReport], path: &Path) -> Result<()> {
    crate::io::write_atomic(path, |f| {
        write_rounds_csv(reports, &mut *f).map_err(std::io::Error::other)
    })
}

pub fn load_rounds_csv(path: &Path) -> Result<Vec<RoundReport>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_rounds_csv(file).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
