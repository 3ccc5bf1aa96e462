//! Multinomial logistic regression over stored features, trained with
//! mini-batch SGD on the softmax cross-entropy, and an import path for
//! prediction vectors computed elsewhere.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::class_map::ClassMap;
use crate::error::{Error, Result};
use crate::feature_store::{ClassId, FeatureStore, SampleId};

/// Standard deviation of the random weight initialization.
const INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.01,
            lr_decay: 0.5,
            decay_every: 20,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("train.lr_decay must lie in (0, 1]".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("train.decay_every must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    fn rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Weights (`n_classes x dim`, row-major) and biases of a linear softmax model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub n_classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearParams {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
        }
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + row.iter().zip(x).map(|(w, &xi)| w * f64::from(xi)).sum::<f64>()
            })
            .collect()
    }

    pub fn probabilities(&self, x: &[f32]) -> Vec<f64> {
        crate::scoring::softmax_normalize(&self.logits(x))
    }
}

/// Mean cross-entropy over `samples` (dense class indices) and its gradient
/// with respect to the weights and biases.
pub fn cross_entropy_loss_and_grad(
    params: &LinearParams,
    samples: &[(&[f32], usize)],
) -> (f64, LinearParams) {
    let mut grad = LinearParams::zeros(params.n_classes, params.dim);
    let mut loss = 0.0;
    for &(x, y) in samples {
        let logits = params.logits(x);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[y];
        for (c, &logit) in logits.iter().enumerate() {
            let residual = (logit - lse).exp() - if c == y { 1.0 } else { 0.0 };
            grad.bias[c] += residual;
            let row = &mut grad.weights[c * params.dim..(c + 1) * params.dim];
            for (g, &xi) in row.iter_mut().zip(x) {
                *g += residual * f64::from(xi);
            }
        }
    }
    let n = samples.len().max(1) as f64;
    grad.weights.iter_mut().for_each(|g| *g /= n);
    grad.bias.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub params: LinearParams,
    pub classes: ClassMap,
    /// Mean training loss of each epoch.
    pub train_log: Vec<f64>,
}

impl Classifier {
    /// Softmax output over the known classes, in [`ClassMap`] order.
    pub fn predict_proba(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.params.dim {
            return Err(Error::Contract(format!(
                "input has dimension {}, classifier expects {}",
                x.len(),
                self.params.dim
            )));
        }
        Ok(self.params.probabilities(x))
    }

    pub fn predict(&self, x: &[f32]) -> Result<ClassId> {
        let p = self.predict_proba(x)?;
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        Ok(self.classes.class_at(best))
    }
}

/// Trains from a fresh random initialization.
pub fn train_classifier(
    samples: &[(&[f32], ClassId)],
    classes: &ClassMap,
    cfg: &TrainConfig,
) -> Result<Classifier> {
    cfg.validate()?;
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "a classifier needs at least 2 known classes, got {}",
            classes.len()
        )));
    }
    let dim = samples
        .first()
        .map(|(x, _)| x.len())
        .ok_or_else(|| Error::Training("no labeled samples to train on".into()))?;
    let mut indexed = Vec::with_capacity(samples.len());
    let mut present = BTreeSet::new();
    for &(x, y) in samples {
        if x.len() != dim {
            return Err(Error::Contract("training features differ in dimension".into()));
        }
        let idx = classes
            .index_of(y)
            .ok_or_else(|| Error::Training(format!("label {y} is not a known class")))?;
        present.insert(y);
        indexed.push((x, idx));
    }
    if let Some(missing) = classes.classes().iter().find(|c| !present.contains(c)) {
        return Err(Error::Training(format!(
            "known class {missing} has no labeled samples"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, INIT_SCALE).expect("positive scale");
    let mut params = LinearParams::zeros(classes.len(), dim);
    params.weights.iter_mut().for_each(|w| *w = init.sample(&mut rng));

    let mut order: Vec<usize> = (0..indexed.len()).collect();
    let mut train_log = Vec::with_capacity(cfg.epochs);
    let mut batch: Vec<(&[f32], usize)> = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let lr = cfg.rate_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| indexed[i]));
            let (loss, grad) = cross_entropy_loss_and_grad(&params, &batch);
            epoch_loss += loss * batch.len() as f64;
            for (w, g) in params.weights.iter_mut().zip(&grad.weights) {
                *w -= lr * g;
            }
            for (b, g) in params.bias.iter_mut().zip(&grad.bias) {
                *b -= lr * g;
            }
        }
        train_log.push(epoch_loss / indexed.len() as f64);
    }
    Ok(Classifier {
        params,
        classes: classes.clone(),
        train_log,
    })
}

/// Fraction of `test` samples whose argmax prediction equals the label.
pub fn evaluate_accuracy(clf: &Classifier, test: &[(&[f32], ClassId)]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    let mut correct = 0usize;
    for &(x, y) in test {
        if clf.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Tolerance on the row sum of an imported prediction vector.
pub const PREDICTION_SUM_TOLERANCE: f64 = 1e-3;

/// Prediction vectors keyed by sample id, in [`ClassMap`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalPredictions {
    pub n_classes: usize,
    pub by_id: BTreeMap<SampleId, Vec<f64>>,
}

impl ExternalPredictions {
    pub fn get(&self, id: SampleId) -> Result<&[f64]> {
        self.by_id
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("no external prediction for sample {id}")))
    }
}

/// Reads `id,p_0,...,p_{C-1}` rows. A leading header row is skipped when its
/// first field is not an integer. Rows summing to within
/// [`PREDICTION_SUM_TOLERANCE`] of one are renormalized.
pub fn load_external_predictions(
    path: impl AsRef<Path>,
    n_classes: usize,
    store: &FeatureStore,
) -> Result<ExternalPredictions> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_external_predictions(file, n_classes, store)
}

pub fn parse_external_predictions<R: std::io::Read>(
    input: R,
    n_classes: usize,
    store: &FeatureStore,
) -> Result<ExternalPredictions> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut by_id = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Format(format!("row {row_no}: {e}")))?;
        let first = row.get(0).unwrap_or("");
        let Ok(id) = first.parse::<SampleId>() else {
            if i == 0 {
                continue;
            }
            return Err(Error::Data(format!("row {row_no}: bad sample id {first:?}")));
        };
        if row.len() != n_classes + 1 {
            return Err(Error::Schema(format!(
                "row {row_no}: {} probabilities, expected {n_classes}",
                row.len() - 1
            )));
        }
        let mut p = Vec::with_capacity(n_classes);
        for field in row.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Data(format!("row {row_no}: bad probability {field:?}")))?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Data(format!("row {row_no}: probability {v} is invalid")));
            }
            p.push(v);
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > PREDICTION_SUM_TOLERANCE {
            return Err(Error::Data(format!("row {row_no}: probabilities sum to {sum}")));
        }
        p.iter_mut().for_each(|v| *v /= sum);
        if !store.contains(id) {
            return Err(Error::Data(format!("row {row_no}: unknown sample id {id}")));
        }
        if by_id.insert(id, p).is_some() {
            return Err(Error::Data(format!("row {row_no}: duplicate sample id {id}")));
        }
    }
    Ok(ExternalPredictions { n_classes, by_id })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::SampleRecord;
    use rand::Rng;
    use std::io::Cursor;

    fn two_blobs(n: usize, sep_sigmas: f64, seed: u64) -> Vec<(Vec<f32>, ClassId)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|i| {
                let y = (i % 2) as ClassId;
                let centre = if y == 0 {
                    -sep_sigmas / 2.0
                } else {
                    sep_sigmas / 2.0
                };
                let x = vec![
                    (centre + noise.sample(&mut rng)) as f32,
                    noise.sample(&mut rng) as f32,
                    1.0,
                ];
                (x, y)
            })
            .collect()
    }

    fn borrow(data: &[(Vec<f32>, ClassId)]) -> Vec<(&[f32], ClassId)> {
        data.iter().map(|(x, y)| (x.as_slice(), *y)).collect()
    }

    fn classes01() -> ClassMap {
        ClassMap::new(&BTreeSet::from([0, 1]))
    }

    #[test]
    fn separable_blobs_fit_perfectly() {
        let data = two_blobs(200, 10.0, 1);
        // threshold oracle: the midpoint on the first axis separates every sample
        assert!(data.iter().all(|(x, y)| (x[0] > 0.0) == (*y == 1)));
        let clf = train_classifier(&borrow(&data), &classes01(), &TrainConfig::default()).unwrap();
        let acc = evaluate_accuracy(&clf, &borrow(&data)).unwrap();
        assert_eq!(acc, 1.0);
        assert!(clf.train_log.last().unwrap() <= clf.train_log.first().unwrap());
        // deep inside each cluster
        assert_eq!(clf.predict(&[-20.0, 0.0, 1.0]).unwrap(), 0);
        assert_eq!(clf.predict(&[20.0, 0.0, 1.0]).unwrap(), 1);
    }

    #[test]
    fn duplicated_data_gives_same_decisions() {
        let data = two_blobs(60, 6.0, 2);
        let mut doubled = data.clone();
        doubled.extend(data.iter().cloned());
        let cfg = TrainConfig {
            epochs: 400,
            learning_rate: 0.5,
            batch_size: 1000,
            ..TrainConfig::default()
        };
        let a = train_classifier(&borrow(&data), &classes01(), &cfg).unwrap();
        let b = train_classifier(&borrow(&doubled), &classes01(), &cfg).unwrap();
        // full-batch gradient of the mean loss is identical, so only the init matters
        for gx in -10..=10 {
            for gy in -5..=5 {
                let x = [gx as f32 * 0.7, gy as f32, 1.0];
                assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = two_blobs(50, 3.0, 3);
        let cfg = TrainConfig {
            seed: 17,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let a = train_classifier(&borrow(&data), &classes01(), &cfg).unwrap();
        let b = train_classifier(&borrow(&data), &classes01(), &cfg).unwrap();
        let bits = |c: &Classifier| c.params.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
    }

    #[test]
    fn training_errors() {
        let data = two_blobs(10, 3.0, 4);
        let only_zero: Vec<_> = borrow(&data).into_iter().filter(|(_, y)| *y == 0).collect();
        let err = train_classifier(&only_zero, &classes01(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Training(m) if m.contains('1')), "{err}");
        let one = ClassMap::new(&BTreeSet::from([0]));
        assert!(matches!(
            train_classifier(&only_zero, &one, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_model_is_uniform() {
        let clf = Classifier {
            params: LinearParams::zeros(4, 3),
            classes: ClassMap::new(&BTreeSet::from([1, 3, 5, 7])),
            train_log: vec![],
        };
        assert_eq!(clf.predict_proba(&[0.2, -1.0, 3.0]).unwrap(), vec![0.25; 4]);
        assert!(matches!(clf.predict_proba(&[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let data = two_blobs(40, 2.0, 5);
        let clf = train_classifier(&borrow(&data), &classes01(), &TrainConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let x: Vec<f32> = (0..3).map(|_| rng.random_range(-50.0..50.0)).collect();
            let p = clf.predict_proba(&x).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn accuracy_examples() {
        // bias strongly favours class 0
        let mut params = LinearParams::zeros(2, 1);
        params.bias = vec![5.0, 0.0];
        let clf = Classifier {
            params,
            classes: classes01(),
            train_log: vec![],
        };
        let x = [1.0f32];
        let all_zero = vec![(&x[..], 0); 4];
        assert_eq!(evaluate_accuracy(&clf, &all_zero).unwrap(), 1.0);
        let balanced = vec![(&x[..], 0), (&x[..], 1), (&x[..], 0), (&x[..], 1)];
        assert_eq!(evaluate_accuracy(&clf, &balanced).unwrap(), 0.5);
        assert!(matches!(evaluate_accuracy(&clf, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn seeds_converge_to_same_loss() {
        let data = two_blobs(40, 1.5, 6);
        let b = borrow(&data);
        let run = |seed| {
            let cfg = TrainConfig {
                epochs: 3000,
                learning_rate: 0.5,
                lr_decay: 1.0,
                batch_size: 40,
                seed,
                ..TrainConfig::default()
            };
            *train_classifier(&b, &classes01(), &cfg)
                .unwrap()
                .train_log
                .last()
                .unwrap()
        };
        assert!((run(1) - run(2)).abs() <= 1e-3);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = two_blobs(12, 2.0, 8);
        let b: Vec<(&[f32], usize)> = data.iter().map(|(x, y)| (x.as_slice(), *y as usize)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = LinearParams::zeros(2, 3);
        params
            .weights
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-1.0..1.0));
        let (_, grad) = cross_entropy_loss_and_grad(&params, &b);
        let h = 1e-6;
        for i in 0..params.weights.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.weights[i] += h;
            minus.weights[i] -= h;
            let numeric = (cross_entropy_loss_and_grad(&plus, &b).0
                - cross_entropy_loss_and_grad(&minus, &b).0)
                / (2.0 * h);
            assert!((numeric - grad.weights[i]).abs() <= 1e-6 * grad.weights[i].abs().max(1.0));
        }
    }

    fn store_with_ids(ids: &[SampleId]) -> FeatureStore {
        FeatureStore::from_records(
            1,
            1,
            ids.iter()
                .map(|&id| SampleRecord {
                    id,
                    label: 0,
                    feature: vec![1.0],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn external_prediction_rows() {
        let store = store_with_ids(&[3, 7]);
        let p = parse_external_predictions(Cursor::new("id,p_0,p_1\n7,0.6,0.4\n"), 2, &store).unwrap();
        assert_eq!(p.get(7).unwrap(), &[0.6, 0.4]);
        let err = parse_external_predictions(Cursor::new("7,0.6,0.5\n"), 2, &store).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("row 1")), "{err}");
        let err = parse_external_predictions(Cursor::new("7,0.2,0.3,0.5\n"), 2, &store).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        let err = parse_external_predictions(Cursor::new("8,0.5,0.5\n"), 2, &store).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let p = parse_external_predictions(Cursor::new("3,0.5005,0.5\n"), 2, &store).unwrap();
        assert!((p.get(3).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
