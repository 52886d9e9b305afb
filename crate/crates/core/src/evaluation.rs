//! Evaluation protocols on frozen embeddings: linear probe, label-fraction
//! probe, KNN probe, plus classification and clustering metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::adam::{Adam, AdamConfig, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    /// Upper bound on the mini-batch size; clipped to the training-set size.
    pub batch_size: usize,
    pub label_fraction: f64,
    /// Neighbourhood size of the KNN probe.
    pub k: usize,
    pub optimizer: AdamConfig,
    /// Set programmatically; experiment configs supply one master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            batch_size: 512,
            label_fraction: 1.0,
            k: 20,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            )));
        }
        if self.batch_size == 0 || self.k == 0 {
            return Err(Error::invalid("batch_size and k must be >= 1"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub top1: f64,
    /// Minority-class F1 for two classes, macro F1 otherwise.
    pub f1: f64,
    pub per_class_f1: Vec<f64>,
}

fn check_labels(labels: &[usize], classes: usize, what: &str) -> Result<()> {
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("{what} label {l} out of range for {classes} classes")));
    }
    Ok(())
}

fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// The least frequent class; ties go to the higher index.
pub fn minority_class(labels: &[usize], classes: usize) -> usize {
    let counts = class_counts(labels, classes);
    (0..classes).rev().min_by_key(|&c| counts[c]).unwrap_or(0)
}

/// Metrics with the binary F1 taken on the minority class of `truth`.
pub fn compute_metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<Metrics> {
    check_labels(truth, classes, "true")?;
    compute_metrics_with_positive(pred, truth, classes, minority_class(truth, classes))
}

/// Metrics with an explicit positive class for the binary F1.
pub fn compute_metrics_with_positive(
    pred: &[usize],
    truth: &[usize],
    classes: usize,
    positive: usize,
) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape("compute_metrics", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() || classes < 2 || positive >= classes {
        return Err(Error::invalid("metrics need samples, >= 2 classes and a valid positive class"));
    }
    check_labels(pred, classes, "predicted")?;
    check_labels(truth, classes, "true")?;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    let mut correct = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let per_class_f1: Vec<f64> = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if tp[c] == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let f1 = if classes == 2 {
        per_class_f1[positive]
    } else {
        per_class_f1.iter().sum::<f64>() / classes as f64
    };
    Ok(Metrics {
        top1: correct as f64 / pred.len() as f64,
        f1,
        per_class_f1,
    })
}

/// Euclidean k-nearest-neighbour majority vote with `k' = min(k, N_train)`.
/// Vote ties go to the class with the smaller summed distance, then to the
/// lower class index. Equidistant neighbours are taken in training order.
pub fn knn_predict(train: &Tensor, labels: &[usize], query: &Tensor, k: usize) -> Result<Vec<usize>> {
    if train.rank() != 2 || query.rank() != 2 || train.shape()[1] != query.shape()[1] {
        return Err(Error::shape("knn_predict", train.shape(), query.shape()));
    }
    let n = train.shape()[0];
    if n == 0 || labels.len() != n || k == 0 {
        return Err(Error::invalid("knn needs a non-empty labelled training set and k >= 1"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let kk = k.min(n);
    let mut out = Vec::with_capacity(query.shape()[0]);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for q in query.rows() {
        dist.clear();
        dist.extend(train.rows().enumerate().map(|(i, t)| {
            let d2: f64 = t.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2.sqrt(), i)
        }));
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        let mut summed = vec![0.0; classes];
        for &(d, i) in &dist[..kk] {
            votes[labels[i]] += 1;
            summed[labels[i]] += d;
        }
        let best = (0..classes)
            .filter(|&c| votes[c] > 0)
            .min_by(|&a, &b| {
                votes[b]
                    .cmp(&votes[a])
                    .then(summed[a].total_cmp(&summed[b]))
                    .then(a.cmp(&b))
            })
            .expect("k' >= 1");
        out.push(best);
    }
    Ok(out)
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index of two partitions given as label vectors.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("adjusted_rand_index", &[a.len()], &[b.len()]));
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0usize; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let index: f64 = table.iter().map(|&c| choose2(c)).sum();
    let rows: f64 = (0..ka).map(|i| choose2(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        // Both partitions trivial (all singletons or one block each).
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Seeded stratified subset of exactly `round(fraction * N)` indices.
/// Per-class quotas follow largest-remainder allocation, so every class's
/// count is within one sample of `fraction * n_c`. Returned indices are
/// sorted.
pub fn stratified_subset(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let counts = class_counts(labels, classes);
    let target = (fraction * labels.len() as f64).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| fraction * c as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(quota.iter().sum());
    for &c in &order {
        if missing == 0 {
            break;
        }
        if quota[c] < counts[c] {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(target);
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..quota[c]]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// A trained linear classifier on embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    /// Argmax of the logits; ties go to the lower class.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let xw = g.matmul(xn, w)?;
        let logits = g.add(xw, b)?;
        Ok(g.value(logits)
            .rows()
            .map(|r| {
                let mut best = 0;
                for (c, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}

/// Trains a zero-initialized linear layer with softmax cross-entropy and Adam
/// on seeded shuffled mini-batches.
pub fn train_linear(train: &Tensor, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearClassifier> {
    cfg.validate()?;
    if train.rank() != 2 || train.shape()[0] != labels.len() {
        return Err(Error::shape("linear_probe", train.shape(), &[labels.len()]));
    }
    check_labels(labels, classes, "training")?;
    let present = class_counts(labels, classes).iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::invalid("linear probe needs at least two classes in the training set"));
    }
    let (n, d) = (train.shape()[0], train.shape()[1]);
    let mut params = ParamSet::new();
    params.insert("bias".into(), Tensor::zeros(&[classes]));
    params.insert("weight".into(), Tensor::zeros(&[d, classes]));
    let mut adam = Adam::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let x = train.select_first(chunk)?;
            let mut onehot = Tensor::zeros(&[chunk.len(), classes]);
            for (r, &i) in chunk.iter().enumerate() {
                onehot.data_mut()[r * classes + labels[i]] = 1.0;
            }
            let mut g = Graph::new();
            let w = g.param(params["weight"].clone());
            let b = g.param(params["bias"].clone());
            let xn = g.constant(x);
            let y = g.constant(onehot);
            let xw = g.matmul(xn, w)?;
            let logits = g.add(xw, b)?;
            let logp = g.log_softmax(logits)?;
            let picked = g.mul(y, logp)?;
            let total = g.sum(picked)?;
            let loss = g.scale(total, -1.0 / chunk.len() as f64)?;
            let grads = g.backward(loss)?;
            let mut gs = ParamSet::new();
            gs.insert("weight".into(), grads.get(w));
            gs.insert("bias".into(), grads.get(b));
            adam.step(&mut params, &gs)?;
        }
    }
    Ok(LinearClassifier {
        weight: params.remove("weight").expect("inserted"),
        bias: params.remove("bias").expect("inserted"),
    })
}

/// Linear evaluation: fit on (a `label_fraction` stratified subset of) the
/// training embeddings, report metrics on the test embeddings. The binary F1
/// uses the training set's minority class.
pub fn linear_probe(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<Metrics> {
    cfg.validate()?;
    check_labels(train_labels, classes, "training")?;
    let (x, y) = if cfg.label_fraction < 1.0 {
        let idx = stratified_subset(train_labels, cfg.label_fraction, cfg.seed)?;
        (train.select_first(&idx)?, idx.iter().map(|&i| train_labels[i]).collect())
    } else {
        (train.clone(), train_labels.to_vec())
    };
    let clf = train_linear(&x, &y, classes, cfg)?;
    let pred = clf.predict(test)?;
    compute_metrics_with_positive(&pred, test_labels, classes, minority_class(train_labels, classes))
}

/// KNN evaluation with the training set's minority class as the binary
/// positive.
pub fn knn_probe(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    classes: usize,
    k: usize,
) -> Result<Metrics> {
    check_labels(train_labels, classes, "training")?;
    let pred = knn_predict(train, train_labels, test, k)?;
    compute_metrics_with_positive(&pred, test_labels, classes, minority_class(train_labels, classes))
}
