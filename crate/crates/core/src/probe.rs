//! Frozen-backbone probing: a two-layer MLP head trained with
//! cross-entropy on average-pooled backbone features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::params::ParamStore;
use crate::student::DenseStudent;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: 64, epochs: 60, batch_size: 100, lr: 0.05, weight_decay: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Images per backbone forward when extracting features.
const FEATURE_CHUNK: usize = 50;

/// Average-pooled token features of every image, `N x D`.
pub fn extract_features(model: &DenseStudent, ds: &Dataset) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut dim = 0;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(FEATURE_CHUNK) {
        let f = model.pooled_features(&ds.gather(chunk)?)?;
        dim = f.dim(1);
        rows.extend_from_slice(f.data());
    }
    Tensor::new(&[ds.len(), dim], rows)
}

fn standardize(train: &Tensor, other: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = (train.dim(0), train.dim(1));
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for row in train.data().chunks(d) {
        row.iter().zip(&mut mean).for_each(|(v, m)| *m += v / n as f64);
    }
    for row in train.data().chunks(d) {
        row.iter().enumerate().for_each(|(j, v)| var[j] += (v - mean[j]).powi(2) / n as f64);
    }
    let apply = |t: &Tensor| {
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) / (var[j] + 1e-8).sqrt();
            }
        }
        out
    };
    (apply(train), apply(other))
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.dim(1);
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Train the probe head on `(train_x, train_y)` and report accuracies.
/// Features are standardized with training-split statistics.
pub fn probe_features(
    train_x: &Tensor,
    train_y: &[usize],
    val_x: &Tensor,
    val_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    train_x.expect_rank(2, "probe")?;
    val_x.expect_rank(2, "probe")?;
    if train_x.dim(0) != train_y.len() || val_x.dim(0) != val_y.len() || train_x.dim(1) != val_x.dim(1) {
        return Err(shape_err(
            "probe",
            format!("features {:?}/{:?} vs labels {}/{}", train_x.shape(), val_x.shape(), train_y.len(), val_y.len()),
        ));
    }
    if classes == 0 || train_y.iter().chain(val_y).any(|&l| l >= classes) {
        return Err(Error::Data(format!("labels must lie in 0..{}", classes)));
    }
    if train_y.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("probe needs training items and a positive batch size".into()));
    }
    let (tx, vx) = standardize(train_x, val_x);
    let d = tx.dim(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    let mut init = |shape: &[usize], fan_in: usize| {
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std");
        Tensor::new(shape, (0..shape.iter().product()).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
    };
    let w1 = params.add_param("probe.fc1.w", init(&[d, cfg.hidden], d));
    let b1 = params.add_param("probe.fc1.b", Tensor::zeros(&[cfg.hidden]));
    let w2 = params.add_param("probe.fc2.w", init(&[cfg.hidden, classes], cfg.hidden));
    let b2 = params.add_param("probe.fc2.b", Tensor::zeros(&[classes]));
    let mut opt = OptimizerState::new(OptimizerConfig {
        momentum: 0.9,
        weight_decay: cfg.weight_decay,
        max_grad_norm: None,
        trust_ratio: false,
    });
    let forward = |params: &ParamStore, tape: &mut Tape, x: Tensor| -> Result<_> {
        let x = tape.constant(x);
        let (w1, b1, w2, b2) = (params.bind(tape, w1), params.bind(tape, b1), params.bind(tape, w2), params.bind(tape, b2));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, w2)?;
        tape.add_row_bias(o, b2)
    };
    let gather = |x: &Tensor, idx: &[usize]| {
        Tensor::new(&[idx.len(), d], idx.iter().flat_map(|&i| x.row(i).to_vec()).collect()).expect("rows")
    };
    let mut order: Vec<usize> = (0..tx.dim(0)).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let steps_total = cfg.epochs * order.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let labels: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let logits = forward(&params, &mut tape, gather(&tx, batch))?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let grads = tape.backward(loss)?.param_grads(&tape);
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps_total as f64).cos());
            opt.step(&mut params, &grads, lr)?;
            step += 1;
        }
    }
    let eval = |x: &Tensor, y: &[usize]| -> Result<f64> {
        if y.is_empty() {
            return Ok(0.0);
        }
        let mut tape = Tape::new();
        let logits = forward(&params, &mut tape, x.clone())?;
        Ok(accuracy(tape.value(logits), y))
    };
    Ok(ProbeReport { train_accuracy: eval(&tx, train_y)?, val_accuracy: eval(&vx, val_y)? })
}

/// Probe a frozen dense backbone on the dataset's train/val split.
pub fn linear_probe(model: &DenseStudent, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let feats = extract_features(model, ds)?;
    probe_on_split(&feats, ds, cfg)
}

/// Probe precomputed `N x D` features aligned with `ds`.
pub fn probe_on_split(feats: &Tensor, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let d = feats.dim(1);
    let rows = |idx: Vec<usize>| -> Result<(Tensor, Vec<usize>)> {
        let x = Tensor::new(&[idx.len(), d], idx.iter().flat_map(|&i| feats.row(i).to_vec()).collect())?;
        Ok((x, idx.iter().map(|&i| ds.labels[i]).collect()))
    };
    let (tx, ty) = rows(ds.train_indices())?;
    let (vx, vy) = rows(ds.val_indices())?;
    probe_features(&tx, &ty, &vx, &vy, ds.classes, cfg)
}
