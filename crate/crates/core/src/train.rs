//! Training loop, normalization fitting, evaluation and reports.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{resize_bilinear, softmax_cross_entropy};
use crate::nn::{Gradients, Mode, Network, NormStats};
use crate::optim::{AdamState, DEFAULT_LR};
use crate::rng::{self, Purpose};
use crate::spectro::{Spectrogram, Stft, StftConfig};
use crate::tensor::{argmax, Real, Tensor};
use crate::wav_io::{AudioClip, LabeledDataset, Split};

/// Examples per parallel work unit inside a mini-batch. Fixed, so gradient
/// sums happen in the same order whatever the thread count.
const BATCH_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: Option<usize>,
    pub stft: StftConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            seed: 42,
            lr: DEFAULT_LR,
            patience: None,
            stft: StftConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        self.stft.validate()
    }
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let c = class_names.len();
        Self {
            class_names,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            total => self.trace() as f64 / total as f64,
        }
    }

    /// Labeled text table, one row per true class.
    pub fn to_table(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(|n| n.len())
            .chain(self.counts.iter().flatten().map(|c| c.to_string().len()))
            .max()
            .unwrap_or(1)
            .max(9);
        let mut out = String::new();
        let _ = write!(out, "{:>width$}", "true\\pred");
        for name in &self.class_names {
            let _ = write!(out, " {name:>width$}");
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let _ = write!(out, "{name:>width$}");
            for c in row {
                let _ = write!(out, " {c:>width$}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Metrics recorded after one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Per-epoch curves plus the final test score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub stopped_early: bool,
}

impl TrainReport {
    fn push(&mut self, s: &EpochStats) {
        self.epochs_run += 1;
        self.loss.push(s.loss);
        self.accuracy.push(s.accuracy);
        self.val_loss.push(s.val_loss);
        self.val_accuracy.push(s.val_accuracy);
    }

    pub fn table_header() -> String {
        format!(
            "{:>5}  {:>10}  {:>10}  {:>10}  {:>12}",
            "epoch", "loss", "accuracy", "val_loss", "val_accuracy"
        )
    }

    pub fn table_row(s: &EpochStats) -> String {
        format!(
            "{:>5}  {:>10.4}  {:>10.4}  {:>10.4}  {:>12.4}",
            s.epoch, s.loss, s.accuracy, s.val_loss, s.val_accuracy
        )
    }

    pub fn epoch(&self, i: usize) -> EpochStats {
        EpochStats {
            epoch: i + 1,
            loss: self.loss[i],
            accuracy: self.accuracy[i],
            val_loss: self.val_loss[i],
            val_accuracy: self.val_accuracy[i],
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = Self::table_header();
        out.push('\n');
        for i in 0..self.epochs_run {
            out.push_str(&Self::table_row(&self.epoch(i)));
            out.push('\n');
        }
        if let (Some(l), Some(a)) = (self.test_loss, self.test_accuracy) {
            let _ = writeln!(out, "test_loss {l:.4}  test_accuracy {a:.4}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `[frames, bins, 1]` network input.
pub fn spectrogram_tensor<T: Real>(spec: &Spectrogram) -> Tensor<T> {
    Tensor::from_fn(&[spec.num_frames(), spec.num_bins(), 1], |i| {
        T::from_f64_lossy(spec.values()[i] as f64)
    })
}

/// Spectrogram tensors for a batch of clips, computed in parallel.
pub fn prepare_inputs<'a, T: Real>(
    clips: impl IntoParallelIterator<Item = &'a AudioClip>,
    stft: &StftConfig,
) -> Result<Vec<Tensor<T>>> {
    let stft = Stft::new(*stft)?;
    clips
        .into_par_iter()
        .map(|clip| {
            let samples: Vec<f64> = clip.samples().iter().map(|&s| s as f64).collect();
            let spec: Spectrogram = stft.magnitudes(&samples)?;
            Ok(spectrogram_tensor(&spec))
        })
        .collect()
}

/// Mean and population variance over every pixel of every resized image,
/// accumulated with Welford's streaming update.
pub fn fit_normalization<T: Real>(images: &[Tensor<T>], resize_height: usize, resize_width: usize) -> Result<NormStats> {
    if images.is_empty() {
        return Err(Error::Dataset("cannot fit normalization on an empty training set".into()));
    }
    let resized = images
        .par_iter()
        .map(|img| resize_bilinear(img, resize_height, resize_width))
        .collect::<Result<Vec<_>>>()?;
    let mut count = 0u64;
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for img in &resized {
        for v in img.data() {
            let x = v.to_f64_lossy();
            count += 1;
            let delta = x - mean;
            mean += delta / count as f64;
            m2 += delta * (x - mean);
        }
    }
    Ok(NormStats {
        mean,
        variance: m2 / count as f64,
    })
}

/// Inference-mode loss, accuracy and confusion matrix.
///
/// Forward passes run in parallel; all reductions happen afterwards in item order.
pub fn evaluate<T: Real>(
    net: &Network<T>,
    inputs: &[Tensor<T>],
    labels: &[usize],
    class_names: &[String],
) -> Result<Evaluation> {
    if inputs.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::Shape(format!("{} inputs, {} labels", inputs.len(), labels.len())));
    }
    if class_names.len() != net.class_count() {
        return Err(Error::Config(format!(
            "network has {} outputs but {} class names were given",
            net.class_count(),
            class_names.len()
        )));
    }
    let scored = inputs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &label)| {
            let logits = net.infer(x)?;
            let (loss, _) = softmax_cross_entropy(&logits, label)?;
            Ok((loss.to_f64_lossy(), argmax(logits.data())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = ConfusionMatrix::new(class_names.to_vec());
    let mut loss_sum = 0.0;
    for ((loss, predicted), &label) in scored.iter().zip(labels) {
        loss_sum += loss;
        confusion.record(label, *predicted);
    }
    Ok(Evaluation {
        loss: loss_sum / inputs.len() as f64,
        accuracy: confusion.accuracy(),
        confusion,
    })
}

/// Network inputs and labels for one split.
#[derive(Debug, Clone)]
pub struct PreparedSplit<T> {
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Real> PreparedSplit<T> {
    pub fn from_dataset(data: &LabeledDataset, split: Split, stft: &StftConfig) -> Result<Self> {
        let items: Vec<&(AudioClip, usize)> = data.split_items(split).collect();
        let clips: Vec<&AudioClip> = items.iter().map(|(c, _)| c).collect();
        Ok(Self {
            inputs: prepare_inputs(clips, stft)?,
            labels: items.iter().map(|(_, l)| *l).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

struct ChunkResult<T> {
    grads: Gradients<T>,
    loss: f64,
    correct: usize,
}

fn run_chunk<T: Real>(
    net: &Network<T>,
    train: &PreparedSplit<T>,
    positions: &[(usize, u64)],
) -> Result<ChunkResult<T>> {
    let mut grads = net.params().zeros_like();
    let mut loss = 0.0;
    let mut correct = 0;
    for &(idx, stream) in positions {
        let (logits, cache) = net.forward(&train.inputs[idx], Mode::Train { stream })?;
        let label = train.labels[idx];
        let (l, dlogits) = softmax_cross_entropy(&logits, label)?;
        loss += l.to_f64_lossy();
        if argmax(logits.data()) == label {
            correct += 1;
        }
        net.backward_accumulate(&cache, &dlogits, &mut grads)?;
    }
    Ok(ChunkResult { grads, loss, correct })
}

pub fn train<T: Real>(net: &mut Network<T>, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_progress(net, data, cfg, |_| {})
}

/// Trains with Adam on mean-reduced mini-batch cross-entropy.
///
/// Spectrograms are computed once up front, normalization statistics are
/// fitted on the training split, and `on_epoch` sees each epoch's metrics
/// as soon as validation finishes. With a fixed seed the result is bitwise
/// reproducible.
pub fn train_with_progress<T: Real>(
    net: &mut Network<T>,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    if net.class_count() != data.class_count() {
        return Err(Error::Config(format!(
            "network has {} outputs but the dataset has {} classes {:?}",
            net.class_count(),
            data.class_count(),
            data.class_names
        )));
    }
    if data.splits.train.is_empty() || data.splits.val.is_empty() {
        return Err(Error::Dataset(format!(
            "training needs non-empty train and val splits (got {} / {})",
            data.splits.train.len(),
            data.splits.val.len()
        )));
    }

    let train_set = PreparedSplit::<T>::from_dataset(data, Split::Train, &cfg.stft)?;
    let val_set = PreparedSplit::<T>::from_dataset(data, Split::Val, &cfg.stft)?;
    let test_set = PreparedSplit::<T>::from_dataset(data, Split::Test, &cfg.stft)?;
    let shape = net.input_shape();
    if let Some(x) = train_set.inputs.first() {
        x.expect_shape(&shape).map_err(|_| {
            Error::Shape(format!(
                "spectrogram shape {:?} does not match network input {shape:?}",
                x.shape()
            ))
        })?;
    }

    let norm = fit_normalization(&train_set.inputs, net.config().resize_height, net.config().resize_width)?;
    net.set_norm_stats(norm);

    let mut adam = AdamState::<T>::new(cfg.lr);
    let mut report = TrainReport {
        epochs_run: 0,
        loss: Vec::new(),
        accuracy: Vec::new(),
        val_loss: Vec::new(),
        val_accuracy: Vec::new(),
        test_loss: None,
        test_accuracy: None,
        stopped_early: false,
    };
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    let n = train_set.len();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        // dropout stream per (epoch, position in epoch)
        let positions: Vec<(usize, u64)> = order
            .iter()
            .enumerate()
            .map(|(pos, &idx)| (idx, ((epoch as u64) << 32) | pos as u64))
            .collect();

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for batch in positions.chunks(cfg.batch_size) {
            let chunks = batch
                .par_chunks(BATCH_CHUNK)
                .map(|chunk| run_chunk(net, &train_set, chunk))
                .collect::<Result<Vec<_>>>()?;
            let mut chunks = chunks.into_iter();
            let first = chunks.next().expect("batches are never empty");
            let mut grads = first.grads;
            epoch_loss += first.loss;
            epoch_correct += first.correct;
            for c in chunks {
                grads.add_assign(&c.grads)?;
                epoch_loss += c.loss;
                epoch_correct += c.correct;
            }
            grads.scale(T::from_f64_lossy(1.0 / batch.len() as f64));
            adam.step_network(net, &grads)?;
        }

        let val = evaluate(net, &val_set.inputs, &val_set.labels, &data.class_names)?;
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: epoch_loss / n as f64,
            accuracy: epoch_correct as f64 / n as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
        };
        report.push(&stats);
        on_epoch(&stats);

        if let Some(patience) = cfg.patience {
            if val.loss < best_val {
                best_val = val.loss;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    report.stopped_early = epoch + 1 < cfg.epochs;
                    break;
                }
            }
        }
    }

    if !test_set.is_empty() {
        let test = evaluate(net, &test_set.inputs, &test_set.labels, &data.class_names)?;
        report.test_loss = Some(test.loss);
        report.test_accuracy = Some(test.accuracy);
    }
    Ok(report)
}
