//! Datasets, minibatch iteration, and the forward-backward-update loop.

use std::io::Read;
use std::sync::Arc;
use std::time::Instant;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradError, Variable};
use crate::links::{cleargrads, Link};
use crate::ops;
use crate::optim::{OptimError, ParamUpdater};
use crate::tensor::{DType, Shape, Tensor};
use crate::util;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("idx file: {0}")]
    Idx(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One labeled example.
#[derive(Clone)]
pub struct Example {
    pub input: Tensor,
    pub label: usize,
}

/// Ordered, indexable collection of examples.
#[derive(Clone, Default)]
pub struct Dataset {
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Dataset {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn into_examples(self) -> Vec<Example> {
        self.examples
    }

    /// Feature dimension of the (uniformly shaped) examples.
    pub fn feature_len(&self) -> usize {
        self.examples.first().map(|e| e.input.len()).unwrap_or(0)
    }

    /// Number of distinct labels, assuming labels are 0..C.
    pub fn num_classes(&self) -> usize {
        self.examples.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    /// Stack the given rows into one (B, d) batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.feature_len();
        let dtype = self.examples.first().map(|e| e.input.dtype()).unwrap_or(DType::F32);
        let mut values = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = &self.examples[i];
            values.extend(e.input.to_f64_vec());
            labels.push(e.label);
        }
        let inputs = Tensor::from_vec(Shape::new(vec![indices.len(), d]), values)
            .expect("uniform example shapes")
            .cast(dtype);
        Batch { inputs, labels }
    }

    /// Seeded two-Gaussians binary classification set: class 0 around
    /// (-1, -1), class 1 around (1, 1), sigma 0.5.
    pub fn synthetic_two_class(n: usize, seed: u64, dtype: DType) -> Dataset {
        let mut rng = util::rng_for_key(seed, "synthetic-two-class");
        let examples = (0..n)
            .map(|i| {
                let label = i % 2;
                let center = if label == 0 { -1.0 } else { 1.0 };
                let vals = vec![
                    center + 0.5 * util::standard_normal(&mut rng),
                    center + 0.5 * util::standard_normal(&mut rng),
                ];
                Example {
                    input: Tensor::from_vec([2], vals).unwrap().cast(dtype),
                    label,
                }
            })
            .collect();
        Dataset::new(examples)
    }

    /// Load an IDX image/label file pair (big-endian magic, dims, raw
    /// bytes); pixels are scaled to [0, 1] f32.
    pub fn from_idx(images: &mut impl Read, labels: &mut impl Read) -> Result<Dataset> {
        let (img_dims, img_data) = read_idx(images, 3)?;
        let (lbl_dims, lbl_data) = read_idx(labels, 1)?;
        let n = img_dims[0];
        if lbl_dims[0] != n {
            return Err(TrainError::Idx(format!(
                "{} images but {} labels",
                n, lbl_dims[0]
            )));
        }
        let pixels = img_dims[1] * img_dims[2];
        let examples = (0..n)
            .map(|i| {
                let raw = &img_data[i * pixels..(i + 1) * pixels];
                let vals: Vec<f32> = raw.iter().map(|&b| b as f32 / 255.0).collect();
                Ok(Example {
                    input: Tensor::from_vec_f32([pixels], vals).expect("sized from dims"),
                    label: lbl_data[i] as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(examples))
    }
}

fn read_idx(r: &mut impl Read, want_ndims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let magic = r.read_u32::<BigEndian>()?;
    let dtype_code = (magic >> 8) & 0xff;
    let ndims = (magic & 0xff) as usize;
    if magic >> 16 != 0 || dtype_code != 0x08 {
        return Err(TrainError::Idx(format!("bad magic {:#010x}", magic)));
    }
    if ndims != want_ndims {
        return Err(TrainError::Idx(format!(
            "expected {} dims, got {}",
            want_ndims, ndims
        )));
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(r.read_u32::<BigEndian>()? as usize);
    }
    let len: usize = dims.iter().product();
    let mut data = vec![0u8; len];
    r.read_exact(&mut data)?;
    Ok((dims, data))
}

/// A stacked minibatch.
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Epoch-wise minibatch iterator. Each epoch visits every example exactly
/// once; the final short batch is emitted as-is. With `shuffle`, every
/// epoch gets its own seeded permutation, reproducible across runs.
pub struct SerialIterator {
    dataset: Arc<Dataset>,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    is_new_epoch: bool,
}

impl SerialIterator {
    pub fn new(dataset: Arc<Dataset>, batch_size: usize, shuffle: bool, seed: u64) -> SerialIterator {
        assert!(batch_size >= 1, "batch size must be positive");
        assert!(!dataset.is_empty(), "dataset must be non-empty");
        let mut it = SerialIterator {
            dataset,
            batch_size,
            shuffle,
            seed,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            is_new_epoch: false,
        };
        it.reorder();
        it
    }

    fn reorder(&mut self) {
        self.order = (0..self.dataset.len()).collect();
        if self.shuffle {
            let mut rng = util::rng_for_key(self.seed, &format!("epoch-{}", self.epoch));
            self.order.shuffle(&mut rng);
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// True when the most recent batch completed an epoch.
    pub fn is_new_epoch(&self) -> bool {
        self.is_new_epoch
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn next_batch(&mut self) -> Batch {
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.dataset.batch(&self.order[self.pos..end]);
        self.pos = end;
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.is_new_epoch = true;
            self.reorder();
        } else {
            self.is_new_epoch = false;
        }
        batch
    }
}

/// Iterator + model + optimizer + loss, advanced one minibatch at a time.
pub struct Updater {
    pub iterator: SerialIterator,
    pub model: Box<dyn Link>,
    pub optimizer: Box<dyn ParamUpdater>,
}

impl Updater {
    pub fn new(iterator: SerialIterator, model: Box<dyn Link>, optimizer: Box<dyn ParamUpdater>) -> Updater {
        Updater {
            iterator,
            model,
            optimizer,
        }
    }

    /// cleargrads, forward loss, backward, optimizer update; returns the
    /// minibatch loss.
    pub fn update_one(&mut self) -> Result<f64> {
        let batch = self.iterator.next_batch();
        cleargrads(self.model.as_ref());
        let x = Variable::new(batch.inputs);
        let logits = self.model.forward(&x)?;
        let loss = ops::softmax_cross_entropy(&logits, &batch.labels)?;
        let value = loss.item();
        loss.backward()?;
        self.optimizer.update()?;
        Ok(value)
    }
}

/// Loss/accuracy over a dataset. Parameters are not mutated; the graphs
/// built during evaluation are dropped batch by batch.
pub fn evaluate(model: &dyn Link, dataset: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut start = 0usize;
    while start < dataset.len() {
        let end = (start + batch_size).min(dataset.len());
        let indices: Vec<usize> = (start..end).collect();
        let batch = dataset.batch(&indices);
        let x = Variable::new(batch.inputs);
        let logits = model.forward(&x)?;
        let loss = ops::softmax_cross_entropy(&logits, &batch.labels)?;
        loss_sum += loss.item() * batch.labels.len() as f64;
        correct += argmax_matches(&logits.data(), &batch.labels);
        seen += batch.labels.len();
        start = end;
    }
    Ok(EvalResult {
        mean_loss: loss_sum / seen as f64,
        accuracy: correct as f64 / seen as f64,
    })
}

fn argmax_matches(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape().dims()[1];
    let vals = logits.to_f64_vec();
    labels
        .iter()
        .enumerate()
        .filter(|(row, &label)| {
            let row_vals = &vals[row * classes..(row + 1) * classes];
            let argmax = row_vals
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("non-empty row");
            argmax == label
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// One per-epoch log record, emitted as a JSON line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

/// Runs the updater for a fixed number of epochs; the evaluator and logger
/// extensions fire on each epoch boundary.
pub struct Trainer {
    pub updater: Updater,
    pub epochs: usize,
    pub eval: Option<(Arc<Dataset>, usize)>,
}

impl Trainer {
    pub fn new(updater: Updater, epochs: usize) -> Trainer {
        Trainer {
            updater,
            epochs,
            eval: None,
        }
    }

    pub fn with_eval(mut self, dataset: Arc<Dataset>, batch_size: usize) -> Trainer {
        self.eval = Some((dataset, batch_size));
        self
    }

    /// Run to the epoch trigger, optionally writing one JSON line per epoch.
    pub fn run(&mut self, mut log_sink: Option<&mut dyn std::io::Write>) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        for epoch in 1..=self.epochs {
            let started = Instant::now();
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            loop {
                loss_sum += self.updater.update_one()?;
                batches += 1;
                if self.updater.iterator.is_new_epoch() {
                    break;
                }
            }
            let val_accuracy = match &self.eval {
                Some((dataset, bs)) => Some(evaluate(self.updater.model.as_ref(), dataset, *bs)?.accuracy),
                None => None,
            };
            let record = EpochRecord {
                epoch,
                mean_loss: loss_sum / batches as f64,
                val_accuracy,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            if let Some(sink) = log_sink.as_deref_mut() {
                serde_json::to_writer(&mut *sink, &record)?;
                sink.write_all(b"\n")?;
            }
            report.records.push(record);
        }
        Ok(report)
    }
}
