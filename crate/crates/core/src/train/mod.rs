//! Optimization, evaluation, and stream-subset ablations.

mod config;

pub use config::{lr_at, RunConfig, TrainConfig};

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::accounting::count_flops;
use crate::features::{stream_input, StreamInput, StreamKind};
use crate::layers::{apply_updates, Ctx, EntryMut, Module};
use crate::model::{argmax, fuse_probabilities, parallel_map, softmax, Model, ModelError, StreamBatch};
use crate::skeleton::{SkeletonClip, SkeletonError};
use crate::tensor::{Real, Tape, TensorError, Value};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite value at epoch {epoch}, batch {batch}, stream {stream}, first in layer {layer}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        stream: char,
        layer: String,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

impl TrainError {
    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            TrainError::Config(_) => "config",
            TrainError::Data(_) | TrainError::Skeleton(_) => "data",
            TrainError::NonFinite { .. } => "diverged",
            TrainError::Io(_) => "io",
            TrainError::Model(_) => "model",
            TrainError::Tensor(_) => "tensor",
        }
    }
}

type Result<T> = std::result::Result<T, TrainError>;

/// SGD with Nesterov momentum and L2 decay folded into the gradient.
#[derive(Debug, Clone, Default)]
pub struct Sgd<R> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<R>>,
}

impl<R: Real> Sgd<R> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// One update from gradients keyed by parameter name; parameters without a
    /// gradient see only their decay term.
    pub fn step(&mut self, model: &mut impl Module<R>, grads: &HashMap<String, Value<R>>, lr: f64) {
        let (mu, wd, lr) = (R::of(self.momentum), R::of(self.weight_decay), R::of(lr));
        let velocity = &mut self.velocity;
        model.visit_mut(&mut |e| {
            let EntryMut::Param(p) = e else { return };
            let v = velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![R::zero(); p.value.len()]);
            let g = grads.get(&p.name).map(|g| g.data());
            let decay = p.decay;
            for (i, (w, vi)) in p.value.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
                let mut gi = g.map_or(R::zero(), |g| g[i]);
                if decay {
                    gi = gi + wd * *w;
                }
                *vi = mu * *vi + gi;
                *w = *w - lr * (gi + mu * *vi);
            }
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Sum of the per-stream mean cross-entropies.
    pub loss: f64,
    pub stream_losses: Vec<f64>,
    /// Samples whose fused training-mode prediction was right.
    pub correct: usize,
}

struct StreamStep<R> {
    loss: f64,
    probs: Vec<Vec<f64>>,
    grads: HashMap<String, Value<R>>,
    updates: Vec<(String, Value<R>)>,
}

fn labels_of(clips: &[&SkeletonClip], classes: usize) -> Result<Vec<usize>> {
    clips
        .iter()
        .map(|c| {
            if c.label < classes {
                Ok(c.label)
            } else {
                Err(TrainError::Data(format!("label {} outside {classes} classes", c.label)))
            }
        })
        .collect()
}

fn batch_for<R: Real>(clips: &[&SkeletonClip], kind: StreamKind) -> std::result::Result<StreamBatch<R>, ModelError> {
    if clips.iter().any(|c| !c.is_aligned()) {
        return Err(ModelError::Misaligned);
    }
    let inputs = clips
        .iter()
        .map(|c| stream_input(c, kind))
        .collect::<std::result::Result<Vec<StreamInput>, _>>()?;
    let refs: Vec<&StreamInput> = inputs.iter().collect();
    StreamBatch::from_inputs(&refs)
}

/// Forward and backward over every stream, then one optimizer update and
/// the running-statistic updates.
pub fn train_step<R: Real>(model: &mut Model<R>, opt: &mut Sgd<R>, clips: &[&SkeletonClip], lr: f64, threads: usize) -> Result<StepResult> {
    let labels = labels_of(clips, model.config.num_classes)?;
    let results = parallel_map(&model.streams, threads, |s| -> Result<StreamStep<R>> {
        let batch = batch_for::<R>(clips, s.kind)?;
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, true);
        let logits = s.forward(&mut cx, &batch)?;
        let loss = cx.tape.cross_entropy(logits, &labels)?;
        let value = cx.tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                epoch: 0,
                batch: 0,
                stream: s.kind.letter(),
                layer: cx.first_non_finite().unwrap_or("loss").to_string(),
            });
        }
        let probs = cx
            .tape
            .value(logits)
            .to_f64_vec()
            .chunks(s.num_classes())
            .map(softmax)
            .collect();
        let updates = cx.take_updates();
        let bound: Vec<(String, crate::tensor::Var)> = cx.bindings().iter().map(|(k, v)| (k.clone(), *v)).collect();
        let mut grads = tape.backward(loss)?;
        let grads = bound.into_iter().map(|(name, v)| (name, grads.take(v))).collect();
        Ok(StreamStep {
            loss: value,
            probs,
            grads,
            updates,
        })
    });
    let results: Vec<StreamStep<R>> = results.into_iter().collect::<Result<_>>()?;
    let mut all_grads = HashMap::new();
    let mut updates = Vec::new();
    for r in &results {
        all_grads.extend(r.grads.iter().map(|(k, v)| (k.clone(), v.clone())));
        updates.extend(r.updates.iter().cloned());
    }
    opt.step(model, &all_grads, lr);
    apply_updates(model, updates);
    let correct = (0..clips.len())
        .filter(|&i| {
            let per: Vec<Vec<f64>> = results.iter().map(|r| r.probs[i].clone()).collect();
            argmax(&fuse_probabilities(&per)) == labels[i]
        })
        .count();
    Ok(StepResult {
        loss: results.iter().map(|r| r.loss).sum(),
        stream_losses: results.iter().map(|r| r.loss).collect(),
        correct,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Accuracy of each stream alone, in model stream order.
    pub stream_accuracy: Vec<(char, f64)>,
}

/// Inference-mode top-1 accuracy of the fused scores.
pub fn evaluate<R: Real>(model: &Model<R>, clips: &[SkeletonClip], batch_size: usize, threads: usize) -> Result<Evaluation> {
    if clips.is_empty() {
        return Err(TrainError::Data("empty evaluation corpus".into()));
    }
    let classes = model.config.num_classes;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut stream_correct = vec![0usize; model.streams.len()];
    let mut correct = 0;
    for chunk in clips.chunks(batch_size.max(1)) {
        let refs: Vec<&SkeletonClip> = chunk.iter().collect();
        let labels = labels_of(&refs, classes)?;
        let per = model.stream_probabilities(&refs, threads)?;
        for (i, &label) in labels.iter().enumerate() {
            let rows: Vec<Vec<f64>> = per.iter().map(|s| s[i].clone()).collect();
            let pred = argmax(&fuse_probabilities(&rows));
            confusion[label][pred] += 1;
            correct += usize::from(pred == label);
            for (k, row) in rows.iter().enumerate() {
                stream_correct[k] += usize::from(argmax(row) == label);
            }
        }
    }
    let n = clips.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        confusion,
        stream_accuracy: model
            .streams
            .iter()
            .zip(stream_correct)
            .map(|(s, c)| (s.kind.letter(), c as f64 / n))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over batches of the summed stream losses.
    pub loss: f64,
    /// Training-mode accuracy accumulated over the epoch.
    pub running_accuracy: f64,
    /// Inference-mode training accuracy, when measured.
    pub train_accuracy: Option<f64>,
    pub holdout_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Loss of the first batch of epoch 0.
    pub first_loss: f64,
    pub stopped_early: bool,
}

/// Deterministic per-class split; `fraction` of each class goes to the
/// second set.
pub fn split_holdout(clips: Vec<SkeletonClip>, fraction: f64, seed: u64) -> (Vec<SkeletonClip>, Vec<SkeletonClip>) {
    let mut by_class: std::collections::BTreeMap<usize, Vec<SkeletonClip>> = Default::default();
    for c in clips {
        by_class.entry(c.label).or_default().push(c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (_, mut group) in by_class {
        group.shuffle(&mut rng);
        let k = (group.len() as f64 * fraction).round() as usize;
        held.extend(group.drain(..k));
        train.extend(group);
    }
    (train, held)
}

/// Trains for `cfg.epochs` epochs, or until the early-stop accuracy is
/// reached. `on_epoch` sees each epoch's log as it completes.
pub fn fit<R: Real>(
    model: &mut Model<R>,
    train: &[SkeletonClip],
    holdout: &[SkeletonClip],
    cfg: &TrainConfig,
    threads: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Data("empty training corpus".into()));
    }
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::new();
    let mut first_loss = f64::NAN;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut batches) = (0.0, 0, 0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let clips: Vec<&SkeletonClip> = idx.iter().map(|&i| &train[i]).collect();
            let step = train_step(model, &mut opt, &clips, lr, threads).map_err(|e| match e {
                TrainError::NonFinite { stream, layer, .. } => TrainError::NonFinite {
                    epoch,
                    batch: b,
                    stream,
                    layer,
                },
                e => e,
            })?;
            if epoch == 0 && b == 0 {
                first_loss = step.loss;
            }
            log::debug!("epoch {epoch} batch {b} loss {:.5}", step.loss);
            loss_sum += step.loss;
            correct += step.correct;
            batches += 1;
        }
        let running = correct as f64 / train.len() as f64;
        let mut train_accuracy = None;
        if let Some(target) = cfg.stop_at_train_accuracy {
            if running >= target {
                let acc = evaluate(model, train, cfg.batch_size, threads)?.accuracy;
                train_accuracy = Some(acc);
                stopped_early = acc >= target;
            }
        }
        let holdout_accuracy = if holdout.is_empty() {
            None
        } else {
            Some(evaluate(model, holdout, cfg.batch_size, threads)?.accuracy)
        };
        let log = EpochLog {
            epoch,
            lr,
            loss: loss_sum / batches as f64,
            running_accuracy: running,
            train_accuracy,
            holdout_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
        if stopped_early {
            break;
        }
    }
    Ok(TrainReport {
        epochs: logs,
        first_loss,
        stopped_early,
    })
}

/// One row of a stream-subset comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub streams: String,
    pub params: usize,
    pub flops: u64,
    pub train_accuracy: f64,
    pub holdout_accuracy: Option<f64>,
    pub epochs: usize,
}

pub fn subset_label(kinds: &[StreamKind]) -> String {
    kinds.iter().map(|k| format!("({})", k.letter())).collect::<Vec<_>>().join("+")
}

/// Accuracy and cost of `model` restricted to `subset`.
pub fn ablation_row<R: Real>(
    model: &Model<R>,
    subset: &[StreamKind],
    train: &[SkeletonClip],
    holdout: &[SkeletonClip],
    batch_size: usize,
    threads: usize,
) -> Result<AblationReport> {
    let sub = model.subset(subset)?;
    let cost = count_flops(&sub, 1, crate::skeleton::ALIGNED_FRAMES);
    Ok(AblationReport {
        streams: subset_label(&sub.kinds()),
        params: cost.params,
        flops: cost.flops.total(),
        train_accuracy: evaluate(&sub, train, batch_size, threads)?.accuracy,
        holdout_accuracy: if holdout.is_empty() {
            None
        } else {
            Some(evaluate(&sub, holdout, batch_size, threads)?.accuracy)
        },
        epochs: 0,
    })
}

/// Builds only the chosen streams, trains them, and reports accuracy with
/// parameter and FLOP counts.
pub fn run_ablation<R: Real>(
    subset: &[StreamKind],
    cfg: &RunConfig,
    train: &[SkeletonClip],
    holdout: &[SkeletonClip],
    threads: usize,
) -> Result<AblationReport> {
    if subset.is_empty() {
        return Err(TrainError::Config("empty stream subset".into()));
    }
    let mut model = Model::<R>::new(&cfg.model, subset, cfg.train.seed)?;
    let report = fit(&mut model, train, holdout, &cfg.train, threads, |_| {})?;
    let mut row = ablation_row(&model, subset, train, holdout, cfg.train.batch_size, threads)?;
    row.epochs = report.epochs.len();
    Ok(row)
}
