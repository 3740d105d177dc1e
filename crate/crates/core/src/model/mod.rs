//! Stream networks, the three-stream model, and score fusion.

mod config;
mod stream;

pub use config::{
    depth_multiplier, round_depth, round_width, scale_config, width_multiplier, BlockShape, BlockSpec, ModelConfig, StreamLayout,
    StreamLayouts, StreamShape, DEPTH_BASE, WIDTH_BASE,
};
pub use stream::{Block, BranchNet, Stream, StreamBatch};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{stream_input, FeatureError, StreamInput, StreamKind};
use crate::graph::GraphError;
use crate::layers::{module_fields, Ctx};
use crate::skeleton::SkeletonClip;
use crate::tensor::{Real, Tape, TensorError};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "INTERACT_GCN_THREADS";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("clip is not aligned to the network input length")]
    Misaligned,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Worker threads from [`THREADS_ENV`], default 1.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Applies `f` to each item, spreading items over up to `threads` scoped
/// threads. Output order follows input order.
pub fn parallel_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let per = items.len().div_ceil(threads.min(items.len()));
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(per)
            .map(|chunk| s.spawn(move || chunk.iter().map(f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Any subset of the three streams, in stream order.
#[derive(Debug, Clone)]
pub struct Model<R> {
    pub config: ModelConfig,
    pub streams: Vec<Stream<R>>,
}

module_fields!(Model { streams });

/// Fused class probabilities and their argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Equal-weight mean of per-stream probability vectors.
pub fn fuse_probabilities(per_stream: &[Vec<f64>]) -> Vec<f64> {
    let n = per_stream.len() as f64;
    let mut out = vec![0.0; per_stream.first().map_or(0, Vec::len)];
    for p in per_stream {
        out.iter_mut().zip(p).for_each(|(o, &x)| *o += x / n);
    }
    out
}

/// Index of the largest entry; the first wins ties.
pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Parses a stream list such as `A,B,C` or `BC`.
pub fn parse_streams(text: &str) -> Result<Vec<StreamKind>, ModelError> {
    let mut kinds = Vec::new();
    for c in text.chars().filter(|c| !matches!(c, ',' | '+' | ' ' | '(' | ')')) {
        let k = StreamKind::from_letter(c).ok_or_else(|| ModelError::Config(format!("unknown stream '{c}'")))?;
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    if kinds.is_empty() {
        return Err(ModelError::Config("empty stream subset".into()));
    }
    kinds.sort();
    Ok(kinds)
}

impl<R: Real> Model<R> {
    /// Streams are initialized from independent generators derived from
    /// `seed`, so a stream's initial weights do not depend on which other
    /// streams are built.
    pub fn new(config: &ModelConfig, kinds: &[StreamKind], seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if kinds.is_empty() {
            return Err(ModelError::Config("empty stream subset".into()));
        }
        let mut kinds = kinds.to_vec();
        kinds.sort();
        kinds.dedup();
        let streams = kinds
            .iter()
            .map(|&k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k.index() as u64);
                Stream::new(k, config, &mut rng)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config: config.clone(),
            streams,
        })
    }

    pub fn full(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::new(config, &crate::features::ALL_STREAMS, seed)
    }

    pub fn kinds(&self) -> Vec<StreamKind> {
        self.streams.iter().map(|s| s.kind).collect()
    }

    pub fn stream(&self, kind: StreamKind) -> Option<&Stream<R>> {
        self.streams.iter().find(|s| s.kind == kind)
    }

    /// Copy holding only `kinds`.
    pub fn subset(&self, kinds: &[StreamKind]) -> Result<Self, ModelError> {
        let streams = kinds
            .iter()
            .map(|&k| {
                self.stream(k)
                    .cloned()
                    .ok_or_else(|| ModelError::Config(format!("model has no stream {k}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if streams.is_empty() {
            return Err(ModelError::Config("empty stream subset".into()));
        }
        let mut m = Self {
            config: self.config.clone(),
            streams,
        };
        m.streams.sort_by_key(|s| s.kind);
        Ok(m)
    }

    /// Inputs of every stream of the model for one clip.
    pub fn inputs_for(&self, clip: &SkeletonClip) -> Result<Vec<StreamInput>, ModelError> {
        if !clip.is_aligned() {
            return Err(ModelError::Misaligned);
        }
        Ok(self
            .streams
            .iter()
            .map(|s| stream_input(clip, s.kind))
            .collect::<Result<_, _>>()?)
    }

    /// Inference-mode class probabilities per stream: `[stream][sample][class]`.
    pub fn stream_probabilities(&self, clips: &[&SkeletonClip], threads: usize) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
        if clips.iter().any(|c| !c.is_aligned()) {
            return Err(ModelError::Misaligned);
        }
        let out = parallel_map(&self.streams, threads, |s| -> Result<Vec<Vec<f64>>, ModelError> {
            let inputs = clips
                .iter()
                .map(|c| stream_input(c, s.kind))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&StreamInput> = inputs.iter().collect();
            let batch = StreamBatch::<R>::from_inputs(&refs)?;
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, false);
            let logits = s.forward(&mut cx, &batch)?;
            let v = cx.tape.value(logits).to_f64_vec();
            Ok(v.chunks(s.num_classes()).map(softmax).collect())
        });
        out.into_iter().collect()
    }

    /// Fused probabilities, one row per clip.
    pub fn probabilities(&self, clips: &[&SkeletonClip], threads: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let per = self.stream_probabilities(clips, threads)?;
        Ok((0..clips.len())
            .map(|i| fuse_probabilities(&per.iter().map(|s| s[i].clone()).collect::<Vec<_>>()))
            .collect())
    }
}

/// Class and fused probabilities for one aligned clip.
pub fn predict<R: Real>(clip: &SkeletonClip, model: &Model<R>) -> Result<Prediction, ModelError> {
    let probabilities = model.probabilities(&[clip], 1)?.remove(0);
    Ok(Prediction {
        class: argmax(&probabilities),
        probabilities,
    })
}
