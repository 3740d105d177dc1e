//! Parameter and FLOP accounting.
//!
//! One multiply-accumulate counts as one FLOP.

use std::ops::{Add, AddAssign};

use serde::Serialize;

use crate::features::StreamKind;
use crate::layers::Module;
use crate::model::Model;
use crate::tensor::Real;

/// FLOPs by category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Flops {
    /// Convolutions and linear maps.
    pub conv: u64,
    /// Node mixing with the adjacency matrices.
    pub graph: u64,
    /// Embeddings, products and normalization of the input-dependent adjacency.
    pub similarity: u64,
    pub attention: u64,
    /// Normalization, activations, residual additions.
    pub elementwise: u64,
    /// Pooling and the classifier.
    pub head: u64,
}

impl Flops {
    pub fn elementwise(n: u64) -> Self {
        Self {
            elementwise: n,
            ..Self::default()
        }
    }

    pub fn total(&self) -> u64 {
        self.conv + self.graph + self.similarity + self.attention + self.elementwise + self.head
    }

    pub fn scaled(&self, k: u64) -> Self {
        Self {
            conv: self.conv * k,
            graph: self.graph * k,
            similarity: self.similarity * k,
            attention: self.attention * k,
            elementwise: self.elementwise * k,
            head: self.head * k,
        }
    }
}

impl Add for Flops {
    type Output = Flops;

    fn add(self, o: Flops) -> Flops {
        Flops {
            conv: self.conv + o.conv,
            graph: self.graph + o.graph,
            similarity: self.similarity + o.similarity,
            attention: self.attention + o.attention,
            elementwise: self.elementwise + o.elementwise,
            head: self.head + o.head,
        }
    }
}

impl AddAssign for Flops {
    fn add_assign(&mut self, o: Flops) {
        *self = *self + o;
    }
}

/// Name of the counting convention carried in every report.
pub const CONVENTION: &str = "MAC=1";

/// Parameters and FLOPs of one named layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub flops: Flops,
}

impl LayerCost {
    pub fn new(name: String, params: usize, flops: Flops) -> Self {
        Self { name, params, flops }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StreamCost {
    pub stream: String,
    pub params: usize,
    pub flops: Flops,
    pub layers: Vec<LayerCost>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub convention: String,
    pub batch: usize,
    pub frames: usize,
    pub streams: Vec<StreamCost>,
    pub params: usize,
    pub flops: Flops,
}

/// Trainable scalars, including normalization scales and shifts and the
/// learned adjacency offsets; running statistics are excluded.
pub fn count_parameters<R: Real>(model: &Model<R>) -> usize {
    model.param_count()
}

/// Full report for `batch` clips of `frames` frames.
pub fn count_flops<R: Real>(model: &Model<R>, batch: usize, frames: usize) -> CostReport {
    let streams: Vec<StreamCost> = model
        .streams
        .iter()
        .map(|s| {
            let layers = s.layer_costs(batch, frames);
            StreamCost {
                stream: s.kind.letter().to_string(),
                params: layers.iter().map(|l| l.params).sum(),
                flops: layers.iter().fold(Flops::default(), |a, l| a + l.flops),
                layers,
            }
        })
        .collect();
    CostReport {
        model: model.config.name(),
        convention: CONVENTION.to_string(),
        batch,
        frames,
        params: streams.iter().map(|s| s.params).sum(),
        flops: streams.iter().fold(Flops::default(), |a, s| a + s.flops),
        streams,
    }
}

fn millions(n: usize) -> f64 {
    n as f64 / 1e6
}

fn giga(n: u64) -> f64 {
    n as f64 / 1e9
}

impl CostReport {
    pub fn stream(&self, kind: StreamKind) -> Option<&StreamCost> {
        let l = kind.letter().to_string();
        self.streams.iter().find(|s| s.stream == l)
    }

    /// Summed parameters and FLOPs of a subset of streams.
    pub fn combination(&self, kinds: &[StreamKind]) -> (usize, Flops) {
        kinds
            .iter()
            .filter_map(|&k| self.stream(k))
            .fold((0, Flops::default()), |(p, f), s| (p + s.params, f + s.flops))
    }

    /// Aligned plain-text table. With `layers`, every layer gets a row.
    pub fn to_text(&self, layers: bool) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}  frames={} batch={} convention={}",
            self.model, self.frames, self.batch, self.convention
        );
        let _ = writeln!(
            out,
            "{:<28} {:>12} {:>10} {:>12} {:>10}",
            "stream", "params", "params(M)", "FLOPs(G)", "C_k(G)"
        );
        for s in &self.streams {
            let _ = writeln!(
                out,
                "{:<28} {:>12} {:>10.3} {:>12.3} {:>10.3}",
                format!("({})", s.stream),
                s.params,
                millions(s.params),
                giga(s.flops.total()),
                giga(s.flops.similarity)
            );
            if layers {
                for l in &s.layers {
                    let _ = writeln!(
                        out,
                        "  {:<26} {:>12} {:>10.4} {:>12.4} {:>10.4}",
                        l.name,
                        l.params,
                        millions(l.params),
                        giga(l.flops.total()),
                        giga(l.flops.similarity)
                    );
                }
            }
        }
        let kinds: Vec<StreamKind> = crate::features::ALL_STREAMS
            .into_iter()
            .filter(|k| self.stream(*k).is_some())
            .collect();
        for n in 2..kinds.len() {
            for combo in combinations(&kinds, n) {
                let (p, f) = self.combination(&combo);
                let label = combo.iter().map(|k| format!("({})", k.letter())).collect::<Vec<_>>().join("+");
                let _ = writeln!(
                    out,
                    "{:<28} {:>12} {:>10.3} {:>12.3} {:>10.3}",
                    label,
                    p,
                    millions(p),
                    giga(f.total()),
                    giga(f.similarity)
                );
            }
        }
        let _ = writeln!(
            out,
            "{:<28} {:>12} {:>10.3} {:>12.3} {:>10.3}",
            "total",
            self.params,
            millions(self.params),
            giga(self.flops.total()),
            giga(self.flops.similarity)
        );
        out
    }
}

fn combinations(items: &[StreamKind], n: usize) -> Vec<Vec<StreamKind>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        for mut rest in combinations(&items[i + 1..], n - 1) {
            rest.insert(0, items[i]);
            out.push(rest);
        }
    }
    out
}
