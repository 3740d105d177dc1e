use rand::Rng;

use super::config::{BlockShape, ModelConfig, StreamShape};
use super::ModelError;
use crate::accounting::{Flops, LayerCost};
use crate::features::{StreamInput, StreamKind};
use crate::graph::{adjacency_for, default_reference_pose, GraphKind};
use crate::layers::{module_fields, Agc, AgcOptions, Att, BatchNorm, Cost, Ctx, Linear, Module, Tgc};
use crate::tensor::{Real, Result as TensorResult, Value, Var};

/// Graph convolution, temporal convolutions, optional attention.
#[derive(Debug, Clone)]
pub struct Block<R> {
    pub agc: Agc<R>,
    pub tgc: Vec<Tgc<R>>,
    pub att: Option<Att<R>>,
}

module_fields!(Block { agc, tgc, att });

struct BuildCtx<'a> {
    adjacency: &'a [f64],
    kernel: usize,
    opts: AgcOptions,
}

impl<R: Real> Block<R> {
    fn new(name: &str, c_in: usize, shape: &BlockShape, b: &BuildCtx<'_>, rng: &mut impl Rng) -> Self {
        let w = shape.width;
        Self {
            agc: Agc::new(&format!("{name}.agc"), c_in, w, b.adjacency, b.opts, rng),
            tgc: (0..shape.repeats)
                .map(|i| {
                    let stride = if i == 0 { shape.stride } else { 1 };
                    Tgc::new(&format!("{name}.tgc{i}"), w, w, b.kernel, stride, b.opts.residual, rng)
                })
                .collect(),
            att: shape.attention.then(|| Att::new(&format!("{name}.att"), w, rng)),
        }
    }

    fn forward(&self, cx: &mut Ctx<'_, R>, name: &str, x: Var) -> TensorResult<Var> {
        let mut h = self.agc.forward(cx, x)?;
        cx.mark(&format!("{name}.agc"), h);
        for (i, t) in self.tgc.iter().enumerate() {
            h = t.forward(cx, h)?;
            cx.mark(&format!("{name}.tgc{i}"), h);
        }
        if let Some(att) = &self.att {
            h = att.forward(cx, h)?;
            cx.mark(&format!("{name}.att"), h);
        }
        Ok(h)
    }

    fn costs(&self, name: &str, graphs: usize, frames: usize, nodes: usize, out: &mut Vec<LayerCost>) -> usize {
        let (f, mut t) = self.agc.cost(graphs, frames, nodes);
        out.push(LayerCost::new(format!("{name}.agc"), self.agc.param_count(), f));
        for (i, tgc) in self.tgc.iter().enumerate() {
            let (f, t2) = tgc.cost(graphs, t, nodes);
            out.push(LayerCost::new(format!("{name}.tgc{i}"), tgc.param_count(), f));
            t = t2;
        }
        if let Some(att) = &self.att {
            out.push(LayerCost::new(format!("{name}.att"), att.param_count(), att.cost(graphs, t, nodes).0));
        }
        t
    }
}

/// Input normalization, stem, and the blocks before fusion for one branch.
#[derive(Debug, Clone)]
pub struct BranchNet<R> {
    pub input_bn: BatchNorm<R>,
    pub stem_agc: Agc<R>,
    pub stem_tgc: Tgc<R>,
    pub blocks: Vec<Block<R>>,
}

module_fields!(BranchNet {
    input_bn,
    stem_agc,
    stem_tgc,
    blocks
});

/// Branches, fusion by channel concatenation, shared blocks, pooled classifier.
#[derive(Debug, Clone)]
pub struct Stream<R> {
    pub kind: StreamKind,
    pub shape: StreamShape,
    pub branches: Vec<BranchNet<R>>,
    pub main: Vec<Block<R>>,
    pub fc: Linear<R>,
}

module_fields!(Stream { branches, main, fc });

/// A batch for one stream: per branch, `(N·M, C, T, V)` with the graphs of
/// each sample adjacent.
#[derive(Debug, Clone)]
pub struct StreamBatch<R> {
    pub kind: StreamKind,
    pub samples: usize,
    pub branches: Vec<Value<R>>,
}

impl<R: Real> StreamBatch<R> {
    pub fn from_inputs(inputs: &[&StreamInput]) -> Result<Self, ModelError> {
        let first = inputs.first().ok_or_else(|| ModelError::Input("empty batch".into()))?;
        let kind = first.kind;
        let shape = first.shape();
        if let Some(bad) = inputs.iter().find(|s| s.kind != kind || s.shape() != shape) {
            return Err(ModelError::Input(format!(
                "stream {} input {:?} does not match {} {:?}",
                bad.kind,
                bad.shape(),
                kind,
                shape
            )));
        }
        let [branches, m, c, t, v] = shape;
        let per = m * c * t * v;
        let values = (0..branches)
            .map(|i| {
                let mut data = Vec::with_capacity(inputs.len() * per);
                for s in inputs {
                    data.extend(s.branches[i].data.iter().map(|&x| R::of(x)));
                }
                Value::new(&[inputs.len() * m, c, t, v], data).expect("batch shape")
            })
            .collect();
        Ok(Self {
            kind,
            samples: inputs.len(),
            branches: values,
        })
    }
}

impl<R: Real> Stream<R> {
    pub fn new(kind: StreamKind, config: &ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let graph = match kind.graphs() {
            1 => GraphKind::Inter,
            _ => GraphKind::Intra,
        };
        let adjacency = adjacency_for(graph, &default_reference_pose(graph))?.stacked();
        let shape = config.stream_shape(kind);
        let b = BuildCtx {
            adjacency: &adjacency,
            kernel: config.temporal_kernel,
            opts: AgcOptions {
                residual: config.residual,
                similarity: config.similarity,
            },
        };
        let p = kind.letter();
        let c_in = kind.channels();
        let mut branches = Vec::new();
        for br in kind.branches() {
            let name = format!("{p}.{}", br.name());
            let mut blocks = Vec::new();
            let mut c = shape.stem;
            for (j, bs) in shape.branch.iter().enumerate() {
                blocks.push(Block::new(&format!("{name}.block{j}"), c, bs, &b, rng));
                c = bs.width;
            }
            branches.push(BranchNet {
                input_bn: BatchNorm::new(&format!("{name}.input_bn"), c_in),
                stem_agc: Agc::new(&format!("{name}.stem.agc"), c_in, shape.stem, &adjacency, b.opts, rng),
                stem_tgc: Tgc::new(&format!("{name}.stem.tgc"), shape.stem, shape.stem, b.kernel, 1, b.opts.residual, rng),
                blocks,
            });
        }
        let widths: Vec<usize> = branches.iter().map(|br| Self::branch_width(&shape, br)).collect();
        if widths.windows(2).any(|w| w[0] != w[1]) {
            return Err(ModelError::Config(format!("stream {kind}: branch widths {widths:?} differ at fusion")));
        }
        let mut c = widths.iter().sum();
        let mut main = Vec::new();
        for (j, bs) in shape.main.iter().enumerate() {
            main.push(Block::new(&format!("{p}.main.block{j}"), c, bs, &b, rng));
            c = bs.width;
        }
        let fc = Linear::new(&format!("{p}.fc"), c, config.num_classes, rng);
        Ok(Self {
            kind,
            shape,
            branches,
            main,
            fc,
        })
    }

    fn branch_width(shape: &StreamShape, br: &BranchNet<R>) -> usize {
        br.blocks.last().map_or(shape.stem, |b| b.agc.c_out)
    }

    /// Channels entering the shared blocks.
    pub fn fusion_channels(&self) -> usize {
        self.branches.iter().map(|br| Self::branch_width(&self.shape, br)).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.fc.c_out
    }

    /// Class logits `(N, C_d)`.
    pub fn forward(&self, cx: &mut Ctx<'_, R>, batch: &StreamBatch<R>) -> TensorResult<Var> {
        let p = self.kind.letter();
        let mut fused = Vec::with_capacity(self.branches.len());
        for (br, (x, tag)) in self.branches.iter().zip(batch.branches.iter().zip(self.kind.branches())) {
            let name = format!("{p}.{}", tag.name());
            let x = cx.tape.constant(x.clone());
            let h = br.input_bn.forward(cx, x)?;
            let h = br.stem_agc.forward(cx, h)?;
            cx.mark(&format!("{name}.stem.agc"), h);
            let mut h = br.stem_tgc.forward(cx, h)?;
            cx.mark(&format!("{name}.stem.tgc"), h);
            for (j, b) in br.blocks.iter().enumerate() {
                h = b.forward(cx, &format!("{name}.block{j}"), h)?;
            }
            fused.push(h);
        }
        let mut h = if fused.len() == 1 { fused[0] } else { cx.tape.concat(&fused, 1)? };
        for (j, b) in self.main.iter().enumerate() {
            h = b.forward(cx, &format!("{p}.main.block{j}"), h)?;
        }
        let pooled = cx.tape.mean_axes(h, &[2, 3])?;
        let c = cx.tape.shape(pooled)[1];
        let graphs = self.kind.graphs();
        let pooled = cx.tape.reshape(pooled, &[batch.samples, graphs, c])?;
        let pooled = cx.tape.mean(pooled, 1)?;
        let logits = self.fc.forward(cx, pooled)?;
        cx.mark(&format!("{p}.fc"), logits);
        Ok(logits)
    }

    /// Per-layer parameters and FLOPs for `samples` clips of `frames` frames.
    pub fn layer_costs(&self, samples: usize, frames: usize) -> Vec<LayerCost> {
        let p = self.kind.letter();
        let (g, v) = (samples * self.kind.graphs(), self.kind.nodes());
        let mut out = Vec::new();
        let mut t_end = frames;
        for (br, tag) in self.branches.iter().zip(self.kind.branches()) {
            let name = format!("{p}.{}", tag.name());
            out.push(LayerCost::new(
                format!("{name}.input_bn"),
                br.input_bn.param_count(),
                br.input_bn.cost(g, frames, v).0,
            ));
            let (f, t) = br.stem_agc.cost(g, frames, v);
            out.push(LayerCost::new(format!("{name}.stem.agc"), br.stem_agc.param_count(), f));
            let (f, mut t) = br.stem_tgc.cost(g, t, v);
            out.push(LayerCost::new(format!("{name}.stem.tgc"), br.stem_tgc.param_count(), f));
            for (j, b) in br.blocks.iter().enumerate() {
                t = b.costs(&format!("{name}.block{j}"), g, t, v, &mut out);
            }
            t_end = t;
        }
        let mut t = t_end;
        for (j, b) in self.main.iter().enumerate() {
            t = b.costs(&format!("{p}.main.block{j}"), g, t, v, &mut out);
        }
        let c = self.fc.c_in;
        let pool = Flops {
            head: (g * c * t * v) as u64,
            ..Flops::default()
        };
        out.push(LayerCost::new(format!("{p}.pool"), 0, pool));
        let fc = Flops {
            head: (samples * c * self.fc.c_out) as u64,
            ..Flops::default()
        };
        out.push(LayerCost::new(format!("{p}.fc"), self.fc.param_count(), fc));
        out
    }
}
