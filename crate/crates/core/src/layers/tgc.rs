use rand::Rng;

use super::{module_fields, BatchNorm, Conv, Cost, Ctx, Residual};
use crate::accounting::Flops;
use crate::tensor::{Conv2dSpec, Real, Result, Var};

/// Channel expansion of the inverted bottleneck.
pub const EXPANSION: usize = 2;

/// Temporal convolution factored into pointwise expansion, per-channel
/// temporal filtering, and pointwise projection.
#[derive(Debug, Clone)]
pub struct Tgc<R> {
    pub expand: Conv<R>,
    pub bn_expand: BatchNorm<R>,
    pub depthwise: Conv<R>,
    pub bn_depthwise: BatchNorm<R>,
    pub project: Conv<R>,
    pub bn_project: BatchNorm<R>,
    pub residual: Residual<R>,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

module_fields!(Tgc {
    expand,
    bn_expand,
    depthwise,
    bn_depthwise,
    project,
    bn_project,
    residual
});

impl<R: Real> Tgc<R> {
    pub fn new(name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, residual: bool, rng: &mut impl Rng) -> Self {
        let hidden = EXPANSION * c_in;
        let spec = Conv2dSpec {
            stride: (stride, 1),
            padding: (kernel / 2, 0),
            groups: hidden,
        };
        Self {
            expand: Conv::pointwise(&format!("{name}.expand"), c_in, hidden, false, rng),
            bn_expand: BatchNorm::new(&format!("{name}.bn_expand"), hidden),
            depthwise: Conv::new(&format!("{name}.depthwise"), hidden, hidden, kernel, spec, false, rng),
            bn_depthwise: BatchNorm::new(&format!("{name}.bn_depthwise"), hidden),
            project: Conv::pointwise(&format!("{name}.project"), hidden, c_out, false, rng),
            bn_project: BatchNorm::new(&format!("{name}.bn_project"), c_out),
            residual: Residual::new(&format!("{name}.residual"), c_in, c_out, stride, residual, rng),
            c_in,
            c_out,
            stride,
        }
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        self.depthwise.output_frames(frames)
    }

    pub fn forward(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let h = self.expand.forward(cx, x)?;
        let h = self.bn_expand.forward(cx, h)?;
        let h = cx.tape.swish(h)?;
        let h = self.depthwise.forward(cx, h)?;
        let h = self.bn_depthwise.forward(cx, h)?;
        let h = cx.tape.swish(h)?;
        let h = self.project.forward(cx, h)?;
        let mut h = self.bn_project.forward(cx, h)?;
        if let Some(r) = self.residual.forward(cx, x)? {
            h = cx.tape.add(h, r)?;
        }
        cx.tape.swish(h)
    }
}

impl<R: Real> Cost for Tgc<R> {
    fn cost(&self, graphs: usize, frames: usize, nodes: usize) -> (Flops, usize) {
        let hidden = (EXPANSION * self.c_in) as u64;
        let (g, v) = (graphs as u64, nodes as u64);
        let (mut f, _) = self.expand.cost(graphs, frames, nodes);
        f += Flops::elementwise(2 * g * hidden * frames as u64 * v);
        let (d, t) = self.depthwise.cost(graphs, frames, nodes);
        f += d + Flops::elementwise(2 * g * hidden * t as u64 * v);
        f += self.project.cost(graphs, t, nodes).0;
        f += self.bn_project.cost(graphs, t, nodes).0;
        f += self.residual.cost(graphs, frames, nodes, self.c_out, t);
        f += Flops::elementwise(g * self.c_out as u64 * t as u64 * v);
        (f, t)
    }
}
