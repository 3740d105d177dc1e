use rand::Rng;

use super::{module_fields, Conv, Cost, Ctx};
use crate::accounting::Flops;
use crate::tensor::{Real, Result, TensorError, Var};

/// Joint spatial-temporal attention: pooled frame and node descriptors
/// share one bottleneck, then gate the input through the outer product of
/// a per-frame and a per-node sigmoid.
#[derive(Debug, Clone)]
pub struct Att<R> {
    pub reduce: Conv<R>,
    pub temporal: Conv<R>,
    pub spatial: Conv<R>,
    pub channels: usize,
    pub inner: usize,
}

module_fields!(Att {
    reduce,
    temporal,
    spatial
});

impl<R: Real> Att<R> {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let inner = (channels / 4).max(1);
        Self {
            reduce: Conv::pointwise(&format!("{name}.reduce"), channels, inner, true, rng),
            temporal: Conv::pointwise(&format!("{name}.temporal"), inner, channels, true, rng),
            spatial: Conv::pointwise(&format!("{name}.spatial"), inner, channels, true, rng),
            channels,
            inner,
        }
    }

    /// Temporal `(N, C, T)` and spatial `(N, C, V)` gates for `x`.
    pub fn gates(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<(Var, Var)> {
        let s = cx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: s,
                rhs: vec![0, self.channels, 0, 0],
            });
        }
        let (n, c, t, v) = (s[0], s[1], s[2], s[3]);
        let per_frame = cx.tape.mean(x, 3)?;
        let per_node = cx.tape.mean(x, 2)?;
        let pooled = cx.tape.concat(&[per_frame, per_node], 2)?;
        let pooled = cx.tape.reshape(pooled, &[n, c, t + v, 1])?;
        let h = self.reduce.forward(cx, pooled)?;
        let h = cx.tape.hard_swish(h)?;
        let ht = cx.tape.slice(h, 2, 0, t)?;
        let hs = cx.tape.slice(h, 2, t, v)?;
        let gt = self.temporal.forward(cx, ht)?;
        let gt = cx.tape.sigmoid(gt)?;
        let gt = cx.tape.reshape(gt, &[n, c, t])?;
        let gs = self.spatial.forward(cx, hs)?;
        let gs = cx.tape.sigmoid(gs)?;
        let gs = cx.tape.reshape(gs, &[n, c, v])?;
        Ok((gt, gs))
    }

    pub fn forward(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let (gt, gs) = self.gates(cx, x)?;
        let gate = cx.tape.outer_gate(gt, gs)?;
        cx.tape.mul(x, gate)
    }
}

impl<R: Real> Cost for Att<R> {
    fn cost(&self, graphs: usize, frames: usize, nodes: usize) -> (Flops, usize) {
        let (g, c, i) = (graphs as u64, self.channels as u64, self.inner as u64);
        let (t, v) = (frames as u64, nodes as u64);
        let f = Flops {
            attention: g * (2 * c * t * v + 2 * i * c * (t + v) + i * (t + v) + c * (t + v) + 2 * c * t * v),
            ..Flops::default()
        };
        (f, frames)
    }
}
