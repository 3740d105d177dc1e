use rand::Rng;

use super::{module_fields, Buffer, Cost, Ctx, Param};
use crate::accounting::Flops;
use crate::tensor::{conv_output_len, Conv2dSpec, Real, Result, Value, Var};

pub const BN_EPS: f64 = 1e-5;
/// Share of the previous running statistic kept at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// 2-D convolution over `(N, C, T, V)` with a `(kt, 1)` kernel.
#[derive(Debug, Clone)]
pub struct Conv<R> {
    pub weight: Param<R>,
    pub bias: Option<Param<R>>,
    pub spec: Conv2dSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

module_fields!(Conv { weight, bias });

impl<R: Real> Conv<R> {
    pub fn new(name: &str, c_in: usize, c_out: usize, kernel: usize, spec: Conv2dSpec, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = c_in / spec.groups * kernel;
        Self {
            weight: Param::fan_in(format!("{name}.weight"), &[c_out, c_in / spec.groups, kernel, 1], fan_in, rng, true),
            bias: bias.then(|| Param::fan_in(format!("{name}.bias"), &[c_out], fan_in, rng, false)),
            spec,
            c_in,
            c_out,
            kernel,
        }
    }

    pub fn pointwise(name: &str, c_in: usize, c_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self::new(name, c_in, c_out, 1, Conv2dSpec::default(), bias, rng)
    }

    pub fn forward(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let w = cx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| cx.param(b));
        cx.tape.conv2d(x, w, b, self.spec)
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        conv_output_len(frames, self.kernel, self.spec.stride.0, self.spec.padding.0).unwrap_or(0)
    }
}

impl<R: Real> Cost for Conv<R> {
    fn cost(&self, graphs: usize, frames: usize, nodes: usize) -> (Flops, usize) {
        let t = self.output_frames(frames);
        let macs = graphs * self.c_out * t * nodes * self.kernel * (self.c_in / self.spec.groups);
        (
            Flops {
                conv: macs as u64,
                ..Flops::default()
            },
            t,
        )
    }
}

/// Fully connected map over the last axis of `(N, C_in)`.
#[derive(Debug, Clone)]
pub struct Linear<R> {
    pub weight: Param<R>,
    pub bias: Param<R>,
    pub c_in: usize,
    pub c_out: usize,
}

module_fields!(Linear { weight, bias });

impl<R: Real> Linear<R> {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::fan_in(format!("{name}.weight"), &[c_out, c_in], c_in, rng, true),
            bias: Param::fan_in(format!("{name}.bias"), &[c_out], c_in, rng, false),
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let w = cx.param(&self.weight);
        let b = cx.param(&self.bias);
        cx.tape.linear(x, w, Some(b))
    }
}

/// Per-channel normalization over batch, frames, and nodes.
#[derive(Debug, Clone)]
pub struct BatchNorm<R> {
    pub gamma: Param<R>,
    pub beta: Param<R>,
    pub running_mean: Buffer<R>,
    pub running_var: Buffer<R>,
}

module_fields!(BatchNorm {
    gamma,
    beta,
    running_mean,
    running_var
});

impl<R: Real> BatchNorm<R> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Value::full(&[channels], R::one()), false),
            beta: Param::new(format!("{name}.beta"), Value::zeros(&[channels]), false),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: Value::zeros(&[channels]),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: Value::full(&[channels], R::one()),
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let g = cx.param(&self.gamma);
        let b = cx.param(&self.beta);
        let eps = R::of(BN_EPS);
        if !cx.train {
            let stats = (self.running_mean.value.data(), self.running_var.value.data());
            return Ok(cx.tape.batch_norm(x, g, b, Some(stats), eps)?.0);
        }
        let (y, mean, var) = cx.tape.batch_norm(x, g, b, None, eps)?;
        let shape = cx.tape.shape(x);
        let count = shape[0] * shape[2..].iter().product::<usize>();
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let keep = R::of(BN_MOMENTUM);
        let take = R::of(1.0 - BN_MOMENTUM);
        let blend = |old: &[R], new: &[R], scale: f64| -> Value<R> {
            let data = old.iter().zip(new).map(|(&o, &n)| keep * o + take * n * R::of(scale)).collect();
            Value::new(&[old.len()], data).expect("channel count")
        };
        let m = blend(self.running_mean.value.data(), &mean, 1.0);
        let v = blend(self.running_var.value.data(), &var, unbias);
        cx.record_update(&self.running_mean.name, m);
        cx.record_update(&self.running_var.name, v);
        Ok(y)
    }
}

impl<R: Real> Cost for BatchNorm<R> {
    fn cost(&self, graphs: usize, frames: usize, nodes: usize) -> (Flops, usize) {
        (Flops::elementwise((graphs * self.channels() * frames * nodes) as u64), frames)
    }
}

/// Skip path around a layer.
#[derive(Debug, Clone)]
pub enum Residual<R> {
    None,
    Identity,
    Project { conv: Conv<R>, bn: BatchNorm<R> },
}

impl<R: Real> Residual<R> {
    pub fn new(name: &str, c_in: usize, c_out: usize, stride: usize, enabled: bool, rng: &mut impl Rng) -> Self {
        if !enabled {
            return Residual::None;
        }
        if c_in == c_out && stride == 1 {
            return Residual::Identity;
        }
        let spec = Conv2dSpec {
            stride: (stride, 1),
            ..Conv2dSpec::default()
        };
        Residual::Project {
            conv: Conv::new(&format!("{name}.conv"), c_in, c_out, 1, spec, false, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), c_out),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Option<Var>> {
        match self {
            Residual::None => Ok(None),
            Residual::Identity => Ok(Some(x)),
            Residual::Project { conv, bn } => {
                let y = conv.forward(cx, x)?;
                Ok(Some(bn.forward(cx, y)?))
            }
        }
    }

    /// Cost of the skip path plus the addition, given the output shape.
    pub fn cost(&self, graphs: usize, frames: usize, nodes: usize, out_channels: usize, out_frames: usize) -> Flops {
        let add = Flops::elementwise((graphs * out_channels * out_frames * nodes) as u64);
        match self {
            Residual::None => Flops::default(),
            Residual::Identity => add,
            Residual::Project { conv, bn } => {
                let (c, t) = conv.cost(graphs, frames, nodes);
                c + bn.cost(graphs, t, nodes).0 + add
            }
        }
    }
}

impl<R: Real> super::Module<R> for Residual<R> {
    fn visit(&self, f: &mut dyn FnMut(super::Entry<'_, R>)) {
        if let Residual::Project { conv, bn } = self {
            conv.visit(f);
            bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(super::EntryMut<'_, R>)) {
        if let Residual::Project { conv, bn } = self {
            conv.visit_mut(f);
            bn.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{apply_updates, Module};
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::<f64>::new("fc", 8, 4, &mut rng);
        assert_eq!(l.param_count(), 36);
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        let mut tape = Tape::new();
        let x = tape.leaf(Value::from_f64(&[4, 1, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut cx = Ctx::new(&mut tape, true);
        bn.forward(&mut cx, x).unwrap();
        let updates = cx.take_updates();
        apply_updates(&mut bn, updates);
        // batch mean 2.5, unbiased variance 5/3
        assert!((bn.running_mean.value.data()[0] - 0.25).abs() < 1e-12);
        assert!((bn.running_var.value.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn residual_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(Residual::<f64>::new("r", 4, 4, 1, true, &mut rng), Residual::Identity));
        assert!(matches!(Residual::<f64>::new("r", 4, 4, 2, true, &mut rng), Residual::Project { .. }));
        assert!(matches!(Residual::<f64>::new("r", 4, 8, 1, false, &mut rng), Residual::None));
        let r = Residual::<f64>::new("r", 4, 8, 2, true, &mut rng);
        assert_eq!(r.param_count(), 4 * 8 + 2 * 8);
    }
}
