//! Finite-difference checks of whole layers: the input and every parameter.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Agc, AgcOptions, Att, Ctx, EntryMut, Module, Tgc, KERNELS};
use crate::tensor::{Result, Tape, Value, Var};

pub const FD_STEP: f64 = 1e-6;

/// Largest error of one tensor, relative to `max(1, |analytic|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub tensors: Vec<TensorCheck>,
}

impl LayerCheck {
    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.error).fold(0.0, f64::max)
    }
}

impl fmt::Display for LayerCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}: max relative error {:.3e}", self.layer, self.max_error())?;
        for t in &self.tensors {
            writeln!(f, "  {:<28} {:>5} {:.3e}", t.name, t.len, t.error)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedLayer {
    Agc,
    Tgc,
    Att,
}

impl CheckedLayer {
    pub const ALL: [CheckedLayer; 3] = [CheckedLayer::Agc, CheckedLayer::Tgc, CheckedLayer::Att];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLayer::Agc => "agc",
            CheckedLayer::Tgc => "tgc",
            CheckedLayer::Att => "att",
        }
    }

    pub fn parse(s: &str) -> Option<Vec<CheckedLayer>> {
        match s {
            "all" => Some(Self::ALL.to_vec()),
            _ => Self::ALL.into_iter().find(|l| l.name() == s).map(|l| vec![l]),
        }
    }

    /// Runs the check on a small double-precision instance: 2 clips,
    /// 4 channels (3 into the graph convolution), 8 frames, 5 nodes.
    pub fn run(self, seed: u64) -> Result<LayerCheck> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, t, v) = (2, 8, 5);
        match self {
            CheckedLayer::Agc => {
                let adjacency: Vec<f64> = (0..KERNELS * v * v).map(|_| rng.random_range(0.0..0.5)).collect();
                let agc = Agc::new("agc", 3, 4, &adjacency, AgcOptions::default(), &mut rng);
                let x = random(&[n, 3, t, v], &mut rng);
                check_layer("agc", agc, &x, &mut rng, |m, cx, x| m.forward(cx, x))
            }
            CheckedLayer::Tgc => {
                let tgc = Tgc::new("tgc", 4, 4, 5, 2, true, &mut rng);
                let x = random(&[n, 4, t, v], &mut rng);
                check_layer("tgc", tgc, &x, &mut rng, |m, cx, x| m.forward(cx, x))
            }
            CheckedLayer::Att => {
                let att = Att::new("att", 4, &mut rng);
                let x = random(&[n, 4, t, v], &mut rng);
                check_layer("att", att, &x, &mut rng, |m, cx, x| m.forward(cx, x))
            }
        }
    }
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Value<f64> {
    let n = shape.iter().product();
    Value::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Compares tape gradients of `Σ forward(x) ⊙ probe` with central
/// differences, for `x` and for every parameter of `module`. Parameters are
/// first moved off their initial values (zero learned adjacency, unit batch
/// norm scale) by a random jitter. Batch normalization runs in training mode.
pub fn check_layer<M, F>(layer: &'static str, mut module: M, x: &Value<f64>, rng: &mut impl Rng, forward: F) -> Result<LayerCheck>
where
    M: Module<f64>,
    F: Fn(&M, &mut Ctx<'_, f64>, Var) -> Result<Var>,
{
    module.visit_mut(&mut |e| {
        if let EntryMut::Param(p) = e {
            p.value.data_mut().iter_mut().for_each(|w| *w += rng.random_range(-0.1..0.1));
        }
    });
    let objective = |m: &M, tape: &mut Tape<f64>, input: Value<f64>, probe: &Value<f64>, grads: bool| -> Result<(Var, Var, Vec<(String, Var)>)> {
        let mut cx = Ctx::new(tape, true);
        cx.grads = grads;
        let xv = cx.tape.leaf(if grads { input.with_grad() } else { input });
        let y = forward(m, &mut cx, xv)?;
        let p = cx.tape.constant(probe.clone());
        let prod = cx.tape.mul(y, p)?;
        let out = cx.tape.sum(prod)?;
        let mut bound: Vec<(String, Var)> = cx.bindings().iter().map(|(k, &v)| (k.clone(), v)).collect();
        bound.sort_by(|a, b| a.0.cmp(&b.0));
        Ok((out, xv, bound))
    };
    let probe = {
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, true);
        cx.grads = false;
        let xv = cx.tape.constant(x.clone());
        let y = forward(&module, &mut cx, xv)?;
        random(cx.tape.shape(y), rng)
    };
    let scalar = |m: &M, input: Value<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let (out, _, _) = objective(m, &mut tape, input, &probe, false)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let (out, xv, bound) = objective(&module, &mut tape, x.clone(), &probe, true)?;
    let grads = tape.backward(out)?;
    let mut tensors = Vec::new();

    let gx = grads.get(xv);
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += FD_STEP;
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (scalar(&module, plus)? - scalar(&module, minus)?) / (2.0 * FD_STEP);
        worst = worst.max(relative(gx.data()[i], numeric));
    }
    tensors.push(TensorCheck {
        name: "input".into(),
        len: x.len(),
        error: worst,
    });

    for (name, var) in bound {
        let g = grads.get(var);
        let mut worst = 0.0f64;
        for i in 0..g.len() {
            nudge(&mut module, &name, i, FD_STEP);
            let plus = scalar(&module, x.clone())?;
            nudge(&mut module, &name, i, -2.0 * FD_STEP);
            let minus = scalar(&module, x.clone())?;
            nudge(&mut module, &name, i, FD_STEP);
            worst = worst.max(relative(g.data()[i], (plus - minus) / (2.0 * FD_STEP)));
        }
        tensors.push(TensorCheck {
            name: name.strip_prefix(layer).and_then(|s| s.strip_prefix('.')).unwrap_or(&name).to_string(),
            len: g.len(),
            error: worst,
        });
    }
    Ok(LayerCheck { layer, tensors })
}

fn relative(analytic: f64, numeric: f64) -> f64 {
    let e = (analytic - numeric).abs() / analytic.abs().max(1.0);
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

fn nudge<M: Module<f64>>(module: &mut M, name: &str, i: usize, by: f64) {
    module.visit_mut(&mut |e| {
        if let EntryMut::Param(p) = e {
            if p.name == name {
                p.value.data_mut()[i] += by;
            }
        }
    });
}
