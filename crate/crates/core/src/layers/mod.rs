//! Learned layers: adaptive graph convolution, factorized temporal
//! convolution, joint attention, and the small building blocks they share.

mod agc;
mod att;
mod basic;
pub mod gradcheck;
mod tgc;

pub use agc::{Agc, AgcOptions};
pub use att::Att;
pub use basic::{BatchNorm, Conv, Linear, Residual, BN_EPS, BN_MOMENTUM};
pub use tgc::Tgc;

use std::collections::HashMap;

use rand::Rng;

use crate::accounting::Flops;
use crate::tensor::{Real, Tape, Value, Var};

/// Spatial kernels per graph convolution.
pub const KERNELS: usize = crate::graph::KERNELS;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub value: Value<R>,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Non-trainable state saved with the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<R> {
    pub name: String,
    pub value: Value<R>,
}

pub enum Entry<'a, R> {
    Param(&'a Param<R>),
    Buffer(&'a Buffer<R>),
}

pub enum EntryMut<'a, R> {
    Param(&'a mut Param<R>),
    Buffer(&'a mut Buffer<R>),
}

/// Anything holding parameters or buffers.
pub trait Module<R: Real> {
    fn visit(&self, f: &mut dyn FnMut(Entry<'_, R>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(EntryMut<'_, R>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |e| {
            if let Entry::Param(p) = e {
                n += p.value.len();
            }
        });
        n
    }
}

impl<R: Real, M: Module<R>> Module<R> for Vec<M> {
    fn visit(&self, f: &mut dyn FnMut(Entry<'_, R>)) {
        self.iter().for_each(|m| m.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(EntryMut<'_, R>)) {
        self.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

impl<R: Real, M: Module<R>> Module<R> for Option<M> {
    fn visit(&self, f: &mut dyn FnMut(Entry<'_, R>)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(EntryMut<'_, R>)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

impl<R: Real> Param<R> {
    pub fn new(name: impl Into<String>, value: Value<R>, decay: bool) -> Self {
        Self {
            name: name.into(),
            value,
            decay,
        }
    }

    /// Uniform in `±1/√fan_in`.
    pub fn fan_in(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng, decay: bool) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| R::of(rng.random_range(-bound..bound))).collect();
        Self::new(name, Value::new(shape, data).expect("shape matches data"), decay)
    }
}

impl<R: Real> Module<R> for Param<R> {
    fn visit(&self, f: &mut dyn FnMut(Entry<'_, R>)) {
        f(Entry::Param(self));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(EntryMut<'_, R>)) {
        f(EntryMut::Param(self));
    }
}

impl<R: Real> Module<R> for Buffer<R> {
    fn visit(&self, f: &mut dyn FnMut(Entry<'_, R>)) {
        f(Entry::Buffer(self));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(EntryMut<'_, R>)) {
        f(EntryMut::Buffer(self));
    }
}

/// Visits each listed field in order.
macro_rules! module_fields {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<R: $crate::tensor::Real> $crate::layers::Module<R> for $ty<R> {
            fn visit(&self, f: &mut dyn FnMut($crate::layers::Entry<'_, R>)) {
                $( $crate::layers::Module::visit(&self.$field, f); )*
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut($crate::layers::EntryMut<'_, R>)) {
                $( $crate::layers::Module::visit_mut(&mut self.$field, f); )*
            }
        }
    };
}
pub(crate) use module_fields;

/// State for one forward pass: the tape, parameter bindings, and pending
/// running-statistic updates.
pub struct Ctx<'t, R: Real> {
    pub tape: &'t mut Tape<R>,
    /// Batch statistics and updates in training mode; running statistics otherwise.
    pub train: bool,
    /// Whether parameters are differentiated.
    pub grads: bool,
    bound: HashMap<String, Var>,
    updates: Vec<(String, Value<R>)>,
    trace: Vec<(String, Var)>,
}

impl<'t, R: Real> Ctx<'t, R> {
    pub fn new(tape: &'t mut Tape<R>, train: bool) -> Self {
        Self {
            tape,
            train,
            grads: train,
            bound: HashMap::new(),
            updates: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn param(&mut self, p: &Param<R>) -> Var {
        if let Some(&v) = self.bound.get(&p.name) {
            return v;
        }
        let mut value = p.value.clone();
        value.requires_grad = self.grads;
        let v = self.tape.leaf(value);
        self.bound.insert(p.name.clone(), v);
        v
    }

    pub fn buffer(&mut self, b: &Buffer<R>) -> Var {
        self.tape.constant(b.value.clone())
    }

    /// Parameters bound so far, by name.
    pub fn bindings(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    pub fn record_update(&mut self, name: &str, value: Value<R>) {
        self.updates.push((name.to_string(), value));
    }

    pub fn take_updates(&mut self) -> Vec<(String, Value<R>)> {
        std::mem::take(&mut self.updates)
    }

    /// Remembers a layer output for non-finite diagnostics.
    pub fn mark(&mut self, name: &str, v: Var) {
        self.trace.push((name.to_string(), v));
    }


    /// Name of the first marked output holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.trace
            .iter()
            .find(|(_, v)| !self.tape.value(*v).is_finite())
            .map(|(n, _)| n.as_str())
    }
}

/// Overwrites buffers named in `updates`.
pub fn apply_updates<R: Real>(module: &mut impl Module<R>, updates: Vec<(String, Value<R>)>) {
    if updates.is_empty() {
        return;
    }
    let mut map: HashMap<String, Value<R>> = updates.into_iter().collect();
    module.visit_mut(&mut |e| {
        if let EntryMut::Buffer(b) = e {
            if let Some(v) = map.remove(&b.name) {
                b.value = v;
            }
        }
    });
}

/// Cost of one layer application.
pub trait Cost {
    /// FLOPs for `graphs` independent `(C, frames, nodes)` inputs, and the
    /// output frame count.
    fn cost(&self, graphs: usize, frames: usize, nodes: usize) -> (Flops, usize);
}
