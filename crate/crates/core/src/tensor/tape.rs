use super::conv::{self, ConvGeom};
use super::kernels;
use super::{axis_split, conv_output_len, Conv2dSpec, Real, Result, TensorError, Value};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<R> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` broadcast over the leading axes of `a`.
    AddBroadcast(Var, Var),
    Scale(Var, R),
    Sum(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    NodeMix {
        x: Var,
        m: Var,
        per_sample: bool,
    },
    Similarity(Var, Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Mean {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sigmoid(Var),
    Swish(Var),
    HardSwish(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<R>,
        inv_std: Vec<R>,
        batch_stats: bool,
    },
    ChannelNorm(Var),
    OuterGate(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<R>,
    },
}

impl<R> Op<R> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBroadcast(a, b) | MatMul(a, b) | Similarity(a, b)
            | OuterGate(a, b) => vec![*a, *b],
            Scale(a, _) | Sum(a) | Reshape(a) | Sigmoid(a) | Swish(a) | HardSwish(a) | ChannelNorm(a) => {
                vec![*a]
            }
            Linear { x, w, b } | Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            NodeMix { x, m, .. } => vec![*x, *m],
            Concat { parts, .. } => parts.clone(),
            Slice { x, .. } | Mean { x, .. } | Softmax { x, .. } => vec![*x],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<R> {
    value: Value<R>,
    requires_grad: bool,
    op: Op<R>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss with respect to the leaf `v`; zero when `v` does
    /// not influence the loss. Intermediate results are not retained.
    pub fn get(&self, v: Var) -> Value<R> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Value::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Value::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Value<R> {
        let shape = &self.shapes[v.0];
        match self.grads[v.0].take() {
            Some(g) => Value::new(shape, g).expect("gradient matches node shape"),
            None => Value::zeros(shape),
        }
    }
}

/// Append-only record of a computation. Confined to one thread; build a
/// fresh tape per step.
#[derive(Debug, Default)]

pub struct Tape<R> {
    nodes: Vec<Node<R>>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).fast_exp())
}

fn accumulate<R: Real>(slot: &mut Option<Vec<R>>, g: Vec<R>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

impl<R: Real> Tape<R> {
    /// Also switches the calling thread to flush-to-zero arithmetic.
    pub fn new() -> Self {
        super::flush_denormals();
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Value<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Places a value on the tape; it is differentiated if its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Value<R>) -> Var {
        let requires_grad = value.requires_grad;
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut value: Value<R>) -> Var {
        value.requires_grad = false;
        self.leaf(value)
    }

    fn push(&mut self, shape: &[usize], data: Vec<R>, op: Op<R>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        let mut value = Value::new(shape, data).expect("op produced consistent buffer");
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(R, R) -> R, rec: Op<R>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, data, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where the shape of `b` equals a trailing suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(mismatch("add_broadcast", &sa, &sb));
        }
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(bd.len())
            .flat_map(|c| c.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(&sa, data, Op::AddBroadcast(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: R) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, data, Op::Scale(a, s)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        Ok(self.push(&[1], vec![s], Op::Sum(a)))
    }

    /// `(m, k) · (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![R::zero(); m * n];
        R::gemm(
            m,
            k,
            n,
            R::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            R::zero(),
            &mut out,
            (n as isize, 1),
        );
        Ok(self.push(&[m, n], out, Op::MatMul(a, b)))
    }

    /// Fully connected map: `x (N, C_in)`, `w (C_out, C_in)`, `b (C_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(mismatch("linear", &sx, &sw));
        }
        let (n, cin, cout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![R::zero(); n * cout];
        R::gemm(
            n,
            cin,
            cout,
            R::one(),
            self.value(x).data(),
            (cin as isize, 1),
            self.value(w).data(),
            (1, cin as isize),
            R::zero(),
            &mut out,
            (cout as isize, 1),
        );
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb != [cout] {
                return Err(mismatch("linear", &sw, sb));
            }
            let bd = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.iter_mut().zip(bd).for_each(|(o, &v)| *o = *o + v);
            }
        }
        Ok(self.push(&[n, cout], out, Op::Linear { x, w, b }))
    }

    /// Grouped 2-D convolution. `x (N, C_in, H, W)`, `w (C_out, C_in/groups, KH, KW)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let g = spec.groups;
        if g == 0 || sx[1] % g != 0 || sw[0] % g != 0 || sw[1] * g != sx[1] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let ho = conv_output_len(sx[2], sw[2], spec.stride.0, spec.padding.0);
        let wo = conv_output_len(sx[3], sw[3], spec.stride.1, spec.padding.1);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(mismatch("conv2d", &sx, &sw));
        };
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(mismatch("conv2d", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            n: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            ho,
            wo,
            spec,
        };
        let out = conv::forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        Ok(self.push(&[geom.n, geom.c_out, ho, wo], out, Op::Conv2d { x, w, b, geom }))
    }

    /// Mixes the trailing node axis: `out[.., i] = Σ_j m[i, j] · x[.., j]`.
    /// `m` is either one `(V, V)` matrix or a `(N, V, V)` stack matched to
    /// the leading axis of `x`.
    pub fn node_mix(&mut self, x: Var, m: Var) -> Result<Var> {
        let (sx, sm) = (self.shape(x).to_vec(), self.shape(m).to_vec());
        let v = *sx.last().unwrap_or(&0);
        let per_sample = match sm.len() {
            2 if sm == [v, v] => false,
            3 if sm == [sx[0], v, v] && sx.len() >= 2 => true,
            _ => return Err(mismatch("node_mix", &sx, &sm)),
        };
        let xd = self.value(x).data();
        let md = self.value(m).data();
        let mut out = vec![R::zero(); xd.len()];
        let batches = if per_sample { sx[0] } else { 1 };
        let rows = xd.len() / v / batches;
        for n in 0..batches {
            let mm = if per_sample { &md[n * v * v..(n + 1) * v * v] } else { md };
            let span = n * rows * v..(n + 1) * rows * v;
            // out (rows, V) = x (rows, V) · mᵀ
            R::gemm(
                rows,
                v,
                v,
                R::one(),
                &xd[span.clone()],
                (v as isize, 1),
                mm,
                (1, v as isize),
                R::zero(),
                &mut out[span],
                (v as isize, 1),
            );
        }
        Ok(self.push(&sx, out, Op::NodeMix { x, m, per_sample }))
    }

    /// `out[n, i, j] = Σ_{c,t} a[n, c, t, i] · b[n, c, t, j]` for `(N, C, T, V)` inputs.
    pub fn similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("similarity", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(invalid("similarity", format!("expected (N, C, T, V), got {s:?}")));
        }
        let (n, v) = (s[0], s[3]);
        let inner = s[1] * s[2];
        let mut out = vec![R::zero(); n * v * v];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..n {
            let span = i * inner * v..(i + 1) * inner * v;
            R::gemm(
                v,
                inner,
                v,
                R::one(),
                &ad[span.clone()],
                (1, v as isize),
                &bd[span],
                (v as isize, 1),
                R::zero(),
                &mut out[i * v * v..(i + 1) * v * v],
                (v as isize, 1),
            );
        }
        Ok(self.push(&[n, v, v], out, Op::Similarity(a, b)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Value<R>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Value::concat(&vals, axis)?;
        let shape = out.shape().to_vec();
        Ok(self.push(
            &shape,
            out.into_data(),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(invalid("slice", format!("range {start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let out = self.value(x).slice_axis(axis, start, len);
        let shape = out.shape().to_vec();
        Ok(self.push(&shape, out.into_data(), Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(shape, data, Op::Reshape(x)))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return Err(invalid("mean", format!("axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let xd = self.value(x).data();
        let inv = R::one() / R::of(n as f64);
        let mut out = vec![R::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, &v)| *d = *d + v);
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push(&shape, out, Op::Mean { x, axis }))
    }

    /// Mean over several axes (given in any order).
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        let mut cur = x;
        for &a in axes.iter().rev() {
            cur = self.mean(cur, a)?;
        }
        Ok(cur)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(invalid("softmax", format!("axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| out[idx(k)]).fold(R::neg_infinity(), R::max);
                let mut z = R::zero();
                for k in 0..n {
                    let e = (out[idx(k)] - mx).fast_exp();
                    out[idx(k)] = e;
                    z = z + e;
                }
                for k in 0..n {
                    out[idx(k)] = out[idx(k)] / z;
                }
            }
        }
        Ok(self.push(&s, out, Op::Softmax { x, axis }))
    }

    fn map(&mut self, x: Var, f: impl Fn(R) -> R, op: Op<R>) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, data, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        Ok(self.map(x, sigmoid, Op::Sigmoid(x)))
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        Ok(self.map(x, |v| v * sigmoid(v), Op::Swish(x)))
    }

    pub fn hard_swish(&mut self, x: Var) -> Result<Var> {
        let three = R::of(3.0);
        let six = R::of(6.0);
        Ok(self.map(
            x,
            move |v| v * (v + three).max(R::zero()).min(six) / six,
            Op::HardSwish(x),
        ))
    }

    /// Batch normalization over axis 1 of `(N, C, ...)`.
    ///
    /// With `stats = None` the per-channel mean and biased variance of the
    /// batch are used and returned; otherwise the given running statistics
    /// `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[R], &[R])>,
        eps: R,
    ) -> Result<(Var, Vec<R>, Vec<R>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(invalid("batch_norm", format!("expected (N, C, ...), got {s:?}")));
        }
        let c = s[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(mismatch("batch_norm", &s, self.shape(p)));
            }
        }
        let (n, inner) = (s[0], s[2..].iter().product::<usize>());
        let xd = self.value(x).data();
        let count = R::of((n * inner) as f64);
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(invalid("batch_norm", "running statistics length differs from channel count"));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![R::zero(); c];
                let mut var = vec![R::zero(); c];
                for b in 0..n {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let plane = &xd[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                        *m = *m + kernels::sum(plane);
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / count);
                for b in 0..n {
                    for ch in 0..c {
                        let plane = &xd[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                        let m = mean[ch];
                        var[ch] = var[ch] + kernels::sum_sq_dev(plane, m);
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / count);
                (mean, var)
            }
        };
        let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![R::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let span = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                let (m, is, g, bb) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                out[span.clone()]
                    .iter_mut()
                    .zip(&xd[span])
                    .for_each(|(o, &v)| *o = (v - m) * is * g + bb);
            }
        }
        let var_out = var.clone();
        let v = self.push(
            &s,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
                batch_stats: stats.is_none(),
            },
        );
        Ok((v, mean, var_out))
    }

    /// Euclidean norm over axis 1 of `(N, C, ...)`; the axis is removed.
    pub fn channel_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(invalid("channel_norm", format!("expected (N, C, ...), got {s:?}")));
        }
        let (n, c, inner) = axis_split(&s, 1);
        let xd = self.value(x).data();
        let mut out = vec![R::zero(); n * inner];
        for b in 0..n {
            for ch in 0..c {
                let plane = &xd[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                out[b * inner..(b + 1) * inner]
                    .iter_mut()
                    .zip(plane)
                    .for_each(|(o, &v)| *o = *o + v * v);
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let mut shape = s;
        shape.remove(1);
        Ok(self.push(&shape, out, Op::ChannelNorm(x)))
    }

    /// Channel-wise outer product of a temporal gate `(N, C, T)` and a
    /// spatial gate `(N, C, V)`, giving `(N, C, T, V)`.
    pub fn outer_gate(&mut self, t: Var, s: Var) -> Result<Var> {
        let (st, ss) = (self.shape(t).to_vec(), self.shape(s).to_vec());
        if st.len() != 3 || ss.len() != 3 || st[..2] != ss[..2] {
            return Err(mismatch("outer_gate", &st, &ss));
        }
        let (nc, tl, vl) = (st[0] * st[1], st[2], ss[2]);
        let (td, sd) = (self.value(t).data(), self.value(s).data());
        let mut out = Vec::with_capacity(nc * tl * vl);
        for i in 0..nc {
            let srow = &sd[i * vl..(i + 1) * vl];
            for &tv in &td[i * tl..(i + 1) * tl] {
                out.extend(srow.iter().map(|&sv| tv * sv));
            }
        }
        Ok(self.push(&[st[0], st[1], tl, vl], out, Op::OuterGate(t, s)))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(invalid("cross_entropy", format!("logits {s:?} with {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![R::zero(); ld.len()];
        let mut loss = R::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &ld[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(R::neg_infinity(), R::max);
            let z = row.iter().fold(R::zero(), |a, &v| a + (v - mx).exp());
            let lse = mx + z.ln();
            loss = loss + lse - row[label];
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = loss / R::of(labels.len() as f64);
        Ok(self.push(
            &[1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let lg = self.local_grads(node, &g);
            for (p, pg) in lg {
                if self.nodes[p.0].requires_grad {
                    accumulate(&mut grads[p.0], pg);
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn val(&self, v: Var) -> &[R] {
        self.nodes[v.0].value.data()
    }

    fn local_grads(&self, node: &Node<R>, g: &[R]) -> Vec<(Var, Vec<R>)> {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (ad, bd) = (self.val(*a), self.val(*b));
                vec![
                    (*a, g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect()),
                    (*b, g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect()),
                ]
            }
            Op::AddBroadcast(a, b) => {
                let nb = self.val(*b).len();
                let mut gb = vec![R::zero(); nb];
                for chunk in g.chunks(nb) {
                    gb.iter_mut().zip(chunk).for_each(|(d, &v)| *d = *d + v);
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|&v| v * *s).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.val(*a).len()])],
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut ga = vec![R::zero(); m * k];
                let mut gb = vec![R::zero(); k * n];
                R::gemm(m, n, k, R::one(), g, (n as isize, 1), self.val(*b), (1, n as isize), R::zero(), &mut ga, (k as isize, 1));
                R::gemm(k, m, n, R::one(), self.val(*a), (1, k as isize), g, (n as isize, 1), R::zero(), &mut gb, (n as isize, 1));
                vec![(*a, ga), (*b, gb)]
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, cin, cout) = (sx[0], sx[1], sw[0]);
                let mut gx = vec![R::zero(); n * cin];
                let mut gw = vec![R::zero(); cout * cin];
                R::gemm(n, cout, cin, R::one(), g, (cout as isize, 1), self.val(*w), (cin as isize, 1), R::zero(), &mut gx, (cin as isize, 1));
                R::gemm(cout, n, cin, R::one(), g, (1, cout as isize), self.val(*x), (cin as isize, 1), R::zero(), &mut gw, (cin as isize, 1));
                let mut res = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    let mut gb = vec![R::zero(); cout];
                    for row in g.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                    res.push((*b, gb));
                }
                res
            }
            Op::Conv2d { x, w, b, geom } => {
                let gr = conv::backward(g, self.val(*x), self.val(*w), geom);
                let mut res = vec![(*x, gr.x), (*w, gr.w)];
                if let Some(b) = b {
                    res.push((*b, gr.bias));
                }
                res
            }
            Op::NodeMix { x, m, per_sample } => {
                let sx = self.shape(*x);
                let v = *sx.last().unwrap();
                let (xd, md) = (self.val(*x), self.val(*m));
                let batches = if *per_sample { sx[0] } else { 1 };
                let rows = xd.len() / v / batches;
                let mut gx = vec![R::zero(); xd.len()];
                let mut gm = vec![R::zero(); md.len()];
                for n in 0..batches {
                    let mspan = if *per_sample { n * v * v..(n + 1) * v * v } else { 0..v * v };
                    let span = n * rows * v..(n + 1) * rows * v;
                    // gx = g · m
                    R::gemm(rows, v, v, R::one(), &g[span.clone()], (v as isize, 1), &md[mspan.clone()], (v as isize, 1), R::zero(), &mut gx[span.clone()], (v as isize, 1));
                    // gm += gᵀ · x
                    R::gemm(v, rows, v, R::one(), &g[span.clone()], (1, v as isize), &xd[span], (v as isize, 1), R::one(), &mut gm[mspan], (v as isize, 1));
                }
                vec![(*x, gx), (*m, gm)]
            }
            Op::Similarity(a, b) => {
                let s = self.shape(*a);
                let (n, v, inner) = (s[0], s[3], s[1] * s[2]);
                let (ad, bd) = (self.val(*a), self.val(*b));
                let mut ga = vec![R::zero(); ad.len()];
                let mut gb = vec![R::zero(); bd.len()];
                for i in 0..n {
                    let span = i * inner * v..(i + 1) * inner * v;
                    let gs = &g[i * v * v..(i + 1) * v * v];
                    // ga = b · gᵀ ; gb = a · g
                    R::gemm(inner, v, v, R::one(), &bd[span.clone()], (v as isize, 1), gs, (1, v as isize), R::zero(), &mut ga[span.clone()], (v as isize, 1));
                    R::gemm(inner, v, v, R::one(), &ad[span.clone()], (v as isize, 1), gs, (v as isize, 1), R::zero(), &mut gb[span], (v as isize, 1));
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.shape(p)[*axis];
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        offset += len;
                        (p, gp)
                    })
                    .collect()
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, n, inner) = axis_split(sx, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![R::zero(); self.val(*x).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Mean { x, axis } => {
                let sx = self.shape(*x);
                let (outer, n, inner) = axis_split(sx, *axis);
                let inv = R::one() / R::of(n as f64);
                let mut gx = vec![R::zero(); self.val(*x).len()];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        gx[(o * n + k) * inner..(o * n + k + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &v)| *d = v * inv);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![R::zero(); out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot = (0..n).fold(R::zero(), |a, k| a + g[idx(k)] * out[idx(k)]);
                        for k in 0..n {
                            gx[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => vec![(*x, g.iter().zip(out).map(|(&gv, &y)| gv * y * (R::one() - y)).collect())],
            Op::Swish(x) => {
                let xd = self.val(*x);
                let gx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| {
                        let s = sigmoid(v);
                        gv * s * (R::one() + v * (R::one() - s))
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::HardSwish(x) => {
                let three = R::of(3.0);
                let xd = self.val(*x);
                let gx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| {
                        if v <= -three {
                            R::zero()
                        } else if v >= three {
                            gv
                        } else {
                            gv * (v + v + three) / R::of(6.0)
                        }
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let (n, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
                let xd = self.val(*x);
                let gd = self.val(*gamma);
                let mut gg = vec![R::zero(); c];
                let mut gbeta = vec![R::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let span = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                        let gs = kernels::sum(&g[span.clone()]);
                        gbeta[ch] = gbeta[ch] + gs;
                        gg[ch] = gg[ch] + (kernels::dot(&g[span.clone()], &xd[span]) - mean[ch] * gs) * inv_std[ch];
                    }
                }
                let mut gx = vec![R::zero(); xd.len()];
                let count = R::of((n * inner) as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let span = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                        let scale = gd[ch] * inv_std[ch];
                        let dst = gx[span.clone()].iter_mut().zip(&g[span.clone()]);
                        if *batch_stats {
                            let (m, is) = (mean[ch], inv_std[ch]);
                            let (gb, gh) = (gbeta[ch] / count, gg[ch] / count);
                            for ((d, &gv), &xv) in dst.zip(&xd[span]) {
                                *d = scale * (gv - gb - (xv - m) * is * gh);
                            }
                        } else {
                            dst.for_each(|(d, &gv)| *d = scale * gv);
                        }
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::ChannelNorm(x) => {
                let s = self.shape(*x);
                let (n, c, inner) = axis_split(s, 1);
                let xd = self.val(*x);
                let mut gx = vec![R::zero(); xd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..inner {
                            let norm = out[b * inner + i];
                            if norm > R::zero() {
                                let xi = (b * c + ch) * inner + i;
                                gx[xi] = g[b * inner + i] * xd[xi] / norm;
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::OuterGate(t, s) => {
                let (td, sd) = (self.val(*t), self.val(*s));
                let st = self.shape(*t);
                let ss = self.shape(*s);
                let (nc, tl, vl) = (st[0] * st[1], st[2], ss[2]);
                let mut gt = vec![R::zero(); td.len()];
                let mut gs = vec![R::zero(); sd.len()];
                for i in 0..nc {
                    let srow = &sd[i * vl..(i + 1) * vl];
                    for k in 0..tl {
                        let grow = &g[(i * tl + k) * vl..(i * tl + k + 1) * vl];
                        let tv = td[i * tl + k];
                        for (gsv, &gv) in gs[i * vl..(i + 1) * vl].iter_mut().zip(grow) {
                            *gsv = *gsv + gv * tv;
                        }
                        gt[i * tl + k] = kernels::dot(grow, srow);
                    }
                }
                vec![(*t, gt), (*s, gs)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / R::of(labels.len() as f64);
                let mut gl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * k + l] = gl[i * k + l] - R::one();
                }
                gl.iter_mut().for_each(|v| *v = *v * scale);
                vec![(*logits, gl)]
            }
        }
    }
}
