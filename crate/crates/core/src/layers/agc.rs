use rand::Rng;

use super::{module_fields, BatchNorm, Buffer, Conv, Cost, Ctx, Param, Residual, KERNELS};
use crate::accounting::Flops;
use crate::tensor::{Real, Result, TensorError, Value, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgcOptions {
    pub residual: bool,
    /// Include the input-dependent adjacency term.
    pub similarity: bool,
}

impl Default for AgcOptions {
    fn default() -> Self {
        Self {
            residual: true,
            similarity: true,
        }
    }
}

/// Graph convolution whose per-kernel adjacency is the sum of a fixed
/// normalized matrix, a learned matrix, and a per-sample similarity matrix.
///
/// Node mixing follows `out[.., i] = Σ_j M[i, j] · x[.., j]`.
#[derive(Debug, Clone)]
pub struct Agc<R> {
    pub conv: Conv<R>,
    /// Fixed `(K, V, V)` normalized adjacency.
    pub adjacency: Buffer<R>,
    /// Learned `(K, V, V)` offsets, initially zero.
    pub learned: Param<R>,
    pub theta: Conv<R>,
    pub phi: Conv<R>,
    pub bn: BatchNorm<R>,
    pub residual: Residual<R>,
    pub similarity: bool,
    pub c_in: usize,
    pub c_out: usize,
    /// Embedding width of the similarity term.
    pub embed: usize,
    pub nodes: usize,
}

module_fields!(Agc {
    conv,
    adjacency,
    learned,
    theta,
    phi,
    bn,
    residual
});

impl<R: Real> Agc<R> {
    /// `adjacency` holds `K` stacked `V × V` matrices.
    pub fn new(name: &str, c_in: usize, c_out: usize, adjacency: &[f64], opts: AgcOptions, rng: &mut impl Rng) -> Self {
        let nodes = ((adjacency.len() / KERNELS) as f64).sqrt() as usize;
        assert_eq!(KERNELS * nodes * nodes, adjacency.len(), "adjacency must be (K, V, V)");
        let embed = (c_out / 4).max(1);
        Self {
            conv: Conv::pointwise(&format!("{name}.conv"), c_in, KERNELS * c_out, false, rng),
            adjacency: Buffer {
                name: format!("{name}.adjacency"),
                value: Value::from_f64(&[KERNELS, nodes, nodes], adjacency).expect("adjacency shape"),
            },
            learned: Param::new(format!("{name}.learned"), Value::zeros(&[KERNELS, nodes, nodes]), false),
            theta: Conv::pointwise(&format!("{name}.theta"), c_in, KERNELS * embed, true, rng),
            phi: Conv::pointwise(&format!("{name}.phi"), c_in, KERNELS * embed, true, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), c_out),
            residual: Residual::new(&format!("{name}.residual"), c_in, c_out, 1, opts.residual, rng),
            similarity: opts.similarity,
            c_in,
            c_out,
            embed,
            nodes,
        }
    }

    fn check(&self, cx: &Ctx<'_, R>, x: Var) -> Result<()> {
        let s = cx.tape.shape(x);
        if s.len() != 4 || s[1] != self.c_in || s[3] != self.nodes {
            return Err(TensorError::ShapeMismatch {
                op: "agc",
                lhs: s.to_vec(),
                rhs: vec![0, self.c_in, 0, self.nodes],
            });
        }
        Ok(())
    }

    fn embeddings(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<(Var, Var)> {
        Ok((self.theta.forward(cx, x)?, self.phi.forward(cx, x)?))
    }

    fn kernel_similarity(&self, cx: &mut Ctx<'_, R>, th: Var, ph: Var, k: usize) -> Result<Var> {
        let e = self.embed;
        let tk = cx.tape.slice(th, 1, k * e, e)?;
        let pk = cx.tape.slice(ph, 1, k * e, e)?;
        let s = cx.tape.similarity(tk, pk)?;
        cx.tape.softmax(s, 2)
    }

    /// Row-stochastic `(N, V, V)` similarity of kernel `k` for input `(N, C_in, T, V)`.
    pub fn similarity_matrix(&self, cx: &mut Ctx<'_, R>, x: Var, k: usize) -> Result<Var> {
        self.check(cx, x)?;
        let (th, ph) = self.embeddings(cx, x)?;
        self.kernel_similarity(cx, th, ph, k)
    }

    /// Sum over kernels of the mixed features, before normalization.
    pub fn aggregate(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        self.check(cx, x)?;
        let v = self.nodes;
        let y = self.conv.forward(cx, x)?;
        let fixed = cx.buffer(&self.adjacency);
        let learned = cx.param(&self.learned);
        let graph = cx.tape.add(fixed, learned)?;
        let emb = if self.similarity { Some(self.embeddings(cx, x)?) } else { None };
        let mut acc: Option<Var> = None;
        for k in 0..KERNELS {
            let yk = cx.tape.slice(y, 1, k * self.c_out, self.c_out)?;
            let gk = cx.tape.slice(graph, 0, k, 1)?;
            let gk = cx.tape.reshape(gk, &[v, v])?;
            let m = match emb {
                Some((th, ph)) => {
                    let ck = self.kernel_similarity(cx, th, ph, k)?;
                    cx.tape.add_broadcast(ck, gk)?
                }
                None => gk,
            };
            let z = cx.tape.node_mix(yk, m)?;
            acc = Some(match acc {
                Some(a) => cx.tape.add(a, z)?,
                None => z,
            });
        }
        Ok(acc.expect("at least one kernel"))
    }

    pub fn forward(&self, cx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let s = self.aggregate(cx, x)?;
        let mut h = self.bn.forward(cx, s)?;
        if let Some(r) = self.residual.forward(cx, x)? {
            h = cx.tape.add(h, r)?;
        }
        cx.tape.swish(h)
    }
}

impl<R: Real> Cost for Agc<R> {
    fn cost(&self, graphs: usize, frames: usize, nodes: usize) -> (Flops, usize) {
        let (g, t, v, k) = (graphs as u64, frames as u64, nodes as u64, KERNELS as u64);
        let out = g * self.c_out as u64 * t * v;
        let mut f = self.conv.cost(graphs, frames, nodes).0;
        f.graph = k * out * v;
        if self.similarity {
            let e = self.embed as u64;
            let embeddings = self.theta.cost(graphs, frames, nodes).0.conv + self.phi.cost(graphs, frames, nodes).0.conv;
            // product over (C', T) per node pair, then softmax and the sum with the graph
            f.similarity = embeddings + g * k * v * v * e * t + 2 * g * k * v * v;
        }
        // kernel sum, normalization, activation
        f.elementwise = (k - 1) * out + 2 * out;
        f += self.residual.cost(graphs, frames, nodes, self.c_out, frames);
        (f, frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Matrix;
    use crate::layers::Module;
    use crate::tensor::{finite_diff_check, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_value(shape: &[usize], rng: &mut ChaCha8Rng) -> Value<f64> {
        let n = shape.iter().product();
        Value::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_adjacency(v: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..KERNELS * v * v).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    fn zero_embeddings(agc: &mut Agc<f64>) {
        for conv in [&mut agc.theta, &mut agc.phi] {
            conv.weight.value.data_mut().iter_mut().for_each(|w| *w = 0.0);
            conv.bias.as_mut().unwrap().value.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
    }

    #[test]
    fn similarity_rows_sum_to_one_and_are_uniform_for_zero_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut agc = Agc::<f64>::new("agc", 3, 8, &random_adjacency(5, &mut rng), AgcOptions::default(), &mut rng);
        let x = random_value(&[2, 3, 4, 5], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut cx = Ctx::new(&mut tape, true);
        let c = agc.similarity_matrix(&mut cx, xv, 1).unwrap();
        for row in cx.tape.value(c).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        zero_embeddings(&mut agc);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let mut cx = Ctx::new(&mut tape, true);
        let c = agc.similarity_matrix(&mut cx, xv, 0).unwrap();
        assert!(cx.tape.value(c).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn similarity_matches_brute_force_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c_in, t, v) = (2, 3, 3);
        let agc = Agc::<f64>::new("agc", c_in, 8, &random_adjacency(v, &mut rng), AgcOptions::default(), &mut rng);
        let x = random_value(&[1, c_in, t, v], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut cx = Ctx::new(&mut tape, false);
        let k = 2;
        let got = agc.similarity_matrix(&mut cx, xv, k).unwrap();
        let got = cx.tape.value(got).to_f64_vec();

        let e = agc.embed;
        let emb = |conv: &Conv<f64>, o: usize, tt: usize, n: usize| {
            let w = conv.weight.value.data();
            let b = conv.bias.as_ref().unwrap().value.data();
            (0..c_in).map(|c| w[o * c_in + c] * x.data()[(c * t + tt) * v + n]).sum::<f64>() + b[o]
        };
        for i in 0..v {
            let logits: Vec<f64> = (0..v)
                .map(|j| {
                    let mut s = 0.0;
                    for c in 0..e {
                        for tt in 0..t {
                            s += emb(&agc.theta, k * e + c, tt, i) * emb(&agc.phi, k * e + c, tt, j);
                        }
                    }
                    s
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..v {
                assert!((got[i * v + j] - logits[j].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_pathway() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, v) = (3, 4);
        let mut adj = vec![0.0; KERNELS * v * v];
        adj[..v * v].copy_from_slice(&Matrix::identity(v).data);
        let opts = AgcOptions {
            residual: false,
            similarity: false,
        };
        let mut agc = Agc::<f64>::new("agc", c, c, &adj, opts, &mut rng);
        let w = agc.conv.weight.value.data_mut();
        w.iter_mut().for_each(|x| *x = 0.0);
        (0..c).for_each(|i| w[i * c + i] = 1.0);
        let x = random_value(&[2, c, 3, v], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut cx = Ctx::new(&mut tape, false);
        let agg = agc.aggregate(&mut cx, xv).unwrap();
        assert!(cx.tape.value(agg).max_abs_diff(&x) < 1e-15);
        // running statistics are (0, 1), so inference output is the activation of the input
        let y = agc.forward(&mut cx, xv).unwrap();
        let swish = |z: f64| z / (1.0 + (-z).exp());
        let want: Vec<f64> = x.data().iter().map(|&z| swish(z / (1.0 + 1e-5f64).sqrt())).collect();
        let diff = cx.tape.value(y).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);

        // with the similarity term on and zero embeddings, every kernel adds a uniform mix
        let opts = AgcOptions {
            residual: false,
            similarity: true,
        };
        let mut agc2 = Agc::<f64>::new("agc", c, c, &adj, opts, &mut rng);
        agc2.conv = agc.conv.clone();
        zero_embeddings(&mut agc2);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut cx = Ctx::new(&mut tape, false);
        let agg = agc2.aggregate(&mut cx, xv).unwrap();
        let got = cx.tape.value(agg).data();
        for row in 0..x.len() / v {
            let r = &x.data()[row * v..(row + 1) * v];
            let mean = r.iter().sum::<f64>() / v as f64;
            for i in 0..v {
                assert!((got[row * v + i] - (r[i] + mean)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_node_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let agc = Agc::<f64>::new("agc", 2, 4, &random_adjacency(5, &mut rng), AgcOptions::default(), &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Value::zeros(&[1, 2, 3, 6]));
        let mut cx = Ctx::new(&mut tape, false);
        assert!(agc.forward(&mut cx, x).is_err());
    }

    #[test]
    fn learned_adjacency_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let agc = Agc::<f64>::new("agc", 3, 4, &random_adjacency(5, &mut rng), AgcOptions::default(), &mut rng);
        let x = random_value(&[2, 3, 4, 5], &mut rng);
        let probe = random_value(&[2, 4, 4, 5], &mut rng);
        let b0 = random_value(&[KERNELS, 5, 5], &mut rng);
        let err = finite_diff_check(
            |tape, b| {
                let layer = &agc;
                let mut cx = Ctx::new(tape, true);
                cx.grads = false;
                let xv = cx.tape.constant(x.clone());
                let fixed = cx.buffer(&layer.adjacency);
                let m = cx.tape.add(fixed, b)?;
                let y = layer.conv.forward(&mut cx, xv)?;
                let mut acc = None;
                for k in 0..KERNELS {
                    let yk = cx.tape.slice(y, 1, k * 4, 4)?;
                    let gk = cx.tape.slice(m, 0, k, 1)?;
                    let gk = cx.tape.reshape(gk, &[5, 5])?;
                    let ck = layer.similarity_matrix(&mut cx, xv, k)?;
                    let mk = cx.tape.add_broadcast(ck, gk)?;
                    let z = cx.tape.node_mix(yk, mk)?;
                    acc = Some(match acc {
                        Some(a) => cx.tape.add(a, z)?,
                        None => z,
                    });
                }
                let h = layer.bn.forward(&mut cx, acc.unwrap())?;
                let out = cx.tape.swish(h)?;
                let p = cx.tape.constant(probe.clone());
                let prod = cx.tape.mul(out, p)?;
                cx.tape.sum(prod)
            },
            &b0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn parameter_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (ci, co, v) = (6, 16, 5);
        let agc = Agc::<f64>::new("agc", ci, co, &random_adjacency(v, &mut rng), AgcOptions::default(), &mut rng);
        let e = co / 4;
        let want = KERNELS * ci * co + KERNELS * v * v + 2 * KERNELS * (ci * e + e) + 2 * co + (ci * co + 2 * co);
        assert_eq!(agc.param_count(), want);
    }

    #[test]
    fn tiny_case_matches_direct_loop() {
        // one channel, one frame, two nodes; normalization is folded into the fixed matrices
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = 2;
        let adj = random_adjacency(v, &mut rng);
        let opts = AgcOptions {
            residual: false,
            similarity: false,
        };
        let agc = Agc::<f64>::new("agc", 1, 1, &adj, opts, &mut rng);
        let x = [0.7, -1.3];
        let mut tape = Tape::new();
        let xv = tape.constant(Value::from_f64(&[1, 1, 1, v], &x).unwrap());
        let mut cx = Ctx::new(&mut tape, false);
        let got = agc.aggregate(&mut cx, xv).unwrap();
        let got = cx.tape.value(got).data().to_vec();
        let w = agc.conv.weight.value.data();
        for i in 0..v {
            let mut want = 0.0;
            for j in 0..v {
                for k in 0..KERNELS {
                    want += adj[(k * v + i) * v + j] * x[j] * w[k];
                }
            }
            assert!((got[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn without_adaptive_terms_equals_fixed_graph_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (ci, co, t, v) = (3, 4, 2, 4);
        let adj = random_adjacency(v, &mut rng);
        let opts = AgcOptions {
            residual: false,
            similarity: false,
        };
        let agc = Agc::<f64>::new("agc", ci, co, &adj, opts, &mut rng);
        let x = random_value(&[2, ci, t, v], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut cx = Ctx::new(&mut tape, false);
        let got = agc.aggregate(&mut cx, xv).unwrap();
        let got = cx.tape.value(got).data().to_vec();
        let w = agc.conv.weight.value.data();
        let xd = x.data();
        for n in 0..2 {
            for o in 0..co {
                for tt in 0..t {
                    for i in 0..v {
                        let mut want = 0.0;
                        for k in 0..KERNELS {
                            for j in 0..v {
                                let y: f64 = (0..ci).map(|c| w[(k * co + o) * ci + c] * xd[((n * ci + c) * t + tt) * v + j]).sum();
                                want += adj[(k * v + i) * v + j] * y;
                            }
                        }
                        assert!((got[((n * co + o) * t + tt) * v + i] - want).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let agc = Agc::<f64>::new("agc", 3, 8, &random_adjacency(5, &mut rng), AgcOptions::default(), &mut rng);
        let x = random_value(&[2, 3, 4, 5], &mut rng);
        let probe = random_value(&[2, 8, 4, 5], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut cx = Ctx::new(&mut tape, true);
        let y = agc.forward(&mut cx, xv).unwrap();
        let p = cx.tape.constant(probe);
        let prod = cx.tape.mul(y, p).unwrap();
        let loss = cx.tape.sum(prod).unwrap();
        let bound = cx.bindings().clone();
        let grads = cx.tape.backward(loss).unwrap();
        let mut names = Vec::new();
        agc.visit(&mut |e| {
            if let crate::layers::Entry::Param(p) = e {
                names.push(p.name.clone());
            }
        });
        for name in names {
            let g = grads.get(bound[&name]);
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} has no gradient");
        }
    }
}
