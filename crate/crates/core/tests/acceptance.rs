//! End-to-end acceptance checks. Runs every criterion in order, prints one
//! PASS/FAIL line each, and exits non-zero when any fails.

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value as Json;

use interaction_gcn::features::{relative_distance_feature, StreamKind};
use interaction_gcn::graph::{adjacency_for, build_graph, default_reference_pose, GraphKind, BETA_NORM, KERNELS};
use interaction_gcn::layers::{Agc, AgcOptions, Ctx};
use interaction_gcn::model::{Model, ModelConfig};
use interaction_gcn::skeleton::{generate_synthetic_clip, synth_corpus, SkeletonClip};
use interaction_gcn::tensor::{Tape, Value};
use interaction_gcn::train::{ablation_row, evaluate, fit, lr_at, split_holdout, TrainConfig};

const IGCN: &str = env!("CARGO_BIN_EXE_igcn");

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn run(args: &[&str]) -> (Output, Duration) {
    let start = Instant::now();
    let out = Command::new(IGCN).args(args).output().expect("igcn runs");
    (out, start.elapsed())
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Runs `count` and returns the JSON report and the wall time.
fn count(dir: &Path, extra: &[&str]) -> Result<(Json, Duration), String> {
    let json = dir.join(format!("count{}.json", extra.join("_").replace(['-', '/', '.'], "")));
    let mut args = vec!["count", "--json", json.to_str().unwrap()];
    args.extend_from_slice(extra);
    let (out, took) = run(&args);
    if !out.status.success() {
        return Err(stderr(&out));
    }
    let text = std::fs::read_to_string(&json).map_err(|e| e.to_string())?;
    Ok((serde_json::from_str(&text).map_err(|e| e.to_string())?, took))
}

fn report_params(r: &Json) -> f64 {
    r["params"].as_f64().unwrap()
}

fn flops_total(f: &Json) -> f64 {
    ["conv", "graph", "similarity", "attention", "elementwise", "head"]
        .iter()
        .map(|k| f[*k].as_f64().unwrap())
        .sum()
}

fn stream<'a>(r: &'a Json, letter: &str) -> &'a Json {
    r["streams"].as_array().unwrap().iter().find(|s| s["stream"] == letter).unwrap()
}

const STREAM_PARAMS: [(&str, f64); 3] = [("A", 0.39e6), ("B", 0.32e6), ("C", 0.25e6)];
const STREAM_FLOPS: [(&str, f64); 3] = [("A", 2.08e9), ("B", 1.50e9), ("C", 1.07e9)];

fn parameter_budget(dir: &Path) -> Outcome {
    let (r, took) = match count(dir, &["--phi", "0"]) {
        Ok(v) => v,
        Err(e) => return Outcome::new(false, e),
    };
    let mut pass = took < Duration::from_secs(5);
    let mut detail = Vec::new();
    for (s, target) in STREAM_PARAMS {
        let p = stream(&r, s)["params"].as_f64().unwrap();
        pass &= within(p, target, 0.03);
        detail.push(format!("({s}) {:.3}M", p / 1e6));
    }
    let total = report_params(&r);
    pass &= within(total, 0.96e6, 0.02);
    detail.push(format!("total {:.3}M", total / 1e6));
    Outcome::new(pass, format!("{} in {:.2}s", detail.join(", "), took.as_secs_f64()))
}

fn flop_budget(dir: &Path) -> Outcome {
    let (r, took) = match count(dir, &["--phi", "0", "--frames", "150"]) {
        Ok(v) => v,
        Err(e) => return Outcome::new(false, e),
    };
    let mut pass = took < Duration::from_secs(5) && r["convention"].as_str().is_some_and(|c| c.contains("MAC"));
    let mut detail = Vec::new();
    for (s, target) in STREAM_FLOPS {
        let f = &stream(&r, s)["flops"];
        let g = flops_total(f);
        let ck = f["similarity"].as_f64().unwrap();
        pass &= within(g, target, 0.05) && ck > 0.0;
        detail.push(format!("({s}) {:.3}G [C_k {:.3}G]", g / 1e9, ck / 1e9));
    }
    let total = flops_total(&r["flops"]);
    pass &= within(total, 4.65e9, 0.05);
    detail.push(format!("total {:.3}G", total / 1e9));

    let cfg = dir.join("kernel9.toml");
    std::fs::write(&cfg, "[model]\ntemporal_kernel = 9\n").unwrap();
    match count(dir, &["--config", cfg.to_str().unwrap()]) {
        Ok((r9, _)) => detail.push(format!(
            "kernel 9: {:.3}M / {:.3}G",
            report_params(&r9) / 1e6,
            flops_total(&r9["flops"]) / 1e9
        )),
        Err(e) => {
            pass = false;
            detail.push(format!("kernel 9 failed: {e}"));
        }
    }
    Outcome::new(pass, format!("{} in {:.2}s", detail.join(", "), took.as_secs_f64()))
}

fn scaling(dir: &Path) -> Outcome {
    let mut points = Vec::new();
    for phi in 0..=4 {
        match count(dir, &["--phi", &phi.to_string()]) {
            Ok((r, _)) => points.push((report_params(&r), flops_total(&r["flops"]))),
            Err(e) => return Outcome::new(false, e),
        }
    }
    let (p4, f4) = points[4];
    let monotone = points.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 > w[0].1);
    let pass = within(p4, 6.01e6, 0.05) && within(f4, 22.5e9, 0.08) && monotone;
    let series: Vec<String> = points.iter().map(|(p, f)| format!("{:.2}M/{:.2}G", p / 1e6, f / 1e9)).collect();
    Outcome::new(
        pass,
        format!("B4 {:.3}M {:.2}G, monotone {monotone}: {}", p4 / 1e6, f4 / 1e9, series.join(" < ")),
    )
}

fn gradient_check() -> Outcome {
    let (out, took) = run(&["gradcheck", "--layer", "all"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let covered = ["learned", "theta.weight", "phi.weight", "expand", "depthwise", "project", "reduce"]
        .iter()
        .all(|n| text.contains(n));
    let summary = text.lines().find(|l| l.starts_with("pass:")).unwrap_or("no summary");
    let pass = out.status.success() && covered && took < Duration::from_secs(60);
    let detail = if out.status.success() { summary.to_string() } else { stderr(&out) };
    Outcome::new(pass, format!("{detail}, all tensors covered {covered}, {:.1}s", took.as_secs_f64()))
}

/// `out[n, o, t, i] = Σ_k Σ_j A_k[i, j] Σ_c W_k[o, c] x[n, c, t, j]`.
fn graph_conv_loop(x: &[f64], a: &[f64], w: &[f64], (n, c_in, c_out, t, v): (usize, usize, usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; n * c_out * t * v];
    for b in 0..n {
        for o in 0..c_out {
            for f in 0..t {
                for i in 0..v {
                    let mut acc = 0.0;
                    for k in 0..KERNELS {
                        for j in 0..v {
                            let aij = a[(k * v + i) * v + j];
                            for c in 0..c_in {
                                acc += aij * w[(k * c_out + o) * c_in + c] * x[((b * c_in + c) * t + f) * v + j];
                            }
                        }
                    }
                    out[((b * c_out + o) * t + f) * v + i] = acc;
                }
            }
        }
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dims = (
            rng.random_range(1..=2),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(2..=5),
        );
        let (n, c_in, c_out, t, v) = dims;
        let a: Vec<f64> = (0..KERNELS * v * v).map(|_| rng.random_range(0.0..1.0)).collect();
        let opts = AgcOptions {
            residual: false,
            similarity: false,
        };
        let agc = Agc::<f64>::new("agc", c_in, c_out, &a, opts, &mut rng);
        let x: Vec<f64> = (0..n * c_in * t * v).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, false);
        let xv = cx.tape.constant(Value::new(&[n, c_in, t, v], x.clone()).unwrap());
        let y = agc.aggregate(&mut cx, xv).unwrap();
        let got = cx.tape.value(y).data().to_vec();
        let want = graph_conv_loop(&x, &a, agc.conv.weight.value.data(), dims);
        let learned_zero = agc.learned.value.data().iter().all(|&b| b == 0.0);
        let err = if learned_zero && got.len() == want.len() {
            got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        worst = worst.max(err);
    }
    Outcome::new(worst <= 1e-10, format!("max abs difference {worst:.2e} over 100 instances"))
}

type Rigid = ([[f64; 3]; 3], [f64; 3]);

fn random_rigid(rng: &mut ChaCha8Rng) -> Rigid {
    // rotation from a random unit quaternion
    let q: [f64; 4] = loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.1 && norm <= 1.0 {
            break q.map(|c| c / norm);
        }
    };
    let [w, x, y, z] = q;
    let r = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    (r, std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
}

fn apply(clip: &SkeletonClip, bodies: &[usize], (r, s): &Rigid) -> SkeletonClip {
    let mut out = clip.clone();
    for &b in bodies {
        for p in out.bodies[b].joints.iter_mut() {
            let q = *p;
            *p = std::array::from_fn(|i| r[i][0] * q[0] + r[i][1] * q[1] + r[i][2] * q[2] + s[i]);
        }
    }
    out
}

fn rigid_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut both_worst, mut one_least) = (0.0f64, f64::INFINITY);
    for i in 0..50 {
        let clip = generate_synthetic_clip(i % 4, 500 + i as u64).unwrap();
        let base = relative_distance_feature(&clip).unwrap();
        let motion = random_rigid(&mut rng);
        let both = relative_distance_feature(&apply(&clip, &[0, 1], &motion)).unwrap();
        let one = relative_distance_feature(&apply(&clip, &[1], &motion)).unwrap();
        both_worst = both_worst.max(base.max_abs_diff(&both));
        one_least = one_least.min(base.max_abs_diff(&one));
    }
    Outcome::new(
        both_worst <= 1e-9 && one_least > 1e-3,
        format!("both bodies moved: max change {both_worst:.2e}; one body moved: smallest max change {one_least:.3}"),
    )
}

fn adjacency_properties() -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for kind in [GraphKind::Intra, GraphKind::Inter] {
        let adj = adjacency_for(kind, &default_reference_pose(kind)).unwrap();
        let graph = build_graph(kind);
        let v = adj.node_count();
        let mut asymmetric = Vec::new();
        let mut worst = 0.0f64;
        let mut finite = true;
        let mut partition_ok = true;
        for k in 0..KERNELS {
            let (bin, norm) = (&adj.binary[k], &adj.normalized[k]);
            if !norm.is_symmetric(1e-12) {
                asymmetric.push(k);
            }
            finite &= norm.data.iter().all(|x| x.is_finite());
            let degree: Vec<f64> = (0..v).map(|i| (0..v).map(|j| bin.data[i * v + j]).sum::<f64>() + BETA_NORM).collect();
            for i in 0..v {
                for j in 0..v {
                    let want = bin.data[i * v + j] / degree[i].sqrt() / degree[j].sqrt();
                    worst = worst.max((norm.data[i * v + j] - want).abs());
                }
            }
        }
        for i in 0..v {
            for j in 0..v {
                let root = adj.binary[0].data[i * v + j];
                let neighbour = adj.binary[1].data[i * v + j] + adj.binary[2].data[i * v + j];
                partition_ok &= root == f64::from(u8::from(i == j));
                partition_ok &= neighbour == f64::from(u8::from(graph.has_edge(i, j)));
            }
        }
        pass &= asymmetric.is_empty() && finite && worst <= 1e-12 && partition_ok;
        detail.push(format!(
            "{kind}: asymmetric kernels {asymmetric:?}, finite {finite}, normalization error {worst:.1e}, partition ok {partition_ok}"
        ));
    }
    let inter = build_graph(GraphKind::Inter);
    let (virt, total) = (inter.virtual_edges().len(), inter.edges.len());
    pass &= virt == 36 && total == 84;
    detail.push(format!("inter edges {virt} virtual / {total} total"));
    Outcome::new(pass, detail.join("; "))
}

fn schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let at = |e| lr_at(e, &cfg).unwrap();
    let cosine = |e: f64| 0.1 * 0.5 * (1.0 + (std::f64::consts::PI * (e - 10.0) / 40.0).cos());
    let checks = [
        (at(5), 5.0 / 10.0 * 0.1),
        (at(10), cosine(10.0)),
        (at(30), cosine(30.0)),
        (at(49), cosine(49.0)),
    ];
    let exact = checks.iter().all(|(a, b)| (a - b).abs() <= 1e-12);
    let values = [(at(5) - 0.05).abs(), (at(10) - 0.1).abs(), (at(30) - 0.05).abs()];
    let pass = exact && values.iter().all(|d| *d <= 1e-12) && at(49) > 0.0;
    Outcome::new(
        pass,
        format!("lr(5)={} lr(10)={} lr(30)={} lr(49)={:.3e}", at(5), at(10), at(30), at(49)),
    )
}

/// Clips per class of the synthetic corpus used for training.
const LEARN_CLIPS_PER_CLASS: usize = 20;
const LEARN_EPOCHS: usize = 30;
const LEARN_WARMUP: usize = 2;
const LEARN_BATCH: usize = 16;
const LEARN_BUDGET: Duration = Duration::from_secs(30 * 60);

fn desk_scale_learning() -> Outcome {
    let start = Instant::now();
    let clips = synth_corpus(4, LEARN_CLIPS_PER_CLASS, 0).unwrap();
    let (train, holdout) = split_holdout(clips, 0.2, 0);
    let cfg = TrainConfig {
        epochs: LEARN_EPOCHS,
        warmup_epochs: LEARN_WARMUP,
        batch_size: LEARN_BATCH,
        stop_at_train_accuracy: Some(0.95),
        ..TrainConfig::default()
    };
    let mut model = Model::<f32>::full(&ModelConfig::tiny(4), 0).unwrap();
    let report = match fit(&mut model, &train, &[], &cfg, 1, |log| {
        println!(
            "    epoch {:>3} lr {:.4} loss {:.4} running acc {:.3} ({:.0}s)",
            log.epoch, log.lr, log.loss, log.running_accuracy, log.seconds
        )
    }) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let train_acc = evaluate(&model, &train, LEARN_BATCH, 1).unwrap().accuracy;
    let held = evaluate(&model, &holdout, LEARN_BATCH, 1).unwrap();
    let row = |kinds: &[StreamKind]| ablation_row(&model, kinds, &train, &holdout, LEARN_BATCH, 1).unwrap();
    let intra = row(&[StreamKind::Intra]);
    let inter = row(&[StreamKind::InterMotion, StreamKind::InterDistance]);
    let (a, bc) = (intra.holdout_accuracy.unwrap(), inter.holdout_accuracy.unwrap());
    let took = start.elapsed();
    let pass = train_acc >= 0.95 && held.accuracy >= 0.80 && bc > a && took < LEARN_BUDGET;
    Outcome::new(
        pass,
        format!(
            "{} epochs, train {:.3}, held-out {:.3}; held-out (A) {:.3} vs (B)+(C) {:.3}; {:.0}s",
            report.epochs.len(),
            train_acc,
            held.accuracy,
            a,
            bc,
            took.as_secs_f64()
        ),
    )
}

fn train_once(dir: &Path, cfg: &Path, tag: &str) -> Result<(String, Vec<u8>), String> {
    let ckpt = dir.join(format!("{tag}.ckpt"));
    let (out, _) = run(&["train", "--config", cfg.to_str().unwrap(), "--out", ckpt.to_str().unwrap()]);
    if !out.status.success() {
        return Err(stderr(&out));
    }
    let metrics = std::fs::read_to_string(dir.join(format!("{tag}.ckpt.metrics.jsonl"))).map_err(|e| e.to_string())?;
    let first: Json = serde_json::from_str(metrics.lines().next().unwrap_or("")).map_err(|e| e.to_string())?;
    let last: Json = serde_json::from_str(metrics.lines().last().unwrap_or("")).map_err(|e| e.to_string())?;
    let losses = format!("mean {} / first batch {}", first["loss"], last["first_loss"]);
    Ok((losses, std::fs::read(&ckpt).map_err(|e| e.to_string())?))
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = dir.join("determinism.toml");
    std::fs::write(
        &cfg,
        "[model]\nnum_classes = 4\nwidth_divisor = 8\n\n[train]\nepochs = 2\nwarmup_epochs = 1\nbatch_size = 4\nholdout = 0.25\nsynthetic_clips_per_class = 3\n",
    )
    .unwrap();
    match (train_once(dir, &cfg, "first"), train_once(dir, &cfg, "second")) {
        (Ok((l1, c1)), Ok((l2, c2))) => Outcome::new(
            l1 == l2 && c1 == c2,
            format!("epoch-0 loss [{l1}] vs [{l2}], checkpoints identical {} ({} bytes)", c1 == c2, c1.len()),
        ),
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, e),
    }
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("parameter budget", Box::new(|| parameter_budget(dir.path()))),
        ("FLOP budget", Box::new(|| flop_budget(dir.path()))),
        ("compound scaling", Box::new(|| scaling(dir.path()))),
        ("gradient check", Box::new(gradient_check)),
        ("graph convolution oracle", Box::new(oracle_equivalence)),
        ("relative distance rigid invariance", Box::new(rigid_invariance)),
        ("adjacency properties", Box::new(adjacency_properties)),
        ("learning rate schedule", Box::new(schedule)),
        ("desk-scale learning and ablation", Box::new(desk_scale_learning)),
        ("determinism", Box::new(|| determinism(dir.path()))),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let outcome = check();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name}: {}", outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
