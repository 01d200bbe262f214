//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs at reduced scale by default so `cargo test` stays within minutes on a
//! single core. `CARD_FULL_SCALE=1` uses the full protocol (40k rows, 8
//! trials). `CARD_ACCEPTANCE_STRICT=1` makes any failing criterion fail the
//! test binary; without it failures are reported but do not abort the run.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use card::commands;
use card::RunConfig;
use card_core::cvae::{CvaeConfig, CvaeModel};
use card_core::flows::{FlowConfig, FlowPrior};
use card_core::kernels::centered_delta_gram;
use card_core::nn::ParamStore;
use card_core::reward::{bt_nll, eval_accuracy, Featurizer, Pairs, RandomReward};
use card_core::rng::seeded;
use card_core::synth::{CorpusKind, CorpusWorld, LatentSpec, WorldConfig};
use card_core::{Activation, Tape, Tensor, Var};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn gates(gates: &[card::stats::Gate]) -> Outcome {
    let detail = gates
        .iter()
        .map(|g| format!("[{}] {}: {}", if g.passed { "ok" } else { "x" }, g.name, g.detail))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(gates.iter().all(|g| g.passed), detail)
}

fn random(rows: usize, cols: usize, scale: f64, r: &mut impl Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| scale * (2.0 * r.random::<f64>() - 1.0)).collect()).unwrap()
}

/// Largest relative error of reverse-mode gradients against central
/// differences, over every entry of every input.
fn grad_error(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let (h, floor) = (1e-5, 1e-4);
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input);
        for i in 0..input.len() {
            let (r, c) = (i / input.cols(), i % input.cols());
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].set(r, c, input.get(r, c) + h);
            minus[k].set(r, c, input.get(r, c) - h);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
    }
    worst
}

/// Contracts a non-scalar output against fixed distinct weights.
fn contract(tape: &mut Tape, out: Var) -> Var {
    let v = tape.value(out);
    let w = Tensor::new(v.rows(), v.cols(), (0..v.len()).map(|i| 0.3 + 0.7 * ((i * 7 % 11) as f64 / 11.0)).collect()).unwrap();
    let w = tape.leaf(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

fn criterion_1() -> Outcome {
    let mut r = seeded(101);
    let x = random(4, 3, 1.5, &mut r);
    // Keep entries off the kinks of leaky-ReLU and clamp.
    let x = x.map(|v| if v.abs() < 1e-2 || (v.abs() - 0.5).abs() < 1e-2 { v + 0.05 } else { v }).unwrap();
    let y = random(4, 3, 1.5, &mut r);
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let unary = |f: fn(&mut Tape, Var) -> Var| -> Build { Box::new(move |t: &mut Tape, v: &[Var]| { let o = f(t, v[0]); contract(t, o) }) };
    let binary = |f: fn(&mut Tape, Var, Var) -> Var| -> Build {
        Box::new(move |t: &mut Tape, v: &[Var]| {
            let o = f(t, v[0], v[1]);
            contract(t, o)
        })
    };
    let mut cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        ("matmul", vec![x.clone(), random(3, 2, 1.0, &mut r)], binary(|t, a, b| t.matmul(a, b).unwrap())),
        ("add_row", vec![x.clone(), random(1, 3, 1.0, &mut r)], binary(|t, a, b| t.add_row(a, b).unwrap())),
        ("add_col", vec![x.clone(), random(4, 1, 1.0, &mut r)], binary(|t, a, b| t.add_col(a, b).unwrap())),
        ("mul_col", vec![x.clone(), random(4, 1, 1.0, &mut r)], binary(|t, a, b| t.mul_col(a, b).unwrap())),
        ("add", vec![x.clone(), y.clone()], binary(|t, a, b| t.add(a, b).unwrap())),
        ("sub", vec![x.clone(), y.clone()], binary(|t, a, b| t.sub(a, b).unwrap())),
        ("mul", vec![x.clone(), y.clone()], binary(|t, a, b| t.mul(a, b).unwrap())),
        ("scale", vec![x.clone()], unary(|t, a| t.scale(a, -1.7).unwrap())),
        ("add_scalar", vec![x.clone()], unary(|t, a| t.add_scalar(a, 0.3).unwrap())),
        ("leaky_relu", vec![x.clone()], unary(|t, a| t.activation(a, Activation::LeakyRelu(0.01)).unwrap())),
        ("tanh", vec![x.clone()], unary(|t, a| t.activation(a, Activation::Tanh).unwrap())),
        ("sigmoid", vec![x.clone()], unary(|t, a| t.activation(a, Activation::Sigmoid).unwrap())),
        ("softplus", vec![x.clone()], unary(|t, a| t.activation(a, Activation::Softplus).unwrap())),
        ("exp", vec![x.clone()], unary(|t, a| t.activation(a, Activation::Exp).unwrap())),
        ("square", vec![x.clone()], unary(|t, a| t.activation(a, Activation::Square).unwrap())),
        ("clamp", vec![x.clone()], unary(|t, a| t.clamp(a, -0.5, 0.5).unwrap())),
        ("sum", vec![x.clone()], unary(|t, a| t.sum(a).unwrap())),
        ("mean", vec![x.clone()], unary(|t, a| t.mean(a).unwrap())),
        ("sum_rows", vec![x.clone()], unary(|t, a| t.sum_rows(a).unwrap())),
        ("slice_cols", vec![x.clone()], unary(|t, a| t.slice_cols(a, 1, 3).unwrap())),
        ("concat_cols", vec![x.clone(), y.clone()], binary(|t, a, b| t.concat_cols(&[b, a]).unwrap())),
        (
            "gaussian_log_pdf",
            vec![x.clone(), y.clone(), random(4, 3, 1.0, &mut r)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let o = t.gaussian_log_pdf(v[0], v[1], v[2]).unwrap();
                contract(t, o)
            }),
        ),
        ("dsf", vec![random(5, 1, 2.0, &mut r), random(5, 9, 1.0, &mut r)], binary(|t, z, p| t.dsf(z, p, 3).unwrap())),
        ("mmd2", vec![random(4, 2, 1.0, &mut r), random(5, 2, 1.0, &mut r)], binary(|t, a, b| t.mmd2(a, b, 0.9).unwrap())),
    ];
    let centered = centered_delta_gram(&[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
    let c2 = centered.clone();
    cases.push((
        "hsic",
        vec![random(6, 2, 1.0, &mut r)],
        Box::new(move |t: &mut Tape, v: &[Var]| t.hsic_term(v[0], c2.clone(), 0.7).unwrap()),
    ));
    cases.push((
        "hsic_median",
        vec![random(6, 2, 1.0, &mut r)],
        Box::new(move |t: &mut Tape, v: &[Var]| t.hsic_term_median(v[0], centered.clone()).unwrap()),
    ));
    let mut worst_op = ("", 0.0f64);
    for (name, inputs, build) in &cases {
        let e = grad_error(inputs, build.as_ref());
        if e > worst_op.1 {
            worst_op = (name, e);
        }
    }

    // Full loss on a 4-sample batch, every parameter moved off its init.
    let spec = LatentSpec::new(4, 4).unwrap();
    let mut m = CvaeModel::new(spec, 8, &CvaeConfig::default(), 0.1, 3.0, 3).unwrap();
    for t in m.store_mut().tensors_mut() {
        let bump = random(t.rows(), t.cols(), 0.05, &mut r);
        *t = Tensor::new(t.rows(), t.cols(), t.data().iter().zip(bump.data()).map(|(a, b)| a + b).collect()).unwrap();
    }
    let t = random(4, 8, 1.5, &mut r);
    let s = vec![0.0, 1.0, 1.0, 0.0];
    let noise = random(4, 8, 1.0, &mut r);
    let (_, grads) = m.loss_and_grads(&t, &s, &noise).unwrap();
    let h = 1e-5;
    let mut probe = m.clone();
    let mut worst_loss: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let (row, col) = (i / g.cols(), i % g.cols());
            let base = m.store().tensors()[k].get(row, col);
            probe.store_mut().tensors_mut()[k].set(row, col, base + h);
            let up = probe.loss(&t, &s, &noise).unwrap().total;
            probe.store_mut().tensors_mut()[k].set(row, col, base - h);
            let down = probe.loss(&t, &s, &noise).unwrap().total;
            probe.store_mut().tensors_mut()[k].set(row, col, base);
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[i];
            worst_loss = worst_loss.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
        }
    }
    outcome(
        worst_op.1 < 1e-4 && worst_loss < 1e-3,
        format!(
            "{} ops, worst {} at {:.2e} (< 1e-4); full loss {:.2e} (< 1e-3)",
            cases.len(),
            worst_op.0,
            worst_op.1,
            worst_loss
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut r = seeded(202);
    let spec = LatentSpec::new(2, 2).unwrap();
    let steps = 40_000;
    let dz = 20.0 / steps as f64;
    let grid = Tensor::column((0..=steps).map(|i| -10.0 + dz * i as f64).collect()).unwrap();
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let mut store = ParamStore::new();
        let p = FlowPrior::new(&mut store, spec, FlowConfig::default(), &mut r).unwrap();
        for t in store.tensors_mut() {
            *t = random(t.rows(), t.cols(), 0.5, &mut r);
        }
        let node = trial % 4;
        let c: Vec<f64> = (0..p.cond_width(node)).map(|_| r.random_range(-1.5..1.5)).collect();
        let cond = Tensor::new(grid.rows(), c.len(), (0..grid.rows()).flat_map(|_| c.clone()).collect()).unwrap();
        let dens: Vec<f64> = p
            .flow_forward(&store, node, &grid, &cond)
            .unwrap()
            .into_iter()
            .map(|(e, ld)| (-0.5 * (e * e + (2.0 * std::f64::consts::PI).ln()) + ld).exp())
            .collect();
        let mass = dz * (dens.iter().sum::<f64>() - 0.5 * (dens[0] + dens[dens.len() - 1]));
        worst = worst.max((mass - 1.0).abs());
    }
    let mut store = ParamStore::new();
    let p = FlowPrior::new(&mut store, spec, FlowConfig::default(), &mut r).unwrap();
    let mut identity = true;
    for node in 0..4 {
        let z = random(50, 1, 4.0, &mut r);
        let cond = random(50, p.cond_width(node), 1.0, &mut r);
        identity &= p.flow_forward(&store, node, &z, &cond).unwrap().iter().all(|&(_, ld)| ld == 0.0);
    }
    outcome(
        worst <= 0.01 && identity,
        format!("20 conditionals, worst |mass − 1| = {worst:.2e}; identity log-det exactly 0: {identity}"),
    )
}

/// Smaller sizes for the training-heavy criteria unless full scale is asked for.
fn scaled(full: bool, out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        out: out.to_path_buf(),
        ..RunConfig::default()
    };
    if !full {
        cfg.trials = 4;
        cfg.synth.n_per_s = 2500;
        cfg.bench.items = 6000;
        cfg.bench.train_size = 2000;
        cfg.bench.validation_size = 500;
        cfg.bench.test_size = 1000;
        cfg.bench.probe_size = 1000;
        cfg.ident.eval_rows = 1500;
    }
    cfg
}

fn criterion_7() -> Outcome {
    let exact = [-3.0, 0.0, 0.25, 17.0].iter().all(|&r| bt_nll(r, r) == std::f64::consts::LN_2);
    let n = 10_000;
    let band = 3.0 * (0.25 / n as f64).sqrt();
    let mut worst: f64 = 0.0;
    let mut corpora = 0;
    let bench = card::config::BenchConfig::default();
    for (kind, shifts, p_train) in [
        (CorpusKind::Sycophancy, &bench.sycophancy_shifts, bench.sycophancy_p_train),
        (CorpusKind::Concept, &bench.concept_shifts, bench.concept_p_train),
    ] {
        let world = CorpusWorld::build(kind, &WorldConfig::default(), 700).unwrap();
        let mut rr = RandomReward::new(701);
        for (i, &p) in shifts.iter().chain([p_train, 0.5].iter()).enumerate() {
            let ds = world.preference_corpus(n, p, 800 + i as u64).unwrap();
            let acc = eval_accuracy(&mut rr, &Pairs::from_dataset(&ds, Featurizer::Raw, None).unwrap()).unwrap();
            worst = worst.max((acc - 0.5).abs());
            corpora += 1;
        }
    }
    outcome(
        exact && worst <= band,
        format!("bt_nll(r, r) = ln 2 exactly: {exact}; random accuracy on {corpora} corpora, max |acc − 0.5| = {worst:.4} (3 SD = {band:.4})"),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_everything(cfg: &RunConfig) {
    commands::gen_synth(cfg).unwrap();
    commands::ident(cfg).unwrap();
    commands::bench(cfg, CorpusKind::Sycophancy).unwrap();
    commands::bench(cfg, CorpusKind::Concept).unwrap();
    commands::ablation(cfg, CorpusKind::Concept).unwrap();
    commands::multilabeler(cfg).unwrap();
}

fn criterion_8(root: &Path) -> Outcome {
    let mut cfg = RunConfig {
        out: root.join("determinism"),
        trials: 2,
        seed: 5,
        jobs: 1,
        ..RunConfig::default()
    };
    cfg.synth.n_per_s = 200;
    cfg.cvae.train.epochs = 2;
    cfg.ident.eval_rows = 200;
    cfg.ident.hsic_rows = 100;
    cfg.ident.permutations = 50;
    cfg.reward.epochs = 2;
    cfg.reward.hidden = vec![16, 16];
    cfg.bench.items = 400;
    cfg.bench.train_size = 300;
    cfg.bench.validation_size = 100;
    cfg.bench.test_size = 200;
    cfg.bench.probe_size = 200;
    run_everything(&cfg);
    let first = snapshot(&cfg.out);
    // Same config and seed, different worker count.
    cfg.jobs = 2;
    run_everything(&cfg);
    let second = snapshot(&cfg.out);
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    outcome(
        differing.is_empty() && first.len() == second.len(),
        format!("{} files from 6 commands compared byte for byte across two runs; differing: {differing:?}", first.len()),
    )
}

fn main() {
    let full = std::env::var("CARD_FULL_SCALE").is_ok_and(|v| v == "1");
    let strict = std::env::var("CARD_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let root = tempfile::tempdir().unwrap();
    let scale = if full { "full" } else { "reduced" };
    println!("acceptance suite ({scale} scale)");

    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut timed = |id: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let t0 = Instant::now();
        let o = f();
        let secs = t0.elapsed().as_secs_f64();
        println!("criterion {id} {}: {name}: {} ({secs:.0}s)", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o, secs));
    };

    timed(1, "gradient correctness", &criterion_1);
    timed(2, "flow-prior normalization", &criterion_2);
    timed(3, "synthetic identifiability", &|| {
        let cfg = scaled(full, &root.path().join("c3"));
        gates(&commands::ident(&cfg).unwrap().gates)
    });
    timed(4, "multi-labeler recovery", &|| {
        let cfg = RunConfig {
            out: root.path().join("c4"),
            ..RunConfig::default()
        };
        gates(&commands::multilabeler(&cfg).unwrap().gates)
    });
    timed(5, "sycophancy benchmark orderings", &|| {
        let cfg = scaled(full, &root.path().join("c5"));
        gates(&commands::bench(&cfg, CorpusKind::Sycophancy).unwrap().gates)
    });
    timed(6, "concept benchmark orderings", &|| {
        let cfg = scaled(full, &root.path().join("c6"));
        let bench = commands::bench(&cfg, CorpusKind::Concept).unwrap();
        let ablation = commands::ablation(&cfg, CorpusKind::Concept).unwrap();
        let mut all = bench.gates.clone();
        all.extend(ablation.gates.iter().cloned());
        gates(&all)
    });
    timed(7, "baseline sanity", &criterion_7);
    timed(8, "determinism", &|| criterion_8(root.path()));

    println!();
    for (id, name, o, secs) in &results {
        println!("criterion {id} {:<4} {name} ({secs:.0}s)", if o.passed { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.2.passed).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
