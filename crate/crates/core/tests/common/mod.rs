#![allow(dead_code)]

use card_core::nn::{Bound, ParamStore};
use card_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()).unwrap()
}

/// Sums `out` against fixed weights so every output entry gets a distinct
/// upstream gradient.
pub fn contract(tape: &mut Tape, out: Var) -> Var {
    let v = tape.value(out);
    let w = Tensor::new(v.rows(), v.cols(), (0..v.len()).map(|i| 0.3 + 0.7 * ((i * 7 % 11) as f64 / 11.0)).collect()).unwrap();
    let w = tape.leaf(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

/// Largest relative error between reverse-mode gradients and central
/// differences (step `h`) over every input entry. The denominator is floored
/// at `floor` so entries with vanishing gradient are compared absolutely.
pub fn grad_check(inputs: &[Tensor], h: f64, floor: f64, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
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
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let (r, c) = (i / input.cols(), i % input.cols());
            plus[k].set(r, c, input.get(r, c) + h);
            minus[k].set(r, c, input.get(r, c) - h);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

/// [`grad_check`] over every tensor of a parameter store.
pub fn store_grad_check(
    store: &ParamStore,
    h: f64,
    floor: f64,
    build: impl Fn(&mut Tape, &ParamStore, &Bound) -> Var,
) -> f64 {
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let out = build(&mut tape, s, &bound);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = build(&mut tape, store, &bound);
    let grads = store.collect_grads(&tape.backward(out).unwrap(), &bound).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for (k, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let (r, c) = (i / g.cols(), i % g.cols());
            let base = store.tensors()[k].get(r, c);
            probe.tensors_mut()[k].set(r, c, base + h);
            let up = eval(&probe);
            probe.tensors_mut()[k].set(r, c, base - h);
            let down = eval(&probe);
            probe.tensors_mut()[k].set(r, c, base);
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
    }
    worst
}
