mod common;

use card_core::nn::{Adam, AdamConfig, Init, Mlp, ParamStore};
use card_core::{Activation, Error, Tape, Tensor, Var};
use common::{contract, grad_check, random, rng};
use proptest::prelude::*;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn away_from_zero(t: Tensor, gap: f64) -> Tensor {
    t.map(|v| if v.abs() < gap { 2.0 * gap.copysign(v) } else { v }).unwrap()
}

fn unary(x: Tensor, op: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    grad_check(&[x], H, FLOOR, |tape, v| {
        let out = op(tape, v[0]);
        contract(tape, out)
    })
}

fn binary(a: Tensor, b: Tensor, op: impl Fn(&mut Tape, Var, Var) -> Var) -> f64 {
    grad_check(&[a, b], H, FLOOR, |tape, v| {
        let out = op(tape, v[0], v[1]);
        contract(tape, out)
    })
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = random(5, 3, 1.0, &mut r);
    let b = random(3, 4, 1.0, &mut r);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    let c = tape.value(c);
    for i in 0..5 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a.get(i, k) * b.get(k, j);
            }
            assert!((c.get(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_values() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::zeros(1, 1));
    let lr = tape.activation(z, Activation::LeakyRelu(0.01)).unwrap();
    let sg = tape.activation(z, Activation::Sigmoid).unwrap();
    let g = tape.gaussian_log_pdf(z, z, z).unwrap();
    assert_eq!(tape.value(lr).item(), 0.0);
    assert_eq!(tape.value(sg).item(), 0.5);
    assert!((tape.value(g).item() + 0.918_938_533_204_672_7).abs() < 1e-12);
}

#[test]
fn sum_and_squared_norm_gradients() {
    let mut r = rng(2);
    let w = random(3, 4, 2.0, &mut r);
    let mut tape = Tape::new();
    let v = tape.leaf(w.clone());
    let s = tape.sum(v).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(v).unwrap(), &Tensor::filled(3, 4, 1.0));

    let mut tape = Tape::new();
    let v = tape.leaf(w.clone());
    let sq = tape.activation(v, Activation::Square).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(v).unwrap().max_abs_diff(&w.scale(2.0)) < 1e-12);
}

#[test]
fn every_op_matches_finite_differences() {
    let mut r = rng(3);
    let x = random(4, 3, 1.5, &mut r);
    let y = random(4, 3, 1.5, &mut r);
    let mut worst = Vec::new();

    worst.push(("matmul", binary(x.clone(), random(3, 2, 1.0, &mut r), |t, a, b| t.matmul(a, b).unwrap())));
    worst.push(("add_row", binary(x.clone(), random(1, 3, 1.0, &mut r), |t, a, b| t.add_row(a, b).unwrap())));
    worst.push(("add_col", binary(x.clone(), random(4, 1, 1.0, &mut r), |t, a, b| t.add_col(a, b).unwrap())));
    worst.push(("mul_col", binary(x.clone(), random(4, 1, 1.0, &mut r), |t, a, b| t.mul_col(a, b).unwrap())));
    worst.push(("add", binary(x.clone(), y.clone(), |t, a, b| t.add(a, b).unwrap())));
    worst.push(("sub", binary(x.clone(), y.clone(), |t, a, b| t.sub(a, b).unwrap())));
    worst.push(("mul", binary(x.clone(), y.clone(), |t, a, b| t.mul(a, b).unwrap())));
    worst.push(("scale", unary(x.clone(), |t, a| t.scale(a, -1.7).unwrap())));
    worst.push(("add_scalar", unary(x.clone(), |t, a| t.add_scalar(a, 0.3).unwrap())));
    let kinked = away_from_zero(x.clone(), 1e-3);
    worst.push(("leaky_relu", unary(kinked.clone(), |t, a| t.activation(a, Activation::LeakyRelu(0.01)).unwrap())));
    for act in [Activation::Tanh, Activation::Sigmoid, Activation::Softplus, Activation::Exp, Activation::Square] {
        worst.push(("activation", unary(x.clone(), move |t, a| t.activation(a, act).unwrap())));
    }
    let clampable = x.map(|v| if (v.abs() - 0.5).abs() < 1e-3 { v * 1.01 } else { v }).unwrap();
    worst.push(("clamp", unary(clampable, |t, a| t.clamp(a, -0.5, 0.5).unwrap())));
    worst.push(("sum", unary(x.clone(), |t, a| t.sum(a).unwrap())));
    worst.push(("mean", unary(x.clone(), |t, a| t.mean(a).unwrap())));
    worst.push(("sum_rows", unary(x.clone(), |t, a| t.sum_rows(a).unwrap())));
    worst.push(("slice_cols", unary(x.clone(), |t, a| t.slice_cols(a, 1, 3).unwrap())));
    worst.push(("concat_cols", binary(x.clone(), random(4, 2, 1.0, &mut r), |t, a, b| t.concat_cols(&[b, a, b]).unwrap())));
    worst.push((
        "gaussian_log_pdf",
        grad_check(&[x.clone(), y.clone(), random(4, 3, 1.0, &mut r)], H, FLOOR, |t, v| {
            let out = t.gaussian_log_pdf(v[0], v[1], v[2]).unwrap();
            contract(t, out)
        }),
    ));
    let units = 3;
    worst.push(("dsf", binary(random(5, 1, 2.0, &mut r), random(5, 3 * units, 1.0, &mut r), move |t, z, p| t.dsf(z, p, units).unwrap())));

    let centered = card_core::kernels::centered_delta_gram(&[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
    let c2 = centered.clone();
    worst.push(("hsic", unary(random(6, 2, 1.0, &mut r), move |t, a| t.hsic_term(a, c2.clone(), 0.7).unwrap())));
    worst.push(("hsic_median", unary(random(6, 2, 1.0, &mut r), move |t, a| t.hsic_term_median(a, centered.clone()).unwrap())));
    worst.push(("mmd2", binary(random(4, 2, 1.0, &mut r), random(5, 2, 1.0, &mut r), |t, a, b| t.mmd2(a, b, 0.9).unwrap())));

    for (name, err) in &worst {
        assert!(*err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn three_layer_mlp_gradient() {
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "net", &[3, 5, 4, 2], Activation::Tanh, Init::Scaled(1.0), &mut r);
    let x = random(6, 3, 1.0, &mut r);
    let params: Vec<Tensor> = store.tensors().to_vec();
    let err = grad_check(&params, H, FLOOR, |tape, vars| {
        let xv = tape.leaf(x.clone());
        let mut h = xv;
        for layer in 0..3 {
            h = tape.matmul(h, vars[2 * layer]).unwrap();
            h = tape.add_row(h, vars[2 * layer + 1]).unwrap();
            if layer < 2 {
                h = tape.activation(h, Activation::Tanh).unwrap();
            }
        }
        contract(tape, h)
    });
    assert!(err < TOL, "relative error {err:e}");

    // The hand-rolled graph above agrees with the library forward pass.
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = mlp.forward(&mut tape, &bound, xv).unwrap();
    assert!(tape.value(out).max_abs_diff(&mlp.eval(&store, &x).unwrap()) < 1e-12);
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::zeros(2, 2));
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn overflow_is_reported() {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::filled(1, 1, 1000.0));
    assert!(matches!(tape.activation(v, Activation::Exp), Err(Error::NonFinite { .. })));
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::new(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
    let mut adam = Adam::new(AdamConfig::default(), &store);
    adam.step(&mut store, &[Tensor::zeros(1, 3)]).unwrap();
    assert_eq!(store.tensors()[0].data(), &[1.0, -2.0, 0.5]);

    let mut adam = Adam::new(AdamConfig::default(), &store);
    adam.step(&mut store, &[Tensor::new(1, 3, vec![3.0, -0.2, 1e-3]).unwrap()]).unwrap();
    let moved: Vec<f64> = store.tensors()[0].data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| b - a).collect();
    for (m, sign) in moved.iter().zip([1.0, -1.0, 1.0]) {
        assert!((m - sign * 1e-3).abs() < 1e-7, "{m}");
    }
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for k in 0..50 {
            let g = store.tensors()[0].map(|v| v * (k as f64).sin()).unwrap();
            adam.step(&mut store, &[g]).unwrap();
        }
        store.tensors()[0].clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn composite_graph_matches_finite_differences(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..4) {
        let mut r = rng(seed);
        let a = random(rows, cols, 2.0, &mut r);
        let b = random(cols, 2, 1.0, &mut r);
        let c = random(rows, 2, 1.0, &mut r);
        let err = grad_check(&[a, b, c], H, FLOOR, |t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            let s = t.activation(m, Activation::Softplus).unwrap();
            let p = t.mul(s, v[2]).unwrap();
            let th = t.activation(p, Activation::Tanh).unwrap();
            let g = t.gaussian_log_pdf(th, v[2], m).unwrap();
            contract(t, g)
        });
        prop_assert!(err < TOL, "relative error {:e}", err);
    }

    #[test]
    fn dsf_matches_finite_differences(seed in any::<u64>(), units in 1usize..6) {
        let mut r = rng(seed);
        let z = random(3, 1, 3.0, &mut r);
        let p = random(3, 3 * units, 2.0, &mut r);
        let err = grad_check(&[z, p], H, FLOOR, move |t, v| {
            let out = t.dsf(v[0], v[1], units).unwrap();
            contract(t, out)
        });
        prop_assert!(err < TOL, "relative error {:e}", err);
    }
}
