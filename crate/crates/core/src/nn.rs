//! Parameter storage, multilayer perceptrons, and the Adam optimizer.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::tape::{Activation, Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Overwrites every tensor from `(name, tensor)` pairs; names and shapes
    /// must match the registered layout exactly.
    pub fn load(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in named {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
            if self.tensors[idx].shape() != t.shape() {
                return Err(shape_err(
                    "ParamStore::load",
                    format!("{name}: {:?} vs {:?}", self.tensors[idx].shape(), t.shape()),
                ));
            }
            self.tensors[idx] = t.clone();
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Gradients aligned with the store, zeros for unreachable parameters.
    pub fn collect_grads(&self, grads: &Gradients, bound: &Bound) -> Result<Vec<Tensor>> {
        grads.check_finite()?;
        Ok(self
            .tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| grads.get_or_zeros(v, t))
            .collect())
    }
}

/// Parameters of a [`ParamStore`] as placed on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// How an MLP layer is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Gaussian with variance `gain / fan_in`.
    Scaled(f64),
    Zeros,
}

fn init_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(rows, cols),
        Init::Scaled(gain) => {
            let sd = math::sqrt(gain / rows.max(1) as f64);
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    sd * z
                })
                .collect();
            Tensor::from_raw(rows, cols, data)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// Fully connected network; the output layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    widths: Vec<usize>,
    activation: Activation,
}

impl Mlp {
    /// Registers a network with layer widths `widths` (input first) in
    /// `store`, naming tensors `{prefix}.{layer}.w` / `.b`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        activation: Activation,
        output_init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let gain = match activation {
            Activation::LeakyRelu(_) => 2.0,
            _ => 1.0,
        };
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if i == last { output_init } else { Init::Scaled(gain) };
                let weight = store.add(format!("{prefix}.{i}.w"), init_tensor(w[0], w[1], init, rng));
                let bias = store.add(format!("{prefix}.{i}.b"), Tensor::zeros(1, w[1]));
                Layer { weight, bias }
            })
            .collect();
        Self {
            layers,
            widths: widths.to_vec(),
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Output-layer bias, for callers that want a custom starting point.
    pub fn output_bias(&self) -> ParamId {
        self.layers.last().unwrap().bias
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = tape.matmul(h, bound.var(layer.weight))?;
            h = tape.add_row(h, bound.var(layer.bias))?;
            if i < last {
                h = tape.activation(h, self.activation)?;
            }
        }
        Ok(h)
    }

    /// Forward pass without keeping a tape around.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = store.get(layer.weight);
            let b = store.get(layer.bias);
            h = h.matmul(w)?;
            let cols = h.cols();
            let act = self.activation;
            for (j, v) in h.data_mut().iter_mut().enumerate() {
                *v += b.data()[j % cols];
                if i < last {
                    *v = act.apply(*v);
                }
            }
        }
        if h.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Mlp::eval" });
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        Self {
            cfg,
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(shape_err("adam_step", format!("{} grads for {} params", grads.len(), params.len())));
        }
        self.step += 1;
        self.beta1_pow *= self.cfg.beta1;
        self.beta2_pow *= self.cfg.beta2;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - self.beta1_pow;
        let c2 = 1.0 - self.beta2_pow;
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(shape_err("adam_step", format!("param {i}: {:?} vs {:?}", p.shape(), g.shape())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.cfg.lr * mhat / (math::sqrt(vhat) + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Human-readable name of an activation, used in manifests.
pub fn activation_name(a: Activation) -> String {
    match a {
        Activation::LeakyRelu(s) => format!("leaky_relu({s})"),
        Activation::Tanh => "tanh".to_string(),
        Activation::Sigmoid => "sigmoid".to_string(),
        Activation::Softplus => "softplus".to_string(),
        Activation::Exp => "exp".to_string(),
        Activation::Square => "square".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(1, 3, alloc::vec![0.5, -1.0, 2.0]).unwrap());
        let before = store.clone();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[Tensor::zeros(1, 3)]).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(1, 3, alloc::vec![0.5, -1.0, 2.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = Tensor::new(1, 3, alloc::vec![0.3, -7.0, 1e-2]).unwrap();
        adam.step(&mut store, &[g.clone()]).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε) in each coordinate.
        let expect = [0.5 - 1e-3 * 0.3 / (0.3 + 1e-8), -1.0 + 1e-3 * 7.0 / (7.0 + 1e-8), 2.0 - 1e-3 * 1e-2 / (1e-2 + 1e-8)];
        for (a, b) in store.tensors()[0].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_eval_matches_tape_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 5, 2], Activation::LeakyRelu(0.01), Init::Scaled(1.0), &mut rng);
        let x = Tensor::new(2, 3, alloc::vec![0.1, -0.4, 1.0, 2.0, 0.0, -3.0]).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = mlp.forward(&mut tape, &bound, xv).unwrap();
        assert!(tape.value(y).max_abs_diff(&mlp.eval(&store, &x).unwrap()) < 1e-14);
    }
}
