//! Stage 1: a VAE with a conditional flow prior and an HSIC penalty that
//! pushes the bias-free block of the posterior towards independence from the
//! surrogate.
//!
//! The per-batch objective is
//!
//! ```text
//! total = recon + β·kl + λ·hsic
//! ```
//!
//! where `recon` is the unit-variance Gaussian NLL of the standardized
//! features, `kl` is a one-sample estimate of `E_q[log q(ẑ|t) − log p(ẑ|s)]`,
//! and `hsic` is the biased HSIC between the sampled `ẑ_C` rows and `s`.
//! All three are averaged over the batch rows.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::flows::{FlowConfig, FlowPrior};
use crate::kernels::centered_delta_gram;
use crate::math;
use crate::nn::{Adam, AdamConfig, Bound, Init, Mlp, ParamStore};
use crate::rng::{derive, seeded};
use crate::synth::{LatentSpec, SynthDataset};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct CvaeConfig {
    /// Hidden widths shared by encoder and decoder.
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub flow: FlowConfig,
    pub log_var_min: f64,
    pub log_var_max: f64,
    /// Fixed decoder log-variance, in standardized feature units.
    pub decoder_log_var: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            leaky_slope: 0.01,
            flow: FlowConfig::default(),
            log_var_min: -8.0,
            log_var_max: 8.0,
            decoder_log_var: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub beta: f64,
    pub lambda: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 240,
            epochs: 30,
            beta: 0.1,
            lambda: 3.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidParameter(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParameter(format!("epochs must be >= 1")));
        }
        if !(self.beta >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "loss weights must be >= 0, got beta={}, lambda={}",
                self.beta, self.lambda
            )));
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior for a batch of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Tensor,
    pub log_var: Tensor,
}

/// `mean + exp(½ log_var)·noise`, elementwise.
pub fn reparameterize(posterior: &Posterior, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != posterior.mean.shape() || posterior.log_var.shape() != posterior.mean.shape() {
        return Err(Error::Shape {
            op: "reparameterize",
            detail: format!("mean {:?}, noise {:?}", posterior.mean.shape(), noise.shape()),
        });
    }
    let data = posterior
        .mean
        .data()
        .iter()
        .zip(posterior.log_var.data())
        .zip(noise.data())
        .map(|((m, l), e)| m + math::exp(0.5 * l) * e)
        .collect();
    Tensor::new(noise.rows(), noise.cols(), data)
}

/// Batch-averaged loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub hsic: f64,
}

struct LossVars {
    total: Var,
    recon: Var,
    kl: Var,
    hsic: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    spec: LatentSpec,
    input_width: usize,
    cfg: CvaeConfig,
    pub beta: f64,
    pub lambda: f64,
    store: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
    prior: FlowPrior,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
}

impl CvaeModel {
    pub fn new(spec: LatentSpec, input_width: usize, cfg: &CvaeConfig, beta: f64, lambda: f64, seed: u64) -> Result<Self> {
        if input_width == 0 {
            return Err(Error::InvalidParameter(format!("input width must be positive")));
        }
        if !(cfg.leaky_slope > 0.0) || cfg.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidParameter(format!("bad network config {cfg:?}")));
        }
        if !(cfg.log_var_min < cfg.log_var_max) || !cfg.decoder_log_var.is_finite() {
            return Err(Error::InvalidParameter(format!("empty log-variance range")));
        }
        if !(beta >= 0.0) || !(lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!("loss weights must be >= 0")));
        }
        let n = spec.n();
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let act = Activation::LeakyRelu(cfg.leaky_slope);
        let mut enc_w = vec![input_width];
        enc_w.extend_from_slice(&cfg.hidden);
        enc_w.push(2 * n);
        let mut dec_w = vec![n];
        dec_w.extend_from_slice(&cfg.hidden);
        dec_w.push(input_width);
        let encoder = Mlp::new(&mut store, "encoder", &enc_w, act, Init::Scaled(1.0), &mut rng);
        let decoder = Mlp::new(&mut store, "decoder", &dec_w, act, Init::Scaled(1.0), &mut rng);
        let prior = FlowPrior::new(&mut store, spec, cfg.flow, &mut rng)?;
        Ok(Self {
            spec,
            input_width,
            cfg: cfg.clone(),
            beta,
            lambda,
            store,
            encoder,
            decoder,
            prior,
            input_mean: vec![0.0; input_width],
            input_std: vec![1.0; input_width],
        })
    }

    pub fn spec(&self) -> LatentSpec {
        self.spec
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn config(&self) -> &CvaeConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn prior(&self) -> &FlowPrior {
        &self.prior
    }

    /// Sets the per-column affine standardization applied to raw features.
    pub fn fit_standardizer(&mut self, t: &Tensor) -> Result<()> {
        self.check_width(t)?;
        self.input_mean = t.col_means();
        self.input_std = t.col_stds().into_iter().map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Ok(())
    }

    fn check_width(&self, t: &Tensor) -> Result<()> {
        if t.cols() != self.input_width {
            return Err(Error::Shape {
                op: "cvae",
                detail: format!("expected {} feature columns, got {}", self.input_width, t.cols()),
            });
        }
        Ok(())
    }

    fn standardize(&self, t: &Tensor) -> Result<Tensor> {
        self.check_width(t)?;
        let c = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.input_mean[i % c]) / self.input_std[i % c])
            .collect();
        Tensor::new(t.rows(), c, data)
    }

    /// Posterior parameters; columns `[0, n_C)` are the bias-free block.
    pub fn encode(&self, t: &Tensor) -> Result<Posterior> {
        let x = self.standardize(t)?;
        let out = self.encoder.eval(&self.store, &x)?;
        let n = self.spec.n();
        let (lo, hi) = (self.cfg.log_var_min, self.cfg.log_var_max);
        Ok(Posterior {
            mean: out.slice_cols(0, n),
            log_var: out.slice_cols(n, 2 * n).map(|v| v.clamp(lo, hi))?,
        })
    }

    /// Decoder mean in standardized feature space.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.eval(&self.store, z)
    }

    /// Posterior means of the bias-free block.
    pub fn extract_zc(&self, t: &Tensor) -> Result<Tensor> {
        Ok(self.encode(t)?.mean.slice_cols(0, self.spec.n_c))
    }

    /// Posterior means of the spurious block.
    pub fn extract_zs(&self, t: &Tensor) -> Result<Tensor> {
        Ok(self.encode(t)?.mean.slice_cols(self.spec.n_c, self.spec.n()))
    }

    /// Posterior means of every latent.
    pub fn extract_z(&self, t: &Tensor) -> Result<Tensor> {
        Ok(self.encode(t)?.mean)
    }

    fn record(&self, tape: &mut Tape, bound: &Bound, t: &Tensor, s: &[f64], noise: &Tensor) -> Result<LossVars> {
        let rows = t.rows();
        let n = self.spec.n();
        if rows == 0 {
            return Err(Error::Contract(format!("empty batch")));
        }
        if s.len() != rows || noise.shape() != [rows, n] {
            return Err(Error::Shape {
                op: "cvae loss",
                detail: format!("{rows} rows, {} surrogate values, noise {:?}", s.len(), noise.shape()),
            });
        }
        let x = tape.leaf(self.standardize(t)?);
        let eps = tape.leaf(noise.clone());
        let s_col = tape.leaf(Tensor::column(s.to_vec())?);

        let enc = self.encoder.forward(tape, bound, x)?;
        let mean = tape.slice_cols(enc, 0, n)?;
        let raw_lv = tape.slice_cols(enc, n, 2 * n)?;
        let log_var = tape.clamp(raw_lv, self.cfg.log_var_min, self.cfg.log_var_max)?;
        let half = tape.scale(log_var, 0.5)?;
        let sd = tape.activation(half, Activation::Exp)?;
        let spread = tape.mul(sd, eps)?;
        let z = tape.add(mean, spread)?;

        let inv_rows = 1.0 / rows as f64;
        let dec = self.decoder.forward(tape, bound, z)?;
        let zero_t = tape.leaf(Tensor::filled(rows, self.input_width, self.cfg.decoder_log_var));
        let ll = tape.gaussian_log_pdf(x, dec, zero_t)?;
        let ll = tape.sum(ll)?;
        let recon = tape.scale(ll, -inv_rows)?;

        let log_q = tape.gaussian_log_pdf(z, mean, log_var)?;
        let log_q = tape.sum(log_q)?;
        let log_p = self.prior.log_density(tape, bound, z, s_col)?;
        let log_p = tape.sum(log_p)?;
        let diff = tape.sub(log_q, log_p)?;
        let kl = tape.scale(diff, inv_rows)?;

        let weighted_kl = tape.scale(kl, self.beta)?;
        let mut total = tape.add(recon, weighted_kl)?;
        let mut hsic = None;
        if rows >= 2 {
            // Only the bias-free block enters the independence penalty.
            let zc = tape.slice_cols(z, 0, self.spec.n_c)?;
            let h = tape.hsic_term_median(zc, centered_delta_gram(s))?;
            let weighted = tape.scale(h, self.lambda)?;
            total = tape.add(total, weighted)?;
            hsic = Some(h);
        }
        Ok(LossVars { total, recon, kl, hsic })
    }

    fn terms(tape: &Tape, v: &LossVars) -> LossTerms {
        LossTerms {
            total: tape.value(v.total).item(),
            recon: tape.value(v.recon).item(),
            kl: tape.value(v.kl).item(),
            hsic: v.hsic.map_or(0.0, |h| tape.value(h).item()),
        }
    }

    /// Loss terms for raw features `t`, surrogates `s`, and reparameterization
    /// noise `noise` (`rows × n`).
    pub fn loss(&self, t: &Tensor, s: &[f64], noise: &Tensor) -> Result<LossTerms> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let v = self.record(&mut tape, &bound, t, s, noise)?;
        Ok(Self::terms(&tape, &v))
    }

    /// Loss terms and gradients of the total, aligned with [`CvaeModel::store`].
    pub fn loss_and_grads(&self, t: &Tensor, s: &[f64], noise: &Tensor) -> Result<(LossTerms, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let v = self.record(&mut tape, &bound, t, s, noise)?;
        let grads = tape.backward(v.total)?;
        Ok((Self::terms(&tape, &v), self.store.collect_grads(&grads, &bound)?))
    }

    /// Every tensor needed to restore the model, standardizer included.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.store.named().map(|(n, t)| (String::from(n), t.clone())).collect();
        out.push((String::from("input.mean"), Tensor::from_raw(1, self.input_width, self.input_mean.clone())));
        out.push((String::from("input.std"), Tensor::from_raw(1, self.input_width, self.input_std.clone())));
        out
    }

    /// Inverse of [`CvaeModel::named_tensors`] for a model of the same shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let mut params = Vec::with_capacity(named.len());
        for (name, t) in named {
            match name.as_str() {
                "input.mean" | "input.std" => {
                    if t.shape() != [1, self.input_width] {
                        return Err(Error::Shape {
                            op: "load_named",
                            detail: format!("{name} has shape {:?}", t.shape()),
                        });
                    }
                    if name == "input.mean" {
                        self.input_mean = t.data().to_vec();
                    } else {
                        self.input_std = t.data().to_vec();
                    }
                }
                _ => params.push((name.clone(), t.clone())),
            }
        }
        self.store.load(&params)
    }
}

/// Per-epoch means of the batch loss terms.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainHistory {
    pub epochs: Vec<LossTerms>,
}

impl TrainHistory {
    pub fn first(&self) -> Option<&LossTerms> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&LossTerms> {
        self.epochs.last()
    }
}

fn normal_tensor<R: rand::Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v
        })
        .collect();
    Tensor::from_raw(rows, cols, data)
}

/// Minibatch Adam on features `t` with surrogates `s`. The model's
/// standardizer is fitted to `t` first. A trailing batch smaller than four
/// rows is dropped.
pub fn train(t: &Tensor, s: &[f64], spec: LatentSpec, model_cfg: &CvaeConfig, cfg: &TrainConfig) -> Result<(CvaeModel, TrainHistory)> {
    cfg.validate()?;
    if t.rows() == 0 || t.rows() != s.len() {
        return Err(Error::Shape {
            op: "cvae train",
            detail: format!("{} rows vs {} surrogate values", t.rows(), s.len()),
        });
    }
    let mut model = CvaeModel::new(spec, t.cols(), model_cfg, cfg.beta, cfg.lambda, derive(cfg.seed, &[0]))?;
    model.fit_standardizer(t)?;
    let mut adam = Adam::new(cfg.adam, &model.store);
    let mut rng = seeded(derive(cfg.seed, &[1]));
    let mut order: Vec<usize> = (0..t.rows()).collect();
    let mut history = TrainHistory { epochs: Vec::with_capacity(cfg.epochs) };
    let n = spec.n();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossTerms {
            total: 0.0,
            recon: 0.0,
            kl: 0.0,
            hsic: 0.0,
        };
        let mut batches = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 4 && batches > 0 {
                continue;
            }
            let tb = t.select_rows(idx);
            let sb: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
            let noise = normal_tensor(idx.len(), n, &mut rng);
            let diverged = |e: Error| Error::Diverged {
                epoch,
                step,
                detail: format!("{e}"),
            };
            let (terms, grads) = model.loss_and_grads(&tb, &sb, &noise).map_err(diverged)?;
            if !terms.total.is_finite() {
                return Err(diverged(Error::NonFinite { op: "cvae loss" }));
            }
            adam.step(&mut model.store, &grads).map_err(diverged)?;
            acc.total += terms.total;
            acc.recon += terms.recon;
            acc.kl += terms.kl;
            acc.hsic += terms.hsic;
            batches += 1;
        }
        let k = 1.0 / batches as f64;
        history.epochs.push(LossTerms {
            total: acc.total * k,
            recon: acc.recon * k,
            kl: acc.kl * k,
            hsic: acc.hsic * k,
        });
    }
    Ok((model, history))
}

/// [`train`] on a synthetic dataset's observations and surrogates.
pub fn train_on(data: &SynthDataset, model_cfg: &CvaeConfig, cfg: &TrainConfig) -> Result<(CvaeModel, TrainHistory)> {
    train(&data.t, &data.s, data.spec, model_cfg, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CvaeModel {
        let cfg = CvaeConfig {
            hidden: vec![6],
            flow: FlowConfig { units: 3, hidden: 4 },
            ..CvaeConfig::default()
        };
        CvaeModel::new(LatentSpec::new(1, 1).unwrap(), 3, &cfg, 0.1, 3.0, 7).unwrap()
    }

    #[test]
    fn noise_zero_returns_mean() {
        let post = Posterior {
            mean: Tensor::new(1, 2, vec![0.5, -1.0]).unwrap(),
            log_var: Tensor::new(1, 2, vec![1.0, -3.0]).unwrap(),
        };
        let z = reparameterize(&post, &Tensor::zeros(1, 2)).unwrap();
        assert_eq!(z, post.mean);
    }

    #[test]
    fn loss_decomposes_exactly() {
        let m = tiny();
        let t = Tensor::new(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let noise = Tensor::new(4, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]).unwrap();
        let l = m.loss(&t, &[0.0, 1.0, 0.0, 1.0], &noise).unwrap();
        assert_eq!(l.total, l.recon + 0.1 * l.kl + 3.0 * l.hsic);
    }

    #[test]
    fn rejects_bad_shapes() {
        let m = tiny();
        assert!(m.encode(&Tensor::zeros(2, 4)).is_err());
        assert!(m.loss(&Tensor::zeros(2, 3), &[0.0], &Tensor::zeros(2, 2)).is_err());
        assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
    }
}
