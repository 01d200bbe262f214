//! Stage 2: Bradley–Terry reward models, the CRM and random baselines, and
//! the bias metrics used by the benchmarks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::cvae::CvaeModel;
use crate::error::{Error, Result};
use crate::kernels::{mmd2_biased, pooled_bandwidth, KernelConfig};
use crate::math;
use crate::nn::{Adam, AdamConfig, Init, Mlp, ParamStore};
use crate::rng::{derive, seeded, Rng};
use crate::synth::PreferenceDataset;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

/// `−ln σ(r_chosen − r_rejected)`.
pub fn bt_nll(r_chosen: f64, r_rejected: f64) -> f64 {
    math::softplus(r_rejected - r_chosen)
}

/// What a reward model reads from an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Featurizer {
    /// Posterior means of the bias-free block.
    LatentC,
    /// Posterior means of the spurious block.
    LatentS,
    /// Posterior means of every latent.
    Latent,
    /// The item features as observed.
    Raw,
}

impl Featurizer {
    pub fn name(self) -> &'static str {
        match self {
            Featurizer::LatentC => "latent_c",
            Featurizer::LatentS => "latent_s",
            Featurizer::Latent => "latent",
            Featurizer::Raw => "raw",
        }
    }

    pub fn needs_encoder(self) -> bool {
        self != Featurizer::Raw
    }

    /// Applies the featurizer to item rows.
    pub fn apply(self, items: &Tensor, encoder: Option<&CvaeModel>) -> Result<Tensor> {
        if self == Featurizer::Raw {
            return Ok(items.clone());
        }
        let model = encoder.ok_or_else(|| Error::Contract(format!("featurizer {} needs an encoder", self.name())))?;
        match self {
            Featurizer::LatentC => model.extract_zc(items),
            Featurizer::LatentS => model.extract_zs(items),
            _ => model.extract_z(items),
        }
    }
}

/// Featurized preference pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Pairs {
    pub chosen: Tensor,
    pub rejected: Tensor,
    /// Whether the spurious cue sits on the chosen item.
    pub cue_on_chosen: Vec<bool>,
}

impl Pairs {
    pub fn new(chosen: Tensor, rejected: Tensor, cue_on_chosen: Vec<bool>) -> Result<Self> {
        if chosen.shape() != rejected.shape() || cue_on_chosen.len() != chosen.rows() {
            return Err(Error::Shape {
                op: "pairs",
                detail: format!(
                    "chosen {:?}, rejected {:?}, {} cue flags",
                    chosen.shape(),
                    rejected.shape(),
                    cue_on_chosen.len()
                ),
            });
        }
        Ok(Self {
            chosen,
            rejected,
            cue_on_chosen,
        })
    }

    pub fn from_dataset(data: &PreferenceDataset, featurizer: Featurizer, encoder: Option<&CvaeModel>) -> Result<Self> {
        Self::new(
            featurizer.apply(&data.chosen_features(), encoder)?,
            featurizer.apply(&data.rejected_features(), encoder)?,
            data.cue_on_chosen.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.chosen.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.chosen.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            chosen: self.chosen.select_rows(idx),
            rejected: self.rejected.select_rows(idx),
            cue_on_chosen: idx.iter().map(|&i| self.cue_on_chosen[i]).collect(),
        }
    }

    /// Items carrying the cue, then items without it, pair by pair.
    pub fn by_cue(&self) -> (Tensor, Tensor) {
        let n = self.len();
        let pick = |with_cue: bool| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let on_chosen = self.cue_on_chosen[i] == with_cue;
                    let src = if on_chosen { &self.chosen } else { &self.rejected };
                    src.row(i).to_vec()
                })
                .collect();
            rows
        };
        let to_tensor = |rows: Vec<Vec<f64>>| {
            let data = rows.concat();
            Tensor::from_raw(n, self.width(), data)
        };
        (to_tensor(pick(true)), to_tensor(pick(false)))
    }
}

/// Anything that assigns scalar rewards to item rows.
pub trait Scorer {
    fn score(&mut self, items: &Tensor) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct RewardConfig {
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            leaky_slope: 0.01,
            epochs: 30,
            batch_size: 240,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(format!("epochs and batch size must be positive")));
        }
        if !(self.leaky_slope > 0.0) || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidParameter(format!("bad scorer network {:?}", self.hidden)));
        }
        Ok(())
    }
}

/// MLP scorer over featurized items.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    featurizer: Featurizer,
    store: ParamStore,
    mlp: Mlp,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
}

impl RewardModel {
    pub fn new(featurizer: Featurizer, width: usize, cfg: &RewardConfig) -> Result<Self> {
        cfg.validate()?;
        if width == 0 {
            return Err(Error::InvalidParameter(format!("reward input width must be positive")));
        }
        let mut store = ParamStore::new();
        let mut widths = vec![width];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(1);
        let mut rng = seeded(derive(cfg.seed, &[0]));
        let mlp = Mlp::new(
            &mut store,
            "reward",
            &widths,
            Activation::LeakyRelu(cfg.leaky_slope),
            Init::Scaled(1.0),
            &mut rng,
        );
        Ok(Self {
            featurizer,
            store,
            mlp,
            input_mean: vec![0.0; width],
            input_std: vec![1.0; width],
        })
    }

    pub fn featurizer(&self) -> Featurizer {
        self.featurizer
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn input_width(&self) -> usize {
        self.mlp.input_width()
    }

    fn fit_standardizer(&mut self, pairs: &Pairs) -> Result<()> {
        let both = Tensor::vcat(&[&pairs.chosen, &pairs.rejected])?;
        self.input_mean = both.col_means();
        self.input_std = both.col_stds().into_iter().map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Ok(())
    }

    fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_width() {
            return Err(Error::Shape {
                op: "reward",
                detail: format!("expected {} columns, got {}", self.input_width(), x.cols()),
            });
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.input_mean[i % c]) / self.input_std[i % c])
            .collect();
        Tensor::new(x.rows(), c, data)
    }

    /// Scores for featurized item rows.
    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.mlp.eval(&self.store, &self.standardize(x)?)?.into_data())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let w = self.input_width();
        let mut out: Vec<(String, Tensor)> = self.store.named().map(|(n, t)| (String::from(n), t.clone())).collect();
        out.push((String::from("input.mean"), Tensor::from_raw(1, w, self.input_mean.clone())));
        out.push((String::from("input.std"), Tensor::from_raw(1, w, self.input_std.clone())));
        out
    }
}

impl Scorer for RewardModel {
    fn score(&mut self, items: &Tensor) -> Result<Vec<f64>> {
        self.scores(items)
    }
}

/// Uniform rewards on `[−10, 10]`, independent of the item.
#[derive(Debug, Clone)]
pub struct RandomReward {
    rng: Rng,
}

impl RandomReward {
    pub fn new(seed: u64) -> Self {
        Self { rng: seeded(seed) }
    }

    pub fn draw(&mut self) -> f64 {
        self.rng.random_range(-10.0..=10.0)
    }
}

impl Scorer for RandomReward {
    fn score(&mut self, items: &Tensor) -> Result<Vec<f64>> {
        Ok((0..items.rows()).map(|_| self.draw()).collect())
    }
}

/// Training trace: mean loss per epoch.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RewardHistory {
    pub loss: Vec<f64>,
}

fn fit(pairs: &Pairs, featurizer: Featurizer, cfg: &RewardConfig, gamma: f64) -> Result<(RewardModel, RewardHistory)> {
    if pairs.is_empty() {
        return Err(Error::Contract(format!("no preference pairs")));
    }
    let mut model = RewardModel::new(featurizer, pairs.width(), cfg)?;
    model.fit_standardizer(pairs)?;
    let chosen = model.standardize(&pairs.chosen)?;
    let rejected = model.standardize(&pairs.rejected)?;
    let mut adam = Adam::new(cfg.adam, &model.store);
    let mut rng = seeded(derive(cfg.seed, &[1]));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = RewardHistory { loss: Vec::with_capacity(cfg.epochs) };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |e: Error| Error::Diverged {
                epoch,
                step,
                detail: format!("{e}"),
            };
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let xc = tape.leaf(chosen.select_rows(idx));
            let xr = tape.leaf(rejected.select_rows(idx));
            let rc = model.mlp.forward(&mut tape, &bound, xc).map_err(diverged)?;
            let rr = model.mlp.forward(&mut tape, &bound, xr).map_err(diverged)?;
            let margin = tape.sub(rr, rc).map_err(diverged)?;
            let nll = tape.activation(margin, Activation::Softplus).map_err(diverged)?;
            let mut loss = tape.mean(nll).map_err(diverged)?;
            if gamma > 0.0 {
                let penalty = crm_penalty(&mut tape, rc, rr, idx, &pairs.cue_on_chosen).map_err(diverged)?;
                if let Some(p) = penalty {
                    let weighted = tape.scale(p, gamma).map_err(diverged)?;
                    loss = tape.add(loss, weighted).map_err(diverged)?;
                }
            }
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(diverged(Error::NonFinite { op: "reward loss" }));
            }
            let grads = tape.backward(loss).map_err(diverged)?;
            let grads = model.store.collect_grads(&grads, &bound).map_err(diverged)?;
            adam.step(&mut model.store, &grads).map_err(diverged)?;
            total += value;
            batches += 1;
        }
        history.loss.push(total / batches as f64);
    }
    Ok((model, history))
}

/// MMD² between scores of cue-bearing and cue-free items in the batch, with
/// the pooled median bandwidth held fixed.
fn crm_penalty(tape: &mut Tape, rc: Var, rr: Var, idx: &[usize], cue_on_chosen: &[bool]) -> Result<Option<Var>> {
    let mask: Vec<f64> = idx.iter().map(|&i| if cue_on_chosen[i] { 1.0 } else { 0.0 }).collect();
    let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
    let m = tape.leaf(Tensor::column(mask)?);
    let mi = tape.leaf(Tensor::column(inv)?);
    let a = tape.mul(rc, m)?;
    let b = tape.mul(rr, mi)?;
    let present = tape.add(a, b)?;
    let a = tape.mul(rc, mi)?;
    let b = tape.mul(rr, m)?;
    let absent = tape.add(a, b)?;
    let sigma2 = match pooled_bandwidth(tape.value(present), tape.value(absent)) {
        Ok(s) => s,
        Err(Error::Degenerate(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    Ok(Some(tape.mmd2(present, absent, sigma2)?))
}

/// Bradley–Terry maximum likelihood on featurized pairs.
pub fn train_reward(pairs: &Pairs, featurizer: Featurizer, cfg: &RewardConfig) -> Result<(RewardModel, RewardHistory)> {
    fit(pairs, featurizer, cfg, 0.0)
}

/// Bradley–Terry plus `γ·MMD²` between the score distributions of cue-bearing
/// and cue-free items.
pub fn train_crm(pairs: &Pairs, featurizer: Featurizer, cfg: &RewardConfig, gamma: f64) -> Result<(RewardModel, RewardHistory)> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {gamma}")));
    }
    // Every pair has exactly one cue-bearing item, so both groups are empty
    // only when there are no pairs at all.
    if pairs.is_empty() {
        return Err(Error::Contract(format!("CRM needs cue-bearing and cue-free items")));
    }
    fit(pairs, featurizer, cfg, gamma)
}

/// The regularisation strengths swept for CRM.
pub const CRM_GAMMAS: [f64; 5] = [1.0, 3.0, 10.0, 30.0, 100.0];

/// Outcome of a CRM sweep: the selected model and every candidate's
/// validation accuracy.
#[derive(Debug, Clone)]
pub struct CrmSelection {
    pub model: RewardModel,
    pub gamma: f64,
    pub validation: Vec<(f64, f64)>,
}

/// Trains CRM for each `γ` and keeps the one with the best accuracy on
/// `validation`. Ties go to the smaller `γ`.
pub fn select_crm(train: &Pairs, validation: &Pairs, featurizer: Featurizer, cfg: &RewardConfig, gammas: &[f64]) -> Result<CrmSelection> {
    let mut best: Option<(RewardModel, f64, f64)> = None;
    let mut scores = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let (mut model, _) = train_crm(train, featurizer, cfg, g)?;
        let acc = eval_accuracy(&mut model, validation)?;
        scores.push((g, acc));
        if best.as_ref().is_none_or(|b| acc > b.2) {
            best = Some((model, g, acc));
        }
    }
    let (model, gamma, _) = best.ok_or_else(|| Error::InvalidParameter(format!("empty gamma grid")))?;
    Ok(CrmSelection {
        model,
        gamma,
        validation: scores,
    })
}

/// Pairwise scores `(chosen, rejected)`.
pub fn score_pairs<S: Scorer + ?Sized>(scorer: &mut S, pairs: &Pairs) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((scorer.score(&pairs.chosen)?, scorer.score(&pairs.rejected)?))
}

/// Fraction of pairs where the chosen item scores higher; ties count half.
pub fn eval_accuracy<S: Scorer + ?Sized>(scorer: &mut S, pairs: &Pairs) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract(format!("accuracy needs at least one pair")));
    }
    let (c, r) = score_pairs(scorer, pairs)?;
    Ok(win_rate(&c, &r))
}

fn win_rate(a: &[f64], b: &[f64]) -> f64 {
    let wins: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            if x > y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    wins / a.len() as f64
}

/// `|acc_method(p) − acc_oracle(p)|` per shift value; both curves are
/// `(p, accuracy)` on the same grid.
pub fn deviation_from_oracle(method: &[(f64, f64)], oracle: &[(f64, f64)]) -> Result<Vec<f64>> {
    if method.len() != oracle.len() || method.iter().zip(oracle).any(|(a, b)| a.0 != b.0) {
        return Err(Error::InvalidParameter(format!("accuracy curves are on different shift grids")));
    }
    Ok(method.iter().zip(oracle).map(|(a, b)| (a.1 - b.1).abs()).collect())
}

/// `2·|P̂(prefers the concept-bearing item) − ½|` on a probe whose concept
/// placement is independent of the label. `probe_p` is the injection rate
/// the probe was built with.
pub fn bias_at_c<S: Scorer + ?Sized>(scorer: &mut S, probe: &Pairs, probe_p: f64) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::Contract(format!("Bias@C needs a nonempty probe")));
    }
    let n = probe.len() as f64;
    let rate = probe.cue_on_chosen.iter().filter(|&&c| c).count() as f64 / n;
    // Allow four binomial standard deviations around one half.
    if probe_p != 0.5 || (rate - 0.5).abs() > 4.0 * math::sqrt(0.25 / n) {
        return Err(Error::InvalidParameter(format!(
            "probe is not concept-balanced (p={probe_p}, empirical rate {rate:.3})"
        )));
    }
    let (present, absent) = probe.by_cue();
    let a = scorer.score(&present)?;
    let b = scorer.score(&absent)?;
    Ok(2.0 * (win_rate(&a, &b) - 0.5).abs())
}

/// MMD² between the scores a model gives cue-bearing and cue-free items.
pub fn cue_group_mmd(model: &RewardModel, pairs: &Pairs) -> Result<f64> {
    let (present, absent) = pairs.by_cue();
    let a = Tensor::column(model.scores(&present)?)?;
    let b = Tensor::column(model.scores(&absent)?)?;
    mmd2_biased(&a, &b, &KernelConfig::default())
}

/// Per-method benchmark summary over a shift grid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BiasReport {
    pub shifts: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub worst_case_accuracy: f64,
    pub deviation: Vec<f64>,
    pub max_deviation: f64,
    /// Empty when the benchmark does not measure concept bias.
    pub bias_at_c: Vec<f64>,
    pub avg_bias_at_c: Option<f64>,
}

impl BiasReport {
    pub fn new(shifts: Vec<f64>, accuracy: Vec<f64>, oracle: &[f64], bias_at_c: Vec<f64>) -> Result<Self> {
        if shifts.is_empty() || accuracy.len() != shifts.len() || oracle.len() != shifts.len() {
            return Err(Error::InvalidParameter(format!("curve lengths do not match the shift grid")));
        }
        if !bias_at_c.is_empty() && bias_at_c.len() != shifts.len() {
            return Err(Error::InvalidParameter(format!("Bias@C curve does not match the shift grid")));
        }
        let curve = |v: &[f64]| -> Vec<(f64, f64)> { shifts.iter().copied().zip(v.iter().copied()).collect() };
        let deviation = deviation_from_oracle(&curve(&accuracy), &curve(oracle))?;
        let worst_case_accuracy = accuracy.iter().copied().fold(f64::INFINITY, f64::min);
        let max_deviation = deviation.iter().copied().fold(0.0, f64::max);
        let avg_bias_at_c = if bias_at_c.is_empty() { None } else { Some(math::mean(&bias_at_c)) };
        Ok(Self {
            shifts,
            accuracy,
            worst_case_accuracy,
            deviation,
            max_deviation,
            bias_at_c,
            avg_bias_at_c,
        })
    }
}
