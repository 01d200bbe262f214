use std::path::Path;

use anyhow::Context;
use card_core::cvae::{train, CvaeModel, TrainConfig};
use card_core::reward::{
    bias_at_c, eval_accuracy, select_crm, train_reward, BiasReport, Featurizer, Pairs, RandomReward, RewardConfig,
    Scorer,
};
use card_core::rng::derive;
use card_core::synth::{CorpusKind, CorpusWorld, PreferenceDataset};
use serde::Serialize;

use super::{fmt, partition, run_trials, TrialFailure, ANALOGUE_NOTE};
use crate::config::RunConfig;
use crate::io;
use crate::stats::{all_pass, summarize_curves, Gate, Summary};

/// One trial's world, learned encoder, and corpora.
struct Setup {
    encoder: CvaeModel,
    train: PreferenceDataset,
    validation: PreferenceDataset,
    tests: Vec<PreferenceDataset>,
    probes: Vec<PreferenceDataset>,
    world: CorpusWorld,
}

fn shifts(cfg: &RunConfig, kind: CorpusKind) -> &[f64] {
    match kind {
        CorpusKind::Sycophancy => &cfg.bench.sycophancy_shifts,
        CorpusKind::Concept => &cfg.bench.concept_shifts,
    }
}

fn p_train(cfg: &RunConfig, kind: CorpusKind) -> f64 {
    match kind {
        CorpusKind::Sycophancy => cfg.bench.sycophancy_p_train,
        CorpusKind::Concept => cfg.bench.concept_p_train,
    }
}

fn setup(cfg: &RunConfig, kind: CorpusKind, seed: u64, checkpoint: &Path) -> anyhow::Result<Setup> {
    let b = &cfg.bench;
    let world = CorpusWorld::build(kind, &b.world, derive(seed, &[0]))?;
    let items = world.sample_items(b.items, derive(seed, &[1]))?;
    let tc = TrainConfig {
        seed: derive(seed, &[2]),
        ..cfg.cvae.train.clone()
    };
    let (encoder, _) = train(&items.t, &items.s, world.spec(), &cfg.cvae.model, &tc).context("representation learning")?;
    io::write_checkpoint(checkpoint, &encoder.named_tensors())?;
    let p = p_train(cfg, kind);
    let train = world.preference_corpus(b.train_size, p, derive(seed, &[3]))?;
    let validation = world.preference_corpus(b.validation_size, p, derive(seed, &[4]))?;
    let grid = shifts(cfg, kind);
    let tests = grid
        .iter()
        .enumerate()
        .map(|(i, &q)| world.preference_corpus(b.test_size, q, derive(seed, &[5, i as u64])))
        .collect::<Result<_, _>>()?;
    let probes = (0..grid.len())
        .map(|i| world.preference_corpus(b.probe_size, 0.5, derive(seed, &[6, i as u64])))
        .collect::<Result<_, _>>()?;
    Ok(Setup {
        encoder,
        train,
        validation,
        tests,
        probes,
        world,
    })
}

impl Setup {
    fn pairs(&self, ds: &PreferenceDataset, feat: Featurizer) -> anyhow::Result<Pairs> {
        Ok(Pairs::from_dataset(ds, feat, Some(&self.encoder))?)
    }

    /// Accuracy on each test corpus and Bias@C on each probe.
    fn curves(&self, scorer: &mut dyn Scorer, feat: Featurizer) -> anyhow::Result<Curves> {
        let mut accuracy = Vec::with_capacity(self.tests.len());
        let mut bias = Vec::with_capacity(self.tests.len());
        for (test, probe) in self.tests.iter().zip(&self.probes) {
            accuracy.push(eval_accuracy(scorer, &self.pairs(test, feat)?)?);
            bias.push(bias_at_c(scorer, &self.pairs(probe, feat)?, 0.5)?);
        }
        Ok(Curves { accuracy, bias })
    }

    fn reward(&self, cfg: &RunConfig, feat: Featurizer, data: &PreferenceDataset, seed: u64) -> anyhow::Result<Curves> {
        let rc = RewardConfig {
            seed,
            ..cfg.reward.clone()
        };
        let (mut model, _) = train_reward(&self.pairs(data, feat)?, feat, &rc)?;
        self.curves(&mut model, feat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curves {
    pub accuracy: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchTrial {
    pub trial: usize,
    pub seed: u64,
    pub crm_gamma: f64,
    /// `(γ, validation accuracy)` for every candidate.
    pub crm_validation: Vec<(f64, f64)>,
    pub train_cue_rate: f64,
    pub oracle: Vec<f64>,
    pub methods: Vec<(String, Curves)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub name: String,
    pub accuracy: Vec<Summary>,
    pub bias_at_c: Vec<Summary>,
    /// Computed from the trial-mean curves.
    pub summary: BiasReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub kind: CorpusKind,
    pub note: String,
    pub config: RunConfig,
    pub shifts: Vec<f64>,
    pub p_train: f64,
    pub trials: Vec<BenchTrial>,
    pub failures: Vec<TrialFailure>,
    pub oracle: Vec<Summary>,
    pub methods: Vec<MethodSummary>,
    pub gates: Vec<Gate>,
    pub passed: bool,
}

impl BenchReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.name == name)
    }
}

fn summarize(shifts: &[f64], names: &[&str], runs: &[&[(String, Curves)]], oracle: &[f64]) -> anyhow::Result<Vec<MethodSummary>> {
    names
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let acc: Vec<Vec<f64>> = runs.iter().map(|r| r[m].1.accuracy.clone()).collect();
            let bias: Vec<Vec<f64>> = runs.iter().map(|r| r[m].1.bias.clone()).collect();
            let accuracy = summarize_curves(&acc);
            let bias_at_c = summarize_curves(&bias);
            let summary = BiasReport::new(
                shifts.to_vec(),
                accuracy.iter().map(|s| s.mean).collect(),
                oracle,
                bias_at_c.iter().map(|s| s.mean).collect(),
            )?;
            Ok(MethodSummary {
                name: name.to_string(),
                accuracy,
                bias_at_c,
                summary,
            })
        })
        .collect()
}

fn write_curves(path: &Path, shifts: &[f64], oracle: &[Summary], methods: &[MethodSummary]) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for (i, p) in shifts.iter().enumerate() {
        rows.push(vec![
            p.to_string(),
            "oracle".into(),
            oracle[i].mean.to_string(),
            oracle[i].se.to_string(),
            "0".into(),
            String::new(),
            String::new(),
        ]);
        for m in methods {
            rows.push(vec![
                p.to_string(),
                m.name.clone(),
                m.accuracy[i].mean.to_string(),
                m.accuracy[i].se.to_string(),
                m.summary.deviation[i].to_string(),
                m.bias_at_c[i].mean.to_string(),
                m.bias_at_c[i].se.to_string(),
            ]);
        }
    }
    io::write_csv(
        path,
        &["shift", "method", "accuracy", "accuracy_se", "deviation", "bias_at_c", "bias_at_c_se"],
        &rows,
    )
}

const METHODS: [&str; 4] = ["card", "vanilla", "crm", "random"];

pub fn bench(cfg: &RunConfig, kind: CorpusKind) -> anyhow::Result<BenchReport> {
    cfg.validate()?;
    let dir = cfg.out.join(format!("bench-{}", kind.name()));
    io::ensure_dir(&dir)?;
    let grid = shifts(cfg, kind).to_vec();
    let b = &cfg.bench;
    let results = run_trials(cfg, |k, seed| {
        let s = setup(cfg, kind, seed, &dir.join(format!("trial{k}_cvae.ckpt")))?;
        let card = s.reward(cfg, Featurizer::LatentC, &s.train, derive(seed, &[10]))?;
        let vanilla = s.reward(cfg, Featurizer::Raw, &s.train, derive(seed, &[11]))?;
        let rc = RewardConfig {
            seed: derive(seed, &[12]),
            ..cfg.reward.clone()
        };
        let train_raw = s.pairs(&s.train, Featurizer::Raw)?;
        let val_raw = s.pairs(&s.validation, Featurizer::Raw)?;
        let mut crm = select_crm(&train_raw, &val_raw, Featurizer::Raw, &rc, &b.crm_gammas)?;
        let crm_curves = s.curves(&mut crm.model, Featurizer::Raw)?;
        let random = s.curves(&mut RandomReward::new(derive(seed, &[13])), Featurizer::Raw)?;
        let unbiased = s.world.preference_corpus(b.train_size, 0.5, derive(seed, &[7]))?;
        let oracle = s.reward(cfg, Featurizer::Raw, &unbiased, derive(seed, &[14]))?;
        eprintln!(
            "trial {k}: worst-case accuracy card {:.3} vanilla {:.3} crm {:.3} (γ={})",
            min(&card.accuracy),
            min(&vanilla.accuracy),
            min(&crm_curves.accuracy),
            crm.gamma
        );
        Ok(BenchTrial {
            trial: k,
            seed,
            crm_gamma: crm.gamma,
            crm_validation: crm.validation,
            train_cue_rate: s.train.cue_on_chosen_rate(),
            oracle: oracle.accuracy,
            methods: METHODS
                .iter()
                .map(|n| n.to_string())
                .zip([card, vanilla, crm_curves, random])
                .collect(),
        })
    })?;
    let (trials, failures) = partition(results);
    let oracle_curves: Vec<Vec<f64>> = trials.iter().map(|t| t.oracle.clone()).collect();
    let oracle = summarize_curves(&oracle_curves);
    let oracle_mean: Vec<f64> = oracle.iter().map(|s| s.mean).collect();
    let runs: Vec<&[(String, Curves)]> = trials.iter().map(|t| t.methods.as_slice()).collect();
    let mut gates = vec![Gate::new(
        "all trials completed",
        failures.is_empty() && !trials.is_empty(),
        format!("{} of {} trials failed", failures.len(), cfg.trials),
    )];
    let methods = if trials.is_empty() {
        Vec::new()
    } else {
        summarize(&grid, &METHODS, &runs, &oracle_mean)?
    };
    if !trials.is_empty() {
        let get = |n: &str| &methods.iter().find(|m| m.name == n).unwrap().summary;
        let (card, vanilla, crm, random) = (get("card"), get("vanilla"), get("crm"), get("random"));
        let pooled = (b.test_size * trials.len()) as f64;
        let band = 3.0 * (0.25 / pooled).sqrt();
        let worst = random.accuracy.iter().map(|a| (a - 0.5).abs()).fold(0.0, f64::max);
        gates.push(Gate::new(
            "random reward accuracy is one half",
            worst <= band,
            format!("largest |acc − 0.5| {} (3 SD = {})", fmt(worst), fmt(band)),
        ));
        match kind {
            CorpusKind::Sycophancy => {
                gates.push(Gate::new(
                    "CARD max deviation below vanilla",
                    card.max_deviation < vanilla.max_deviation,
                    format!("{} vs {}", fmt(card.max_deviation), fmt(vanilla.max_deviation)),
                ));
                gates.push(Gate::new(
                    "CARD deviation within tolerance at every shift",
                    card.max_deviation <= b.max_deviation,
                    format!("max {} (gate {})", fmt(card.max_deviation), b.max_deviation),
                ));
                gates.push(Gate::new(
                    "worst-case accuracy CARD > CRM > vanilla",
                    card.worst_case_accuracy > crm.worst_case_accuracy
                        && crm.worst_case_accuracy > vanilla.worst_case_accuracy,
                    format!(
                        "{} / {} / {}",
                        fmt(card.worst_case_accuracy),
                        fmt(crm.worst_case_accuracy),
                        fmt(vanilla.worst_case_accuracy)
                    ),
                ));
            }
            CorpusKind::Concept => {
                let ordered = (0..grid.len())
                    .filter(|&i| card.bias_at_c[i] < crm.bias_at_c[i] && crm.bias_at_c[i] <= vanilla.bias_at_c[i])
                    .count();
                let need = ((b.bias_order_fraction * grid.len() as f64) - 1e-9).ceil() as usize;
                gates.push(Gate::new(
                    "Bias@C CARD < CRM <= vanilla",
                    ordered >= need,
                    format!("{ordered}/{} shift points (need {need})", grid.len()),
                ));
                let top = random.bias_at_c.iter().copied().fold(0.0, f64::max);
                gates.push(Gate::new(
                    "random reward Bias@C",
                    top < b.random_bias_gate,
                    format!("max {} (gate {})", fmt(top), b.random_bias_gate),
                ));
            }
        }
        write_curves(&dir.join("curves.csv"), &grid, &oracle, &methods)?;
    }
    let report = BenchReport {
        kind,
        note: ANALOGUE_NOTE.to_string(),
        config: cfg.clone(),
        shifts: grid,
        p_train: p_train(cfg, kind),
        trials,
        failures,
        oracle,
        methods,
        passed: all_pass(&gates),
        gates,
    };
    io::write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

const ABLATION: [(&str, Featurizer); 3] = [
    ("latent_c", Featurizer::LatentC),
    ("latent_s", Featurizer::LatentS),
    ("latent", Featurizer::Latent),
];

#[derive(Debug, Clone, Serialize)]
pub struct AblationTrial {
    pub trial: usize,
    pub seed: u64,
    pub oracle: Vec<f64>,
    pub methods: Vec<(String, Curves)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub kind: CorpusKind,
    pub note: String,
    pub config: RunConfig,
    pub shifts: Vec<f64>,
    pub trials: Vec<AblationTrial>,
    pub failures: Vec<TrialFailure>,
    pub oracle: Vec<Summary>,
    pub methods: Vec<MethodSummary>,
    pub gates: Vec<Gate>,
    pub passed: bool,
}

/// Reward models on the recovered bias-free block, the spurious block, and
/// both, trained on the same corpus.
pub fn ablation(cfg: &RunConfig, kind: CorpusKind) -> anyhow::Result<AblationReport> {
    cfg.validate()?;
    let dir = cfg.out.join(format!("ablation-{}", kind.name()));
    io::ensure_dir(&dir)?;
    let grid = shifts(cfg, kind).to_vec();
    let results = run_trials(cfg, |k, seed| {
        let s = setup(cfg, kind, seed, &dir.join(format!("trial{k}_cvae.ckpt")))?;
        let methods = ABLATION
            .iter()
            .enumerate()
            .map(|(i, (name, feat))| Ok((name.to_string(), s.reward(cfg, *feat, &s.train, derive(seed, &[20, i as u64]))?)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let unbiased = s.world.preference_corpus(cfg.bench.train_size, 0.5, derive(seed, &[7]))?;
        let oracle = s.reward(cfg, Featurizer::Raw, &unbiased, derive(seed, &[14]))?;
        Ok(AblationTrial {
            trial: k,
            seed,
            oracle: oracle.accuracy,
            methods,
        })
    })?;
    let (trials, failures) = partition(results);
    let oracle = summarize_curves(&trials.iter().map(|t| t.oracle.clone()).collect::<Vec<_>>());
    let oracle_mean: Vec<f64> = oracle.iter().map(|s| s.mean).collect();
    let mut gates = vec![Gate::new(
        "all trials completed",
        failures.is_empty() && !trials.is_empty(),
        format!("{} of {} trials failed", failures.len(), cfg.trials),
    )];
    let names: Vec<&str> = ABLATION.iter().map(|(n, _)| *n).collect();
    let runs: Vec<&[(String, Curves)]> = trials.iter().map(|t| t.methods.as_slice()).collect();
    let methods = if trials.is_empty() {
        Vec::new()
    } else {
        summarize(&grid, &names, &runs, &oracle_mean)?
    };
    if !trials.is_empty() {
        let (c, s, z) = (&methods[0].summary, &methods[1].summary, &methods[2].summary);
        let avg = |r: &BiasReport| r.avg_bias_at_c.unwrap_or(f64::NAN);
        gates.push(Gate::new(
            "Avg-Bias@C lowest on the bias-free block",
            avg(c) < avg(s) && avg(c) < avg(z),
            format!("{} vs {} (spurious) and {} (all)", fmt(avg(c)), fmt(avg(s)), fmt(avg(z))),
        ));
        gates.push(Gate::new(
            "worst-case accuracy highest on the bias-free block",
            c.worst_case_accuracy > s.worst_case_accuracy && c.worst_case_accuracy > z.worst_case_accuracy,
            format!(
                "{} vs {} (spurious) and {} (all)",
                fmt(c.worst_case_accuracy),
                fmt(s.worst_case_accuracy),
                fmt(z.worst_case_accuracy)
            ),
        ));
        write_curves(&dir.join("curves.csv"), &grid, &oracle, &methods)?;
    }
    let report = AblationReport {
        kind,
        note: ANALOGUE_NOTE.to_string(),
        config: cfg.clone(),
        shifts: grid,
        trials,
        failures,
        oracle,
        methods,
        passed: all_pass(&gates),
        gates,
    };
    io::write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}
