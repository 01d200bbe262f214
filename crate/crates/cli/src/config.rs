//! Run configuration, read from TOML.
//!
//! Every block has defaults, so an empty file is a valid config. Unknown keys
//! are rejected at every level.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use card_core::cvae::{CvaeConfig, TrainConfig};
use card_core::multilabeler::{FitConfig, TaskSpec};
use card_core::reward::{RewardConfig, CRM_GAMMAS};
use card_core::synth::{ScmConfig, WorldConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub trials: usize,
    pub out: PathBuf,
    /// Worker threads; 0 means one per available core. Left out of reports,
    /// since results do not depend on it.
    #[serde(skip_serializing)]
    pub jobs: usize,
    pub synth: SynthConfig,
    pub cvae: CvaeBlock,
    pub ident: IdentConfig,
    pub reward: RewardConfig,
    pub bench: BenchConfig,
    pub multilabeler: MultilabelerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 8,
            out: PathBuf::from("out"),
            jobs: 0,
            synth: SynthConfig::default(),
            cvae: CvaeBlock::default(),
            ident: IdentConfig::default(),
            reward: RewardConfig::default(),
            bench: BenchConfig::default(),
            multilabeler: MultilabelerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_c: usize,
    pub n_s: usize,
    pub edge_prob: f64,
    /// Rows generated for each surrogate value.
    pub n_per_s: usize,
    pub scm: ScmConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_c: 4,
            n_s: 4,
            edge_prob: 0.5,
            n_per_s: 20_000,
            scm: ScmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeBlock {
    pub model: CvaeConfig,
    /// `seed` here is ignored; each trial derives its own.
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentConfig {
    /// Rows subsampled for the kernel-ridge R².
    pub eval_rows: usize,
    /// Rows subsampled for the HSIC permutation test.
    pub hsic_rows: usize,
    pub permutations: usize,
    pub alpha: f64,
    pub r2_gate: f64,
    /// Fraction of trials whose independence test must not reject.
    pub non_reject_fraction: f64,
}

impl Default for IdentConfig {
    fn default() -> Self {
        Self {
            eval_rows: 2000,
            hsic_rows: 500,
            permutations: 200,
            alpha: 0.05,
            r2_gate: 0.75,
            non_reject_fraction: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub world: WorldConfig,
    /// Unpaired items the representation is learned from.
    pub items: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub probe_size: usize,
    pub sycophancy_p_train: f64,
    pub concept_p_train: f64,
    pub sycophancy_shifts: Vec<f64>,
    pub concept_shifts: Vec<f64>,
    pub crm_gammas: Vec<f64>,
    /// Largest allowed gap between CARD and the oracle at any shift.
    pub max_deviation: f64,
    /// Shift points at which the Bias@C ordering must hold, as a fraction.
    pub bias_order_fraction: f64,
    pub random_bias_gate: f64,
}

fn grid(lo: usize, hi: usize) -> Vec<f64> {
    (lo..=hi).map(|i| i as f64 / 10.0).collect()
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            items: 20_000,
            train_size: 5000,
            validation_size: 1000,
            test_size: 2000,
            probe_size: 2000,
            sycophancy_p_train: 0.8,
            concept_p_train: 1.0,
            sycophancy_shifts: grid(1, 8),
            concept_shifts: grid(0, 10),
            crm_gammas: CRM_GAMMAS.to_vec(),
            max_deviation: 0.10,
            bias_order_fraction: 9.0 / 11.0,
            random_bias_gate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultilabelerConfig {
    pub spec: TaskSpec,
    pub fit: FitConfig,
    pub noise_sd: f64,
    pub min_noisy_fraction: f64,
    pub r2_gate: f64,
    /// Relative column norm above which a true latent counts as recovered.
    pub image_tol: f64,
    /// Also fit an instance whose labelers share a spurious latent.
    pub negative_test: bool,
}

impl Default for MultilabelerConfig {
    fn default() -> Self {
        Self {
            spec: TaskSpec::default(),
            fit: FitConfig::default(),
            noise_sd: 0.1,
            min_noisy_fraction: 7.0 / 8.0,
            r2_gate: 0.99,
            image_tol: 0.1,
            negative_test: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.trials == 0 {
            bail!("trials must be >= 1");
        }
        if self.synth.n_per_s == 0 {
            bail!("synth.n_per_s must be >= 1");
        }
        if self.synth.scm.s_values.len() < 2 {
            bail!("synth.scm.s_values needs at least two levels");
        }
        self.cvae.train.validate()?;
        self.reward.validate()?;
        let b = &self.bench;
        if b.train_size == 0 || b.test_size == 0 || b.probe_size == 0 || b.validation_size == 0 {
            bail!("bench corpus sizes must be positive");
        }
        for p in b.sycophancy_shifts.iter().chain(&b.concept_shifts).chain([&b.sycophancy_p_train, &b.concept_p_train]) {
            if !(0.0..=1.0).contains(p) {
                bail!("injection rate {p} outside [0, 1]");
            }
        }
        if b.sycophancy_shifts.is_empty() || b.concept_shifts.is_empty() || b.crm_gammas.is_empty() {
            bail!("bench grids must be nonempty");
        }
        if self.ident.eval_rows < 20 || self.ident.hsic_rows < 4 {
            bail!("ident subsamples are too small");
        }
        Ok(())
    }

    pub fn threads(&self) -> usize {
        if self.jobs > 0 {
            self.jobs
        } else {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        }
    }

    /// Trials needed to meet `fraction`, rounded up.
    pub fn required(&self, fraction: f64) -> usize {
        ((fraction * self.trials as f64) - 1e-9).ceil().max(0.0) as usize
    }
}
