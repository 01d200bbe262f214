use card_core::multilabeler::{fit_constrained, generate_linear_tasks, true_nll, verify_subspace, TaskSpec};
use card_core::rng::derive;
use card_core::Tensor;
use serde::Serialize;

use super::{fmt, partition, run_trials, TrialFailure};
use crate::config::RunConfig;
use crate::io;
use crate::stats::{all_pass, Gate};

#[derive(Debug, Clone, Serialize)]
pub struct Recovery {
    pub seed: u64,
    /// Learned coordinates shared by every task.
    pub shared: Vec<usize>,
    /// True latents those coordinates load on.
    pub image: Vec<usize>,
    pub correct: bool,
    /// Linear R² between true and recovered shared blocks; absent when the
    /// block sizes differ.
    pub r2: Option<f64>,
    pub nll: f64,
    pub true_nll: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultilabelerReport {
    pub config: RunConfig,
    pub expected: Vec<usize>,
    pub noiseless: Recovery,
    pub noisy: Vec<Recovery>,
    pub failures: Vec<TrialFailure>,
    pub noisy_correct: usize,
    pub negative: Option<Recovery>,
    pub gates: Vec<Gate>,
    pub passed: bool,
}

fn columns(t: &Tensor, cols: &[usize]) -> anyhow::Result<Tensor> {
    let rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| cols.iter().map(|&c| t.get(r, c)).collect()).collect();
    Ok(Tensor::from_rows(&rows)?)
}

fn recover(cfg: &RunConfig, spec: &TaskSpec, seed: u64) -> anyhow::Result<Recovery> {
    let data = generate_linear_tasks(spec, seed)?;
    let fit = fit_constrained(&data, &cfg.multilabeler.fit)?;
    let image = fit.shared_image(&data.mixing, cfg.multilabeler.image_tol)?;
    let r2 = if fit.shared.len() == data.shared.len() && !fit.shared.is_empty() {
        let zhat = fit.transform(&data.t)?;
        Some(verify_subspace(&columns(&data.z, &data.shared)?, &columns(&zhat, &fit.shared)?)?)
    } else {
        None
    };
    let mut expected = spec.bias_free.clone();
    expected.sort_unstable();
    Ok(Recovery {
        seed,
        correct: image == expected,
        shared: fit.shared,
        image,
        r2,
        nll: fit.nll,
        true_nll: true_nll(&data),
    })
}

/// The configured instance plus one extra spurious latent that every
/// labeler uses.
fn with_shared_spurious(spec: &TaskSpec) -> TaskSpec {
    let extra = spec.n;
    let supports: Vec<Vec<usize>> = spec
        .supports
        .iter()
        .map(|a| {
            let mut a = a.clone();
            a.push(extra);
            a
        })
        .collect();
    let widest = supports.iter().map(Vec::len).max().unwrap_or(0);
    TaskSpec {
        n: spec.n + 1,
        supports,
        tasks_per_labeler: spec.tasks_per_labeler.max(widest + 1),
        allow_violations: true,
        ..spec.clone()
    }
}

pub fn multilabeler(cfg: &RunConfig) -> anyhow::Result<MultilabelerReport> {
    cfg.validate()?;
    let ml = &cfg.multilabeler;
    ml.spec.validate()?;
    let dir = cfg.out.join("multilabeler");
    io::ensure_dir(&dir)?;
    let mut expected = ml.spec.bias_free.clone();
    expected.sort_unstable();

    let clean = TaskSpec {
        noise_sd: 0.0,
        ..ml.spec.clone()
    };
    let noiseless = recover(cfg, &clean, derive(cfg.seed, &[0]))?;
    let noisy_spec = TaskSpec {
        noise_sd: ml.noise_sd,
        ..ml.spec.clone()
    };
    let (noisy, failures) = partition(run_trials(cfg, |_, seed| recover(cfg, &noisy_spec, seed))?);
    let noisy_correct = noisy.iter().filter(|r| r.correct).count();
    let negative = if ml.negative_test {
        Some(recover(cfg, &with_shared_spurious(&clean), derive(cfg.seed, &[1]))?)
    } else {
        None
    };

    let need = cfg.required(ml.min_noisy_fraction);
    let mut gates = vec![
        Gate::new(
            "noiseless shared block recovered",
            noiseless.correct,
            format!("image {:?}, expected {expected:?}", noiseless.image),
        ),
        Gate::new(
            "noiseless subspace R²",
            noiseless.r2.is_some_and(|r| r >= ml.r2_gate),
            format!("{} (gate {})", noiseless.r2.map_or("n/a".into(), fmt), ml.r2_gate),
        ),
        Gate::new(
            "noisy instances recovered",
            noisy_correct >= need && failures.is_empty(),
            format!("{noisy_correct}/{} (need {need}), {} failed", cfg.trials, failures.len()),
        ),
    ];
    if let Some(neg) = &negative {
        let larger = neg.image.len() > expected.len() && expected.iter().all(|c| neg.image.contains(c));
        gates.push(Gate::new(
            "shared spurious latent enlarges the recovered set",
            larger,
            format!("image {:?}", neg.image),
        ));
    }
    let report = MultilabelerReport {
        config: cfg.clone(),
        expected,
        noiseless,
        noisy,
        failures,
        noisy_correct,
        negative,
        passed: all_pass(&gates),
        gates,
    };
    io::write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}
