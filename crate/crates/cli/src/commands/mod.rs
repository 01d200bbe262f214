mod bench;
mod multilabeler;
mod synth;

pub use bench::{ablation, bench, AblationReport, BenchReport};
pub use multilabeler::{multilabeler, MultilabelerReport};
pub use synth::{gen_synth, ident, GenSynthReport, IdentReport};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

/// Stated in every benchmark report.
pub const ANALOGUE_NOTE: &str = "Feature-space analogue: items are synthetic observation vectors \
plus explicit cue coordinates, not text. Gates compare orderings between methods; absolute \
accuracies are not comparable with language-model benchmarks.";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub seed: u64,
    pub error: String,
}

/// Runs `f(trial, trial_seed)` for every trial on a pool of `cfg.threads()`
/// workers. Results come back in trial order whatever the scheduling.
pub(crate) fn run_trials<T, F>(cfg: &RunConfig, f: F) -> anyhow::Result<Vec<Result<T, TrialFailure>>>
where
    T: Send,
    F: Fn(usize, u64) -> anyhow::Result<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads()).build()?;
    Ok(pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|k| {
                let seed = trial_seed(cfg.seed, k);
                f(k, seed).map_err(|e| TrialFailure {
                    trial: k,
                    seed,
                    error: format!("{e:#}"),
                })
            })
            .collect()
    }))
}

pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    card_core::rng::split_seed(seed, trial as u64)
}

/// Splits trial results into successes and failures, keeping trial order.
pub(crate) fn partition<T>(results: Vec<Result<T, TrialFailure>>) -> (Vec<T>, Vec<TrialFailure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                eprintln!("trial {} failed: {}", e.trial, e.error);
                failed.push(e)
            }
        }
    }
    (ok, failed)
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:.4}")
}
