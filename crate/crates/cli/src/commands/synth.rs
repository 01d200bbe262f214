use std::path::Path;

use anyhow::Context;
use card_core::cvae::{train, CvaeModel, TrainConfig, TrainHistory};
use card_core::kernels::{hsic_permutation_test, krr_r2_mean, KernelConfig};
use card_core::rng::{derive, seeded};
use card_core::synth::{build_scm, generate_dataset, sample_dag, LatentSpec, Scm, SynthDataset};
use card_core::Tensor;
use serde::Serialize;

use super::{fmt, partition, run_trials, TrialFailure};
use crate::config::{RunConfig, SynthConfig};
use crate::io;
use crate::stats::{all_pass, Gate, Summary};

/// Draws a DAG, an SCM, and a dataset from `seed`.
pub(crate) fn synthesize(cfg: &SynthConfig, seed: u64) -> anyhow::Result<(Scm, SynthDataset)> {
    let spec = LatentSpec::new(cfg.n_c, cfg.n_s)?;
    let dag = sample_dag(spec, cfg.edge_prob, derive(seed, &[0]))?;
    let scm = build_scm(dag, &cfg.scm, derive(seed, &[1]))?;
    let ds = generate_dataset(&scm, cfg.n_per_s, scm.s_values(), derive(seed, &[2]))?;
    Ok((scm, ds))
}

#[derive(Debug, Clone, Serialize)]
pub struct ColumnStats {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSynthReport {
    pub seed: u64,
    pub rows: usize,
    pub n_c: usize,
    pub n_s: usize,
    /// Rows per surrogate value.
    pub rows_per_s: Vec<(f64, usize)>,
    pub edges: Vec<(usize, usize)>,
    pub observation_columns: Vec<String>,
    pub latent_columns: Vec<String>,
    pub columns: Vec<ColumnStats>,
    pub csv: String,
    pub scm: Scm,
}

fn column_stats(prefix: &str, t: &Tensor) -> Vec<ColumnStats> {
    t.col_means()
        .into_iter()
        .zip(t.col_stds())
        .enumerate()
        .map(|(i, (mean, sd))| ColumnStats {
            name: format!("{prefix}{i}"),
            mean,
            sd,
        })
        .collect()
}

pub fn gen_synth(cfg: &RunConfig) -> anyhow::Result<GenSynthReport> {
    cfg.validate()?;
    let (scm, ds) = synthesize(&cfg.synth, cfg.seed)?;
    io::ensure_dir(&cfg.out)?;
    let d = ds.t.cols();
    let n = ds.z.cols();
    let t_names: Vec<String> = (0..d).map(|i| format!("t{i}")).collect();
    let z_names: Vec<String> = (0..n).map(|i| format!("z{i}")).collect();
    let mut header: Vec<&str> = t_names.iter().map(String::as_str).collect();
    header.push("s");
    header.extend(z_names.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = (0..ds.len())
        .map(|r| {
            let mut row: Vec<String> = ds.t.row(r).iter().map(f64::to_string).collect();
            row.push(ds.s[r].to_string());
            row.extend(ds.z.row(r).iter().map(f64::to_string));
            row
        })
        .collect();
    let csv_path = cfg.out.join("synth.csv");
    io::write_csv(&csv_path, &header, &rows)?;

    let dag = scm.dag();
    let edges = (0..dag.n()).flat_map(|to| dag.parents(to).iter().map(move |&from| (from, to))).collect();
    let mut columns = column_stats("t", &ds.t);
    columns.extend(column_stats("z", &ds.z));
    let report = GenSynthReport {
        seed: cfg.seed,
        rows: ds.len(),
        n_c: cfg.synth.n_c,
        n_s: cfg.synth.n_s,
        rows_per_s: scm.s_values().iter().map(|&v| (v, ds.rows_with_s(v).len())).collect(),
        edges,
        observation_columns: t_names,
        latent_columns: z_names,
        columns,
        csv: "synth.csv".to_string(),
        scm: scm.clone(),
    };
    io::write_json(&cfg.out.join("synth_manifest.json"), &report)?;
    println!(
        "{} rows ({} per surrogate value), {} observed and {} latent columns, {} DAG edges",
        report.rows,
        cfg.synth.n_per_s,
        d,
        n,
        report.edges.len()
    );
    for c in &report.columns {
        println!("  {:>4}  mean {:>8.4}  sd {:>7.4}", c.name, c.mean, c.sd);
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentTrial {
    pub trial: usize,
    pub seed: u64,
    /// Kernel-ridge R² between true and recovered bias-free latents.
    pub r2_c: f64,
    /// Same score against the recovered spurious block, for reference.
    pub r2_c_from_s: f64,
    pub hsic: f64,
    pub hsic_p_value: f64,
    pub rejected: bool,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentReport {
    pub config: RunConfig,
    pub trials: Vec<IdentTrial>,
    pub failures: Vec<TrialFailure>,
    pub r2_c: Summary,
    pub non_rejections: usize,
    pub gates: Vec<Gate>,
    pub passed: bool,
}

fn evaluate(model: &CvaeModel, ds: &SynthDataset, cfg: &RunConfig, seed: u64) -> anyhow::Result<(f64, f64, f64, f64)> {
    let stride = |want: usize| (ds.len() / want.min(ds.len())).max(1);
    let idx: Vec<usize> = (0..ds.len()).step_by(stride(cfg.ident.eval_rows)).collect();
    let sub = ds.subset(&idx);
    let kc = KernelConfig::default();
    let mut rng = seeded(derive(seed, &[0]));
    let r2_c = krr_r2_mean(&sub.z_c(), &model.extract_zc(&sub.t)?, &kc, &mut rng)?;
    let r2_s = krr_r2_mean(&sub.z_c(), &model.extract_zs(&sub.t)?, &kc, &mut rng)?;
    let idx: Vec<usize> = (0..ds.len()).step_by(stride(cfg.ident.hsic_rows)).collect();
    let sub = ds.subset(&idx);
    let s = Tensor::column(sub.s.clone())?;
    let test = hsic_permutation_test(
        &model.extract_zc(&sub.t)?,
        &s,
        &KernelConfig::with_discrete_y(),
        cfg.ident.permutations,
        &mut rng,
    )?;
    Ok((r2_c, r2_s, test.statistic, test.p_value))
}

fn write_history(path: &Path, history: &TrainHistory) -> anyhow::Result<()> {
    let rows: Vec<Vec<String>> = history
        .epochs
        .iter()
        .enumerate()
        .map(|(e, l)| vec![e.to_string(), l.total.to_string(), l.recon.to_string(), l.kl.to_string(), l.hsic.to_string()])
        .collect();
    io::write_csv(path, &["epoch", "total", "recon", "kl", "hsic"], &rows)
}

pub fn ident(cfg: &RunConfig) -> anyhow::Result<IdentReport> {
    cfg.validate()?;
    let dir = cfg.out.join("ident");
    io::ensure_dir(&dir)?;
    let results = run_trials(cfg, |k, seed| {
        let (_, ds) = synthesize(&cfg.synth, seed)?;
        let spec = LatentSpec::new(cfg.synth.n_c, cfg.synth.n_s)?;
        let tc = TrainConfig {
            seed: derive(seed, &[3]),
            ..cfg.cvae.train.clone()
        };
        let (model, history) = train(&ds.t, &ds.s, spec, &cfg.cvae.model, &tc).with_context(|| format!("trial {k}"))?;
        io::write_checkpoint(&dir.join(format!("trial{k}_cvae.ckpt")), &model.named_tensors())?;
        write_history(&dir.join(format!("trial{k}_loss.csv")), &history)?;
        let (r2_c, r2_c_from_s, hsic, p) = evaluate(&model, &ds, cfg, derive(seed, &[4]))?;
        let trial = IdentTrial {
            trial: k,
            seed,
            r2_c,
            r2_c_from_s,
            hsic,
            hsic_p_value: p,
            rejected: p < cfg.ident.alpha,
            final_loss: history.last().map_or(f64::NAN, |l| l.total),
        };
        eprintln!("trial {k}: R²(Z_C, Ẑ_C) {r2_c:.3}, HSIC p {p:.3}");
        Ok(trial)
    })?;
    let (trials, failures) = partition(results);
    let r2_c = Summary::new(trials.iter().map(|t| t.r2_c).collect());
    let non_rejections = trials.iter().filter(|t| !t.rejected).count();
    let need = cfg.required(cfg.ident.non_reject_fraction);
    let gates = vec![
        Gate::new(
            "all trials completed",
            failures.is_empty(),
            format!("{} of {} trials failed", failures.len(), cfg.trials),
        ),
        Gate::new(
            "mean R²(Z_C, Ẑ_C)",
            r2_c.mean >= cfg.ident.r2_gate,
            format!("{} ± {} (gate {})", fmt(r2_c.mean), fmt(r2_c.se), cfg.ident.r2_gate),
        ),
        Gate::new(
            "HSIC(Ẑ_C, S) not rejected",
            non_rejections >= need,
            format!("{non_rejections}/{} trials (need {need})", cfg.trials),
        ),
    ];
    let report = IdentReport {
        config: cfg.clone(),
        trials,
        failures,
        r2_c,
        non_rejections,
        passed: all_pass(&gates),
        gates,
    };
    io::write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}
