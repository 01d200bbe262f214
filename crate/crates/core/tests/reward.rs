mod common;

use card_core::reward::{
    bias_at_c, bt_nll, cue_group_mmd, deviation_from_oracle, eval_accuracy, train_crm, train_reward, BiasReport,
    Featurizer, Pairs, RandomReward, RewardConfig, Scorer, CRM_GAMMAS,
};
use card_core::synth::{make_concept_corpus, make_sycophancy_corpus, CorpusKind, CorpusWorld, WorldConfig};
use card_core::{Result, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

struct Constant;

impl Scorer for Constant {
    fn score(&mut self, items: &Tensor) -> Result<Vec<f64>> {
        Ok(vec![0.0; items.rows()])
    }
}

/// Scores an item by one of its columns.
struct Column(usize);

impl Scorer for Column {
    fn score(&mut self, items: &Tensor) -> Result<Vec<f64>> {
        Ok(items.col(self.0))
    }
}

#[test]
fn bt_nll_closed_forms() {
    for r in [-3.0, 0.0, 0.25, 17.0] {
        assert_eq!(bt_nll(r, r), std::f64::consts::LN_2);
    }
    let expect = (1.0 + (-1.0f64).exp()).ln();
    assert!((bt_nll(1.0, 0.0) - expect).abs() < 1e-15);
    assert!((bt_nll(1.0, 0.0) - 0.31326).abs() < 1e-5);
    assert!(bt_nll(60.0, 0.0) < 1e-25);
}

proptest! {
    #[test]
    fn bt_nll_symmetrised_is_at_least_two_ln_two(a in -30.0f64..30.0, b in -30.0f64..30.0) {
        let s = bt_nll(a, b) + bt_nll(b, a);
        prop_assert!(s >= 2.0 * std::f64::consts::LN_2 - 1e-15);
        if (a - b).abs() > 1e-6 {
            prop_assert!(s > 2.0 * std::f64::consts::LN_2);
        }
    }
}

fn small_cfg(seed: u64) -> RewardConfig {
    RewardConfig {
        hidden: vec![32, 32],
        epochs: 20,
        batch_size: 64,
        seed,
        ..RewardConfig::default()
    }
}

#[test]
fn separable_toy_set_is_learned() {
    let n = 200;
    let chosen = Tensor::new(n, 2, (0..n).flat_map(|i| [1.0, (i as f64).sin()]).collect()).unwrap();
    let rejected = Tensor::new(n, 2, (0..n).flat_map(|i| [-1.0, (i as f64).cos()]).collect()).unwrap();
    let pairs = Pairs::new(chosen, rejected, vec![false; n]).unwrap();
    let (mut m, hist) = train_reward(&pairs, Featurizer::Raw, &small_cfg(1)).unwrap();
    assert_eq!(eval_accuracy(&mut m, &pairs).unwrap(), 1.0);
    assert!(hist.loss.last().unwrap() < &hist.loss[0]);
}

#[test]
fn constant_scorer_sits_at_one_half_and_deviation_of_oracle_is_zero() {
    let pairs = Pairs::new(Tensor::zeros(7, 1), Tensor::filled(7, 1, 1.0), vec![true; 7]).unwrap();
    assert_eq!(eval_accuracy(&mut Constant, &pairs).unwrap(), 0.5);
    let curve = [(0.1, 0.7), (0.5, 0.8)];
    assert_eq!(deviation_from_oracle(&curve, &curve).unwrap(), vec![0.0, 0.0]);
    assert!(deviation_from_oracle(&curve, &[(0.1, 0.7)]).is_err());
    let r = BiasReport::new(vec![0.1, 0.5], vec![0.6, 0.9], &[0.7, 0.8], vec![]).unwrap();
    assert_eq!(r.worst_case_accuracy, 0.6);
    assert!((r.max_deviation - 0.1).abs() < 1e-12);
    assert_eq!(r.avg_bias_at_c, None);
}

#[test]
fn training_is_deterministic_and_gamma_zero_is_vanilla() {
    let world = CorpusWorld::build(CorpusKind::Sycophancy, &WorldConfig::default(), 3).unwrap();
    let ds = make_sycophancy_corpus(&world, 600, 0.8, 4).unwrap();
    let pairs = Pairs::from_dataset(&ds, Featurizer::Raw, None).unwrap();
    let (a, ha) = train_reward(&pairs, Featurizer::Raw, &small_cfg(2)).unwrap();
    let (b, hb) = train_reward(&pairs, Featurizer::Raw, &small_cfg(2)).unwrap();
    assert_eq!(a.named_tensors(), b.named_tensors());
    assert_eq!(ha, hb);
    let (c, hc) = train_crm(&pairs, Featurizer::Raw, &small_cfg(2), 0.0).unwrap();
    assert_eq!(a.named_tensors(), c.named_tensors());
    assert_eq!(ha, hc);
    assert_eq!(CRM_GAMMAS, [1.0, 3.0, 10.0, 30.0, 100.0]);
}

#[test]
fn strong_invariance_penalty_shrinks_group_discrepancy() {
    let world = CorpusWorld::build(CorpusKind::Sycophancy, &WorldConfig::default(), 5).unwrap();
    let ds = make_sycophancy_corpus(&world, 2000, 0.8, 6).unwrap();
    let pairs = Pairs::from_dataset(&ds, Featurizer::Raw, None).unwrap();
    let (plain, _) = train_reward(&pairs, Featurizer::Raw, &small_cfg(7)).unwrap();
    let (crm, _) = train_crm(&pairs, Featurizer::Raw, &small_cfg(7), 100.0).unwrap();
    let (a, b) = (cue_group_mmd(&plain, &pairs).unwrap(), cue_group_mmd(&crm, &pairs).unwrap());
    assert!(b < a, "CRM {b} vs vanilla {a}");
}

/// Logistic regression on chosen − rejected latent differences, fitted by
/// Newton's method; returns held-out accuracy.
fn logistic_oracle(train_x: &DMatrix<f64>, test_x: &DMatrix<f64>) -> f64 {
    // Each training row is a "chosen beats rejected" example; mirror it so
    // both classes are present.
    let n = train_x.nrows();
    let d = train_x.ncols();
    let x = DMatrix::from_fn(2 * n, d, |i, j| if i < n { train_x[(i, j)] } else { -train_x[(i - n, j)] });
    let y = DVector::from_fn(2 * n, |i, _| if i < n { 1.0 } else { 0.0 });
    let mut w = DVector::zeros(d);
    for _ in 0..50 {
        let p = (&x * &w).map(|v: f64| 1.0 / (1.0 + (-v).exp()));
        let grad = x.transpose() * (&p - &y);
        let weights = p.map(|v| v * (1.0 - v));
        let h = x.transpose() * DMatrix::from_diagonal(&weights) * &x + DMatrix::identity(d, d) * 1e-6;
        w -= h.lu().solve(&grad).unwrap();
    }
    let scores = test_x * w;
    scores.iter().map(|&s| if s > 0.0 { 1.0 } else if s == 0.0 { 0.5 } else { 0.0 }).sum::<f64>() / test_x.nrows() as f64
}

#[test]
fn unbiased_corpus_accuracy_tracks_the_bayes_rate() {
    let world = CorpusWorld::build(CorpusKind::Sycophancy, &WorldConfig::default(), 8).unwrap();
    let train = make_sycophancy_corpus(&world, 4000, 0.5, 9).unwrap();
    let test = make_sycophancy_corpus(&world, 2000, 0.5, 10).unwrap();
    let diff = |ds: &card_core::synth::PreferenceDataset| {
        let (c, r) = (ds.chosen_latents(), ds.rejected_latents());
        DMatrix::from_fn(ds.len(), 4, |i, j| c.get(i, j) - r.get(i, j))
    };
    let bayes = logistic_oracle(&diff(&train), &diff(&test));
    let cfg = RewardConfig { seed: 11, ..RewardConfig::default() };
    let (mut m, _) = train_reward(&Pairs::from_dataset(&train, Featurizer::Raw, None).unwrap(), Featurizer::Raw, &cfg).unwrap();
    let acc = eval_accuracy(&mut m, &Pairs::from_dataset(&test, Featurizer::Raw, None).unwrap()).unwrap();
    assert!((acc - bayes).abs() <= 0.05, "model {acc} vs logistic oracle {bayes}");
}

#[test]
fn random_reward_draws() {
    let mut rr = RandomReward::new(12);
    let draws: Vec<f64> = (0..100_000).map(|_| rr.draw()).collect();
    assert!(draws.iter().all(|v| (-10.0..=10.0).contains(v)));
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!(mean.abs() <= 0.1, "{mean}");

    for kind in [CorpusKind::Sycophancy, CorpusKind::Concept] {
        let world = CorpusWorld::build(kind, &WorldConfig::default(), 13).unwrap();
        let ds = world.preference_corpus(10_000, 0.8, 14).unwrap();
        let pairs = Pairs::from_dataset(&ds, Featurizer::Raw, None).unwrap();
        let acc = eval_accuracy(&mut rr, &pairs).unwrap();
        assert!((acc - 0.5).abs() <= 3.0 * (0.25f64 / 10_000.0).sqrt(), "{acc}");
    }
}

#[test]
fn bias_at_c_cases() {
    let world = CorpusWorld::build(CorpusKind::Concept, &WorldConfig::default(), 15).unwrap();
    let probe_ds = make_concept_corpus(&world, 10_000, 0.5, 16).unwrap();
    let probe = Pairs::from_dataset(&probe_ds, Featurizer::Raw, None).unwrap();
    let random = bias_at_c(&mut RandomReward::new(17), &probe, 0.5).unwrap();
    assert!(random < 0.05, "{random}");
    // Column 8 is the color indicator.
    assert_eq!(bias_at_c(&mut Column(8), &probe, 0.5).unwrap(), 1.0);
    assert_eq!(bias_at_c(&mut Constant, &probe, 0.5).unwrap(), 0.0);
    let skewed = Pairs::from_dataset(&make_concept_corpus(&world, 2000, 0.9, 18).unwrap(), Featurizer::Raw, None).unwrap();
    assert!(bias_at_c(&mut Constant, &skewed, 0.9).is_err());
}

#[test]
fn bias_at_c_ignores_monotone_rescaling() {
    struct Cubed(Column);
    impl Scorer for Cubed {
        fn score(&mut self, items: &Tensor) -> Result<Vec<f64>> {
            Ok(self.0.score(items)?.into_iter().map(|v| 2.0 * v * v * v + 1.0).collect())
        }
    }
    let world = CorpusWorld::build(CorpusKind::Concept, &WorldConfig::default(), 19).unwrap();
    let probe = Pairs::from_dataset(&make_concept_corpus(&world, 3000, 0.5, 20).unwrap(), Featurizer::Raw, None).unwrap();
    let a = bias_at_c(&mut Column(2), &probe, 0.5).unwrap();
    let b = bias_at_c(&mut Cubed(Column(2)), &probe, 0.5).unwrap();
    assert_eq!(a, b);
}
