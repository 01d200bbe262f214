use card_core::multilabeler::*;
use card_core::Tensor;

fn recovered(data: &MultiTaskDataset) -> (SharedRecovery, Vec<usize>) {
    let fit = fit_constrained(data, &FitConfig::default()).unwrap();
    let image = fit.shared_image(&data.mixing, 0.1).unwrap();
    (fit, image)
}

fn shared_columns(t: &Tensor, cols: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| cols.iter().map(|&c| t.get(r, c)).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn two_labeler_instance_shares_middle_latents() {
    assert_eq!(TaskSpec::default().shared(), vec![2, 3]);
}

#[test]
fn noiseless_instance_recovers_shared_block() {
    let data = generate_linear_tasks(&TaskSpec::default(), 11).unwrap();
    let (fit, image) = recovered(&data);
    assert_eq!(fit.shared.len(), 2);
    assert_eq!(image, vec![2, 3]);
    let zhat = fit.transform(&data.t).unwrap();
    let r2 = verify_subspace(&shared_columns(&data.z, &data.shared), &shared_columns(&zhat, &fit.shared)).unwrap();
    assert!(r2 >= 0.99, "r2 = {r2}");
    // Zero-noise data: the program reaches the ground-truth likelihood.
    assert!((fit.nll - true_nll(&data)).abs() < 1e-6, "{} vs {}", fit.nll, true_nll(&data));
}

#[test]
fn noisy_instances_recover_in_most_trials() {
    let spec = TaskSpec {
        noise_sd: 0.1,
        ..TaskSpec::default()
    };
    let hits = (0..8)
        .filter(|&seed| {
            let data = generate_linear_tasks(&spec, 100 + seed).unwrap();
            recovered(&data).1 == vec![2, 3]
        })
        .count();
    assert!(hits >= 7, "{hits}/8");
}

#[test]
fn identity_mixing_truth_is_a_fixed_point() {
    let data = generate_linear_tasks(&TaskSpec::default(), 5).unwrap();
    // Rewrite the instance so that T = Z.
    let mut data = data;
    data.t = data.z.clone();
    data.mixing = Tensor::identity(5);
    let fit = refine_from(&data, &Tensor::identity(5), &FitConfig::default()).unwrap();
    assert!(fit.w.max_abs_diff(&data.weights) < 1e-9);
    assert!(fit.f.max_abs_diff(&Tensor::identity(5)) < 1e-9);
}

#[test]
fn shared_spurious_latent_enlarges_the_recovered_set() {
    let spec = TaskSpec {
        n: 6,
        supports: vec![vec![0, 1, 2, 3, 5], vec![2, 3, 4, 5]],
        bias_free: vec![2, 3],
        tasks_per_labeler: 6,
        allow_violations: true,
        ..TaskSpec::default()
    };
    let data = generate_linear_tasks(&spec, 3).unwrap();
    let (_, image) = recovered(&data);
    assert!(image.len() > 2 && image.contains(&2) && image.contains(&3), "{image:?}");
    assert!(generate_linear_tasks(&TaskSpec { allow_violations: false, ..spec }, 3).is_err());
}

#[test]
fn task_rows_pass_intra_support_probe() {
    let data = generate_linear_tasks(&TaskSpec::default(), 2).unwrap();
    assert_eq!(a5_violations(&data, 1000, 9), 0);
}

#[test]
fn verify_subspace_edge_cases() {
    let data = generate_linear_tasks(&TaskSpec::default(), 4).unwrap();
    let zb = shared_columns(&data.z, &[2, 3]);
    let l = Tensor::new(2, 2, vec![1.0, 2.0, -0.5, 3.0]).unwrap();
    assert!(verify_subspace(&zb, &zb.matmul(&l).unwrap()).unwrap() >= 0.999);
    let other = shared_columns(&data.z, &[0, 4]);
    assert!(verify_subspace(&zb, &other).unwrap() < 0.05);
    assert!(verify_subspace(&zb, &shared_columns(&data.z, &[0])).is_err());
}

