#[path = "support/lof_oracle.rs"]
mod oracle;

use replayprobe_core::detector::train_lof;

#[test]
fn matches_brute_force_on_random_datasets() {
    let (worst, compared) = oracle::max_deviation(100);
    assert_eq!(compared, 2000);
    assert!(worst <= 1e-9, "max deviation {worst:e}");
}

#[test]
fn worked_example_matches_oracle() {
    let training: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
    let want = oracle::brute_force_lof(&training, &[2.5], 2);
    let train: Vec<_> = training.iter().map(|p| oracle::as_features(p)).collect();
    let got = train_lof(&train, 2)
        .unwrap()
        .lof_score(&oracle::as_features(&[2.5]))
        .unwrap();
    assert!((want - 5.0 / 6.0).abs() < 1e-12);
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn large_k_is_clamped_like_the_oracle() {
    let ds = oracle::dataset(7, 5);
    let train: Vec<_> = ds.training.iter().map(|p| oracle::as_features(p)).collect();
    let model = train_lof(&train, 500).unwrap();
    assert_eq!(model.k_eff(), Some(ds.training.len() - 1));
    for q in &ds.queries {
        let got = model.lof_score(&oracle::as_features(q)).unwrap();
        assert!((got - oracle::brute_force_lof(&ds.training, q, 500)).abs() <= 1e-9);
    }
}

#[test]
fn wider_sweep_agrees_to_relative_precision() {
    for seed in 100..400 {
        let ds = oracle::dataset(seed, 10);
        let train: Vec<_> = ds.training.iter().map(|p| oracle::as_features(p)).collect();
        let model = train_lof(&train, ds.k).unwrap();
        for q in &ds.queries {
            let got = model.lof_score(&oracle::as_features(q)).unwrap();
            let want = oracle::brute_force_lof(&ds.training, q, ds.k);
            assert!(
                (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                "seed {seed}: {got} vs {want}"
            );
        }
    }
}
