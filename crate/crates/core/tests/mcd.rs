mod common;

use blocksynth::checkpoint::Checkpoint;
use blocksynth::eval::{evaluate_holdout, mcd, HoldoutEvaluation, McdOptions, DEFAULT_MCD_CHANNELS};
use blocksynth::nn::Tensor;
use blocksynth::training::Trainer;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_brute_force_on_fifty_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..50 {
        let t = 1 + i * 3;
        let a = random_matrix(&mut rng, 64, t);
        let b = random_matrix(&mut rng, 64, t);
        let got = mcd(&a, &b, DEFAULT_MCD_CHANNELS, None).unwrap().mcd_db;
        let want = brute_mcd(&a, &b, 1, 60);
        assert!((got - want).abs() <= 1e-9, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn unit_difference_in_a_single_coefficient() {
    let a = Tensor::zeros(&[64, 10]);
    let mut b = Tensor::zeros(&[64, 10]);
    b.data_mut()[17 * 10..18 * 10].iter_mut().for_each(|v| *v = 1.0);
    let r = mcd(&a, &b, DEFAULT_MCD_CHANNELS, None).unwrap();
    let expected = 10.0 / 10f64.ln() * 2f64.sqrt();
    assert!((r.mcd_db - expected).abs() < 1e-12);
    assert!((r.mcd_db - 6.1419).abs() < 5e-5);
}

proptest! {
    #[test]
    fn non_negative_symmetric_and_zero_on_self(seed in any::<u64>(), t in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, 64, t);
        let b = random_matrix(&mut rng, 64, t);
        let ab = mcd(&a, &b, DEFAULT_MCD_CHANNELS, None).unwrap().mcd_db;
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, mcd(&b, &a, DEFAULT_MCD_CHANNELS, None).unwrap().mcd_db);
        prop_assert_eq!(mcd(&a, &a, DEFAULT_MCD_CHANNELS, None).unwrap().mcd_db, 0.0);
    }
}

#[test]
fn empty_holdout_is_reported_explicitly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_corpus(dir.path()).with_holdout(Vec::new()).unwrap();
    let trainer = Trainer::new(&ds, tiny_config(0)).unwrap();
    let ckpt: Checkpoint = trainer.checkpoint();
    let r = evaluate_holdout(&ckpt, &ds, &McdOptions::default()).unwrap();
    assert_eq!(r, HoldoutEvaluation::Empty);
    assert_eq!(r.mean_mcd(), None);
}

#[test]
fn holdout_evaluation_is_deterministic_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_corpus(dir.path());
    let ckpt = Trainer::new(&ds, tiny_config(0)).unwrap().checkpoint();
    let opts = McdOptions::default();
    let a = evaluate_holdout(&ckpt, &ds, &opts).unwrap();
    let b = evaluate_holdout(&ckpt, &ds, &opts).unwrap();
    assert_eq!(a, b);
    let ids: Vec<_> = a.results().iter().map(|r| r.track.clone()).collect();
    assert_eq!(ids, ds.holdout);
    assert!(a.results().iter().all(|r| r.mcd_db > 0.0 && r.frames_compared == 160));
    let voiced = evaluate_holdout(&ckpt, &ds, &McdOptions { voiced_only: true, ..opts }).unwrap();
    let track = ds.holdout_tracks().next().unwrap();
    let n_voiced = track.annotations.f0_hz.iter().filter(|&&f| f > 0.0).count();
    assert_eq!(voiced.results()[0].frames_compared, n_voiced);
}
