mod common;

use blocksynth::config::TrainingConfig;
use blocksynth::eval::read_loss_csv;
use blocksynth::training::{epoch_checkpoint_name, train, Trainer, LATEST_CHECKPOINT, LOSS_CSV, LOSS_CSV_HEADER};
use blocksynth::Error;
use common::*;

fn trainer(cfg: TrainingConfig) -> (tempfile::TempDir, Trainer) {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_corpus(dir.path());
    let t = Trainer::new(&ds, cfg).unwrap();
    (dir, t)
}

#[test]
fn critic_weights_stay_clipped_after_every_update() {
    // a large learning rate pushes many weights against the bound
    let (_d, mut t) = trainer(TrainingConfig {
        learning_rate: 0.05,
        ..tiny_config(1)
    });
    assert!(t.critic.params.max_abs() <= 0.01);
    for _ in 0..12 {
        t.critic_step().unwrap();
        assert!(t.critic.params.max_abs() <= t.config.clip_bound);
    }
    let at_bound = t.critic.params.flatten().iter().filter(|v| v.abs() == 0.01).count();
    assert!(at_bound > 0, "clipping was never exercised");
}

#[test]
fn five_critic_updates_per_generator_update() {
    let (_d, mut t) = trainer(tiny_config(3));
    for epoch in 1..=3 {
        t.run_epoch().unwrap();
        assert_eq!(t.counters.generator, (epoch * t.steps_per_epoch()) as u64);
        assert_eq!(t.counters.critic, 5 * t.counters.generator);
    }
}

#[test]
fn total_loss_decomposes() {
    let (_d, mut t) = trainer(tiny_config(2));
    for _ in 0..4 {
        let r = t.generator_step().unwrap();
        assert!((r.total - (r.gen_adv + 0.0005 * r.recon)).abs() <= 1e-9);
    }
    let r = t.run_epoch().unwrap();
    assert!((r.total - (r.gen_adv + 0.0005 * r.recon)).abs() <= 1e-9);
}

#[test]
fn zero_lambda_leaves_only_the_adversarial_term() {
    let (_d, mut t) = trainer(TrainingConfig {
        lambda_recon: 0.0,
        ..tiny_config(1)
    });
    let r = t.generator_step().unwrap();
    assert!(r.recon > 0.0);
    assert_eq!(r.total, r.gen_adv);
}

#[test]
fn updates_are_isolated() {
    let (_d, mut t) = trainer(tiny_config(1));
    let g0 = t.generator.params.checksum();
    let d0 = t.critic.params.checksum();
    t.critic_step().unwrap();
    assert_eq!(t.generator.params.checksum(), g0);
    let d1 = t.critic.params.checksum();
    assert_ne!(d1, d0);
    t.generator_step().unwrap();
    assert_eq!(t.critic.params.checksum(), d1);
    assert_ne!(t.generator.params.checksum(), g0);
}

#[test]
fn identical_real_and_fake_give_zero_estimate() {
    let (_d, mut t) = trainer(tiny_config(1));
    let batch = t.sample_batch().unwrap();
    let r = t.critic_step_with_fakes(&batch, &batch.targets.clone()).unwrap();
    assert_eq!(r.critic_estimate, 0.0);
}

#[test]
fn critic_estimate_does_not_fall_on_a_fixed_batch() {
    let (_d, mut t) = trainer(TrainingConfig {
        learning_rate: 1e-6,
        ..tiny_config(1)
    });
    let batch = t.sample_batch().unwrap();
    let mut prev = t.critic_step_on(&batch).unwrap().critic_estimate;
    for step in 0..50 {
        let next = t.critic_step_on(&batch).unwrap().critic_estimate;
        assert!(next >= prev - 1e-6, "step {step}: {prev} -> {next}");
        prev = next;
    }
}

#[test]
fn non_finite_loss_names_the_offending_windows() {
    let (_d, mut t) = trainer(tiny_config(1));
    t.generator.params.layers[3].bias.data_mut()[0] = f64::NAN;
    let err = t.generator_step().unwrap_err();
    match &err {
        Error::NonFinite { windows, .. } => assert_eq!(windows.len(), t.config.batch_size),
        other => panic!("unexpected error {other:?}"),
    }
    assert!(err.is_numeric());
    assert!(err.to_string().contains("track"), "{err}");
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_corpus(&dir.path().join("corpus"));
    let out = dir.path().join("run");
    let outcome = train(&ds, tiny_config(0), &out, None).unwrap();
    assert!(outcome.history.is_empty());
    let mut files: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, vec![epoch_checkpoint_name(0), LATEST_CHECKPOINT.to_string(), LOSS_CSV.to_string()]);
    assert_eq!(std::fs::read_to_string(out.join(LOSS_CSV)).unwrap(), format!("{LOSS_CSV_HEADER}\n"));
    assert!(read_loss_csv(&out.join(LOSS_CSV)).unwrap().is_empty());
}

#[test]
fn held_out_tracks_never_feed_training() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_corpus(dir.path());
    let mut t = Trainer::new(&ds, tiny_config(1)).unwrap();
    let held = ds.tracks.iter().position(|tr| ds.is_holdout(&tr.id)).unwrap();
    let training_ids: Vec<&str> = ds.training_tracks().map(|t| t.id.as_str()).collect();
    for _ in 0..20 {
        let b = t.sample_batch().unwrap();
        for &(ti, start) in &b.windows {
            assert!(ti < training_ids.len());
            assert!(start + 64 <= 160);
        }
    }
    assert!(ds.is_holdout(&ds.tracks[held].id));
}
