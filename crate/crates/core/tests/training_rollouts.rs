//! End-to-end training behavior: overfitting a toy set beats the
//! zero-readout baseline, fine-tuning improves on a new network, and the
//! tuned parameters still run on the original architecture.

use std::time::Duration;

use advgnn_core::gnn::{FeatureMode, GnnParams};
use advgnn_core::netcore::Network;
use advgnn_core::relaxation::AscentConfig;
use advgnn_core::synth::{classified_interior_property, random_network};
use advgnn_core::training::{fine_tune, total_loss, train, TrainConfig, TrainingSample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn samples_for(net: &Network, rng: &mut ChaCha8Rng, count: usize) -> Vec<TrainingSample> {
    (0..count)
        .map(|_| {
            let prop = classified_interior_property(rng, net, 0.15);
            TrainingSample {
                x: prop.ball.center.clone(),
                y: prop.y,
                y_tar: prop.y_tar,
                epsilon: prop.ball.epsilon,
                net_ref: None,
            }
        })
        .collect()
}

fn desk_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        horizon: 8,
        gamma: 0.9,
        starts: 2,
        epochs: 50,
        p: 6,
        t1: 1,
        t2: 1,
        alpha: 1e-2,
        seed,
        feature_mode: FeatureMode::Wk,
        ascent: AscentConfig {
            steps: 10,
            ..AscentConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// A 5-property toy set must reach a total loss strictly below the
/// zero-readout baseline within 50 epochs.
#[test]
fn toy_overfit_beats_zero_readout_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x70F1);
    let net = random_network(&mut rng, &[4, 10, 8, 3]);
    let samples = samples_for(&net, &mut rng, 5);
    let cfg = desk_cfg(3);
    let baseline_params = GnnParams::zeros(cfg.p, cfg.t1, cfg.t2);
    let baseline = total_loss(&net, &baseline_params, &samples, &cfg, 0).unwrap();
    let (params, log) = train(&net, &samples, None, &cfg).unwrap();
    let trained = total_loss(&net, &params, &samples, &cfg, 0).unwrap();
    assert!(
        trained < baseline,
        "trained loss {trained} must undercut the frozen baseline {baseline}"
    );
    assert_eq!(log.len(), 50);
}

/// Fine-tuning on a new network lowers its total loss versus the incoming
/// parameters, and the tuned parameters still run on the original network.
#[test]
fn fine_tune_improves_on_new_network_and_transfers_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF17E);
    let source_net = random_network(&mut rng, &[4, 8, 3]);
    let source_samples = samples_for(&source_net, &mut rng, 4);
    let cfg = desk_cfg(11);
    let pretrain_cfg = TrainConfig {
        epochs: 15,
        ..cfg.clone()
    };
    let (params, _) = train(&source_net, &source_samples, None, &pretrain_cfg).unwrap();

    // A different architecture entirely.
    let target_net = random_network(&mut rng, &[6, 12, 9, 4]);
    let target_samples = samples_for(&target_net, &mut rng, 4);
    let before = total_loss(&target_net, &params, &target_samples, &cfg, 0).unwrap();
    let (tuned, log) = fine_tune(
        &target_net,
        &params,
        &target_samples,
        Duration::from_secs(20),
        &TrainConfig {
            epochs: 30,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert!(!log.is_empty(), "fine-tuning must run at least one epoch");
    let after = total_loss(&target_net, &tuned, &target_samples, &cfg, 0).unwrap();
    assert!(
        after < before,
        "fine-tuned loss {after} must undercut the incoming {before}"
    );

    // Architecture independence: the tuned parameters still evaluate on the
    // source network without shape errors.
    let back = total_loss(&source_net, &tuned, &source_samples, &cfg, 0).unwrap();
    assert!(back.is_finite());
}

/// The per-epoch log is monotone in epochs count and deterministic.
#[test]
fn training_log_shape_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x10C);
    let net = random_network(&mut rng, &[3, 6, 2]);
    let samples = samples_for(&net, &mut rng, 3);
    let cfg = TrainConfig {
        epochs: 4,
        ..desk_cfg(29)
    };
    let (p1, l1) = train(&net, &samples, None, &cfg).unwrap();
    let (p2, l2) = train(&net, &samples, None, &cfg).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(l1.len(), 4);
    for (a, b) in l1.iter().zip(&l2) {
        assert_eq!(a.total_loss, b.total_loss);
        assert_eq!(a.lr, b.lr);
        assert_eq!(a.epoch, b.epoch);
    }
}

/// Validation split: returned parameters achieve the best validation loss
/// among the per-epoch snapshots (checked by re-evaluating both ends).
#[test]
fn validation_split_returns_best_epoch() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE57);
    let net = random_network(&mut rng, &[3, 8, 3]);
    let train_set = samples_for(&net, &mut rng, 4);
    let val_set = samples_for(&net, &mut rng, 3);
    let cfg = TrainConfig {
        epochs: 12,
        ..desk_cfg(31)
    };
    let (best, _) = train(&net, &train_set, Some(&val_set), &cfg).unwrap();
    let (last, _) = train(&net, &train_set, None, &cfg).unwrap();
    // The validation loss of the returned parameters can only be at least
    // as good as the final-epoch parameters' validation loss.
    let val_epoch = advgnn_core::training::VALIDATION_EPOCH;
    let best_loss = total_loss(&net, &best, &val_set, &cfg, val_epoch).unwrap();
    let last_loss = total_loss(&net, &last, &val_set, &cfg, val_epoch).unwrap();
    assert!(best_loss <= last_loss + 1e-12);
}
