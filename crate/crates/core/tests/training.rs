use maonet_core::data::{generate_synthetic_dataset, Sample, SynthConfig, VosSequence};
use maonet_core::training::{checkpoint_name, train, TrainConfig, FINAL_CHECKPOINT, LOSS_LOG};
use maonet_core::{load_checkpoint, NetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(seed: u64, res: usize) -> (Vec<VosSequence>, Vec<Sample>) {
    let cfg = SynthConfig {
        n_sequences: 10,
        frames_per_seq: 6,
        resolution: res,
        n_sod: 40,
        ..Default::default()
    };
    generate_synthetic_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn small(steps: usize) -> TrainConfig {
    TrainConfig {
        resolution: 32,
        batch_size: 4,
        steps,
        net: NetConfig {
            channels: vec![4, 8, 8, 8],
            decoder_width: 8,
        },
        ..TrainConfig::desk_scale()
    }
}

#[test]
fn loss_falls_over_500_desk_scale_steps() {
    let (vos, sod) = dataset(11, 64);
    let cfg = TrainConfig {
        steps: 500,
        ..TrainConfig::desk_scale()
    };
    let (model, report) = train(&cfg, &vos, &sod, None).unwrap();
    let first = report.mean_loss(0..50);
    let last = report.mean_loss(450..500);
    assert!(last < first, "first 50 mean {first}, last 50 mean {last}");

    // a trained model reacts to what the motion encoder sees
    let s = &vos[0].samples[0];
    let x = s.image.to_tensor();
    let with_flow = model.forward(&x, &s.flow.as_ref().unwrap().to_tensor()).unwrap();
    let with_image = model.forward(&x, &x).unwrap();
    assert!(with_flow.max_abs_diff(&with_image) > 1e-3);
}

#[test]
fn fixed_seed_gives_bit_identical_losses() {
    let (vos, sod) = dataset(12, 32);
    let bits = |cfg: &TrainConfig| {
        let (_, r) = train(cfg, &vos, &sod, None).unwrap();
        r.losses.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>()
    };
    let cfg = small(15);
    assert_eq!(bits(&cfg), bits(&cfg));
    let other = TrainConfig { seed: 1, ..cfg.clone() };
    assert_ne!(bits(&cfg), bits(&other));
}

#[test]
fn zero_sod_probability_logs_zero_fraction() {
    let (vos, sod) = dataset(13, 32);
    let cfg = TrainConfig {
        p_sod: 0.0,
        ..small(5)
    };
    let (_, r) = train(&cfg, &vos, &sod, None).unwrap();
    assert!(r.losses.iter().all(|l| l.sod_fraction == 0.0));
}

#[test]
fn checkpoints_follow_cadence_and_reload() {
    let (vos, sod) = dataset(14, 32);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(20);
    let (model, report) = train(&cfg, &vos, &sod, Some(dir.path())).unwrap();
    // every max(20/10, 1) = 2 steps, plus the final one
    assert_eq!(report.checkpoints.len(), 11);
    assert!(dir.path().join(checkpoint_name(2)).is_file());
    assert!(!dir.path().join(checkpoint_name(3)).exists());
    let log = std::fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
    assert_eq!(log.lines().count(), 21);
    let reloaded = load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(reloaded.state(), model.state());
}

#[test]
fn invalid_configs_are_rejected() {
    let (vos, sod) = dataset(15, 32);
    for cfg in [
        TrainConfig { resolution: 48, ..small(1) },
        TrainConfig { steps: 0, ..small(1) },
        TrainConfig { p_sod: 1.5, ..small(1) },
    ] {
        assert!(train(&cfg, &vos, &sod, None).is_err());
    }
}
