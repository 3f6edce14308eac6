use acdnet_core::data::LabeledClip;
use acdnet_core::model::Params;
use acdnet_core::net::build_acdnet;
use acdnet_core::optim::OptimizerState;
use acdnet_core::train::{batch_loss, loss_curve_csv, mixed_batch, train, train_step, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: usize = 2000;

fn tone_clips(per_class: usize, seed: u64) -> Vec<LabeledClip> {
    let bands = [(50.0, 200.0), (250.0, 400.0), (450.0, 600.0), (650.0, 800.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (label, &(lo, hi)) in bands.iter().enumerate() {
        for _ in 0..per_class {
            let f: f64 = rng.random_range(lo..hi);
            let amp: f64 = rng.random_range(3000.0..20000.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let samples = (0..3000)
                .map(|i| (amp * (std::f64::consts::TAU * f * i as f64 / SR as f64 + phase).sin()) as f32)
                .collect();
            out.push(LabeledClip { samples, label, sr: SR });
        }
    }
    out
}

#[test]
fn small_step_decreases_loss() {
    let spec = build_acdnet(2000, SR, 4, 1).unwrap();
    let clips = tone_clips(4, 1);
    let refs: Vec<&LabeledClip> = clips.iter().collect();
    for seed in 0..3 {
        let mut params = Params::init(&spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = mixed_batch(&refs, 8, spec.i_len, 4, &mut rng).unwrap();
        let mut opt = OptimizerState::new(1e-4, 0.9, 0.0).unwrap();
        let before = train_step(&spec, &mut params, &mut opt, x.clone(), y.clone(), 7, None).unwrap();
        let after = batch_loss(&spec, &params, &x, &y, 7).unwrap();
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn fixed_seed_gives_identical_curve() {
    let spec = build_acdnet(2000, SR, 4, 1).unwrap();
    let clips = tone_clips(3, 2);
    let refs: Vec<&LabeledClip> = clips.iter().collect();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 6,
        examples_per_epoch: Some(12),
        warmup_epochs: 0,
        lr0: 0.01,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let out = train(&spec, Params::init(&spec, 3).unwrap(), &refs, &refs[..4], &cfg, Default::default()).unwrap();
        loss_curve_csv(&out.curve)
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.lines().count(), 3);
}
