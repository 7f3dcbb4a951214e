use gapcast::dataset::{group_scenes, ingest, synth_scenes, IngestConfig, KinematicGapRule, SynthConfig};
use gapcast::env::{EnvConfig, ReplayScene};
use gapcast::gap::GapModel;
use gapcast::train::{finetune_gail, replay_velocity_error, GailConfig};
use rand::SeedableRng;
use std::sync::Arc;

#[test]
#[ignore]
fn probe_gail() {
    let map = Arc::new(gapcast::map::bendplatz().unwrap());
    let cfg = SynthConfig { n_scenes: 10, duration: 50.0, seed: 11, speed_factor_range: (0.6, 0.75), ..Default::default() };
    let (table, _) = synth_scenes(&map, &KinematicGapRule::default(), &cfg).unwrap();
    let (tracks, _) = ingest(&table, &map, &IngestConfig::default()).unwrap();
    let scenes: Vec<ReplayScene> = group_scenes(&tracks)
        .into_iter()
        .map(|idxs| ReplayScene { dt: 0.2, tracks: idxs.iter().map(|&k| tracks[k].to_replay_track()).collect() })
        .collect();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut gap = GapModel::new(&mut rng).unwrap();
    let labels = gapcast::dataset::synth_labels(20_000, 5, 0.05);
    let (ltr, lva) = labels.split_at(18_000);
    gapcast::gap::train_gap(&mut gap, ltr, lva, &gapcast::gap::GapTrainConfig {
        epochs: 200, batch_size: 8192, noise: None, seed: 5, ..Default::default()
    }).unwrap();
    let (policy, value, _) = gapcast::train::pretrain_policy(
        Arc::clone(&map), &gap,
        &EnvConfig { n_agents: 8, ..Default::default() },
        &gapcast::train::PpoConfig { epochs: 400, epoch_length: 200, lr: 1e-4, reward_scale: 0.05, seed: 2, ..Default::default() },
        |_| {},
    ).unwrap();
    let before = replay_velocity_error(Arc::clone(&map), &gap, &scenes, &policy, 60, 77).unwrap();

    for gseed in [13u64, 14, 777] {
        let gcfg = GailConfig {
            epochs: 500,
            epoch_length: 2048,
            policy_updates: 10,
            disc_updates: 4,
            disc_batch: 256,
            lr: 7e-5,
            seed: gseed,
            ..Default::default()
        };
        let (p2, _, _, _) = finetune_gail(
            Arc::clone(&map), &gap, &scenes, policy.clone(), value.clone(), &gcfg,
            &EnvConfig::default(), |_| {},
        ).unwrap();
        let after = replay_velocity_error(Arc::clone(&map), &gap, &scenes, &p2, 60, 77).unwrap();
        println!("seed {gseed}: error {before:.3} -> {after:.3}");
    }
}
