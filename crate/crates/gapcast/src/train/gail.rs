//! Adversarial imitation fine-tuning in the open-loop replay environment:
//! the policy drives one ego vehicle through recorded scenes while a
//! discriminator learns to tell policy states from recorded states; its
//! confusion is the policy's reward.

use super::{
    compute_gae, gaussian_logp, ppo_update, Boundary, PolicyOptimizer, Transition, UpdateConfig,
};
use crate::driver::MlpPolicy;
use crate::env::{brake_state, reward_from_parts, EnvConfig, ReplayEnv, ReplayScene};
use crate::error::{Error, Result};
use crate::gap::GapModel;
use crate::map::IntersectionMap;
use crate::mlp::{Activation, Adam, GradientTape, TinyMlp, Workspace};
use crate::scenario::{driving_observation, Scenario, VehicleState, DRIVER_INPUT_WIDTH};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

pub const DISC_LAYERS: [usize; 4] = [12, 64, 64, 1];

/// Reward source of the fine-tuning stage. `Manual` degrades the stage to a
/// plain on-policy update on the shaped reward (used to verify that both
/// trainers share one update path).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    Discriminator,
    Manual,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GailConfig {
    pub disc_lr: f64,
    /// Transitions collected per epoch.
    pub epoch_length: usize,
    pub epochs: usize,
    /// Clipped-surrogate sweeps per epoch.
    pub policy_updates: usize,
    /// Discriminator batches per epoch.
    pub disc_updates: usize,
    pub disc_batch: usize,
    pub reward_source: RewardSource,
    pub lr: f64,
    pub value_lr: f64,
    pub clip_ratio: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub minibatch: usize,
    pub seed: u64,
    /// Discriminator accuracy considered collapsed.
    pub collapse_threshold: f64,
    /// Consecutive collapsed epochs before stopping early.
    pub collapse_patience: usize,
}

impl Default for GailConfig {
    fn default() -> Self {
        Self {
            disc_lr: 1e-3,
            epoch_length: 16384,
            epochs: 12000,
            policy_updates: 10,
            disc_updates: 4,
            disc_batch: 512,
            reward_source: RewardSource::Discriminator,
            lr: 2e-5,
            value_lr: 1e-3,
            clip_ratio: 0.2,
            discount: 0.99,
            gae_lambda: 0.95,
            minibatch: 256,
            seed: 0,
            collapse_threshold: 0.999,
            collapse_patience: 50,
        }
    }
}

impl GailConfig {
    pub fn validate(&self) -> Result<()> {
        if self.disc_updates == 0 && self.reward_source == RewardSource::Discriminator {
            return Err(Error::Training("discriminator updates must be >= 1".into()));
        }
        if self.epoch_length == 0 {
            return Err(Error::Training("epoch length must be positive".into()));
        }
        self.update_config().validate()
    }

    fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            lr: self.lr,
            value_lr: self.value_lr,
            clip_ratio: self.clip_ratio,
            update_passes: self.policy_updates.max(1),
            minibatch: self.minibatch,
            entropy_coef: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GailEpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub disc_accuracy: f64,
    pub episodes: usize,
    pub mean_episode_len: f64,
}

pub fn new_discriminator<R: Rng>(rng: &mut R) -> Result<TinyMlp> {
    let mut net = TinyMlp::new(&DISC_LAYERS, Activation::Relu, Activation::Sigmoid, rng)?;
    net.set_input_scales(&crate::scenario::driver_input_scales())?;
    Ok(net)
}

/// Tracks with at least two real samples can serve as ego episodes.
fn ego_candidates(scene: &ReplayScene) -> Vec<usize> {
    scene
        .tracks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.s.len() > t.extrap_prefix + 1)
        .map(|(k, _)| k)
        .collect()
}

/// Expert observation of a recorded vehicle at a recorded frame, built the
/// same way the policy sees its own states.
fn expert_observation(
    map: &IntersectionMap,
    gap_model: &GapModel,
    scene: &ReplayScene,
    track_idx: usize,
    step: usize,
    ws: &mut Workspace,
) -> Result<Option<[f64; DRIVER_INPUT_WIDTH]>> {
    let track = &scene.tracks[track_idx];
    let Some((s, v)) = track.state_at(step) else { return Ok(None) };
    if track.is_extrapolated_at(step) {
        return Ok(None);
    }
    let mut vehicles = vec![VehicleState {
        id: crate::scenario::VehicleId(track.track_id),
        route: track.route,
        s,
        v,
        length: track.length,
        width: track.width,
        kind: track.kind,
    }];
    vehicles.extend(scene.vehicles_at(step, Some(track_idx)));
    let scenario = Scenario::new(vehicles);
    let delta = crate::gap::decide(map, &scenario, 0, gap_model, ws)?.delta;
    let obs = driving_observation(map, &scenario, 0)?;
    Ok(Some(obs.to_input(delta)))
}

/// Sample one expert observation, retrying over random frames.
fn sample_expert_obs(
    map: &IntersectionMap,
    gap_model: &GapModel,
    scenes: &[ReplayScene],
    rng: &mut ChaCha8Rng,
    ws: &mut Workspace,
) -> Result<[f64; DRIVER_INPUT_WIDTH]> {
    for _ in 0..1000 {
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let candidates = ego_candidates(scene);
        if candidates.is_empty() {
            continue;
        }
        let track_idx = candidates[rng.random_range(0..candidates.len())];
        let track = &scene.tracks[track_idx];
        let step = rng.random_range(track.first_real_step()..track.end_step());
        if let Some(obs) = expert_observation(map, gap_model, scene, track_idx, step, ws)? {
            return Ok(obs);
        }
    }
    Err(Error::Training("could not sample an expert observation".into()))
}

fn surrogate_reward(disc: &TinyMlp, obs: &[f64], ws: &mut Workspace) -> Result<f64> {
    let d = disc.forward_scalar(obs, ws)?.clamp(1e-6, 1.0 - 1e-6);
    Ok(-(1.0 - d).ln())
}

/// Collect about one epoch of open-loop transitions. Episodes start from
/// randomly chosen recorded scenes; only the ego is advanced by the policy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn collect_replay_epoch(
    map: &Arc<IntersectionMap>,
    gap_model: &GapModel,
    scenes: &[ReplayScene],
    policy: &MlpPolicy,
    value: &TinyMlp,
    disc: &TinyMlp,
    cfg: &GailConfig,
    env_cfg: &EnvConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<Transition>>, usize)> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut ws = Workspace::default();
    let mut streams = Vec::new();
    let mut total = 0usize;
    let mut episodes = 0usize;
    while total < cfg.epoch_length {
        let scene_idx = rng.random_range(0..scenes.len());
        let scene = &scenes[scene_idx];
        let candidates = ego_candidates(scene);
        if candidates.is_empty() {
            continue;
        }
        let ego = candidates[rng.random_range(0..candidates.len())];
        let mut env = ReplayEnv::new(
            Arc::clone(map),
            Arc::new(scene.clone()),
            ego,
            gap_model.clone(),
        )?;
        let Some(mut obs) = env.observation()? else { continue };
        episodes += 1;
        let mut stream = Vec::new();
        loop {
            let mu = policy.mean_accel_input(&obs.input, &mut ws)?;
            let action = mu + policy.std() * normal.sample(rng);
            let logp = gaussian_logp(action, mu, policy.log_std);
            let v_est = value.forward_scalar(&obs.input, &mut ws)?;
            let out = env.step(action)?;
            // Reward on the post-action state; the final step of an episode
            // falls back to the pre-action state.
            let reward_obs = out.observation.as_ref().unwrap_or(&obs);
            let reward = match cfg.reward_source {
                RewardSource::Discriminator => surrogate_reward(disc, &reward_obs.input, &mut ws)?,
                RewardSource::Manual => {
                    let ego_state = *env.ego();
                    let brake = brake_state(map, &ego_state, &reward_obs.observation);
                    reward_from_parts(
                        &reward_obs.observation,
                        &brake,
                        action,
                        reward_obs.delta,
                        false,
                        env_cfg,
                    )
                    .total()
                }
            };
            total += 1;
            let full = total >= cfg.epoch_length;
            stream.push(Transition {
                obs: obs.input,
                action,
                logp,
                reward,
                value: v_est,
                boundary: if out.done || full { Boundary::Truncated } else { Boundary::Step },
            });
            if out.done || full {
                break;
            }
            obs = out.observation.unwrap();
        }
        streams.push(stream);
    }
    Ok((streams, episodes))
}

/// One discriminator batch: recorded states labeled 1, policy states 0.
/// Returns the batch accuracy before the update.
fn disc_update(
    disc: &mut TinyMlp,
    adam: &mut Adam,
    expert: &[[f64; DRIVER_INPUT_WIDTH]],
    policy_obs: &[[f64; DRIVER_INPUT_WIDTH]],
    lr: f64,
    ws: &mut Workspace,
    tape: &mut GradientTape,
) -> Result<f64> {
    tape.zero();
    let n = expert.len() + policy_obs.len();
    let inv = 1.0 / n as f64;
    let mut hits = 0usize;
    for (obs, y) in expert
        .iter()
        .map(|o| (o, 1.0))
        .chain(policy_obs.iter().map(|o| (o, 0.0)))
    {
        let p = disc.forward_scalar(obs, ws)?;
        if (p >= 0.5) == (y > 0.5) {
            hits += 1;
        }
        let pc = p.clamp(1e-12, 1.0 - 1e-12);
        let upstream = (pc - y) / (pc * (1.0 - pc)) * inv;
        disc.backward_ws(ws, &[upstream], tape, true)?;
    }
    adam.step(disc, tape, lr)?;
    Ok(hits as f64 / n as f64)
}

/// Fine-tune a pre-trained policy against recorded scenes. Returns the
/// updated policy, value net, discriminator and the epoch history; training
/// stops early with a warning entry when the discriminator saturates.
#[allow(clippy::too_many_arguments)]
pub fn finetune_gail(
    map: Arc<IntersectionMap>,
    gap_model: &GapModel,
    scenes: &[ReplayScene],
    mut policy: MlpPolicy,
    mut value: TinyMlp,
    cfg: &GailConfig,
    env_cfg: &EnvConfig,
    mut on_epoch: impl FnMut(&GailEpochStats),
) -> Result<(MlpPolicy, TinyMlp, TinyMlp, Vec<GailEpochStats>)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Training("empty replay dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut disc = new_discriminator(&mut rng)?;
    let mut disc_adam = Adam::new(&disc);
    let mut opt = PolicyOptimizer::new(&policy, &value);
    let update_cfg = cfg.update_config();
    let mut ws = Workspace::default();
    let mut disc_tape = GradientTape::for_net(&disc);
    let mut history: Vec<GailEpochStats> = Vec::new();
    let mut collapsed_streak = 0usize;

    for epoch in 0..cfg.epochs {
        let (streams, episodes) = collect_replay_epoch(
            &map, gap_model, scenes, &policy, &value, &disc, cfg, env_cfg, &mut rng,
        )?;
        let n_samples: usize = streams.iter().map(Vec::len).sum();
        let mean_reward =
            streams.iter().flatten().map(|t| t.reward).sum::<f64>() / n_samples.max(1) as f64;

        // Policy (and value) updates on the collected batch.
        if cfg.policy_updates > 0 {
            let batch = compute_gae(streams.clone(), cfg.discount, cfg.gae_lambda);
            ppo_update(&mut policy, &mut value, &mut opt, &batch, &update_cfg, &mut rng)?;
        }

        // Discriminator updates.
        let mut disc_accuracy = f64::NAN;
        if cfg.reward_source == RewardSource::Discriminator && cfg.disc_updates > 0 {
            let flat: Vec<&Transition> = streams.iter().flatten().collect();
            let mut acc_sum = 0.0;
            for _ in 0..cfg.disc_updates {
                let expert: Vec<[f64; DRIVER_INPUT_WIDTH]> = (0..cfg.disc_batch)
                    .map(|_| sample_expert_obs(&map, gap_model, scenes, &mut rng, &mut ws))
                    .collect::<Result<_>>()?;
                let pol: Vec<[f64; DRIVER_INPUT_WIDTH]> = (0..cfg.disc_batch)
                    .map(|_| flat[rng.random_range(0..flat.len())].obs)
                    .collect();
                acc_sum += disc_update(
                    &mut disc,
                    &mut disc_adam,
                    &expert,
                    &pol,
                    cfg.disc_lr,
                    &mut ws,
                    &mut disc_tape,
                )?;
            }
            disc_accuracy = acc_sum / cfg.disc_updates as f64;
        }

        let stats = GailEpochStats {
            epoch,
            mean_reward,
            disc_accuracy,
            episodes,
            mean_episode_len: n_samples as f64 / episodes.max(1) as f64,
        };
        on_epoch(&stats);
        history.push(stats);

        if disc_accuracy.is_finite() && disc_accuracy >= cfg.collapse_threshold {
            collapsed_streak += 1;
            if collapsed_streak >= cfg.collapse_patience {
                eprintln!(
                    "warning: discriminator saturated (accuracy >= {} for {} epochs), stopping early at epoch {epoch}",
                    cfg.collapse_threshold, cfg.collapse_patience
                );
                break;
            }
        } else {
            collapsed_streak = 0;
        }
    }
    Ok((policy, value, disc, history))
}

/// Mean absolute velocity error of the policy (mean actions) against the
/// recorded ego tracks, over `episodes` randomly chosen episodes.
pub fn replay_velocity_error(
    map: Arc<IntersectionMap>,
    gap_model: &GapModel,
    scenes: &[ReplayScene],
    policy: &MlpPolicy,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = Workspace::default();
    let mut err_sum = 0.0;
    let mut n = 0usize;
    for _ in 0..episodes {
        let scene_idx = rng.random_range(0..scenes.len());
        let scene = &scenes[scene_idx];
        let candidates = ego_candidates(scene);
        if candidates.is_empty() {
            continue;
        }
        let ego = candidates[rng.random_range(0..candidates.len())];
        let track = scene.tracks[ego].clone();
        let mut env = ReplayEnv::new(
            Arc::clone(&map),
            Arc::new(scene.clone()),
            ego,
            gap_model.clone(),
        )?;
        let Some(mut obs) = env.observation()? else { continue };
        loop {
            let action = policy.mean_accel_input(&obs.input, &mut ws)?;
            let out = env.step(action)?;
            if let Some((_, v_gt)) = track.state_at(env.current_step()) {
                err_sum += (env.ego().v - v_gt).abs();
                n += 1;
            }
            match out.observation {
                Some(o) if !out.done => obs = o,
                _ => break,
            }
        }
    }
    if n == 0 {
        return Err(Error::Training("no comparable replay steps".into()));
    }
    Ok(err_sum / n as f64)
}
