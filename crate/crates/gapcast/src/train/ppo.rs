//! On-policy pre-training in the closed-loop multi-agent environment: one
//! shared policy/value pair drives all vehicles; their transitions are
//! pooled into each update.

use super::{
    compute_gae, gaussian_logp, ppo_update, Boundary, PolicyOptimizer, Transition, UpdateConfig,
    VALUE_LAYERS,
};
use crate::driver::MlpPolicy;
use crate::env::{ClosedLoopEnv, EnvConfig};
use crate::error::{Error, Result};
use crate::gap::GapModel;
use crate::map::IntersectionMap;
use crate::mlp::{Activation, TinyMlp, Workspace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PpoConfig {
    /// Policy learning rate (constant).
    pub lr: f64,
    pub value_lr: f64,
    /// Environment steps collected per agent per epoch.
    pub epoch_length: usize,
    pub epochs: usize,
    pub clip_ratio: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub update_passes: usize,
    pub minibatch: usize,
    /// Scale applied to rewards before advantage estimation; reported
    /// statistics are always unscaled.
    pub reward_scale: f64,
    pub entropy_coef: f64,
    pub seed: u64,
    /// Parallel environment instances; transitions merge in worker order.
    pub workers: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            value_lr: 1e-3,
            epoch_length: 2000,
            epochs: 1_000_000,
            clip_ratio: 0.2,
            discount: 0.99,
            gae_lambda: 0.95,
            update_passes: 4,
            minibatch: 256,
            reward_scale: 1.0,
            entropy_coef: 0.0,
            seed: 0,
            workers: 1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.discount && self.discount <= 1.0) {
            return Err(Error::Training(format!("discount {} outside (0,1]", self.discount)));
        }
        if self.epoch_length == 0 || self.epochs == 0 {
            return Err(Error::Training("epoch length and epochs must be positive".into()));
        }
        self.update_config().validate()
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            lr: self.lr,
            value_lr: self.value_lr,
            clip_ratio: self.clip_ratio,
            update_passes: self.update_passes,
            minibatch: self.minibatch,
            entropy_coef: self.entropy_coef,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PpoEpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    /// Collision events per agent-second.
    pub collision_rate: f64,
    pub mean_velocity: f64,
    pub mean_ep_reset_rate: f64,
}

/// Collect `epoch_length` steps from one environment with the stochastic
/// policy. Returns per-agent streams plus (reward sum, collisions, velocity
/// sum, resets, samples).
#[allow(clippy::type_complexity)]
fn collect_closed_loop(
    env: &mut ClosedLoopEnv,
    policy: &MlpPolicy,
    value: &TinyMlp,
    steps: usize,
    reward_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<Transition>>, f64, usize, f64, usize)> {
    let n_agents = env.n_agents();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut ws = Workspace::default();
    let mut streams: Vec<Vec<Transition>> = vec![Vec::with_capacity(steps); n_agents];
    let mut reward_sum = 0.0;
    let mut collisions = 0usize;
    let mut velocity_sum = 0.0;
    let mut resets = 0usize;

    for step in 0..steps {
        let obs: Vec<_> = env.observations().to_vec();
        let mut actions = Vec::with_capacity(n_agents);
        let mut logps = Vec::with_capacity(n_agents);
        let mut values = Vec::with_capacity(n_agents);
        for agent in &obs {
            let mu = policy.mean_accel_input(&agent.input, &mut ws)?;
            let std = policy.std();
            let action = mu + std * normal.sample(rng);
            actions.push(action);
            logps.push(gaussian_logp(action, mu, policy.log_std));
            values.push(value.forward_scalar(&agent.input, &mut ws)?);
            velocity_sum += agent.observation.v;
        }
        let out = env.step(&actions)?;
        collisions += out.collisions;
        if out.reset {
            resets += 1;
        }
        for i in 0..n_agents {
            let total = out.rewards[i].total();
            reward_sum += total;
            let boundary = if step + 1 == steps {
                Boundary::Truncated
            } else if out.reset {
                if out.rewards[i].collision > 0.0 {
                    Boundary::Terminal
                } else {
                    Boundary::Truncated
                }
            } else if out.reinserted[i] {
                Boundary::Truncated
            } else {
                Boundary::Step
            };
            streams[i].push(Transition {
                obs: obs[i].input,
                action: actions[i],
                logp: logps[i],
                reward: total * reward_scale,
                value: values[i],
                boundary,
            });
        }
    }
    Ok((streams, reward_sum, collisions, velocity_sum, resets))
}

/// Pre-train the driver policy with the shaped reward. The gap model is
/// frozen; the same policy and value networks advance all agents and are
/// updated from their pooled transitions. With more than one worker,
/// independent environments collect in parallel and merge in worker order.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_policy(
    map: Arc<IntersectionMap>,
    gap_model: &GapModel,
    env_cfg: &EnvConfig,
    cfg: &PpoConfig,
    mut on_epoch: impl FnMut(&PpoEpochStats),
) -> Result<(MlpPolicy, TinyMlp, Vec<PpoEpochStats>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = MlpPolicy::new(&mut rng)?;
    let mut value = TinyMlp::new(&VALUE_LAYERS, Activation::Tanh, Activation::Identity, &mut rng)?;
    value.set_input_scales(&crate::scenario::driver_input_scales())?;
    let mut opt = PolicyOptimizer::new(&policy, &value);
    let stats = train_loop(map, gap_model, env_cfg, cfg, &mut policy, &mut value, &mut opt, 0, &mut rng, &mut on_epoch)?;
    Ok((policy, value, stats))
}

/// Pre-training with periodic checkpoints and resumption, so paper-scale
/// epoch counts survive interruptions. An existing checkpoint in `dir` with
/// a matching config hash continues from its epoch counter; anything else
/// starts fresh. Returns the final nets and the stats of the epochs run in
/// this invocation.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_policy_resumable(
    map: Arc<IntersectionMap>,
    gap_model: &GapModel,
    env_cfg: &EnvConfig,
    cfg: &PpoConfig,
    dir: &std::path::Path,
    checkpoint_every: usize,
    mut on_epoch: impl FnMut(&PpoEpochStats),
) -> Result<(MlpPolicy, TinyMlp, Vec<PpoEpochStats>)> {
    use super::checkpoint::{config_hash, load_checkpoint, save_checkpoint, CheckpointManifest};
    cfg.validate()?;
    let hash = config_hash(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy;
    let mut value;
    let mut opt;
    let mut start_epoch = 0usize;
    let manifest_path = dir.join("manifest.toml");
    if manifest_path.exists() {
        let ck = load_checkpoint(dir)?;
        if ck.manifest.config_hash == hash && ck.manifest.stage == "pretrain" {
            start_epoch = ck.manifest.epoch;
            policy = ck.policy;
            value = ck.value;
            opt = PolicyOptimizer::new(&policy, &value);
            if let Some((step, m, v)) = &ck.policy_moments {
                opt.policy_adam.restore(*step, m, v)?;
            }
            if let Some((step, m, v)) = &ck.value_moments {
                opt.value_adam.restore(*step, m, v)?;
            }
            // The collection RNG cannot be rewound exactly; a resumed run
            // continues from an epoch-derived stream instead.
            rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (start_epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        } else {
            return Err(Error::Training(format!(
                "checkpoint in {} belongs to a different configuration; choose a fresh directory",
                dir.display()
            )));
        }
    } else {
        policy = MlpPolicy::new(&mut rng)?;
        let mut v = TinyMlp::new(&VALUE_LAYERS, Activation::Tanh, Activation::Identity, &mut rng)?;
        v.set_input_scales(&crate::scenario::driver_input_scales())?;
        value = v;
        opt = PolicyOptimizer::new(&policy, &value);
    }

    let every = checkpoint_every.max(1);
    let mut all_stats = Vec::new();
    let mut epoch = start_epoch;
    while epoch < cfg.epochs {
        let chunk_end = (epoch + every).min(cfg.epochs);
        let mut chunk_cfg = cfg.clone();
        chunk_cfg.epochs = chunk_end;
        let stats = train_loop(
            Arc::clone(&map),
            gap_model,
            env_cfg,
            &chunk_cfg,
            &mut policy,
            &mut value,
            &mut opt,
            epoch,
            &mut rng,
            &mut on_epoch,
        )?;
        all_stats.extend(stats);
        epoch = chunk_end;
        let manifest = CheckpointManifest {
            stage: "pretrain".into(),
            epoch,
            seed: cfg.seed,
            config_hash: hash,
            log_std: policy.log_std,
        };
        save_checkpoint(
            dir,
            &manifest,
            &policy,
            &value,
            None,
            Some(&opt.policy_adam),
            Some(&opt.value_adam),
        )?;
    }
    Ok((policy, value, all_stats))
}

/// Inner loop shared with checkpoint resumption.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_loop(
    map: Arc<IntersectionMap>,
    gap_model: &GapModel,
    env_cfg: &EnvConfig,
    cfg: &PpoConfig,
    policy: &mut MlpPolicy,
    value: &mut TinyMlp,
    opt: &mut PolicyOptimizer,
    start_epoch: usize,
    rng: &mut ChaCha8Rng,
    on_epoch: &mut impl FnMut(&PpoEpochStats),
) -> Result<Vec<PpoEpochStats>> {
    let workers = cfg.workers.max(1);
    let mut envs: Vec<ClosedLoopEnv> = (0..workers)
        .map(|w| {
            ClosedLoopEnv::new(
                Arc::clone(&map),
                gap_model.clone(),
                *env_cfg,
                cfg.seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(w as u64 + 1)),
            )
        })
        .collect::<Result<_>>()?;
    let update_cfg = cfg.update_config();
    let mut history = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        let mut all_streams: Vec<Vec<Transition>> = Vec::new();
        let mut reward_sum = 0.0;
        let mut collisions = 0usize;
        let mut velocity_sum = 0.0;
        let mut resets = 0usize;
        let mut samples = 0usize;
        if workers == 1 {
            let (streams, r, c, v, rs) = collect_closed_loop(
                &mut envs[0],
                policy,
                value,
                cfg.epoch_length,
                cfg.reward_scale,
                rng,
            )?;
            samples += streams.iter().map(Vec::len).sum::<usize>();
            all_streams.extend(streams);
            reward_sum += r;
            collisions += c;
            velocity_sum += v;
            resets += rs;
        } else {
            // Fan out over independent environments; results merge in
            // worker-id order so the update stays deterministic for a fixed
            // worker count.
            let mut worker_rngs: Vec<ChaCha8Rng> = (0..workers)
                .map(|w| {
                    ChaCha8Rng::seed_from_u64(
                        cfg.seed ^ 0xc2b2ae3d27d4eb4fu64.wrapping_mul((epoch as u64 + 1) * (w as u64 + 1)),
                    )
                })
                .collect();
            let results: Vec<Result<(Vec<Vec<Transition>>, f64, usize, f64, usize)>> =
                std::thread::scope(|scope| {
                    let handles: Vec<_> = envs
                        .iter_mut()
                        .zip(worker_rngs.iter_mut())
                        .map(|(env, wrng)| {
                            let policy = &*policy;
                            let value = &*value;
                            scope.spawn(move || {
                                collect_closed_loop(
                                    env,
                                    policy,
                                    value,
                                    cfg.epoch_length,
                                    cfg.reward_scale,
                                    wrng,
                                )
                            })
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
                });
            for res in results {
                let (streams, r, c, v, rs) = res?;
                samples += streams.iter().map(Vec::len).sum::<usize>();
                all_streams.extend(streams);
                reward_sum += r;
                collisions += c;
                velocity_sum += v;
                resets += rs;
            }
        }
        let batch = compute_gae(all_streams, cfg.discount, cfg.gae_lambda);
        ppo_update(policy, value, opt, &batch, &update_cfg, rng)?;
        if !policy.net.all_finite() {
            return Err(Error::Training(format!("policy diverged at epoch {epoch}")));
        }
        let agent_seconds = samples as f64 * env_cfg.dt;
        let stats = PpoEpochStats {
            epoch,
            mean_reward: reward_sum / samples as f64,
            collision_rate: collisions as f64 / agent_seconds,
            mean_velocity: velocity_sum / samples as f64,
            mean_ep_reset_rate: resets as f64 / (cfg.epoch_length * workers.max(1)) as f64,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyEvalStats {
    pub mean_reward: f64,
    pub collision_rate: f64,
    pub mean_velocity: f64,
    pub steps: usize,
}

/// Run the environment with deterministic mean actions (or all-zero actions
/// when no policy is given) and measure reward, collision rate and velocity.
pub fn evaluate_policy(
    map: Arc<IntersectionMap>,
    gap_model: &GapModel,
    env_cfg: &EnvConfig,
    policy: Option<&MlpPolicy>,
    steps: usize,
    seed: u64,
) -> Result<PolicyEvalStats> {
    let mut env = ClosedLoopEnv::new(map, gap_model.clone(), *env_cfg, seed)?;
    let mut ws = Workspace::default();
    let mut reward_sum = 0.0;
    let mut collisions = 0usize;
    let mut velocity_sum = 0.0;
    let mut samples = 0usize;
    for _ in 0..steps {
        let obs: Vec<_> = env.observations().to_vec();
        let actions: Vec<f64> = match policy {
            Some(p) => obs
                .iter()
                .map(|a| p.mean_accel_input(&a.input, &mut ws))
                .collect::<Result<_>>()?,
            None => vec![0.0; obs.len()],
        };
        velocity_sum += obs.iter().map(|a| a.observation.v).sum::<f64>();
        let out = env.step(&actions)?;
        collisions += out.collisions;
        reward_sum += out.rewards.iter().map(|r| r.total()).sum::<f64>();
        samples += obs.len();
    }
    Ok(PolicyEvalStats {
        mean_reward: reward_sum / samples as f64,
        collision_rate: collisions as f64 / (samples as f64 * env_cfg.dt),
        mean_velocity: velocity_sum / samples as f64,
        steps,
    })
}
