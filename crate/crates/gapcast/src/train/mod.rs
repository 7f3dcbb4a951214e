//! The three training regimes: supervised gap training lives in the gap
//! module; this module houses the on-policy pre-trainer with the shaped
//! reward (closed loop, multi-agent) and the adversarial imitation
//! fine-tuner (open loop, single agent), which share one update core.

mod checkpoint;
mod gail;
mod ppo;

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};
pub use gail::{finetune_gail, replay_velocity_error, GailConfig, GailEpochStats, RewardSource};
pub use ppo::{evaluate_policy, pretrain_policy, pretrain_policy_resumable, PolicyEvalStats, PpoConfig, PpoEpochStats};

use crate::driver::MlpPolicy;
use crate::error::{Error, Result};
use crate::mlp::{Adam, GradientTape, TinyMlp, Workspace};
use crate::scenario::DRIVER_INPUT_WIDTH;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const VALUE_LAYERS: [usize; 4] = [12, 16, 16, 1];

const LOG_2PI: f64 = 1.8378770664093453;

/// How one transition ends its agent's stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// The stream continues.
    Step,
    /// True episode end (the failing vehicle of a collision); no bootstrap.
    Terminal,
    /// Stream cut (scene reset, reinsertion, epoch end); bootstrap with the
    /// state's own value estimate.
    Truncated,
}

#[derive(Debug, Clone, Copy)]
pub struct Transition {
    pub obs: [f64; DRIVER_INPUT_WIDTH],
    pub action: f64,
    pub logp: f64,
    /// Reward fed to the advantage estimator (possibly scaled or surrogate).
    pub reward: f64,
    pub value: f64,
    pub boundary: Boundary,
}

/// A flattened batch with advantages and return targets filled in.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub transitions: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Gaussian log-density of `action` under mean `mu` and log-std `log_std`.
pub fn gaussian_logp(action: f64, mu: f64, log_std: f64) -> f64 {
    let std = log_std.exp();
    let z = (action - mu) / std;
    -0.5 * z * z - log_std - 0.5 * LOG_2PI
}

/// Generalized advantage estimation over per-agent streams; boundaries never
/// leak value across episodes. Streams are concatenated into one batch in
/// agent order.
pub fn compute_gae(streams: Vec<Vec<Transition>>, discount: f64, lambda: f64) -> Batch {
    let mut batch = Batch::default();
    for stream in streams {
        let n = stream.len();
        let mut advantages = vec![0.0; n];
        let mut next_adv = 0.0;
        for t in (0..n).rev() {
            let tr = &stream[t];
            let next_value = match tr.boundary {
                Boundary::Terminal => 0.0,
                Boundary::Truncated => tr.value,
                Boundary::Step => {
                    if t + 1 < n {
                        stream[t + 1].value
                    } else {
                        tr.value
                    }
                }
            };
            let continues = matches!(tr.boundary, Boundary::Step);
            let delta = tr.reward + discount * next_value - tr.value;
            next_adv = delta + if continues { discount * lambda * next_adv } else { 0.0 };
            advantages[t] = next_adv;
        }
        for (tr, adv) in stream.into_iter().zip(advantages) {
            batch.returns.push(adv + tr.value);
            batch.advantages.push(adv);
            batch.transitions.push(tr);
        }
    }
    batch
}

/// Single-scalar adaptive-moment state for the learned log-std.
#[derive(Debug, Clone, Copy, Default)]
struct ScalarAdam {
    m: f64,
    v: f64,
    t: u64,
}

impl ScalarAdam {
    fn step(&mut self, param: &mut f64, grad: f64, lr: f64) {
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * grad;
        self.v = 0.999 * self.v + 0.001 * grad * grad;
        let m_hat = self.m / (1.0 - 0.9f64.powi(self.t as i32));
        let v_hat = self.v / (1.0 - 0.999f64.powi(self.t as i32));
        *param -= lr * m_hat / (v_hat.sqrt() + 1e-8);
    }
}

/// Clipped-surrogate settings shared by both trainers.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct UpdateConfig {
    pub lr: f64,
    pub value_lr: f64,
    pub clip_ratio: f64,
    pub update_passes: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.clip_ratio) || self.clip_ratio == 0.0 {
            return Err(Error::Training(format!("clip ratio {} outside (0,1)", self.clip_ratio)));
        }
        if self.minibatch == 0 || self.update_passes == 0 {
            return Err(Error::Training("minibatch and update passes must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer bundle for one policy/value pair.
pub struct PolicyOptimizer {
    pub policy_adam: Adam,
    pub value_adam: Adam,
    log_std_adam: ScalarAdam,
}

impl PolicyOptimizer {
    pub fn new(policy: &MlpPolicy, value: &TinyMlp) -> Self {
        Self {
            policy_adam: Adam::new(&policy.net),
            value_adam: Adam::new(value),
            log_std_adam: ScalarAdam::default(),
        }
    }
}

/// One clipped-surrogate update over a collected batch: `update_passes`
/// shuffled minibatch sweeps for the policy (and log-std) plus a value
/// regression on the return targets. Advantages are normalized per batch.
pub fn ppo_update(
    policy: &mut MlpPolicy,
    value: &mut TinyMlp,
    opt: &mut PolicyOptimizer,
    batch: &Batch,
    cfg: &UpdateConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let n = batch.transitions.len();
    if n == 0 {
        return Err(Error::Training("empty batch".into()));
    }
    let mean_adv = batch.advantages.iter().sum::<f64>() / n as f64;
    let var_adv =
        batch.advantages.iter().map(|a| (a - mean_adv).powi(2)).sum::<f64>() / n as f64;
    let std_adv = var_adv.sqrt().max(1e-8);
    let norm_adv: Vec<f64> = batch.advantages.iter().map(|a| (a - mean_adv) / std_adv).collect();

    let mut ws = Workspace::default();
    let mut policy_tape = GradientTape::for_net(&policy.net);
    let mut value_tape = GradientTape::for_net(value);
    let mut order: Vec<usize> = (0..n).collect();

    for _pass in 0..cfg.update_passes {
        for k in (1..order.len()).rev() {
            let m = rng.random_range(0..=k);
            order.swap(k, m);
        }
        for chunk in order.chunks(cfg.minibatch) {
            policy_tape.zero();
            value_tape.zero();
            let mut log_std_grad = 0.0;
            let inv = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let tr = &batch.transitions[idx];
                let adv = norm_adv[idx];
                // Policy term.
                let y = policy.net.forward_scalar(&tr.obs, &mut ws)?;
                let mu = policy.a_lim * y;
                let std = policy.std();
                let logp = gaussian_logp(tr.action, mu, policy.log_std);
                let ratio = (logp - tr.logp).exp();
                let clipped_active = (adv >= 0.0 && ratio > 1.0 + cfg.clip_ratio)
                    || (adv < 0.0 && ratio < 1.0 - cfg.clip_ratio);
                if !clipped_active {
                    // d(-ratio*adv)/dmu = -adv * ratio * (a - mu) / std².
                    let dmu = -adv * ratio * (tr.action - mu) / (std * std);
                    let upstream = dmu * policy.a_lim * inv;
                    policy.net.backward_ws(&ws, &[upstream], &mut policy_tape, true)?;
                    let dlogstd = -adv * ratio * (((tr.action - mu) / std).powi(2) - 1.0);
                    log_std_grad += dlogstd * inv;
                }
                // Entropy bonus pushes log-std up.
                log_std_grad -= cfg.entropy_coef * inv;
                // Value term.
                let v = value.forward_scalar(&tr.obs, &mut ws)?;
                let upstream_v = 2.0 * (v - batch.returns[idx]) * inv;
                value.backward_ws(&ws, &[upstream_v], &mut value_tape, true)?;
            }
            opt.policy_adam.step(&mut policy.net, &policy_tape, cfg.lr)?;
            if !log_std_grad.is_finite() {
                return Err(Error::Training("non-finite log-std gradient".into()));
            }
            opt.log_std_adam.step(&mut policy.log_std, log_std_grad, cfg.lr);
            policy.log_std = policy.log_std.clamp(-4.0, 1.0);
            opt.value_adam.step(value, &value_tape, cfg.value_lr)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(reward: f64, value: f64, boundary: Boundary) -> Transition {
        Transition {
            obs: [0.0; DRIVER_INPUT_WIDTH],
            action: 0.0,
            logp: 0.0,
            reward,
            value,
            boundary,
        }
    }

    #[test]
    fn gae_reduces_to_td_when_lambda_zero() {
        let stream = vec![
            tr(1.0, 0.5, Boundary::Step),
            tr(1.0, 0.4, Boundary::Step),
            tr(1.0, 0.3, Boundary::Terminal),
        ];
        let batch = compute_gae(vec![stream], 0.9, 0.0);
        assert!((batch.advantages[0] - (1.0 + 0.9 * 0.4 - 0.5)).abs() < 1e-12);
        assert!((batch.advantages[1] - (1.0 + 0.9 * 0.3 - 0.4)).abs() < 1e-12);
        assert!((batch.advantages[2] - (1.0 + 0.0 - 0.3)).abs() < 1e-12);
    }

    #[test]
    fn gae_does_not_leak_across_boundaries() {
        // Identical prefixes; the second stream carries a huge later reward
        // separated by a terminal: the prefix advantage must be identical.
        let a = vec![tr(1.0, 0.0, Boundary::Terminal), tr(0.0, 0.0, Boundary::Terminal)];
        let b = vec![tr(1.0, 0.0, Boundary::Terminal), tr(1000.0, 0.0, Boundary::Terminal)];
        let ba = compute_gae(vec![a], 0.99, 0.95);
        let bb = compute_gae(vec![b], 0.99, 0.95);
        assert_eq!(ba.advantages[0], bb.advantages[0]);
    }

    #[test]
    fn gaussian_logp_matches_closed_form() {
        // Standard normal at zero: -0.5 ln(2 pi).
        let lp = gaussian_logp(0.0, 0.0, 0.0);
        assert!((lp + 0.5 * LOG_2PI).abs() < 1e-12);
        // One sigma away drops by exactly 1/2.
        let lp1 = gaussian_logp(1.0, 0.0, 0.0);
        assert!((lp - lp1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ppo_update_moves_the_policy_toward_advantageous_actions() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut policy = MlpPolicy::new(&mut rng).unwrap();
        let mut value =
            TinyMlp::new(&VALUE_LAYERS, crate::mlp::Activation::Tanh, crate::mlp::Activation::Identity, &mut rng)
                .unwrap();
        let mut opt = PolicyOptimizer::new(&policy, &value);
        let mut ws = Workspace::default();

        // A fixed observation; positive advantage for "accelerate" actions.
        let obs = [0.1; DRIVER_INPUT_WIDTH];
        let mu0 = policy.mean_accel_input(&obs, &mut ws).unwrap();
        let mut streams = Vec::new();
        for k in 0..64 {
            let action = if k % 2 == 0 { 2.0 } else { -2.0 };
            let adv_sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            streams.push(vec![Transition {
                obs,
                action,
                logp: gaussian_logp(action, mu0, policy.log_std),
                reward: adv_sign,
                value: 0.0,
                boundary: Boundary::Terminal,
            }]);
        }
        let batch = compute_gae(streams, 0.99, 0.95);
        let cfg = UpdateConfig {
            lr: 1e-3,
            value_lr: 1e-3,
            clip_ratio: 0.2,
            update_passes: 4,
            minibatch: 32,
            entropy_coef: 0.0,
        };
        ppo_update(&mut policy, &mut value, &mut opt, &batch, &cfg, &mut rng).unwrap();
        let mu1 = policy.mean_accel_input(&obs, &mut ws).unwrap();
        assert!(mu1 > mu0, "mean did not move toward the rewarded action: {mu0} -> {mu1}");
    }

    #[test]
    fn empty_batch_is_an_error() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut policy = MlpPolicy::new(&mut rng).unwrap();
        let mut value =
            TinyMlp::new(&VALUE_LAYERS, crate::mlp::Activation::Tanh, crate::mlp::Activation::Identity, &mut rng)
                .unwrap();
        let mut opt = PolicyOptimizer::new(&policy, &value);
        let cfg = UpdateConfig {
            lr: 1e-3,
            value_lr: 1e-3,
            clip_ratio: 0.2,
            update_passes: 1,
            minibatch: 32,
            entropy_coef: 0.0,
        };
        let err = ppo_update(&mut policy, &mut value, &mut opt, &Batch::default(), &cfg, &mut rng);
        assert!(err.is_err());
    }
}
