//! Acceleration prediction: the learned policy and the car-following
//! baseline behind one interface.
//!
//! Both variants are pure functions of their inputs, which keeps
//! multi-scenario evaluation reproducible and parallelizable.

use crate::error::{Error, Result};
use crate::map::IntersectionMap;
use crate::mlp::{Activation, TinyMlp, Workspace};
use crate::scenario::{driving_observation, DrivingObservation, Scenario};
use serde::{Deserialize, Serialize};

/// Action bound of the learned policy (m/s²); accelerations beyond this are
/// heavily penalized in training, so the action space matches.
pub const ACCEL_LIMIT: f64 = 4.0;
/// Hard deceleration cap of the car-following baseline (m/s²).
pub const HARD_DECEL: f64 = 9.0;

pub const DRIVER_LAYERS: [usize; 4] = [12, 16, 16, 1];

/// Intelligent-Driver-Model parameters. The desired speed is not a parameter
/// here: it is re-read from the local speed limit every step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IdmParams {
    /// Minimum bumper-to-bumper distance s0 (m).
    pub min_distance: f64,
    /// Safety time headway T (s).
    pub time_headway: f64,
    /// Maximum acceleration a (m/s²).
    pub max_accel: f64,
    /// Comfortable deceleration b (m/s²).
    pub comfort_decel: f64,
    /// Acceleration exponent.
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            min_distance: 1.5,
            time_headway: 1.0,
            max_accel: 2.5,
            comfort_decel: 4.0,
            exponent: 4.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_distance > 0.0
            && self.time_headway > 0.0
            && self.max_accel > 0.0
            && self.comfort_decel > 0.0
            && self.exponent >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Driver("all IDM parameters must be positive, exponent >= 1".into()))
        }
    }
}

/// Car-following acceleration with the desired-gap law
/// `s* = s0 + v T + v Δv / (2 sqrt(a b))`, floored at s0. The output is
/// clamped to [-9, a]; a non-positive gap short-circuits to the emergency
/// value and raises the flag.
pub fn idm_accel(v: f64, v_desired: f64, s_gap: f64, dv: f64, p: &IdmParams) -> (f64, bool) {
    if s_gap <= 0.0 {
        return (-HARD_DECEL, true);
    }
    let s_star = (p.min_distance + v * p.time_headway
        + v * dv / (2.0 * (p.max_accel * p.comfort_decel).sqrt()))
    .max(p.min_distance);
    let a = p.max_accel * (1.0 - (v / v_desired).powf(p.exponent) - (s_star / s_gap).powi(2));
    (a.clamp(-HARD_DECEL, p.max_accel), false)
}

/// Policy head on top of the 12/16/16/1 network: the mean acceleration is the
/// tanh output scaled to the action bound. The state-independent log standard
/// deviation is only used during training; inference takes the mean.
#[derive(Debug, Clone)]
pub struct MlpPolicy {
    pub net: TinyMlp,
    pub log_std: f64,
    pub a_lim: f64,
}

impl MlpPolicy {
    pub fn new<R: rand::Rng>(rng: &mut R) -> Result<Self> {
        let mut net = TinyMlp::new(&DRIVER_LAYERS, Activation::Tanh, Activation::Tanh, rng)?;
        net.set_input_scales(&crate::scenario::driver_input_scales())?;
        Ok(Self { net, log_std: -0.5, a_lim: ACCEL_LIMIT })
    }

    pub fn from_net(net: TinyMlp) -> Result<Self> {
        if net.sizes() != DRIVER_LAYERS {
            return Err(Error::Driver(format!(
                "driver net must be {:?}, got {:?}",
                DRIVER_LAYERS,
                net.sizes()
            )));
        }
        Ok(Self { net, log_std: -0.5, a_lim: ACCEL_LIMIT })
    }

    /// Deterministic mean action for a prepared 12-wide input.
    pub fn mean_accel_input(&self, input: &[f64], ws: &mut Workspace) -> Result<f64> {
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::Driver("non-finite policy input".into()));
        }
        Ok(self.a_lim * self.net.forward_scalar(input, ws)?)
    }

    pub fn mean_accel(&self, obs: &DrivingObservation, delta: u8, ws: &mut Workspace) -> Result<f64> {
        self.mean_accel_input(&obs.to_input(delta), ws)
    }

    pub fn std(&self) -> f64 {
        self.log_std.exp()
    }
}

/// Either driver-model variant behind the scenario-level interface.
#[derive(Debug, Clone)]
pub enum AccelModel {
    Mlp(MlpPolicy),
    Idm(IdmParams),
}

impl AccelModel {
    pub fn name(&self) -> &'static str {
        match self {
            AccelModel::Mlp(_) => "mlp",
            AccelModel::Idm(_) => "idm",
        }
    }

    /// Acceleration for vehicle `i` given its gap decision.
    pub fn accel(
        &self,
        map: &IntersectionMap,
        scenario: &Scenario,
        i: usize,
        delta: u8,
        ws: &mut Workspace,
    ) -> Result<f64> {
        match self {
            AccelModel::Mlp(policy) => {
                let obs = driving_observation(map, scenario, i)?;
                if !obs.is_finite() {
                    return Err(Error::Driver("non-finite observation".into()));
                }
                policy.mean_accel(&obs, delta, ws)
            }
            AccelModel::Idm(params) => {
                let obs = driving_observation(map, scenario, i)?;
                let (s_gap, dv) = idm_gap_inputs(&obs, delta);
                let v_desired = obs.v_max;
                Ok(idm_accel(obs.v, v_desired, s_gap, dv, params).0)
            }
        }
    }
}

/// Adapter feeding the gap decision to the gap-blind car-following model:
/// with a rejected gap and the stop line still ahead, the stop line acts as a
/// standing virtual lead at `min(d_lead, d_stop)`.
pub fn idm_gap_inputs(obs: &DrivingObservation, delta: u8) -> (f64, f64) {
    if delta == 0 && obs.d_stop > 0.0 {
        if obs.d_stop < obs.d_lead {
            (obs.d_stop, obs.v)
        } else {
            (obs.d_lead, obs.v - obs.v_lead)
        }
    } else {
        (obs.d_lead, obs.v - obs.v_lead)
    }
}

/// Scenario-level adapter variant used by tests and the rollout engine.
pub fn idm_gap_adapter(
    map: &IntersectionMap,
    scenario: &Scenario,
    i: usize,
    delta: u8,
) -> Result<(f64, f64)> {
    let obs = driving_observation(map, scenario, i)?;
    Ok(idm_gap_inputs(&obs, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{DrivingObservation};

    fn obs(d_stop: f64, v: f64, d_lead: f64, v_lead: f64) -> DrivingObservation {
        DrivingObservation {
            d_stop,
            v,
            v_max: 13.89,
            heading_offsets: [0.0; 6],
            d_lead,
            v_lead,
        }
    }

    #[test]
    fn free_flow_equilibrium_is_nearly_zero() {
        let p = IdmParams::default();
        let (a, flag) = idm_accel(13.89, 13.89, 1e9, 0.0, &p);
        assert!(!flag);
        assert!(a.abs() < 1e-3, "free-flow accel {a}");
    }

    #[test]
    fn standstill_at_minimum_gap_is_equilibrium() {
        let p = IdmParams::default();
        let (a, flag) = idm_accel(0.0, 13.89, p.min_distance, 0.0, &p);
        assert!(!flag);
        assert!((0.0..=p.max_accel).contains(&a));
        assert!(a.abs() < 1e-12, "standstill accel {a}");
    }

    #[test]
    fn matches_hand_evaluated_formula() {
        // v=10, v0=13.89, s_gap=20, dv=2 with the default parameters:
        // s* = 1.5 + 10*1 + 10*2/(2*sqrt(2.5*4)) = 14.66227766...
        // a  = 2.5*(1 - (10/13.89)^4 - (s*/20)^2) = 0.4847286342...
        let p = IdmParams::default();
        let s_star = 1.5 + 10.0 + 20.0 / (2.0 * (10.0f64).sqrt());
        let expected = 2.5 * (1.0 - (10.0f64 / 13.89).powi(4) - (s_star / 20.0).powi(2));
        let (a, _) = idm_accel(10.0, 13.89, 20.0, 2.0, &p);
        assert!((a - expected).abs() < 1e-12);
        assert!((a - 0.4847286342).abs() < 1e-9, "got {a}");
    }

    #[test]
    fn violated_gap_is_emergency_braking_with_flag() {
        let p = IdmParams::default();
        let (a, flag) = idm_accel(5.0, 13.89, 0.0, 0.0, &p);
        assert_eq!(a, -HARD_DECEL);
        assert!(flag);
    }

    #[test]
    fn accel_is_monotone_in_gap() {
        let p = IdmParams::default();
        // Strictly increasing above the hard-deceleration clamp.
        let mut last = f64::NEG_INFINITY;
        for gap in [8.0, 10.0, 20.0, 50.0, 200.0] {
            let (a, _) = idm_accel(8.0, 13.89, gap, 1.0, &p);
            assert!(a > last, "accel not increasing with gap at {gap}");
            last = a;
        }
        // Tiny gaps saturate at the clamp, still weakly monotone.
        let (a2, _) = idm_accel(8.0, 13.89, 2.0, 1.0, &p);
        let (a5, _) = idm_accel(8.0, 13.89, 5.0, 1.0, &p);
        assert_eq!(a2, -HARD_DECEL);
        assert!(a5 >= a2);
    }

    #[test]
    fn adapter_virtual_stop_lead() {
        let o = obs(30.0, 7.0, 100.0, 27.78);
        let (s_gap, dv) = idm_gap_inputs(&o, 0);
        assert_eq!(s_gap, 30.0);
        assert_eq!(dv, 7.0);
    }

    #[test]
    fn adapter_accepted_gap_uses_lead() {
        let o = obs(30.0, 10.0, 16.0, 8.0);
        let (s_gap, dv) = idm_gap_inputs(&o, 1);
        assert_eq!(s_gap, 16.0);
        assert_eq!(dv, 2.0);
    }

    #[test]
    fn adapter_closer_lead_wins_over_stop_line() {
        let o = obs(30.0, 10.0, 12.0, 0.0);
        let (s_gap, dv) = idm_gap_inputs(&o, 0);
        assert_eq!(s_gap, 12.0);
        assert_eq!(dv, 10.0);
    }

    #[test]
    fn zero_weight_policy_outputs_zero_and_stays_bounded() {
        let net = TinyMlp::zeros(&DRIVER_LAYERS, Activation::Tanh, Activation::Tanh).unwrap();
        let policy = MlpPolicy::from_net(net).unwrap();
        let mut ws = Workspace::default();
        let o = obs(40.0, 10.0, 100.0, 27.78);
        assert_eq!(policy.mean_accel(&o, 1, &mut ws).unwrap(), 0.0);

        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let policy = MlpPolicy::new(&mut rng).unwrap();
        for k in 0..50 {
            let o = obs(-50.0 + k as f64 * 7.0, k as f64, 1.0 + k as f64, k as f64);
            let a = policy.mean_accel(&o, (k % 2) as u8, &mut ws).unwrap();
            assert!(a.abs() <= ACCEL_LIMIT);
        }
    }

    #[test]
    fn non_finite_input_is_a_domain_error() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let policy = MlpPolicy::new(&mut rng).unwrap();
        let mut ws = Workspace::default();
        let mut o = obs(40.0, 10.0, 100.0, 27.78);
        o.d_stop = f64::NAN;
        assert!(policy.mean_accel(&o, 1, &mut ws).is_err());
    }
}
