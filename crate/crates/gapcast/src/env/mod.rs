//! Closed-loop and open-loop simulation: state integration at a fixed step,
//! two-circle collision detection with full-braking lookahead, the shaped
//! reward, and random scene sampling.

mod closed_loop;
mod replay;

pub use closed_loop::{sample_scene, AgentObs, ClosedLoopEnv, StepOutcome};
pub use replay::{ReplayEnv, ReplayScene, ReplayStep, ReplayTrack};

use crate::map::IntersectionMap;
use crate::scenario::{DrivingObservation, Scenario, VehicleState};
use serde::{Deserialize, Serialize};

/// Full-braking deceleration used for the braking-position lookahead (m/s²).
pub const FULL_BRAKE_DECEL: f64 = 4.0;

/// Penalty factors of the shaped reward, one row per penalty term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PenaltyFactors {
    /// Quadratic on the acceleration value, always active.
    pub accel_quadratic: f64,
    /// Constant once |accel| exceeds 2.5 m/s².
    pub accel_over_comfort: f64,
    /// Constant once |accel| exceeds 4 m/s².
    pub accel_over_limit: f64,
    /// Linear in (v_min - v)+, scaled by 1/v_max.
    pub below_min_velocity: f64,
    /// Linear in (v - v_max)+, scaled by 1/v_max.
    pub above_speed_limit: f64,
    /// Linear in (-v)+.
    pub negative_velocity: f64,
    /// Linear in (-d_lead_brake)+.
    pub lead_brake_overshoot: f64,
    /// Linear in (-d_stop_brake)+, only while the gap decision is 0.
    pub stop_brake_overshoot: f64,
    /// Constant on a collision at current or braking positions.
    pub collision: f64,
}

impl Default for PenaltyFactors {
    fn default() -> Self {
        Self {
            accel_quadratic: 0.01,
            accel_over_comfort: 1.0,
            accel_over_limit: 20.0,
            below_min_velocity: 20.0,
            above_speed_limit: 30.0,
            negative_velocity: 30.0,
            lead_brake_overshoot: 30.0,
            stop_brake_overshoot: 30.0,
            collision: 5000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Integration step (s).
    pub dt: f64,
    /// Vehicles per sampled scene.
    pub n_agents: usize,
    /// Circle-distance clearance below which vehicles collide (m).
    pub collision_clearance: f64,
    /// Conservative deceleration behind the minimum-velocity term (m/s²).
    pub comfort_decel_vmin: f64,
    pub base_reward: f64,
    pub penalties: PenaltyFactors,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.2,
            n_agents: 12,
            collision_clearance: 0.5,
            comfort_decel_vmin: 1.0,
            base_reward: 2.0,
            penalties: PenaltyFactors::default(),
        }
    }
}

/// Semi-implicit integration with the velocity floored at zero (reverse
/// driving is out of scope).
pub fn integrate(state: &VehicleState, accel: f64, dt: f64) -> VehicleState {
    let v = (state.v + accel * dt).max(0.0);
    VehicleState { s: state.s + v * dt, v, ..*state }
}

/// Distance covered by a full-braking stop from velocity `v`.
pub fn brake_distance(v: f64) -> f64 {
    0.5 * v * v / FULL_BRAKE_DECEL
}

/// Braking-augmented quantities of one vehicle.
#[derive(Debug, Clone, Copy)]
pub struct BrakeAugmentedState {
    pub s_brake: f64,
    pub d_lead_brake: f64,
    pub d_stop_brake: f64,
    /// Planar position at s + s_brake along the route.
    pub x_brake: [f64; 2],
}

pub fn brake_state(
    map: &IntersectionMap,
    vehicle: &VehicleState,
    obs: &DrivingObservation,
) -> BrakeAugmentedState {
    let s_brake = brake_distance(vehicle.v);
    BrakeAugmentedState {
        s_brake,
        d_lead_brake: obs.d_lead - s_brake,
        d_stop_brake: obs.d_stop - s_brake,
        x_brake: map.geometry(vehicle.route).point_at(vehicle.s + s_brake),
    }
}

/// Two-circle footprint of a vehicle at arclength `s` on its route: circles
/// of radius width/2 centered a quarter length ahead of and behind the
/// reference point, along the local heading.
fn footprint(map: &IntersectionMap, v: &VehicleState, s: f64) -> ([f64; 2], [f64; 2], f64) {
    let geom = map.geometry(v.route);
    let p = geom.point_at(s);
    let h = geom.heading_at(s);
    let (dx, dy) = (h.cos() * v.length / 4.0, h.sin() * v.length / 4.0);
    ([p[0] + dx, p[1] + dy], [p[0] - dx, p[1] - dy], v.width / 2.0)
}

/// Clearance between the two-circle footprints (min circle-pair distance
/// minus both radii) of two vehicles at the given arclengths.
fn circle_clearance(
    map: &IntersectionMap,
    a: &VehicleState,
    s_a: f64,
    b: &VehicleState,
    s_b: f64,
) -> f64 {
    let (a1, a2, ra) = footprint(map, a, s_a);
    let (b1, b2, rb) = footprint(map, b, s_b);
    let mut best = f64::INFINITY;
    for ca in [a1, a2] {
        for cb in [b1, b2] {
            let d = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
            best = best.min(d - ra - rb);
        }
    }
    best
}

/// Collision test at current positions or full-braking positions.
pub fn collision(map: &IntersectionMap, scenario: &Scenario, i: usize, j: usize) -> bool {
    collision_with(map, scenario, i, j, EnvConfig::default().collision_clearance)
}

pub fn collision_with(
    map: &IntersectionMap,
    scenario: &Scenario,
    i: usize,
    j: usize,
    clearance: f64,
) -> bool {
    let a = &scenario.vehicles[i];
    let b = &scenario.vehicles[j];
    if circle_clearance(map, a, a.s, b, b.s) < clearance {
        return true;
    }
    let sa = a.s + brake_distance(a.v);
    let sb = b.s + brake_distance(b.v);
    circle_clearance(map, a, sa, b, sb) < clearance
}

/// Minimum required velocity: the speed still stoppable with a conservative
/// deceleration before the nearest relevant obstacle. Never forces driving
/// into a close lead or stop line.
pub fn v_min(v_max: f64, d_lead: f64, d_stop: f64, delta: u8, comfort_decel: f64) -> f64 {
    let d_star = if delta == 0 { d_lead.min(d_stop) } else { d_lead };
    let d_star = d_star.max(0.0);
    v_max.min((2.0 * comfort_decel * d_star).sqrt())
}

/// One signed penalty per reward row plus the base; `total` is base minus
/// the penalty sum. Every penalty is non-negative.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RewardBreakdown {
    pub base: f64,
    pub accel_quadratic: f64,
    pub accel_over_comfort: f64,
    pub accel_over_limit: f64,
    pub below_min_velocity: f64,
    pub above_speed_limit: f64,
    pub negative_velocity: f64,
    pub lead_brake_overshoot: f64,
    pub stop_brake_overshoot: f64,
    pub collision: f64,
}

impl RewardBreakdown {
    pub fn penalty_sum(&self) -> f64 {
        self.accel_quadratic
            + self.accel_over_comfort
            + self.accel_over_limit
            + self.below_min_velocity
            + self.above_speed_limit
            + self.negative_velocity
            + self.lead_brake_overshoot
            + self.stop_brake_overshoot
            + self.collision
    }

    pub fn total(&self) -> f64 {
        self.base - self.penalty_sum()
    }
}

/// Reward of one vehicle given everything already extracted from the scene.
/// `collided` says whether this vehicle is the penalized party of a
/// collision (current or braking positions).
pub fn reward_from_parts(
    obs: &DrivingObservation,
    brake: &BrakeAugmentedState,
    accel: f64,
    delta: u8,
    collided: bool,
    cfg: &EnvConfig,
) -> RewardBreakdown {
    let p = &cfg.penalties;
    let vmin = v_min(obs.v_max, obs.d_lead, obs.d_stop, delta, cfg.comfort_decel_vmin);
    RewardBreakdown {
        base: cfg.base_reward,
        accel_quadratic: p.accel_quadratic * accel * accel,
        accel_over_comfort: if accel.abs() > 2.5 { p.accel_over_comfort } else { 0.0 },
        accel_over_limit: if accel.abs() > 4.0 { p.accel_over_limit } else { 0.0 },
        below_min_velocity: p.below_min_velocity / obs.v_max * (vmin - obs.v).max(0.0),
        above_speed_limit: p.above_speed_limit / obs.v_max * (obs.v - obs.v_max).max(0.0),
        negative_velocity: p.negative_velocity * (-obs.v).max(0.0),
        lead_brake_overshoot: p.lead_brake_overshoot * (-brake.d_lead_brake).max(0.0),
        stop_brake_overshoot: if delta == 0 {
            p.stop_brake_overshoot * (-brake.d_stop_brake).max(0.0)
        } else {
            0.0
        },
        collision: if collided { p.collision } else { 0.0 },
    }
}

/// Standalone reward evaluation for one vehicle: extracts the observation,
/// braking state and collision blame from the scenario. The collision test
/// runs against every other vehicle; vehicle `i` carries the penalty only if
/// the blame rules select it.
pub fn reward(
    map: &IntersectionMap,
    scenario: &Scenario,
    i: usize,
    accel: f64,
    delta: u8,
    cfg: &EnvConfig,
) -> crate::error::Result<RewardBreakdown> {
    let obs = crate::scenario::driving_observation(map, scenario, i)?;
    let brake = brake_state(map, &scenario.vehicles[i], &obs);
    let mut collided = false;
    for j in 0..scenario.vehicles.len() {
        if j != i
            && collision_with(map, scenario, i, j, cfg.collision_clearance)
            && collision_blame(map, scenario, i, j)? == i
        {
            collided = true;
            break;
        }
    }
    Ok(reward_from_parts(&obs, &brake, accel, delta, collided, cfg))
}

/// Which of a colliding pair carries the penalty: the yielding vehicle when
/// the pair is in a conflict relation, otherwise the follower of a same-lane
/// rear-end (mapped through merges), with deterministic fallbacks.
pub fn collision_blame(
    map: &IntersectionMap,
    scenario: &Scenario,
    i: usize,
    j: usize,
) -> crate::error::Result<usize> {
    use crate::map::ConflictRelation;
    let a = &scenario.vehicles[i];
    let b = &scenario.vehicles[j];
    match map.conflict_partners(a.route, a.s, b.route, b.s)? {
        ConflictRelation::FirstYields => return Ok(i),
        ConflictRelation::SecondYields => return Ok(j),
        ConflictRelation::None => {}
    }
    // Same lane (directly, via a merge, or on a shared entry): blame the
    // follower.
    if let Some(delta) = crate::scenario::same_lane_distance(map, a, b) {
        return Ok(if delta >= 0.0 { i } else { j });
    }
    // A resolved conflict (both past their exits): the one less far past its
    // exit is behind.
    let mut best: Option<(f64, usize)> = None;
    for z in map.conflict_zones_between(a.route, b.route) {
        let (iv_a, _, iv_b, _) = z.from_perspective(a.route).unwrap();
        let prog_a = a.s - iv_a.1;
        let prog_b = b.s - iv_b.1;
        let cand = if prog_a <= prog_b { (prog_a, i) } else { (prog_b, j) };
        if best.map_or(true, |(p, _)| cand.0 < p) {
            best = Some(cand);
        }
    }
    Ok(best.map(|(_, k)| k).unwrap_or_else(|| if a.id.0 < b.id.0 { j } else { i }))
}
