//! Multi-agent closed-loop environment: every vehicle is advanced by the
//! same policy. Collisions reset the whole scene; vehicles leaving the map
//! are reinserted on a random route.

use super::{
    brake_state, collision_blame, collision_with, reward_from_parts, v_min, EnvConfig,
    RewardBreakdown,
};
use crate::error::{Error, Result};
use crate::gap::{decide, GapModel};
use crate::map::{IntersectionMap, RouteId};
use crate::mlp::Workspace;
use crate::scenario::{
    driving_observation, DrivingObservation, Scenario, VehicleId, VehicleKind, VehicleState,
    DRIVER_INPUT_WIDTH,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Cached per-agent observation for the current environment state.
#[derive(Debug, Clone, Copy)]
pub struct AgentObs {
    pub input: [f64; DRIVER_INPUT_WIDTH],
    pub observation: DrivingObservation,
    pub delta: u8,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub rewards: Vec<RewardBreakdown>,
    /// The whole scene was resampled (collision or infeasible reinsertion).
    pub reset: bool,
    /// Number of distinct colliding pairs this step.
    pub collisions: usize,
    /// Per agent: left the map and was reinserted on a fresh route.
    pub reinserted: Vec<bool>,
}

pub struct ClosedLoopEnv {
    map: Arc<IntersectionMap>,
    gap_model: GapModel,
    config: EnvConfig,
    scenario: Scenario,
    /// Per vehicle: the gap decision latched open after crossing the stop
    /// line with delta = 1.
    latched: Vec<bool>,
    cache: Vec<AgentObs>,
    rng: ChaCha8Rng,
    ws: Workspace,
    next_id: u64,
    pub time: f64,
}

impl ClosedLoopEnv {
    pub fn new(
        map: Arc<IntersectionMap>,
        gap_model: GapModel,
        config: EnvConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ws = Workspace::default();
        let scenario = sample_scene_impl(&map, &gap_model, config.n_agents, &mut rng, &config, &mut ws)?;
        let n = scenario.vehicles.len();
        let mut env = Self {
            map,
            gap_model,
            config,
            scenario,
            latched: vec![false; n],
            cache: Vec::new(),
            rng,
            ws,
            next_id: n as u64,
            time: 0.0,
        };
        env.refresh_cache()?;
        Ok(env)
    }

    /// Run against a fixed scenario instead of a sampled one (fixtures).
    pub fn with_scenario(
        map: Arc<IntersectionMap>,
        gap_model: GapModel,
        config: EnvConfig,
        scenario: Scenario,
        seed: u64,
    ) -> Result<Self> {
        scenario.validate(&map)?;
        let n = scenario.vehicles.len();
        let max_id = scenario.vehicles.iter().map(|v| v.id.0).max().unwrap_or(0);
        let mut env = Self {
            map,
            gap_model,
            config,
            scenario,
            latched: vec![false; n],
            cache: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            ws: Workspace::default(),
            next_id: max_id + 1,
            time: 0.0,
        };
        env.refresh_cache()?;
        Ok(env)
    }

    pub fn n_agents(&self) -> usize {
        self.scenario.vehicles.len()
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn map(&self) -> &IntersectionMap {
        &self.map
    }

    pub fn observations(&self) -> &[AgentObs] {
        &self.cache
    }

    /// Gap decision with the cross-and-latch rule: before the stop line the
    /// decision is re-evaluated every step; once a vehicle has crossed with
    /// delta = 1 it stays committed.
    fn decide_latched(&mut self, i: usize) -> Result<u8> {
        let v = &self.scenario.vehicles[i];
        let past_stop = v.s > self.map.geometry(v.route).stop_line_s();
        if self.latched[i] && past_stop {
            return Ok(1);
        }
        let delta = decide(&self.map, &self.scenario, i, &self.gap_model, &mut self.ws)?.delta;
        if delta == 1 && past_stop {
            self.latched[i] = true;
        }
        Ok(delta)
    }

    fn refresh_cache(&mut self) -> Result<()> {
        let n = self.scenario.vehicles.len();
        self.cache.clear();
        for i in 0..n {
            let delta = self.decide_latched(i)?;
            let observation = driving_observation(&self.map, &self.scenario, i)?;
            self.cache.push(AgentObs { input: observation.to_input(delta), observation, delta });
        }
        Ok(())
    }

    fn resample(&mut self) -> Result<()> {
        self.scenario = sample_scene_impl(
            &self.map,
            &self.gap_model,
            self.config.n_agents,
            &mut self.rng,
            &self.config,
            &mut self.ws,
        )?;
        self.latched = vec![false; self.scenario.vehicles.len()];
        self.next_id += self.scenario.vehicles.len() as u64;
        Ok(())
    }

    /// Advance all agents by one step. Rewards are evaluated at the
    /// post-integration state with the applied acceleration; the observation
    /// cache afterwards reflects the next state (or the fresh scene after a
    /// reset).
    pub fn step(&mut self, actions: &[f64]) -> Result<StepOutcome> {
        let n = self.scenario.vehicles.len();
        if actions.len() != n {
            return Err(Error::Env(format!("{} actions for {n} agents", actions.len())));
        }
        self.time += self.config.dt;
        let mut reinserted = vec![false; n];
        for (i, v) in self.scenario.vehicles.iter_mut().enumerate() {
            *v = super::integrate(v, actions[i], self.config.dt);
        }
        // Map leavers get a fresh route; an infeasible reinsertion resets
        // the whole scene. All leavers are relocated to valid positions
        // before any feasibility query touches the scene.
        let mut infeasible_reinsert = false;
        let mut leavers = Vec::new();
        for i in 0..n {
            let len = self.map.geometry(self.scenario.vehicles[i].route).length();
            if self.scenario.vehicles[i].s <= len {
                continue;
            }
            reinserted[i] = true;
            self.latched[i] = false;
            leavers.push(i);
            let route = RouteId(self.rng.random_range(0..self.map.n_routes()));
            let id = VehicleId(self.next_id);
            self.next_id += 1;
            let kind_roll: f64 = self.rng.random();
            let (kind, length, width) = spawn_kind(kind_roll);
            self.scenario.vehicles[i] = VehicleState {
                id,
                route,
                s: 0.0,
                v: 0.0,
                length,
                width,
                kind,
            };
        }
        for &i in &leavers {
            match feasible_velocity_range(
                &self.map,
                &self.scenario,
                i,
                &self.gap_model,
                &self.config,
                &mut self.ws,
            )? {
                Some((lo, hi)) => {
                    let v = if hi > lo { self.rng.random_range(lo..=hi) } else { lo };
                    self.scenario.vehicles[i].v = v;
                    if !placement_feasible(
                        &self.map,
                        &self.scenario,
                        &self.gap_model,
                        &self.config,
                        &mut self.ws,
                    )? {
                        infeasible_reinsert = true;
                    }
                }
                None => infeasible_reinsert = true,
            }
        }

        // Collision scan with blame attribution.
        let mut collided = vec![false; n];
        let mut collisions = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                if collision_with(&self.map, &self.scenario, i, j, self.config.collision_clearance) {
                    collisions += 1;
                    let blamed = collision_blame(&self.map, &self.scenario, i, j)?;
                    collided[blamed] = true;
                }
            }
        }

        // Rewards at the new state.
        let mut rewards = Vec::with_capacity(n);
        for i in 0..n {
            let delta = self.decide_latched(i)?;
            let obs = driving_observation(&self.map, &self.scenario, i)?;
            let brake = brake_state(&self.map, &self.scenario.vehicles[i], &obs);
            rewards.push(reward_from_parts(&obs, &brake, actions[i], delta, collided[i], &self.config));
        }

        let reset = collisions > 0 || infeasible_reinsert;
        if reset {
            self.resample()?;
        }
        self.refresh_cache()?;
        Ok(StepOutcome { rewards, reset, collisions, reinserted })
    }
}

fn spawn_kind(roll: f64) -> (VehicleKind, f64, f64) {
    if roll < 0.9 {
        (VehicleKind::Car, 4.5, 2.0)
    } else {
        (VehicleKind::Truck, 8.0, 2.5)
    }
}

/// The velocity interval for vehicle `i` in which no penalty row fires with
/// zero acceleration, or `None` when the position itself is infeasible.
fn feasible_velocity_range(
    map: &IntersectionMap,
    scenario: &Scenario,
    i: usize,
    gap_model: &GapModel,
    cfg: &EnvConfig,
    ws: &mut Workspace,
) -> Result<Option<(f64, f64)>> {
    let delta = decide(map, scenario, i, gap_model, ws)?.delta;
    let obs = driving_observation(map, scenario, i)?;
    let lo = v_min(obs.v_max, obs.d_lead, obs.d_stop, delta, cfg.comfort_decel_vmin);
    // Full-braking rows bound the velocity from above: s_brake <= d_lead and,
    // while yielding, s_brake <= d_stop.
    let mut hi = obs.v_max;
    hi = hi.min((2.0 * super::FULL_BRAKE_DECEL * obs.d_lead).sqrt() - 1e-9);
    if delta == 0 {
        if obs.d_stop <= 0.0 {
            return Ok(None);
        }
        hi = hi.min((2.0 * super::FULL_BRAKE_DECEL * obs.d_stop).sqrt() - 1e-9);
    }
    if hi < lo {
        return Ok(None);
    }
    Ok(Some((lo, hi)))
}

/// No penalty row fires for any vehicle of the scene with zero acceleration.
fn placement_feasible(
    map: &IntersectionMap,
    scenario: &Scenario,
    gap_model: &GapModel,
    cfg: &EnvConfig,
    ws: &mut Workspace,
) -> Result<bool> {
    let n = scenario.vehicles.len();
    for i in 0..n {
        let delta = decide(map, scenario, i, gap_model, ws)?.delta;
        let obs = driving_observation(map, scenario, i)?;
        let brake = brake_state(map, &scenario.vehicles[i], &obs);
        let r = reward_from_parts(&obs, &brake, 0.0, delta, false, cfg);
        if r.penalty_sum() > 1e-9 {
            return Ok(false);
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if collision_with(map, scenario, i, j, cfg.collision_clearance) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Rejection-sample a scene: uniform route and position, velocity drawn from
/// the interval in which no penalty constraint fires, full-scene feasibility
/// re-checked after every placement.
pub fn sample_scene(
    map: &IntersectionMap,
    gap_model: &GapModel,
    n: usize,
    rng: &mut ChaCha8Rng,
    config: &EnvConfig,
) -> Result<Scenario> {
    let mut ws = Workspace::default();
    sample_scene_impl(map, gap_model, n, rng, config, &mut ws)
}

fn sample_scene_impl(
    map: &IntersectionMap,
    gap_model: &GapModel,
    n: usize,
    rng: &mut ChaCha8Rng,
    config: &EnvConfig,
    ws: &mut Workspace,
) -> Result<Scenario> {
    const MAX_TRIES_PER_VEHICLE: usize = 1000;
    const MAX_SCENE_RESTARTS: usize = 50;
    // Pigeonhole bound: a vehicle needs at least its own length plus the
    // minimum standstill spacing of lane space.
    let capacity: f64 = map
        .routes()
        .iter()
        .map(|r| r.geometry.length())
        .sum::<f64>()
        / 6.0;
    if n as f64 > capacity {
        return Err(Error::Env(format!(
            "{n} vehicles exceed the map capacity of about {} vehicles",
            capacity as usize
        )));
    }
    'scene: for _restart in 0..MAX_SCENE_RESTARTS {
        let mut scenario = Scenario::new(Vec::with_capacity(n));
        for k in 0..n {
            let mut placed = false;
            for _try in 0..MAX_TRIES_PER_VEHICLE {
                let route = RouteId(rng.random_range(0..map.n_routes()));
                let len = map.geometry(route).length();
                let s = rng.random_range(0.0..len);
                let (kind, length, width) = spawn_kind(rng.random());
                scenario.vehicles.push(VehicleState {
                    id: VehicleId(k as u64),
                    route,
                    s,
                    v: 0.0,
                    length,
                    width,
                    kind,
                });
                let i = scenario.vehicles.len() - 1;
                let ok = match feasible_velocity_range(map, &scenario, i, gap_model, config, ws)? {
                    Some((lo, hi)) => {
                        let v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                        scenario.vehicles[i].v = v;
                        placement_feasible(map, &scenario, gap_model, config, ws)?
                    }
                    None => false,
                };
                if ok {
                    placed = true;
                    break;
                }
                scenario.vehicles.pop();
            }
            if !placed {
                if k == 0 {
                    return Err(Error::Env("cannot place a single vehicle on this map".into()));
                }
                continue 'scene;
            }
        }
        return Ok(scenario);
    }
    Err(Error::Env(format!("could not sample a feasible scene with {n} vehicles")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::bendplatz;
    use crate::mlp::{Activation, TinyMlp};

    fn zero_gap_model() -> GapModel {
        // Zero net outputs 0.5 -> accepts at threshold 0.5.
        GapModel::from_net(
            TinyMlp::zeros(&crate::gap::GAP_LAYERS, Activation::LeakyRelu, Activation::Sigmoid)
                .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn single_vehicle_always_samples() {
        let map = bendplatz().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sc = sample_scene(&map, &zero_gap_model(), 1, &mut rng, &EnvConfig::default()).unwrap();
        assert_eq!(sc.vehicles.len(), 1);
    }

    #[test]
    fn sampled_scenes_satisfy_every_constraint() {
        let map = bendplatz().unwrap();
        let gap_model = zero_gap_model();
        let cfg = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ws = Workspace::default();
        for _ in 0..40 {
            let sc = sample_scene(&map, &gap_model, cfg.n_agents, &mut rng, &cfg).unwrap();
            assert_eq!(sc.vehicles.len(), cfg.n_agents);
            // Brute-force re-check of every constraint.
            assert!(placement_feasible(&map, &sc, &gap_model, &cfg, &mut ws).unwrap());
            for v in &sc.vehicles {
                assert!(v.v <= map.geometry(v.route).speed_limit_at(v.s) + 1e-9);
                assert!(v.v >= 0.0);
            }
            for i in 0..sc.vehicles.len() {
                for j in i + 1..sc.vehicles.len() {
                    assert!(!crate::env::collision(&map, &sc, i, j));
                }
            }
        }
    }

    #[test]
    fn oversized_request_errors_out() {
        let map = bendplatz().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Far beyond map capacity.
        let err = sample_scene(&map, &zero_gap_model(), 2000, &mut rng, &EnvConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn zero_actions_on_feasible_scene_keep_rewards_bounded() {
        let map = Arc::new(bendplatz().unwrap());
        let mut env =
            ClosedLoopEnv::new(map, zero_gap_model(), EnvConfig::default(), 3).unwrap();
        let out = env.step(&vec![0.0; env.n_agents()]).unwrap();
        for r in &out.rewards {
            assert!(r.total() <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn head_on_fixture_resets_and_blames_the_yielding_vehicle() {
        use crate::scenario::{VehicleId, VehicleKind};
        let map = Arc::new(bendplatz().unwrap());
        let sn = map.route_id("sn").unwrap();
        let we = map.route_id("we").unwrap();
        // Put the yielding side-road vehicle inside the conflict zone with
        // the prioritized main-road vehicle: guaranteed collision.
        let zone = map
            .conflict_zones_between(sn, we)
            .next()
            .expect("sn/we conflict");
        let (iv_sn, _, iv_we, _) = zone.from_perspective(sn).unwrap();
        let sc = Scenario::new(vec![
            VehicleState {
                id: VehicleId(1),
                route: sn,
                s: iv_sn.0 + 2.0,
                v: 0.0,
                length: 4.0,
                width: 2.0,
                kind: VehicleKind::Car,
            },
            VehicleState {
                id: VehicleId(2),
                route: we,
                s: iv_we.0 + 2.0,
                v: 0.0,
                length: 4.0,
                width: 2.0,
                kind: VehicleKind::Car,
            },
        ]);
        let mut env =
            ClosedLoopEnv::with_scenario(map, zero_gap_model(), EnvConfig::default(), sc, 4).unwrap();
        let out = env.step(&[0.0, 0.0]).unwrap();
        assert!(out.reset);
        assert!(out.collisions > 0);
        let p0 = out.rewards[0].collision;
        let p1 = out.rewards[1].collision;
        assert_eq!(p0, 5000.0, "the yielding vehicle carries the penalty");
        assert_eq!(p1, 0.0, "the prioritized vehicle does not");
        // After the reset the scene is fresh and feasible.
        assert_eq!(env.n_agents(), EnvConfig::default().n_agents);
    }

    #[test]
    fn map_leaver_is_reinserted_at_a_route_start() {
        use crate::scenario::{VehicleId, VehicleKind};
        let map = Arc::new(bendplatz().unwrap());
        let we = map.route_id("we").unwrap();
        let len = map.geometry(we).length();
        let sc = Scenario::new(vec![VehicleState {
            id: VehicleId(1),
            route: we,
            s: len - 0.5,
            v: 10.0,
            length: 4.0,
            width: 2.0,
            kind: VehicleKind::Car,
        }]);
        let mut env =
            ClosedLoopEnv::with_scenario(map, zero_gap_model(), EnvConfig::default(), sc, 5).unwrap();
        let out = env.step(&[0.0]).unwrap();
        assert!(out.reinserted[0]);
        assert!(!out.reset);
        assert!(env.scenario().vehicles[0].s <= 0.5);
    }
}
