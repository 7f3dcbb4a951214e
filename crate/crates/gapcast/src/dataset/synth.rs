//! Synthetic traffic: a kinematic gap-acceptance rule serving as the
//! behavior oracle, a direct observation-space label sampler, and a full
//! scene generator driving car-following vehicles over the map so the whole
//! preprocessing and training pipeline runs without licensed recordings.

use super::{AgentClass, TrackRow, TrackTable};
use crate::driver::{idm_accel, IdmParams};
use crate::error::Result;
use crate::gap::GapLabel;
use crate::map::{ConflictRelation, IntersectionMap, RoadClass, RouteId};
use crate::scenario::{GapObservation, LEAD_FILL_DISTANCE, LEAD_FILL_VELOCITY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Gap-acceptance oracle of the synthetic corpus: accept when the prioritized
/// vehicle's arrival time exceeds the yielding vehicle's kinematic clearing
/// time plus a margin. Unlike the fixed-critical-gap heuristic it reacts to
/// the actual speed of the oncoming vehicle and to the yielding vehicle's own
/// state, which is exactly the gap the learned model is supposed to close.
#[derive(Debug, Clone, Copy)]
pub struct KinematicGapRule {
    /// Assumed acceleration while clearing the intersection (m/s²).
    pub clearing_accel: f64,
    /// Speed cap while clearing (m/s).
    pub clearing_speed: f64,
    /// Safety margin added to the clearing time (s).
    pub margin: f64,
}

impl Default for KinematicGapRule {
    fn default() -> Self {
        Self { clearing_accel: 1.5, clearing_speed: 10.0, margin: 1.5 }
    }
}

impl KinematicGapRule {
    /// Time to cover `d` starting at `v`, accelerating to the clearing speed.
    pub fn time_to_clear(&self, d: f64, v: f64) -> f64 {
        if d <= 0.0 {
            return 0.0;
        }
        if v >= self.clearing_speed {
            return d / v;
        }
        let a = self.clearing_accel;
        let t_acc = (self.clearing_speed - v) / a;
        let d_acc = v * t_acc + 0.5 * a * t_acc * t_acc;
        if d_acc >= d {
            ((v * v + 2.0 * a * d).sqrt() - v) / a
        } else {
            t_acc + (d - d_acc) / self.clearing_speed
        }
    }

    /// Temporal gap until the prioritized vehicle reaches its stop line.
    pub fn time_gap(&self, d_stop_j: f64, v_j: f64) -> f64 {
        if d_stop_j <= 0.0 {
            return 0.0;
        }
        d_stop_j / v_j.max(1.0)
    }

    pub fn accepts_with_margin(&self, obs: &GapObservation, margin: f64) -> bool {
        self.time_gap(obs.d_stop_j, obs.v_j) > self.time_to_clear(obs.d_pga_i, obs.v_i) + margin
    }

    pub fn accepts(&self, obs: &GapObservation) -> bool {
        self.accepts_with_margin(obs, self.margin)
    }
}

/// Observation-space label sampler: labels from the kinematic oracle with a
/// configurable flip probability. The sampling context is a 50 km/h crossing
/// conflict, matching the bundled map's main road: approach states are drawn
/// from plausible ranges (prioritized traffic near the speed limit, yielding
/// vehicles slow near their stop line) rather than a uniform box.
pub fn synth_labels(n: usize, seed: u64, flip_prob: f64) -> Vec<GapLabel> {
    let rule = KinematicGapRule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speed: Normal<f64> = Normal::new(11.0, 2.5).unwrap();
    (0..n)
        .map(|_| {
            let v_i = if rng.random::<f64>() < 0.6 {
                rng.random_range(0.0..2.5)
            } else {
                rng.random_range(0.0..8.33)
            };
            let obs = GapObservation {
                d_pga_i: rng.random_range(8.0..35.0),
                v_i,
                d_stop_j: rng.random_range(0.0..100.0),
                v_j: speed.sample(&mut rng).clamp(0.5, 16.0),
            };
            let mut delta = rule.accepts(&obs) as u8;
            if rng.random::<f64>() < flip_prob {
                delta = 1 - delta;
            }
            GapLabel { observation: obs, delta_gt: delta }
        })
        .collect()
}

/// One logged per-frame decision of a generated driver, for validating the
/// label extraction against the generator's own intent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionLog {
    pub recording_id: u32,
    pub track_id: u64,
    pub frame: u64,
    pub delta: u8,
}

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub n_scenes: usize,
    /// Scene duration (s).
    pub duration: f64,
    /// Total arrival rate over all routes (vehicles/s).
    pub arrival_rate: f64,
    /// Distance to the stop line below which an accepted gap is committed.
    pub commit_distance: f64,
    /// Std of the per-driver margin perturbation (s).
    pub margin_noise: f64,
    /// Per-driver desired-speed factor range (fraction of the local limit).
    pub speed_factor_range: (f64, f64),
    /// Visible approach length on main / side roads (m).
    pub visibility_main: f64,
    pub visibility_side: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 20,
            duration: 60.0,
            arrival_rate: 0.5,
            commit_distance: 15.0,
            margin_noise: 0.3,
            speed_factor_range: (0.85, 1.0),
            visibility_main: 35.0,
            visibility_side: 20.0,
            seed: 0,
        }
    }
}

const DT: f64 = 0.2;

struct SimVehicle {
    track_id: u64,
    route: RouteId,
    s: f64,
    v: f64,
    kind: AgentClass,
    length: f64,
    width: f64,
    /// Personal acceptance margin (s).
    margin: f64,
    /// Personal desired-speed factor.
    speed_factor: f64,
    committed: bool,
}

/// Bumper-to-bumper lead gap among simulated vehicles, across all lane
/// relations (same route, shared exits, shared entries).
fn sim_lead(map: &IntersectionMap, vehicles: &[SimVehicle], i: usize) -> (f64, f64) {
    let me = &vehicles[i];
    let me_state = sim_state(me);
    let mut best: Option<(f64, f64)> = None;
    for (j, other) in vehicles.iter().enumerate() {
        if j == i {
            continue;
        }
        let Some(delta_center) =
            crate::scenario::same_lane_distance(map, &me_state, &sim_state(other))
        else {
            continue;
        };
        if delta_center <= 0.0 {
            continue;
        }
        let gap = (delta_center - 0.5 * (me.length + other.length)).max(0.01);
        if gap <= LEAD_FILL_DISTANCE && best.map_or(true, |(g, _)| gap < g) {
            best = Some((gap, other.v));
        }
    }
    best.unwrap_or((LEAD_FILL_DISTANCE, LEAD_FILL_VELOCITY))
}

fn sim_state(v: &SimVehicle) -> crate::scenario::VehicleState {
    crate::scenario::VehicleState {
        id: crate::scenario::VehicleId(v.track_id),
        route: v.route,
        s: v.s,
        v: v.v,
        length: v.length,
        width: v.width,
        kind: v.kind.to_vehicle_kind().unwrap_or(crate::scenario::VehicleKind::Car),
    }
}

/// Simulate car-following drivers with the kinematic acceptance rule and
/// record what an intersection camera with a limited field of view would
/// see. Returns the track table and the per-frame decision log.
pub fn synth_scenes(
    map: &IntersectionMap,
    rule: &KinematicGapRule,
    cfg: &SynthConfig,
) -> Result<(TrackTable, Vec<DecisionLog>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let idm = IdmParams::default();
    let mut table = TrackTable::new(1.0 / DT);
    let mut log = Vec::new();
    let mut next_track_id = 0u64;
    let steps = (cfg.duration / DT).round() as usize;
    // Route weights: main entries carry twice the side-road flow.
    let weights: Vec<f64> = map
        .routes()
        .iter()
        .map(|r| match r.class {
            RoadClass::Main => 2.0,
            RoadClass::Side => 1.0,
        })
        .collect();
    let weight_sum: f64 = weights.iter().sum();

    for scene in 0..cfg.n_scenes {
        let mut vehicles: Vec<SimVehicle> = Vec::new();
        for step in 0..steps {
            // Arrivals.
            for (r, w) in weights.iter().enumerate() {
                let p = cfg.arrival_rate * w / weight_sum * DT;
                if rng.random::<f64>() >= p {
                    continue;
                }
                let route = RouteId(r);
                let entry_clear = vehicles
                    .iter()
                    .filter(|v| v.route == route)
                    .all(|v| v.s > 25.0);
                if !entry_clear {
                    continue;
                }
                let roll: f64 = rng.random();
                let (kind, length, width, v_cap) = if roll < 0.85 {
                    (AgentClass::Car, 4.5, 2.0, f64::INFINITY)
                } else if roll < 0.95 {
                    (AgentClass::Truck, 8.0, 2.5, f64::INFINITY)
                } else {
                    (AgentClass::Bicycle, 1.8, 0.8, 5.5)
                };
                let speed_factor =
                    rng.random_range(cfg.speed_factor_range.0..cfg.speed_factor_range.1);
                let v0 = (speed_factor * map.geometry(route).speed_limit_at(0.0)).min(v_cap);
                vehicles.push(SimVehicle {
                    track_id: next_track_id,
                    route,
                    s: 0.0,
                    v: v0,
                    kind,
                    length,
                    width,
                    margin: (rule.margin + cfg.margin_noise * normal.sample(&mut rng)).max(0.2),
                    speed_factor,
                    committed: false,
                });
                next_track_id += 1;
            }

            // Decisions, then motion.
            let n = vehicles.len();
            let mut accels = vec![0.0; n];
            for i in 0..n {
                let me = &vehicles[i];
                let geom = map.geometry(me.route);
                let d_stop = geom.stop_line_s() - me.s;
                // Per-pair decisions against prioritized conflict partners.
                let mut delta = 1u8;
                let mut has_partner = false;
                if !me.committed {
                    for (j, other) in vehicles.iter().enumerate() {
                        if j == i {
                            continue;
                        }
                        if map.conflict_partners(me.route, me.s, other.route, other.s)?
                            != ConflictRelation::FirstYields
                        {
                            continue;
                        }
                        has_partner = true;
                        let obs = GapObservation {
                            d_pga_i: geom.pga_s() - me.s,
                            v_i: me.v,
                            d_stop_j: map.geometry(other.route).stop_line_s() - other.s,
                            v_j: other.v,
                        };
                        if !rule.accepts_with_margin(&obs, me.margin) {
                            delta = 0;
                        }
                    }
                } else {
                    has_partner = vehicles.iter().enumerate().any(|(j, other)| {
                        j != i
                            && map
                                .conflict_partners(me.route, me.s, other.route, other.s)
                                .map(|rel| rel == ConflictRelation::FirstYields)
                                .unwrap_or(false)
                    });
                }
                if has_partner {
                    log.push(DecisionLog {
                        recording_id: scene as u32,
                        track_id: me.track_id,
                        frame: step as u64,
                        delta,
                    });
                }
                let (d_lead, v_lead) = sim_lead(map, &vehicles, i);
                let me = &mut vehicles[i];
                if delta == 1 && (me.s > geom.stop_line_s() || d_stop < cfg.commit_distance) {
                    me.committed = true;
                }
                let v_desired = (me.speed_factor * geom.speed_limit_at(me.s))
                    .min(if me.kind == AgentClass::Bicycle { 5.5 } else { f64::INFINITY });
                let use_delta = if me.committed { 1 } else { delta };
                let (s_gap, dv) = if use_delta == 0 && d_stop > 0.0 && d_stop < d_lead {
                    (d_stop, me.v)
                } else {
                    (d_lead, me.v - v_lead)
                };
                accels[i] = idm_accel(me.v, v_desired, s_gap, dv, &idm).0;
            }
            for i in 0..n {
                let v = (vehicles[i].v + accels[i] * DT).max(0.0);
                vehicles[i].v = v;
                vehicles[i].s += v * DT;
            }
            // Record what the camera sees; despawn map leavers.
            let mut k = 0;
            while k < vehicles.len() {
                let veh = &vehicles[k];
                let geom = map.geometry(veh.route);
                if veh.s > geom.length() {
                    vehicles.remove(k);
                    continue;
                }
                let vis = match map.route(veh.route).class {
                    RoadClass::Main => cfg.visibility_main,
                    RoadClass::Side => cfg.visibility_side,
                };
                if veh.s >= geom.stop_line_s() - vis {
                    let p = geom.point_at(veh.s);
                    table.rows.push(TrackRow {
                        recording_id: scene as u32,
                        track_id: veh.track_id,
                        frame: step as u64,
                        x: p[0],
                        y: p[1],
                        speed: veh.v,
                        class: veh.kind,
                        length: veh.length,
                        width: veh.width,
                    });
                }
                k += 1;
            }
        }
    }
    Ok((table, log))
}
