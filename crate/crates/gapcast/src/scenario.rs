//! Scene state and observation extraction.
//!
//! A scenario is plain data: cloning one for a rollout is cheap and each
//! rollout mutates only its own clone. The two observation vectors extracted
//! here feed the gap-acceptance network (4 inputs) and the driver network
//! (11 inputs plus the gap decision).

use crate::error::{Error, Result};
use crate::map::{ConflictRelation, IntersectionMap, RouteId};
use serde::{Deserialize, Serialize};

/// Fill-in lead distance when no vehicle is ahead within range (m).
pub const LEAD_FILL_DISTANCE: f64 = 100.0;
/// Fill-in lead velocity, 100 km/h in m/s.
pub const LEAD_FILL_VELOCITY: f64 = 27.78;
/// Heading-offset probe distances of the driving observation (m).
pub const HEADING_OFFSETS: [f64; 6] = [-10.0, -3.0, 3.0, 10.0, 30.0, 100.0];

/// Input normalization: distances, velocities and headings are brought to
/// roughly unit scale before entering a network. Recorded in weight files.
pub const DIST_SCALE: f64 = 1.0 / 50.0;
pub const VEL_SCALE: f64 = 1.0 / 15.0;
pub const HEADING_SCALE: f64 = std::f64::consts::FRAC_1_PI;

pub const GAP_INPUT_WIDTH: usize = 4;
pub const DRIVING_OBS_WIDTH: usize = 11;
pub const DRIVER_INPUT_WIDTH: usize = 12;

pub fn gap_input_scales() -> [f64; GAP_INPUT_WIDTH] {
    [DIST_SCALE, VEL_SCALE, DIST_SCALE, VEL_SCALE]
}

pub fn driver_input_scales() -> [f64; DRIVER_INPUT_WIDTH] {
    [
        DIST_SCALE,
        VEL_SCALE,
        VEL_SCALE,
        HEADING_SCALE,
        HEADING_SCALE,
        HEADING_SCALE,
        HEADING_SCALE,
        HEADING_SCALE,
        HEADING_SCALE,
        DIST_SCALE,
        VEL_SCALE,
        1.0,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VehicleId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleKind {
    Car,
    Truck,
    Bicycle,
}

impl VehicleKind {
    /// Bicycles are full scenario members but excluded from training and
    /// evaluation metrics.
    pub fn in_metrics(self) -> bool {
        !matches!(self, VehicleKind::Bicycle)
    }
}

/// Longitudinal state of one vehicle on a route.
#[derive(Debug, Clone, Copy)]
pub struct VehicleState {
    pub id: VehicleId,
    pub route: RouteId,
    /// Arclength position of the vehicle center (m).
    pub s: f64,
    /// Velocity (m/s); the integrator keeps this non-negative.
    pub v: f64,
    pub length: f64,
    pub width: f64,
    pub kind: VehicleKind,
}

/// Externally assigned priority overrides per ordered (yielding, prioritized)
/// vehicle pair.
#[derive(Debug, Clone, Default)]
pub struct ManeuverAssignment {
    overrides: Vec<(VehicleId, VehicleId, u8)>,
}

impl ManeuverAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    /// Set the override for (yielding, prioritized); at most one per pair.
    pub fn set(&mut self, yielding: VehicleId, prioritized: VehicleId, delta: u8) {
        assert!(delta <= 1, "override must be 0 or 1");
        if let Some(e) = self
            .overrides
            .iter_mut()
            .find(|e| e.0 == yielding && e.1 == prioritized)
        {
            e.2 = delta;
        } else {
            self.overrides.push((yielding, prioritized, delta));
        }
    }

    pub fn get(&self, yielding: VehicleId, prioritized: VehicleId) -> Option<u8> {
        self.overrides
            .iter()
            .find(|e| e.0 == yielding && e.1 == prioritized)
            .map(|e| e.2)
    }

    pub fn is_empty(&self) -> bool {
        self.overrides.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(VehicleId, VehicleId, u8)> {
        self.overrides.iter()
    }
}

/// A set of vehicles on an intersection map plus optional maneuver overrides.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub vehicles: Vec<VehicleState>,
    pub time: f64,
    pub maneuver: ManeuverAssignment,
}

impl Scenario {
    pub fn new(vehicles: Vec<VehicleState>) -> Self {
        Self { vehicles, time: 0.0, maneuver: ManeuverAssignment::new() }
    }

    pub fn validate(&self, map: &IntersectionMap) -> Result<()> {
        for (i, v) in self.vehicles.iter().enumerate() {
            if v.route.0 >= map.n_routes() {
                return Err(Error::Scenario(format!("vehicle {:?} on unknown route", v.id)));
            }
            let len = map.geometry(v.route).length();
            if !(0.0..=len).contains(&v.s) {
                return Err(Error::Scenario(format!(
                    "vehicle {:?} at s={} outside route of length {len}",
                    v.id, v.s
                )));
            }
            if v.v < 0.0 || !v.v.is_finite() {
                return Err(Error::Scenario(format!("vehicle {:?} has invalid velocity", v.id)));
            }
            if v.length <= 0.0 || v.width <= 0.0 {
                return Err(Error::Scenario(format!("vehicle {:?} has non-positive size", v.id)));
            }
            if self.vehicles[..i].iter().any(|o| o.id == v.id) {
                return Err(Error::Scenario(format!("duplicate vehicle id {:?}", v.id)));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, id: VehicleId) -> Result<usize> {
        self.vehicles
            .iter()
            .position(|v| v.id == id)
            .ok_or_else(|| Error::Scenario(format!("unknown vehicle {:?}", id)))
    }

    pub fn vehicle(&self, id: VehicleId) -> Result<&VehicleState> {
        Ok(&self.vehicles[self.index_of(id)?])
    }
}

/// The 11-scalar driver observation; the gap decision is appended as the
/// twelfth input at the driver-model boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrivingObservation {
    pub d_stop: f64,
    pub v: f64,
    pub v_max: f64,
    pub heading_offsets: [f64; 6],
    pub d_lead: f64,
    pub v_lead: f64,
}

impl DrivingObservation {
    pub fn to_array(&self) -> [f64; DRIVING_OBS_WIDTH] {
        [
            self.d_stop,
            self.v,
            self.v_max,
            self.heading_offsets[0],
            self.heading_offsets[1],
            self.heading_offsets[2],
            self.heading_offsets[3],
            self.heading_offsets[4],
            self.heading_offsets[5],
            self.d_lead,
            self.v_lead,
        ]
    }

    /// Normalized 12-wide network input with the gap decision appended.
    pub fn to_input(&self, delta: u8) -> [f64; DRIVER_INPUT_WIDTH] {
        let raw = self.to_array();
        let scales = driver_input_scales();
        let mut out = [0.0; DRIVER_INPUT_WIDTH];
        for i in 0..DRIVING_OBS_WIDTH {
            out[i] = raw[i] * scales[i];
        }
        out[DRIVING_OBS_WIDTH] = delta as f64;
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// The 4-scalar gap observation between a yielding vehicle and one
/// prioritized conflict partner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapObservation {
    pub d_pga_i: f64,
    pub v_i: f64,
    pub d_stop_j: f64,
    pub v_j: f64,
}

impl GapObservation {
    pub fn to_array(&self) -> [f64; GAP_INPUT_WIDTH] {
        [self.d_pga_i, self.v_i, self.d_stop_j, self.v_j]
    }

    pub fn to_input(&self) -> [f64; GAP_INPUT_WIDTH] {
        let raw = self.to_array();
        let scales = gap_input_scales();
        [
            raw[0] * scales[0],
            raw[1] * scales[1],
            raw[2] * scales[2],
            raw[3] * scales[3],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// Along-lane center distance from `me` to `other` when the two occupy the
/// same physical lane: the same route, a shared exit (merge relation, with
/// the other vehicle already past the join), or a shared entry (prefix
/// relation, with the other vehicle still before the divergence).
pub(crate) fn same_lane_distance(
    map: &IntersectionMap,
    me: &VehicleState,
    other: &VehicleState,
) -> Option<f64> {
    if other.route == me.route {
        return Some(other.s - me.s);
    }
    if let Some(&(_, start_self, start_other)) = map
        .merges_of(me.route)
        .iter()
        .find(|&&(r, _, _)| r == other.route)
    {
        if other.s >= start_other {
            return Some((other.s - start_other) - (me.s - start_self));
        }
    }
    if let Some(&(_, end_self, end_other)) = map
        .prefixes_of(me.route)
        .iter()
        .find(|&&(r, _, _)| r == other.route)
    {
        if other.s <= end_other {
            return Some((other.s - end_other) - (me.s - end_self));
        }
    }
    None
}

/// Nearest vehicle ahead of `i` on its own physical lane (same route, or a
/// shared-entry/shared-exit route mapped through the lane relations).
///
/// Returns the lead id with the bumper-to-bumper gap and the lead velocity,
/// or `None` when nothing is within 100 m; callers substitute the fill-in
/// pair. The gap is floored just above zero so downstream ratios stay
/// defined even mid-collision.
pub fn lead_vehicle(
    map: &IntersectionMap,
    scenario: &Scenario,
    i: usize,
) -> Result<Option<(VehicleId, f64, f64)>> {
    let me = scenario
        .vehicles
        .get(i)
        .ok_or_else(|| Error::Scenario(format!("vehicle index {i} out of range")))?;
    let mut best: Option<(VehicleId, f64, f64)> = None;
    for (j, other) in scenario.vehicles.iter().enumerate() {
        if j == i {
            continue;
        }
        let Some(delta_center) = same_lane_distance(map, me, other) else {
            continue;
        };
        if delta_center <= 0.0 {
            continue;
        }
        let gap = delta_center - 0.5 * (me.length + other.length);
        if gap > LEAD_FILL_DISTANCE {
            continue;
        }
        let gap = gap.max(0.01);
        if best.map_or(true, |(_, g, _)| gap < g) {
            best = Some((other.id, gap, other.v));
        }
    }
    Ok(best)
}

/// Assemble the 11-scalar driving observation for vehicle `i`.
pub fn driving_observation(
    map: &IntersectionMap,
    scenario: &Scenario,
    i: usize,
) -> Result<DrivingObservation> {
    let me = scenario
        .vehicles
        .get(i)
        .ok_or_else(|| Error::Scenario(format!("vehicle index {i} out of range")))?;
    let geom = map.geometry(me.route);
    let mut heading_offsets = [0.0; 6];
    for (k, &off) in HEADING_OFFSETS.iter().enumerate() {
        heading_offsets[k] = geom.heading_offset(me.s, off)?;
    }
    let (d_lead, v_lead) = match lead_vehicle(map, scenario, i)? {
        Some((_, gap, v)) => (gap, v),
        None => (LEAD_FILL_DISTANCE, LEAD_FILL_VELOCITY),
    };
    Ok(DrivingObservation {
        d_stop: geom.distance_to_stop(me.s)?,
        v: me.v,
        v_max: geom.speed_limit_at(me.s),
        heading_offsets,
        d_lead,
        v_lead,
    })
}

/// Assemble the gap observation of yielding vehicle `i` against prioritized
/// vehicle `j`. The pair must be in a yielding relation.
pub fn gap_observation(
    map: &IntersectionMap,
    scenario: &Scenario,
    i: usize,
    j: usize,
) -> Result<GapObservation> {
    let vi = &scenario.vehicles[i];
    let vj = &scenario.vehicles[j];
    let rel = map.conflict_partners(vi.route, vi.s, vj.route, vj.s)?;
    if rel != ConflictRelation::FirstYields {
        return Err(Error::Scenario(format!(
            "vehicle {:?} does not yield to {:?}",
            vi.id, vj.id
        )));
    }
    Ok(GapObservation {
        d_pga_i: map.geometry(vi.route).distance_to_pga(vi.s)?,
        v_i: vi.v,
        d_stop_j: map.geometry(vj.route).distance_to_stop(vj.s)?,
        v_j: vj.v,
    })
}

/// Scenario snapshot file: vehicles plus optional maneuver overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub time: f64,
    #[serde(rename = "vehicle")]
    pub vehicles: Vec<VehicleSpec>,
    #[serde(rename = "override", default)]
    pub overrides: Vec<OverrideSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub id: u64,
    pub route: String,
    pub s: f64,
    pub v: f64,
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default = "default_kind")]
    pub kind: VehicleKind,
}

fn default_length() -> f64 {
    4.5
}
fn default_width() -> f64 {
    2.0
}
fn default_kind() -> VehicleKind {
    VehicleKind::Car
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverrideSpec {
    pub yielding: u64,
    pub prioritized: u64,
    pub delta: u8,
}

pub fn load_scenario(path: &std::path::Path, map: &IntersectionMap) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Scenario(format!("read {}: {e}", path.display())))?;
    let spec: ScenarioSpec = toml::from_str(&text)
        .map_err(|e| Error::Scenario(format!("parse {}: {e}", path.display())))?;
    scenario_from_spec(&spec, map)
}

pub fn scenario_from_spec(spec: &ScenarioSpec, map: &IntersectionMap) -> Result<Scenario> {
    let mut vehicles = Vec::with_capacity(spec.vehicles.len());
    for v in &spec.vehicles {
        vehicles.push(VehicleState {
            id: VehicleId(v.id),
            route: map.route_id(&v.route)?,
            s: v.s,
            v: v.v,
            length: v.length,
            width: v.width,
            kind: v.kind,
        });
    }
    let mut scenario = Scenario::new(vehicles);
    scenario.time = spec.time;
    for o in &spec.overrides {
        if o.delta > 1 {
            return Err(Error::Scenario(format!(
                "override {} -> {} has delta {}, expected 0 or 1",
                o.yielding, o.prioritized, o.delta
            )));
        }
        scenario.maneuver.set(VehicleId(o.yielding), VehicleId(o.prioritized), o.delta);
    }
    scenario.validate(map)?;
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::bendplatz;

    fn car(id: u64, route: RouteId, s: f64, v: f64) -> VehicleState {
        VehicleState {
            id: VehicleId(id),
            route,
            s,
            v,
            length: 4.0,
            width: 2.0,
            kind: VehicleKind::Car,
        }
    }

    #[test]
    fn empty_road_gets_fill_in_lead() {
        let map = bendplatz().unwrap();
        let we = map.route_id("we").unwrap();
        let sc = Scenario::new(vec![car(1, we, 50.0, 10.0)]);
        assert!(lead_vehicle(&map, &sc, 0).unwrap().is_none());
        let obs = driving_observation(&map, &sc, 0).unwrap();
        assert_eq!(obs.d_lead, 100.0);
        assert_eq!(obs.v_lead, 27.78);
    }

    #[test]
    fn same_route_lead_is_bumper_to_bumper() {
        let map = bendplatz().unwrap();
        let we = map.route_id("we").unwrap();
        let sc = Scenario::new(vec![car(1, we, 50.0, 10.0), car(2, we, 70.0, 8.0)]);
        let (id, gap, v) = lead_vehicle(&map, &sc, 0).unwrap().unwrap();
        assert_eq!(id, VehicleId(2));
        assert_eq!(gap, 16.0); // 20 center distance - (2 + 2)
        assert_eq!(v, 8.0);
    }

    #[test]
    fn merged_route_lead_beats_farther_same_route_lead() {
        let map = bendplatz().unwrap();
        let we = map.route_id("we").unwrap();
        let se = map.route_id("se").unwrap();
        // Merge join: we @154.8 <-> se @69.4 approximately; take them from the map.
        let &(_, start_we, start_se) = map
            .merges_of(we)
            .iter()
            .find(|&&(r, _, _)| r == se)
            .unwrap();
        let me_s = start_we - 5.0;
        // Same-route lead 30 m ahead, merged-route lead 15 m ahead.
        let sc = Scenario::new(vec![
            car(1, we, me_s, 10.0),
            car(2, we, me_s + 30.0, 9.0),
            car(3, se, start_se + 10.0, 7.0),
        ]);
        // Brute force over mapped positions agrees with the query.
        let (id, gap, _) = lead_vehicle(&map, &sc, 0).unwrap().unwrap();
        assert_eq!(id, VehicleId(3));
        assert!((gap - (15.0 - 4.0)).abs() < 1e-9);
    }

    #[test]
    fn vehicle_behind_merge_start_is_not_a_lead() {
        let map = bendplatz().unwrap();
        let we = map.route_id("we").unwrap();
        let se = map.route_id("se").unwrap();
        let &(_, start_we, start_se) = map
            .merges_of(we)
            .iter()
            .find(|&&(r, _, _)| r == se)
            .unwrap();
        // The other vehicle is still on its own approach before the join.
        let sc = Scenario::new(vec![car(1, we, start_we - 5.0, 10.0), car(2, se, start_se - 10.0, 5.0)]);
        assert!(lead_vehicle(&map, &sc, 0).unwrap().is_none());
    }

    #[test]
    fn straight_empty_road_observation_matches_fill_ins() {
        let map = bendplatz().unwrap();
        let we = map.route_id("we").unwrap();
        let stop = map.geometry(we).stop_line_s();
        let sc = Scenario::new(vec![car(1, we, stop - 40.0, 10.0)]);
        let obs = driving_observation(&map, &sc, 0).unwrap();
        assert_eq!(obs.d_stop, 40.0);
        assert_eq!(obs.v, 10.0);
        assert_eq!(obs.v_max, 13.89);
        for d in obs.heading_offsets {
            assert_eq!(d, 0.0);
        }
        assert_eq!(obs.d_lead, 100.0);
        assert_eq!(obs.v_lead, 27.78);
        let input = obs.to_input(1);
        assert_eq!(input.len(), 12);
        assert_eq!(input[11], 1.0);
        assert!((input[0] - 40.0 / 50.0).abs() < 1e-12);
    }

    #[test]
    fn past_stop_line_distance_is_negative() {
        let map = bendplatz().unwrap();
        let we = map.route_id("we").unwrap();
        let stop = map.geometry(we).stop_line_s();
        let sc = Scenario::new(vec![car(1, we, stop + 5.0, 10.0)]);
        let obs = driving_observation(&map, &sc, 0).unwrap();
        assert_eq!(obs.d_stop, -5.0);
    }

    #[test]
    fn left_turn_heading_offsets_activate_with_distance() {
        let map = bendplatz().unwrap();
        let wn = map.route_id("wn").unwrap();
        let stop = map.geometry(wn).stop_line_s();
        // About 12 m before the arc begins: the 3 m and 10 m probes are still
        // straight, the 30 m probe reaches into the left turn.
        let sc = Scenario::new(vec![car(1, wn, stop - 10.0, 8.0)]);
        let obs = driving_observation(&map, &sc, 0).unwrap();
        assert!(obs.heading_offsets[2].abs() < 1e-6, "dpsi(3) = {}", obs.heading_offsets[2]);
        assert!(obs.heading_offsets[4] > 0.5, "dpsi(30) = {}", obs.heading_offsets[4]);
    }

    #[test]
    fn gap_observation_reads_both_vehicles() {
        let map = bendplatz().unwrap();
        let sn = map.route_id("sn").unwrap();
        let we = map.route_id("we").unwrap();
        let stop_sn = map.geometry(sn).stop_line_s();
        let stop_we = map.geometry(we).stop_line_s();
        let sc = Scenario::new(vec![car(1, sn, stop_sn, 0.0), car(2, we, stop_we - 35.0, 12.0)]);
        let obs = gap_observation(&map, &sc, 0, 1).unwrap();
        let d_pga = map.geometry(sn).pga_s() - stop_sn;
        assert!((obs.d_pga_i - d_pga).abs() < 1e-12);
        assert_eq!(obs.v_i, 0.0);
        assert_eq!(obs.d_stop_j, 35.0);
        assert_eq!(obs.v_j, 12.0);
        assert_eq!(obs.to_array().len(), 4);
        // The reversed query is a domain error: the main road does not yield.
        assert!(gap_observation(&map, &sc, 1, 0).is_err());
    }

    #[test]
    fn scenario_file_round_trips_with_overrides() {
        let map = bendplatz().unwrap();
        let text = r#"
            time = 1.5
            [[vehicle]]
            id = 1
            route = "sn"
            s = 30.0
            v = 5.0
            [[vehicle]]
            id = 2
            route = "we"
            s = 80.0
            v = 12.0
            kind = "truck"
            length = 8.0
            width = 2.5
            [[override]]
            yielding = 1
            prioritized = 2
            delta = 0
        "#;
        let spec: ScenarioSpec = toml::from_str(text).unwrap();
        let sc = scenario_from_spec(&spec, &map).unwrap();
        assert_eq!(sc.vehicles.len(), 2);
        assert_eq!(sc.vehicles[1].kind, VehicleKind::Truck);
        assert_eq!(sc.maneuver.get(VehicleId(1), VehicleId(2)), Some(0));
        assert_eq!(sc.time, 1.5);

        // Unknown route is a named domain error.
        let mut bad = spec.clone();
        bad.vehicles[0].route = "zz".into();
        let err = scenario_from_spec(&bad, &map).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn observation_is_a_pure_function_of_the_scene() {
        let map = bendplatz().unwrap();
        let we = map.route_id("we").unwrap();
        let sn = map.route_id("sn").unwrap();
        let sc = Scenario::new(vec![car(1, we, 100.0, 10.0), car(2, sn, 40.0, 6.0)]);
        let a = driving_observation(&map, &sc, 0).unwrap();
        let b = driving_observation(&map, &sc, 0).unwrap();
        assert_eq!(a.to_array().map(f64::to_bits), b.to_array().map(f64::to_bits));
    }
}
