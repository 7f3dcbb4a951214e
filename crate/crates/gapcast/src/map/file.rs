//! Declarative map files: per-route vertex lists, speed-limit segments, stop
//! lines and explicit right-of-way declarations. Conflict zones, merge
//! relations and the point of guaranteed arrival are derived from geometry
//! unless overridden.

use super::derive;
use super::{IntersectionMap, PathGeometry, RoadClass, Route, RouteId, SpeedProfile};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapSpec {
    pub name: String,
    #[serde(default = "default_lane_width")]
    pub lane_width: f64,
    #[serde(rename = "route")]
    pub routes: Vec<RouteSpec>,
    /// Right-of-way declarations; required for every conflicting pair.
    #[serde(rename = "priority", default)]
    pub priorities: Vec<PrioritySpec>,
    /// Explicit merge relations (in addition to derived ones).
    #[serde(rename = "merge", default)]
    pub merges: Vec<MergeSpec>,
    /// Explicit conflict zones, replacing derivation for their pair.
    #[serde(rename = "conflict", default)]
    pub conflicts: Vec<ConflictSpec>,
}

fn default_lane_width() -> f64 {
    super::LANE_WIDTH
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteSpec {
    pub id: String,
    #[serde(default = "default_class")]
    pub class: RoadClass,
    /// Centerline vertices (x, y) in meters.
    pub points: Vec<[f64; 2]>,
    /// (from_arclength, limit m/s) pairs, first entry at 0.
    pub speed_limit: Vec<[f64; 2]>,
    pub stop_line: f64,
    /// Point of guaranteed arrival override; derived when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pga: Option<f64>,
}

fn default_class() -> RoadClass {
    RoadClass::Main
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrioritySpec {
    /// Route with right of way.
    pub holder: String,
    /// Route that has to yield.
    pub yields: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeSpec {
    pub a: String,
    pub b: String,
    pub start_a: f64,
    pub start_b: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictSpec {
    pub a: String,
    pub b: String,
    pub interval_a: [f64; 2],
    pub interval_b: [f64; 2],
    pub holder: String,
}

pub fn map_to_toml(spec: &MapSpec) -> Result<String> {
    toml::to_string(spec).map_err(|e| Error::Map(format!("serialize map: {e}")))
}

pub fn load_map(path: &Path) -> Result<IntersectionMap> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Map(format!("read {}: {e}", path.display())))?;
    let spec: MapSpec =
        toml::from_str(&text).map_err(|e| Error::Map(format!("parse {}: {e}", path.display())))?;
    map_from_spec(&spec)
}

pub fn map_from_spec(spec: &MapSpec) -> Result<IntersectionMap> {
    if spec.lane_width <= 0.0 {
        return Err(Error::Map("lane width must be positive".into()));
    }
    let mut routes = Vec::with_capacity(spec.routes.len());
    let mut by_name: HashMap<String, usize> = HashMap::new();
    for r in &spec.routes {
        let segments: Vec<(f64, f64)> = r.speed_limit.iter().map(|s| (s[0], s[1])).collect();
        let geometry = PathGeometry::new(r.points.clone(), SpeedProfile::new(&segments)?, r.stop_line)
            .map_err(|e| Error::Map(format!("route {}: {e}", r.id)))?;
        if by_name.insert(r.id.clone(), routes.len()).is_some() {
            return Err(Error::Map(format!("duplicate route id {}", r.id)));
        }
        routes.push(Route { name: r.id.clone(), class: r.class, geometry });
    }
    let resolve = |name: &str| -> Result<usize> {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Map(format!("unknown route {name}")))
    };

    // holder lookup from the declaration list, keyed by unordered pair
    let mut declared: HashMap<(usize, usize), usize> = HashMap::new();
    for p in &spec.priorities {
        let h = resolve(&p.holder)?;
        let y = resolve(&p.yields)?;
        if h == y {
            return Err(Error::Map(format!("route {} cannot yield to itself", p.holder)));
        }
        let key = (h.min(y), h.max(y));
        if let Some(&prev) = declared.get(&key) {
            if prev != h {
                return Err(Error::Map(format!(
                    "contradictory priority declarations for {} / {}",
                    p.holder, p.yields
                )));
            }
        }
        declared.insert(key, h);
    }

    // Pairs with explicit conflict overrides skip derivation.
    let mut skip_pairs: HashSet<(usize, usize)> = HashSet::new();
    for c in &spec.conflicts {
        let a = resolve(&c.a)?;
        let b = resolve(&c.b)?;
        skip_pairs.insert((a.min(b), a.max(b)));
    }

    let (mut conflicts, mut merges, prefixes) =
        derive::derive_all(&routes, spec.lane_width, &skip_pairs, |ia, ib| {
            declared
                .get(&(ia.min(ib), ia.max(ib)))
                .map(|&h| RouteId(h))
                .ok_or_else(|| {
                    Error::Map(format!(
                        "routes {} and {} conflict but no priority is declared",
                        routes[ia].name, routes[ib].name
                    ))
                })
        })?;

    for c in &spec.conflicts {
        let a = resolve(&c.a)?;
        let b = resolve(&c.b)?;
        let holder = resolve(&c.holder)?;
        conflicts.push(super::ConflictZone {
            route_a: RouteId(a),
            interval_a: (c.interval_a[0], c.interval_a[1]),
            route_b: RouteId(b),
            interval_b: (c.interval_b[0], c.interval_b[1]),
            priority_holder: RouteId(holder),
        });
    }
    for m in &spec.merges {
        let a = resolve(&m.a)?;
        let b = resolve(&m.b)?;
        merges.push(super::MergeRelation {
            route_a: RouteId(a),
            route_b: RouteId(b),
            start_a: m.start_a,
            start_b: m.start_b,
        });
    }

    // Resolve the point of guaranteed arrival per route.
    for (i, r) in routes.iter_mut().enumerate() {
        let pga = match spec.routes[i].pga {
            Some(p) => p,
            None => derive::derive_pga(RouteId(i), &r.geometry, &conflicts),
        };
        r.geometry
            .set_pga_s(pga)
            .map_err(|e| Error::Map(format!("route {}: {e}", r.name)))?;
    }

    IntersectionMap::assemble(spec.name.clone(), routes, conflicts, merges, prefixes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cross_spec() -> MapSpec {
        let line = |from: [f64; 2], to: [f64; 2]| -> Vec<[f64; 2]> {
            (0..=50)
                .map(|i| {
                    let t = i as f64 / 50.0;
                    [from[0] + t * (to[0] - from[0]), from[1] + t * (to[1] - from[1])]
                })
                .collect()
        };
        MapSpec {
            name: "cross".into(),
            lane_width: 3.5,
            routes: vec![
                RouteSpec {
                    id: "main".into(),
                    class: RoadClass::Main,
                    points: line([-50.0, 0.0], [50.0, 0.0]),
                    speed_limit: vec![[0.0, 13.89]],
                    stop_line: 42.0,
                    pga: None,
                },
                RouteSpec {
                    id: "side".into(),
                    class: RoadClass::Side,
                    points: line([0.0, -50.0], [0.0, 50.0]),
                    speed_limit: vec![[0.0, 8.33]],
                    stop_line: 42.0,
                    pga: None,
                },
            ],
            priorities: vec![PrioritySpec { holder: "main".into(), yields: "side".into() }],
            merges: vec![],
            conflicts: vec![],
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let spec = cross_spec();
        let text = map_to_toml(&spec).unwrap();
        let parsed: MapSpec = toml::from_str(&text).unwrap();
        let map = map_from_spec(&parsed).unwrap();
        assert_eq!(map.n_routes(), 2);
        assert_eq!(map.conflicts().len(), 1);
        let z = &map.conflicts()[0];
        assert_eq!(z.priority_holder, map.route_id("main").unwrap());
    }

    #[test]
    fn missing_priority_declaration_is_an_error() {
        let mut spec = cross_spec();
        spec.priorities.clear();
        let err = map_from_spec(&spec).unwrap_err();
        assert!(err.to_string().contains("no priority"), "{err}");
    }

    #[test]
    fn derived_pga_sits_past_the_conflict_exit() {
        let map = map_from_spec(&cross_spec()).unwrap();
        let side = map.route_id("side").unwrap();
        let zone = &map.conflicts()[0];
        let (own, _, _, _) = zone.from_perspective(side).unwrap();
        let pga = map.geometry(side).pga_s();
        assert!((pga - (own.1 + super::super::PGA_CLEARANCE)).abs() < 1e-9);
    }

    #[test]
    fn explicit_pga_override_wins() {
        let mut spec = cross_spec();
        spec.routes[1].pga = Some(70.0);
        let map = map_from_spec(&spec).unwrap();
        assert_eq!(map.geometry(map.route_id("side").unwrap()).pga_s(), 70.0);
    }

    #[test]
    fn yielding_relation_follows_declarations_until_exit() {
        let map = map_from_spec(&cross_spec()).unwrap();
        let main = map.route_id("main").unwrap();
        let side = map.route_id("side").unwrap();
        // Side before its zone, main before its zone: side yields.
        assert_eq!(
            map.conflict_partners(side, 30.0, main, 30.0).unwrap(),
            super::super::ConflictRelation::FirstYields
        );
        assert_eq!(
            map.conflict_partners(main, 30.0, side, 30.0).unwrap(),
            super::super::ConflictRelation::SecondYields
        );
        // Side past its conflict exit: resolved.
        let zone = &map.conflicts()[0];
        let (own, _, _, _) = zone.from_perspective(side).unwrap();
        assert_eq!(
            map.conflict_partners(side, own.1 + 0.1, main, 30.0).unwrap(),
            super::super::ConflictRelation::None
        );
        // Unknown route name is a domain error.
        assert!(map.conflict_partners_named("nope", 0.0, "main", 0.0).is_err());
    }
}
