//! Intersection geometry: arc-length-parameterized routes with stop lines,
//! conflict zones, speed limits and right-of-way relations.
//!
//! Everything here is immutable after construction and safe to share across
//! rollout workers.

mod builtin;
mod derive;
mod file;

pub use builtin::bendplatz;
pub use file::{load_map, map_from_spec, map_to_toml, MapSpec, RouteSpec};

use crate::error::{Error, Result};
use std::collections::HashMap;

pub const LANE_WIDTH: f64 = 3.5;
/// Clearance added past the last conflict exit when deriving the point of
/// guaranteed arrival.
pub const PGA_CLEARANCE: f64 = 2.0;

/// Index of a route within its [`IntersectionMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RouteId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadClass {
    Main,
    Side,
}

/// Piecewise-constant speed limit over arclength.
#[derive(Debug, Clone)]
pub struct SpeedProfile {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl SpeedProfile {
    pub fn new(segments: &[(f64, f64)]) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Map("speed profile needs at least one segment".into()));
        }
        if segments[0].0 != 0.0 {
            return Err(Error::Map("speed profile must start at arclength 0".into()));
        }
        let mut breaks = Vec::with_capacity(segments.len());
        let mut values = Vec::with_capacity(segments.len());
        for &(s, v) in segments {
            if let Some(&last) = breaks.last() {
                if s <= last {
                    return Err(Error::Map("speed profile breaks must increase".into()));
                }
            }
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Map(format!("speed limit must be positive, got {v}")));
            }
            breaks.push(s);
            values.push(v);
        }
        Ok(Self { breaks, values })
    }

    pub fn at(&self, s: f64) -> f64 {
        match self.breaks.binary_search_by(|b| b.partial_cmp(&s).unwrap()) {
            Ok(i) => self.values[i],
            Err(0) => self.values[0],
            Err(i) => self.values[i - 1],
        }
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::MIN, f64::max)
    }

    pub fn segments(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.breaks.iter().cloned().zip(self.values.iter().cloned())
    }
}

/// An arc-length-parameterized lane centerline.
#[derive(Debug, Clone)]
pub struct PathGeometry {
    points: Vec<[f64; 2]>,
    cum_s: Vec<f64>,
    /// Unwrapped (continuous) tangent headings per vertex.
    headings: Vec<f64>,
    speed_limit: SpeedProfile,
    stop_line_s: f64,
    pga_s: f64,
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    // Wrap to (-pi, pi].
    let mut a = a % (2.0 * std::f64::consts::PI);
    if a <= -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    } else if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    a
}

impl PathGeometry {
    /// Build from a polyline. The point of guaranteed arrival may be patched
    /// later by the map constructor once conflict zones are known.
    pub fn new(points: Vec<[f64; 2]>, speed_limit: SpeedProfile, stop_line_s: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Map("route needs at least two vertices".into()));
        }
        let mut cum_s = Vec::with_capacity(points.len());
        cum_s.push(0.0);
        for w in points.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            if d < 1e-9 {
                return Err(Error::Map("duplicate consecutive vertices".into()));
            }
            cum_s.push(cum_s.last().unwrap() + d);
        }
        let headings = vertex_headings(&points)?;
        let length = *cum_s.last().unwrap();
        if !(0.0..length).contains(&stop_line_s) {
            return Err(Error::Map(format!(
                "stop line at {stop_line_s} outside route of length {length}"
            )));
        }
        Ok(Self {
            points,
            cum_s,
            headings,
            speed_limit,
            // Placeholder until conflicts are known; still a valid interval.
            pga_s: length.min(stop_line_s + PGA_CLEARANCE).max(stop_line_s + 1e-6),
            stop_line_s,
        })
    }

    pub fn length(&self) -> f64 {
        *self.cum_s.last().unwrap()
    }

    pub fn stop_line_s(&self) -> f64 {
        self.stop_line_s
    }

    pub fn pga_s(&self) -> f64 {
        self.pga_s
    }

    pub(crate) fn set_pga_s(&mut self, pga: f64) -> Result<()> {
        if pga <= self.stop_line_s || pga > self.length() + 1e-9 {
            return Err(Error::Map(format!(
                "point of guaranteed arrival {pga} must lie in ({}, {}]",
                self.stop_line_s,
                self.length()
            )));
        }
        self.pga_s = pga.min(self.length());
        Ok(())
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn speed_limit(&self) -> &SpeedProfile {
        &self.speed_limit
    }

    pub fn speed_limit_at(&self, s: f64) -> f64 {
        self.speed_limit.at(s.clamp(0.0, self.length()))
    }

    fn segment_index(&self, s: f64) -> usize {
        match self.cum_s.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.cum_s.len() - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(self.cum_s.len() - 2),
        }
    }

    /// Planar position at arclength `s`, clamped to the path ends.
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_index(s);
        let t = (s - self.cum_s[i]) / (self.cum_s[i + 1] - self.cum_s[i]);
        [
            self.points[i][0] + t * (self.points[i + 1][0] - self.points[i][0]),
            self.points[i][1] + t * (self.points[i + 1][1] - self.points[i][1]),
        ]
    }

    /// Tangent heading at arclength `s` (clamped), linearly interpolated
    /// between vertices on the unwrapped heading sequence.
    pub fn heading_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_index(s);
        let t = (s - self.cum_s[i]) / (self.cum_s[i + 1] - self.cum_s[i]);
        self.headings[i] + t * (self.headings[i + 1] - self.headings[i])
    }

    /// Relative lane heading `offset` meters ahead (or behind, if negative),
    /// wrapped to (-pi, pi]. Offsets beyond the path ends clamp to the
    /// terminal vertices.
    pub fn heading_offset(&self, s: f64, offset: f64) -> Result<f64> {
        self.check_s(s)?;
        let there = self.heading_at((s + offset).clamp(0.0, self.length()));
        let here = self.heading_at(s);
        Ok(wrap_angle(there - here))
    }

    /// Signed distance to the stop line; negative once past it.
    pub fn distance_to_stop(&self, s: f64) -> Result<f64> {
        self.check_s(s)?;
        Ok(self.stop_line_s - s)
    }

    /// Signed distance to the point of guaranteed arrival.
    pub fn distance_to_pga(&self, s: f64) -> Result<f64> {
        self.check_s(s)?;
        Ok(self.pga_s - s)
    }

    fn check_s(&self, s: f64) -> Result<()> {
        if !s.is_finite() || s < 0.0 || s > self.length() {
            return Err(Error::Map(format!(
                "arclength {s} outside route of length {}",
                self.length()
            )));
        }
        Ok(())
    }

    /// Orthogonal projection of a planar point onto the centerline:
    /// (arclength of the nearest point, distance to it).
    pub fn project(&self, p: [f64; 2]) -> (f64, f64) {
        let mut best_d2 = f64::INFINITY;
        let mut best_s = 0.0;
        for (i, w) in self.points.windows(2).enumerate() {
            let (ax, ay) = (w[0][0], w[0][1]);
            let (dx, dy) = (w[1][0] - ax, w[1][1] - ay);
            let len2 = dx * dx + dy * dy;
            let t = (((p[0] - ax) * dx + (p[1] - ay) * dy) / len2).clamp(0.0, 1.0);
            let (cx, cy) = (ax + t * dx, ay + t * dy);
            let d2 = (p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy);
            if d2 < best_d2 {
                best_d2 = d2;
                best_s = self.cum_s[i] + t * (self.cum_s[i + 1] - self.cum_s[i]);
            }
        }
        (best_s, best_d2.sqrt())
    }

    /// Total absolute heading change along the path.
    pub fn total_turn(&self) -> f64 {
        (self.headings.last().unwrap() - self.headings[0]).abs()
    }
}

/// Vertex tangents: central differences in the interior (exact on circular
/// arcs), linear extrapolation at the ends, then unwrapped so interpolation
/// never crosses a 2-pi seam.
fn vertex_headings(points: &[[f64; 2]]) -> Result<Vec<f64>> {
    let n = points.len();
    let seg_dir = |i: usize| -> f64 {
        (points[i + 1][1] - points[i][1]).atan2(points[i + 1][0] - points[i][0])
    };
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let h = if i == 0 {
            if n >= 3 {
                let d0 = seg_dir(0);
                d0 + 0.5 * wrap_angle(d0 - seg_dir(1))
            } else {
                seg_dir(0)
            }
        } else if i == n - 1 {
            if n >= 3 {
                let d = seg_dir(n - 2);
                d + 0.5 * wrap_angle(d - seg_dir(n - 3))
            } else {
                seg_dir(n - 2)
            }
        } else {
            (points[i + 1][1] - points[i - 1][1]).atan2(points[i + 1][0] - points[i - 1][0])
        };
        raw.push(h);
    }
    // Unwrap.
    let mut headings = Vec::with_capacity(n);
    headings.push(raw[0]);
    for i in 1..n {
        let prev = *headings.last().unwrap();
        let step = wrap_angle(raw[i] - prev);
        if step.abs() > std::f64::consts::FRAC_PI_2 {
            return Err(Error::Map(format!(
                "heading kink of {step:.3} rad between vertices {i} and {}",
                i - 1
            )));
        }
        headings.push(prev + step);
    }
    Ok(headings)
}

/// Overlap of two routes where crossing or merging traffic would collide.
#[derive(Debug, Clone)]
pub struct ConflictZone {
    pub route_a: RouteId,
    /// [enter, exit] arclengths on route a.
    pub interval_a: (f64, f64),
    pub route_b: RouteId,
    pub interval_b: (f64, f64),
    /// Which of the two routes has right of way.
    pub priority_holder: RouteId,
}

impl ConflictZone {
    fn validate(&self) -> Result<()> {
        if self.interval_a.0 >= self.interval_a.1 || self.interval_b.0 >= self.interval_b.1 {
            return Err(Error::Map("conflict interval must have enter < exit".into()));
        }
        if self.priority_holder != self.route_a && self.priority_holder != self.route_b {
            return Err(Error::Map("priority holder must be one of the two routes".into()));
        }
        Ok(())
    }

    /// Orient the zone as seen from `route`: (own interval, other route, other
    /// interval, do we hold priority).
    pub fn from_perspective(&self, route: RouteId) -> Option<((f64, f64), RouteId, (f64, f64), bool)> {
        if route == self.route_a {
            Some((self.interval_a, self.route_b, self.interval_b, self.priority_holder == self.route_a))
        } else if route == self.route_b {
            Some((self.interval_b, self.route_a, self.interval_a, self.priority_holder == self.route_b))
        } else {
            None
        }
    }
}

/// Two routes sharing a downstream lane. Arclength `s >= start_a` on route a
/// corresponds to `s - start_a + start_b` on route b.
#[derive(Debug, Clone)]
pub struct MergeRelation {
    pub route_a: RouteId,
    pub route_b: RouteId,
    pub start_a: f64,
    pub start_b: f64,
}

/// Two routes sharing their entry lane up to a divergence point. While the
/// other vehicle is still before `end_b`, arclength `s` on route b maps to
/// `s - end_b + end_a` on route a. Vehicles queued on a shared approach are
/// leader and follower, whatever their later turn intentions.
#[derive(Debug, Clone)]
pub struct PrefixRelation {
    pub route_a: RouteId,
    pub route_b: RouteId,
    pub end_a: f64,
    pub end_b: f64,
}

/// Yielding relation between two vehicles as seen by the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConflictRelation {
    None,
    /// First queried vehicle yields to the second.
    FirstYields,
    /// Second queried vehicle yields to the first.
    SecondYields,
}

#[derive(Debug, Clone)]
pub struct Route {
    pub name: String,
    pub class: RoadClass,
    pub geometry: PathGeometry,
}

/// The full intersection: routes, conflict zones and merge relations.
#[derive(Debug, Clone)]
pub struct IntersectionMap {
    name: String,
    routes: Vec<Route>,
    by_name: HashMap<String, RouteId>,
    conflicts: Vec<ConflictZone>,
    /// Zones indexed by unordered route pair (lower index first).
    pair_index: HashMap<(usize, usize), Vec<usize>>,
    merges: Vec<MergeRelation>,
    /// Per route: (other route, start on self, start on other).
    merge_adj: Vec<Vec<(RouteId, f64, f64)>>,
    prefixes: Vec<PrefixRelation>,
    /// Per route: (other route, divergence on self, divergence on other).
    prefix_adj: Vec<Vec<(RouteId, f64, f64)>>,
}

impl IntersectionMap {
    pub(crate) fn assemble(
        name: String,
        routes: Vec<Route>,
        conflicts: Vec<ConflictZone>,
        merges: Vec<MergeRelation>,
        prefixes: Vec<PrefixRelation>,
    ) -> Result<Self> {
        let mut by_name = HashMap::new();
        for (i, r) in routes.iter().enumerate() {
            if by_name.insert(r.name.clone(), RouteId(i)).is_some() {
                return Err(Error::Map(format!("duplicate route id {}", r.name)));
            }
        }
        let mut pair_index: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (k, z) in conflicts.iter().enumerate() {
            z.validate()?;
            if z.route_a.0 >= routes.len() || z.route_b.0 >= routes.len() {
                return Err(Error::Map("conflict references unknown route".into()));
            }
            if z.route_a == z.route_b {
                return Err(Error::Map("conflict zone between a route and itself".into()));
            }
            let key = (z.route_a.0.min(z.route_b.0), z.route_a.0.max(z.route_b.0));
            pair_index.entry(key).or_default().push(k);
        }
        // All zones of one pair must agree on the holder, otherwise the
        // yielding relation would be ambiguous.
        for zones in pair_index.values() {
            let holder = conflicts[zones[0]].priority_holder;
            if zones.iter().any(|&k| conflicts[k].priority_holder != holder) {
                return Err(Error::Map("contradictory priority holders within one route pair".into()));
            }
        }
        let mut merge_adj = vec![Vec::new(); routes.len()];
        for m in &merges {
            if m.route_a.0 >= routes.len() || m.route_b.0 >= routes.len() {
                return Err(Error::Map("merge references unknown route".into()));
            }
            merge_adj[m.route_a.0].push((m.route_b, m.start_a, m.start_b));
            merge_adj[m.route_b.0].push((m.route_a, m.start_b, m.start_a));
        }
        for adj in &mut merge_adj {
            adj.sort_by(|a, b| a.0.cmp(&b.0));
        }
        let mut prefix_adj = vec![Vec::new(); routes.len()];
        for p in &prefixes {
            if p.route_a.0 >= routes.len() || p.route_b.0 >= routes.len() {
                return Err(Error::Map("prefix relation references unknown route".into()));
            }
            prefix_adj[p.route_a.0].push((p.route_b, p.end_a, p.end_b));
            prefix_adj[p.route_b.0].push((p.route_a, p.end_b, p.end_a));
        }
        for adj in &mut prefix_adj {
            adj.sort_by(|a, b| a.0.cmp(&b.0));
        }
        Ok(Self { name, routes, by_name, conflicts, pair_index, merges, merge_adj, prefixes, prefix_adj })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    pub fn n_routes(&self) -> usize {
        self.routes.len()
    }

    pub fn route(&self, id: RouteId) -> &Route {
        &self.routes[id.0]
    }

    pub fn geometry(&self, id: RouteId) -> &PathGeometry {
        &self.routes[id.0].geometry
    }

    pub fn route_id(&self, name: &str) -> Result<RouteId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Map(format!("unknown route {name}")))
    }

    pub fn conflicts(&self) -> &[ConflictZone] {
        &self.conflicts
    }

    pub fn merges(&self) -> &[MergeRelation] {
        &self.merges
    }

    pub fn merges_of(&self, route: RouteId) -> &[(RouteId, f64, f64)] {
        &self.merge_adj[route.0]
    }

    pub fn prefixes(&self) -> &[PrefixRelation] {
        &self.prefixes
    }

    pub fn prefixes_of(&self, route: RouteId) -> &[(RouteId, f64, f64)] {
        &self.prefix_adj[route.0]
    }

    pub fn conflict_zones_between(&self, a: RouteId, b: RouteId) -> impl Iterator<Item = &ConflictZone> {
        let key = (a.0.min(b.0), a.0.max(b.0));
        self.pair_index
            .get(&key)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
            .iter()
            .map(|&k| &self.conflicts[k])
    }

    /// Do the two routes share a downstream lane?
    pub fn is_merging_pair(&self, a: RouteId, b: RouteId) -> bool {
        self.merge_adj[a.0].iter().any(|&(other, _, _)| other == b)
    }

    /// The yielding relation of two vehicles, `None` once either has fully
    /// exited every shared conflict interval (the pair then interacts as
    /// plain leader/follower via the merge relations, if at all).
    pub fn conflict_partners(
        &self,
        route_i: RouteId,
        s_i: f64,
        route_j: RouteId,
        s_j: f64,
    ) -> Result<ConflictRelation> {
        if route_i.0 >= self.routes.len() {
            return Err(Error::Map(format!("unknown route index {}", route_i.0)));
        }
        if route_j.0 >= self.routes.len() {
            return Err(Error::Map(format!("unknown route index {}", route_j.0)));
        }
        if route_i == route_j {
            return Ok(ConflictRelation::None);
        }
        for zone in self.conflict_zones_between(route_i, route_j) {
            let (iv_i, _, iv_j, i_holds) = zone.from_perspective(route_i).unwrap();
            if s_i <= iv_i.1 && s_j <= iv_j.1 {
                return Ok(if i_holds {
                    ConflictRelation::SecondYields
                } else {
                    ConflictRelation::FirstYields
                });
            }
        }
        Ok(ConflictRelation::None)
    }

    /// Same query by route name; unknown names are a domain error.
    pub fn conflict_partners_named(
        &self,
        route_i: &str,
        s_i: f64,
        route_j: &str,
        s_j: f64,
    ) -> Result<ConflictRelation> {
        let ri = self.route_id(route_i)?;
        let rj = self.route_id(route_j)?;
        self.conflict_partners(ri, s_i, rj, s_j)
    }
}
