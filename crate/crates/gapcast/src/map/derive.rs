//! Geometric derivation of merge relations and conflict zones.
//!
//! Conflict zones are the regions where two route centerlines, inflated by
//! half a lane width each, overlap. Overlaps contiguous with a shared entry
//! lane are leader/follower territory rather than conflicts, and overlaps
//! that run into a shared exit lane are cut shortly after the join so that a
//! merged vehicle stops being a "conflict" and becomes a plain lead.

use super::{ConflictZone, MergeRelation, PathGeometry, PrefixRelation, Route, RouteId};

/// Sampling step for the overlap scans.
const SCAN_STEP: f64 = 0.25;
/// Two centerlines closer than this are on the same physical lane.
const SAME_LANE_DIST: f64 = 0.3;
/// How far past the geometric join a merge still counts as a conflict.
const MERGE_TAIL: f64 = 5.0;

/// Distance from a point to a polyline.
fn dist_to_polyline(p: [f64; 2], pts: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for w in pts.windows(2) {
        let (ax, ay) = (w[0][0], w[0][1]);
        let (bx, by) = (w[1][0], w[1][1]);
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p[0] - ax) * dx + (p[1] - ay) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (ax + t * dx, ay + t * dy);
        let d2 = (p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy);
        if d2 < best {
            best = d2;
        }
    }
    best.sqrt()
}

/// Arclength on `path` of the point nearest to `p`.
fn project_arclength(p: [f64; 2], path: &PathGeometry) -> f64 {
    let pts = path.points();
    let mut best = f64::INFINITY;
    let mut best_s = 0.0;
    let mut s0 = 0.0;
    for w in pts.windows(2) {
        let (ax, ay) = (w[0][0], w[0][1]);
        let (bx, by) = (w[1][0], w[1][1]);
        let (dx, dy) = (bx - ax, by - ay);
        let len = (dx * dx + dy * dy).sqrt();
        let t = if len > 0.0 {
            (((p[0] - ax) * dx + (p[1] - ay) * dy) / (len * len)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (ax + t * dx, ay + t * dy);
        let d2 = (p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy);
        if d2 < best {
            best = d2;
            best_s = s0 + t * len;
        }
        s0 += len;
    }
    best_s
}

/// Contiguous runs of arclength on `a` where the distance to `b` stays below
/// `thresh`, as (start, end) pairs.
fn proximity_runs(a: &PathGeometry, b: &PathGeometry, thresh: f64) -> Vec<(f64, f64)> {
    let len = a.length();
    let n = (len / SCAN_STEP).ceil() as usize;
    let mut runs = Vec::new();
    let mut current: Option<(f64, f64)> = None;
    for i in 0..=n {
        let s = (i as f64 * SCAN_STEP).min(len);
        let inside = dist_to_polyline(a.point_at(s), b.points()) < thresh;
        match (inside, current) {
            (true, None) => current = Some((s, s)),
            (true, Some((start, _))) => current = Some((start, s)),
            (false, Some(run)) => {
                runs.push(run);
                current = None;
            }
            (false, None) => {}
        }
    }
    if let Some(run) = current {
        runs.push(run);
    }
    runs
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PairTopology {
    /// End of a shared entry lane on (a, b), if any.
    pub shared_prefix: Option<(f64, f64)>,
    /// Start of a shared exit lane on (a, b), if any.
    pub shared_suffix: Option<(f64, f64)>,
}

/// Detect shared entry/exit lanes between two routes via a tight scan.
pub(crate) fn pair_topology(a: &PathGeometry, b: &PathGeometry) -> PairTopology {
    let runs = proximity_runs(a, b, SAME_LANE_DIST);
    let mut shared_prefix = None;
    let mut shared_suffix = None;
    for &(start, end) in &runs {
        if end - start < 2.0 {
            continue; // brief brushes are not shared lanes
        }
        let starts_at_origin = start <= SCAN_STEP * 1.5;
        let ends_at_tail = end >= a.length() - SCAN_STEP * 1.5;
        if starts_at_origin {
            let b_at_start = project_arclength(a.point_at(start), b);
            // A shared entry begins at the origin of both routes.
            if b_at_start <= 1.0 {
                shared_prefix = Some((end, project_arclength(a.point_at(end), b)));
                continue;
            }
        }
        if ends_at_tail {
            let b_at_end = project_arclength(a.point_at(end), b);
            if b_at_end >= b.length() - 1.0 {
                shared_suffix = Some((start, project_arclength(a.point_at(start), b)));
            }
        }
    }
    PairTopology { shared_prefix, shared_suffix }
}

pub(crate) struct DerivedPair {
    /// (interval on a, interval on b) per conflict zone.
    pub zones: Vec<((f64, f64), (f64, f64))>,
    pub merge: Option<MergeRelation>,
    pub prefix: Option<PrefixRelation>,
}

/// Derive the conflict zones and merge relation (if any) for one route pair.
///
/// The interval on each route comes from scanning that route against the
/// other (projecting one route's run endpoints onto the other collapses for
/// perpendicular crossings); runs are then matched up via the midpoint.
pub(crate) fn derive_pair(
    ra: RouteId,
    a: &PathGeometry,
    rb: RouteId,
    b: &PathGeometry,
    lane_width: f64,
) -> DerivedPair {
    let topo = pair_topology(a, b);
    // Strict inequality keeps exactly-parallel opposite lanes apart.
    let thresh = lane_width - 0.01;
    let runs_a = proximity_runs(a, b, thresh);
    let runs_b = proximity_runs(b, a, thresh);
    let mut zones = Vec::new();
    for &(start_a, end_a) in &runs_a {
        // Overlap around a shared entry is same-lane following, not conflict.
        if let Some((prefix_a, _)) = topo.shared_prefix {
            if start_a <= prefix_a + 1.0 {
                continue;
            }
        }
        let mid = a.point_at(0.5 * (start_a + end_a));
        let s_mid_b = project_arclength(mid, b);
        let Some(&(start_b, end_b)) = runs_b
            .iter()
            .find(|&&(s, e)| s_mid_b >= s - 0.5 && s_mid_b <= e + 0.5)
        else {
            continue;
        };
        let mut end_a = end_a;
        let mut end_b = end_b;
        if let Some((join_a, join_b)) = topo.shared_suffix {
            if end_a >= join_a - 1.0 {
                // Merging pair: the conflict ends shortly after the join.
                end_a = (join_a + MERGE_TAIL).min(a.length());
                end_b = (join_b + MERGE_TAIL).min(b.length());
            }
        }
        if end_a - start_a > 1e-6 && end_b - start_b > 1e-6 {
            zones.push(((start_a, end_a), (start_b, end_b)));
        }
    }
    let merge = topo.shared_suffix.map(|(ja, jb)| MergeRelation {
        route_a: ra,
        route_b: rb,
        start_a: ja,
        start_b: jb,
    });
    let prefix = topo.shared_prefix.map(|(pa, pb)| PrefixRelation {
        route_a: ra,
        route_b: rb,
        end_a: pa,
        end_b: pb,
    });
    DerivedPair { zones, merge, prefix }
}

/// Derive zones and merges for every route pair. `holder_of` resolves the
/// declared right of way for a conflicting pair; pairs with explicit zone
/// overrides are skipped.
pub(crate) fn derive_all(
    routes: &[Route],
    lane_width: f64,
    skip_pairs: &std::collections::HashSet<(usize, usize)>,
    mut holder_of: impl FnMut(usize, usize) -> crate::error::Result<RouteId>,
) -> crate::error::Result<(Vec<ConflictZone>, Vec<MergeRelation>, Vec<PrefixRelation>)> {
    let mut conflicts = Vec::new();
    let mut merges = Vec::new();
    let mut prefixes = Vec::new();
    for ia in 0..routes.len() {
        for ib in ia + 1..routes.len() {
            let derived = derive_pair(
                RouteId(ia),
                &routes[ia].geometry,
                RouteId(ib),
                &routes[ib].geometry,
                lane_width,
            );
            if let Some(m) = derived.merge {
                merges.push(m);
            }
            if let Some(p) = derived.prefix {
                prefixes.push(p);
            }
            if skip_pairs.contains(&(ia, ib)) {
                continue;
            }
            if derived.zones.is_empty() {
                continue;
            }
            let holder = holder_of(ia, ib)?;
            for (iv_a, iv_b) in derived.zones {
                conflicts.push(ConflictZone {
                    route_a: RouteId(ia),
                    interval_a: iv_a,
                    route_b: RouteId(ib),
                    interval_b: iv_b,
                    priority_holder: holder,
                });
            }
        }
    }
    Ok((conflicts, merges, prefixes))
}

/// Point of guaranteed arrival: past the last conflict exit plus clearance.
pub(crate) fn derive_pga(route: RouteId, geometry: &PathGeometry, conflicts: &[ConflictZone]) -> f64 {
    let mut max_exit: Option<f64> = None;
    for z in conflicts {
        if let Some((own, _, _, _)) = z.from_perspective(route) {
            max_exit = Some(max_exit.map_or(own.1, |m: f64| m.max(own.1)));
        }
    }
    let pga = match max_exit {
        Some(exit) => exit + super::PGA_CLEARANCE,
        None => geometry.stop_line_s() + super::PGA_CLEARANCE,
    };
    pga.min(geometry.length())
}
