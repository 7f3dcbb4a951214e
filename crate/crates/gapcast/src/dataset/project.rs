//! Route assignment, filtering, resampling to the engine time grid, and
//! constant-velocity past-extrapolation.

use super::{AgentClass, TrackTable};
use crate::env::ReplayTrack;
use crate::error::Result;
use crate::map::{IntersectionMap, RouteId};
use crate::scenario::VehicleKind;
use serde::Serialize;
use std::collections::BTreeMap;

/// Engine time step the tracks are resampled to (s).
pub const GRID_DT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    Pedestrian,
    /// Scene overlapped a crossing pedestrian's activity window.
    PedestrianScene,
    /// Two same-route tracks swapped their order along the lane.
    Overtaking,
    /// No route within the matching tolerance.
    NoRoute,
    /// Empty or non-contiguous frame sequence.
    MalformedFrames,
}

#[derive(Debug, Clone, Default)]
pub struct ExclusionReport {
    pub excluded: Vec<(u32, u64, ExclusionReason)>,
    pub kept: usize,
    pub total: usize,
}

impl ExclusionReport {
    pub fn count(&self, reason: ExclusionReason) -> usize {
        self.excluded.iter().filter(|e| e.2 == reason).count()
    }

    pub fn summary(&self) -> String {
        let mut s = format!("tracks: {} total, {} kept, {} excluded\n", self.total, self.kept, self.excluded.len());
        for r in [
            ExclusionReason::Pedestrian,
            ExclusionReason::PedestrianScene,
            ExclusionReason::Overtaking,
            ExclusionReason::NoRoute,
            ExclusionReason::MalformedFrames,
        ] {
            s.push_str(&format!("  {:?}: {}\n", r, self.count(r)));
        }
        s
    }
}

/// A track projected onto its route, on the shared 0.2 s grid.
#[derive(Debug, Clone)]
pub struct ProjectedTrack {
    pub recording_id: u32,
    pub track_id: u64,
    pub route: RouteId,
    pub kind: VehicleKind,
    pub length: f64,
    pub width: f64,
    /// Step index of the first sample on the recording's grid.
    pub start_step: usize,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of leading constant-velocity samples prepended by
    /// [`extrapolate_past`]; never used as training or metric targets.
    pub extrap_prefix: usize,
}

impl ProjectedTrack {
    pub fn end_step(&self) -> usize {
        self.start_step + self.s.len()
    }

    pub fn state_at(&self, step: usize) -> Option<(f64, f64)> {
        if step < self.start_step || step >= self.end_step() {
            return None;
        }
        Some((self.s[step - self.start_step], self.v[step - self.start_step]))
    }

    pub fn first_real_step(&self) -> usize {
        self.start_step + self.extrap_prefix
    }

    pub fn is_extrapolated_at(&self, step: usize) -> bool {
        step < self.first_real_step()
    }

    pub fn to_replay_track(&self) -> ReplayTrack {
        ReplayTrack {
            track_id: self.track_id,
            route: self.route,
            kind: self.kind,
            length: self.length,
            width: self.width,
            start_step: self.start_step,
            s: self.s.clone(),
            v: self.v.clone(),
            extrap_prefix: self.extrap_prefix,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IngestConfig {
    /// Maximum mean projection distance for a route match (m).
    pub max_match_distance: f64,
    /// A pedestrian closer than this to any route is "crossing" (m).
    pub pedestrian_road_distance: f64,
    /// Exclusion window around a crossing pedestrian's presence (s).
    pub pedestrian_window: f64,
    /// Horizon of the constant-velocity past-extrapolation (s).
    pub extrapolation_horizon: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            max_match_distance: 5.0,
            pedestrian_road_distance: 2.0,
            pedestrian_window: 5.0,
            extrapolation_horizon: 6.0,
        }
    }
}

struct RawTrack {
    recording_id: u32,
    track_id: u64,
    class: AgentClass,
    length: f64,
    width: f64,
    /// (t seconds, x, y, speed), frame-contiguous.
    samples: Vec<(f64, f64, f64, f64)>,
}

fn collect_raw(table: &TrackTable) -> (Vec<RawTrack>, Vec<(u32, u64)>) {
    let mut grouped: BTreeMap<(u32, u64), Vec<&super::TrackRow>> = BTreeMap::new();
    for row in &table.rows {
        grouped.entry((row.recording_id, row.track_id)).or_default().push(row);
    }
    let mut tracks = Vec::new();
    let mut malformed = Vec::new();
    for ((rec, id), mut rows) in grouped {
        rows.sort_by_key(|r| r.frame);
        let contiguous = rows.windows(2).all(|w| w[1].frame == w[0].frame + 1);
        if rows.is_empty() || !contiguous {
            malformed.push((rec, id));
            continue;
        }
        tracks.push(RawTrack {
            recording_id: rec,
            track_id: id,
            class: rows[0].class,
            length: rows[0].length,
            width: rows[0].width,
            samples: rows
                .iter()
                .map(|r| (r.frame as f64 / table.frame_rate, r.x, r.y, r.speed))
                .collect(),
        });
    }
    (tracks, malformed)
}

/// Mean projection distance of a track onto one route.
fn mean_distance(track: &RawTrack, geom: &crate::map::PathGeometry) -> f64 {
    let mut acc = 0.0;
    for &(_, x, y, _) in &track.samples {
        acc += geom.project([x, y]).1;
    }
    acc / track.samples.len() as f64
}

/// Mean projection distance over the final samples: the exit-arm evidence.
fn tail_distance(track: &RawTrack, geom: &crate::map::PathGeometry) -> f64 {
    let tail = track.samples.len().min(10);
    let mut acc = 0.0;
    for &(_, x, y, _) in &track.samples[track.samples.len() - tail..] {
        acc += geom.project([x, y]).1;
    }
    acc / tail as f64
}

/// Assign the nearest route. Near-ties happen on shared approaches; they are
/// resolved by where the track eventually goes, and tracks that end before
/// diverging anywhere go to the straightest candidate.
fn assign_route(track: &RawTrack, map: &IntersectionMap, max_dist: f64) -> Option<RouteId> {
    let mut scored: Vec<(f64, usize)> = map
        .routes()
        .iter()
        .enumerate()
        .map(|(i, r)| (mean_distance(track, &r.geometry), i))
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let (best_d, best_i) = scored[0];
    if best_d > max_dist {
        return None;
    }
    let candidates: Vec<usize> = scored
        .iter()
        .take_while(|&&(d, _)| d <= best_d + 0.25)
        .map(|&(_, i)| i)
        .collect();
    if candidates.len() == 1 {
        return Some(RouteId(best_i));
    }
    let mut tails: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| (tail_distance(track, map.geometry(RouteId(i))), i))
        .collect();
    tails.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let (best_tail, best_tail_i) = tails[0];
    // Still tied at the end of the track: it never reached a divergence,
    // take the straightest candidate.
    let tied: Vec<usize> = tails
        .iter()
        .take_while(|&&(d, _)| d <= best_tail + 0.05)
        .map(|&(_, i)| i)
        .collect();
    if tied.len() == 1 {
        return Some(RouteId(best_tail_i));
    }
    let straightest = tied
        .into_iter()
        .min_by(|&a, &b| {
            map.geometry(RouteId(a))
                .total_turn()
                .partial_cmp(&map.geometry(RouteId(b)).total_turn())
                .unwrap()
        })
        .unwrap();
    Some(RouteId(straightest))
}

/// Project one raw track onto its route and resample onto the 0.2 s grid.
/// Longitudinal positions are made non-decreasing (projection jitter).
fn project_track(track: &RawTrack, map: &IntersectionMap, route: RouteId) -> Option<ProjectedTrack> {
    let geom = map.geometry(route);
    let t0 = track.samples[0].0;
    let t1 = track.samples.last().unwrap().0;
    let start_step = (t0 / GRID_DT).ceil() as usize;
    let end_step = (t1 / GRID_DT).floor() as usize;
    if end_step < start_step {
        return None;
    }
    let mut s_raw: Vec<f64> = track
        .samples
        .iter()
        .map(|&(_, x, y, _)| geom.project([x, y]).0)
        .collect();
    for k in 1..s_raw.len() {
        if s_raw[k] < s_raw[k - 1] {
            s_raw[k] = s_raw[k - 1];
        }
    }
    let mut s = Vec::with_capacity(end_step - start_step + 1);
    let mut v = Vec::with_capacity(end_step - start_step + 1);
    for step in start_step..=end_step {
        let t = step as f64 * GRID_DT;
        // Locate the raw interval containing t; samples are uniform in time.
        let rel = (t - t0) * (track.samples.len() - 1) as f64 / (t1 - t0).max(1e-12);
        let k = (rel.floor() as usize).min(track.samples.len() - 1);
        let k_next = (k + 1).min(track.samples.len() - 1);
        let frac = (rel - k as f64).clamp(0.0, 1.0);
        let sk = s_raw[k] + frac * (s_raw[k_next] - s_raw[k]);
        let vk = track.samples[k].3 + frac * (track.samples[k_next].3 - track.samples[k].3);
        s.push(sk.clamp(0.0, geom.length()));
        v.push(vk.max(0.0));
    }
    Some(ProjectedTrack {
        recording_id: track.recording_id,
        track_id: track.track_id,
        route,
        kind: track.class.to_vehicle_kind().unwrap_or(VehicleKind::Car),
        length: track.length,
        width: track.width,
        start_step,
        s,
        v,
        extrap_prefix: 0,
    })
}

/// Prepend a constant-velocity past over `horizon` seconds, truncated at the
/// route start. The prefix is flagged and stays out of training and metrics.
pub fn extrapolate_past(track: &ProjectedTrack, horizon: f64) -> ProjectedTrack {
    if track.s.is_empty() {
        return track.clone();
    }
    let v0 = track.v[0];
    let s0 = track.s[0];
    let max_steps = (horizon / GRID_DT).round() as usize;
    // Truncate where the extrapolated position would leave the route start,
    // and never earlier than the recording's own grid origin.
    let reachable = if v0 <= 1e-9 {
        max_steps
    } else {
        ((s0 / (v0 * GRID_DT)).floor() as usize).min(max_steps)
    };
    let prefix_len = reachable.min(track.start_step);
    if prefix_len == 0 {
        return track.clone();
    }
    let mut s = Vec::with_capacity(prefix_len + track.s.len());
    let mut v = Vec::with_capacity(prefix_len + track.v.len());
    for k in 0..prefix_len {
        let back = (prefix_len - k) as f64;
        s.push((s0 - v0 * back * GRID_DT).max(0.0));
        v.push(v0);
    }
    s.extend_from_slice(&track.s);
    v.extend_from_slice(&track.v);
    ProjectedTrack {
        start_step: track.start_step - prefix_len,
        s,
        v,
        extrap_prefix: prefix_len + track.extrap_prefix,
        ..track.clone()
    }
}

/// Full ingestion: route assignment, pedestrian and overtaking filters,
/// resampling, and past-extrapolation.
pub fn ingest(
    table: &TrackTable,
    map: &IntersectionMap,
    cfg: &IngestConfig,
) -> Result<(Vec<ProjectedTrack>, ExclusionReport)> {
    let (raw, malformed) = collect_raw(table);
    let mut report = ExclusionReport {
        total: raw.len() + malformed.len(),
        ..Default::default()
    };
    for (rec, id) in malformed {
        report.excluded.push((rec, id, ExclusionReason::MalformedFrames));
    }

    // Crossing-pedestrian windows per recording.
    let mut ped_windows: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for t in raw.iter().filter(|t| t.class == AgentClass::Pedestrian) {
        let crossing = t.samples.iter().any(|&(_, x, y, _)| {
            map.routes()
                .iter()
                .any(|r| r.geometry.project([x, y]).1 < cfg.pedestrian_road_distance)
        });
        if crossing {
            let t_min = t.samples[0].0 - cfg.pedestrian_window;
            let t_max = t.samples.last().unwrap().0 + cfg.pedestrian_window;
            ped_windows.entry(t.recording_id).or_default().push((t_min, t_max));
        }
    }

    let mut projected = Vec::new();
    for t in &raw {
        if t.class == AgentClass::Pedestrian {
            report.excluded.push((t.recording_id, t.track_id, ExclusionReason::Pedestrian));
            continue;
        }
        let overlaps_pedestrian = ped_windows.get(&t.recording_id).is_some_and(|ws| {
            let (a, b) = (t.samples[0].0, t.samples.last().unwrap().0);
            ws.iter().any(|&(lo, hi)| a <= hi && b >= lo)
        });
        if overlaps_pedestrian {
            report
                .excluded
                .push((t.recording_id, t.track_id, ExclusionReason::PedestrianScene));
            continue;
        }
        let Some(route) = assign_route(t, map, cfg.max_match_distance) else {
            report.excluded.push((t.recording_id, t.track_id, ExclusionReason::NoRoute));
            continue;
        };
        let Some(p) = project_track(t, map, route) else {
            report
                .excluded
                .push((t.recording_id, t.track_id, ExclusionReason::MalformedFrames));
            continue;
        };
        projected.push(p);
    }

    // Overtaking: two same-route tracks whose order along the lane swaps.
    let mut overtaking: Vec<usize> = Vec::new();
    for i in 0..projected.len() {
        for j in i + 1..projected.len() {
            let (a, b) = (&projected[i], &projected[j]);
            if a.recording_id != b.recording_id || a.route != b.route {
                continue;
            }
            let lo = a.start_step.max(b.start_step);
            let hi = a.end_step().min(b.end_step());
            if lo >= hi {
                continue;
            }
            let mut saw_ahead = 0i8;
            let mut swapped = false;
            for step in lo..hi {
                let (sa, _) = a.state_at(step).unwrap();
                let (sb, _) = b.state_at(step).unwrap();
                let now = if sa > sb { 1 } else { -1 };
                if saw_ahead == 0 {
                    saw_ahead = now;
                } else if now != saw_ahead {
                    swapped = true;
                    break;
                }
            }
            if swapped {
                overtaking.push(i);
                overtaking.push(j);
            }
        }
    }
    overtaking.sort_unstable();
    overtaking.dedup();
    for &k in overtaking.iter().rev() {
        let t = projected.remove(k);
        report
            .excluded
            .push((t.recording_id, t.track_id, ExclusionReason::Overtaking));
    }

    // Shift the global grid by the extrapolation horizon so prefixes of
    // tracks near the recording start still fit on the unsigned grid.
    let shift = grid_shift(cfg);
    let mut out: Vec<ProjectedTrack> = projected
        .iter()
        .map(|t| {
            let shifted = ProjectedTrack { start_step: t.start_step + shift, ..t.clone() };
            extrapolate_past(&shifted, cfg.extrapolation_horizon)
        })
        .collect();
    out.sort_by_key(|t| (t.recording_id, t.track_id));
    report.kept = out.len();
    Ok((out, report))
}

/// Number of grid steps ingestion shifts every track by (the extrapolation
/// headroom); raw frame `f` lands on grid step `f * grid/frame + shift`.
pub fn grid_shift(cfg: &IngestConfig) -> usize {
    (cfg.extrapolation_horizon / GRID_DT).round() as usize
}
