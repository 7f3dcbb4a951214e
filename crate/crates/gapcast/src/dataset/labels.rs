//! Gap-label extraction from projected tracks, and the tabular label file.

use super::project::ProjectedTrack;
use crate::env::brake_distance;
use crate::error::{Error, Result};
use crate::gap::GapLabel;
use crate::map::{ConflictRelation, IntersectionMap, RouteId};
use crate::scenario::GapObservation;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub struct LabelExtractConfig {
    /// Samples with a braking-adjusted lead gap below this are considered
    /// blocked by a lead vehicle and dropped.
    pub lead_block_distance: f64,
}

impl Default for LabelExtractConfig {
    fn default() -> Self {
        Self { lead_block_distance: 10.0 }
    }
}

/// First step at which a track sits past an arclength threshold.
fn first_step_past(track: &ProjectedTrack, threshold: f64) -> Option<usize> {
    track
        .s
        .iter()
        .position(|&s| s > threshold)
        .map(|k| track.start_step + k)
}

/// Entry arclength of the earliest conflict zone of `route` against `other`.
fn conflict_entry(map: &IntersectionMap, route: RouteId, other: RouteId) -> Option<f64> {
    map.conflict_zones_between(route, other)
        .filter_map(|z| z.from_perspective(other).map(|(own, _, _, _)| own.0))
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}

/// Bumper-to-bumper lead gap of track `i` at `step` among the other tracks,
/// across all lane relations. Mirrors the scenario-level query.
fn lead_gap_at(
    map: &IntersectionMap,
    tracks: &[ProjectedTrack],
    i: usize,
    step: usize,
) -> Option<f64> {
    let me = &tracks[i];
    let (s_i, v_i) = me.state_at(step)?;
    let me_state = track_state(me, s_i, v_i);
    let mut best: Option<f64> = None;
    for (j, other) in tracks.iter().enumerate() {
        if j == i || other.recording_id != me.recording_id {
            continue;
        }
        let Some((s_j, v_j)) = other.state_at(step) else { continue };
        let Some(delta_center) =
            crate::scenario::same_lane_distance(map, &me_state, &track_state(other, s_j, v_j))
        else {
            continue;
        };
        if delta_center <= 0.0 {
            continue;
        }
        let gap = delta_center - 0.5 * (me.length + other.length);
        if best.map_or(true, |g| gap < g) {
            best = Some(gap);
        }
    }
    best
}

fn track_state(t: &ProjectedTrack, s: f64, v: f64) -> crate::scenario::VehicleState {
    crate::scenario::VehicleState {
        id: crate::scenario::VehicleId(t.track_id),
        route: t.route,
        s,
        v,
        length: t.length,
        width: t.width,
        kind: t.kind,
    }
}

/// Per frame and per yielding/prioritized conflict pair, the gap observation
/// with the ground-truth flag of whether the yielding vehicle entered the
/// intersection before all its currently conflicting prioritized vehicles.
///
/// Bicycles are observed as prioritized partners but produce no samples of
/// their own; extrapolated frames and lead-blocked frames are dropped.
pub fn extract_gap_labels(
    map: &IntersectionMap,
    tracks: &[ProjectedTrack],
    cfg: &LabelExtractConfig,
) -> Result<Vec<GapLabel>> {
    let mut by_recording: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, t) in tracks.iter().enumerate() {
        by_recording.entry(t.recording_id).or_default().push(k);
    }
    let mut labels = Vec::new();
    for (_rec, idxs) in by_recording {
        // Cache: first step at which track j enters its conflict zone with a
        // given other route.
        let mut entry_cache: BTreeMap<(usize, usize), Option<usize>> = BTreeMap::new();
        for &i in &idxs {
            let ti = &tracks[i];
            if !ti.kind.in_metrics() {
                continue;
            }
            let geom_i = map.geometry(ti.route);
            let stop_i = geom_i.stop_line_s();
            let t_cross_i = first_step_past(ti, stop_i);
            for step in ti.first_real_step()..ti.end_step() {
                let (s_i, v_i) = ti.state_at(step).unwrap();
                // Conflicting prioritized partners at this frame.
                let mut partners: Vec<usize> = Vec::new();
                for &j in &idxs {
                    if j == i {
                        continue;
                    }
                    let tj = &tracks[j];
                    let Some((s_j, _)) = tj.state_at(step) else { continue };
                    if map.conflict_partners(ti.route, s_i, tj.route, s_j)?
                        == ConflictRelation::FirstYields
                    {
                        partners.push(j);
                    }
                }
                if partners.is_empty() {
                    continue;
                }
                // Lead-blocked yielding vehicles carry no decision signal.
                if let Some(gap) = lead_gap_at(map, tracks, i, step) {
                    if gap - brake_distance(v_i) < cfg.lead_block_distance {
                        continue;
                    }
                }
                // Did i cross before every currently conflicting partner
                // entered its shared conflict zone?
                let mut delta_gt = t_cross_i.is_some() as u8;
                if let Some(tc) = t_cross_i {
                    for &j in &partners {
                        let tj = &tracks[j];
                        let enter = entry_cache.entry((j, ti.route.0)).or_insert_with(|| {
                            conflict_entry(map, ti.route, tj.route)
                                .and_then(|thr| first_step_past(tj, thr))
                        });
                        if let Some(te) = *enter {
                            if te < tc {
                                delta_gt = 0;
                                break;
                            }
                        }
                    }
                }
                for &j in &partners {
                    let tj = &tracks[j];
                    let (s_j, v_j) = tj.state_at(step).unwrap();
                    labels.push(GapLabel {
                        observation: GapObservation {
                            d_pga_i: geom_i.distance_to_pga(s_i.min(geom_i.length()))?,
                            v_i,
                            d_stop_j: map
                                .geometry(tj.route)
                                .distance_to_stop(s_j.min(map.geometry(tj.route).length()))?,
                            v_j,
                        },
                        delta_gt,
                    });
                }
            }
        }
    }
    Ok(labels)
}

/// Columns: d_pga_i,v_i,d_stop_j,v_j,delta_gt.
pub fn write_labels(labels: &[GapLabel], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Dataset(format!("write {}: {e}", path.display())))?;
    w.write_record(["d_pga_i", "v_i", "d_stop_j", "v_j", "delta_gt"])
        .map_err(|e| Error::Dataset(e.to_string()))?;
    for l in labels {
        let o = &l.observation;
        w.write_record([
            o.d_pga_i.to_string(),
            o.v_i.to_string(),
            o.d_stop_j.to_string(),
            o.v_j.to_string(),
            l.delta_gt.to_string(),
        ])
        .map_err(|e| Error::Dataset(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<GapLabel>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Dataset(format!("read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Dataset(e.to_string()))?;
        if rec.len() != 5 {
            return Err(Error::Dataset(format!("label row has {} fields, expected 5", rec.len())));
        }
        let f = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|e| Error::Dataset(format!("label field {k}: {e}")))
        };
        let delta: u8 = rec[4]
            .parse()
            .map_err(|e| Error::Dataset(format!("label flag: {e}")))?;
        if delta > 1 {
            return Err(Error::Dataset(format!("label flag must be 0/1, got {delta}")));
        }
        out.push(GapLabel {
            observation: GapObservation { d_pga_i: f(0)?, v_i: f(1)?, d_stop_j: f(2)?, v_j: f(3)? },
            delta_gt: delta,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::bendplatz;
    use crate::scenario::VehicleKind;

    /// A yielding side-road track and a prioritized main-road track with
    /// controllable crossing times.
    fn two_track_fixture(
        map: &IntersectionMap,
        side_crosses_at: Option<usize>,
        main_enters_at: usize,
    ) -> Vec<ProjectedTrack> {
        let sn = map.route_id("sn").unwrap();
        let we = map.route_id("we").unwrap();
        let stop_sn = map.geometry(sn).stop_line_s();
        let entry_we = conflict_entry(map, sn, we).unwrap();
        let n = 60usize;
        // Side vehicle: approaches the stop line, crossing it at the given
        // step (or never).
        let mut s_side = Vec::with_capacity(n);
        for k in 0..n {
            let s = match side_crosses_at {
                Some(tc) => {
                    if k < tc {
                        stop_sn - 2.0 * (tc - k) as f64 * 0.2
                    } else {
                        stop_sn + 2.0 * (k - tc + 1) as f64 * 0.2
                    }
                }
                None => stop_sn - 5.0,
            };
            s_side.push(s.max(0.0));
        }
        // Main vehicle: enters its conflict zone with the side road at step
        // main_enters_at, moving at a constant 10 m/s.
        let mut s_main = Vec::with_capacity(n);
        for k in 0..n {
            s_main.push(entry_we + 10.0 * 0.2 * (k as f64 - main_enters_at as f64));
        }
        vec![
            ProjectedTrack {
                recording_id: 0,
                track_id: 1,
                route: sn,
                kind: VehicleKind::Car,
                length: 4.0,
                width: 2.0,
                start_step: 0,
                s: s_side,
                v: vec![2.0; n],
                extrap_prefix: 0,
            },
            ProjectedTrack {
                recording_id: 0,
                track_id: 2,
                route: we,
                kind: VehicleKind::Car,
                length: 4.0,
                width: 2.0,
                start_step: 0,
                s: s_main.iter().map(|&s| s.clamp(0.0, map.geometry(we).length())).collect(),
                v: vec![10.0; n],
                extrap_prefix: 0,
            },
        ]
    }

    #[test]
    fn crossing_first_labels_one() {
        let map = bendplatz().unwrap();
        let tracks = two_track_fixture(&map, Some(10), 40);
        let labels = extract_gap_labels(&map, &tracks, &LabelExtractConfig::default()).unwrap();
        assert!(!labels.is_empty());
        assert!(labels.iter().all(|l| l.delta_gt == 1), "side crossed first");
    }

    #[test]
    fn waiting_labels_zero() {
        let map = bendplatz().unwrap();
        let tracks = two_track_fixture(&map, Some(50), 20);
        let labels = extract_gap_labels(&map, &tracks, &LabelExtractConfig::default()).unwrap();
        assert!(!labels.is_empty());
        assert!(labels.iter().all(|l| l.delta_gt == 0), "main entered first");
    }

    #[test]
    fn never_crossing_labels_zero() {
        let map = bendplatz().unwrap();
        let tracks = two_track_fixture(&map, None, 40);
        let labels = extract_gap_labels(&map, &tracks, &LabelExtractConfig::default()).unwrap();
        assert!(!labels.is_empty());
        assert!(labels.iter().all(|l| l.delta_gt == 0));
    }

    #[test]
    fn label_count_matches_brute_force_frame_scan() {
        let map = bendplatz().unwrap();
        let tracks = two_track_fixture(&map, Some(10), 40);
        let labels = extract_gap_labels(&map, &tracks, &LabelExtractConfig::default()).unwrap();
        // Brute force: count frames where the pair is in a yielding relation
        // (the fixture has no leads, no extrapolated prefix, one pair).
        let (side, main) = (&tracks[0], &tracks[1]);
        let mut expected = 0;
        for step in 0..side.end_step().min(main.end_step()) {
            let (s_i, _) = side.state_at(step).unwrap();
            let (s_j, _) = main.state_at(step).unwrap();
            if map
                .conflict_partners(side.route, s_i, main.route, s_j)
                .unwrap()
                == ConflictRelation::FirstYields
            {
                expected += 1;
            }
        }
        assert_eq!(labels.len(), expected);
        assert!(expected > 0);
    }

    #[test]
    fn extrapolated_frames_of_the_yielding_vehicle_are_skipped() {
        let map = bendplatz().unwrap();
        let mut tracks = two_track_fixture(&map, Some(10), 40);
        let without: usize =
            extract_gap_labels(&map, &tracks, &LabelExtractConfig::default()).unwrap().len();
        tracks[0].extrap_prefix = 5;
        let with: usize =
            extract_gap_labels(&map, &tracks, &LabelExtractConfig::default()).unwrap().len();
        assert!(with < without);
    }

    #[test]
    fn bicycles_produce_no_samples_but_count_as_partners() {
        let map = bendplatz().unwrap();
        let mut tracks = two_track_fixture(&map, Some(10), 40);
        tracks[0].kind = VehicleKind::Bicycle;
        let labels = extract_gap_labels(&map, &tracks, &LabelExtractConfig::default()).unwrap();
        assert!(labels.is_empty(), "bicycle as the yielding vehicle is excluded");
    }

    #[test]
    fn label_file_round_trips() {
        let labels = vec![
            GapLabel {
                observation: GapObservation { d_pga_i: 20.0, v_i: 0.0, d_stop_j: 55.5, v_j: 12.25 },
                delta_gt: 1,
            },
            GapLabel {
                observation: GapObservation { d_pga_i: 18.0, v_i: 3.5, d_stop_j: 10.0, v_j: 14.0 },
                delta_gt: 0,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        write_labels(&labels, &path).unwrap();
        let back = read_labels(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].observation.d_stop_j, 55.5);
        assert_eq!(back[1].delta_gt, 0);
    }
}
