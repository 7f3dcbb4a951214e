//! Scene grouping and the train/validation split.
//!
//! Tracks overlapping in time within one recording form a scene; the split
//! assigns whole scenes, so no track ever straddles the boundary.

use super::project::ProjectedTrack;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Partition track indices into scenes by transitive temporal overlap.
pub fn group_scenes(tracks: &[ProjectedTrack]) -> Vec<Vec<usize>> {
    let mut by_recording: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, t) in tracks.iter().enumerate() {
        by_recording.entry(t.recording_id).or_default().push(k);
    }
    let mut scenes = Vec::new();
    for (_rec, mut idxs) in by_recording {
        idxs.sort_by_key(|&k| tracks[k].start_step);
        let mut current: Vec<usize> = Vec::new();
        let mut current_end = 0usize;
        for k in idxs {
            if current.is_empty() || tracks[k].start_step <= current_end {
                current_end = current_end.max(tracks[k].end_step());
                current.push(k);
            } else {
                scenes.push(std::mem::take(&mut current));
                current.push(k);
                current_end = tracks[k].end_step();
            }
        }
        if !current.is_empty() {
            scenes.push(current);
        }
    }
    scenes
}

/// Deterministic scene-level split; returns (train, validation) track sets.
pub fn split(
    tracks: &[ProjectedTrack],
    ratio: f64,
    seed: u64,
) -> (Vec<ProjectedTrack>, Vec<ProjectedTrack>) {
    let mut scenes = group_scenes(tracks);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in (1..scenes.len()).rev() {
        let m = rng.random_range(0..=k);
        scenes.swap(k, m);
    }
    let n_train = (scenes.len() as f64 * ratio).round() as usize;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let target = if i < n_train { &mut train } else { &mut val };
        for &k in scene {
            target.push(tracks[k].clone());
        }
    }
    (train, val)
}
