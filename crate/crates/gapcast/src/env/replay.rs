//! Open-loop replay environment: one ego vehicle is advanced by the policy
//! while every other vehicle snaps to its recorded trajectory, entering and
//! leaving the scene as in the recording.

use super::closed_loop::AgentObs;
use crate::error::{Error, Result};
use crate::gap::{decide, GapModel};
use crate::map::{IntersectionMap, RouteId};
use crate::mlp::Workspace;
use crate::scenario::{driving_observation, Scenario, VehicleId, VehicleKind, VehicleState};
use std::sync::Arc;

/// One recorded vehicle, resampled onto the engine time grid.
#[derive(Debug, Clone)]
pub struct ReplayTrack {
    pub track_id: u64,
    pub route: RouteId,
    pub kind: VehicleKind,
    pub length: f64,
    pub width: f64,
    /// Step index on the scene grid at which the first sample is valid.
    pub start_step: usize,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
    /// Leading samples that are constant-velocity backfill; excluded from
    /// training and metrics.
    pub extrap_prefix: usize,
}

impl ReplayTrack {
    pub fn end_step(&self) -> usize {
        self.start_step + self.s.len()
    }

    /// (s, v) at a scene step, if the track is live there.
    pub fn state_at(&self, step: usize) -> Option<(f64, f64)> {
        if step < self.start_step || step >= self.end_step() {
            return None;
        }
        let k = step - self.start_step;
        Some((self.s[k], self.v[k]))
    }

    /// First step with a real (non-extrapolated) sample.
    pub fn first_real_step(&self) -> usize {
        self.start_step + self.extrap_prefix
    }

    pub fn is_extrapolated_at(&self, step: usize) -> bool {
        step < self.first_real_step()
    }
}

/// A group of tracks overlapping in time, on a shared step grid.
#[derive(Debug, Clone)]
pub struct ReplayScene {
    pub dt: f64,
    pub tracks: Vec<ReplayTrack>,
}

impl ReplayScene {
    pub fn n_steps(&self) -> usize {
        self.tracks.iter().map(ReplayTrack::end_step).max().unwrap_or(0)
    }

    /// Background vehicles live at `step`, excluding track `skip`.
    pub fn vehicles_at(&self, step: usize, skip: Option<usize>) -> Vec<VehicleState> {
        let mut out = Vec::new();
        for (k, t) in self.tracks.iter().enumerate() {
            if Some(k) == skip {
                continue;
            }
            if let Some((s, v)) = t.state_at(step) {
                out.push(VehicleState {
                    id: VehicleId(t.track_id),
                    route: t.route,
                    s,
                    v,
                    length: t.length,
                    width: t.width,
                    kind: t.kind,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ReplayStep {
    pub observation: Option<AgentObs>,
    pub done: bool,
}

/// Replay environment for a single designated ego vehicle.
pub struct ReplayEnv {
    map: Arc<IntersectionMap>,
    scene: Arc<ReplayScene>,
    gap_model: GapModel,
    ego_track: usize,
    step: usize,
    ego: VehicleState,
    latched: bool,
    done: bool,
    ws: Workspace,
}

impl ReplayEnv {
    /// Start an episode at the ego track's first real sample.
    pub fn new(
        map: Arc<IntersectionMap>,
        scene: Arc<ReplayScene>,
        ego_track: usize,
        gap_model: GapModel,
    ) -> Result<Self> {
        let track = scene
            .tracks
            .get(ego_track)
            .ok_or_else(|| Error::Env(format!("ego track {ego_track} out of range")))?;
        let start = track.first_real_step();
        let (done, ego) = match track.state_at(start) {
            Some((s, v)) => (
                false,
                VehicleState {
                    id: VehicleId(track.track_id),
                    route: track.route,
                    s,
                    v,
                    length: track.length,
                    width: track.width,
                    kind: track.kind,
                },
            ),
            // A trace with no real samples is done immediately.
            None => (
                true,
                VehicleState {
                    id: VehicleId(track.track_id),
                    route: track.route,
                    s: 0.0,
                    v: 0.0,
                    length: track.length,
                    width: track.width,
                    kind: track.kind,
                },
            ),
        };
        Ok(Self {
            map,
            scene,
            gap_model,
            ego_track,
            step: start,
            ego,
            latched: false,
            done,
            ws: Workspace::default(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn ego(&self) -> &VehicleState {
        &self.ego
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn dt(&self) -> f64 {
        self.scene.dt
    }

    fn scenario_now(&self) -> Scenario {
        let mut vehicles = vec![self.ego];
        vehicles.extend(self.scene.vehicles_at(self.step, Some(self.ego_track)));
        Scenario::new(vehicles)
    }

    /// Observation of the ego at the current step, with the latched gap rule.
    pub fn observation(&mut self) -> Result<Option<AgentObs>> {
        if self.done {
            return Ok(None);
        }
        let scenario = self.scenario_now();
        let past_stop = self.ego.s > self.map.geometry(self.ego.route).stop_line_s();
        let delta = if self.latched && past_stop {
            1
        } else {
            let d = decide(&self.map, &scenario, 0, &self.gap_model, &mut self.ws)?.delta;
            if d == 1 && past_stop {
                self.latched = true;
            }
            d
        };
        let observation = driving_observation(&self.map, &scenario, 0)?;
        Ok(Some(AgentObs { input: observation.to_input(delta), observation, delta }))
    }

    /// Integrate the ego with the policy action and advance the recording by
    /// one step. Done once the ego leaves its route or the recorded vehicle
    /// leaves the scene.
    pub fn step(&mut self, accel: f64) -> Result<ReplayStep> {
        if self.done {
            return Ok(ReplayStep { observation: None, done: true });
        }
        self.ego = super::integrate(&self.ego, accel, self.scene.dt);
        self.step += 1;
        let track = &self.scene.tracks[self.ego_track];
        if self.ego.s > self.map.geometry(self.ego.route).length() || self.step >= track.end_step()
        {
            self.done = true;
            return Ok(ReplayStep { observation: None, done: true });
        }
        let observation = self.observation()?;
        Ok(ReplayStep { observation, done: false })
    }
}
