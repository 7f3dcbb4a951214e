//! Trajectory ingestion and synthesis: projecting drone-style track tables
//! onto map routes, the paper-style exclusion filters, past-extrapolation,
//! gap-label extraction, train/validation splitting, and a synthetic
//! generator so the full pipeline runs without licensed recordings.

mod labels;
mod project;
mod replay_io;
mod split;
mod synth;

pub use labels::{extract_gap_labels, read_labels, write_labels, LabelExtractConfig};
pub use project::{extrapolate_past, grid_shift, ingest, ExclusionReason, ExclusionReport, IngestConfig, ProjectedTrack};
pub use replay_io::{read_replay, write_replay};
pub use split::{group_scenes, split};
pub use synth::{synth_labels, synth_scenes, DecisionLog, KinematicGapRule, SynthConfig};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Agent classes appearing in raw recordings. Pedestrians never make it past
/// ingestion; bicycles are kept but flagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Car,
    Truck,
    Bicycle,
    Pedestrian,
}

impl AgentClass {
    pub fn to_vehicle_kind(self) -> Option<crate::scenario::VehicleKind> {
        use crate::scenario::VehicleKind;
        match self {
            AgentClass::Car => Some(VehicleKind::Car),
            AgentClass::Truck => Some(VehicleKind::Truck),
            AgentClass::Bicycle => Some(VehicleKind::Bicycle),
            AgentClass::Pedestrian => None,
        }
    }
}

/// One row of a raw track table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackRow {
    pub recording_id: u32,
    pub track_id: u64,
    pub frame: u64,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub class: AgentClass,
    pub length: f64,
    pub width: f64,
}

/// Raw trajectory table plus its frame rate.
#[derive(Debug, Clone)]
pub struct TrackTable {
    pub frame_rate: f64,
    pub rows: Vec<TrackRow>,
}

impl TrackTable {
    pub fn new(frame_rate: f64) -> Self {
        Self { frame_rate, rows: Vec::new() }
    }
}

/// Columns: recording_id,track_id,frame,x,y,speed,class,length,width.
pub fn write_tracks(table: &TrackTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Dataset(format!("write {}: {e}", path.display())))?;
    for row in &table.rows {
        w.serialize(row)
            .map_err(|e| Error::Dataset(format!("write {}: {e}", path.display())))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tracks(path: &Path, frame_rate: f64) -> Result<TrackTable> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Dataset(format!("read {}: {e}", path.display())))?;
    let mut table = TrackTable::new(frame_rate);
    for row in r.deserialize() {
        let row: TrackRow = row.map_err(|e| Error::Dataset(format!("read {}: {e}", path.display())))?;
        if row.speed < 0.0 || !row.speed.is_finite() {
            return Err(Error::Dataset(format!(
                "track {} frame {}: invalid speed",
                row.track_id, row.frame
            )));
        }
        table.rows.push(row);
    }
    Ok(table)
}
