//! Binary replay format for the open-loop environment: a manifest followed
//! by per-track arrays, little-endian, checksummed.
//!
//! Layout: magic `GCRP`, version u32, dt f64, scene count u32; per scene a
//! track count u32 and per track: id u64, route-name (u32 length + UTF-8),
//! kind u8, length f64, width f64, start_step u64, extrap_prefix u64,
//! sample count u64, then the s and v arrays (f64 each); finally an FNV-1a
//! 64 checksum over everything before it.

use crate::env::{ReplayScene, ReplayTrack};
use crate::error::{Error, Result};
use crate::map::IntersectionMap;
use crate::scenario::VehicleKind;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GCRP";
const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn kind_id(k: VehicleKind) -> u8 {
    match k {
        VehicleKind::Car => 0,
        VehicleKind::Truck => 1,
        VehicleKind::Bicycle => 2,
    }
}

fn kind_from_id(id: u8) -> Result<VehicleKind> {
    Ok(match id {
        0 => VehicleKind::Car,
        1 => VehicleKind::Truck,
        2 => VehicleKind::Bicycle,
        _ => return Err(Error::Dataset(format!("unknown vehicle kind id {id}"))),
    })
}

pub fn write_replay(scenes: &[ReplayScene], map: &IntersectionMap, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let dt = scenes.first().map(|s| s.dt).unwrap_or(0.2);
    buf.extend_from_slice(&dt.to_le_bytes());
    buf.extend_from_slice(&(scenes.len() as u32).to_le_bytes());
    for scene in scenes {
        if (scene.dt - dt).abs() > 1e-12 {
            return Err(Error::Dataset("scenes disagree on the time step".into()));
        }
        buf.extend_from_slice(&(scene.tracks.len() as u32).to_le_bytes());
        for t in &scene.tracks {
            buf.extend_from_slice(&t.track_id.to_le_bytes());
            let name = map.route(t.route).name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(kind_id(t.kind));
            buf.extend_from_slice(&t.length.to_le_bytes());
            buf.extend_from_slice(&t.width.to_le_bytes());
            buf.extend_from_slice(&(t.start_step as u64).to_le_bytes());
            buf.extend_from_slice(&(t.extrap_prefix as u64).to_le_bytes());
            buf.extend_from_slice(&(t.s.len() as u64).to_le_bytes());
            for &s in &t.s {
                buf.extend_from_slice(&s.to_le_bytes());
            }
            for &v in &t.v {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Dataset("replay file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_replay(path: &Path, map: &IntersectionMap) -> Result<Vec<ReplayScene>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 24 {
        return Err(Error::Dataset("replay file too short".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Dataset("replay file checksum mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Dataset("not a replay file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Dataset(format!("unsupported replay version {version}")));
    }
    let dt = c.f64()?;
    let n_scenes = c.u32()? as usize;
    let mut scenes = Vec::with_capacity(n_scenes);
    for _ in 0..n_scenes {
        let n_tracks = c.u32()? as usize;
        let mut tracks = Vec::with_capacity(n_tracks);
        for _ in 0..n_tracks {
            let track_id = c.u64()?;
            let name_len = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|e| Error::Dataset(format!("route name: {e}")))?
                .to_string();
            let route = map.route_id(&name)?;
            let kind = kind_from_id(c.u8()?)?;
            let length = c.f64()?;
            let width = c.f64()?;
            let start_step = c.u64()? as usize;
            let extrap_prefix = c.u64()? as usize;
            let n = c.u64()? as usize;
            if n > 10_000_000 {
                return Err(Error::Dataset("implausible track length".into()));
            }
            let mut s = Vec::with_capacity(n);
            for _ in 0..n {
                s.push(c.f64()?);
            }
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(c.f64()?);
            }
            tracks.push(ReplayTrack {
                track_id,
                route,
                kind,
                length,
                width,
                start_step,
                s,
                v,
                extrap_prefix,
            });
        }
        scenes.push(ReplayScene { dt, tracks });
    }
    if c.pos != body.len() {
        return Err(Error::Dataset("trailing bytes in replay file".into()));
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::bendplatz;

    #[test]
    fn replay_round_trips_bit_exact() {
        let map = bendplatz().unwrap();
        let we = map.route_id("we").unwrap();
        let sn = map.route_id("sn").unwrap();
        let scenes = vec![ReplayScene {
            dt: 0.2,
            tracks: vec![
                ReplayTrack {
                    track_id: 7,
                    route: we,
                    kind: VehicleKind::Car,
                    length: 4.5,
                    width: 2.0,
                    start_step: 3,
                    s: vec![1.0, 2.5, 4.25],
                    v: vec![5.0, 5.5, 6.0],
                    extrap_prefix: 1,
                },
                ReplayTrack {
                    track_id: 8,
                    route: sn,
                    kind: VehicleKind::Bicycle,
                    length: 1.8,
                    width: 0.8,
                    start_step: 0,
                    s: vec![10.0],
                    v: vec![3.0],
                    extrap_prefix: 0,
                },
            ],
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.bin");
        write_replay(&scenes, &map, &path).unwrap();
        let back = read_replay(&path, &map).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].tracks.len(), 2);
        assert_eq!(back[0].tracks[0].s[2].to_bits(), 4.25f64.to_bits());
        assert_eq!(back[0].tracks[1].kind, VehicleKind::Bicycle);
        assert_eq!(back[0].tracks[0].extrap_prefix, 1);
    }

    #[test]
    fn corruption_is_detected() {
        let map = bendplatz().unwrap();
        let scenes = vec![ReplayScene { dt: 0.2, tracks: vec![] }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.bin");
        write_replay(&scenes, &map, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[6] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_replay(&path, &map).is_err());
    }
}
