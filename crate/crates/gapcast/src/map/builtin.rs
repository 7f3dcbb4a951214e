//! Bundled example intersection: a priority main road crossed by a stop-
//! controlled side road, with all twelve turn routes. The main road extends
//! 150 m and the side road 70 m on each side of the intersection; speed
//! limits are 50 km/h on the main road and 30 km/h on the side road.
//!
//! The geometry reproduces the topology of a typical urban four-arm layout,
//! not survey-grade coordinates.

use super::file::{MapSpec, PrioritySpec, RouteSpec};
use super::{IntersectionMap, RoadClass};
use crate::error::Result;

const MAIN_ARM: f64 = 150.0;
const SIDE_ARM: f64 = 70.0;
/// Half-extent of the intersection box; stop lines sit on its edge.
const BOX: f64 = 8.0;
const LANE_OFF: f64 = 1.75;
const V_MAIN: f64 = 13.89; // 50 km/h
const V_SIDE: f64 = 8.33; // 30 km/h
const RIGHT_RADIUS: f64 = 4.5;
const LEFT_RADIUS: f64 = 8.0;
const STRAIGHT_STEP: f64 = 2.0;
const ARC_STEP: f64 = 0.5;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Arm {
    West,
    South,
    East,
    North,
}

impl Arm {
    fn letter(self) -> char {
        match self {
            Arm::West => 'w',
            Arm::South => 's',
            Arm::East => 'e',
            Arm::North => 'n',
        }
    }

    fn class(self) -> RoadClass {
        match self {
            Arm::West | Arm::East => RoadClass::Main,
            Arm::North | Arm::South => RoadClass::Side,
        }
    }

    fn length(self) -> f64 {
        match self.class() {
            RoadClass::Main => MAIN_ARM,
            RoadClass::Side => SIDE_ARM,
        }
    }

    fn limit(self) -> f64 {
        match self.class() {
            RoadClass::Main => V_MAIN,
            RoadClass::Side => V_SIDE,
        }
    }

    /// Quarter turns from the canonical west entry.
    fn rotation(self) -> usize {
        match self {
            Arm::West => 0,
            Arm::South => 1,
            Arm::East => 2,
            Arm::North => 3,
        }
    }
}

#[derive(Clone, Copy)]
enum Turn {
    Straight,
    Left,
    Right,
}

impl Turn {
    fn exit_from(self, entry: Arm) -> Arm {
        // Canonical west entry: straight exits east, left exits north,
        // right exits south; rotations permute the arms consistently.
        let canonical = match self {
            Turn::Straight => Arm::East,
            Turn::Left => Arm::North,
            Turn::Right => Arm::South,
        };
        rotate_arm(canonical, entry.rotation())
    }
}

fn rotate_arm(arm: Arm, quarter_turns: usize) -> Arm {
    // One quarter turn maps W->S->E->N->W (the same rotation applied to
    // points maps the west arm onto the south arm).
    let order = [Arm::West, Arm::South, Arm::East, Arm::North];
    let idx = order.iter().position(|a| *a == arm).unwrap();
    order[(idx + quarter_turns) % 4]
}

/// Exact rotation by multiples of 90 degrees.
fn rotate_point(p: [f64; 2], quarter_turns: usize) -> [f64; 2] {
    match quarter_turns % 4 {
        0 => p,
        1 => [-p[1], p[0]],
        2 => [-p[0], -p[1]],
        _ => [p[1], -p[0]],
    }
}

struct PolyBuilder {
    points: Vec<[f64; 2]>,
}

impl PolyBuilder {
    fn new() -> Self {
        Self { points: Vec::new() }
    }

    fn push(&mut self, p: [f64; 2]) {
        if let Some(last) = self.points.last() {
            if (last[0] - p[0]).abs() < 1e-9 && (last[1] - p[1]).abs() < 1e-9 {
                return;
            }
        }
        self.points.push(p);
    }

    fn line(&mut self, from: [f64; 2], to: [f64; 2], step: f64) {
        let d = ((to[0] - from[0]).powi(2) + (to[1] - from[1]).powi(2)).sqrt();
        let n = (d / step).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            self.push([from[0] + t * (to[0] - from[0]), from[1] + t * (to[1] - from[1])]);
        }
    }

    /// Circular arc around `center` from `a0` to `a1` radians.
    fn arc(&mut self, center: [f64; 2], radius: f64, a0: f64, a1: f64) {
        let sweep = (a1 - a0).abs();
        let n = (sweep * radius / ARC_STEP).ceil().max(2.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let a = a0 + t * (a1 - a0);
            self.push([center[0] + radius * a.cos(), center[1] + radius * a.sin()]);
        }
    }
}

/// Canonical west-entry connector from the box edge to the exit-arm start.
fn canonical_connector(b: &mut PolyBuilder, turn: Turn) {
    use std::f64::consts::FRAC_PI_2;
    match turn {
        Turn::Straight => {
            b.line([-BOX, -LANE_OFF], [BOX, -LANE_OFF], STRAIGHT_STEP);
        }
        Turn::Right => {
            let r = RIGHT_RADIUS;
            let c = [-LANE_OFF - r, -LANE_OFF - r];
            b.line([-BOX, -LANE_OFF], [c[0], -LANE_OFF], 1.0);
            b.arc(c, r, FRAC_PI_2, 0.0);
            b.line([-LANE_OFF, c[1]], [-LANE_OFF, -BOX], 1.0);
        }
        Turn::Left => {
            let r = LEFT_RADIUS;
            let c = [LANE_OFF - r, -LANE_OFF + r];
            b.line([-BOX, -LANE_OFF], [c[0], -LANE_OFF], 1.0);
            b.arc(c, r, -FRAC_PI_2, 0.0);
            b.line([LANE_OFF, c[1]], [LANE_OFF, BOX], 1.0);
        }
    }
}

fn build_route(entry: Arm, turn: Turn) -> RouteSpec {
    let exit = turn.exit_from(entry);
    let k = entry.rotation();
    let mut b = PolyBuilder::new();
    // Entry straight in canonical frame, then connector, then exit straight.
    b.line([-entry.length(), -LANE_OFF], [-BOX, -LANE_OFF], STRAIGHT_STEP);
    let entry_end = b.points.len();
    canonical_connector(&mut b, turn);
    let connector_end = b.points.len();
    match turn {
        Turn::Straight => b.line([BOX, -LANE_OFF], [exit.length(), -LANE_OFF], STRAIGHT_STEP),
        Turn::Left => b.line([LANE_OFF, BOX], [LANE_OFF, exit.length()], STRAIGHT_STEP),
        Turn::Right => b.line([-LANE_OFF, -BOX], [-LANE_OFF, -exit.length()], STRAIGHT_STEP),
    }
    let points: Vec<[f64; 2]> = b.points.iter().map(|&p| rotate_point(p, k)).collect();

    // Arclength bookkeeping for the stop line and the speed-limit change.
    let arclen_at = |idx: usize| -> f64 {
        points[..=idx.min(points.len() - 1)]
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum()
    };
    let stop_line = arclen_at(entry_end - 1);
    let (v_in, v_out) = (entry.limit(), exit.limit());
    let speed_limit = if (v_in - v_out).abs() < 1e-9 {
        vec![[0.0, v_in]]
    } else if v_out < v_in {
        // Slow down for the turn: the lower limit applies from the stop line.
        vec![[0.0, v_in], [stop_line, v_out]]
    } else {
        // Speed up once merged onto the faster road.
        vec![[0.0, v_in], [arclen_at(connector_end - 1), v_out]]
    };

    RouteSpec {
        id: format!("{}{}", entry.letter(), exit.letter()),
        class: entry.class(),
        points,
        speed_limit,
        stop_line,
        pga: None,
    }
}

/// Right-of-way rank: main-road through traffic above main-road left turns,
/// above side-road through traffic, above side-road left turns.
fn rank(entry: Arm, turn: Turn) -> u8 {
    match (entry.class(), turn) {
        (RoadClass::Main, Turn::Straight | Turn::Right) => 4,
        (RoadClass::Main, Turn::Left) => 3,
        (RoadClass::Side, Turn::Straight | Turn::Right) => 2,
        (RoadClass::Side, Turn::Left) => 1,
    }
}

/// The bundled intersection as a declarative map spec.
pub fn bendplatz_spec() -> MapSpec {
    let arms = [Arm::West, Arm::South, Arm::East, Arm::North];
    let turns = [Turn::Straight, Turn::Left, Turn::Right];
    let mut routes = Vec::new();
    let mut ranked = Vec::new();
    for &entry in &arms {
        for &turn in &turns {
            let r = build_route(entry, turn);
            ranked.push((r.id.clone(), rank(entry, turn)));
            routes.push(r);
        }
    }
    // Declare a holder for every pair; ties break lexicographically so the
    // derivation is fully deterministic.
    let mut priorities = Vec::new();
    for i in 0..ranked.len() {
        for j in i + 1..ranked.len() {
            let (a, ra) = (&ranked[i].0, ranked[i].1);
            let (b, rb) = (&ranked[j].0, ranked[j].1);
            let (holder, yields) = if ra > rb {
                (a, b)
            } else if rb > ra {
                (b, a)
            } else if a < b {
                (a, b)
            } else {
                (b, a)
            };
            priorities.push(PrioritySpec { holder: holder.clone(), yields: yields.clone() });
        }
    }
    MapSpec {
        name: "bendplatz".into(),
        lane_width: super::LANE_WIDTH,
        routes,
        priorities,
        merges: vec![],
        conflicts: vec![],
    }
}

/// Construct the bundled intersection map.
pub fn bendplatz() -> Result<IntersectionMap> {
    super::file::map_from_spec(&bendplatz_spec())
}
