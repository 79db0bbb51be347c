//! Road networks: junction nodes on a plane joined by two-lane roads with
//! right-hand traffic. Every undirected road yields two directed lanes.
//!
//! Layout files are JSON documents with a `version` field:
//!
//! ```json
//! { "version": 1, "name": "town01", "lane_width": 3.5, "junction_half": 6.0,
//!   "sidewalk_width": 2.0,
//!   "junctions": [{"id": 0, "x": 0.0, "y": 0.0, "light_offset": 3.0}],
//!   "roads": [[0, 1]],
//!   "lanes": [{"id": 0, "from": 0, "to": 1, "start": [x, y], "end": [x, y]}] }
//! ```
//!
//! `light_offset` is absent for unsignalled junctions. `lanes` lists the lane
//! centre polylines derived from the roads; readers recompute and verify them.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::geom::Vec2;

pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    #[error("layout parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported layout version {0} (expected {LAYOUT_VERSION})")]
    Version(u32),
    #[error("invalid layout: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub light_offset: Option<f64>,
}

impl Junction {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneRecord {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub start: [f64; 2],
    pub end: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayoutFile {
    version: u32,
    name: String,
    lane_width: f64,
    junction_half: f64,
    sidewalk_width: f64,
    junctions: Vec<Junction>,
    roads: Vec<[usize; 2]>,
    #[serde(default)]
    lanes: Vec<LaneRecord>,
}

/// A directed lane between two junctions.
#[derive(Clone, Debug, PartialEq)]
pub struct Lane {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub road: usize,
    pub dir: Vec2,
    pub start: Vec2,
    pub end: Vec2,
    pub len: f64,
}

impl Lane {
    /// (longitudinal, lateral) coordinates of `p`; lateral is positive to the right.
    pub fn frame(&self, p: Vec2) -> (f64, f64) {
        let d = p - self.start;
        (d.dot(self.dir), d.dot(self.dir.right()))
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        self.start + self.dir * s
    }

    pub fn is_vertical(&self) -> bool {
        self.dir.y.abs() > self.dir.x.abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub name: String,
    pub lane_width: f64,
    pub junction_half: f64,
    pub sidewalk_width: f64,
    pub junctions: Vec<Junction>,
    pub roads: Vec<[usize; 2]>,
    pub lanes: Vec<Lane>,
    out_lanes: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Turn {
    Left,
    Right,
    Straight,
}

/// What lies under a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Junction(usize),
    /// Road index with (along, lateral) relative to the road's first junction;
    /// lateral is positive to the right of `junctions[road[0]] → junctions[road[1]]`.
    Road { road: usize, along: f64, lat: f64 },
    Sidewalk { road: usize },
    Offroad,
}

impl Layout {
    pub fn new(
        name: &str,
        lane_width: f64,
        junction_half: f64,
        sidewalk_width: f64,
        junctions: Vec<Junction>,
        roads: Vec<[usize; 2]>,
    ) -> Result<Self, LayoutError> {
        for (i, j) in junctions.iter().enumerate() {
            if j.id != i {
                return Err(LayoutError::Invalid(format!("junction ids must be 0..n in order, found {} at {i}", j.id)));
            }
        }
        if lane_width <= 0.0 || junction_half < lane_width {
            return Err(LayoutError::Invalid("junction_half must be at least lane_width".into()));
        }
        let mut lanes = Vec::new();
        for (ri, &[a, b]) in roads.iter().enumerate() {
            if a >= junctions.len() || b >= junctions.len() || a == b {
                return Err(LayoutError::Invalid(format!("road {ri} references bad junctions {a}-{b}")));
            }
            for (from, to) in [(a, b), (b, a)] {
                let (pa, pb) = (junctions[from].pos(), junctions[to].pos());
                let dir = (pb - pa).normalized();
                if dir.x.abs() > 1e-9 && dir.y.abs() > 1e-9 {
                    return Err(LayoutError::Invalid(format!("road {ri} is not axis aligned")));
                }
                let off = dir.right() * (lane_width / 2.0);
                let start = pa + dir * junction_half + off;
                let end = pb - dir * junction_half + off;
                let len = (end - start).dot(dir);
                if len < 8.0 {
                    return Err(LayoutError::Invalid(format!("road {ri} too short for its junctions")));
                }
                lanes.push(Lane { id: lanes.len(), from, to, road: ri, dir, start, end, len });
            }
        }
        let mut out_lanes = vec![Vec::new(); junctions.len()];
        for l in &lanes {
            out_lanes[l.from].push(l.id);
        }
        for (j, outs) in out_lanes.iter().enumerate() {
            if outs.len() < 2 {
                return Err(LayoutError::Invalid(format!("junction {j} is a dead end")));
            }
        }
        Ok(Layout { name: name.into(), lane_width, junction_half, sidewalk_width, junctions, roads, lanes, out_lanes })
    }

    /// Rectangular grid town with `nx × ny` junctions, optionally dropping roads.
    pub fn grid(name: &str, nx: usize, ny: usize, spacing: f64, drop: &[[usize; 2]]) -> Result<Self, LayoutError> {
        let mut junctions = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let id = j * nx + i;
                junctions.push(Junction { id, x: i as f64 * spacing, y: j as f64 * spacing, light_offset: None });
            }
        }
        let mut roads = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let id = j * nx + i;
                if i + 1 < nx {
                    roads.push([id, id + 1]);
                }
                if j + 1 < ny {
                    roads.push([id, id + nx]);
                }
            }
        }
        roads.retain(|r| !drop.iter().any(|d| d == r || (d[0] == r[1] && d[1] == r[0])));
        let mut degree = vec![0; junctions.len()];
        for r in &roads {
            degree[r[0]] += 1;
            degree[r[1]] += 1;
        }
        for (jn, &d) in junctions.iter_mut().zip(&degree) {
            if d >= 3 {
                // deterministic stagger so neighbouring lights are out of phase
                jn.light_offset = Some(((jn.id * 7) % 24) as f64);
            }
        }
        Layout::new(name, 3.5, 6.0, 2.0, junctions, roads)
    }

    /// Built-in towns: `town01` (3×3 grid) and `town02` (4×3 grid with T-junctions).
    pub fn builtin(name: &str) -> Result<Self, LayoutError> {
        match name {
            "town01" => Layout::grid("town01", 3, 3, 40.0, &[]),
            "town02" => Layout::grid("town02", 4, 3, 36.0, &[[5, 6], [1, 5]]),
            other => Err(LayoutError::Invalid(format!("unknown town `{other}` (have town01, town02)"))),
        }
    }

    pub fn to_json(&self) -> String {
        let file = LayoutFile {
            version: LAYOUT_VERSION,
            name: self.name.clone(),
            lane_width: self.lane_width,
            junction_half: self.junction_half,
            sidewalk_width: self.sidewalk_width,
            junctions: self.junctions.clone(),
            roads: self.roads.clone(),
            lanes: self
                .lanes
                .iter()
                .map(|l| LaneRecord { id: l.id, from: l.from, to: l.to, start: [l.start.x, l.start.y], end: [l.end.x, l.end.y] })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("layout serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LayoutError> {
        let file: LayoutFile = serde_json::from_str(text)?;
        if file.version != LAYOUT_VERSION {
            return Err(LayoutError::Version(file.version));
        }
        let layout = Layout::new(&file.name, file.lane_width, file.junction_half, file.sidewalk_width, file.junctions, file.roads)?;
        if !file.lanes.is_empty() {
            if file.lanes.len() != layout.lanes.len() {
                return Err(LayoutError::Invalid("lane list does not match roads".into()));
            }
            for (rec, lane) in file.lanes.iter().zip(&layout.lanes) {
                let same = rec.from == lane.from
                    && rec.to == lane.to
                    && Vec2::new(rec.start[0], rec.start[1]).dist(lane.start) < 1e-6
                    && Vec2::new(rec.end[0], rec.end[1]).dist(lane.end) < 1e-6;
                if !same || rec.id != lane.id {
                    return Err(LayoutError::Invalid(format!("lane {} polyline disagrees with its road", rec.id)));
                }
            }
        }
        Ok(layout)
    }

    pub fn successors(&self, lane: usize) -> impl Iterator<Item = usize> + '_ {
        let l = &self.lanes[lane];
        self.out_lanes[l.to].iter().copied().filter(move |&o| self.lanes[o].to != l.from)
    }

    pub fn turn_between(&self, from: usize, to: usize) -> Turn {
        let (a, b) = (self.lanes[from].dir, self.lanes[to].dir);
        let c = a.cross(b);
        if c > 0.5 {
            Turn::Left
        } else if c < -0.5 {
            Turn::Right
        } else {
            Turn::Straight
        }
    }

    /// Shortest lane sequence from `from` to `to` (inclusive), by lane count.
    pub fn plan(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        let mut prev = vec![usize::MAX; self.lanes.len()];
        let mut q = VecDeque::new();
        for s in self.successors(from) {
            if prev[s] == usize::MAX {
                prev[s] = from;
                q.push_back(s);
            }
        }
        while let Some(l) = q.pop_front() {
            if l == to {
                let mut path = vec![to];
                let mut cur = prev[to];
                while cur != from {
                    path.push(cur);
                    cur = prev[cur];
                }
                path.push(from);
                path.reverse();
                return Some(path);
            }
            for s in self.successors(l) {
                if prev[s] == usize::MAX {
                    prev[s] = l;
                    q.push_back(s);
                }
            }
        }
        None
    }

    /// Directed lane of `road`; `forward` means from `roads[road][0]` to `roads[road][1]`.
    pub fn lane_of(&self, road: usize, forward: bool) -> usize {
        2 * road + usize::from(!forward)
    }

    pub fn is_signalled(&self, junction: usize) -> bool {
        self.junctions[junction].light_offset.is_some()
    }

    pub fn road_dir(&self, road: usize) -> Vec2 {
        let [a, b] = self.roads[road];
        (self.junctions[b].pos() - self.junctions[a].pos()).normalized()
    }

    pub fn surface(&self, p: Vec2) -> Surface {
        let jh = self.junction_half;
        for j in &self.junctions {
            let d = p - j.pos();
            if d.x.abs() <= jh && d.y.abs() <= jh {
                return Surface::Junction(j.id);
            }
        }
        let mut sidewalk = None;
        for (ri, &[a, b]) in self.roads.iter().enumerate() {
            let pa = self.junctions[a].pos();
            let u = self.road_dir(ri);
            let len = self.junctions[b].pos().dist(pa);
            let d = p - pa;
            let along = d.dot(u);
            let lat = d.dot(u.right());
            if along < jh - self.sidewalk_width || along > len - jh + self.sidewalk_width {
                continue;
            }
            let on_span = along >= jh && along <= len - jh;
            if on_span && lat.abs() <= self.lane_width {
                return Surface::Road { road: ri, along, lat };
            }
            if lat.abs() <= self.lane_width + self.sidewalk_width {
                sidewalk = Some(ri);
            }
        }
        match sidewalk {
            Some(road) => Surface::Sidewalk { road },
            None => Surface::Offroad,
        }
    }

    /// Lane the point lies in with a heading roughly along the lane.
    pub fn lane_at(&self, p: Vec2, heading: Vec2) -> Option<usize> {
        let hw = self.lane_width / 2.0;
        self.lanes.iter().find_map(|l| {
            let (s, lat) = l.frame(p);
            (s >= 0.0 && s <= l.len && lat.abs() <= hw && heading.dot(l.dir) > 0.5).then_some(l.id)
        })
    }

    /// Traffic-light state of the approach ending at `lane.to`, `None` if unsignalled.
    pub fn light_state(&self, lane: usize, time_s: f64) -> Option<LightState> {
        let l = &self.lanes[lane];
        let offset = self.junctions[l.to].light_offset?;
        Some(light_phase(time_s + offset, l.is_vertical()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LightState {
    Green,
    Yellow,
    Red,
}

pub const GREEN_S: f64 = 8.0;
pub const YELLOW_S: f64 = 3.0;
pub const ALL_RED_S: f64 = 1.0;
pub const CYCLE_S: f64 = 2.0 * (GREEN_S + YELLOW_S + ALL_RED_S);

/// Two-phase signal: vertical approaches run first, horizontal second.
pub fn light_phase(t: f64, vertical: bool) -> LightState {
    let half = CYCLE_S / 2.0;
    let mut local = t.rem_euclid(CYCLE_S);
    if !vertical {
        local = (local - half).rem_euclid(CYCLE_S);
    }
    if local < GREEN_S {
        LightState::Green
    } else if local < GREEN_S + YELLOW_S {
        LightState::Yellow
    } else {
        LightState::Red
    }
}
