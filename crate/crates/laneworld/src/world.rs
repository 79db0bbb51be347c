use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::command::{CommandState, NavCommand};
use crate::events::{DrivingEvent, EventKind};
use crate::geom::{Obb, Vec2};
use crate::layout::{Layout, LayoutError, LightState, Surface};
use crate::route::{Path, PieceKind, Route};
use crate::scenario::{Mode, ScenarioConfig};

pub const DT: f64 = 0.1;
pub const WHEELBASE: f64 = 2.7;
pub const MAX_STEER: f64 = 0.6;
pub const THROTTLE: f64 = 3.0;
pub const BRAKE: f64 = 8.0;
pub const DRAG: f64 = 0.02;
pub const CAR_HALF_LEN: f64 = 2.2;
pub const CAR_HALF_WID: f64 = 0.9;
pub const PED_RADIUS: f64 = 0.3;
pub const POLE_RADIUS: f64 = 0.25;
/// Distance before a lane end at which the upcoming turn is announced.
pub const APPROACH_WINDOW: f64 = 12.0;
const COMPLETE_MARGIN: f64 = 1.5;
const NPC_CRUISE: f64 = 5.0;
const PED_SPEED: f64 = 1.2;
const JAYWALK_RATE: f64 = 0.001;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("scenario config error: {0}")]
    Config(String),
}

/// Steer in [-1, 1] (positive turns right) and accel in [-1, 1] (positive throttle, negative brake).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub steer: f64,
    pub accel: f64,
}

impl Action {
    pub fn new(steer: f64, accel: f64) -> Self {
        Action { steer, accel }
    }

    /// Clamps both components to [-1, 1]; non-finite components become 0.
    pub fn clamped(self) -> Self {
        let c = |v: f64| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
        Action { steer: c(self.steer), accel: c(self.accel) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub pos: Vec2,
    pub yaw: f64,
    pub speed: f64,
}

impl Pose {
    pub fn heading(&self) -> Vec2 {
        Vec2::from_angle(self.yaw)
    }

    pub fn front(&self) -> Vec2 {
        self.pos + self.heading() * CAR_HALF_LEN
    }

    pub fn obb(&self) -> Obb {
        Obb { center: self.pos, yaw: self.yaw, half_len: CAR_HALF_LEN, half_wid: CAR_HALF_WID }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Npc {
    pub lanes: [usize; 2],
    pub path: Path,
    pub s: f64,
    pub pose: Pose,
    /// Parked vehicles never move.
    pub parked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PedMode {
    Sidewalk { road: usize, along: f64, lat: f64, dir: f64 },
    /// Scripted crossing that starts once ego route progress reaches `trigger_s`.
    Waiting { trigger_s: f64, dir: Vec2, speed: f64, distance: f64 },
    Crossing { dir: Vec2, speed: f64, remaining: f64, total: f64, resume: Option<(usize, f64, f64)> },
    Standing,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pedestrian {
    pub pos: Vec2,
    pub mode: PedMode,
}

impl Pedestrian {
    pub fn is_crossing(&self) -> bool {
        matches!(self.mode, PedMode::Crossing { .. })
    }
}

/// Vehicle holding the right to cross a junction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Claimant {
    Ego,
    Npc(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Correction {
    command: NavCommand,
    until_s: f64,
}

/// Full simulator state. Evolution is a pure function of (config, seed, action sequence).
#[derive(Clone, Debug)]
pub struct World {
    pub cfg: ScenarioConfig,
    pub layout: Layout,
    pub seed: u64,
    pub tick: u64,
    pub ego: Pose,
    pub route: Route,
    /// Arc length of the ego along the current route path.
    pub progress: f64,
    pub route_idx: usize,
    pub initial_length: f64,
    /// Monotone distance completed toward the goal.
    pub completed: f64,
    pub npcs: Vec<Npc>,
    pub peds: Vec<Pedestrian>,
    pub poles: Vec<Vec2>,
    pub events: Vec<DrivingEvent>,
    pub done: Option<EventKind>,
    pub time_limit_ticks: u64,
    /// One vehicle at a time may cross each junction.
    pub claims: Vec<Option<Claimant>>,
    correction: Option<Correction>,
    rng: ChaCha8Rng,
    blocked_ticks: u64,
    on_sidewalk: bool,
    front_track: Option<(usize, f64)>,
}

pub fn spawn_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<World, WorldError> {
    World::spawn(cfg, seed)
}

impl World {
    pub fn spawn(cfg: &ScenarioConfig, seed: u64) -> Result<World, WorldError> {
        if cfg.route_lanes < 1 {
            return Err(WorldError::Config("route_lanes must be at least 1".into()));
        }
        if !(cfg.density_scale >= 0.0 && cfg.density_scale.is_finite()) {
            return Err(WorldError::Config("density_scale must be a finite non-negative number".into()));
        }
        if cfg.render.width == 0 || cfg.render.height == 0 || cfg.render.px_per_m <= 0.0 {
            return Err(WorldError::Config("render size must be positive".into()));
        }
        let layout = Layout::builtin(&cfg.town)?;
        let route = Route::sample(&layout, cfg.route_id, cfg.route_lanes);
        Self::with_route(cfg, seed, layout, route)
    }

    /// Spawns on an explicit route (used by tests and scripted scenes).
    pub fn with_route(cfg: &ScenarioConfig, seed: u64, layout: Layout, route: Route) -> Result<World, WorldError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p0, t0) = route.path.pose_at(0.0);
        let ego = Pose { pos: p0, yaw: t0.angle(), speed: 0.0 };
        let initial_length = route.length();
        let time_limit_s = cfg.time_limit_s.unwrap_or(initial_length / 2.0 + 40.0);
        let mut w = World {
            cfg: cfg.clone(),
            poles: poles_for(&layout),
            claims: vec![None; layout.junctions.len()],
            layout,
            seed,
            tick: 0,
            ego,
            route,
            progress: 0.0,
            route_idx: 0,
            initial_length,
            completed: 0.0,
            npcs: Vec::new(),
            peds: Vec::new(),
            events: Vec::new(),
            done: None,
            time_limit_ticks: (time_limit_s / DT).round() as u64,
            correction: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            blocked_ticks: 0,
            on_sidewalk: false,
            front_track: None,
        };
        let (n_peds, n_cars) = cfg.actor_counts();
        w.spawn_vehicles(n_cars, &mut rng)?;
        w.spawn_pedestrians(n_peds, &mut rng)?;
        w.spawn_jaywalkers(cfg.jaywalkers, &mut rng)?;
        w.rng = rng;
        Ok(w)
    }

    fn spawn_vehicles(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<(), WorldError> {
        let first = self.route.lanes[0];
        let mut slots = Vec::new();
        for lane in &self.layout.lanes {
            if lane.id == first {
                continue;
            }
            let mut s = 6.0;
            while s <= lane.len - 4.0 {
                slots.push((lane.id, s));
                s += 10.0;
            }
        }
        if n > slots.len() {
            return Err(WorldError::Config(format!(
                "{n} vehicles requested but layout `{}` has room for {}",
                self.layout.name,
                slots.len()
            )));
        }
        slots.shuffle(rng);
        for &(lane, s) in &slots[..n] {
            let succ: Vec<usize> = self.layout.successors(lane).collect();
            let next = succ[rng.random_range(0..succ.len())];
            let path = Path::through(&self.layout, &[lane, next], s, self.layout.lanes[next].len);
            let (p, t) = path.pose_at(0.0);
            self.npcs.push(Npc { lanes: [lane, next], path, s: 0.0, pose: Pose { pos: p, yaw: t.angle(), speed: 0.0 }, parked: false });
        }
        Ok(())
    }

    fn spawn_pedestrians(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<(), WorldError> {
        let jh = self.layout.junction_half;
        let lat = self.layout.lane_width + self.layout.sidewalk_width / 2.0;
        let mut slots = Vec::new();
        for (ri, &[a, b]) in self.layout.roads.iter().enumerate() {
            let len = self.layout.junctions[a].pos().dist(self.layout.junctions[b].pos());
            let mut along = jh + 1.0;
            while along <= len - jh - 1.0 {
                for side in [1.0, -1.0] {
                    let pos = self.road_point(ri, along, side * lat);
                    if pos.dist(self.ego.pos) > 8.0 {
                        slots.push((ri, along, side * lat));
                    }
                }
                along += 3.0;
            }
        }
        if n > slots.len() {
            return Err(WorldError::Config(format!("{n} pedestrians requested but sidewalks hold {}", slots.len())));
        }
        slots.shuffle(rng);
        for &(road, along, lat) in &slots[..n] {
            let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            self.peds.push(Pedestrian { pos: self.road_point(road, along, lat), mode: PedMode::Sidewalk { road, along, lat, dir } });
        }
        Ok(())
    }

    fn spawn_jaywalkers(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<(), WorldError> {
        if n == 0 {
            return Ok(());
        }
        let windows: Vec<(f64, f64)> = self
            .route
            .path
            .pieces
            .iter()
            .filter(|p| matches!(p.kind, PieceKind::Lane { .. }))
            .map(|p| (p.s_start.max(15.0) + 3.0, p.s_end - 4.0))
            .filter(|(a, b)| b > a)
            .collect();
        if windows.is_empty() {
            return Err(WorldError::Config("route too short for scripted pedestrians".into()));
        }
        let near = self.layout.lane_width / 2.0 + self.layout.sidewalk_width / 2.0;
        let far = 1.5 * self.layout.lane_width + self.layout.sidewalk_width / 2.0;
        for _ in 0..n {
            let (a, b) = windows[rng.random_range(0..windows.len())];
            let s_cross = rng.random_range(a..b);
            let (p, t) = self.route.path.pose_at(s_cross);
            let from_right = rng.random_bool(0.5);
            let off = if from_right { near } else { -far };
            let dir = if from_right { -t.right() } else { t.right() };
            let trigger_s = s_cross - rng.random_range(12.0..20.0);
            let speed = rng.random_range(1.0..1.5);
            self.peds.push(Pedestrian {
                pos: p + t.right() * off,
                mode: PedMode::Waiting { trigger_s, dir, speed, distance: near + far },
            });
        }
        Ok(())
    }

    fn road_point(&self, road: usize, along: f64, lat: f64) -> Vec2 {
        let a = self.layout.junctions[self.layout.roads[road][0]].pos();
        let u = self.layout.road_dir(road);
        a + u * along + u.right() * lat
    }

    pub fn time_s(&self) -> f64 {
        self.tick as f64 * DT
    }

    pub fn final_lane(&self) -> usize {
        *self.route.lanes.last().unwrap()
    }

    pub fn light_state(&self, lane: usize) -> Option<LightState> {
        self.layout.light_state(lane, self.time_s())
    }

    pub fn is_done(&self) -> bool {
        self.done.is_some()
    }

    pub fn completion_fraction(&self) -> f64 {
        if self.initial_length <= 0.0 {
            1.0
        } else {
            (self.completed / self.initial_length).clamp(0.0, 1.0)
        }
    }

    /// Navigation command for the current tick.
    pub fn command(&self) -> CommandState {
        next_command(self)
    }

    /// Scripted scenes: puts a standing pedestrian `dist` metres ahead along the route.
    pub fn place_pedestrian_ahead(&mut self, dist: f64, lateral: f64) -> Vec2 {
        let (p, t) = self.route.path.pose_at(self.progress + dist);
        let pos = p + t.right() * lateral;
        self.peds.push(Pedestrian { pos, mode: PedMode::Standing });
        pos
    }

    /// Scripted scenes: parks a vehicle `dist` metres ahead on the route.
    pub fn place_vehicle_ahead(&mut self, dist: f64) -> Vec2 {
        let s = self.progress + dist;
        let (p, t) = self.route.path.pose_at(s);
        let lane = self.route.lanes[self.route_idx];
        let path = Path::through(&self.layout, &[lane], 0.0, self.layout.lanes[lane].len);
        self.npcs.push(Npc { lanes: [lane, lane], path, s: 0.0, pose: Pose { pos: p, yaw: t.angle(), speed: 0.0 }, parked: true });
        p
    }

    /// Teleports the ego (tests and scripted scenes).
    pub fn force_pose(&mut self, pos: Vec2, yaw: f64, speed: f64) {
        self.ego = Pose { pos, yaw, speed };
        self.front_track = None;
    }

    /// Advances one 10 Hz tick and returns the events emitted during it.
    pub fn step(&mut self, action: Action) -> Vec<DrivingEvent> {
        if self.done.is_some() {
            return Vec::new();
        }
        let a = action.clamped();
        self.tick += 1;
        self.integrate_ego(a);
        self.update_claims();
        self.update_npcs();
        self.update_peds();
        let mut evs = Vec::new();
        self.check_contacts(&mut evs);
        if self.done.is_none() {
            self.check_red_light(&mut evs);
            self.track_route(&mut evs);
        }
        if self.done.is_none() {
            if self.ego.speed < self.cfg.blocked_speed {
                self.blocked_ticks += 1;
            } else {
                self.blocked_ticks = 0;
            }
            let window = (self.cfg.blocked_s / DT).round() as u64;
            if self.blocked_ticks >= window {
                self.emit(&mut evs, EventKind::AgentBlocked, serde_json::json!({"stalled_s": self.cfg.blocked_s}));
                self.finish(&mut evs, EventKind::Timeout, serde_json::json!({"reason": "blocked"}));
            } else if self.tick >= self.time_limit_ticks {
                self.finish(&mut evs, EventKind::Timeout, serde_json::json!({"reason": "time_limit"}));
            }
        }
        self.events.extend(evs.iter().cloned());
        evs
    }

    fn emit(&self, evs: &mut Vec<DrivingEvent>, kind: EventKind, payload: serde_json::Value) {
        evs.push(DrivingEvent { tick: self.tick, kind, payload });
    }

    fn finish(&mut self, evs: &mut Vec<DrivingEvent>, kind: EventKind, payload: serde_json::Value) {
        self.emit(evs, kind, payload);
        if self.done.is_none() {
            self.done = Some(kind);
        }
    }

    fn integrate_ego(&mut self, a: Action) {
        let e = &mut self.ego;
        let delta = -a.steer * MAX_STEER;
        let drive = if a.accel > 0.0 { THROTTLE * a.accel } else { 0.0 };
        let brake = if a.accel < 0.0 { -BRAKE * a.accel } else { 0.0 };
        let mut v = e.speed + (drive - DRAG * e.speed * e.speed) * DT;
        v = (v - brake * DT).max(0.0);
        let yaw1 = e.yaw + v * delta.tan() / WHEELBASE * DT;
        let mid = 0.5 * (e.yaw + yaw1);
        e.pos = e.pos + Vec2::from_angle(mid) * (v * DT);
        e.yaw = crate::geom::wrap_angle(yaw1);
        e.speed = v;
    }

    fn check_contacts(&mut self, evs: &mut Vec<DrivingEvent>) {
        let obb = self.ego.obb();
        let mut hits = Vec::new();
        for (i, n) in self.npcs.iter().enumerate() {
            if obb.overlaps(&n.pose.obb()) {
                hits.push((EventKind::CollisionVehicle, serde_json::json!({"vehicle": i})));
            }
        }
        for (i, p) in self.peds.iter().enumerate() {
            if obb.distance_to_point(p.pos) < PED_RADIUS {
                hits.push((EventKind::CollisionPedestrian, serde_json::json!({"pedestrian": i})));
            }
        }
        for (i, p) in self.poles.iter().enumerate() {
            if obb.distance_to_point(*p) < POLE_RADIUS {
                hits.push((EventKind::CollisionOther, serde_json::json!({"pole": i})));
            }
        }
        let surfaces: Vec<Surface> = obb.corners().iter().map(|&c| self.layout.surface(c)).collect();
        if surfaces.iter().any(|s| matches!(s, Surface::Offroad)) {
            hits.push((EventKind::CollisionLayout, serde_json::json!({"x": self.ego.pos.x, "y": self.ego.pos.y})));
        }
        let on_sidewalk = surfaces.iter().any(|s| matches!(s, Surface::Sidewalk { .. }));
        if on_sidewalk && !self.on_sidewalk {
            self.emit(evs, EventKind::OffLane, serde_json::json!({"x": self.ego.pos.x, "y": self.ego.pos.y}));
        }
        self.on_sidewalk = on_sidewalk;
        for (k, p) in hits {
            self.finish(evs, k, p);
        }
    }

    fn check_red_light(&mut self, evs: &mut Vec<DrivingEvent>) {
        let lane = self.layout.lane_at(self.ego.pos, self.ego.heading());
        let Some(l) = lane else {
            self.front_track = None;
            return;
        };
        let ln = &self.layout.lanes[l];
        let fs = ln.frame(self.ego.front()).0;
        if let Some((pl, ps)) = self.front_track {
            if pl == l && ps < ln.len && fs >= ln.len && self.light_state(l) == Some(LightState::Red) {
                let j = ln.to;
                self.emit(evs, EventKind::RedLightViolation, serde_json::json!({"lane": l, "junction": j}));
            }
        }
        self.front_track = Some((l, fs));
    }

    fn track_route(&mut self, evs: &mut Vec<DrivingEvent>) {
        if let Some(l) = self.layout.lane_at(self.ego.pos, self.ego.heading()) {
            match self.route.lanes[self.route_idx..].iter().position(|&x| x == l) {
                Some(off) => self.route_idx += off,
                None => {
                    let expected = self.route.lanes.get(self.route_idx + 1).copied();
                    self.emit(evs, EventKind::RouteDeviation, serde_json::json!({"lane": l, "expected": expected}));
                    if self.cfg.mode == Mode::Train {
                        self.done = Some(EventKind::RouteDeviation);
                        return;
                    }
                    if !self.replan(l) {
                        self.finish(evs, EventKind::Timeout, serde_json::json!({"reason": "no_route"}));
                        return;
                    }
                }
            }
        }
        let (s, d) = self.route.path.project(self.ego.pos, self.progress - 1.0, self.progress + 4.0);
        if d < 3.0 && s > self.progress {
            self.progress = s;
        }
        let remaining = self.route.length() - self.progress;
        self.completed = self.completed.max((self.initial_length - remaining).clamp(0.0, self.initial_length));
        if let Some(c) = self.correction {
            if self.progress >= c.until_s {
                self.correction = None;
            }
        }
        if remaining <= COMPLETE_MARGIN && d < 3.0 {
            self.completed = self.initial_length;
            self.finish(evs, EventKind::RouteComplete, serde_json::Value::Null);
        }
    }

    /// Replans from `lane` to the original goal and arms the corrective command.
    fn replan(&mut self, lane: usize) -> bool {
        let goal_lane = self.final_lane();
        let Some(lanes) = self.layout.plan(lane, goal_lane) else { return false };
        let s_in = self.layout.lanes[lane].frame(self.ego.pos).0.max(0.0);
        self.route = Route::new(&self.layout, lanes, s_in, self.route.goal_s_in_lane);
        self.route_idx = 0;
        self.progress = 0.0;
        self.correction = self.route.path.pieces.iter().find_map(|p| match p.kind {
            PieceKind::Turn { turn, .. } => Some(Correction { command: NavCommand::from_turn(turn), until_s: p.s_end }),
            _ => None,
        });
        true
    }

    fn claimant_pos(&self, c: Claimant) -> Option<Pose> {
        match c {
            Claimant::Ego => Some(self.ego),
            Claimant::Npc(i) => self.npcs.get(i).map(|n| n.pose),
        }
    }

    /// Releases claims of vehicles that left the junction area and lets the ego
    /// claim a junction it is about to enter.
    fn update_claims(&mut self) {
        let jh = self.layout.junction_half;
        for j in 0..self.claims.len() {
            let c = self.layout.junctions[j].pos();
            let within = |p: Vec2, r: f64| (p.x - c.x).abs() <= r && (p.y - c.y).abs() <= r;
            if let Some(cl) = self.claims[j] {
                let keep = self.claimant_pos(cl).is_some_and(|p| {
                    let stalled_outside = cl == Claimant::Ego && p.speed < 0.1 && !within(p.pos, jh);
                    within(p.pos, jh + 6.0) && !stalled_outside
                });
                if !keep {
                    self.claims[j] = None;
                }
            }
            if self.claims[j].is_none() && within(self.ego.pos, jh + 5.5) && self.ego.speed >= 0.1 {
                let toward = self.ego.heading().dot(c - self.ego.pos) > 0.0;
                let lane = self.layout.lane_at(self.ego.pos, self.ego.heading());
                let red = lane.is_some_and(|l| self.layout.lanes[l].to == j && self.light_state(l) == Some(LightState::Red));
                if (toward && !red) || within(self.ego.pos, jh) {
                    self.claims[j] = Some(Claimant::Ego);
                }
            }
        }
    }

    fn update_npcs(&mut self) {
        for i in 0..self.npcs.len() {
            if self.npcs[i].parked {
                continue;
            }
            let d_stop = self.npc_stop_distance(i);
            let n = &self.npcs[i];
            let in_turn = n.path.piece_at(n.s).is_some_and(|p| matches!(p.kind, PieceKind::Turn { .. }));
            let cruise = if in_turn { 3.0 } else { NPC_CRUISE };
            let v_des = cruise.min((2.0 * 3.0 * d_stop.max(0.0)).sqrt());
            let v = v_des.clamp(n.pose.speed - 6.0 * DT, n.pose.speed + 2.0 * DT).max(0.0);
            let s = n.s + v * DT;
            let rebuild = n.path.pieces.len() == 3 && s >= n.path.pieces[2].s_start;
            if rebuild {
                let cur = n.lanes[1];
                let off = s - n.path.pieces[2].s_start;
                let succ: Vec<usize> = self.layout.successors(cur).collect();
                let next = succ[self.rng.random_range(0..succ.len())];
                let path = Path::through(&self.layout, &[cur, next], off, self.layout.lanes[next].len);
                let n = &mut self.npcs[i];
                n.lanes = [cur, next];
                n.path = path;
                n.s = 0.0;
            } else {
                self.npcs[i].s = s;
            }
            let n = &mut self.npcs[i];
            let (p, t) = n.path.pose_at(n.s);
            n.pose = Pose { pos: p, yaw: t.angle(), speed: v };
        }
    }

    fn npc_stop_distance(&mut self, i: usize) -> f64 {
        let mut d = f64::INFINITY;
        let (first_end, s_now, lane) = {
            let n = &self.npcs[i];
            (n.path.pieces.first().map(|p| p.s_end), n.s, n.lanes[0])
        };
        if let Some(end) = first_end {
            let to_line = end - s_now - CAR_HALF_LEN;
            if s_now < end && to_line > -0.2 {
                let j = self.layout.lanes[lane].to;
                let green = self.light_state(lane).is_none_or(|l| l == LightState::Green);
                let mut go = green;
                if green && to_line < 3.0 {
                    match self.claims[j] {
                        None => self.claims[j] = Some(Claimant::Npc(i)),
                        Some(Claimant::Npc(k)) if k == i => {}
                        Some(_) => go = false,
                    }
                }
                if !go {
                    d = d.min(to_line - 0.5);
                }
            }
        }
        let n = &self.npcs[i];
        let hi = n.s + 15.0;
        let mut consider = |p: Vec2, margin: f64| {
            let (s, lat) = n.path.project(p, n.s, hi);
            if lat < 2.0 && s > n.s + 0.1 {
                d = d.min(s - n.s - margin);
            }
        };
        consider(self.ego.pos, 2.0 * CAR_HALF_LEN + 2.0);
        for (k, o) in self.npcs.iter().enumerate() {
            if k != i {
                consider(o.pose.pos, 2.0 * CAR_HALF_LEN + 2.0);
            }
        }
        for p in &self.peds {
            consider(p.pos, CAR_HALF_LEN + 2.0);
        }
        d
    }

    fn update_peds(&mut self) {
        let jh = self.layout.junction_half;
        for i in 0..self.peds.len() {
            let mut p = self.peds[i];
            match p.mode {
                PedMode::Sidewalk { road, along, lat, dir } => {
                    let [a, b] = self.layout.roads[road];
                    let len = self.layout.junctions[a].pos().dist(self.layout.junctions[b].pos());
                    let mut along = along + dir * PED_SPEED * DT;
                    let mut dir = dir;
                    if along < jh + 0.5 || along > len - jh - 0.5 {
                        dir = -dir;
                        along = along.clamp(jh + 0.5, len - jh - 0.5);
                    }
                    p.pos = self.road_point(road, along, lat);
                    p.mode = PedMode::Sidewalk { road, along, lat, dir };
                    if self.rng.random_bool(JAYWALK_RATE) {
                        let u = self.layout.road_dir(road).right() * (-lat.signum());
                        p.mode = PedMode::Crossing { dir: u, speed: 1.3, remaining: 2.0 * lat.abs(), total: 2.0 * lat.abs(), resume: Some((road, along, -lat)) };
                    }
                }
                PedMode::Waiting { trigger_s, dir, speed, distance } => {
                    if self.progress >= trigger_s {
                        p.mode = PedMode::Crossing { dir, speed, remaining: distance, total: distance, resume: None };
                    }
                }
                PedMode::Crossing { dir, speed, remaining, total, resume } => {
                    let step = (speed * DT).min(remaining);
                    // a pedestrian about to walk into the ego turns back instead
                    let ahead = p.pos + dir * (step + 0.4);
                    if self.ego.obb().distance_to_point(ahead) < PED_RADIUS {
                        let back = resume.map(|(road, along, lat)| (road, along, -lat));
                        p.mode = PedMode::Crossing { dir: -dir, speed, remaining: total - remaining, total, resume: back };
                        self.peds[i] = p;
                        continue;
                    }
                    p.pos = p.pos + dir * step;
                    let remaining = remaining - step;
                    p.mode = if remaining > 1e-9 {
                        PedMode::Crossing { dir, speed, remaining, total, resume }
                    } else {
                        match resume {
                            Some((road, along, lat)) => PedMode::Sidewalk { road, along, lat, dir: 1.0 },
                            None => PedMode::Standing,
                        }
                    };
                }
                PedMode::Standing => {}
            }
            self.peds[i] = p;
        }
    }
}

/// Navigation command: FOLLOW along lanes, the upcoming turn inside the approach
/// window and through the junction, or the corrective turn after an eval-mode deviation.
pub fn next_command(w: &World) -> CommandState {
    if let Some(c) = w.correction {
        return CommandState { command: c.command, corrected: true };
    }
    let path = &w.route.path;
    let s = w.progress;
    let Some(idx) = path.pieces.iter().position(|p| s >= p.s_start && s < p.s_end) else {
        return CommandState { command: NavCommand::Follow, corrected: false };
    };
    let piece = path.pieces[idx];
    let command = match piece.kind {
        PieceKind::Turn { turn, .. } => NavCommand::from_turn(turn),
        PieceKind::Lane { .. } => match path.pieces.get(idx + 1) {
            Some(next) if piece.s_end - s <= APPROACH_WINDOW => match next.kind {
                PieceKind::Turn { turn, .. } => NavCommand::from_turn(turn),
                PieceKind::Lane { .. } => NavCommand::Follow,
            },
            _ => NavCommand::Follow,
        },
    };
    CommandState { command, corrected: false }
}

/// Lamp posts along every road, on both sidewalks.
fn poles_for(layout: &Layout) -> Vec<Vec2> {
    let mut out = Vec::new();
    let lat = layout.lane_width + 0.75 * layout.sidewalk_width;
    for (ri, &[a, b]) in layout.roads.iter().enumerate() {
        let pa = layout.junctions[a].pos();
        let len = layout.junctions[b].pos().dist(pa);
        let u = layout.road_dir(ri);
        let mut along = layout.junction_half + 4.0;
        while along <= len - layout.junction_half - 4.0 {
            for side in [1.0, -1.0] {
                out.push(pa + u * along + u.right() * (side * lat));
            }
            along += 12.0;
        }
    }
    out
}
