//! Privileged rule-based driver used to produce demonstrations.
//!
//! Lateral control is pure pursuit on the route centreline. Longitudinal
//! control tracks a speed limit `min(cruise, sqrt(2 * COMFORT_DECEL * d))`
//! where `d` is the distance to the nearest reason to stop.

use crate::geom::Vec2;
use crate::layout::LightState;
use crate::route::PieceKind;
use crate::world::{Action, Claimant, World, CAR_HALF_LEN, DRAG, MAX_STEER, THROTTLE, WHEELBASE};

pub const CRUISE: f64 = 6.0;
pub const TURN_SPEED: f64 = 3.5;
pub const COMFORT_DECEL: f64 = 2.5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Expert {
    /// Decision taken at the first yellow seen on a lane: `true` = go through.
    yellow: Option<(usize, bool)>,
}

impl Expert {
    pub fn new() -> Self {
        Expert::default()
    }

    pub fn act(&mut self, w: &World) -> Action {
        let steer = self.steer(w);
        let accel = self.accel(w);
        Action::new(steer, accel).clamped()
    }

    fn steer(&self, w: &World) -> f64 {
        let v = w.ego.speed;
        let ld = (3.0 + 0.5 * v).clamp(4.0, 8.0);
        let path = &w.route.path;
        let (target, _) = path.pose_at(w.progress + ld);
        let target = if w.progress + ld > path.length() {
            let (end, t) = path.pose_at(path.length());
            end + t * (w.progress + ld - path.length())
        } else {
            target
        };
        let h = w.ego.heading();
        let d = target - w.ego.pos;
        let alpha = d.dot(h.right()).atan2(d.dot(h));
        let curvature = 2.0 * alpha.sin() / d.norm().max(1e-6);
        let delta = (WHEELBASE * curvature).atan();
        (delta / MAX_STEER).clamp(-1.0, 1.0)
    }

    /// Distance (front bumper to stop point) of the nearest reason to stop.
    pub fn stop_distance(&mut self, w: &World) -> f64 {
        let path = &w.route.path;
        let s = w.progress;
        let v = w.ego.speed;
        let mut d = f64::INFINITY;

        if let Some(idx) = path.pieces.iter().position(|p| s >= p.s_start && s < p.s_end) {
            let piece = path.pieces[idx];
            if let (PieceKind::Lane { lane }, Some(next)) = (piece.kind, path.pieces.get(idx + 1)) {
                let to_line = piece.s_end - s - CAR_HALF_LEN;
                if to_line > -0.3 {
                    let mut stop = match w.light_state(lane) {
                        Some(LightState::Red) => {
                            // a yellow commitment holds only while stopping is no longer possible
                            let committed = matches!(self.yellow, Some((l, true)) if l == lane);
                            !(committed && to_line < v * v / 16.0 + 0.5)
                        }
                        Some(LightState::Yellow) => match self.yellow {
                            Some((l, go)) if l == lane => !go,
                            _ => {
                                // a stopped car never commits to a yellow
                                let go = v > 2.0 && to_line < v * v / 8.0 + 1.0;
                                self.yellow = Some((lane, go));
                                !go
                            }
                        },
                        Some(LightState::Green) => {
                            self.yellow = None;
                            false
                        }
                        None => false,
                    };
                    if let PieceKind::Turn { junction, .. } = next.kind {
                        if to_line < 6.0 && junction_busy(w, junction) && !matches!(w.claims[junction], Some(Claimant::Ego)) {
                            stop = true;
                        }
                    }
                    if stop {
                        d = d.min(to_line - 0.5);
                    }
                }
            }
        }

        let hi = s + 25.0;
        let (h, r) = (w.ego.heading(), w.ego.heading().right());
        for n in &w.npcs {
            let (sn, lat) = path.project(n.pose.pos, s, hi);
            if lat < 2.0 && sn > s + 0.1 {
                d = d.min(sn - s - 2.0 * CAR_HALF_LEN - 2.0);
            }
            // same-direction cars straight ahead, including past the route end
            let rel = n.pose.pos - w.ego.pos;
            let (fwd, side) = (rel.dot(h), rel.dot(r));
            if fwd > 0.0 && fwd < 15.0 && side.abs() < 2.0 && n.pose.heading().dot(h) > 0.5 {
                d = d.min(fwd - 2.0 * CAR_HALF_LEN - 2.0);
            }
        }
        for p in &w.peds {
            let (sp, lat) = path.project(p.pos, s, s + 20.0);
            let near = lat < 2.5 || (p.is_crossing() && lat < 7.0);
            // pedestrians beside the body are not in the way of moving forward
            if near && sp > s + CAR_HALF_LEN {
                d = d.min(sp - s - CAR_HALF_LEN - 3.0);
            }
        }
        d
    }

    fn accel(&mut self, w: &World) -> f64 {
        let v = w.ego.speed;
        let s = w.progress;
        let path = &w.route.path;
        let mut limit = CRUISE;
        for p in &path.pieces {
            if let PieceKind::Turn { turn, .. } = p.kind {
                if turn == crate::layout::Turn::Straight || p.s_end < s {
                    continue;
                }
                let ahead = (p.s_start - s - 2.0).max(0.0);
                limit = limit.min((TURN_SPEED * TURN_SPEED + 2.0 * COMFORT_DECEL * ahead).sqrt());
            }
        }
        // slow to a stop at the goal
        let to_goal = (path.length() - s).max(0.0);
        limit = limit.min((1.0 + 2.0 * COMFORT_DECEL * to_goal).sqrt());
        let d = self.stop_distance(w);
        if d < 0.3 {
            return -1.0;
        }
        let v_des = limit.min((2.0 * COMFORT_DECEL * d).sqrt());
        let err = v_des - v;
        if err >= 0.0 {
            (0.6 * err + DRAG * v * v / THROTTLE).min(1.0)
        } else {
            (0.8 * err).max(-1.0)
        }
    }
}

fn junction_busy(w: &World, j: usize) -> bool {
    let c = w.layout.junctions[j].pos();
    let r = w.layout.junction_half + 1.0;
    let inside = |p: Vec2| (p.x - c.x).abs() <= r && (p.y - c.y).abs() <= r;
    matches!(w.claims[j], Some(Claimant::Npc(_))) || w.npcs.iter().any(|n| inside(n.pose.pos))
}
