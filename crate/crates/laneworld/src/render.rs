//! Egocentric top-down RGB renderer. The ego sits at `ego_row` of the image
//! height, centred horizontally, facing up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::Vec2;
use crate::layout::{LightState, Surface};
use crate::scenario::{RenderConfig, Weather};
use crate::world::{World, CAR_HALF_LEN, CAR_HALF_WID, POLE_RADIUS};

/// Interleaved 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

const GRASS: [f64; 3] = [70.0, 115.0, 60.0];
const SIDEWALK: [f64; 3] = [150.0, 148.0, 140.0];
const ASPHALT: [f64; 3] = [55.0, 55.0, 60.0];
const MARKING: [f64; 3] = [225.0, 225.0, 215.0];
const EGO: [f64; 3] = [235.0, 130.0, 30.0];
const CAR: [f64; 3] = [40.0, 90.0, 225.0];
const PED: [f64; 3] = [210.0, 60.0, 210.0];
const POLE: [f64; 3] = [20.0, 20.0, 20.0];
const PED_DRAW_RADIUS: f64 = 0.6;
const STOP_BAR: f64 = 1.6;

pub fn light_color(s: LightState) -> [f64; 3] {
    match s {
        LightState::Red => [225.0, 35.0, 35.0],
        LightState::Yellow => [235.0, 205.0, 40.0],
        LightState::Green => [40.0, 205.0, 70.0],
    }
}

struct Look {
    tint: [f64; 3],
    gain: f64,
    noise: f64,
}

fn look(w: Weather) -> Look {
    match w {
        Weather::Clear => Look { tint: [1.0, 1.0, 1.0], gain: 1.0, noise: 0.0 },
        Weather::Cloudy => Look { tint: [0.9, 0.93, 1.0], gain: 0.85, noise: 4.0 },
        Weather::WetSunset => Look { tint: [1.12, 0.9, 0.75], gain: 0.8, noise: 6.0 },
        Weather::SoftRainSunset => Look { tint: [1.05, 0.85, 0.8], gain: 0.75, noise: 10.0 },
    }
}

/// Stateless integer mix used for world-anchored asphalt texture.
fn cell_hash(ix: i64, iy: i64) -> u64 {
    let mut z = (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z ^= z >> 31;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 29)
}

/// Maps image pixel centres to world points for a given ego pose.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub origin: Vec2,
    pub fwd: Vec2,
    pub right: Vec2,
    pub cfg_w: usize,
    pub cfg_h: usize,
    pub px_per_m: f64,
    pub ego_row: f64,
}

impl Camera {
    pub fn new(w: &World, cfg: &RenderConfig) -> Camera {
        let fwd = w.ego.heading();
        Camera { origin: w.ego.pos, fwd, right: fwd.right(), cfg_w: cfg.width, cfg_h: cfg.height, px_per_m: cfg.px_per_m, ego_row: cfg.ego_row }
    }

    pub fn to_world(&self, x: f64, y: f64) -> Vec2 {
        let f = (self.ego_row * self.cfg_h as f64 - y) / self.px_per_m;
        let r = (x - 0.5 * self.cfg_w as f64) / self.px_per_m;
        self.origin + self.fwd * f + self.right * r
    }

    /// Pixel (column, row) containing world point `p`, if inside the image.
    pub fn to_pixel(&self, p: Vec2) -> Option<(usize, usize)> {
        let d = p - self.origin;
        let x = d.dot(self.right) * self.px_per_m + 0.5 * self.cfg_w as f64;
        let y = self.ego_row * self.cfg_h as f64 - d.dot(self.fwd) * self.px_per_m;
        (x >= 0.0 && y >= 0.0 && x < self.cfg_w as f64 && y < self.cfg_h as f64).then_some((x as usize, y as usize))
    }
}

pub fn render(w: &World) -> Frame {
    render_with(w, &w.cfg.render)
}

pub fn render_with(w: &World, cfg: &RenderConfig) -> Frame {
    let cam = Camera::new(w, cfg);
    let lk = look(w.cfg.weather);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(w.seed ^ w.tick.wrapping_mul(0xA076_1D64_78BD_642F) ^ 0x00C0_FFEE);
    let mut rgb = Vec::with_capacity(cfg.width * cfg.height * 3);
    let ego_obb = w.ego.obb();
    let lw = w.layout.lane_width;
    let jh = w.layout.junction_half;
    let t = w.time_s();
    for py in 0..cfg.height {
        for px in 0..cfg.width {
            let p = cam.to_world(px as f64 + 0.5, py as f64 + 0.5);
            let mut c = match w.layout.surface(p) {
                Surface::Offroad => GRASS,
                Surface::Sidewalk { .. } => SIDEWALK,
                Surface::Junction(_) => ASPHALT,
                Surface::Road { road, along, lat } => {
                    let [a, b] = w.layout.roads[road];
                    let len = w.layout.junctions[a].pos().dist(w.layout.junctions[b].pos());
                    let dashed = lat.abs() < 0.15 && along.rem_euclid(4.0) < 2.0;
                    let edge = lat.abs() > lw - 0.25;
                    // stop bars at signalled lane ends, colored by the light
                    let bar = if lat > 0.0 && along > len - jh - STOP_BAR && w.layout.is_signalled(b) {
                        w.layout.light_state(w.layout.lane_of(road, true), t)
                    } else if lat < 0.0 && along < jh + STOP_BAR && w.layout.is_signalled(a) {
                        w.layout.light_state(w.layout.lane_of(road, false), t)
                    } else {
                        None
                    };
                    match bar {
                        Some(s) => light_color(s),
                        None if dashed || edge => MARKING,
                        None => ASPHALT,
                    }
                }
            };
            if c == ASPHALT {
                let h = cell_hash((p.x * 2.0).floor() as i64, (p.y * 2.0).floor() as i64);
                let jitter = (h % 17) as f64 - 8.0;
                c = [c[0] + jitter, c[1] + jitter, c[2] + jitter];
            }
            for pole in &w.poles {
                if pole.dist(p) < POLE_RADIUS * 1.6 {
                    c = POLE;
                }
            }
            for n in &w.npcs {
                if n.pose.pos.dist(p) < 3.0 && n.pose.obb().contains(p) {
                    c = CAR;
                }
            }
            for ped in &w.peds {
                if ped.pos.dist(p) < PED_DRAW_RADIUS {
                    c = PED;
                }
            }
            if ego_obb.contains(p) {
                c = EGO;
                // windscreen marks the front
                if (p - w.ego.pos).dot(cam.fwd) > CAR_HALF_LEN - 1.2 && (p - w.ego.pos).dot(cam.fwd) < CAR_HALF_LEN - 0.6 && (p - w.ego.pos).dot(cam.right).abs() < CAR_HALF_WID - 0.2 {
                    c = [60.0, 60.0, 70.0];
                }
            }
            for k in 0..3 {
                let mut v = c[k] * lk.tint[k] * lk.gain;
                if lk.noise > 0.0 {
                    v += noise_rng.random_range(-lk.noise..=lk.noise);
                }
                rgb.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Frame { width: cfg.width, height: cfg.height, rgb }
}
