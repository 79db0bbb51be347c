use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn from_angle(a: f64) -> Self {
        Vec2 { x: a.cos(), y: a.sin() }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3-D cross product; positive when `o` is counter-clockwise of `self`.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n == 0.0 {
            self
        } else {
            self * (1.0 / n)
        }
    }

    /// Unit normal pointing to the right of this direction.
    pub fn right(self) -> Vec2 {
        Vec2 { x: self.y, y: -self.x }
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Oriented rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obb {
    pub center: Vec2,
    pub yaw: f64,
    pub half_len: f64,
    pub half_wid: f64,
}

impl Obb {
    pub fn axes(&self) -> (Vec2, Vec2) {
        let f = Vec2::from_angle(self.yaw);
        (f, f.right())
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let (f, r) = self.axes();
        let (a, b) = (f * self.half_len, r * self.half_wid);
        let c = self.center;
        [c + a + b, c + a - b, c - a - b, c - a + b]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let (f, r) = self.axes();
        let d = p - self.center;
        d.dot(f).abs() <= self.half_len && d.dot(r).abs() <= self.half_wid
    }

    /// Separating-axis overlap test.
    pub fn overlaps(&self, o: &Obb) -> bool {
        let (f1, r1) = self.axes();
        let (f2, r2) = o.axes();
        let d = o.center - self.center;
        for axis in [f1, r1, f2, r2] {
            let p1 = self.half_len * f1.dot(axis).abs() + self.half_wid * r1.dot(axis).abs();
            let p2 = o.half_len * f2.dot(axis).abs() + o.half_wid * r2.dot(axis).abs();
            if d.dot(axis).abs() > p1 + p2 {
                return false;
            }
        }
        true
    }

    pub fn distance_to_point(&self, p: Vec2) -> f64 {
        let (f, r) = self.axes();
        let d = p - self.center;
        let dx = (d.dot(f).abs() - self.half_len).max(0.0);
        let dy = (d.dot(r).abs() - self.half_wid).max(0.0);
        (dx * dx + dy * dy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn right_normal_of_north_is_east() {
        let r = Vec2::new(0.0, 1.0).right();
        assert_eq!(r, Vec2::new(1.0, 0.0));
    }

    #[test]
    fn obb_overlap_cases() {
        let a = Obb { center: Vec2::new(0.0, 0.0), yaw: 0.0, half_len: 2.0, half_wid: 1.0 };
        let b = Obb { center: Vec2::new(3.5, 0.0), yaw: 0.0, half_len: 2.0, half_wid: 1.0 };
        let c = Obb { center: Vec2::new(4.5, 0.0), yaw: 0.0, half_len: 2.0, half_wid: 1.0 };
        let d = Obb { center: Vec2::new(2.0, 2.2), yaw: std::f64::consts::FRAC_PI_4, half_len: 1.0, half_wid: 0.2 };
        assert!(a.overlaps(&b));
        assert!(!a.overlaps(&c));
        assert!(!a.overlaps(&d));
        assert!(a.contains(Vec2::new(1.9, -0.9)));
        assert_eq!(a.distance_to_point(Vec2::new(5.0, 0.0)), 3.0);
    }
}
