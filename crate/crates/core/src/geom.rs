use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// A 2D point or displacement in world meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Rotates counter-clockwise by the angle whose cosine and sine are given.
    pub fn rotate_cs(self, cos: f64, sin: f64) -> Vec2 {
        Vec2::new(cos * self.x - sin * self.y, sin * self.x + cos * self.y)
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        self.rotate_cs(theta.cos(), theta.sin())
    }

    /// Left-hand normal (rotated +90°).
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
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

/// Rigid frame anchored at a pedestrian's last observed position with the
/// +x axis along their heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub origin: Vec2,
    pub heading: f64,
    cos: f64,
    sin: f64,
}

impl Frame {
    pub fn new(origin: Vec2, heading: f64) -> Self {
        Self {
            origin,
            heading,
            cos: heading.cos(),
            sin: heading.sin(),
        }
    }

    /// World point to frame coordinates.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        self.vec_to_local(p - self.origin)
    }

    pub fn to_world(&self, p: Vec2) -> Vec2 {
        self.vec_to_world(p) + self.origin
    }

    /// Rotates a world displacement into the frame.
    pub fn vec_to_local(&self, v: Vec2) -> Vec2 {
        v.rotate_cs(self.cos, -self.sin)
    }

    pub fn vec_to_world(&self, v: Vec2) -> Vec2 {
        v.rotate_cs(self.cos, self.sin)
    }
}
