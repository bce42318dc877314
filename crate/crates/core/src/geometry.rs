//! Planar rigid transforms and the small amount of SE(2) algebra the rest of
//! the crate needs.

use serde::{Deserialize, Serialize};

/// A planar pose / rigid transform: translation in meters, heading in radians.
///
/// The heading is kept normalized to `(-pi, pi]`. `Pose2` doubles as an
/// element of SE(2): `compose` is the group operation and `inverse` its
/// inverse, with `transform_point` the group action on the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = (a + std::f64::consts::PI).rem_euclid(two_pi);
    if r == 0.0 {
        std::f64::consts::PI
    } else {
        r - std::f64::consts::PI
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    /// Group operation: `self` followed by `other` expressed in `self`'s frame.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.theta)
    }

    /// Relative pose taking `self`'s frame onto `to`'s frame: `self⁻¹ ∘ to`.
    pub fn relative_to(&self, to: &Pose2) -> Pose2 {
        self.inverse().compose(to)
    }

    /// Maps a point expressed in `self`'s frame into the parent frame.
    pub fn transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    pub fn translation_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance_to(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Minimal coordinates `(x, y, theta)` of the pose.
    pub fn to_vector(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}
