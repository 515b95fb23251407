//! Cartesian and spherical point representations.
//!
//! Spherical coordinates are `(range, azimuth, polar)` with azimuth in
//! `(-pi, pi]` measured from +x towards +y and the polar angle measured from
//! +z, so a horizontal ray has polar angle `pi / 2`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// A single return in sensor coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Reflectance in `[0, 1]`, when the source provides one.
    pub intensity: Option<f64>,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            intensity: None,
        }
    }

    pub fn with_intensity(mut self, intensity: f64) -> Self {
        self.intensity = Some(intensity);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Spherical coordinates of a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphPoint {
    pub range: f64,
    pub azimuth: f64,
    pub polar: f64,
}

impl SphPoint {
    pub fn new(range: f64, azimuth: f64, polar: f64) -> Self {
        Self {
            range,
            azimuth,
            polar,
        }
    }

    /// Whether every coordinate lies in its documented domain.
    pub fn is_valid(&self) -> bool {
        self.range >= 0.0
            && self.azimuth > -PI
            && self.azimuth <= PI
            && (0.0..=PI).contains(&self.polar)
    }
}

/// An ordered point set, optionally labelled with beam bins.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// One bin index per point when present.
    pub bin_labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self {
            points,
            bin_labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn labels(&self) -> Result<&[u32]> {
        match &self.bin_labels {
            Some(labels) if labels.len() == self.points.len() => Ok(labels),
            Some(labels) => Err(Error::InvalidInput(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            ))),
            None => Err(Error::MissingLabels),
        }
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn from_center_size(center: [f64; 3], size: [f64; 3]) -> Self {
        Self {
            min: std::array::from_fn(|a| center[a] - 0.5 * size[a]),
            max: std::array::from_fn(|a| center[a] + 0.5 * size[a]),
        }
    }

    /// Inclusive containment with the box grown by `margin` on every side.
    pub fn contains(&self, p: &Point, margin: f64) -> bool {
        let c = [p.x, p.y, p.z];
        (0..3).all(|a| c[a] >= self.min[a] - margin && c[a] <= self.max[a] + margin)
    }

    /// Entry distance of the ray `origin + t * dir` (t > 0), if it hits.
    pub fn ray_entry(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (t0, t1) = {
                let t0 = (self.min[a] - origin[a]) * inv;
                let t1 = (self.max[a] - origin[a]) * inv;
                if t0 <= t1 {
                    (t0, t1)
                } else {
                    (t1, t0)
                }
            };
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        (t_near > 0.0).then_some(t_near)
    }
}

/// Converts a Cartesian point to `(range, azimuth, polar)`.
///
/// The polar angle is evaluated as `atan2(sqrt(x^2 + y^2), z)`, which equals
/// `acos(z / range)` but stays accurate next to the vertical axis. The origin
/// maps to `(0, 0, 0)`.
pub fn cart_to_sph(p: &Point) -> Result<SphPoint> {
    if !p.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite point ({}, {}, {})",
            p.x, p.y, p.z
        )));
    }
    Ok(cart_to_sph_unchecked(p))
}

#[inline]
pub(crate) fn cart_to_sph_unchecked(p: &Point) -> SphPoint {
    let range = p.norm();
    if range == 0.0 {
        return SphPoint::new(0.0, 0.0, 0.0);
    }
    let mut azimuth = p.y.atan2(p.x);
    if azimuth <= -PI {
        azimuth = PI;
    }
    // normalise -0.0
    azimuth += 0.0;
    let polar = (p.x * p.x + p.y * p.y).sqrt().atan2(p.z);
    SphPoint::new(range, azimuth, polar)
}

/// Converts spherical coordinates back to a Cartesian point (no intensity).
pub fn sph_to_cart(s: &SphPoint) -> Point {
    let (sin_p, cos_p) = s.polar.sin_cos();
    let (sin_a, cos_a) = s.azimuth.sin_cos();
    Point::new(
        s.range * sin_p * cos_a,
        s.range * sin_p * sin_a,
        s.range * cos_p,
    )
}

/// Signed shortest angular difference `to - from`, in `(-pi, pi]`.
pub fn wrap_angle_diff(from: f64, to: f64) -> f64 {
    wrap_angle(to - from)
}

/// Maps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = if a.abs() < 2.0 * PI {
        a
    } else {
        a % (2.0 * PI)
    };
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}
