//! Synthetic spinning-LiDAR scenes.
//!
//! A scene is a flat ground plane plus axis-aligned boxes. The sensor sits at
//! `sensor_height` above the world origin and fires `M` beams at uniformly
//! spaced elevations across its vertical field of view, one ray per azimuth
//! step. Returned points are expressed in the sensor frame (sensor at the
//! origin), so every beam keeps a constant polar angle.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Aabb, Point, PointCloud};
use crate::rng::RngState;

const GROUND_INTENSITY: f64 = 0.2;
const OBJECT_INTENSITY: f64 = 0.6;
const BACKGROUND_INTENSITY: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorProfile {
    pub beams: usize,
    /// Lowest and highest beam elevation, degrees above the horizon.
    pub fov_deg: [f64; 2],
    /// Angle between consecutive rays of one beam, radians.
    pub azimuth_step: f64,
    pub max_range: f64,
    /// Probability that a hit is lost.
    pub dropout: f64,
}

/// 0.2 degrees: 1800 rays per revolution.
pub const DEFAULT_AZIMUTH_STEP: f64 = 0.2 * PI / 180.0;

impl SensorProfile {
    /// 64 beams over [-17.6, 2.4] degrees.
    pub fn waymo() -> Self {
        Self::preset(64, [-17.6, 2.4], 75.0)
    }

    /// 64 beams over [-24.9, 2.0] degrees.
    pub fn kitti() -> Self {
        Self::preset(64, [-24.9, 2.0], 120.0)
    }

    /// 32 beams over [-30.0, 10.0] degrees.
    pub fn nuscenes() -> Self {
        Self::preset(32, [-30.0, 10.0], 70.0)
    }

    fn preset(beams: usize, fov_deg: [f64; 2], max_range: f64) -> Self {
        Self {
            beams,
            fov_deg,
            azimuth_step: DEFAULT_AZIMUTH_STEP,
            max_range,
            dropout: 0.0,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "waymo" => Some(Self::waymo()),
            "kitti" => Some(Self::kitti()),
            "nuscenes" => Some(Self::nuscenes()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beams == 0 {
            return Err(Error::InvalidInput("sensor needs at least one beam".into()));
        }
        if !(self.fov_deg[0] < self.fov_deg[1]) || self.fov_deg.iter().any(|a| a.abs() >= 90.0) {
            return Err(Error::InvalidInput(format!(
                "vertical field of view {:?} is invalid",
                self.fov_deg
            )));
        }
        if !(self.azimuth_step > 0.0 && self.azimuth_step <= PI) {
            return Err(Error::InvalidInput(
                "azimuth step must be in (0, pi]".into(),
            ));
        }
        if !(self.max_range > 0.0) || !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput(
                "max range or dropout out of range".into(),
            ));
        }
        Ok(())
    }

    /// Elevation of beam `i`, radians above the horizon.
    pub fn elevation(&self, i: usize) -> f64 {
        let [lo, hi] = self.fov_deg.map(f64::to_radians);
        if self.beams == 1 {
            return 0.5 * (lo + hi);
        }
        lo + i as f64 * (hi - lo) / (self.beams - 1) as f64
    }

    pub fn rays_per_beam(&self) -> usize {
        ((2.0 * PI) / self.azimuth_step).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
    /// Walls and other structure; never foreground.
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub class: ObjectClass,
}

impl SceneBox {
    pub fn aabb(&self) -> Aabb {
        Aabb::from_center_size(self.center, self.size)
    }

    pub fn is_foreground(&self) -> bool {
        self.class != ObjectClass::Background
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub ground_height: f64,
    pub sensor_height: f64,
    pub boxes: Vec<SceneBox>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if !(self.sensor_height > self.ground_height) {
            return Err(Error::InvalidInput(
                "sensor must be above the ground".into(),
            ));
        }
        if let Some(b) = self
            .boxes
            .iter()
            .find(|b| b.size.iter().any(|&s| !(s > 0.0)))
        {
            return Err(Error::InvalidInput(format!(
                "box size {:?} is not positive",
                b.size
            )));
        }
        Ok(())
    }

    /// A street-like scene: four walls 30 m out and 3 to 6 objects within 4 to 12 m.
    pub fn random(rng: &mut RngState) -> Self {
        let mut boxes = walls(30.0, 12.0);
        let count = rng.random_range(3..=6);
        let mut placed: Vec<[f64; 2]> = Vec::new();
        let mut attempts = 0;
        while placed.len() < count && attempts < 200 {
            attempts += 1;
            let r: f64 = rng.random_range(4.0..12.0);
            let a: f64 = rng.random_range(-PI..PI);
            let (x, y) = (r * a.cos(), r * a.sin());
            if placed.iter().any(|c| (c[0] - x).hypot(c[1] - y) < 4.5) {
                continue;
            }
            let (class, size) = match rng.random_range(0..4u32) {
                0 | 1 => (ObjectClass::Car, [4.0, 1.8, 1.5]),
                2 => (ObjectClass::Pedestrian, [0.6, 0.6, 1.7]),
                _ => (ObjectClass::Cyclist, [1.8, 0.6, 1.7]),
            };
            let size = if rng.random::<bool>() {
                size
            } else {
                [size[1], size[0], size[2]]
            };
            placed.push([x, y]);
            boxes.push(SceneBox {
                center: [x, y, 0.5 * size[2]],
                size,
                class,
            });
        }
        Scene {
            ground_height: 0.0,
            sensor_height: 1.73,
            boxes,
        }
    }
}

fn walls(half: f64, height: f64) -> Vec<SceneBox> {
    let t = 1.0;
    let long = 2.0 * (half + t);
    let wall = |center: [f64; 2], size: [f64; 2]| SceneBox {
        center: [center[0], center[1], 0.5 * height],
        size: [size[0], size[1], height],
        class: ObjectClass::Background,
    };
    vec![
        wall([half + 0.5 * t, 0.0], [t, long]),
        wall([-half - 0.5 * t, 0.0], [t, long]),
        wall([0.0, half + 0.5 * t], [long, t]),
        wall([0.0, -half - 0.5 * t], [long, t]),
    ]
}

/// A rendered frame with its foreground boxes in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub boxes: Vec<SceneBox>,
}

impl Frame {
    pub fn aabbs(&self) -> Vec<Aabb> {
        self.boxes.iter().map(SceneBox::aabb).collect()
    }
}

/// Casts every ray of `profile` into `scene` and keeps the nearest hit.
pub fn scan(scene: &Scene, profile: &SensorProfile, rng: &mut RngState) -> Result<Frame> {
    scene.validate()?;
    profile.validate()?;
    let lift = scene.sensor_height;
    let ground_z = scene.ground_height - lift;
    let to_sensor = |b: &SceneBox| SceneBox {
        center: [b.center[0], b.center[1], b.center[2] - lift],
        ..*b
    };
    let local: Vec<SceneBox> = scene.boxes.iter().map(to_sensor).collect();
    let aabbs: Vec<Aabb> = local.iter().map(SceneBox::aabb).collect();

    let rays = profile.rays_per_beam();
    let mut points = Vec::with_capacity(profile.beams * rays);
    for beam in 0..profile.beams {
        let (sin_e, cos_e) = profile.elevation(beam).sin_cos();
        for j in 0..rays {
            let az = wrap_angle(j as f64 * 2.0 * PI / rays as f64);
            let (sin_a, cos_a) = az.sin_cos();
            let dir = [cos_e * cos_a, cos_e * sin_a, sin_e];
            let Some((t, intensity)) = nearest_hit(dir, ground_z, &local, &aabbs) else {
                continue;
            };
            if t > profile.max_range {
                continue;
            }
            if profile.dropout > 0.0 && rng.random::<f64>() < profile.dropout {
                continue;
            }
            points.push(Point::new(t * dir[0], t * dir[1], t * dir[2]).with_intensity(intensity));
        }
    }
    Ok(Frame {
        cloud: PointCloud::new(points),
        boxes: local.into_iter().filter(SceneBox::is_foreground).collect(),
    })
}

fn nearest_hit(
    dir: [f64; 3],
    ground_z: f64,
    boxes: &[SceneBox],
    aabbs: &[Aabb],
) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    if dir[2] < 0.0 {
        best = Some((ground_z / dir[2], GROUND_INTENSITY));
    }
    for (b, aabb) in boxes.iter().zip(aabbs) {
        if let Some(t) = aabb.ray_entry([0.0; 3], dir) {
            if best.is_none_or(|(bt, _)| t < bt) {
                let i = if b.is_foreground() {
                    OBJECT_INTENSITY
                } else {
                    BACKGROUND_INTENSITY
                };
                best = Some((t, i));
            }
        }
    }
    best
}

/// `count` random scenes scanned with `profile`, reproducible from `seed`.
pub fn generate_frames(profile: &SensorProfile, count: usize, seed: u64) -> Result<Vec<Frame>> {
    let root = RngState::new(seed);
    (0..count)
        .map(|i| {
            let mut scene_rng = root.substream(2 * i as u64);
            let scene = Scene::random(&mut scene_rng);
            scan(&scene, profile, &mut root.substream(2 * i as u64 + 1))
        })
        .collect()
}
