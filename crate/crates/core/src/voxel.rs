//! Dense binary occupancy grids.
//!
//! Values are stored x-fastest: `index = x + nx * (y + ny * z)`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PointCloud;

/// Spatial extent and resolution of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpecDef", into = "GridSpecDef")]
pub struct GridSpec {
    range_min: [f64; 3],
    range_max: [f64; 3],
    voxel_size: [f64; 3],
    dims: [usize; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpecDef {
    range_min: [f64; 3],
    range_max: [f64; 3],
    voxel_size: [f64; 3],
}

impl TryFrom<GridSpecDef> for GridSpec {
    type Error = Error;

    fn try_from(d: GridSpecDef) -> Result<Self> {
        GridSpec::new(d.range_min, d.range_max, d.voxel_size)
    }
}

impl From<GridSpec> for GridSpecDef {
    fn from(g: GridSpec) -> Self {
        GridSpecDef {
            range_min: g.range_min,
            range_max: g.range_max,
            voxel_size: g.voxel_size,
        }
    }
}

impl GridSpec {
    /// Every dimension must be a positive multiple of 8.
    pub fn new(range_min: [f64; 3], range_max: [f64; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let (lo, hi, v) = (range_min[a], range_max[a], voxel_size[a]);
            if !(lo.is_finite() && hi.is_finite() && v.is_finite()) || hi <= lo || v <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "axis {a}: range [{lo}, {hi}] with voxel {v} is invalid"
                )));
            }
            let n = ((hi - lo) / v).round();
            if n < 1.0 || n > u32::MAX as f64 {
                return Err(Error::InvalidInput(format!("axis {a}: {n} voxels")));
            }
            dims[a] = n as usize;
            if dims[a] % 8 != 0 {
                return Err(Error::Shape(format!(
                    "axis {a} has {} voxels, not divisible by 8",
                    dims[a]
                )));
            }
        }
        Ok(Self {
            range_min,
            range_max,
            voxel_size,
            dims,
        })
    }

    /// 25.6 x 25.6 x 4.8 m around the sensor at 0.2 x 0.2 x 0.3 m (128 x 128 x 16).
    pub fn desk() -> Self {
        Self::new([-12.8, -12.8, -2.0], [12.8, 12.8, 2.8], [0.2, 0.2, 0.3])
            .expect("valid desk grid")
    }

    /// The full-range grid used with real sensors (1504 x 1504 x 40).
    pub fn full_scale() -> Self {
        Self::new([-75.2, -75.2, -2.0], [75.2, 75.2, 4.0], [0.1, 0.1, 0.15])
            .expect("valid full-scale grid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range_min(&self) -> [f64; 3] {
        self.range_min
    }

    pub fn range_max(&self) -> [f64; 3] {
        self.range_max
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    /// Same extent with voxels `factor` times larger per axis.
    pub fn coarsened(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            range_min: self.range_min,
            range_max: self.range_max,
            voxel_size: self.voxel_size.map(|v| v * f),
            dims: self.dims.map(|d| d / factor),
        }
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Voxel containing a point, or `None` when it lies outside the range.
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let c = p[a];
            if !(c >= self.range_min[a] && c <= self.range_max[a]) {
                return None;
            }
            let i = ((c - self.range_min[a]) / self.voxel_size[a]).floor() as usize;
            idx[a] = i.min(self.dims[a] - 1);
        }
        Some(idx)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let i = [x, y, z];
        std::array::from_fn(|a| self.range_min[a] + (i[a] as f64 + 0.5) * self.voxel_size[a])
    }
}

/// A dense grid of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    spec: GridSpec,
    values: Vec<f64>,
}

impl OccupancyGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            values: vec![0.0; spec.len()],
        }
    }

    pub fn filled(spec: GridSpec, v: f64) -> Self {
        Self {
            spec,
            values: vec![v; spec.len()],
        }
    }

    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::Shape(format!(
                "{} values for a grid of {}",
                values.len(),
                spec.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "grid value {v} outside [0, 1]"
            )));
        }
        Ok(Self { spec, values })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dims(&self) -> [usize; 3] {
        self.spec.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.spec.index(x, y, z)]
    }

    pub fn occupied(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    /// Max-pools by `factor` on every axis.
    pub fn max_pool(&self, factor: usize) -> OccupancyGrid {
        let spec = self.spec.coarsened(factor);
        let [nx, ny, nz] = self.dims();
        let mut out = OccupancyGrid::zeros(spec);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = self.values[self.spec.index(x, y, z)];
                    let o = spec.index(x / factor, y / factor, z / factor);
                    if v > out.values[o] {
                        out.values[o] = v;
                    }
                }
            }
        }
        out
    }

    /// Writes the 3 x u32 little-endian dimension header followed by f32
    /// little-endian values in x-fastest order.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for d in self.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for &v in &self.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads a grid written by [`OccupancyGrid::write_to`]. The header must
    /// match `spec`.
    pub fn read_from(spec: GridSpec, mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::InvalidInput(format!("reading grid: {e}")))?;
        if bytes.len() < 12 {
            return Err(Error::Shape("grid header truncated".into()));
        }
        let dims: Vec<usize> = bytes[..12]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if dims != spec.dims() {
            return Err(Error::Shape(format!(
                "grid header {dims:?} does not match {:?}",
                spec.dims()
            )));
        }
        let payload = &bytes[12..];
        if payload.len() != spec.len() * 4 {
            return Err(Error::Shape(format!(
                "grid payload holds {} bytes, expected {}",
                payload.len(),
                spec.len() * 4
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_values(spec, values)
    }
}

/// Marks every voxel containing at least one in-range point.
pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> OccupancyGrid {
    let mut grid = OccupancyGrid::zeros(*spec);
    for p in &cloud.points {
        if let Some([x, y, z]) = spec.voxel_of([p.x, p.y, p.z]) {
            grid.values[spec.index(x, y, z)] = 1.0;
        }
    }
    grid
}

/// Mean squared difference over all voxels.
pub fn grid_mse(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64> {
    if a.spec != b.spec {
        return Err(Error::Shape(format!(
            "grids {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    let sum: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.values.len() as f64)
}
