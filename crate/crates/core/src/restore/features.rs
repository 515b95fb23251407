//! Fixed feature extractors for the perceptual loss.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::voxel::OccupancyGrid;

/// Number of feature scales.
pub const SCALES: usize = 3;

/// A frozen map from a grid to one feature vector per scale.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, grid: &OccupancyGrid) -> Result<[Vec<f64>; SCALES]>;

    /// Vector-Jacobian product: gradient with respect to the grid values
    /// given upstream gradients on each scale's features.
    fn backward(&self, grid: &OccupancyGrid, upstream: &[Vec<f64>; SCALES]) -> Result<Vec<f64>>;
}

/// Average pooling by 2, 4 and 8 followed by a seeded Gaussian projection
/// of each pooled grid to `dim` values.
pub struct PyramidProjection {
    seed: u64,
    dim: usize,
    cache: Mutex<HashMap<([usize; 3], usize), Arc<Vec<f64>>>>,
}

pub const POOL_FACTORS: [usize; SCALES] = [2, 4, 8];
pub const DEFAULT_FEATURE_DIM: usize = 64;

impl PyramidProjection {
    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, DEFAULT_FEATURE_DIM)
    }

    pub fn with_dim(seed: u64, dim: usize) -> Self {
        assert!(dim > 0);
        Self {
            seed,
            dim,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `dim x pooled_len` projection for one pooled shape.
    fn projection(&self, pooled: [usize; 3], scale: usize) -> Arc<Vec<f64>> {
        let mut cache = self.cache.lock().expect("projection cache poisoned");
        cache
            .entry((pooled, scale))
            .or_insert_with(|| {
                let n: usize = pooled.iter().product();
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.seed ^ (scale as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let s = 1.0 / (n as f64).sqrt();
                Arc::new(
                    (0..self.dim * n)
                        .map(|_| {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            s * g
                        })
                        .collect::<Vec<f64>>(),
                )
            })
            .clone()
    }
}

fn check_dims(grid: &OccupancyGrid) -> Result<()> {
    if grid.dims().iter().any(|d| d % 8 != 0) {
        return Err(Error::Shape(format!(
            "grid dims {:?} are not multiples of 8",
            grid.dims()
        )));
    }
    Ok(())
}

pub(crate) fn avg_pool(values: &[f64], dims: [usize; 3], f: usize) -> (Vec<f64>, [usize; 3]) {
    let out = dims.map(|d| d / f);
    let mut pooled = vec![0.0; out.iter().product()];
    let inv = 1.0 / (f * f * f) as f64;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let row = (y + dims[1] * z) * dims[0];
            let orow = (y / f + out[1] * (z / f)) * out[0];
            for x in 0..dims[0] {
                pooled[orow + x / f] += values[row + x] * inv;
            }
        }
    }
    (pooled, out)
}

fn avg_pool_backward(grad_pooled: &[f64], dims: [usize; 3], f: usize, out: &mut [f64]) {
    let pd = dims.map(|d| d / f);
    let inv = 1.0 / (f * f * f) as f64;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let row = (y + dims[1] * z) * dims[0];
            let prow = (y / f + pd[1] * (z / f)) * pd[0];
            for x in 0..dims[0] {
                out[row + x] += grad_pooled[prow + x / f] * inv;
            }
        }
    }
}

impl FeatureExtractor for PyramidProjection {
    fn features(&self, grid: &OccupancyGrid) -> Result<[Vec<f64>; SCALES]> {
        check_dims(grid)?;
        let mut out: [Vec<f64>; SCALES] = Default::default();
        for (s, &f) in POOL_FACTORS.iter().enumerate() {
            let (pooled, pd) = avg_pool(grid.values(), grid.dims(), f);
            let p = self.projection(pd, s);
            let n = pooled.len();
            out[s] = (0..self.dim)
                .map(|r| {
                    p[r * n..(r + 1) * n]
                        .iter()
                        .zip(&pooled)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
        }
        Ok(out)
    }

    fn backward(&self, grid: &OccupancyGrid, upstream: &[Vec<f64>; SCALES]) -> Result<Vec<f64>> {
        check_dims(grid)?;
        let mut grad = vec![0.0; grid.values().len()];
        for (s, &f) in POOL_FACTORS.iter().enumerate() {
            if upstream[s].len() != self.dim {
                return Err(Error::Shape(format!(
                    "upstream scale {s} has {} values, expected {}",
                    upstream[s].len(),
                    self.dim
                )));
            }
            let pd = grid.dims().map(|d| d / f);
            let n: usize = pd.iter().product();
            let p = self.projection(pd, s);
            let mut gp = vec![0.0; n];
            for (r, &u) in upstream[s].iter().enumerate() {
                if u != 0.0 {
                    for (g, a) in gp.iter_mut().zip(&p[r * n..(r + 1) * n]) {
                        *g += u * a;
                    }
                }
            }
            avg_pool_backward(&gp, grid.dims(), f, &mut grad);
        }
        Ok(grad)
    }
}
