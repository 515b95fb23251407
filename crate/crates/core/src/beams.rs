//! Beam-layer estimation for spinning sensors.
//!
//! Polar angles of all points are gathered, values further than
//! [`OUTLIER_SIGMAS`] population standard deviations from the mean are left
//! out of the range estimate, and the surviving `[min, max]` interval is cut
//! into `M` equal-width bins. Bins are half-open `[lo, hi)` except the last,
//! which also includes its upper edge.

use crate::error::{Error, Result};
use crate::geom::{cart_to_sph, PointCloud};

/// Points whose polar angle deviates from the mean by more than this many
/// standard deviations do not contribute to the fitted range.
pub const OUTLIER_SIGMAS: f64 = 3.1;

/// Width used when a single-bin model is fitted on a perfectly flat layer.
const SINGLE_BIN_PAD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamModel {
    phi_min: f64,
    phi_max: f64,
    edges: Vec<f64>,
}

impl BeamModel {
    /// Builds a uniform model over `[phi_min, phi_max]` with `bins` bins.
    pub fn uniform(phi_min: f64, phi_max: f64, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidInput("bin count must be positive".into()));
        }
        if !(phi_min.is_finite() && phi_max.is_finite()) || phi_min >= phi_max {
            return Err(Error::DegenerateRange(format!(
                "[{phi_min}, {phi_max}] is empty"
            )));
        }
        let width = (phi_max - phi_min) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|k| phi_min + k as f64 * width).collect();
        edges.push(phi_max);
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::DegenerateRange(format!(
                "[{phi_min}, {phi_max}] too narrow for {bins} bins"
            )));
        }
        Ok(Self {
            phi_min,
            phi_max,
            edges,
        })
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn phi_min(&self) -> f64 {
        self.phi_min
    }

    pub fn phi_max(&self) -> f64 {
        self.phi_max
    }

    /// The `M + 1` bin edges, strictly increasing.
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Bin index of a polar angle. Values outside the fitted range clamp to
    /// the boundary bins.
    pub fn bin_of(&self, phi: f64) -> u32 {
        let m = self.bins();
        let last = m - 1;
        if phi.is_nan() || phi <= self.phi_min {
            return 0;
        }
        if phi >= self.phi_max {
            return last as u32;
        }
        let width = (self.phi_max - self.phi_min) / m as f64;
        let mut k = (((phi - self.phi_min) / width) as usize).min(last);
        // the arithmetic guess can be one off near an edge
        while k > 0 && phi < self.edges[k] {
            k -= 1;
        }
        while k < last && phi >= self.edges[k + 1] {
            k += 1;
        }
        k as u32
    }

    /// Counts points per bin for a labelled cloud.
    pub fn counts(&self, cloud: &PointCloud) -> Result<Vec<usize>> {
        let mut counts = vec![0usize; self.bins()];
        for &k in cloud.labels()? {
            counts[k as usize] += 1;
        }
        Ok(counts)
    }
}

/// Polar angles of every point in the cloud.
pub fn polar_angles(cloud: &PointCloud) -> Result<Vec<f64>> {
    cloud
        .points
        .iter()
        .map(|p| cart_to_sph(p).map(|s| s.polar))
        .collect()
}

/// Fits an `bins`-bin model to the vertical angle distribution of `cloud`.
pub fn fit_beam_model(cloud: &PointCloud, bins: usize) -> Result<BeamModel> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput(
            "cannot fit beams to an empty cloud".into(),
        ));
    }
    if bins == 0 {
        return Err(Error::InvalidInput("bin count must be positive".into()));
    }
    let phis = polar_angles(cloud)?;
    let n = phis.len() as f64;
    let mean = phis.iter().sum::<f64>() / n;
    let var = phis.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    let limit = OUTLIER_SIGMAS * var.sqrt();

    let (lo, hi) = phis
        .iter()
        .filter(|p| (*p - mean).abs() <= limit)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
            (lo.min(p), hi.max(p))
        });

    if lo < hi {
        return BeamModel::uniform(lo, hi, bins);
    }
    if bins == 1 {
        return BeamModel::uniform(lo - SINGLE_BIN_PAD, hi + SINGLE_BIN_PAD, 1);
    }
    Err(Error::DegenerateRange(format!(
        "all polar angles equal {lo:.9} rad; cannot split into {bins} bins"
    )))
}

/// Returns a copy of `cloud` carrying one bin label per point.
pub fn label_bins(cloud: &PointCloud, model: &BeamModel) -> Result<PointCloud> {
    let labels = polar_angles(cloud)?
        .into_iter()
        .map(|phi| model.bin_of(phi))
        .collect();
    Ok(PointCloud {
        points: cloud.points.clone(),
        bin_labels: Some(labels),
    })
}

/// Fits a model and labels the cloud against it in one call.
pub fn fit_and_label(cloud: &PointCloud, bins: usize) -> Result<(BeamModel, PointCloud)> {
    let model = fit_beam_model(cloud, bins)?;
    let labelled = label_bins(cloud, &model)?;
    Ok((model, labelled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{sph_to_cart, SphPoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud_from_polar(phis: &[f64]) -> PointCloud {
        PointCloud::new(
            phis.iter()
                .enumerate()
                .map(|(i, &phi)| sph_to_cart(&SphPoint::new(10.0, i as f64 * 0.01, phi)))
                .collect(),
        )
    }

    fn layered_polar(layers: usize, per_layer: usize, lo: f64, hi: f64) -> Vec<f64> {
        let step = (hi - lo) / (layers - 1) as f64;
        (0..layers)
            .flat_map(|l| std::iter::repeat_n(lo + l as f64 * step, per_layer))
            .collect()
    }

    #[test]
    fn recovers_kitti_layers() {
        let lo = (90.0f64 - 2.0).to_radians();
        let hi = (90.0f64 + 24.9).to_radians();
        let cloud = cloud_from_polar(&layered_polar(64, 50, lo, hi));
        let (model, labelled) = fit_and_label(&cloud, 64).unwrap();
        assert!((model.phi_min() - lo).abs() < 1e-12);
        assert!((model.phi_max() - hi).abs() < 1e-12);
        let counts = model.counts(&labelled).unwrap();
        assert!(counts.iter().all(|&c| c == 50), "{counts:?}");
    }

    #[test]
    fn outlier_at_five_sigma_is_ignored() {
        let lo = 1.6;
        let hi = 2.0;
        let mut phis = layered_polar(64, 50, lo, hi);
        let base = fit_beam_model(&cloud_from_polar(&phis), 64).unwrap();
        let n = phis.len() as f64;
        let mean = phis.iter().sum::<f64>() / n;
        let sd = (phis.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
        phis.push(mean + 5.0 * sd);
        let with = fit_beam_model(&cloud_from_polar(&phis), 64).unwrap();
        assert_eq!(base.phi_min(), with.phi_min());
        assert_eq!(base.phi_max(), with.phi_max());
    }

    #[test]
    fn single_layer_single_bin() {
        let cloud = cloud_from_polar(&[1.7; 20]);
        let (model, labelled) = fit_and_label(&cloud, 1).unwrap();
        assert_eq!(model.counts(&labelled).unwrap(), vec![20]);
        assert!(matches!(
            fit_beam_model(&cloud, 4),
            Err(Error::DegenerateRange(_))
        ));
    }

    #[test]
    fn empty_cloud_errors() {
        assert!(matches!(
            fit_beam_model(&PointCloud::default(), 8),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn edge_conventions() {
        let model = BeamModel::uniform(1.0, 2.0, 8).unwrap();
        assert_eq!(model.bin_of(model.edges()[3]), 3);
        assert_eq!(model.bin_of(2.0), 7);
        assert_eq!(model.bin_of(0.5), 0);
        assert_eq!(model.bin_of(2.5), 7);
        for (k, e) in model.edges()[..8].iter().enumerate() {
            assert_eq!(model.bin_of(*e), k as u32);
            let below = e.next_down();
            if k > 0 {
                assert_eq!(model.bin_of(below), k as u32 - 1);
            }
        }
    }

    #[test]
    fn edges_are_uniform_within_a_few_ulp() {
        let model = BeamModel::uniform(0.3, 2.9, 64).unwrap();
        let widths: Vec<f64> = model.edges().windows(2).map(|w| w[1] - w[0]).collect();
        let max = widths.iter().cloned().fold(f64::MIN, f64::max);
        let min = widths.iter().cloned().fold(f64::MAX, f64::min);
        let ulp = 2.9f64.next_up() - 2.9;
        assert!(max - min <= 4.0 * ulp, "spread {}", max - min);
    }

    #[test]
    fn uniform_counts_are_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (lo, hi, m, n) = (1.5, 2.1, 32usize, 10_000usize);
        let model = BeamModel::uniform(lo, hi, m).unwrap();
        let mut counts = vec![0usize; m];
        for _ in 0..n {
            let phi: f64 = rng.random_range(lo..hi);
            counts[model.bin_of(phi) as usize] += 1;
        }
        let p = 1.0 / m as f64;
        let mu = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mu).abs() <= 5.0 * sd, "count {c}");
        }
    }

    #[test]
    fn labelling_is_a_partition_preserving_order() {
        let phis: Vec<f64> = (0..500).map(|i| 1.5 + (i % 37) as f64 * 0.013).collect();
        let cloud = cloud_from_polar(&phis);
        let (model, labelled) = fit_and_label(&cloud, 10).unwrap();
        assert_eq!(labelled.points, cloud.points);
        let counts = model.counts(&labelled).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), cloud.len());
        for (phi, &k) in phis.iter().zip(labelled.labels().unwrap()) {
            let e = model.edges();
            let k = k as usize;
            assert!(e[k] <= *phi + 1e-12);
            assert!(*phi < e[k + 1] + 1e-12);
        }
    }
}
