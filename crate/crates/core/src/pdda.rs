//! Physical-aware density resampling.
//!
//! Down-sampling keeps every `C`-th beam bin and then drops each surviving
//! return with probability `P`. Up-sampling pairs returns in neighbouring
//! bins by azimuth and inserts `S - 1` new layers between them by linear
//! interpolation of `(range, azimuth, polar)`; the azimuth follows the short
//! arc so pairs straddling the `±pi` seam stay physically adjacent.

use std::fmt;

use rand::Rng;

use crate::beams::BeamModel;
use crate::error::{Error, Result};
use crate::geom::{
    cart_to_sph, sph_to_cart, wrap_angle, wrap_angle_diff, Point, PointCloud, SphPoint,
};
use crate::rng::RngState;

/// Default probability of dropping a surviving return during down-sampling.
pub const DEFAULT_DROPOUT: f64 = 0.1;

/// A concrete resampling operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResampleSpec {
    None,
    Down {
        factor: u32,
        dropout: f64,
        offset: u32,
    },
    Up {
        factor: u32,
    },
}

impl ResampleSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ResampleSpec::None => Ok(()),
            ResampleSpec::Down {
                factor,
                dropout,
                offset,
            } => {
                if factor < 1 {
                    return Err(Error::InvalidInput(
                        "down-sampling factor must be >= 1".into(),
                    ));
                }
                if !(0.0..=1.0).contains(&dropout) {
                    return Err(Error::InvalidInput(format!(
                        "dropout probability {dropout} outside [0, 1]"
                    )));
                }
                if offset >= factor {
                    return Err(Error::InvalidInput(format!(
                        "keep offset {offset} must be below factor {factor}"
                    )));
                }
                Ok(())
            }
            ResampleSpec::Up { factor } if factor < 2 => Err(Error::InvalidInput(
                "up-sampling factor must be >= 2".into(),
            )),
            ResampleSpec::Up { .. } => Ok(()),
        }
    }

    /// Short name used on the command line and in logs.
    pub fn name(&self) -> String {
        match self {
            ResampleSpec::None => "none".into(),
            ResampleSpec::Down { factor, .. } => format!("down{factor}"),
            ResampleSpec::Up { factor } => format!("up{factor}"),
        }
    }
}

impl fmt::Display for ResampleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResampleSpec::None => write!(f, "none"),
            ResampleSpec::Down {
                factor,
                dropout,
                offset,
            } => write!(f, "down{factor} (p={dropout}, offset={offset})"),
            ResampleSpec::Up { factor } => write!(f, "up{factor}"),
        }
    }
}

/// How far apart in azimuth two returns may be and still be interpolated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GapThreshold {
    /// Multiple of the median azimuth step between sorted returns of the lower bin.
    MedianSteps(f64),
    Radians(f64),
    Unbounded,
}

impl Default for GapThreshold {
    fn default() -> Self {
        GapThreshold::MedianSteps(2.0)
    }
}

/// Keeps bins with `k % factor == offset`, then drops each survivor with
/// probability `dropout`. Order and labels of survivors are preserved.
pub fn downsample(
    cloud: &PointCloud,
    model: &BeamModel,
    factor: u32,
    dropout: f64,
    offset: u32,
    rng: &mut RngState,
) -> Result<PointCloud> {
    ResampleSpec::Down {
        factor,
        dropout,
        offset,
    }
    .validate()?;
    let labels = checked_labels(cloud, model)?;

    let mut points = Vec::new();
    let mut kept = Vec::new();
    for (p, &k) in cloud.points.iter().zip(labels) {
        if k % factor != offset {
            continue;
        }
        if rng.random::<f64>() < dropout {
            continue;
        }
        points.push(*p);
        kept.push(k);
    }
    Ok(PointCloud {
        points,
        bin_labels: Some(kept),
    })
}

/// Pairs each return of the lower bin with the azimuthally nearest return of
/// the upper bin (wrapping at `±pi`). Ties go to the smaller azimuth, then to
/// the earlier index. Returns `(lower_index, upper_index)` pairs in lower-bin
/// order; pairs wider than `gap` are dropped.
pub fn match_across_bins(lower: &[f64], upper: &[f64], gap: GapThreshold) -> Vec<(usize, usize)> {
    if lower.is_empty() || upper.is_empty() {
        return Vec::new();
    }
    let sorted_lower = sorted_by_azimuth(lower);
    let sorted_upper = sorted_by_azimuth(upper);
    let limit = gap_limit(&sorted_lower, gap);
    match_sorted(&sorted_lower, &sorted_upper, limit)
}

fn sorted_by_azimuth(az: &[f64]) -> Vec<(f64, usize)> {
    let mut v: Vec<(f64, usize)> = az.iter().copied().zip(0..).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    v
}

fn gap_limit(sorted_lower: &[(f64, usize)], gap: GapThreshold) -> f64 {
    match gap {
        GapThreshold::Unbounded => f64::INFINITY,
        GapThreshold::Radians(r) => r,
        GapThreshold::MedianSteps(mult) => {
            if sorted_lower.len() < 2 {
                return f64::INFINITY;
            }
            let mut steps: Vec<f64> = sorted_lower.windows(2).map(|w| w[1].0 - w[0].0).collect();
            let n = steps.len();
            let (below, &mut upper, _) = steps.select_nth_unstable_by(n / 2, f64::total_cmp);
            let median = if n % 2 == 1 {
                upper
            } else {
                let lower = below
                    .iter()
                    .copied()
                    .max_by(f64::total_cmp)
                    .unwrap_or(upper);
                0.5 * (lower + upper)
            };
            mult * median
        }
    }
}

/// Both inputs sorted by azimuth, then index. The successor position only
/// moves forward, so one pass suffices.
fn match_sorted(
    sorted_lower: &[(f64, usize)],
    sorted_upper: &[(f64, usize)],
    limit: f64,
) -> Vec<(usize, usize)> {
    let n = sorted_upper.len();
    // first index of each run of equal azimuths
    let mut run_start = vec![0; n];
    for j in 1..n {
        run_start[j] = if sorted_upper[j].0 == sorted_upper[j - 1].0 {
            run_start[j - 1]
        } else {
            j
        };
    }
    let mut matched = vec![None; sorted_lower.len()];
    let mut pos = 0;
    for &(a, i) in sorted_lower {
        while pos < n && sorted_upper[pos].0 < a {
            pos += 1;
        }
        let succ = sorted_upper[pos % n];
        let pred = sorted_upper[run_start[(pos + n - 1) % n]];
        let d_succ = wrap_angle_diff(a, succ.0).abs();
        let d_pred = wrap_angle_diff(a, pred.0).abs();
        let (best, dist) = if d_pred < d_succ || (d_pred == d_succ && pred.0 < succ.0) {
            (pred, d_pred)
        } else {
            (succ, d_succ)
        };
        if dist <= limit {
            matched[i] = Some(best.1);
        }
    }
    matched
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect()
}

/// Inserts `factor - 1` interpolated layers between every pair of adjacent
/// non-empty bins. Originals come first, unchanged; the result is unlabelled.
pub fn upsample(cloud: &PointCloud, model: &BeamModel, factor: u32) -> Result<PointCloud> {
    upsample_with_gap(cloud, model, factor, GapThreshold::default())
}

pub fn upsample_with_gap(
    cloud: &PointCloud,
    model: &BeamModel,
    factor: u32,
    gap: GapThreshold,
) -> Result<PointCloud> {
    ResampleSpec::Up { factor }.validate()?;
    let labels = checked_labels(cloud, model)?;
    let m = model.bins();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &k) in labels.iter().enumerate() {
        members[k as usize].push(i);
    }
    if members.iter().filter(|b| !b.is_empty()).count() < 2 {
        return Ok(cloud.clone());
    }

    let sph: Vec<SphPoint> = cloud
        .points
        .iter()
        .map(cart_to_sph)
        .collect::<Result<_>>()?;

    let sorted: Vec<Vec<(f64, usize)>> = members
        .iter()
        .map(|idx| sorted_by_azimuth(&idx.iter().map(|&i| sph[i].azimuth).collect::<Vec<_>>()))
        .collect();

    let mut out = cloud.points.clone();
    out.reserve(cloud.len() * (factor as usize - 1));
    for k in 0..m.saturating_sub(1) {
        if members[k].is_empty() || members[k + 1].is_empty() {
            continue;
        }
        let limit = gap_limit(&sorted[k], gap);
        for (i, j) in match_sorted(&sorted[k], &sorted[k + 1], limit) {
            let a = members[k][i];
            let b = members[k + 1][j];
            for s in 1..factor {
                let lambda = s as f64 / factor as f64;
                out.push(interpolate(
                    &sph[a],
                    &sph[b],
                    cloud.points[a].intensity,
                    cloud.points[b].intensity,
                    lambda,
                ));
            }
        }
    }
    Ok(PointCloud::new(out))
}

/// `lambda * a + (1 - lambda) * b` in spherical coordinates.
fn interpolate(a: &SphPoint, b: &SphPoint, ia: Option<f64>, ib: Option<f64>, lambda: f64) -> Point {
    let mix = |x: f64, y: f64| lambda * x + (1.0 - lambda) * y;
    let azimuth = wrap_angle(a.azimuth + (1.0 - lambda) * wrap_angle_diff(a.azimuth, b.azimuth));
    let s = SphPoint::new(mix(a.range, b.range), azimuth, mix(a.polar, b.polar));
    let mut p = sph_to_cart(&s);
    if let (Some(x), Some(y)) = (ia, ib) {
        p.intensity = Some(mix(x, y));
    }
    p
}

/// Applies a resampling spec.
pub fn resample(
    cloud: &PointCloud,
    model: &BeamModel,
    spec: &ResampleSpec,
    rng: &mut RngState,
) -> Result<PointCloud> {
    match *spec {
        ResampleSpec::None => Ok(cloud.clone()),
        ResampleSpec::Down {
            factor,
            dropout,
            offset,
        } => downsample(cloud, model, factor, dropout, offset, rng),
        ResampleSpec::Up { factor } => upsample(cloud, model, factor),
    }
}

/// Draws one of {2x down, 3x down, none, 2x up} uniformly and applies it.
///
/// The choice and keep offset come from `rng.substream(0)`; the operation
/// itself consumes `rng.substream(1)`, so replaying the returned spec through
/// [`resample`] with that sub-stream reproduces the output.
pub fn pdda_augment(
    cloud: &PointCloud,
    model: &BeamModel,
    dropout: f64,
    rng: &RngState,
) -> Result<(PointCloud, ResampleSpec)> {
    let spec = draw_policy(dropout, rng);
    let out = resample(cloud, model, &spec, &mut rng.substream(1))?;
    Ok((out, spec))
}

/// The policy draw of [`pdda_augment`] without applying it.
pub fn draw_policy(dropout: f64, rng: &RngState) -> ResampleSpec {
    let mut policy = rng.substream(0);
    let down = |factor: u32, policy: &mut RngState| ResampleSpec::Down {
        factor,
        dropout,
        offset: policy.random_range(0..factor),
    };
    match policy.random_range(0..4u32) {
        0 => down(2, &mut policy),
        1 => down(3, &mut policy),
        2 => ResampleSpec::None,
        _ => ResampleSpec::Up { factor: 2 },
    }
}

fn checked_labels<'a>(cloud: &'a PointCloud, model: &BeamModel) -> Result<&'a [u32]> {
    let labels = cloud.labels()?;
    let m = model.bins() as u32;
    if let Some(bad) = labels.iter().find(|&&k| k >= m) {
        return Err(Error::InvalidInput(format!(
            "bin label {bad} out of range for a {m}-bin model"
        )));
    }
    Ok(labels)
}
