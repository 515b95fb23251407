//! Training objectives.

use super::features::FeatureExtractor;
use super::model::{Mode, Objective, Perceptual, RestorationModel};
use crate::error::Result;
use crate::voxel::OccupancyGrid;

/// Probability clamp used inside the logarithms of the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy and its gradient with respect to the logits.
/// Entries whose probability hit the clamp get zero gradient.
pub fn bce_with_grad(probs: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(probs.len(), targets.len());
    let n = probs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(targets) {
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        grad.push(if pc == p { (p - y) / n } else { 0.0 });
    }
    (loss / n, grad)
}

pub fn bce(probs: &[f64], targets: &[f64]) -> f64 {
    bce_with_grad(probs, targets).0
}

/// `1 - cos(a, b)` and its gradient with respect to `a`. When either vector
/// has zero norm the term is 1 and no gradient is returned.
pub fn cosine_term(a: &[f64], b: &[f64]) -> (f64, Option<Vec<f64>>) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (1.0, None);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(y / (na * nb) - cos * x / (na * na)))
        .collect();
    (1.0 - cos, Some(grad))
}

/// Perceptual distance between two grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerceptualLoss {
    pub value: f64,
    /// Scales where a feature vector had zero norm.
    pub degenerate: usize,
}

pub fn loss_pcp(
    extractor: &dyn FeatureExtractor,
    restored: &OccupancyGrid,
    target: &OccupancyGrid,
) -> Result<PerceptualLoss> {
    let fr = extractor.features(restored)?;
    let ft = extractor.features(target)?;
    let mut out = PerceptualLoss {
        value: 0.0,
        degenerate: 0,
    };
    for (a, b) in fr.iter().zip(&ft) {
        let (v, g) = cosine_term(a, b);
        out.value += v;
        out.degenerate += usize::from(g.is_none());
    }
    Ok(out)
}

/// Proxy detection loss of one augmented grid against its foreground mask.
pub fn loss_det_proxy(
    model: &RestorationModel,
    grid: &OccupancyGrid,
    fg_mask: &OccupancyGrid,
    mode: Mode,
) -> Result<f64> {
    model.loss(
        &Objective::Detection {
            inputs: std::slice::from_ref(grid),
            masks: std::slice::from_ref(fg_mask),
        },
        mode,
    )
}

/// Voxel-mean squared error of the restoration of `input` against `target`.
pub fn loss_mse(
    model: &RestorationModel,
    input: &OccupancyGrid,
    target: &OccupancyGrid,
    mode: Mode,
) -> Result<f64> {
    model.loss(
        &Objective::Restoration {
            inputs: std::slice::from_ref(input),
            targets: std::slice::from_ref(target),
            perceptual: None,
        },
        mode,
    )
}

/// `mse + weight * pcp` for the restoration of `input`.
pub fn loss_self(
    model: &RestorationModel,
    extractor: &dyn FeatureExtractor,
    input: &OccupancyGrid,
    target: &OccupancyGrid,
    weight: f64,
    mode: Mode,
) -> Result<f64> {
    model.loss(
        &Objective::Restoration {
            inputs: std::slice::from_ref(input),
            targets: std::slice::from_ref(target),
            perceptual: Some(Perceptual { extractor, weight }),
        },
        mode,
    )
}
