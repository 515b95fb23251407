//! Two-stage training: proxy detection, then self-supervised restoration.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureExtractor, PyramidProjection};
use super::model::{Evaluation, Mode, Objective, Perceptual, RestorationModel, Trainable};
use super::optim::{one_cycle, Adam};
use crate::beams::{fit_beam_model, label_bins, BeamModel};
use crate::error::{Error, Result};
use crate::geom::{Aabb, PointCloud};
use crate::pdda::{downsample, pdda_augment};
use crate::rng::RngState;
use crate::synth::Frame;
use crate::voxel::{voxelize, GridSpec, OccupancyGrid};

/// Points within this distance of a box count as foreground.
pub const FG_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub grid: GridSpec,
    pub beams: usize,
    pub det_epochs: usize,
    pub ssl_epochs: usize,
    pub det_lr: f64,
    pub ssl_lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// Down-sampling factors for the restoration inputs.
    pub ssl_factors: Vec<u32>,
    pub lambda1: f64,
    pub momentum: f64,
    pub seed: u64,
    pub feature_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::desk(),
            beams: 64,
            det_epochs: 30,
            ssl_epochs: 5,
            det_lr: 0.01,
            ssl_lr: 0.01,
            batch_size: 4,
            dropout: 0.1,
            ssl_factors: vec![3, 4, 6],
            lambda1: 1.0,
            momentum: 0.1,
            seed: 0,
            feature_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.beams == 0 {
            return bad("beams must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, lr) in [("det_lr", self.det_lr), ("ssl_lr", self.ssl_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be a positive number, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.ssl_factors.is_empty() || self.ssl_factors.iter().any(|&c| c < 1) {
            return bad("ssl_factors must be a nonempty list of positive integers".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad(format!("lambda1 must be nonnegative, got {}", self.lambda1));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return bad(format!("momentum must be in (0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

/// One training frame: a cloud and its foreground boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub cloud: PointCloud,
    pub boxes: Vec<Aabb>,
}

impl From<&Frame> for TrainSample {
    fn from(f: &Frame) -> Self {
        Self {
            cloud: f.cloud.clone(),
            boxes: f.aabbs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Detection,
    Restoration,
}

/// Batch-averaged losses of one epoch. Terms a stage does not optimise are
/// left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub det: Option<f64>,
    pub mse: Option<f64>,
    pub pcp: Option<f64>,
    pub self_loss: Option<f64>,
    pub degenerate_features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Restoration loss on the fixed evaluation set before and after the
    /// restoration stage (eval mode). `None` when that stage did not run.
    pub ssl_initial: Option<f64>,
    pub ssl_final: Option<f64>,
}

impl TrainReport {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::InvalidInput(format!("writing report: {e}"));
        out.write_record([
            "epoch",
            "stage",
            "det",
            "mse",
            "pcp",
            "self",
            "degenerate_features",
            "seed",
        ])
        .map_err(io)?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        for r in &self.epochs {
            let stage = match r.stage {
                Stage::Detection => "detection",
                Stage::Restoration => "restoration",
            };
            out.write_record([
                r.epoch.to_string(),
                stage.to_string(),
                f(r.det),
                f(r.mse),
                f(r.pcp),
                f(r.self_loss),
                r.degenerate_features.to_string(),
                self.seed.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush()
            .map_err(|e| Error::InvalidInput(format!("writing report: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Frames prepared once: fitted beam model and labelled cloud.
struct Prepared<'a> {
    model: BeamModel,
    labelled: PointCloud,
    boxes: &'a [Aabb],
}

fn prepare<'a>(data: &'a [TrainSample], beams: usize) -> Result<Vec<Prepared<'a>>> {
    data.iter()
        .map(|s| {
            let model = fit_beam_model(&s.cloud, beams)?;
            let labelled = label_bins(&s.cloud, &model)?;
            Ok(Prepared {
                model,
                labelled,
                boxes: &s.boxes,
            })
        })
        .collect()
}

/// Foreground occupancy: voxels holding a point inside any box.
pub fn foreground_mask(cloud: &PointCloud, boxes: &[Aabb], spec: &GridSpec) -> OccupancyGrid {
    let fg = PointCloud::new(
        cloud
            .points
            .iter()
            .filter(|p| boxes.iter().any(|b| b.contains(p, FG_MARGIN)))
            .copied()
            .collect(),
    );
    voxelize(&fg, spec)
}

/// Adam over the concatenation of the trainable groups.
pub(crate) struct GroupOptimizer {
    which: Trainable,
    adam: Adam,
}

impl GroupOptimizer {
    pub(crate) fn new(model: &RestorationModel, which: Trainable) -> Self {
        use super::model::Group;
        let mut len = 0;
        if which.encoder {
            len += model.params(Group::Encoder).len();
        }
        if which.decoder {
            len += model.params(Group::Decoder).len();
        }
        if which.head {
            len += model.params(Group::Head).len();
        }
        Self {
            which,
            adam: Adam::new(len),
        }
    }

    pub(crate) fn step(&mut self, model: &mut RestorationModel, eval: &Evaluation, lr: f64) {
        use super::model::Group;
        let grads = eval.grads.flatten(self.which);
        let mut params = Vec::with_capacity(grads.len());
        let groups = [
            (self.which.encoder, Group::Encoder),
            (self.which.decoder, Group::Decoder),
            (self.which.head, Group::Head),
        ];
        for &(on, g) in &groups {
            if on {
                params.extend_from_slice(model.params(g));
            }
        }
        self.adam.step(&mut params, &grads, lr);
        let mut at = 0;
        for &(on, g) in &groups {
            if on {
                let dst = model.params_mut(g);
                let n = dst.len();
                dst.copy_from_slice(&params[at..at + n]);
                at += n;
            }
        }
    }
}

fn ssl_pair(
    p: &Prepared<'_>,
    cloud: &PointCloud,
    cfg: &TrainConfig,
    rng: &RngState,
) -> Result<(OccupancyGrid, OccupancyGrid)> {
    let mut pick = rng.substream(0);
    let factor = cfg.ssl_factors[pick.random_range(0..cfg.ssl_factors.len())];
    let offset = pick.random_range(0..factor);
    let relabelled = label_bins(cloud, &p.model)?;
    let down = downsample(
        &relabelled,
        &p.model,
        factor,
        cfg.dropout,
        offset,
        &mut rng.substream(1),
    )?;
    Ok((voxelize(&down, &cfg.grid), voxelize(cloud, &cfg.grid)))
}

fn check_finite(stage: &'static str, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage,
            at: format!("epoch {epoch}"),
            loss,
        })
    }
}

/// Mean eval-mode restoration loss over fixed (input, target) pairs.
fn ssl_score(
    model: &RestorationModel,
    pairs: &[(OccupancyGrid, OccupancyGrid)],
    fx: &dyn FeatureExtractor,
    lambda1: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (input, target) in pairs {
        total += model.loss(
            &Objective::Restoration {
                inputs: std::slice::from_ref(input),
                targets: std::slice::from_ref(target),
                perceptual: Some(Perceptual {
                    extractor: fx,
                    weight: lambda1,
                }),
            },
            Mode::Eval,
        )?;
    }
    Ok(total / pairs.len() as f64)
}

/// Stage 1 fits encoder and head to the proxy detection loss on PDDA-augmented
/// frames. Stage 2 fits the decoder alone to restore each augmented frame from
/// a density-downsampled copy; encoder weights and head stay fixed while the
/// encoder's running statistics keep updating.
pub fn train_two_stage(
    model: &mut RestorationModel,
    data: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_two_stage_observed(model, data, cfg, &mut |_, _| {})
}

/// [`train_two_stage`], calling `observer` with the model at the end of each
/// stage.
pub fn train_two_stage_observed(
    model: &mut RestorationModel,
    data: &[TrainSample],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(Stage, &RestorationModel),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty".into()));
    }
    let prepared = prepare(data, cfg.beams)?;
    let root = RngState::new(cfg.seed);
    let fx = PyramidProjection::new(cfg.feature_seed);
    let mut report = TrainReport {
        seed: cfg.seed,
        epochs: Vec::new(),
        ssl_initial: None,
        ssl_final: None,
    };
    let batches = prepared.len().div_ceil(cfg.batch_size);

    let det_rng = root.substream(1);
    let mut opt = GroupOptimizer::new(model, Trainable::DETECTION);
    let total = cfg.det_epochs * batches;
    for epoch in 0..cfg.det_epochs {
        let epoch_rng = det_rng.substream(epoch as u64);
        let mut sum = 0.0;
        for (b, chunk) in prepared.chunks(cfg.batch_size).enumerate() {
            let mut grids = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for (i, p) in chunk.iter().enumerate() {
                let idx = b * cfg.batch_size + i;
                let (aug, _) = pdda_augment(
                    &p.labelled,
                    &p.model,
                    cfg.dropout,
                    &epoch_rng.substream(idx as u64),
                )?;
                grids.push(voxelize(&aug, &cfg.grid));
                masks.push(foreground_mask(&aug, p.boxes, &cfg.grid));
            }
            let eval = model.evaluate(
                &Objective::Detection {
                    inputs: &grids,
                    masks: &masks,
                },
                Mode::Train,
                Trainable::DETECTION,
            )?;
            check_finite("detection", epoch, eval.loss)?;
            let lr = one_cycle(cfg.det_lr, epoch * batches + b, total);
            opt.step(model, &eval, lr);
            model.commit_norm_stats(eval.batch_stats.as_deref().expect("train mode"));
            sum += eval.loss * chunk.len() as f64;
        }
        report.epochs.push(EpochRecord {
            epoch,
            stage: Stage::Detection,
            det: Some(sum / prepared.len() as f64),
            mse: None,
            pcp: None,
            self_loss: None,
            degenerate_features: 0,
        });
    }

    observer(Stage::Detection, model);

    if cfg.ssl_epochs > 0 {
        let ssl_rng = root.substream(2);
        let fixed_rng = root.substream(3);
        let fixed = prepared
            .iter()
            .enumerate()
            .map(|(i, p)| ssl_pair(p, &p.labelled, cfg, &fixed_rng.substream(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        report.ssl_initial = Some(ssl_score(model, &fixed, &fx, cfg.lambda1)?);

        let mut opt = GroupOptimizer::new(model, Trainable::RESTORATION);
        let total = cfg.ssl_epochs * batches;
        for epoch in 0..cfg.ssl_epochs {
            let epoch_rng = ssl_rng.substream(epoch as u64);
            let (mut mse, mut pcp, mut all, mut degenerate) = (0.0, 0.0, 0.0, 0);
            for (b, chunk) in prepared.chunks(cfg.batch_size).enumerate() {
                let mut inputs = Vec::with_capacity(chunk.len());
                let mut targets = Vec::with_capacity(chunk.len());
                for (i, p) in chunk.iter().enumerate() {
                    let idx = (b * cfg.batch_size + i) as u64;
                    let frame_rng = epoch_rng.substream(idx);
                    let (aug, _) =
                        pdda_augment(&p.labelled, &p.model, cfg.dropout, &frame_rng.substream(0))?;
                    let (input, target) = ssl_pair(p, &aug, cfg, &frame_rng.substream(1))?;
                    inputs.push(input);
                    targets.push(target);
                }
                let eval = model.evaluate(
                    &Objective::Restoration {
                        inputs: &inputs,
                        targets: &targets,
                        perceptual: Some(Perceptual {
                            extractor: &fx,
                            weight: cfg.lambda1,
                        }),
                    },
                    Mode::Train,
                    Trainable::RESTORATION,
                )?;
                check_finite("restoration", epoch, eval.loss)?;
                let lr = one_cycle(cfg.ssl_lr, epoch * batches + b, total);
                opt.step(model, &eval, lr);
                model.commit_norm_stats(eval.batch_stats.as_deref().expect("train mode"));
                let w = chunk.len() as f64;
                mse += eval.terms.mse * w;
                pcp += eval.terms.pcp * w;
                all += eval.loss * w;
                degenerate += eval.degenerate_features;
            }
            let n = prepared.len() as f64;
            report.epochs.push(EpochRecord {
                epoch: cfg.det_epochs + epoch,
                stage: Stage::Restoration,
                det: None,
                mse: Some(mse / n),
                pcp: Some(pcp / n),
                self_loss: Some(all / n),
                degenerate_features: degenerate,
            });
        }
        report.ssl_final = Some(ssl_score(model, &fixed, &fx, cfg.lambda1)?);
    }
    observer(Stage::Restoration, model);
    Ok(report)
}
