//! Per-query test-time adaptation.
//!
//! Each query is density-downsampled, the encoder and decoder take a few
//! Adam steps restoring the query from its sparse copy, the frozen head
//! scores the full query with the adapted encoder, and every parameter and
//! running statistic is then put back exactly as it was.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beams::{fit_beam_model, label_bins, BeamModel};
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::pdda::downsample;
use crate::restore::train::GroupOptimizer;
use crate::restore::{Mode, Objective, RestorationModel, Trainable};
use crate::rng::RngState;
use crate::voxel::{voxelize, GridSpec, OccupancyGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    pub n_iter: usize,
    pub lr: f64,
    pub factors: Vec<u32>,
    pub dropout: f64,
    pub beams: usize,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            n_iter: 5,
            lr: 0.001,
            factors: vec![6, 8],
            dropout: 0.1,
            beams: 64,
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "tta lr must be positive, got {}",
                self.lr
            )));
        }
        if self.factors.is_empty() || self.factors.contains(&0) {
            return Err(Error::Config(
                "tta factors must be a nonempty list of positive integers".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "tta dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.beams == 0 {
            return Err(Error::Config("tta beams must be positive".into()));
        }
        Ok(())
    }
}

/// Wall time per stage of one query, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub prepare: f64,
    pub adapt: f64,
    pub infer: f64,
    pub restore: f64,
    pub total: f64,
}

impl StageTimings {
    pub fn stage_sum(&self) -> f64 {
        self.prepare + self.adapt + self.infer + self.restore
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaRecord {
    pub query: usize,
    pub seed: u64,
    pub factor: u32,
    pub offset: u32,
    pub n_iter: usize,
    /// `"adapted"`, or `"no adaptation"` when `n_iter` is zero.
    pub status: String,
    /// Restoration loss before each step and after the last one.
    pub losses: Vec<f64>,
    pub step_seconds: Vec<f64>,
    pub timings: StageTimings,
    pub params_restored: bool,
    /// Latent cells scoring above 0.5.
    pub foreground_cells: usize,
    pub foreground_mean: f64,
}

impl TtaRecord {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }

    /// The record with every wall-clock field zeroed.
    pub fn without_timings(&self) -> Self {
        Self {
            step_seconds: vec![0.0; self.step_seconds.len()],
            timings: StageTimings::default(),
            ..self.clone()
        }
    }
}

pub fn write_jsonl(records: &[TtaRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::InvalidInput(format!("writing records: {e}")))?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TtaRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn divergence(step: usize, loss: f64) -> Error {
    Error::Divergence {
        stage: "adaptation",
        at: format!("step {step}"),
        loss,
    }
}

/// Adapts to one query, scores it, and restores the model.
///
/// `query_index` selects the query's random stream, so a query's result does
/// not depend on which queries ran before it.
pub fn adapt_and_infer(
    model: &mut RestorationModel,
    query: &PointCloud,
    beam_model: &BeamModel,
    spec: &GridSpec,
    cfg: &TtaConfig,
    query_index: usize,
) -> Result<(OccupancyGrid, TtaRecord)> {
    cfg.validate()?;
    if query.is_empty() {
        return Err(Error::EmptyInput("empty cloud".into()));
    }
    let start = Instant::now();
    let snapshot = model.clone();
    let snapshot_bytes = model.to_bytes();

    let rng = RngState::new(cfg.seed).substream(query_index as u64);
    let mut pick = rng.substream(0);
    let factor = cfg.factors[pick.random_range(0..cfg.factors.len())];
    let offset = pick.random_range(0..factor);
    let labelled = label_bins(query, beam_model)?;
    let sparse = downsample(
        &labelled,
        beam_model,
        factor,
        cfg.dropout,
        offset,
        &mut rng.substream(1),
    )?;
    let input = voxelize(&sparse, spec);
    let target = voxelize(query, spec);
    let t_prepare = start.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let adapted = adapt(model, &input, &target, cfg);
    let t_adapt = t0.elapsed().as_secs_f64();
    let (losses, step_seconds) = match adapted {
        Ok(v) => v,
        Err(e) => {
            *model = snapshot;
            return Err(e);
        }
    };

    let t0 = Instant::now();
    let latent = model.encode(&target, Mode::Eval)?;
    let foreground = model.foreground(&latent)?;
    let t_infer = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    *model = snapshot;
    let params_restored = model.to_bytes() == snapshot_bytes;
    let t_restore = t0.elapsed().as_secs_f64();

    let fg = foreground.values();
    let record = TtaRecord {
        query: query_index,
        seed: cfg.seed,
        factor,
        offset,
        n_iter: cfg.n_iter,
        status: if cfg.n_iter == 0 {
            "no adaptation"
        } else {
            "adapted"
        }
        .into(),
        losses,
        step_seconds,
        timings: StageTimings {
            prepare: t_prepare,
            adapt: t_adapt,
            infer: t_infer,
            restore: t_restore,
            total: start.elapsed().as_secs_f64(),
        },
        params_restored,
        foreground_cells: fg.iter().filter(|&&v| v > 0.5).count(),
        foreground_mean: fg.iter().sum::<f64>() / fg.len() as f64,
    };
    Ok((foreground, record))
}

/// `n_iter` Adam steps of the MSE restoration loss over encoder and decoder.
/// Returns the loss before every step plus the loss after the last one.
fn adapt(
    model: &mut RestorationModel,
    input: &OccupancyGrid,
    target: &OccupancyGrid,
    cfg: &TtaConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let objective = Objective::Restoration {
        inputs: std::slice::from_ref(input),
        targets: std::slice::from_ref(target),
        perceptual: None,
    };
    let mut opt = GroupOptimizer::new(model, Trainable::ADAPTATION);
    let mut losses = Vec::with_capacity(cfg.n_iter + 1);
    let mut step_seconds = Vec::with_capacity(cfg.n_iter);
    for step in 0..cfg.n_iter {
        let t = Instant::now();
        let eval = model.evaluate(&objective, Mode::Train, Trainable::ADAPTATION)?;
        if !eval.loss.is_finite() {
            return Err(divergence(step, eval.loss));
        }
        losses.push(eval.loss);
        opt.step(model, &eval, cfg.lr);
        model.commit_norm_stats(eval.batch_stats.as_deref().expect("train mode"));
        step_seconds.push(t.elapsed().as_secs_f64());
    }
    let last = model.loss(&objective, Mode::Train)?;
    if !last.is_finite() {
        return Err(divergence(cfg.n_iter, last));
    }
    losses.push(last);
    Ok((losses, step_seconds))
}

/// Runs [`adapt_and_infer`] over `queries`, each against its own fitted beam
/// model and a private model copy. Results follow input order.
pub fn run_queries(
    model: &RestorationModel,
    queries: &[PointCloud],
    spec: &GridSpec,
    cfg: &TtaConfig,
) -> Result<Vec<(OccupancyGrid, TtaRecord)>> {
    cfg.validate()?;
    queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            if q.is_empty() {
                return Err(Error::EmptyInput(format!("query {i}: empty cloud")));
            }
            let beams = fit_beam_model(q, cfg.beams)?;
            let mut local = model.clone();
            adapt_and_infer(&mut local, q, &beams, spec, cfg, i)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_iter: usize,
    pub frames: usize,
    pub seconds: f64,
    pub fps: f64,
    /// Per-stage totals across all frames.
    pub stages: StageTimings,
}

/// Throughput of the full adapt-and-infer path, one query at a time.
pub fn bench(
    model: &RestorationModel,
    queries: &[PointCloud],
    spec: &GridSpec,
    cfg: &TtaConfig,
) -> Result<(BenchReport, Vec<TtaRecord>)> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(Error::EmptyInput("bench needs at least one query".into()));
    }
    let beam_models = queries
        .iter()
        .map(|q| fit_beam_model(q, cfg.beams))
        .collect::<Result<Vec<_>>>()?;
    let mut local = model.clone();
    let mut stages = StageTimings::default();
    let mut records = Vec::with_capacity(queries.len());
    let start = Instant::now();
    for (i, (q, b)) in queries.iter().zip(&beam_models).enumerate() {
        let (_, r) = adapt_and_infer(&mut local, q, b, spec, cfg, i)?;
        stages.prepare += r.timings.prepare;
        stages.adapt += r.timings.adapt;
        stages.infer += r.timings.infer;
        stages.restore += r.timings.restore;
        stages.total += r.timings.total;
        records.push(r);
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok((
        BenchReport {
            n_iter: cfg.n_iter,
            frames: queries.len(),
            seconds,
            fps: queries.len() as f64 / seconds,
            stages,
        },
        records,
    ))
}
