//! The occupancy autoencoder and its foreground head.
//!
//! Encoder: three blocks of strided 3x3x3 convolution (no bias), batch
//! normalisation and ReLU with channels 1 -> 8 -> 16 -> 16, reducing every
//! spatial axis by 8. Decoder: three transposed 3x3x3 convolutions with bias,
//! channels 16 -> 16 -> 8 -> 1, ReLU between blocks and a logistic output.
//! Head: a 1x1x1 convolution 16 -> 1 with logistic output on the latent grid.

use std::ops::Range;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::features::FeatureExtractor;
use super::layers::{
    add_bias, channel_sums, correlate, gather, relu_backward, relu_in_place, scatter, sigmoid,
    Volume, TAPS,
};
use super::loss::{bce_with_grad, cosine_term};
use crate::error::{Error, Result};
use crate::voxel::{GridSpec, OccupancyGrid};

pub const ENCODER_CHANNELS: [usize; 4] = [1, 8, 16, 16];
pub const DECODER_CHANNELS: [usize; 4] = [16, 16, 8, 1];
pub const LATENT_CHANNELS: usize = 16;
/// Spatial reduction of the encoder per axis.
pub const REDUCTION: usize = 8;
pub const NORM_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with stored running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Decoder,
    Head,
    NormStats,
}

/// One named slice of a parameter group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerEntry {
    pub name: String,
    pub group: Group,
    pub offset: usize,
    pub len: usize,
}

struct Layout {
    enc_conv: [Range<usize>; 3],
    enc_gamma: [Range<usize>; 3],
    enc_beta: [Range<usize>; 3],
    enc_len: usize,
    dec_weight: [Range<usize>; 3],
    dec_bias: [Range<usize>; 3],
    dec_len: usize,
    head_weight: Range<usize>,
    head_bias: Range<usize>,
    head_len: usize,
    entries: Vec<LayerEntry>,
}

fn layout() -> &'static Layout {
    static LAYOUT: OnceLock<Layout> = OnceLock::new();
    LAYOUT.get_or_init(|| {
        let mut entries = Vec::new();
        let mut push = |name: String, group: Group, offset: &mut usize, len: usize| {
            entries.push(LayerEntry {
                name,
                group,
                offset: *offset,
                len,
            });
            let r = *offset..*offset + len;
            *offset += len;
            r
        };

        let mut off = 0;
        let mut enc_conv: [Range<usize>; 3] = Default::default();
        let mut enc_gamma: [Range<usize>; 3] = Default::default();
        let mut enc_beta: [Range<usize>; 3] = Default::default();
        for b in 0..3 {
            let (ci, co) = (ENCODER_CHANNELS[b], ENCODER_CHANNELS[b + 1]);
            enc_conv[b] = push(
                format!("encoder.conv{}.weight", b + 1),
                Group::Encoder,
                &mut off,
                co * ci * TAPS,
            );
            enc_gamma[b] = push(
                format!("encoder.norm{}.weight", b + 1),
                Group::Encoder,
                &mut off,
                co,
            );
            enc_beta[b] = push(
                format!("encoder.norm{}.bias", b + 1),
                Group::Encoder,
                &mut off,
                co,
            );
        }
        let enc_len = off;

        let mut off = 0;
        let mut dec_weight: [Range<usize>; 3] = Default::default();
        let mut dec_bias: [Range<usize>; 3] = Default::default();
        for b in 0..3 {
            let (cs, cl) = (DECODER_CHANNELS[b], DECODER_CHANNELS[b + 1]);
            dec_weight[b] = push(
                format!("decoder.deconv{}.weight", b + 1),
                Group::Decoder,
                &mut off,
                cs * cl * TAPS,
            );
            dec_bias[b] = push(
                format!("decoder.deconv{}.bias", b + 1),
                Group::Decoder,
                &mut off,
                cl,
            );
        }
        let dec_len = off;

        let mut off = 0;
        let head_weight = push("head.weight".into(), Group::Head, &mut off, LATENT_CHANNELS);
        let head_bias = push("head.bias".into(), Group::Head, &mut off, 1);
        let head_len = off;

        let mut off = 0;
        for b in 0..3 {
            let c = ENCODER_CHANNELS[b + 1];
            push(
                format!("encoder.norm{}.running_mean", b + 1),
                Group::NormStats,
                &mut off,
                c,
            );
            push(
                format!("encoder.norm{}.running_var", b + 1),
                Group::NormStats,
                &mut off,
                c,
            );
        }

        Layout {
            enc_conv,
            enc_gamma,
            enc_beta,
            enc_len,
            dec_weight,
            dec_bias,
            dec_len,
            head_weight,
            head_bias,
            head_len,
            entries,
        }
    })
}

/// The fixed architecture map: every named parameter slice in storage order.
pub fn layer_map() -> &'static [LayerEntry] {
    &layout().entries
}

/// Running statistics of one normalisation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Encoder output together with the grid it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub features: Volume,
    pub spec: GridSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestorationModel {
    pub(crate) encoder: Vec<f64>,
    pub(crate) decoder: Vec<f64>,
    pub(crate) head: Vec<f64>,
    pub(crate) norm: Vec<NormStats>,
    pub(crate) momentum: f64,
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub decoder: bool,
    pub head: bool,
}

impl Trainable {
    pub const ALL: Self = Self {
        encoder: true,
        decoder: true,
        head: true,
    };
    pub const NONE: Self = Self {
        encoder: false,
        decoder: false,
        head: false,
    };
    /// Detection stage: encoder and head.
    pub const DETECTION: Self = Self {
        encoder: true,
        decoder: false,
        head: true,
    };
    /// Restoration stage: decoder only.
    pub const RESTORATION: Self = Self {
        encoder: false,
        decoder: true,
        head: false,
    };
    /// Test-time adaptation: encoder and decoder.
    pub const ADAPTATION: Self = Self {
        encoder: true,
        decoder: true,
        head: false,
    };
}

/// Gradients laid out like the parameter groups. Frozen groups stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    pub head: Vec<f64>,
}

impl Gradients {
    fn zeros() -> Self {
        let l = layout();
        Self {
            encoder: vec![0.0; l.enc_len],
            decoder: vec![0.0; l.dec_len],
            head: vec![0.0; l.head_len],
        }
    }

    /// Concatenation of the selected groups in encoder, decoder, head order.
    pub fn flatten(&self, which: Trainable) -> Vec<f64> {
        let mut out = Vec::new();
        if which.encoder {
            out.extend_from_slice(&self.encoder);
        }
        if which.decoder {
            out.extend_from_slice(&self.decoder);
        }
        if which.head {
            out.extend_from_slice(&self.head);
        }
        out
    }
}

/// The weight on the perceptual term and the extractor computing it.
#[derive(Clone, Copy)]
pub struct Perceptual<'a> {
    pub extractor: &'a dyn FeatureExtractor,
    pub weight: f64,
}

/// A loss over a batch of grids.
#[derive(Clone, Copy)]
pub enum Objective<'a> {
    /// Foreground classification of latent cells against max-pooled masks.
    Detection {
        inputs: &'a [OccupancyGrid],
        masks: &'a [OccupancyGrid],
    },
    /// Reconstruct `targets` from `inputs`; MSE plus an optional perceptual term.
    Restoration {
        inputs: &'a [OccupancyGrid],
        targets: &'a [OccupancyGrid],
        perceptual: Option<Perceptual<'a>>,
    },
}

impl Objective<'_> {
    fn inputs(&self) -> &[OccupancyGrid] {
        match self {
            Objective::Detection { inputs, .. } | Objective::Restoration { inputs, .. } => inputs,
        }
    }
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub det: f64,
    pub mse: f64,
    pub pcp: f64,
}

/// Result of evaluating an objective.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub terms: LossTerms,
    pub grads: Gradients,
    /// Perceptual terms whose feature vector had zero norm.
    pub degenerate_features: usize,
    /// Batch statistics of the forward pass (train mode only).
    pub batch_stats: Option<Vec<NormStats>>,
}

struct EncoderBlock {
    /// Normalised pre-activation per sample.
    xhat: Vec<Volume>,
    /// Post-activation per sample.
    out: Vec<Volume>,
    inv_std: Vec<f64>,
}

struct EncoderPass {
    inputs: Vec<Volume>,
    blocks: Vec<EncoderBlock>,
    batch_stats: Option<Vec<NormStats>>,
    mode: Mode,
}

impl EncoderPass {
    fn latents(&self) -> &[Volume] {
        &self.blocks[2].out
    }

    fn block_input(&self, b: usize, s: usize) -> &Volume {
        if b == 0 {
            &self.inputs[s]
        } else {
            &self.blocks[b - 1].out[s]
        }
    }
}

struct DecoderPass {
    hidden: [Volume; 2],
    out: Volume,
}

fn uniform_init(rng: &mut ChaCha8Rng, w: &mut [f64], fan_in: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in w {
        *v = rng.random_range(-bound..bound);
    }
}

impl RestorationModel {
    /// Seeded initialisation: filter weights uniform in `±1/sqrt(fan_in)`,
    /// biases zero, normalisation scale one, running stats `(0, 1)`.
    pub fn new(seed: u64) -> Self {
        Self::with_momentum(seed, DEFAULT_MOMENTUM)
    }

    pub fn with_momentum(seed: u64, momentum: f64) -> Self {
        assert!(
            momentum > 0.0 && momentum < 1.0,
            "momentum must be in (0, 1)"
        );
        let l = layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = vec![0.0; l.enc_len];
        for b in 0..3 {
            uniform_init(
                &mut rng,
                &mut encoder[l.enc_conv[b].clone()],
                ENCODER_CHANNELS[b] * TAPS,
            );
            encoder[l.enc_gamma[b].clone()].fill(1.0);
        }
        let mut decoder = vec![0.0; l.dec_len];
        for b in 0..3 {
            uniform_init(
                &mut rng,
                &mut decoder[l.dec_weight[b].clone()],
                DECODER_CHANNELS[b] * TAPS,
            );
        }
        let mut head = vec![0.0; l.head_len];
        uniform_init(&mut rng, &mut head[l.head_weight.clone()], LATENT_CHANNELS);
        Self {
            encoder,
            decoder,
            head,
            norm: (1..4)
                .map(|b| NormStats::identity(ENCODER_CHANNELS[b]))
                .collect(),
            momentum,
        }
    }

    /// All weights zero, normalisation scale one, running stats `(0, 1)`.
    pub fn zeroed() -> Self {
        let mut m = Self::new(0);
        let l = layout();
        m.encoder.fill(0.0);
        for b in 0..3 {
            m.encoder[l.enc_gamma[b].clone()].fill(1.0);
        }
        m.decoder.fill(0.0);
        m.head.fill(0.0);
        m
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn params(&self, group: Group) -> &[f64] {
        match group {
            Group::Encoder => &self.encoder,
            Group::Decoder => &self.decoder,
            Group::Head => &self.head,
            Group::NormStats => panic!("norm stats are not a flat parameter group"),
        }
    }

    pub fn params_mut(&mut self, group: Group) -> &mut [f64] {
        match group {
            Group::Encoder => &mut self.encoder,
            Group::Decoder => &mut self.decoder,
            Group::Head => &mut self.head,
            Group::NormStats => panic!("norm stats are not a flat parameter group"),
        }
    }

    pub fn norm_stats(&self) -> &[NormStats] {
        &self.norm
    }

    pub fn norm_stats_mut(&mut self) -> &mut [NormStats] {
        &mut self.norm
    }

    /// Folds batch statistics into the running averages.
    pub fn commit_norm_stats(&mut self, batch: &[NormStats]) {
        let m = self.momentum;
        for (run, b) in self.norm.iter_mut().zip(batch) {
            for (r, v) in run.mean.iter_mut().zip(&b.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in run.var.iter_mut().zip(&b.var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }

    /// Encodes one grid. Train mode normalises with the grid's own statistics
    /// and folds them into the running averages; eval mode changes nothing.
    pub fn encode(&mut self, grid: &OccupancyGrid, mode: Mode) -> Result<Latent> {
        let mut pass = self.encoder_forward(std::slice::from_ref(grid), mode)?;
        if let Some(stats) = pass.batch_stats.take() {
            self.commit_norm_stats(&stats);
        }
        let features = pass
            .blocks
            .pop()
            .expect("three blocks")
            .out
            .pop()
            .expect("one sample");
        Ok(Latent {
            features,
            spec: *grid.spec(),
        })
    }

    /// Restores a grid from a latent.
    pub fn decode(&self, latent: &Latent) -> Result<OccupancyGrid> {
        self.check_latent(latent)?;
        let pass = self.decoder_forward(&latent.features);
        OccupancyGrid::from_values(latent.spec, pass.out.data)
    }

    /// Foreground probability per latent cell.
    pub fn foreground(&self, latent: &Latent) -> Result<OccupancyGrid> {
        self.check_latent(latent)?;
        let probs = self.head_forward(&latent.features);
        OccupancyGrid::from_values(latent.spec.coarsened(REDUCTION), probs)
    }

    fn check_latent(&self, latent: &Latent) -> Result<()> {
        let want = latent.spec.dims().map(|d| d / REDUCTION);
        if latent.features.channels != LATENT_CHANNELS || latent.features.dims != want {
            return Err(Error::Shape(format!(
                "latent {}x{:?} does not match {}x{:?}",
                latent.features.channels, latent.features.dims, LATENT_CHANNELS, want
            )));
        }
        Ok(())
    }

    fn check_input(grid: &OccupancyGrid) -> Result<()> {
        if grid.dims().iter().any(|d| d % REDUCTION != 0 || *d == 0) {
            return Err(Error::Shape(format!(
                "grid dims {:?} must be positive multiples of {REDUCTION}",
                grid.dims()
            )));
        }
        Ok(())
    }

    fn encoder_forward(&self, grids: &[OccupancyGrid], mode: Mode) -> Result<EncoderPass> {
        let first = grids
            .first()
            .ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
        for g in grids {
            Self::check_input(g)?;
            if g.spec() != first.spec() {
                return Err(Error::Shape("batch mixes grid specs".into()));
            }
        }
        let l = layout();
        let inputs: Vec<Volume> = grids
            .iter()
            .map(|g| Volume::from_data(1, g.dims(), g.values().to_vec()))
            .collect();
        let mut pass = EncoderPass {
            inputs,
            blocks: Vec::with_capacity(3),
            batch_stats: (mode == Mode::Train).then(Vec::new),
            mode,
        };
        for b in 0..3 {
            let co = ENCODER_CHANNELS[b + 1];
            let w = &self.encoder[l.enc_conv[b].clone()];
            let gamma = &self.encoder[l.enc_gamma[b].clone()];
            let beta = &self.encoder[l.enc_beta[b].clone()];
            let mut z: Vec<Volume> = (0..grids.len())
                .map(|s| gather(pass.block_input(b, s), w, co))
                .collect();

            let (mean, var) = match mode {
                Mode::Train => {
                    let n = (z.len() * z[0].voxels()) as f64;
                    let mut mean = vec![0.0; co];
                    let mut var = vec![0.0; co];
                    for c in 0..co {
                        let mu = z
                            .iter()
                            .map(|v| v.channel(c).iter().sum::<f64>())
                            .sum::<f64>()
                            / n;
                        let s2 = z
                            .iter()
                            .map(|v| {
                                v.channel(c)
                                    .iter()
                                    .map(|x| (x - mu) * (x - mu))
                                    .sum::<f64>()
                            })
                            .sum::<f64>()
                            / n;
                        mean[c] = mu;
                        var[c] = s2;
                    }
                    (mean, var)
                }
                Mode::Eval => (self.norm[b].mean.clone(), self.norm[b].var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let mut out = Vec::with_capacity(z.len());
            for v in &mut z {
                let mut o = Volume::zeros(co, v.dims);
                for c in 0..co {
                    let (mu, is, g, bt) = (mean[c], inv_std[c], gamma[c], beta[c]);
                    let xh = v.channel_mut(c);
                    for x in xh.iter_mut() {
                        *x = (*x - mu) * is;
                    }
                    for (y, x) in o.channel_mut(c).iter_mut().zip(xh.iter()) {
                        *y = (g * x + bt).max(0.0);
                    }
                }
                out.push(o);
            }
            if let Some(stats) = pass.batch_stats.as_mut() {
                stats.push(NormStats { mean, var });
            }
            pass.blocks.push(EncoderBlock {
                xhat: z,
                out,
                inv_std,
            });
        }
        Ok(pass)
    }

    /// Accumulates encoder gradients given upstream gradients on the latents.
    fn encoder_backward(&self, pass: &EncoderPass, mut upstream: Vec<Volume>, grad: &mut [f64]) {
        let l = layout();
        for b in (0..3).rev() {
            let (ci, co) = (ENCODER_CHANNELS[b], ENCODER_CHANNELS[b + 1]);
            let block = &pass.blocks[b];
            let gamma = &self.encoder[l.enc_gamma[b].clone()];
            for (d, out) in upstream.iter_mut().zip(&block.out) {
                relu_backward(d, out);
            }
            let n = (upstream.len() * upstream[0].voxels()) as f64;
            for c in 0..co {
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for (d, xh) in upstream.iter().zip(&block.xhat) {
                    for (dy, x) in d.channel(c).iter().zip(xh.channel(c)) {
                        sum_dy += dy;
                        sum_dy_xhat += dy * x;
                    }
                }
                grad[l.enc_gamma[b].start + c] += sum_dy_xhat;
                grad[l.enc_beta[b].start + c] += sum_dy;
                let scale = gamma[c] * block.inv_std[c];
                for (d, xh) in upstream.iter_mut().zip(&block.xhat) {
                    let dc = d.channel_mut(c);
                    match pass.mode {
                        Mode::Train => {
                            let (mean_dy, mean_dy_xhat) = (sum_dy / n, sum_dy_xhat / n);
                            for (dy, x) in dc.iter_mut().zip(xh.channel(c)) {
                                *dy = scale * (*dy - mean_dy - x * mean_dy_xhat);
                            }
                        }
                        Mode::Eval => dc.iter_mut().for_each(|dy| *dy *= scale),
                    }
                }
            }
            let w_grad = &mut grad[l.enc_conv[b].clone()];
            for (s, dz) in upstream.iter().enumerate() {
                correlate(dz, pass.block_input(b, s), w_grad);
            }
            if b > 0 {
                let w = &self.encoder[l.enc_conv[b].clone()];
                upstream = upstream.iter().map(|dz| scatter(dz, w, ci)).collect();
            }
        }
    }

    fn decoder_forward(&self, latent: &Volume) -> DecoderPass {
        let l = layout();
        let block = |b: usize, x: &Volume| {
            let mut y = scatter(
                x,
                &self.decoder[l.dec_weight[b].clone()],
                DECODER_CHANNELS[b + 1],
            );
            add_bias(&mut y, &self.decoder[l.dec_bias[b].clone()]);
            y
        };
        let mut h1 = block(0, latent);
        relu_in_place(&mut h1);
        let mut h2 = block(1, &h1);
        relu_in_place(&mut h2);
        let mut out = block(2, &h2);
        out.data.iter_mut().for_each(|x| *x = sigmoid(*x));
        DecoderPass {
            hidden: [h1, h2],
            out,
        }
    }

    /// Returns the gradient with respect to the latent.
    fn decoder_backward(
        &self,
        latent: &Volume,
        pass: &DecoderPass,
        d_out: &Volume,
        grad: &mut [f64],
    ) -> Volume {
        let l = layout();
        // through the logistic output
        let mut d = d_out.clone();
        for (g, &y) in d.data.iter_mut().zip(&pass.out.data) {
            *g *= y * (1.0 - y);
        }
        for b in (0..3).rev() {
            channel_sums(&d, &mut grad[l.dec_bias[b].clone()]);
            let small = if b == 0 { latent } else { &pass.hidden[b - 1] };
            correlate(small, &d, &mut grad[l.dec_weight[b].clone()]);
            let mut ds = gather(
                &d,
                &self.decoder[l.dec_weight[b].clone()],
                DECODER_CHANNELS[b],
            );
            if b > 0 {
                relu_backward(&mut ds, &pass.hidden[b - 1]);
            }
            d = ds;
        }
        d
    }

    fn head_forward(&self, latent: &Volume) -> Vec<f64> {
        let l = layout();
        let w = &self.head[l.head_weight.clone()];
        let bias = self.head[l.head_bias.start];
        let mut logits = vec![bias; latent.voxels()];
        for (c, &wc) in w.iter().enumerate() {
            for (z, x) in logits.iter_mut().zip(latent.channel(c)) {
                *z += wc * x;
            }
        }
        logits.into_iter().map(sigmoid).collect()
    }

    /// Evaluates `objective` in `mode` and back-propagates into `trainable`.
    /// The model is not modified; train-mode batch statistics are returned
    /// for [`RestorationModel::commit_norm_stats`].
    pub fn evaluate(
        &self,
        objective: &Objective<'_>,
        mode: Mode,
        trainable: Trainable,
    ) -> Result<Evaluation> {
        let inputs = objective.inputs();
        let mut pass = self.encoder_forward(inputs, mode)?;
        let batch = inputs.len() as f64;
        let mut grads = Gradients::zeros();
        let mut terms = LossTerms::default();
        let mut degenerate = 0;
        let need_latent_grad = trainable.encoder;

        let latent_grads: Vec<Volume> = match *objective {
            Objective::Detection { masks, .. } => {
                if masks.len() != inputs.len() {
                    return Err(Error::Shape("one mask per input grid required".into()));
                }
                let l = layout();
                let mut lg = Vec::new();
                for (latent, (mask, input)) in pass.latents().iter().zip(masks.iter().zip(inputs)) {
                    if mask.spec() != input.spec() {
                        return Err(Error::Shape("mask and grid specs differ".into()));
                    }
                    let target = mask.max_pool(REDUCTION);
                    let probs = self.head_forward(latent);
                    let (loss, d_logit) = bce_with_grad(&probs, target.values());
                    terms.det += loss / batch;
                    let d_logit: Vec<f64> = d_logit.iter().map(|g| g / batch).collect();
                    if trainable.head {
                        for c in 0..LATENT_CHANNELS {
                            grads.head[l.head_weight.start + c] += d_logit
                                .iter()
                                .zip(latent.channel(c))
                                .map(|(g, x)| g * x)
                                .sum::<f64>();
                        }
                        grads.head[l.head_bias.start] += d_logit.iter().sum::<f64>();
                    }
                    if need_latent_grad {
                        let w = &self.head[l.head_weight.clone()];
                        let mut d = Volume::zeros(LATENT_CHANNELS, latent.dims);
                        for (c, &wc) in w.iter().enumerate() {
                            for (dv, g) in d.channel_mut(c).iter_mut().zip(&d_logit) {
                                *dv = wc * g;
                            }
                        }
                        lg.push(d);
                    }
                }
                lg
            }
            Objective::Restoration {
                targets,
                perceptual,
                ..
            } => {
                if targets.len() != inputs.len() {
                    return Err(Error::Shape("one target per input grid required".into()));
                }
                let mut lg = Vec::new();
                for (latent, (target, input)) in
                    pass.latents().iter().zip(targets.iter().zip(inputs))
                {
                    if target.spec() != input.spec() {
                        return Err(Error::Shape("target and input specs differ".into()));
                    }
                    let dec = self.decoder_forward(latent);
                    let n = dec.out.data.len() as f64;
                    let mut d_out = Volume::zeros(1, dec.out.dims);
                    let mut sq = 0.0;
                    for ((g, &y), &t) in d_out
                        .data
                        .iter_mut()
                        .zip(&dec.out.data)
                        .zip(target.values())
                    {
                        sq += (y - t) * (y - t);
                        *g = 2.0 * (y - t) / n / batch;
                    }
                    terms.mse += sq / n / batch;
                    if let Some(p) = perceptual {
                        let restored =
                            OccupancyGrid::from_values(*target.spec(), dec.out.data.clone())?;
                        let fr = p.extractor.features(&restored)?;
                        let ft = p.extractor.features(target)?;
                        let mut upstream: [Vec<f64>; 3] = Default::default();
                        let mut pcp = 0.0;
                        for i in 0..3 {
                            let (value, grad) = cosine_term(&fr[i], &ft[i]);
                            if grad.is_none() {
                                degenerate += 1;
                            }
                            pcp += value;
                            upstream[i] = grad
                                .unwrap_or_else(|| vec![0.0; fr[i].len()])
                                .into_iter()
                                .map(|g| g * p.weight / batch)
                                .collect();
                        }
                        terms.pcp += pcp / batch;
                        if p.weight != 0.0 && (trainable.decoder || need_latent_grad) {
                            let d_img = p.extractor.backward(&restored, &upstream)?;
                            for (g, v) in d_out.data.iter_mut().zip(d_img) {
                                *g += v;
                            }
                        }
                    }
                    if trainable.decoder || need_latent_grad {
                        let mut scratch = Gradients::zeros();
                        let target_grad = if trainable.decoder {
                            &mut grads.decoder
                        } else {
                            &mut scratch.decoder
                        };
                        let d_latent = self.decoder_backward(latent, &dec, &d_out, target_grad);
                        if need_latent_grad {
                            lg.push(d_latent);
                        }
                    }
                }
                lg
            }
        };

        if need_latent_grad {
            self.encoder_backward(&pass, latent_grads, &mut grads.encoder);
        }

        let weight = match objective {
            Objective::Restoration {
                perceptual: Some(p),
                ..
            } => p.weight,
            _ => 0.0,
        };
        let loss = match objective {
            Objective::Detection { .. } => terms.det,
            Objective::Restoration { .. } => terms.mse + weight * terms.pcp,
        };
        Ok(Evaluation {
            loss,
            terms,
            grads,
            degenerate_features: degenerate,
            batch_stats: pass.batch_stats.take(),
        })
    }

    /// Loss value only; nothing is modified.
    pub fn loss(&self, objective: &Objective<'_>, mode: Mode) -> Result<f64> {
        Ok(self.evaluate(objective, mode, Trainable::NONE)?.loss)
    }

    /// Sign pattern of every ReLU input in the encoder and decoder for the
    /// given objective inputs. Two parameter settings with equal patterns lie
    /// in the same smooth region of the loss.
    pub fn activation_pattern(&self, objective: &Objective<'_>, mode: Mode) -> Result<Vec<bool>> {
        let pass = self.encoder_forward(objective.inputs(), mode)?;
        let mut bits = Vec::new();
        for block in &pass.blocks {
            for v in &block.out {
                bits.extend(v.data.iter().map(|&x| x > 0.0));
            }
        }
        if let Objective::Restoration { .. } = objective {
            for latent in pass.latents() {
                let dec = self.decoder_forward(latent);
                for h in &dec.hidden {
                    bits.extend(h.data.iter().map(|&x| x > 0.0));
                }
            }
        }
        Ok(bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::restore::features::PyramidProjection;
    use rand::Rng;

    fn small_spec() -> GridSpec {
        GridSpec::new([0.0; 3], [1.6, 1.6, 0.8], [0.1; 3]).unwrap()
    }

    fn random_grid(spec: GridSpec, seed: u64, density: f64) -> OccupancyGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..spec.len())
            .map(|_| {
                if rng.random::<f64>() < density {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        OccupancyGrid::from_values(spec, v).unwrap()
    }

    #[test]
    fn layer_map_is_contiguous() {
        let map = layer_map();
        for g in [
            Group::Encoder,
            Group::Decoder,
            Group::Head,
            Group::NormStats,
        ] {
            let mut next = 0;
            for e in map.iter().filter(|e| e.group == g) {
                assert_eq!(e.offset, next, "{}", e.name);
                next += e.len;
            }
        }
        let m = RestorationModel::new(0);
        assert_eq!(
            m.encoder.len(),
            8 * 27 + 16 + 16 * 8 * 27 + 32 + 16 * 16 * 27 + 32
        );
        assert_eq!(m.head.len(), 17);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = RestorationModel::new(3);
        assert_eq!(a, RestorationModel::new(3));
        assert_ne!(a, RestorationModel::new(4));
        let l = layout();
        let bound = 1.0 / 27f64.sqrt();
        assert!(a.encoder[l.enc_conv[0].clone()]
            .iter()
            .all(|w| w.abs() <= bound));
        assert!(a.decoder[l.dec_bias[0].clone()].iter().all(|&b| b == 0.0));
        assert!(a.norm.iter().all(|s| s.var.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn shapes() {
        let mut m = RestorationModel::new(0);
        let grid = OccupancyGrid::zeros(GridSpec::desk());
        let latent = m.encode(&grid, Mode::Eval).unwrap();
        assert_eq!(latent.features.channels, 16);
        assert_eq!(latent.features.dims, [16, 16, 2]);
        assert_eq!(m.decode(&latent).unwrap().dims(), [128, 128, 16]);
        assert_eq!(m.foreground(&latent).unwrap().dims(), [16, 16, 2]);

        let bad = Latent {
            features: Volume::zeros(16, [2, 2, 2]),
            spec: small_spec(),
        };
        assert!(matches!(m.decode(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_propagation() {
        let mut m = RestorationModel::new(5);
        let grid = OccupancyGrid::zeros(small_spec());
        let before = m.clone();
        let latent = m.encode(&grid, Mode::Eval).unwrap();
        assert!(latent.features.data.iter().all(|&x| x == 0.0));
        assert_eq!(m, before);

        let z = RestorationModel::zeroed();
        let out = z.decode(&latent).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn eval_mode_is_pure() {
        let mut m = RestorationModel::new(1);
        let grid = random_grid(small_spec(), 2, 0.3);
        let snap = m.to_bytes();
        let latent = m.encode(&grid, Mode::Eval).unwrap();
        m.decode(&latent).unwrap();
        m.foreground(&latent).unwrap();
        assert_eq!(m.to_bytes(), snap);
    }

    #[test]
    fn train_mode_moves_running_mean_by_momentum() {
        let mut m = RestorationModel::new(1);
        let grid = random_grid(small_spec(), 2, 0.3);
        let before = m.norm.clone();
        let pass = m
            .encoder_forward(std::slice::from_ref(&grid), Mode::Train)
            .unwrap();
        let batch = pass.batch_stats.clone().unwrap();
        m.encode(&grid, Mode::Train).unwrap();
        for b in 0..3 {
            for c in 0..before[b].mean.len() {
                let want = 0.9 * before[b].mean[c] + 0.1 * batch[b].mean[c];
                assert!((m.norm[b].mean[c] - want).abs() < 1e-15);
                let want = 0.9 * before[b].var[c] + 0.1 * batch[b].var[c];
                assert!((m.norm[b].var[c] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn head_constant_half_gives_ln2() {
        let m = RestorationModel::zeroed();
        let grid = random_grid(small_spec(), 4, 0.2);
        let mask = random_grid(small_spec(), 5, 0.1);
        let loss = m
            .loss(
                &Objective::Detection {
                    inputs: std::slice::from_ref(&grid),
                    masks: std::slice::from_ref(&mask),
                },
                Mode::Eval,
            )
            .unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn frozen_groups_get_no_gradient() {
        let m = RestorationModel::new(2);
        let grid = random_grid(small_spec(), 1, 0.3);
        let target = random_grid(small_spec(), 3, 0.3);
        let obj = Objective::Restoration {
            inputs: std::slice::from_ref(&grid),
            targets: std::slice::from_ref(&target),
            perceptual: None,
        };
        let e = m
            .evaluate(&obj, Mode::Train, Trainable::RESTORATION)
            .unwrap();
        assert!(e.grads.encoder.iter().all(|&g| g == 0.0));
        assert!(e.grads.decoder.iter().any(|&g| g != 0.0));
        let full = m.evaluate(&obj, Mode::Train, Trainable::ALL).unwrap();
        assert_eq!(full.grads.decoder, e.grads.decoder);
        assert_eq!(full.loss, e.loss);
    }

    #[test]
    fn perceptual_gradient_is_linear_in_weight() {
        let m = RestorationModel::new(2);
        let fx = PyramidProjection::new(0);
        let grid = random_grid(small_spec(), 1, 0.3);
        let target = random_grid(small_spec(), 3, 0.3);
        let eval = |w: Option<f64>| {
            m.evaluate(
                &Objective::Restoration {
                    inputs: std::slice::from_ref(&grid),
                    targets: std::slice::from_ref(&target),
                    perceptual: w.map(|weight| Perceptual {
                        extractor: &fx,
                        weight,
                    }),
                },
                Mode::Eval,
                Trainable::ALL,
            )
            .unwrap()
        };
        let mse = eval(None);
        let one = eval(Some(1.0));
        let three = eval(Some(3.0));
        for (i, g) in three.grads.flatten(Trainable::ALL).iter().enumerate() {
            let m0 = mse.grads.flatten(Trainable::ALL)[i];
            let p1 = one.grads.flatten(Trainable::ALL)[i] - m0;
            assert!((g - (m0 + 3.0 * p1)).abs() <= 1e-12 * g.abs().max(1e-3));
        }
        assert!((three.loss - (mse.loss + 3.0 * one.terms.pcp)).abs() < 1e-12);
        assert_eq!(eval(Some(0.0)).loss, mse.loss);
    }

    /// Central differences over a sample of parameters, skipping points where
    /// a ReLU changes sign within the step.
    fn fd_check(
        m: &RestorationModel,
        obj: &Objective<'_>,
        mode: Mode,
        which: Trainable,
        samples: usize,
    ) -> f64 {
        let h = 1e-4;
        let e = m.evaluate(obj, mode, which).unwrap();
        let mut idx = Vec::new();
        for (on, g) in [
            (which.encoder, Group::Encoder),
            (which.decoder, Group::Decoder),
            (which.head, Group::Head),
        ] {
            if on {
                idx.extend((0..m.params(g).len()).map(|i| (g, i)));
            }
        }
        let grads = |g: Group| match g {
            Group::Encoder => &e.grads.encoder,
            Group::Decoder => &e.grads.decoder,
            _ => &e.grads.head,
        };
        let pattern = m.activation_pattern(obj, mode).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        while checked < samples {
            let (g, i) = idx[rng.random_range(0..idx.len())];
            let mut plus = m.clone();
            plus.params_mut(g)[i] += h;
            let mut minus = m.clone();
            minus.params_mut(g)[i] -= h;
            if plus.activation_pattern(obj, mode).unwrap() != pattern
                || minus.activation_pattern(obj, mode).unwrap() != pattern
            {
                continue;
            }
            let fd = (plus.loss(obj, mode).unwrap() - minus.loss(obj, mode).unwrap()) / (2.0 * h);
            let an = grads(g)[i];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = RestorationModel::new(7);
        let fx = PyramidProjection::new(0);
        let spec = small_spec();
        let grids = [random_grid(spec, 1, 0.3), random_grid(spec, 2, 0.3)];
        let other = [random_grid(spec, 3, 0.3), random_grid(spec, 4, 0.3)];
        let det = Objective::Detection {
            inputs: &grids,
            masks: &other,
        };
        let mse = Objective::Restoration {
            inputs: &grids,
            targets: &other,
            perceptual: None,
        };
        let slf = Objective::Restoration {
            inputs: &grids,
            targets: &other,
            perceptual: Some(Perceptual {
                extractor: &fx,
                weight: 1.0,
            }),
        };
        for mode in [Mode::Train, Mode::Eval] {
            let w = fd_check(&m, &det, mode, Trainable::DETECTION, 25);
            assert!(w <= 1e-4, "det {mode:?}: {w}");
            let w = fd_check(&m, &mse, mode, Trainable::ALL, 25);
            assert!(w <= 1e-4, "mse {mode:?}: {w}");
            let w = fd_check(&m, &slf, mode, Trainable::ALL, 25);
            assert!(w <= 1e-4, "self {mode:?}: {w}");
        }
    }

    #[test]
    fn identical_restoration_has_zero_gradient() {
        // Target equal to the current restoration: the MSE term is at its minimum.
        let m = RestorationModel::new(2);
        let grid = random_grid(small_spec(), 1, 0.3);
        let mut probe = m.clone();
        let latent = probe.encode(&grid, Mode::Eval).unwrap();
        let restored = m.decode(&latent).unwrap();
        let e = m
            .evaluate(
                &Objective::Restoration {
                    inputs: std::slice::from_ref(&grid),
                    targets: std::slice::from_ref(&restored),
                    perceptual: None,
                },
                Mode::Eval,
                Trainable::ALL,
            )
            .unwrap();
        assert_eq!(e.loss, 0.0);
        assert!(e.grads.flatten(Trainable::ALL).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn overfits_single_grid() {
        use crate::restore::train::GroupOptimizer;
        // ground slab plus one box
        let spec = small_spec();
        let d = spec.dims();
        let mut v = vec![0.0; spec.len()];
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    if z == 0 || ((4..9).contains(&x) && (6..12).contains(&y) && z < 5) {
                        v[spec.index(x, y, z)] = 1.0;
                    }
                }
            }
        }
        let grid = OccupancyGrid::from_values(spec, v).unwrap();
        let mut m = RestorationModel::new(0);
        let mut opt = GroupOptimizer::new(&m, Trainable::ADAPTATION);
        let obj = Objective::Restoration {
            inputs: std::slice::from_ref(&grid),
            targets: std::slice::from_ref(&grid),
            perceptual: None,
        };
        for _ in 0..200 {
            let e = m
                .evaluate(&obj, Mode::Train, Trainable::ADAPTATION)
                .unwrap();
            opt.step(&mut m, &e, 0.01);
            m.commit_norm_stats(e.batch_stats.as_deref().unwrap());
        }
        let final_mse = m.loss(&obj, Mode::Eval).unwrap();
        eprintln!("overfit mse after 200 steps: {final_mse}");
        assert!(final_mse < 0.01, "{final_mse}");
    }
}
