//! Dense 3-D building blocks.
//!
//! Every filter here is a 3x3x3 stencil with stride 2 and padding 1 linking
//! a "large" volume with dims `L` to a "small" one with dims `L / 2`: small
//! voxel `o` sees large voxels `2 * o + k - 1` for taps `k` in `0..3`.
//! A strided convolution gathers large into small, a transposed convolution
//! scatters small into large (its exact adjoint), and the weight gradient of
//! both is the same correlation. Weights are laid out
//! `[small_channel][large_channel][tap]` with `tap = kx + 3 * (ky + 3 * kz)`.

pub const TAPS: usize = 27;

/// Channel-major dense volume, x-fastest inside a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_data(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * dims.iter().product::<usize>());
        Self {
            channels,
            dims,
            data,
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }
}

pub fn half_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|d| d / 2)
}

pub fn double_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|d| d * 2)
}

/// A run of small voxels `small..small + len` paired with large voxels
/// `large, large + 2, ...` along x.
#[derive(Debug, Clone, Copy)]
struct Span {
    small: usize,
    large: usize,
    len: usize,
}

/// Valid small-side coordinates for one axis and tap: `0 <= 2o + k - 1 < large`,
/// i.e. `o < (large + 2 - k) / 2`.
fn axis_range(small: usize, large: usize, k: usize) -> std::ops::Range<usize> {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = ((large + 2 - k) / 2).min(small);
    lo..hi.max(lo)
}

fn tap_spans(small: [usize; 3], large: [usize; 3]) -> Vec<Vec<Span>> {
    let mut all = Vec::with_capacity(TAPS);
    for kz in 0..3 {
        for ky in 0..3 {
            for kx in 0..3 {
                let rx = axis_range(small[0], large[0], kx);
                let ry = axis_range(small[1], large[1], ky);
                let rz = axis_range(small[2], large[2], kz);
                let mut spans = Vec::with_capacity(ry.len() * rz.len());
                if !rx.is_empty() {
                    for oz in rz.clone() {
                        let iz = 2 * oz + kz - 1;
                        for oy in ry.clone() {
                            let iy = 2 * oy + ky - 1;
                            spans.push(Span {
                                small: rx.start + small[0] * (oy + small[1] * oz),
                                large: (2 * rx.start + kx - 1) + large[0] * (iy + large[1] * iz),
                                len: rx.len(),
                            });
                        }
                    }
                }
                all.push(spans);
            }
        }
    }
    all
}

/// Strided convolution: `small[cs] = sum_{cl, tap} w[cs][cl][tap] * large[cl]`.
pub fn gather(large: &Volume, weights: &[f64], small_channels: usize) -> Volume {
    let small_dims = half_dims(large.dims);
    let spans = tap_spans(small_dims, large.dims);
    let cl_n = large.channels;
    assert_eq!(weights.len(), small_channels * cl_n * TAPS);
    let mut out = Volume::zeros(small_channels, small_dims);
    for cs in 0..small_channels {
        let dst = out.channel_mut(cs);
        for cl in 0..cl_n {
            let src = large.channel(cl);
            let w = &weights[(cs * cl_n + cl) * TAPS..][..TAPS];
            for (tap, spans) in spans.iter().enumerate() {
                let wt = w[tap];
                if wt == 0.0 {
                    continue;
                }
                for s in spans {
                    let d = &mut dst[s.small..s.small + s.len];
                    let l = &src[s.large..];
                    for (dv, lv) in d.iter_mut().zip(l.iter().step_by(2)) {
                        *dv += wt * lv;
                    }
                }
            }
        }
    }
    out
}

/// Transposed convolution, the adjoint of [`gather`].
pub fn scatter(small: &Volume, weights: &[f64], large_channels: usize) -> Volume {
    let large_dims = double_dims(small.dims);
    let spans = tap_spans(small.dims, large_dims);
    let cs_n = small.channels;
    assert_eq!(weights.len(), cs_n * large_channels * TAPS);
    let mut out = Volume::zeros(large_channels, large_dims);
    for cl in 0..large_channels {
        let dst = out.channel_mut(cl);
        for cs in 0..cs_n {
            let src = small.channel(cs);
            let w = &weights[(cs * large_channels + cl) * TAPS..][..TAPS];
            for (tap, spans) in spans.iter().enumerate() {
                let wt = w[tap];
                if wt == 0.0 {
                    continue;
                }
                for s in spans {
                    let sv = &src[s.small..s.small + s.len];
                    let d = &mut dst[s.large..];
                    for (dv, v) in d.iter_mut().step_by(2).zip(sv) {
                        *dv += wt * v;
                    }
                }
            }
        }
    }
    out
}

/// Weight gradient shared by both filters, accumulated into `grad`:
/// `grad[cs][cl][tap] += sum_o small[cs][o] * large[cl][2o + k - 1]`.
pub fn correlate(small: &Volume, large: &Volume, grad: &mut [f64]) {
    assert_eq!(small.dims, half_dims(large.dims));
    let spans = tap_spans(small.dims, large.dims);
    let (cs_n, cl_n) = (small.channels, large.channels);
    assert_eq!(grad.len(), cs_n * cl_n * TAPS);
    for cs in 0..cs_n {
        let sv = small.channel(cs);
        for cl in 0..cl_n {
            let lv = large.channel(cl);
            let g = &mut grad[(cs * cl_n + cl) * TAPS..][..TAPS];
            for (tap, spans) in spans.iter().enumerate() {
                let mut acc = 0.0;
                for s in spans {
                    let a = &sv[s.small..s.small + s.len];
                    let b = &lv[s.large..];
                    acc += a
                        .iter()
                        .zip(b.iter().step_by(2))
                        .map(|(x, y)| x * y)
                        .sum::<f64>();
                }
                g[tap] += acc;
            }
        }
    }
}

pub fn add_bias(v: &mut Volume, bias: &[f64]) {
    for (c, &b) in bias.iter().enumerate() {
        if b != 0.0 {
            v.channel_mut(c).iter_mut().for_each(|x| *x += b);
        }
    }
}

pub fn relu_in_place(v: &mut Volume) {
    v.data.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes upstream gradient where the activation was clipped.
pub fn relu_backward(grad: &mut Volume, activated: &Volume) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Per-channel bias gradient: sum over voxels.
pub fn channel_sums(v: &Volume, out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        *o += v.channel(c).iter().sum::<f64>();
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
