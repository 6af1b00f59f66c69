//! Dense activation storage and the im2col / col2im restructuring.
//!
//! A convolution over one sample is rewritten as a matrix product: every
//! receptive-field patch becomes one column of an unrolled matrix with
//! `K = IC·KH·KW` rows and `M = OH·OW` columns. Rows are ordered
//! channel-major, `(channel, ky, kx)`, so the rows contributed by input
//! channel `i` form the contiguous block `[i·Z, (i+1)·Z)` with `Z = KH·KW`.
//! Padding is implicit: out-of-range taps read as zero.

use std::ops::Range;

use crate::error::{Error, Result};

/// Batch of activations laid out as `(batch, channel, height, width)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Tensor4 {
            dims: [batch, channels, height, width],
            data: vec![0.0; batch * channels * height * width],
        }
    }

    /// Wraps `data`, checking its length and that every entry is finite.
    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor dims {dims:?} need {expected} entries, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite tensor entry at flat index {i}")));
        }
        Ok(Tensor4 { dims, data })
    }

    pub(crate) fn from_vec_unchecked(dims: [usize; 4], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        Tensor4 { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    pub fn batch(&self) -> usize {
        self.dims[0]
    }
    pub fn channels(&self) -> usize {
        self.dims[1]
    }
    pub fn height(&self) -> usize {
        self.dims[2]
    }
    pub fn width(&self) -> usize {
        self.dims[3]
    }
    /// Entries per sample, `C·H·W`.
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, ch, h, w] = self.dims;
        self.data[((b * ch + c) * h + y) * w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the listed samples into a new batch.
    pub fn select(&self, indices: &[usize]) -> Tensor4 {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor4::from_vec_unchecked([indices.len(), self.dims[1], self.dims[2], self.dims[3]], data)
    }
}

/// Shape of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry { in_channels, out_channels, kernel_h: kernel, kernel_w: kernel, stride, padding }
    }

    /// Rows per channel block, `Z = KH·KW`.
    pub fn block_len(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Unrolled patch length, `K = IC·KH·KW`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.block_len()
    }

    /// Output spatial size for an `in_h × in_w` input.
    pub fn output_hw(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 || self.in_channels == 0 {
            return Err(Error::Shape(format!("degenerate geometry {self:?}")));
        }
        let span_h = in_h + 2 * self.padding;
        let span_w = in_w + 2 * self.padding;
        if span_h < self.kernel_h || span_w < self.kernel_w {
            return Err(Error::Shape(format!(
                "kernel {}x{} does not fit padded input {span_h}x{span_w}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok(((span_h - self.kernel_h) / self.stride + 1, (span_w - self.kernel_w) / self.stride + 1))
    }
}

/// Spatial context an unrolled matrix was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnrollLayout {
    pub geom: ConvGeometry,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl UnrollLayout {
    pub fn new(geom: ConvGeometry, in_h: usize, in_w: usize) -> Result<Self> {
        let (out_h, out_w) = geom.output_hw(in_h, in_w)?;
        Ok(UnrollLayout { geom, in_h, in_w, out_h, out_w })
    }

    /// Output pixels per sample, `M = OH·OW`.
    pub fn cols_per_sample(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Rows of the unrolled matrix contributed by one input channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelBlock {
    pub channel: usize,
    pub rows: Range<usize>,
}

/// Unrolled input matrix, `K` rows by `samples·M` columns, row-major.
///
/// Column `b·M + m` is the flattened receptive field of output pixel `m` of
/// sample `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledInput {
    layout: UnrollLayout,
    samples: usize,
    data: Vec<f64>,
}

impl UnrolledInput {
    /// Wraps a raw `K × (samples·M)` matrix, e.g. a gradient produced by a matrix product.
    pub fn from_parts(layout: UnrollLayout, samples: usize, data: Vec<f64>) -> Result<Self> {
        let expected = layout.geom.patch_len() * samples * layout.cols_per_sample();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "unrolled matrix needs {}x{} = {expected} entries, got {}",
                layout.geom.patch_len(),
                samples * layout.cols_per_sample(),
                data.len()
            )));
        }
        Ok(UnrolledInput { layout, samples, data })
    }

    pub fn layout(&self) -> &UnrollLayout {
        &self.layout
    }
    pub fn geometry(&self) -> &ConvGeometry {
        &self.layout.geom
    }
    pub fn rows(&self) -> usize {
        self.layout.geom.patch_len()
    }
    pub fn cols(&self) -> usize {
        self.samples * self.layout.cols_per_sample()
    }
    pub fn samples(&self) -> usize {
        self.samples
    }
    pub fn cols_per_sample(&self) -> usize {
        self.layout.cols_per_sample()
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.cols();
        &self.data[row * n..(row + 1) * n]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, col)).collect()
    }

    /// Channel-major partition of the rows into `IC` blocks of length `Z`.
    pub fn channel_blocks(&self) -> Vec<ChannelBlock> {
        channel_blocks(&self.layout.geom)
    }

    /// Scales every entry of one channel block.
    pub fn scale_channel(&mut self, channel: usize, factor: f64) {
        let z = self.layout.geom.block_len();
        let n = self.cols();
        for v in &mut self.data[channel * z * n..(channel + 1) * z * n] {
            *v *= factor;
        }
    }

    /// Joins unrolled batches that share one layout, preserving column order.
    pub fn concat(parts: &[UnrolledInput]) -> Result<UnrolledInput> {
        let first = parts.first().ok_or_else(|| Error::Invalid("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.layout != first.layout) {
            return Err(Error::Shape("cannot concatenate unrolled inputs with different layouts".into()));
        }
        let k = first.rows();
        let samples: usize = parts.iter().map(|p| p.samples).sum();
        let total_cols = samples * first.cols_per_sample();
        let mut data = vec![0.0; k * total_cols];
        let mut offset = 0;
        for p in parts {
            let n = p.cols();
            for r in 0..k {
                data[r * total_cols + offset..r * total_cols + offset + n].copy_from_slice(p.row(r));
            }
            offset += n;
        }
        Ok(UnrolledInput { layout: first.layout, samples, data })
    }
}

pub fn channel_blocks(geom: &ConvGeometry) -> Vec<ChannelBlock> {
    let z = geom.block_len();
    (0..geom.in_channels).map(|i| ChannelBlock { channel: i, rows: i * z..(i + 1) * z }).collect()
}

fn check_input(input: &Tensor4, geom: &ConvGeometry) -> Result<UnrollLayout> {
    if input.channels() != geom.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, geometry expects {}",
            input.channels(),
            geom.in_channels
        )));
    }
    UnrollLayout::new(*geom, input.height(), input.width())
}

/// Writes the patches of one sample into columns `col0..col0+M` of a
/// row-major matrix with `total_cols` columns.
fn unroll_sample(sample: &[f64], lay: &UnrollLayout, out: &mut [f64], total_cols: usize, col0: usize) {
    let g = &lay.geom;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &sample[c * lay.in_h * lay.in_w..(c + 1) * lay.in_h * lay.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut out[row * total_cols + col0..row * total_cols + col0 + lay.cols_per_sample()];
                for oy in 0..lay.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * lay.out_w..(oy + 1) * lay.out_w];
                    if iy < 0 || iy >= lay.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * lay.in_w..(iy as usize + 1) * lay.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= lay.in_w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Unrolls sample `b` of `input` into a `K × M` matrix.
pub fn im2col(input: &Tensor4, b: usize, geom: &ConvGeometry) -> Result<UnrolledInput> {
    let lay = check_input(input, geom)?;
    if b >= input.batch() {
        return Err(Error::Shape(format!("sample {b} out of range for batch of {}", input.batch())));
    }
    let m = lay.cols_per_sample();
    let mut data = vec![0.0; geom.patch_len() * m];
    unroll_sample(input.sample(b), &lay, &mut data, m, 0);
    Ok(UnrolledInput { layout: lay, samples: 1, data })
}

/// Unrolls every sample, concatenating along columns (`b·M + m`).
pub fn im2col_batch(input: &Tensor4, geom: &ConvGeometry) -> Result<UnrolledInput> {
    let lay = check_input(input, geom)?;
    let m = lay.cols_per_sample();
    let total = input.batch() * m;
    let mut data = vec![0.0; geom.patch_len() * total];
    for b in 0..input.batch() {
        unroll_sample(input.sample(b), &lay, &mut data, total, b * m);
    }
    Ok(UnrolledInput { layout: lay, samples: input.batch(), data })
}

/// Adjoint of [`im2col_batch`]: scatter-adds every column back onto the
/// spatial positions it was gathered from.
pub fn col2im(grad: &UnrolledInput) -> Tensor4 {
    let lay = grad.layout;
    let g = &lay.geom;
    let m = lay.cols_per_sample();
    let total = grad.cols();
    let pad = g.padding as isize;
    let mut out = Tensor4::zeros(grad.samples, g.in_channels, lay.in_h, lay.in_w);
    for b in 0..grad.samples {
        let sample = out.sample_mut(b);
        for c in 0..g.in_channels {
            let plane = &mut sample[c * lay.in_h * lay.in_w..(c + 1) * lay.in_h * lay.in_w];
            for ky in 0..g.kernel_h {
                for kx in 0..g.kernel_w {
                    let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                    let src = &grad.data[row * total + b * m..row * total + (b + 1) * m];
                    for oy in 0..lay.out_h {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= lay.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * lay.in_w..(iy as usize + 1) * lay.in_w];
                        for ox in 0..lay.out_w {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if ix >= 0 && ix < lay.in_w as isize {
                                dst[ix as usize] += src[oy * lay.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Mean and population variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
}

impl Moments {
    /// Two-pass population moments of `values`; `None` when empty.
    pub fn of<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> Option<Moments> {
        let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            return None;
        }
        let mean = sum / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Some(Moments { mean, var })
    }
}

/// Per-channel mean and population variance over every entry of each
/// channel block (all `Z` rows, all `samples·M` columns).
pub fn channel_moments(u: &UnrolledInput) -> Result<Vec<Moments>> {
    let n = u.cols();
    u.channel_blocks()
        .iter()
        .map(|blk| {
            let entries = &u.data[blk.rows.start * n..blk.rows.end * n];
            if entries.len() < 2 {
                return Err(Error::Invalid(format!(
                    "channel block {} has {} entries; need at least 2",
                    blk.channel,
                    entries.len()
                )));
            }
            Ok(Moments::of(entries.iter()).expect("non-empty"))
        })
        .collect()
}
