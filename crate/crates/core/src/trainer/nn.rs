//! Small convolutional image-to-vector network with hand-written backprop.
//!
//! The feature stage is a stack of `conv3x3 -> ReLU -> maxpool2` blocks
//! followed by adaptive average pooling onto a `grid x grid` map. The head
//! is a single linear layer. All arithmetic is single-threaded `f32` with a
//! fixed evaluation order, so identical inputs give bit-identical outputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major dense matrices.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe in-bounds row-major views of the slices above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape of a `channels x height x width` activation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl MapShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out_channels x (in_channels * 9)`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv3x3 {
    fn new(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_channels * 9) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight = (0..out_channels * in_channels * 9)
            .map(|_| normal.sample(rng))
            .collect();
        Self {
            in_channels,
            out_channels,
            weight,
            bias: vec![0.0; out_channels],
        }
    }
}

fn im2col(input: &[f32], shape: MapShape, cols: &mut [f32]) {
    let (h, w) = (shape.height, shape.width);
    let hw = h * w;
    for c in 0..shape.channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], shape: MapShape, out: &mut [f32]) {
    let (h, w) = (shape.height, shape.width);
    let hw = h * w;
    out.fill(0.0);
    for c in 0..shape.channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    for (x, &g) in src.iter().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Activations one block keeps for its backward pass.
#[derive(Debug, Default, Clone)]
struct BlockCache {
    cols: Vec<f32>,
    activated: Vec<f32>,
    argmax: Vec<u32>,
}

/// Everything the backward pass needs for one sample.
#[derive(Debug, Default, Clone)]
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    final_map: Vec<f32>,
    pub features: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStage {
    pub input: MapShape,
    pub convs: Vec<Conv3x3>,
    pub pool_grid: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ShapeError {
    #[error("input {height}x{width} must be divisible by {divisor} for {blocks} pooling blocks and a {grid}x{grid} grid")]
    Indivisible {
        height: usize,
        width: usize,
        divisor: usize,
        blocks: usize,
        grid: usize,
    },
    #[error("feature stage needs at least one block")]
    NoBlocks,
    #[error("input length {got} does not match expected {expected}")]
    InputLength { expected: usize, got: usize },
}

impl FeatureStage {
    pub fn new(
        input: MapShape,
        widths: &[usize],
        pool_grid: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ShapeError> {
        if widths.is_empty() {
            return Err(ShapeError::NoBlocks);
        }
        let divisor = (1usize << widths.len()) * pool_grid.max(1);
        if input.height % divisor != 0 || input.width % divisor != 0 {
            return Err(ShapeError::Indivisible {
                height: input.height,
                width: input.width,
                divisor,
                blocks: widths.len(),
                grid: pool_grid,
            });
        }
        let mut convs = Vec::with_capacity(widths.len());
        let mut cin = input.channels;
        for &w in widths {
            convs.push(Conv3x3::new(cin, w, rng));
            cin = w;
        }
        Ok(Self {
            input,
            convs,
            pool_grid: pool_grid.max(1),
        })
    }

    fn block_input_shape(&self, block: usize) -> MapShape {
        let channels = if block == 0 {
            self.input.channels
        } else {
            self.convs[block - 1].out_channels
        };
        MapShape {
            channels,
            height: self.input.height >> block,
            width: self.input.width >> block,
        }
    }

    fn final_shape(&self) -> MapShape {
        let n = self.convs.len();
        MapShape {
            channels: self.convs[n - 1].out_channels,
            height: self.input.height >> n,
            width: self.input.width >> n,
        }
    }

    pub fn feature_len(&self) -> usize {
        self.final_shape().channels * self.pool_grid * self.pool_grid
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    pub fn forward(&self, input: &[f32], cache: &mut ForwardCache) -> Result<(), ShapeError> {
        if input.len() != self.input.len() {
            return Err(ShapeError::InputLength {
                expected: self.input.len(),
                got: input.len(),
            });
        }
        cache.blocks.resize_with(self.convs.len(), BlockCache::default);
        let mut current = input.to_vec();
        for (i, conv) in self.convs.iter().enumerate() {
            let shape = self.block_input_shape(i);
            let hw = shape.height * shape.width;
            let block = &mut cache.blocks[i];
            block.cols.resize(shape.channels * 9 * hw, 0.0);
            im2col(&current, shape, &mut block.cols);
            block.activated.resize(conv.out_channels * hw, 0.0);
            for (o, row) in block.activated.chunks_mut(hw).enumerate() {
                row.fill(conv.bias[o]);
            }
            gemm(
                conv.out_channels,
                shape.channels * 9,
                hw,
                &conv.weight,
                false,
                &block.cols,
                false,
                1.0,
                &mut block.activated,
            );
            for v in block.activated.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let (oh, ow) = (shape.height / 2, shape.width / 2);
            let mut pooled = vec![0.0f32; conv.out_channels * oh * ow];
            block.argmax.resize(pooled.len(), 0);
            for c in 0..conv.out_channels {
                let plane = &block.activated[c * hw..(c + 1) * hw];
                for y in 0..oh {
                    for x in 0..ow {
                        let base = (2 * y) * shape.width + 2 * x;
                        let candidates = [base, base + 1, base + shape.width, base + shape.width + 1];
                        let mut best = candidates[0];
                        for &idx in &candidates[1..] {
                            if plane[idx] > plane[best] {
                                best = idx;
                            }
                        }
                        let out = c * oh * ow + y * ow + x;
                        pooled[out] = plane[best];
                        block.argmax[out] = best as u32;
                    }
                }
            }
            current = pooled;
        }
        let fin = self.final_shape();
        let g = self.pool_grid;
        let (ch, cw) = (fin.height / g, fin.width / g);
        let norm = 1.0 / (ch * cw) as f32;
        cache.features.clear();
        cache.features.resize(self.feature_len(), 0.0);
        for c in 0..fin.channels {
            for gy in 0..g {
                for gx in 0..g {
                    let mut acc = 0.0f32;
                    for y in gy * ch..(gy + 1) * ch {
                        for x in gx * cw..(gx + 1) * cw {
                            acc += current[c * fin.height * fin.width + y * fin.width + x];
                        }
                    }
                    cache.features[c * g * g + gy * g + gx] = acc * norm;
                }
            }
        }
        cache.final_map = current;
        Ok(())
    }

    /// Accumulates parameter gradients given the gradient w.r.t. the features.
    pub fn backward(&self, cache: &ForwardCache, d_features: &[f32], grads: &mut FeatureGrads) {
        let fin = self.final_shape();
        let g = self.pool_grid;
        let (ch, cw) = (fin.height / g, fin.width / g);
        let norm = 1.0 / (ch * cw) as f32;
        let mut d_map = vec![0.0f32; fin.len()];
        for c in 0..fin.channels {
            for y in 0..fin.height {
                for x in 0..fin.width {
                    let cell = c * g * g + (y / ch) * g + x / cw;
                    d_map[c * fin.height * fin.width + y * fin.width + x] = d_features[cell] * norm;
                }
            }
        }
        for i in (0..self.convs.len()).rev() {
            let conv = &self.convs[i];
            let shape = self.block_input_shape(i);
            let hw = shape.height * shape.width;
            let block = &cache.blocks[i];
            let mut d_act = vec![0.0f32; conv.out_channels * hw];
            let pooled_hw = hw / 4;
            for c in 0..conv.out_channels {
                for p in 0..pooled_hw {
                    let src = c * pooled_hw + p;
                    let dst = c * hw + block.argmax[src] as usize;
                    d_act[dst] += d_map[src];
                }
            }
            for (d, &a) in d_act.iter_mut().zip(&block.activated) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let gw = &mut grads.convs[i];
            gemm(
                conv.out_channels,
                hw,
                shape.channels * 9,
                &d_act,
                false,
                &block.cols,
                true,
                1.0,
                &mut gw.weight,
            );
            for (o, row) in d_act.chunks(hw).enumerate() {
                gw.bias[o] += row.iter().sum::<f32>();
            }
            if i > 0 {
                let mut d_cols = vec![0.0f32; shape.channels * 9 * hw];
                gemm(
                    shape.channels * 9,
                    conv.out_channels,
                    hw,
                    &conv.weight,
                    true,
                    &d_act,
                    false,
                    0.0,
                    &mut d_cols,
                );
                let mut d_in = vec![0.0f32; shape.len()];
                col2im(&d_cols, shape, &mut d_in);
                d_map = d_in;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct FeatureGrads {
    pub convs: Vec<ConvGrads>,
}

impl FeatureGrads {
    pub fn zeros_like(stage: &FeatureStage) -> Self {
        Self {
            convs: stage
                .convs
                .iter()
                .map(|c| ConvGrads {
                    weight: vec![0.0; c.weight.len()],
                    bias: vec![0.0; c.bias.len()],
                })
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for c in &mut self.convs {
            c.weight.fill(0.0);
            c.bias.fill(0.0);
        }
    }
}

/// Linear map from features to the raw output vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    /// Fixed input standardization `(f - center) * scale`, set once from
    /// training features and never trained.
    pub center: Vec<f32>,
    pub scale: Vec<f32>,
}

impl LinearHead {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / inputs.max(1) as f32).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
            center: vec![0.0; inputs],
            scale: vec![1.0; inputs],
        }
    }

    /// Sets the input standardization to the per-feature mean and inverse
    /// standard deviation of `samples`. Standard deviations are floored at a
    /// fraction of their average so near-constant features are not blown up.
    pub fn standardize(&mut self, samples: &[Vec<f32>]) {
        let n = samples.len().max(1) as f64;
        let mut stds = Vec::with_capacity(self.inputs);
        for j in 0..self.inputs {
            let mean = samples.iter().map(|f| f[j] as f64).sum::<f64>() / n;
            let var = samples.iter().map(|f| (f[j] as f64 - mean).powi(2)).sum::<f64>() / n;
            self.center[j] = mean as f32;
            stds.push(var.sqrt());
        }
        let floor = (0.1 * stds.iter().sum::<f64>() / stds.len().max(1) as f64).max(1e-6);
        for (s, sd) in self.scale.iter_mut().zip(stds) {
            *s = (1.0 / sd.max(floor)) as f32;
        }
    }

    fn standardized(&self, features: &[f32]) -> Vec<f32> {
        features
            .iter()
            .zip(&self.center)
            .zip(&self.scale)
            .map(|((f, c), s)| (f - c) * s)
            .collect()
    }

    pub fn forward(&self, features: &[f32], out: &mut Vec<f32>) {
        let x = self.standardized(features);
        out.clear();
        out.extend_from_slice(&self.bias);
        for (o, row) in self.weight.chunks(self.inputs).enumerate() {
            out[o] += row.iter().zip(&x).map(|(w, f)| w * f).sum::<f32>();
        }
    }

    /// Accumulates head gradients; writes the feature gradient when requested.
    pub fn backward(
        &self,
        features: &[f32],
        d_out: &[f32],
        grads: &mut HeadGrads,
        d_features: Option<&mut Vec<f32>>,
    ) {
        let x = self.standardized(features);
        for (o, &d) in d_out.iter().enumerate() {
            grads.bias[o] += d;
            if d != 0.0 {
                let row = &mut grads.weight[o * self.inputs..(o + 1) * self.inputs];
                for (g, &f) in row.iter_mut().zip(&x) {
                    *g += d * f;
                }
            }
        }
        if let Some(df) = d_features {
            df.clear();
            df.resize(self.inputs, 0.0);
            for (o, &d) in d_out.iter().enumerate() {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                for (g, &w) in df.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
            for (g, &s) in df.iter_mut().zip(&self.scale) {
                *g *= s;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl HeadGrads {
    pub fn zeros_like(head: &LinearHead) -> Self {
        Self {
            weight: vec![0.0; head.weight.len()],
            bias: vec![0.0; head.bias.len()],
        }
    }

    pub fn clear(&mut self) {
        self.weight.fill(0.0);
        self.bias.fill(0.0);
    }
}
