//! Spatiotemporal backbone: shallow CNN frame encoder, horizontal pyramid
//! mapping over strips of the feature map, a per-strip temporal convolution
//! with temporal max pooling, and the per-strip FC bins.
//!
//! Parameter blocks are named `enc.*` (frame encoder), `tr.*` (temporal
//! module) and `bins.*` (FC bins). Every forward pass can keep a cache that
//! the matching backward pass consumes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::silhouette::{Silhouette, ALIGNED_HEIGHT, ALIGNED_WIDTH};
use crate::error::{GaitError, Result};
use crate::matrix::{Embedding, Matrix, StripeMatrix};
use crate::nn::{self, MapShape};
use crate::params::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    /// Pyramid mapping replaced by a plain CNN and one global pooling.
    NoHpm,
    /// Per-strip temporal builder replaced by one shared TCN and average pooling.
    NoMtb,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoHpm => "no_hpm",
            Ablation::NoMtb => "no_mtb",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_hpm" => Ok(Ablation::NoHpm),
            "no_mtb" => Ok(Ablation::NoMtb),
            other => Err(format!("unknown ablation `{other}` (full, no_hpm, no_mtb)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Network input size; aligned 64x44 silhouettes are box-downsampled to it.
    pub input_height: usize,
    pub input_width: usize,
    pub conv1_channels: usize,
    /// Channels of the encoder output map.
    pub channels: usize,
    /// Pyramid scale count S; strips per frame n = 2^S - 1.
    pub scales: usize,
    /// Strip feature width c.
    pub strip_dim: usize,
    /// Embedding width d1.
    pub embed_dim: usize,
    /// Temporal radius r; the TCN kernel spans 2r + 1 frames.
    pub radius: usize,
    pub ablation: Ablation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_height: ALIGNED_HEIGHT,
            input_width: ALIGNED_WIDTH,
            conv1_channels: 32,
            channels: 64,
            scales: 5,
            strip_dim: 128,
            embed_dim: 128,
            radius: 1,
            ablation: Ablation::Full,
        }
    }
}

impl BackboneConfig {
    /// Compact configuration for single-core training runs: 16x11 input,
    /// three pyramid scales, 16-wide strips.
    pub fn compact() -> Self {
        BackboneConfig {
            input_height: 16,
            input_width: 11,
            conv1_channels: 4,
            channels: 8,
            scales: 3,
            strip_dim: 16,
            embed_dim: 16,
            radius: 1,
            ablation: Ablation::Full,
        }
    }

    pub fn strips(&self) -> usize {
        (1usize << self.scales) - 1
    }

    pub fn feature_shape(&self) -> MapShape {
        MapShape::new(self.channels, self.input_height / 2, self.input_width / 2)
    }

    pub fn kernel_width(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_height", self.input_height),
            ("input_width", self.input_width),
            ("conv1_channels", self.conv1_channels),
            ("channels", self.channels),
            ("scales", self.scales),
            ("strip_dim", self.strip_dim),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(GaitError::Config(format!("{name} must be positive")));
            }
        }
        if self.scales > 8 {
            return Err(GaitError::Config("at most 8 pyramid scales".into()));
        }
        if self.input_width < 2 {
            return Err(GaitError::Config("input width must be at least 2".into()));
        }
        let h = self.input_height / 2;
        let strips = 1usize << (self.scales - 1);
        if h == 0 || h % strips != 0 {
            return Err(GaitError::IndivisibleHeight { height: h, strips });
        }
        Ok(())
    }

    /// Fresh parameters: He-normal convolutions, `1/sqrt(fan_in)` linear maps,
    /// zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        let c1 = self.conv1_channels;
        let c = self.channels;
        conv_block(&mut p, "enc.conv1", c1, 1, 5, rng);
        conv_block(&mut p, "enc.conv2", c1, c1, 3, rng);
        conv_block(&mut p, "enc.conv3", c, c1, 3, rng);
        let n = self.strips();
        match self.ablation {
            Ablation::NoHpm => {
                for name in PLAIN_CONVS {
                    conv_block(&mut p, name, c, c, 3, rng);
                }
                linear_block(&mut p, "enc.plain_fc", &[self.strip_dim, c], c, rng);
            }
            _ => linear_block(&mut p, "enc.hpm", &[n, self.strip_dim, c], c, rng),
        }
        let kernels = if self.ablation == Ablation::NoMtb { 1 } else { n };
        let kw = self.kernel_width();
        let fan_in = self.strip_dim * kw;
        let std = (2.0 / fan_in as f64).sqrt();
        p.insert(
            "tr.tcn.w",
            normal_tensor(&[kernels, self.embed_dim, self.strip_dim, kw], std, rng),
        );
        p.insert("tr.tcn.b", Tensor::zeros(&[kernels, self.embed_dim]));
        linear_block(&mut p, "bins", &[n, self.embed_dim, self.embed_dim], self.embed_dim, rng);
        p
    }

    /// Downsamples aligned silhouettes to the network input size.
    pub fn prepare_frames(&self, frames: &[Silhouette]) -> Result<Vec<Vec<f64>>> {
        frames
            .iter()
            .map(|f| {
                let factor = f.height() / self.input_height;
                if factor == 0
                    || f.height() != factor * self.input_height
                    || f.width() / factor != self.input_width
                {
                    return Err(GaitError::ShapeMismatch(format!(
                        "{}x{} frame cannot be reduced to {}x{} by an integer factor",
                        f.height(),
                        f.width(),
                        self.input_height,
                        self.input_width
                    )));
                }
                Ok(f.downsample(factor).pixels().iter().map(|&v| v as f64).collect())
            })
            .collect()
    }
}

const PLAIN_CONVS: [&str; 3] = ["enc.plain1", "enc.plain2", "enc.plain3"];

pub(crate) fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let len: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..len).map(|_| dist.sample(rng)).collect(),
    }
}

fn conv_block<R: Rng + ?Sized>(
    p: &mut ParamStore,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    rng: &mut R,
) {
    let std = (2.0 / (inp * k * k) as f64).sqrt();
    p.insert(format!("{name}.w"), normal_tensor(&[out, inp, k, k], std, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

/// Weight of shape `w_shape` (last axis is fan-in) and a bias over all but the
/// last axis.
pub(crate) fn linear_block<R: Rng + ?Sized>(
    p: &mut ParamStore,
    name: &str,
    w_shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) {
    let std = 1.0 / (fan_in as f64).sqrt();
    p.insert(format!("{name}.w"), normal_tensor(w_shape, std, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&w_shape[..w_shape.len() - 1]));
}

/// Row ranges of every strip, scale-major: one whole-height strip, then two
/// halves top to bottom, then four quarters, and so on.
pub fn strip_bounds(height: usize, scales: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity((1 << scales) - 1);
    for s in 0..scales {
        let count = 1usize << s;
        let step = height / count;
        for j in 0..count {
            out.push((j * step, (j + 1) * step));
        }
    }
    out
}

/// Feature maps of a frame sequence: `maps[t]` is a `C x h x w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSequence {
    pub shape: MapShape,
    pub maps: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    input: Vec<f64>,
    shape: MapShape,
    out: Vec<f64>,
}

fn conv_lrelu(
    params: &ParamStore,
    name: &str,
    input: Vec<f64>,
    shape: MapShape,
    out_channels: usize,
    kernel: usize,
) -> ConvCache {
    let mut out = nn::conv2d_forward(
        &input,
        shape,
        params.data(&format!("{name}.w")),
        params.data(&format!("{name}.b")),
        out_channels,
        kernel,
    );
    nn::leaky_relu_inplace(&mut out);
    ConvCache { input, shape, out }
}

fn conv_lrelu_backward(
    params: &ParamStore,
    name: &str,
    cache: &ConvCache,
    out_channels: usize,
    kernel: usize,
    mut grad: Vec<f64>,
    grads: &mut ParamStore,
    need_input_grad: bool,
) -> Vec<f64> {
    nn::leaky_relu_backward_inplace(&mut grad, &cache.out);
    let (wn, bn) = (format!("{name}.w"), format!("{name}.b"));
    let (gw, gb) = grads.pair_mut(&wn, &bn);
    nn::conv2d_backward(
        &cache.input,
        cache.shape,
        params.data(&wn),
        out_channels,
        kernel,
        &grad,
        gw,
        gb,
        need_input_grad,
    )
}

#[derive(Debug, Clone)]
struct CnnCache {
    conv1: ConvCache,
    conv2: ConvCache,
    pool_arg: Vec<usize>,
    conv3: ConvCache,
}

#[derive(Debug, Clone)]
enum SpatialCache {
    Hpm {
        pooled: Vec<f64>,
        argmax: Vec<usize>,
    },
    Plain {
        convs: Vec<ConvCache>,
        gap: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct FrameCache {
    cnn: CnnCache,
    spatial: SpatialCache,
}

#[derive(Debug, Clone)]
pub struct TemporalCache {
    steps: usize,
    input: Vec<f64>,
    act: Vec<f64>,
    argmax: Vec<usize>,
    pooled: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    frames: Vec<FrameCache>,
    temporal: TemporalCache,
}

/// Stateless view over a configuration; all parameters are passed in.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Backbone { config })
    }

    fn check_frame(&self, frame: &[f64]) -> Result<()> {
        let want = self.config.input_height * self.config.input_width;
        if frame.len() != want {
            return Err(GaitError::ShapeMismatch(format!(
                "frame has {} pixels, expected {want}",
                frame.len()
            )));
        }
        Ok(())
    }

    fn cnn_forward(&self, params: &ParamStore, frame: &[f64]) -> CnnCache {
        let cfg = &self.config;
        let s0 = MapShape::new(1, cfg.input_height, cfg.input_width);
        let conv1 = conv_lrelu(params, "enc.conv1", frame.to_vec(), s0, cfg.conv1_channels, 5);
        let s1 = MapShape::new(cfg.conv1_channels, cfg.input_height, cfg.input_width);
        let conv2 = conv_lrelu(params, "enc.conv2", conv1.out.clone(), s1, cfg.conv1_channels, 3);
        let (pooled, pool_arg, s2) = nn::maxpool2_forward(&conv2.out, s1);
        let conv3 = conv_lrelu(params, "enc.conv3", pooled, s2, cfg.channels, 3);
        CnnCache {
            conv1,
            conv2,
            pool_arg,
            conv3,
        }
    }

    fn cnn_backward(
        &self,
        params: &ParamStore,
        cache: &CnnCache,
        grad: Vec<f64>,
        grads: &mut ParamStore,
    ) {
        let cfg = &self.config;
        let g = conv_lrelu_backward(params, "enc.conv3", &cache.conv3, cfg.channels, 3, grad, grads, true);
        let g = nn::maxpool2_backward(&g, &cache.pool_arg, cache.conv2.out.len());
        let g = conv_lrelu_backward(params, "enc.conv2", &cache.conv2, cfg.conv1_channels, 3, g, grads, true);
        conv_lrelu_backward(params, "enc.conv1", &cache.conv1, cfg.conv1_channels, 5, g, grads, false);
    }

    /// Shallow CNN over every frame: `C x h/2 x w/2` maps.
    pub fn shallow_cnn(&self, params: &ParamStore, frames: &[Vec<f64>]) -> Result<FeatureMapSequence> {
        let mut maps = Vec::with_capacity(frames.len());
        for f in frames {
            self.check_frame(f)?;
            maps.push(self.cnn_forward(params, f).conv3.out);
        }
        Ok(FeatureMapSequence {
            shape: self.config.feature_shape(),
            maps,
        })
    }

    fn hpm_forward(&self, params: &ParamStore, map: &[f64]) -> (StripeMatrix, SpatialCache) {
        let cfg = &self.config;
        let shape = cfg.feature_shape();
        let bounds = strip_bounds(shape.height, cfg.scales);
        let n = bounds.len();
        let c = shape.channels;
        let mut pooled = vec![0.0; n * c];
        let mut argmax = vec![0usize; n * c];
        for (j, &(r0, r1)) in bounds.iter().enumerate() {
            let area = ((r1 - r0) * shape.width) as f64;
            for ch in 0..c {
                let base = ch * shape.plane();
                let cells = &map[base + r0 * shape.width..base + r1 * shape.width];
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                let mut sum = 0.0;
                for (i, &v) in cells.iter().enumerate() {
                    sum += v;
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                pooled[j * c + ch] = best + sum / area;
                argmax[j * c + ch] = base + r0 * shape.width + best_i;
            }
        }
        let w = params.data("enc.hpm.w");
        let b = params.data("enc.hpm.b");
        let d = cfg.strip_dim;
        let mut out = Matrix::zeros(n, d);
        for j in 0..n {
            let row = nn::linear_forward(
                &pooled[j * c..(j + 1) * c],
                &w[j * d * c..(j + 1) * d * c],
                &b[j * d..(j + 1) * d],
                d,
            );
            out.row_mut(j).copy_from_slice(&row);
        }
        (out, SpatialCache::Hpm { pooled, argmax })
    }

    /// Horizontal pyramid mapping of one `C x h x w` map into `n x c` strips.
    pub fn hpm(&self, params: &ParamStore, map: &[f64]) -> Result<StripeMatrix> {
        let shape = self.config.feature_shape();
        if map.len() != shape.len() {
            return Err(GaitError::ShapeMismatch(format!(
                "feature map has {} values, expected {}",
                map.len(),
                shape.len()
            )));
        }
        Ok(self.hpm_forward(params, map).0)
    }

    fn plain_forward(&self, params: &ParamStore, map: &[f64]) -> (StripeMatrix, SpatialCache) {
        let cfg = &self.config;
        let shape = cfg.feature_shape();
        let mut convs: Vec<ConvCache> = Vec::with_capacity(3);
        let mut x = map.to_vec();
        for name in PLAIN_CONVS {
            let cache = conv_lrelu(params, name, x, shape, shape.channels, 3);
            x = cache.out.clone();
            convs.push(cache);
        }
        let plane = shape.plane() as f64;
        let gap: Vec<f64> = (0..shape.channels)
            .map(|ch| x[ch * shape.plane()..(ch + 1) * shape.plane()].iter().sum::<f64>() / plane)
            .collect();
        let row = nn::linear_forward(
            &gap,
            params.data("enc.plain_fc.w"),
            params.data("enc.plain_fc.b"),
            cfg.strip_dim,
        );
        let n = cfg.strips();
        let mut out = Matrix::zeros(n, cfg.strip_dim);
        for j in 0..n {
            out.row_mut(j).copy_from_slice(&row);
        }
        (out, SpatialCache::Plain { convs, gap })
    }

    fn spatial_backward(
        &self,
        params: &ParamStore,
        cache: &SpatialCache,
        grad: &StripeMatrix,
        grads: &mut ParamStore,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let shape = cfg.feature_shape();
        let c = shape.channels;
        let d = cfg.strip_dim;
        match cache {
            SpatialCache::Hpm { pooled, argmax } => {
                let bounds = strip_bounds(shape.height, cfg.scales);
                let w = params.data("enc.hpm.w");
                let mut grad_map = vec![0.0; shape.len()];
                let (gw, gb) = grads.pair_mut("enc.hpm.w", "enc.hpm.b");
                for (j, &(r0, r1)) in bounds.iter().enumerate() {
                    let gp = nn::linear_backward(
                        &pooled[j * c..(j + 1) * c],
                        &w[j * d * c..(j + 1) * d * c],
                        grad.row(j),
                        &mut gw[j * d * c..(j + 1) * d * c],
                        &mut gb[j * d..(j + 1) * d],
                    );
                    let area = ((r1 - r0) * shape.width) as f64;
                    for ch in 0..c {
                        let g = gp[ch];
                        grad_map[argmax[j * c + ch]] += g;
                        let base = ch * shape.plane();
                        for v in &mut grad_map[base + r0 * shape.width..base + r1 * shape.width] {
                            *v += g / area;
                        }
                    }
                }
                grad_map
            }
            SpatialCache::Plain { convs, gap } => {
                let mut grow = vec![0.0; d];
                for j in 0..grad.rows {
                    for (a, b) in grow.iter_mut().zip(grad.row(j)) {
                        *a += b;
                    }
                }
                let (gw, gb) = grads.pair_mut("enc.plain_fc.w", "enc.plain_fc.b");
                let g_gap = nn::linear_backward(gap, params.data("enc.plain_fc.w"), &grow, gw, gb);
                let plane = shape.plane();
                let mut g = vec![0.0; shape.len()];
                for ch in 0..c {
                    let v = g_gap[ch] / plane as f64;
                    g[ch * plane..(ch + 1) * plane].iter_mut().for_each(|x| *x = v);
                }
                for (name, cache) in PLAIN_CONVS.iter().zip(convs).rev() {
                    g = conv_lrelu_backward(params, name, cache, c, 3, g, grads, true);
                }
                g
            }
        }
    }

    /// Frame encoder: shallow CNN followed by the spatial module.
    pub fn encode_frame(&self, params: &ParamStore, frame: &[f64]) -> Result<StripeMatrix> {
        Ok(self.encode_frame_cached(params, frame)?.0)
    }

    pub fn encode_frame_cached(
        &self,
        params: &ParamStore,
        frame: &[f64],
    ) -> Result<(StripeMatrix, FrameCache)> {
        self.check_frame(frame)?;
        let cnn = self.cnn_forward(params, frame);
        let (stripes, spatial) = match self.config.ablation {
            Ablation::NoHpm => self.plain_forward(params, &cnn.conv3.out),
            _ => self.hpm_forward(params, &cnn.conv3.out),
        };
        Ok((stripes, FrameCache { cnn, spatial }))
    }

    pub fn encode_frame_backward(
        &self,
        params: &ParamStore,
        cache: &FrameCache,
        grad: &StripeMatrix,
        grads: &mut ParamStore,
    ) {
        let g = self.spatial_backward(params, &cache.spatial, grad, grads);
        self.cnn_backward(params, &cache.cnn, g, grads);
    }

    fn kernel_offset(&self, strip: usize) -> usize {
        if self.config.ablation == Ablation::NoMtb {
            0
        } else {
            strip
        }
    }

    fn temporal_forward(
        &self,
        params: &ParamStore,
        stripes: &[StripeMatrix],
    ) -> Result<(Matrix, TemporalCache)> {
        let cfg = &self.config;
        let t_len = stripes.len();
        let kw = cfg.kernel_width();
        if t_len < kw {
            return Err(GaitError::SequenceTooShortForWindow {
                radius: cfg.radius,
                required: kw,
                available: t_len,
            });
        }
        let n = cfg.strips();
        let c = cfg.strip_dim;
        let d = cfg.embed_dim;
        let mut input = Vec::with_capacity(t_len * n * c);
        for s in stripes {
            if s.shape() != (n, c) {
                return Err(GaitError::ShapeMismatch(format!(
                    "stripe matrix {:?}, expected ({n}, {c})",
                    s.shape()
                )));
            }
            input.extend_from_slice(&s.data);
        }
        let kern = params.data("tr.tcn.w");
        let bias = params.data("tr.tcn.b");
        let r = cfg.radius as isize;
        let mut act = vec![0.0; t_len * n * d];
        for j in 0..n {
            let kj = self.kernel_offset(j);
            let kbase = kj * d * c * kw;
            for t in 0..t_len {
                let out = &mut act[(t * n + j) * d..(t * n + j + 1) * d];
                out.copy_from_slice(&bias[kj * d..(kj + 1) * d]);
                for dt in 0..kw {
                    let src = t as isize + dt as isize - r;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let x = &input[(src as usize * n + j) * c..(src as usize * n + j + 1) * c];
                    for (o, ov) in out.iter_mut().enumerate() {
                        let krow = kbase + o * c * kw;
                        let mut acc = 0.0;
                        for (i, xv) in x.iter().enumerate() {
                            acc += kern[krow + i * kw + dt] * xv;
                        }
                        *ov += acc;
                    }
                }
                nn::leaky_relu_inplace(out);
            }
        }
        let mut pooled = vec![0.0; n * d];
        let mut argmax = vec![0usize; n * d];
        for j in 0..n {
            for o in 0..d {
                if cfg.ablation == Ablation::NoMtb {
                    let s: f64 = (0..t_len).map(|t| act[(t * n + j) * d + o]).sum();
                    pooled[j * d + o] = s / t_len as f64;
                } else {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_t = 0;
                    for t in 0..t_len {
                        let v = act[(t * n + j) * d + o];
                        if v > best {
                            best = v;
                            best_t = t;
                        }
                    }
                    pooled[j * d + o] = best;
                    argmax[j * d + o] = best_t;
                }
            }
        }
        let pooled_m = Matrix::from_vec(n, d, pooled.clone())?;
        let out = fc_bins_apply(params, &pooled_m)?;
        Ok((
            out,
            TemporalCache {
                steps: t_len,
                input,
                act,
                argmax,
                pooled,
            },
        ))
    }

    /// Temporal module over a strip sequence: per-strip TCN, temporal
    /// pooling, then the FC bins. Output is `n x d1`.
    pub fn mtb(&self, params: &ParamStore, stripes: &[StripeMatrix]) -> Result<Embedding> {
        Ok(self.temporal_forward(params, stripes)?.0)
    }

    fn temporal_backward(
        &self,
        params: &ParamStore,
        cache: &TemporalCache,
        grad: &Matrix,
        grads: &mut ParamStore,
    ) -> Vec<StripeMatrix> {
        let cfg = &self.config;
        let n = cfg.strips();
        let c = cfg.strip_dim;
        let d = cfg.embed_dim;
        let kw = cfg.kernel_width();
        let t_len = cache.steps;
        let r = cfg.radius as isize;

        let pooled = Matrix::from_vec(n, d, cache.pooled.clone()).expect("cached shape");
        let g_pooled = fc_bins_backward(params, &pooled, grad, grads);

        let mut g_act = vec![0.0; t_len * n * d];
        for j in 0..n {
            for o in 0..d {
                let g = g_pooled.data[j * d + o];
                if cfg.ablation == Ablation::NoMtb {
                    for t in 0..t_len {
                        g_act[(t * n + j) * d + o] += g / t_len as f64;
                    }
                } else {
                    let t = cache.argmax[j * d + o];
                    g_act[(t * n + j) * d + o] += g;
                }
            }
        }
        nn::leaky_relu_backward_inplace(&mut g_act, &cache.act);

        let kern = params.data("tr.tcn.w");
        let mut g_in = vec![0.0; t_len * n * c];
        let (gk, gb) = grads.pair_mut("tr.tcn.w", "tr.tcn.b");
        for j in 0..n {
            let kj = self.kernel_offset(j);
            let kbase = kj * d * c * kw;
            for t in 0..t_len {
                let gp = &g_act[(t * n + j) * d..(t * n + j + 1) * d];
                for (o, g) in gp.iter().enumerate() {
                    gb[kj * d + o] += g;
                }
                for dt in 0..kw {
                    let src = t as isize + dt as isize - r;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let xoff = (src as usize * n + j) * c;
                    for (o, &g) in gp.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let krow = kbase + o * c * kw;
                        for i in 0..c {
                            gk[krow + i * kw + dt] += g * cache.input[xoff + i];
                            g_in[xoff + i] += g * kern[krow + i * kw + dt];
                        }
                    }
                }
            }
        }
        g_in.chunks(n * c)
            .map(|chunk| Matrix::from_vec(n, c, chunk.to_vec()).expect("cached shape"))
            .collect()
    }

    /// Full backbone: encoder on every frame, then the temporal module.
    pub fn forward(&self, params: &ParamStore, frames: &[Vec<f64>]) -> Result<Embedding> {
        let stripes = frames
            .iter()
            .map(|f| self.encode_frame(params, f))
            .collect::<Result<Vec<_>>>()?;
        self.mtb(params, &stripes)
    }

    pub fn forward_cached(
        &self,
        params: &ParamStore,
        frames: &[Vec<f64>],
    ) -> Result<(Embedding, BackboneCache)> {
        let mut stripes = Vec::with_capacity(frames.len());
        let mut caches = Vec::with_capacity(frames.len());
        for f in frames {
            let (s, c) = self.encode_frame_cached(params, f)?;
            stripes.push(s);
            caches.push(c);
        }
        let (out, temporal) = self.temporal_forward(params, &stripes)?;
        Ok((
            out,
            BackboneCache {
                frames: caches,
                temporal,
            },
        ))
    }

    /// Accumulates `dL/dparams` for every backbone block into `grads`.
    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &BackboneCache,
        grad: &Embedding,
        grads: &mut ParamStore,
    ) {
        let g_stripes = self.temporal_backward(params, &cache.temporal, grad, grads);
        for (fc, g) in cache.frames.iter().zip(&g_stripes) {
            self.encode_frame_backward(params, fc, g, grads);
        }
    }
}

/// Applies FC bin `i` (a `d1 x d1` map plus bias) to row `i`.
pub fn fc_bins_apply(params: &ParamStore, pooled: &Matrix) -> Result<Matrix> {
    let w = params.get("bins.w");
    let b = params.data("bins.b");
    let (n, d_out, d_in) = (w.shape[0], w.shape[1], w.shape[2]);
    if pooled.rows != n || pooled.cols != d_in {
        return Err(GaitError::ShapeMismatch(format!(
            "FC bins expect {n}x{d_in}, got {}x{}",
            pooled.rows, pooled.cols
        )));
    }
    let mut out = Matrix::zeros(n, d_out);
    for i in 0..n {
        let row = nn::linear_forward(
            pooled.row(i),
            &w.data[i * d_out * d_in..(i + 1) * d_out * d_in],
            &b[i * d_out..(i + 1) * d_out],
            d_out,
        );
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(out)
}

/// Backward through [`fc_bins_apply`]; returns the input gradient.
pub fn fc_bins_backward(
    params: &ParamStore,
    input: &Matrix,
    grad: &Matrix,
    grads: &mut ParamStore,
) -> Matrix {
    let w = params.get("bins.w");
    let (n, d_out, d_in) = (w.shape[0], w.shape[1], w.shape[2]);
    let (gw, gb) = grads.pair_mut("bins.w", "bins.b");
    let mut g_in = Matrix::zeros(n, d_in);
    for i in 0..n {
        let gi = nn::linear_backward(
            input.row(i),
            &w.data[i * d_out * d_in..(i + 1) * d_out * d_in],
            grad.row(i),
            &mut gw[i * d_out * d_in..(i + 1) * d_out * d_in],
            &mut gb[i * d_out..(i + 1) * d_out],
        );
        g_in.row_mut(i).copy_from_slice(&gi);
    }
    g_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn tiny(ablation: Ablation) -> BackboneConfig {
        BackboneConfig {
            input_height: 8,
            input_width: 8,
            conv1_channels: 3,
            channels: 4,
            scales: 2,
            strip_dim: 5,
            embed_dim: 5,
            radius: 1,
            ablation,
        }
    }

    #[test]
    fn strip_layout_is_scale_major() {
        assert_eq!(
            strip_bounds(8, 3),
            vec![(0, 8), (0, 4), (4, 8), (0, 2), (2, 4), (4, 6), (6, 8)]
        );
        let b = strip_bounds(32, 5);
        assert_eq!(b.len(), 31);
        assert!(b[15..].iter().all(|(a, z)| z - a == 2));
    }

    #[test]
    fn indivisible_height_is_rejected() {
        let cfg = BackboneConfig {
            input_height: 12,
            ..tiny(Ablation::Full)
        };
        let cfg = BackboneConfig { scales: 3, ..cfg };
        assert!(matches!(
            cfg.validate(),
            Err(GaitError::IndivisibleHeight { height: 6, strips: 4 })
        ));
    }

    #[test]
    fn constant_map_with_identity_fcs_gives_twice_the_value() {
        let cfg = BackboneConfig {
            channels: 5,
            ..tiny(Ablation::Full)
        };
        let bb = Backbone::new(cfg.clone()).unwrap();
        let mut p = cfg.init_params(&mut stream(0, Stream::Init));
        let w = p.data_mut("enc.hpm.w");
        w.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..cfg.strips() {
            for i in 0..5 {
                w[j * 25 + i * 5 + i] = 1.0;
            }
        }
        let map = vec![0.75; cfg.feature_shape().len()];
        let s = bb.hpm(&p, &map).unwrap();
        assert_eq!(s.shape(), (3, 5));
        assert!(s.data.iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn single_scale_gives_one_row() {
        let cfg = BackboneConfig {
            scales: 1,
            ..tiny(Ablation::Full)
        };
        let bb = Backbone::new(cfg.clone()).unwrap();
        let p = cfg.init_params(&mut stream(0, Stream::Init));
        let map: Vec<f64> = (0..cfg.feature_shape().len()).map(|i| i as f64).collect();
        assert_eq!(bb.hpm(&p, &map).unwrap().shape(), (1, 5));
    }

    #[test]
    fn zero_frames_with_zero_biases_give_zero_maps() {
        let cfg = tiny(Ablation::Full);
        let bb = Backbone::new(cfg.clone()).unwrap();
        let p = cfg.init_params(&mut stream(1, Stream::Init));
        let maps = bb.shallow_cnn(&p, &[vec![0.0; 64], vec![0.0; 64]]).unwrap();
        assert_eq!(maps.maps.len(), 2);
        assert_eq!(maps.shape, MapShape::new(4, 4, 4));
        assert!(maps.maps.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn temporal_window_needs_enough_frames() {
        let cfg = tiny(Ablation::Full);
        let bb = Backbone::new(cfg.clone()).unwrap();
        let p = cfg.init_params(&mut stream(1, Stream::Init));
        let err = bb.forward(&p, &[vec![0.5; 64], vec![0.5; 64]]).unwrap_err();
        assert!(matches!(err, GaitError::SequenceTooShortForWindow { .. }));
    }

    #[test]
    fn temporally_constant_sequence_matches_single_frame_response() {
        for ablation in [Ablation::Full, Ablation::NoMtb] {
            // zero-padded boundaries see fewer neighbors, so use r = 0
            let cfg = BackboneConfig {
                radius: 0,
                ..tiny(ablation)
            };
            let bb = Backbone::new(cfg.clone()).unwrap();
            let p = cfg.init_params(&mut stream(2, Stream::Init));
            let f: Vec<f64> = (0..64).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
            let one = bb.forward(&p, &[f.clone()]).unwrap();
            let many = bb.forward(&p, &vec![f; 5]).unwrap();
            for (a, b) in one.data.iter().zip(&many.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_hpm_rows_are_identical_before_temporal_module() {
        let cfg = tiny(Ablation::NoHpm);
        let bb = Backbone::new(cfg.clone()).unwrap();
        let p = cfg.init_params(&mut stream(3, Stream::Init));
        let f: Vec<f64> = (0..64).map(|i| (i % 5) as f64 / 4.0).collect();
        let s = bb.encode_frame(&p, &f).unwrap();
        for j in 1..s.rows {
            assert_eq!(s.row(j), s.row(0));
        }
    }

    #[test]
    fn fc_bins_identity_and_zero_input() {
        let cfg = tiny(Ablation::Full);
        let mut p = cfg.init_params(&mut stream(4, Stream::Init));
        let n = cfg.strips();
        let d = cfg.embed_dim;
        let w = p.data_mut("bins.w");
        w.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            for i in 0..d {
                w[j * d * d + i * d + i] = 1.0;
            }
        }
        let x = Matrix::from_vec(n, d, (0..n * d).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(fc_bins_apply(&p, &x).unwrap(), x);

        let mut p = cfg.init_params(&mut stream(4, Stream::Init));
        p.data_mut("bins.b").iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let z = fc_bins_apply(&p, &Matrix::zeros(n, d)).unwrap();
        assert_eq!(z.data, p.data("bins.b"));

        assert!(matches!(
            fc_bins_apply(&p, &Matrix::zeros(n + 1, d)),
            Err(GaitError::ShapeMismatch(_))
        ));
    }
}
