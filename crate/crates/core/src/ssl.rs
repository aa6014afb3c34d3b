//! Self-supervised pre-training with an online and a target branch.
//!
//! The online branch sees `k` consecutive frames and runs backbone, projection
//! and prediction. The target branch sees the frame that follows them and runs
//! its own frame encoder, the online branch's FC bins (shared storage, not a
//! copy), and its own projection. The online prediction is regressed onto the
//! target projection with a per-strip cosine loss; the target branch receives
//! no gradients and tracks the online weights by exponential moving average.

use rayon::prelude::*;
use rand::Rng;

use crate::backbone::{fc_bins_apply, linear_block, Backbone, BackboneCache, BackboneConfig};
use crate::data::dataset::GaitSequence;
use crate::data::sampling::{sample_pretext_batch, LengthPolicy, PretextSample, TrainingBatch};
use crate::error::{GaitError, Result};
use crate::heads::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, prediction_backward,
    prediction_forward, projection_backward, projection_forward, projection_preactivation, BnStats,
    ProjectionCache,
};
use crate::matrix::{Embedding, IdentityFeature, Matrix};
use crate::params::{ema_blocks, ordered_sum, Adam, ParamStore, Tensor};
use crate::rng::{stream, GaitRng, Stream};

pub const NORM_FLOOR: f64 = 1e-12;
pub const PROJ_BIAS_MARGIN: f64 = 30.0;
const PROJ_BIAS_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Identity-feature width d2.
    pub feature_dim: usize,
    /// Batch norm in the projection heads.
    pub batch_norm: bool,
    /// Target branch reuses the online FC bins instead of keeping its own.
    pub share_bins: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            feature_dim: 256,
            batch_norm: true,
            share_bins: true,
        }
    }
}

impl ModelConfig {
    pub fn compact() -> Self {
        ModelConfig {
            backbone: BackboneConfig::compact(),
            feature_dim: 32,
            batch_norm: true,
            share_bins: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.feature_dim == 0 {
            return Err(GaitError::Config("feature_dim (d2) must be positive".into()));
        }
        if self.backbone.strip_dim != self.backbone.embed_dim {
            return Err(GaitError::Config(format!(
                "the target branch feeds {}-wide strips through the {}-wide FC bins; \
                 strip_dim must equal embed_dim",
                self.backbone.strip_dim, self.backbone.embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub persons: usize,
    pub per_person: usize,
    /// Online frames per pretext window (k); the target frame is one more.
    pub frames: usize,
    /// EMA momentum tau in [0, 1].
    pub momentum: f64,
    pub length_policy: LengthPolicy,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            learning_rate: 1e-4,
            iterations: 1000,
            persons: 8,
            per_person: 2,
            frames: 30,
            momentum: 0.99,
            length_policy: LengthPolicy::Error,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(GaitError::Config(format!(
                "momentum {} outside [0, 1]",
                self.momentum
            )));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(GaitError::Config("learning rate must be finite and >= 0".into()));
        }
        if self.persons == 0 || self.per_person == 0 || self.frames == 0 {
            return Err(GaitError::Config("P, K and k must be positive".into()));
        }
        Ok(())
    }
}

/// Frame encoder, temporal module, FC bins, projection and prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineNetwork {
    pub params: ParamStore,
    pub bn: BnStats,
}

/// Frame encoder and projection; FC bins are read from the online network
/// unless sharing is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNetwork {
    pub params: ParamStore,
    pub bn: BnStats,
}

/// Whether batch norm uses the current batch or the running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Batch,
    Running,
}

pub fn init_online<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> OnlineNetwork {
    let b = &cfg.backbone;
    let n = b.strips();
    let d2 = cfg.feature_dim;
    let mut params = b.init_params(rng);
    linear_block(&mut params, "proj", &[n, d2, b.embed_dim], b.embed_dim, rng);
    params.insert("bn.gamma", Tensor::filled(&[n, d2], 1.0));
    params.insert("bn.beta", Tensor::zeros(&[n, d2]));
    linear_block(&mut params, "pred", &[n, d2, d2], d2, rng);
    OnlineNetwork {
        params,
        bn: BnStats::new(n * d2),
    }
}

/// The target starts as a copy of the online encoder and projection.
pub fn init_target(cfg: &ModelConfig, online: &OnlineNetwork) -> TargetNetwork {
    let mut params = ParamStore::new();
    for prefix in ["enc.", "proj.", "bn."] {
        params.merge(&online.params.subset(prefix));
    }
    if !cfg.share_bins {
        params.merge(&online.params.subset("bins."));
    }
    TargetNetwork {
        params,
        bn: online.bn.clone(),
    }
}

/// Per-strip cosine similarity, averaged over strips and negated so that
/// perfectly aligned features give -1.
pub fn cosine_loss(y_on: &Matrix, y_tar: &Matrix) -> Result<f64> {
    Ok(cosine_loss_grad(y_on, y_tar)?.0)
}

/// Loss and its gradient with respect to `y_on`.
pub fn cosine_loss_grad(y_on: &Matrix, y_tar: &Matrix) -> Result<(f64, Matrix)> {
    if y_on.shape() != y_tar.shape() {
        return Err(GaitError::ShapeMismatch(format!(
            "online {:?} vs target {:?}",
            y_on.shape(),
            y_tar.shape()
        )));
    }
    let n = y_on.rows;
    let mut grad = Matrix::zeros(n, y_on.cols);
    let mut total = 0.0;
    for i in 0..n {
        let a = y_on.row(i);
        let b = y_tar.row(i);
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        for norm in [na, nb] {
            if !(norm >= NORM_FLOOR) {
                return Err(GaitError::DegenerateNorm { row: i, norm });
            }
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let cos = dot / (na * nb);
        total += cos;
        let g = grad.row_mut(i);
        for k in 0..a.len() {
            g[k] = -(b[k] / (na * nb) - cos * a[k] / (na * na)) / n as f64;
        }
    }
    Ok((-total / n as f64, grad))
}

/// `theta' <- tau theta' + (1 - tau) theta` on the target encoder and
/// projection (and on its own FC bins when they are not shared). Batch-norm
/// running statistics are copied.
pub fn ema_update(target: &mut TargetNetwork, online: &OnlineNetwork, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(GaitError::Config(format!("momentum {tau} outside [0, 1]")));
    }
    ema_blocks(&mut target.params, &online.params, tau)?;
    target.bn = online.bn.clone();
    Ok(())
}

#[derive(Debug, Clone)]
struct OnlineSampleCache {
    backbone: BackboneCache,
    projection: ProjectionCache,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Mean per-strip cosine similarity between prediction and target.
    pub mean_cosine: f64,
    /// Smallest across-batch standard deviation over target feature cells.
    pub target_std_min: f64,
}

/// Online/target pair plus the optimizer state of the online branch.
#[derive(Debug, Clone)]
pub struct DualNetwork {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub online: OnlineNetwork,
    pub target: TargetNetwork,
    pub optimizer: Adam,
    pub momentum: f64,
    pub steps: usize,
}

impl DualNetwork {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        learning_rate: f64,
        momentum: f64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let online = init_online(&config, rng);
        let target = init_target(&config, &online);
        Self::from_parts(config, online, target, learning_rate, momentum)
    }

    pub fn from_parts(
        config: ModelConfig,
        online: OnlineNetwork,
        target: TargetNetwork,
        learning_rate: f64,
        momentum: f64,
    ) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone.clone())?;
        let optimizer = Adam::new(&online.params, learning_rate);
        Ok(DualNetwork {
            config,
            backbone,
            online,
            target,
            optimizer,
            momentum,
            steps: 0,
        })
    }

    fn bins_source(&self) -> &ParamStore {
        if self.config.share_bins {
            &self.online.params
        } else {
            &self.target.params
        }
    }

    fn normalize(
        &self,
        params: &ParamStore,
        stats: &BnStats,
        batch: Vec<Matrix>,
        mode: BnMode,
    ) -> Vec<Matrix> {
        if !self.config.batch_norm {
            return batch;
        }
        match mode {
            BnMode::Batch => batch_norm_train(params, &batch, None).0,
            BnMode::Running => batch.iter().map(|m| batch_norm_eval(params, stats, m)).collect(),
        }
    }

    /// Online projection inputs before batch norm, one per sample.
    fn online_pre_norm(&self, clips: &[Vec<Vec<f64>>]) -> Result<Vec<Matrix>> {
        clips
            .par_iter()
            .map(|frames| {
                let z = self.backbone.forward(&self.online.params, frames)?;
                Ok(projection_forward(&self.online.params, &z).0)
            })
            .collect()
    }

    /// Data-dependent projection bias: every unit's bias is set so that its
    /// smallest pre-activation over the target-branch inputs sits
    /// `PROJ_BIAS_MARGIN` batch ranges above zero. Online and target share
    /// the result, so the target stays an exact copy.
    pub fn calibrate_projection(&mut self, target_frames: &[Vec<f64>]) -> Result<()> {
        let bins = self.bins_source();
        let target_z = target_frames
            .par_iter()
            .map(|f| fc_bins_apply(bins, &self.backbone.encode_frame(&self.target.params, f)?))
            .collect::<Result<Vec<_>>>()?;
        let bias = margin_bias(&self.target.params, &target_z);
        self.online.params.data_mut("proj.b").copy_from_slice(&bias);
        self.target.params.data_mut("proj.b").copy_from_slice(&bias);
        Ok(())
    }

    /// Backbone embedding of a clip (no heads).
    pub fn embed(&self, frames: &[Vec<f64>]) -> Result<Embedding> {
        self.backbone.forward(&self.online.params, frames)
    }

    /// Online identity features `n x d2` for a batch of k-frame clips.
    pub fn online_forward(&self, clips: &[Vec<Vec<f64>>], mode: BnMode) -> Result<Vec<IdentityFeature>> {
        let h = self.online_pre_norm(clips)?;
        let b = self.normalize(&self.online.params, &self.online.bn, h, mode);
        Ok(b.iter().map(|m| prediction_forward(&self.online.params, m)).collect())
    }

    /// Target projection inputs before batch norm.
    pub fn target_pre_norm(&self, frames: &[Vec<f64>]) -> Result<Vec<Matrix>> {
        let bins = self.bins_source();
        frames
            .par_iter()
            .map(|f| {
                let spatial = self.backbone.encode_frame(&self.target.params, f)?;
                let z = fc_bins_apply(bins, &spatial)?;
                Ok(projection_forward(&self.target.params, &z).0)
            })
            .collect()
    }

    /// Target identity features `n x d2`, one per frame.
    pub fn target_forward(&self, frames: &[Vec<f64>], mode: BnMode) -> Result<Vec<IdentityFeature>> {
        let h = self.target_pre_norm(frames)?;
        Ok(self.normalize(&self.target.params, &self.target.bn, h, mode))
    }

    /// Splits a pretext batch into network-ready online clips and target frames.
    pub fn prepare_batch(
        &self,
        batch: &TrainingBatch<PretextSample>,
    ) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
        let cfg = &self.config.backbone;
        let mut clips = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for (_, s) in &batch.items {
            clips.push(cfg.prepare_frames(&s.online_frames)?);
            targets.push(
                cfg.prepare_frames(std::slice::from_ref(&s.target_frame))?
                    .pop()
                    .expect("one frame"),
            );
        }
        Ok((clips, targets))
    }

    /// Loss, diagnostics and online-parameter gradients for one batch,
    /// without touching any parameters.
    pub fn loss_and_grad(
        &self,
        clips: &[Vec<Vec<f64>>],
        target_frames: &[Vec<f64>],
    ) -> Result<(StepStats, ParamStore, BnStats)> {
        if clips.is_empty() || clips.len() != target_frames.len() {
            return Err(GaitError::DegenerateBatch(format!(
                "{} clips with {} target frames",
                clips.len(),
                target_frames.len()
            )));
        }
        let batch = clips.len();
        let params = &self.online.params;

        let forward: Vec<(Matrix, OnlineSampleCache)> = clips
            .par_iter()
            .map(|frames| {
                let (z, backbone) = self.backbone.forward_cached(params, frames)?;
                let (h, projection) = projection_forward(params, &z);
                Ok((h, OnlineSampleCache { backbone, projection }))
            })
            .collect::<Result<_>>()?;
        let (h, caches): (Vec<Matrix>, Vec<OnlineSampleCache>) = forward.into_iter().unzip();

        let mut bn_stats = self.online.bn.clone();
        let (normed, bn_cache) = if self.config.batch_norm {
            let (y, c) = batch_norm_train(params, &h, Some(&mut bn_stats));
            (y, Some(c))
        } else {
            (h, None)
        };
        let y_on: Vec<Matrix> = normed.iter().map(|m| prediction_forward(params, m)).collect();
        // stop-gradient: the target branch is evaluated without caches
        let y_tar = self.target_forward(target_frames, BnMode::Batch)?;

        let mut loss = 0.0;
        let mut d_y = Vec::with_capacity(batch);
        for (a, b) in y_on.iter().zip(&y_tar) {
            let (l, mut g) = cosine_loss_grad(a, b)?;
            loss += l / batch as f64;
            g.data.iter_mut().for_each(|v| *v /= batch as f64);
            d_y.push(g);
        }
        let stats = StepStats {
            loss,
            mean_cosine: -loss,
            target_std_min: min_batch_std(&y_tar),
        };

        let mut head_grads = params.zeros_like();
        let d_norm: Vec<Matrix> = normed
            .iter()
            .zip(&d_y)
            .map(|(x, g)| prediction_backward(params, x, g, &mut head_grads))
            .collect();
        let d_h = match &bn_cache {
            Some(c) => batch_norm_backward(params, c, &d_norm, &mut head_grads),
            None => d_norm,
        };
        let per_sample: Vec<ParamStore> = caches
            .par_iter()
            .zip(d_h.par_iter())
            .map(|(cache, g)| {
                let mut grads = params.zeros_like();
                let dz = projection_backward(params, &cache.projection, g, &mut grads);
                self.backbone.backward(params, &cache.backbone, &dz, &mut grads);
                grads
            })
            .collect();
        let mut grads = head_grads;
        if let Some(sum) = ordered_sum(per_sample) {
            grads.add_assign(&sum);
        }
        Ok((stats, grads, bn_stats))
    }

    /// One optimization step: Adam on every online parameter (including the
    /// shared FC bins), then the EMA update of the target.
    pub fn step(&mut self, clips: &[Vec<Vec<f64>>], target_frames: &[Vec<f64>]) -> Result<StepStats> {
        let (stats, grads, bn_stats) = self.loss_and_grad(clips, target_frames)?;
        if !stats.loss.is_finite() || !grads.all_finite() {
            return Err(GaitError::NonFiniteLoss { step: self.steps });
        }
        self.optimizer.update(&mut self.online.params, &grads);
        self.online.bn = bn_stats;
        ema_update(&mut self.target, &self.online, self.momentum)?;
        self.steps += 1;
        Ok(stats)
    }

    pub fn pretrain_step(&mut self, batch: &TrainingBatch<PretextSample>) -> Result<StepStats> {
        let (clips, targets) = self.prepare_batch(batch)?;
        self.step(&clips, &targets)
    }
}

fn margin_bias(params: &ParamStore, inputs: &[Matrix]) -> Vec<f64> {
    let mut bias = params.data("proj.b").to_vec();
    if inputs.is_empty() {
        return bias;
    }
    let pre: Vec<Matrix> = inputs.iter().map(|z| projection_preactivation(params, z)).collect();
    for (cell, b) in bias.iter_mut().enumerate() {
        let (lo, hi) = pre.iter().map(|m| m.data[cell] - *b).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        *b = -lo + PROJ_BIAS_MARGIN * (hi - lo).max(PROJ_BIAS_FLOOR);
    }
    bias
}

/// The pre-training loop state: both networks plus the batch sampler.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    pub net: DualNetwork,
    pub config: PretrainConfig,
    sampling: GaitRng,
    calibrated: bool,
}

impl Pretrainer {
    pub fn new(model: ModelConfig, config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = stream(config.seed, Stream::Init);
        let net = DualNetwork::new(model, config.learning_rate, config.momentum, &mut init)?;
        Ok(Pretrainer {
            net,
            sampling: stream(config.seed, Stream::Sampling),
            config,
            calibrated: false,
        })
    }

    pub fn sample_batch(&mut self, sequences: &[GaitSequence]) -> Result<TrainingBatch<PretextSample>> {
        let c = &self.config;
        sample_pretext_batch(
            sequences,
            c.persons,
            c.per_person,
            c.frames,
            c.length_policy,
            &mut self.sampling,
        )
    }

    /// Draws a batch and takes one step. The first call also calibrates the
    /// projection bias on that batch's target frames.
    pub fn step(&mut self, sequences: &[GaitSequence]) -> Result<StepStats> {
        let batch = self.sample_batch(sequences)?;
        let (clips, targets) = self.net.prepare_batch(&batch)?;
        if !self.calibrated {
            self.net.calibrate_projection(&targets)?;
            self.calibrated = true;
        }
        self.net.step(&clips, &targets)
    }
}

/// Minimum over feature cells of the across-batch standard deviation.
pub fn min_batch_std(batch: &[Matrix]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let b = batch.len() as f64;
    let cells = batch[0].data.len();
    (0..cells)
        .map(|i| {
            let mean = batch.iter().map(|m| m.data[i]).sum::<f64>() / b;
            (batch.iter().map(|m| (m.data[i] - mean).powi(2)).sum::<f64>() / b).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn identical_features_give_minus_one() {
        let a = m(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        assert!((cosine_loss(&a, &a).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_rows_give_zero() {
        let a = m(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let b = m(2, 2, &[0.0, 2.0, 5.0, 0.0]);
        assert_eq!(cosine_loss(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn mixed_rows_average() {
        let a = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = m(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(cosine_loss(&a, &b).unwrap(), -0.5);
    }

    #[test]
    fn zero_row_is_degenerate() {
        let a = m(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = m(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            cosine_loss(&a, &b),
            Err(GaitError::DegenerateNorm { row: 1, .. })
        ));
    }

    #[test]
    fn momentum_outside_unit_interval_is_rejected() {
        let cfg = PretrainConfig {
            momentum: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mismatched_strip_and_embed_widths_are_rejected() {
        let mut cfg = ModelConfig::compact();
        cfg.backbone.embed_dim = 12;
        assert!(matches!(cfg.validate(), Err(GaitError::Config(_))));
    }
}
