//! Supervised fine-tuning of the backbone with the batch-all triplet loss.

use rayon::prelude::*;

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::dataset::{GaitSequence, Identity};
use crate::data::sampling::{sample_clip_batch, LengthPolicy, TrainingBatch};
use crate::data::silhouette::Silhouette;
use crate::error::{GaitError, Result};
use crate::matrix::{Embedding, Matrix};
use crate::params::{ordered_sum, Adam, ParamStore};
use crate::rng::{stream, GaitRng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct TripletConfig {
    /// Hinge margin between intra- and inter-class distances.
    pub margin: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub persons: usize,
    pub per_person: usize,
    /// Frames per training clip.
    pub frames: usize,
    pub length_policy: LengthPolicy,
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.2,
            learning_rate: 1e-4,
            iterations: 1000,
            persons: 8,
            per_person: 2,
            frames: 30,
            length_policy: LengthPolicy::Error,
            seed: 0,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(GaitError::Config("margin must be positive".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(GaitError::Config("learning rate must be finite and >= 0".into()));
        }
        if self.frames == 0 {
            return Err(GaitError::Config("clip length must be positive".into()));
        }
        if self.persons < 2 || self.per_person < 2 {
            return Err(GaitError::Config(
                "triplet batches need P >= 2 and K >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Mean over strips of the Euclidean distance between matching rows.
pub fn stripe_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(GaitError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(stripe_distance_unchecked(a, b))
}

fn stripe_distance_unchecked(a: &Matrix, b: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows {
        let sq: f64 = a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y) * (x - y)).sum();
        total += sq.sqrt();
    }
    total / a.rows as f64
}

/// `d stripe_distance(a, b) / d a`; rows where `a == b` contribute zero.
fn stripe_distance_grad(a: &Matrix, b: &Matrix) -> Matrix {
    let mut g = Matrix::zeros(a.rows, a.cols);
    for i in 0..a.rows {
        let diff: Vec<f64> = a.row(i).iter().zip(b.row(i)).map(|(x, y)| x - y).collect();
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (gv, dv) in g.row_mut(i).iter_mut().zip(&diff) {
                *gv = dv / (norm * a.rows as f64);
            }
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutcome {
    pub loss: f64,
    /// Number of (anchor, positive, negative) triples enumerated.
    pub triplets: usize,
    /// Triples with a nonzero hinge.
    pub active: usize,
}

/// Number of (anchor, positive, negative) index triples in a labeled batch.
pub fn count_triplets(labels: &[Identity]) -> usize {
    let mut count = 0;
    for (a, la) in labels.iter().enumerate() {
        let positives = labels.iter().enumerate().filter(|&(p, lp)| p != a && lp == la).count();
        let negatives = labels.iter().filter(|&lg| lg != la).count();
        count += positives * negatives;
    }
    count
}

fn check_batch(embeddings: &[Embedding], labels: &[Identity]) -> Result<()> {
    if embeddings.len() != labels.len() {
        return Err(GaitError::ShapeMismatch(format!(
            "{} embeddings with {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let mut ids: Vec<Identity> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(GaitError::DegenerateBatch(format!(
            "{} identities in batch, 2 needed",
            ids.len()
        )));
    }
    let min_per_id = ids
        .iter()
        .map(|id| labels.iter().filter(|l| *l == id).count())
        .min()
        .unwrap_or(0);
    if min_per_id < 2 {
        return Err(GaitError::DegenerateBatch(
            "every identity needs at least 2 samples".into(),
        ));
    }
    if let Some(first) = embeddings.first() {
        if embeddings.iter().any(|e| e.shape() != first.shape()) {
            return Err(GaitError::ShapeMismatch("embedding shapes differ".into()));
        }
    }
    Ok(())
}

/// Batch-all triplet loss: every (anchor, positive, negative) triple in the
/// batch contributes `max(0, margin + D(a, p) - D(a, n))`; the loss is the
/// mean over triples with a nonzero term (zero when none are active).
pub fn triplet_loss_ba(embeddings: &[Embedding], labels: &[Identity], margin: f64) -> Result<TripletOutcome> {
    Ok(triplet_loss_ba_grad(embeddings, labels, margin, false)?.0)
}

/// Loss plus `dL / d embedding` for each batch member (empty when
/// `want_grad` is false).
pub fn triplet_loss_ba_grad(
    embeddings: &[Embedding],
    labels: &[Identity],
    margin: f64,
    want_grad: bool,
) -> Result<(TripletOutcome, Vec<Matrix>)> {
    check_batch(embeddings, labels)?;
    let b = embeddings.len();
    let mut dist = vec![0.0; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let d = stripe_distance_unchecked(&embeddings[i], &embeddings[j]);
            dist[i * b + j] = d;
            dist[j * b + i] = d;
        }
    }
    // coeff[x * b + y]: total weight of d D(x, y) in the loss, before 1/active
    let mut coeff = vec![0.0; b * b];
    let mut total = 0.0;
    let mut triplets = 0;
    let mut active = 0;
    for a in 0..b {
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..b {
                if labels[n] == labels[a] {
                    continue;
                }
                triplets += 1;
                let term = margin + dist[a * b + p] - dist[a * b + n];
                if term > 0.0 {
                    total += term;
                    active += 1;
                    coeff[a * b + p] += 1.0;
                    coeff[a * b + n] -= 1.0;
                }
            }
        }
    }
    let loss = if active > 0 { total / active as f64 } else { 0.0 };
    let outcome = TripletOutcome {
        loss,
        triplets,
        active,
    };
    if !want_grad {
        return Ok((outcome, Vec::new()));
    }
    let (rows, cols) = embeddings[0].shape();
    let mut grads = vec![Matrix::zeros(rows, cols); b];
    if active > 0 {
        let scale = 1.0 / active as f64;
        for x in 0..b {
            for y in 0..b {
                let c = coeff[x * b + y];
                if c == 0.0 {
                    continue;
                }
                let g = stripe_distance_grad(&embeddings[x], &embeddings[y]);
                for k in 0..g.data.len() {
                    grads[x].data[k] += c * scale * g.data[k];
                    grads[y].data[k] -= c * scale * g.data[k];
                }
            }
        }
    }
    Ok((outcome, grads))
}

/// Backbone fine-tuning state: parameters plus Adam moments.
#[derive(Debug, Clone)]
pub struct Finetuner {
    pub backbone: Backbone,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub config: TripletConfig,
    pub steps: usize,
    sampling: GaitRng,
}

impl Finetuner {
    /// Keeps only the backbone blocks of `params` (heads are discarded).
    pub fn new(backbone: Backbone, params: &ParamStore, config: TripletConfig) -> Result<Self> {
        config.validate()?;
        let mut own = ParamStore::new();
        for prefix in ["enc.", "tr.", "bins."] {
            own.merge(&params.subset(prefix));
        }
        let reference = backbone.config.init_params(&mut stream(0, Stream::Init));
        own.check_same_layout(&reference)?;
        let optimizer = Adam::new(&own, config.learning_rate);
        let sampling = stream(config.seed, Stream::Sampling);
        Ok(Finetuner {
            backbone,
            params: own,
            optimizer,
            config,
            steps: 0,
            sampling,
        })
    }

    /// Random initialization from the run seed's init stream.
    pub fn from_scratch(backbone: BackboneConfig, config: TripletConfig) -> Result<Self> {
        let params = backbone.init_params(&mut stream(config.seed, Stream::Init));
        Self::new(Backbone::new(backbone)?, &params, config)
    }

    pub fn embed_sequence(&self, frames: &[Silhouette]) -> Result<Embedding> {
        let prepared = self.backbone.config.prepare_frames(frames)?;
        self.backbone.forward(&self.params, &prepared)
    }

    /// Loss and gradient of the backbone parameters for prepared clips.
    pub fn loss_and_grad(
        &self,
        clips: &[Vec<Vec<f64>>],
        labels: &[Identity],
    ) -> Result<(TripletOutcome, ParamStore)> {
        let forward: Vec<_> = clips
            .par_iter()
            .map(|c| self.backbone.forward_cached(&self.params, c))
            .collect::<Result<_>>()?;
        let (embeddings, caches): (Vec<_>, Vec<_>) = forward.into_iter().unzip();
        let (outcome, d_emb) = triplet_loss_ba_grad(&embeddings, labels, self.config.margin, true)?;
        let per_sample: Vec<ParamStore> = caches
            .par_iter()
            .zip(d_emb.par_iter())
            .map(|(cache, g)| {
                let mut grads = self.params.zeros_like();
                self.backbone.backward(&self.params, cache, g, &mut grads);
                grads
            })
            .collect();
        let grads = ordered_sum(per_sample).unwrap_or_else(|| self.params.zeros_like());
        Ok((outcome, grads))
    }

    pub fn step_prepared(&mut self, clips: &[Vec<Vec<f64>>], labels: &[Identity]) -> Result<TripletOutcome> {
        let (outcome, grads) = self.loss_and_grad(clips, labels)?;
        if !outcome.loss.is_finite() || !grads.all_finite() {
            return Err(GaitError::NonFiniteLoss { step: self.steps });
        }
        self.optimizer.update(&mut self.params, &grads);
        self.steps += 1;
        Ok(outcome)
    }

    /// Draws a P x K clip batch from `sequences` and takes one step.
    pub fn train_step(&mut self, sequences: &[GaitSequence]) -> Result<TripletOutcome> {
        let c = &self.config;
        let batch = sample_clip_batch(
            sequences,
            c.persons,
            c.per_person,
            c.frames,
            c.length_policy,
            &mut self.sampling,
        )?;
        self.finetune_step(&batch)
    }

    pub fn finetune_step(&mut self, batch: &TrainingBatch<Vec<Silhouette>>) -> Result<TripletOutcome> {
        let clips = batch
            .items
            .iter()
            .map(|(_, frames)| self.backbone.config.prepare_frames(frames))
            .collect::<Result<Vec<_>>>()?;
        self.step_prepared(&clips, &batch.labels())
    }
}
