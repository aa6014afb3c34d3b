use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::dataset::{GaitSequence, Identity};
use crate::data::silhouette::Silhouette;
use crate::error::{GaitError, Result};

pub const DEFAULT_PRETEXT_FRAMES: usize = 30;

/// What to do with a sequence shorter than the requested window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthPolicy {
    Error,
    /// Repeat the sequence cyclically until it is long enough.
    PadLoop,
}

/// `k` consecutive frames for the online branch plus their successor for
/// the target branch.
#[derive(Debug, Clone, PartialEq)]
pub struct PretextSample {
    pub online_frames: Vec<Silhouette>,
    pub target_frame: Silhouette,
}

impl PretextSample {
    pub fn k(&self) -> usize {
        self.online_frames.len()
    }
}

fn looped(frames: &[Silhouette], len: usize) -> Vec<Silhouette> {
    (0..len).map(|i| frames[i % frames.len()].clone()).collect()
}

/// Picks a contiguous window of `len` frames, uniformly over valid starts.
/// Returns the start index into the (possibly looped) frame list.
pub fn sample_window<R: Rng + ?Sized>(
    frames: &[Silhouette],
    len: usize,
    policy: LengthPolicy,
    rng: &mut R,
) -> Result<(usize, Vec<Silhouette>)> {
    if frames.is_empty() || (frames.len() < len && policy == LengthPolicy::Error) {
        return Err(GaitError::SequenceTooShort {
            available: frames.len(),
            required: len,
        });
    }
    if frames.len() < len {
        return Ok((0, looped(frames, len)));
    }
    let start = if frames.len() > len {
        rng.random_range(0..=frames.len() - len)
    } else {
        0
    };
    Ok((start, frames[start..start + len].to_vec()))
}

pub fn make_pretext_sample<R: Rng + ?Sized>(
    seq: &GaitSequence,
    k: usize,
    policy: LengthPolicy,
    rng: &mut R,
) -> Result<PretextSample> {
    let (_, mut window) = sample_window(&seq.frames, k + 1, policy, rng)?;
    let target_frame = window.pop().expect("window holds k + 1 frames");
    Ok(PretextSample {
        online_frames: window,
        target_frame,
    })
}

/// Deterministic clip for evaluation: the first `len` frames, looped when the
/// sequence is shorter.
pub fn head_clip(frames: &[Silhouette], len: usize) -> Vec<Silhouette> {
    if frames.len() >= len {
        frames[..len].to_vec()
    } else {
        looped(frames, len)
    }
}

/// P identities with K items each, grouped by identity in draw order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch<T> {
    pub persons: usize,
    pub per_person: usize,
    pub items: Vec<(Identity, T)>,
}

impl<T> TrainingBatch<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<Identity> {
        self.items.iter().map(|(id, _)| *id).collect()
    }
}

fn eligible_by_identity(
    sequences: &[GaitSequence],
    min_len: usize,
    policy: LengthPolicy,
) -> BTreeMap<Identity, Vec<&GaitSequence>> {
    let mut by_id: BTreeMap<Identity, Vec<&GaitSequence>> = BTreeMap::new();
    for s in sequences {
        let usable = !s.frames.is_empty()
            && (s.frames.len() >= min_len || policy == LengthPolicy::PadLoop);
        if usable {
            by_id.entry(s.identity).or_default().push(s);
        }
    }
    by_id
}

fn draw_sequences<'a, R: Rng + ?Sized>(
    sequences: &'a [GaitSequence],
    persons: usize,
    per_person: usize,
    min_len: usize,
    policy: LengthPolicy,
    rng: &mut R,
) -> Result<Vec<(Identity, &'a GaitSequence)>> {
    if persons == 0 || per_person == 0 {
        return Err(GaitError::NotEnoughData("P and K must be positive".into()));
    }
    let by_id = eligible_by_identity(sequences, min_len, policy);
    let mut candidates: Vec<Identity> = by_id
        .iter()
        .filter(|(_, seqs)| seqs.len() >= per_person)
        .map(|(id, _)| *id)
        .collect();
    if candidates.len() < persons {
        return Err(GaitError::NotEnoughData(format!(
            "{} identities have {per_person} usable sequences of length {min_len}, {persons} needed",
            candidates.len()
        )));
    }
    let (chosen, _) = candidates.partial_shuffle(rng, persons);
    let chosen = chosen.to_vec();
    let mut out = Vec::with_capacity(persons * per_person);
    for id in chosen {
        let mut seqs = by_id[&id].clone();
        let (picked, _) = seqs.partial_shuffle(rng, per_person);
        out.extend(picked.iter().map(|s| (id, *s)));
    }
    Ok(out)
}

/// Draws P identities and K sequences per identity without replacement and
/// cuts one pretext window from each sequence.
pub fn sample_pretext_batch<R: Rng + ?Sized>(
    sequences: &[GaitSequence],
    persons: usize,
    per_person: usize,
    k: usize,
    policy: LengthPolicy,
    rng: &mut R,
) -> Result<TrainingBatch<PretextSample>> {
    let drawn = draw_sequences(sequences, persons, per_person, k + 1, policy, rng)?;
    let items = drawn
        .into_iter()
        .map(|(id, s)| Ok((id, make_pretext_sample(s, k, policy, rng)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingBatch {
        persons,
        per_person,
        items,
    })
}

/// Labeled variant for fine-tuning: each item is a clip of `clip_len` frames.
pub fn sample_clip_batch<R: Rng + ?Sized>(
    sequences: &[GaitSequence],
    persons: usize,
    per_person: usize,
    clip_len: usize,
    policy: LengthPolicy,
    rng: &mut R,
) -> Result<TrainingBatch<Vec<Silhouette>>> {
    let drawn = draw_sequences(sequences, persons, per_person, clip_len, policy, rng)?;
    let items = drawn
        .into_iter()
        .map(|(id, s)| Ok((id, sample_window(&s.frames, clip_len, policy, rng)?.1)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingBatch {
        persons,
        per_person,
        items,
    })
}
