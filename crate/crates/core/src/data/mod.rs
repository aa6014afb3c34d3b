//! Silhouette loading, alignment, sampling and synthetic data.

pub mod dataset;
pub mod sampling;
pub mod silhouette;
pub mod synth;

pub use dataset::{
    index_casia_b, index_dataset, index_ou_mvlp, protocol_split, Condition, DatasetIndex,
    FractionMode, FrameSource, GaitSequence, Identity, Layout, Protocol, SequenceDescriptor,
};
pub use sampling::{
    head_clip, make_pretext_sample, sample_clip_batch, sample_pretext_batch, LengthPolicy,
    PretextSample, TrainingBatch,
};
pub use silhouette::{align_silhouette, Silhouette, ALIGNED_HEIGHT, ALIGNED_WIDTH};
pub use synth::{generate_synthetic_dataset, materialize, SynthConfig};
