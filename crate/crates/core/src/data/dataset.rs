use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::warn;

use crate::data::silhouette::{align_silhouette, Silhouette};
use crate::error::{GaitError, Result};

pub type Identity = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    /// Normal walking.
    Nm,
    /// Carrying a bag.
    Bg,
    /// Wearing a coat.
    Cl,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Nm, Condition::Bg, Condition::Cl];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Nm => "nm",
            Condition::Bg => "bg",
            Condition::Cl => "cl",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str().to_uppercase())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nm" => Ok(Condition::Nm),
            "bg" => Ok(Condition::Bg),
            "cl" => Ok(Condition::Cl),
            other => Err(format!("unknown walking condition `{other}`")),
        }
    }
}

/// Where a sequence's frames come from.
#[derive(Debug, Clone)]
pub enum FrameSource {
    /// PNG files in temporal order; loaded and aligned on demand.
    Files(Vec<PathBuf>),
    /// Frames already resident and aligned (synthetic data).
    Memory(Arc<Vec<Silhouette>>),
}

#[derive(Debug, Clone)]
pub struct SequenceDescriptor {
    pub identity: Identity,
    pub view: u32,
    pub condition: Condition,
    pub sequence_index: u32,
    pub source: FrameSource,
}

impl SequenceDescriptor {
    pub fn frame_count(&self) -> usize {
        match &self.source {
            FrameSource::Files(f) => f.len(),
            FrameSource::Memory(m) => m.len(),
        }
    }

    /// Loads and aligns every frame. Frames that are entirely empty are
    /// skipped with a log line.
    pub fn load(&self) -> Result<GaitSequence> {
        let frames = match &self.source {
            FrameSource::Memory(m) => m.as_ref().clone(),
            FrameSource::Files(paths) => {
                let mut frames = Vec::with_capacity(paths.len());
                for p in paths {
                    let raw = Silhouette::read_png(p)?;
                    match align_silhouette(&raw) {
                        Ok(f) => frames.push(f),
                        Err(GaitError::EmptySilhouette) => {
                            warn!("skipping empty frame {}", p.display());
                        }
                        Err(e) => return Err(e),
                    }
                }
                frames
            }
        };
        if frames.is_empty() {
            return Err(GaitError::NotEnoughData(format!(
                "sequence {}/{}-{:02}/{:03} has no usable frames",
                self.identity, self.condition.as_str(), self.sequence_index, self.view
            )));
        }
        Ok(GaitSequence {
            identity: self.identity,
            view: self.view,
            condition: self.condition,
            sequence_index: self.sequence_index,
            frames,
        })
    }
}

/// One person's silhouette sequence under one view and walking condition.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitSequence {
    pub identity: Identity,
    pub view: u32,
    pub condition: Condition,
    pub sequence_index: u32,
    pub frames: Vec<Silhouette>,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    pub sequences: Vec<SequenceDescriptor>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IndexSummary {
    pub identities: usize,
    pub conditions: usize,
    pub views: usize,
    pub sequences: usize,
}

impl DatasetIndex {
    pub fn new(mut sequences: Vec<SequenceDescriptor>) -> Self {
        sequences.sort_by_key(|s| (s.identity, s.condition, s.sequence_index, s.view));
        DatasetIndex { sequences }
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn identities(&self) -> Vec<Identity> {
        let set: BTreeSet<Identity> = self.sequences.iter().map(|s| s.identity).collect();
        set.into_iter().collect()
    }

    pub fn views(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.sequences.iter().map(|s| s.view).collect();
        set.into_iter().collect()
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let set: BTreeSet<Condition> = self.sequences.iter().map(|s| s.condition).collect();
        set.into_iter().collect()
    }

    pub fn summary(&self) -> IndexSummary {
        IndexSummary {
            identities: self.identities().len(),
            conditions: self.conditions().len(),
            views: self.views().len(),
            sequences: self.sequences.len(),
        }
    }

    /// Sequences belonging to the given identities.
    pub fn restrict(&self, identities: &[Identity]) -> DatasetIndex {
        let keep: BTreeSet<Identity> = identities.iter().copied().collect();
        DatasetIndex {
            sequences: self
                .sequences
                .iter()
                .filter(|s| keep.contains(&s.identity))
                .cloned()
                .collect(),
        }
    }

    /// Deterministic subset keeping `ceil(fraction * total)` identities, or
    /// that share of each identity's (condition, sequence) groups.
    pub fn fraction(&self, fraction: f64, mode: FractionMode) -> DatasetIndex {
        if fraction >= 1.0 {
            return self.clone();
        }
        let share = |n: usize| ((fraction * n as f64).ceil() as usize).clamp(1, n.max(1));
        match mode {
            FractionMode::Identities => {
                let ids = self.identities();
                self.restrict(&ids[..share(ids.len())])
            }
            FractionMode::Sequences => {
                let mut keep = Vec::new();
                for id in self.identities() {
                    let groups: BTreeSet<(Condition, u32)> = self
                        .sequences
                        .iter()
                        .filter(|s| s.identity == id)
                        .map(|s| (s.condition, s.sequence_index))
                        .collect();
                    let chosen: BTreeSet<_> = groups.iter().take(share(groups.len())).copied().collect();
                    keep.extend(
                        self.sequences
                            .iter()
                            .filter(|s| s.identity == id && chosen.contains(&(s.condition, s.sequence_index)))
                            .cloned(),
                    );
                }
                DatasetIndex::new(keep)
            }
        }
    }
}

/// How a training-set fraction is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FractionMode {
    /// Leading share of the sorted identities, all of their sequences.
    Identities,
    /// Every identity, leading share of its sequences.
    Sequences,
}

impl FractionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FractionMode::Identities => "identities",
            FractionMode::Sequences => "sequences",
        }
    }
}

impl FromStr for FractionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "identities" => Ok(FractionMode::Identities),
            "sequences" => Ok(FractionMode::Sequences),
            other => Err(format!("unknown fraction mode {other:?} (identities, sequences)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    CasiaB,
    OuMvlp,
}

fn parse_digits(s: &str, width: usize) -> Option<u32> {
    (s.len() == width && s.bytes().all(|b| b.is_ascii_digit()))
        .then(|| s.parse().ok())
        .flatten()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| GaitError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect())
}

/// Indexes `root/<subject>/<cond>-<seq>/<view>/<frame>.png`. Entries that do
/// not parse are skipped and reported in the returned warnings.
pub fn index_casia_b(root: &Path) -> Result<(DatasetIndex, Vec<GaitError>)> {
    let mut sequences = Vec::new();
    let mut warnings = Vec::new();
    let malformed = |path: &Path, reason: &str| GaitError::MalformedLayout {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    for subject_dir in sorted_entries(root)? {
        if !subject_dir.is_dir() {
            continue;
        }
        let Some(identity) = parse_digits(&file_name(&subject_dir), 3) else {
            warnings.push(malformed(&subject_dir, "subject id is not 3 digits"));
            continue;
        };
        for seq_dir in sorted_entries(&subject_dir)? {
            if !seq_dir.is_dir() {
                continue;
            }
            let name = file_name(&seq_dir);
            let parsed = name.split_once('-').and_then(|(c, n)| {
                Some((c.parse::<Condition>().ok()?, parse_digits(n, 2)?))
            });
            let Some((condition, sequence_index)) = parsed else {
                warnings.push(malformed(&seq_dir, "expected <nm|bg|cl>-<2-digit seq>"));
                continue;
            };
            for view_dir in sorted_entries(&seq_dir)? {
                if !view_dir.is_dir() {
                    continue;
                }
                let Some(view) = parse_digits(&file_name(&view_dir), 3) else {
                    warnings.push(malformed(&view_dir, "view is not 3 digits"));
                    continue;
                };
                let frames = frame_files(&view_dir)?;
                if frames.is_empty() {
                    warnings.push(malformed(&view_dir, "no frame files"));
                    continue;
                }
                sequences.push(SequenceDescriptor {
                    identity,
                    view,
                    condition,
                    sequence_index,
                    source: FrameSource::Files(frames),
                });
            }
        }
    }
    Ok((DatasetIndex::new(sequences), warnings))
}

/// Indexes `root/<5-digit subject>/<view>_<seq>/<frame>.png`; every sequence
/// is recorded under the normal-walking condition.
pub fn index_ou_mvlp(root: &Path) -> Result<(DatasetIndex, Vec<GaitError>)> {
    let mut sequences = Vec::new();
    let mut warnings = Vec::new();
    for subject_dir in sorted_entries(root)? {
        if !subject_dir.is_dir() {
            continue;
        }
        let Some(identity) = parse_digits(&file_name(&subject_dir), 5) else {
            warnings.push(GaitError::MalformedLayout {
                path: subject_dir.clone(),
                reason: "subject id is not 5 digits".into(),
            });
            continue;
        };
        for seq_dir in sorted_entries(&subject_dir)? {
            if !seq_dir.is_dir() {
                continue;
            }
            let name = file_name(&seq_dir);
            let parsed = name.split_once('_').and_then(|(v, s)| {
                let view = parse_digits(v, 3)?;
                let seq = (!s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
                    .then(|| s.parse::<u32>().ok())
                    .flatten()?;
                Some((view, seq))
            });
            let Some((view, sequence_index)) = parsed else {
                warnings.push(GaitError::MalformedLayout {
                    path: seq_dir.clone(),
                    reason: "expected <3-digit view>_<seq>".into(),
                });
                continue;
            };
            let frames = frame_files(&seq_dir)?;
            if frames.is_empty() {
                warnings.push(GaitError::MalformedLayout {
                    path: seq_dir.clone(),
                    reason: "no frame files".into(),
                });
                continue;
            }
            sequences.push(SequenceDescriptor {
                identity,
                view,
                condition: Condition::Nm,
                sequence_index,
                source: FrameSource::Files(frames),
            });
        }
    }
    Ok((DatasetIndex::new(sequences), warnings))
}

pub fn index_dataset(root: &Path, layout: Layout) -> Result<(DatasetIndex, Vec<GaitError>)> {
    if !root.is_dir() {
        return Err(GaitError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    match layout {
        Layout::CasiaB => index_casia_b(root),
        Layout::OuMvlp => index_ou_mvlp(root),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Protocol {
    /// Sorted identities: first 74 train, next 50 test.
    CasiaBLt,
    /// Sorted identities split in half, first half train.
    OuMvlp,
    Custom {
        train: Vec<Identity>,
        test: Vec<Identity>,
    },
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::CasiaBLt => "casia_b_lt",
            Protocol::OuMvlp => "ou_mvlp",
            Protocol::Custom { .. } => "custom",
        }
    }
}

pub const CASIA_B_TRAIN_IDS: usize = 74;
pub const CASIA_B_TEST_IDS: usize = 50;

pub fn protocol_split(
    index: &DatasetIndex,
    protocol: &Protocol,
) -> Result<(Vec<Identity>, Vec<Identity>)> {
    let ids = index.identities();
    if ids.is_empty() {
        return Err(GaitError::InsufficientIdentities {
            protocol: protocol.name().into(),
            required: 1,
            available: 0,
        });
    }
    match protocol {
        Protocol::CasiaBLt => {
            let required = CASIA_B_TRAIN_IDS + CASIA_B_TEST_IDS;
            if ids.len() < required {
                return Err(GaitError::InsufficientIdentities {
                    protocol: protocol.name().into(),
                    required,
                    available: ids.len(),
                });
            }
            Ok((
                ids[..CASIA_B_TRAIN_IDS].to_vec(),
                ids[CASIA_B_TRAIN_IDS..required].to_vec(),
            ))
        }
        Protocol::OuMvlp => {
            if ids.len() < 2 {
                return Err(GaitError::InsufficientIdentities {
                    protocol: protocol.name().into(),
                    required: 2,
                    available: ids.len(),
                });
            }
            let half = ids.len() / 2;
            Ok((ids[..half].to_vec(), ids[half..].to_vec()))
        }
        Protocol::Custom { train, test } => Ok((train.clone(), test.clone())),
    }
}
