//! Gallery/probe evaluation: cross-view rank-1 matrices and reports.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::backbone::Backbone;
use crate::data::dataset::{Condition, DatasetIndex, Identity, SequenceDescriptor};
use crate::data::sampling::head_clip;
use crate::error::{GaitError, Result};
use crate::finetune::stripe_distance;
use crate::matrix::Embedding;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    pub embedding: Embedding,
    pub identity: Identity,
    pub view: u32,
    pub condition: Condition,
    pub sequence_index: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntrySet {
    pub entries: Vec<EvalEntry>,
}

pub type GallerySet = EntrySet;
pub type ProbeSet = EntrySet;

impl EntrySet {
    pub fn views(&self) -> Vec<u32> {
        let v: BTreeSet<u32> = self.entries.iter().map(|e| e.view).collect();
        v.into_iter().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalProtocol {
    /// Gallery NM#1-4; probes NM#5-6, BG#1-2, CL#1-2.
    CasiaB,
    /// Per view: odd sequence indices in the gallery, even ones probe.
    OuMvlp,
}

#[derive(Debug)]
pub struct ProtocolSets {
    pub gallery: GallerySet,
    /// One probe set per condition label, in table order.
    pub probes: Vec<(String, ProbeSet)>,
    pub warnings: Vec<GaitError>,
}

/// Embeds a whole sequence, looping it when it is shorter than the temporal
/// window.
pub fn embed_descriptor(backbone: &Backbone, params: &ParamStore, desc: &SequenceDescriptor) -> Result<Embedding> {
    let seq = desc.load()?;
    let min_len = backbone.config.kernel_width();
    let frames = if seq.frames.len() < min_len {
        head_clip(&seq.frames, min_len)
    } else {
        seq.frames
    };
    let prepared = backbone.config.prepare_frames(&frames)?;
    backbone.forward(params, &prepared)
}

fn embed_all(backbone: &Backbone, params: &ParamStore, descs: &[&SequenceDescriptor]) -> Result<EntrySet> {
    let entries = descs
        .par_iter()
        .map(|d| {
            Ok(EvalEntry {
                embedding: embed_descriptor(backbone, params, d)?,
                identity: d.identity,
                view: d.view,
                condition: d.condition,
                sequence_index: d.sequence_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EntrySet { entries })
}

pub fn build_protocol_sets(
    test: &DatasetIndex,
    backbone: &Backbone,
    params: &ParamStore,
    protocol: EvalProtocol,
) -> Result<ProtocolSets> {
    if test.sequences.is_empty() {
        return Err(GaitError::EmptyEvaluation("test index has no sequences".into()));
    }
    let mut warnings = Vec::new();
    let (gallery_descs, probe_groups): (Vec<&SequenceDescriptor>, Vec<(String, Vec<&SequenceDescriptor>)>) =
        match protocol {
            EvalProtocol::CasiaB => {
                let pick = |c: Condition, lo: u32, hi: u32| -> Vec<&SequenceDescriptor> {
                    test.sequences
                        .iter()
                        .filter(|s| s.condition == c && (lo..=hi).contains(&s.sequence_index))
                        .collect()
                };
                let gallery = pick(Condition::Nm, 1, 4);
                let mut probes = Vec::new();
                for (c, lo, hi) in [(Condition::Nm, 5, 6), (Condition::Bg, 1, 2), (Condition::Cl, 1, 2)] {
                    let set = pick(c, lo, hi);
                    for id in test.identities() {
                        if !set.iter().any(|s| s.identity == id) {
                            warnings.push(GaitError::MissingCondition {
                                identity: id,
                                condition: c.to_string(),
                            });
                        }
                    }
                    if !set.is_empty() {
                        probes.push((c.to_string(), set));
                    }
                }
                (gallery, probes)
            }
            EvalProtocol::OuMvlp => {
                let gallery = test.sequences.iter().filter(|s| s.sequence_index % 2 == 1).collect();
                let probe: Vec<_> = test.sequences.iter().filter(|s| s.sequence_index % 2 == 0).collect();
                (gallery, vec![(Condition::Nm.to_string(), probe)])
            }
        };
    if gallery_descs.is_empty() {
        return Err(GaitError::EmptyEvaluation("gallery is empty".into()));
    }
    if probe_groups.is_empty() {
        return Err(GaitError::EmptyEvaluation("no probe sequences".into()));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let gallery = embed_all(backbone, params, &gallery_descs)?;
    let probes = probe_groups
        .into_iter()
        .map(|(label, descs)| Ok((label, embed_all(backbone, params, &descs)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolSets {
        gallery,
        probes,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub hits: usize,
    pub attempts: usize,
}

impl Cell {
    pub fn accuracy(&self) -> f64 {
        self.hits as f64 / self.attempts as f64
    }
}

/// Rank-1 accuracies indexed by (probe view, gallery view); `None` marks an
/// absent cell (excluded diagonal or a view missing from the gallery).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMatrix {
    pub condition: String,
    pub probe_views: Vec<u32>,
    pub gallery_views: Vec<u32>,
    pub cells: Vec<Vec<Option<Cell>>>,
    /// Gallery views with no entries, each of which blanks a column.
    pub empty_gallery_views: Vec<u32>,
}

impl EvalMatrix {
    pub fn cell(&self, probe_view: u32, gallery_view: u32) -> Option<Cell> {
        let i = self.probe_views.iter().position(|&v| v == probe_view)?;
        let j = self.gallery_views.iter().position(|&v| v == gallery_view)?;
        self.cells[i][j]
    }

    pub fn accuracy(&self, probe_view: u32, gallery_view: u32) -> Option<f64> {
        self.cell(probe_view, gallery_view).map(|c| c.accuracy())
    }

    /// Mean over the present cells of one probe-view row.
    pub fn probe_view_mean(&self, probe_view: u32) -> Option<f64> {
        let i = self.probe_views.iter().position(|&v| v == probe_view)?;
        mean(self.cells[i].iter().flatten().map(Cell::accuracy))
    }

    /// Mean of the per-probe-view means.
    pub fn mean(&self) -> Option<f64> {
        mean(self.probe_views.iter().filter_map(|&v| self.probe_view_mean(v)))
    }

    pub fn present_cells(&self) -> usize {
        self.cells.iter().flatten().flatten().count()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn nearest<'a>(probe: &EvalEntry, candidates: &[&'a EvalEntry]) -> Result<&'a EvalEntry> {
    let mut best: Option<(f64, &EvalEntry)> = None;
    for &g in candidates {
        let d = stripe_distance(&probe.embedding, &g.embedding)?;
        let better = match best {
            None => true,
            Some((bd, b)) => match d.total_cmp(&bd) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => (g.identity, g.sequence_index) < (b.identity, b.sequence_index),
            },
        };
        if better {
            best = Some((d, g));
        }
    }
    Ok(best.expect("nonempty candidates").1)
}

pub fn rank1_matrix(
    condition: &str,
    gallery: &GallerySet,
    probe: &ProbeSet,
    exclude_identical_view: bool,
) -> Result<EvalMatrix> {
    if gallery.is_empty() {
        return Err(GaitError::EmptyEvaluation("gallery is empty".into()));
    }
    if probe.is_empty() {
        return Err(GaitError::EmptyEvaluation(format!("probe set {condition} is empty")));
    }
    let probe_views = probe.views();
    let all_views: BTreeSet<u32> = gallery.views().into_iter().chain(probe_views.iter().copied()).collect();
    let gallery_views: Vec<u32> = all_views.into_iter().collect();
    let by_view: Vec<Vec<&EvalEntry>> = gallery_views
        .iter()
        .map(|&v| gallery.entries.iter().filter(|e| e.view == v).collect())
        .collect();
    let empty_gallery_views: Vec<u32> = gallery_views
        .iter()
        .zip(&by_view)
        .filter(|(_, g)| g.is_empty())
        .map(|(&v, _)| v)
        .collect();
    for &view in &empty_gallery_views {
        log::warn!("{}", GaitError::EmptyGalleryView { view });
    }

    let rows = probe_views
        .par_iter()
        .map(|&pv| {
            let probes: Vec<&EvalEntry> = probe.entries.iter().filter(|e| e.view == pv).collect();
            gallery_views
                .iter()
                .zip(&by_view)
                .map(|(&gv, candidates)| {
                    if (exclude_identical_view && gv == pv) || candidates.is_empty() {
                        return Ok(None);
                    }
                    let mut hits = 0;
                    for p in &probes {
                        if nearest(p, candidates)?.identity == p.identity {
                            hits += 1;
                        }
                    }
                    Ok(Some(Cell {
                        hits,
                        attempts: probes.len(),
                    }))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalMatrix {
        condition: condition.to_string(),
        probe_views,
        gallery_views,
        cells: rows,
        empty_gallery_views,
    })
}

/// Builds every condition's matrix from protocol sets.
pub fn evaluate(sets: &ProtocolSets, exclude_identical_view: bool) -> Result<Vec<EvalMatrix>> {
    sets.probes
        .iter()
        .map(|(label, probe)| rank1_matrix(label, &sets.gallery, probe, exclude_identical_view))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportLayout {
    /// One row per condition, probe views as columns.
    ViewColumns,
    /// One row per probe view.
    ViewRows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub csv: String,
    pub warnings: Vec<String>,
}

pub const CSV_HEADER: &str = "condition,probe_view,gallery_view,accuracy,attempts,hits";

fn pct(v: Option<f64>) -> String {
    v.map(|a| format!("{:.1}", a * 100.0)).unwrap_or_default()
}

pub fn render_report(matrices: &[EvalMatrix], layout: ReportLayout) -> Result<Report> {
    if matrices.is_empty() {
        return Err(GaitError::EmptyEvaluation("no matrices to report".into()));
    }
    let mut warnings = Vec::new();
    let mut text = String::new();
    for m in matrices {
        if m.present_cells() == 0 {
            warnings.push(format!(
                "{}: every cell is absent (single view with identical-view exclusion?)",
                m.condition
            ));
        }
        for v in &m.empty_gallery_views {
            warnings.push(format!("{}: gallery has no entries for view {v}", m.condition));
        }
        match layout {
            ReportLayout::ViewColumns => {
                let _ = write!(text, "{:<8}", "Probe");
                for v in &m.probe_views {
                    let _ = write!(text, "{v:>7}");
                }
                let _ = writeln!(text, "{:>7}", "Mean");
                let _ = write!(text, "{:<8}", m.condition);
                for &v in &m.probe_views {
                    let _ = write!(text, "{:>7}", pct(m.probe_view_mean(v)));
                }
                let _ = writeln!(text, "{:>7}", pct(m.mean()));
            }
            ReportLayout::ViewRows => {
                let _ = writeln!(text, "{} {:>7}", m.condition, "Rank-1");
                for &v in &m.probe_views {
                    let _ = writeln!(text, "{v:<7}{:>7}", pct(m.probe_view_mean(v)));
                }
                let _ = writeln!(text, "{:<7}{:>7}", "Mean", pct(m.mean()));
            }
        }
        text.push('\n');
    }
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for m in matrices {
        for (i, pv) in m.probe_views.iter().enumerate() {
            for (j, gv) in m.gallery_views.iter().enumerate() {
                match m.cells[i][j] {
                    Some(c) => {
                        let _ = writeln!(csv, "{},{pv},{gv},{},{},{}", m.condition, c.accuracy(), c.attempts, c.hits);
                    }
                    None => {
                        let _ = writeln!(csv, "{},{pv},{gv},,,", m.condition);
                    }
                }
            }
        }
    }
    Ok(Report { text, csv, warnings })
}
