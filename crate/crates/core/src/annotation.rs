//! Per-frame and per-video annotation records, plus the human edit
//! operations whose replay turns a refined annotation into a final one.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::mask::{coverage_rate, GridDims, Mask};

pub type InstanceId = u32;

/// Where an entry's mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Sdr,
    Tracked,
    BorderMerged,
    Retrieved,
    Manual,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Sdr => "sdr",
            Provenance::Tracked => "tracked",
            Provenance::BorderMerged => "border-merged",
            Provenance::Retrieved => "retrieved",
            Provenance::Manual => "manual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sdr" => Provenance::Sdr,
            "tracked" => Provenance::Tracked,
            "border-merged" => Provenance::BorderMerged,
            "retrieved" => Provenance::Retrieved,
            "manual" => Provenance::Manual,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub instance_id: InstanceId,
    pub mask: Mask,
    pub label: String,
    pub provenance: Provenance,
}

/// Annotation of one frame; entries are kept sorted by instance id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrameAnnotation {
    pub frame_index: usize,
    entries: Vec<Entry>,
}

impl FrameAnnotation {
    pub fn new(frame_index: usize) -> Self {
        Self { frame_index, entries: Vec::new() }
    }

    pub fn from_entries(frame_index: usize, entries: Vec<Entry>) -> Result<Self, AnnotationError> {
        let mut f = Self::new(frame_index);
        for e in entries {
            if f.get(e.instance_id).is_some() {
                return Err(AnnotationError::DuplicateInstance { frame: frame_index, instance: e.instance_id });
            }
            f.upsert(e);
        }
        Ok(f)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, id: InstanceId) -> Option<&Entry> {
        self.entries.binary_search_by_key(&id, |e| e.instance_id).ok().map(|i| &self.entries[i])
    }

    /// Inserts or replaces the entry with the same instance id.
    pub fn upsert(&mut self, entry: Entry) {
        match self.entries.binary_search_by_key(&entry.instance_id, |e| e.instance_id) {
            Ok(i) => self.entries[i] = entry,
            Err(i) => self.entries.insert(i, entry),
        }
    }

    pub fn remove(&mut self, id: InstanceId) -> Option<Entry> {
        let i = self.entries.binary_search_by_key(&id, |e| e.instance_id).ok()?;
        Some(self.entries.remove(i))
    }

    pub fn retain(&mut self, f: impl FnMut(&Entry) -> bool) {
        self.entries.retain(f);
    }

    pub fn masks(&self) -> impl Iterator<Item = &Mask> {
        self.entries.iter().map(|e| &e.mask)
    }

    pub fn coverage(&self, dims: GridDims) -> f64 {
        coverage_rate(self.masks(), dims).unwrap_or(0.0)
    }

    pub fn validate(&self, dims: GridDims) -> Result<(), AnnotationError> {
        for e in &self.entries {
            if e.mask.dims() != dims {
                return Err(AnnotationError::DimsMismatch { frame: self.frame_index, instance: e.instance_id });
            }
            if e.mask.is_empty() {
                return Err(AnnotationError::EmptyMask { frame: self.frame_index, instance: e.instance_id });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Status {
    Initial,
    Refined,
    Reviewed,
    Final,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Initial => "initial",
            Status::Refined => "refined",
            Status::Reviewed => "reviewed",
            Status::Final => "final",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "initial" => Status::Initial,
            "refined" => Status::Refined,
            "reviewed" => Status::Reviewed,
            "final" => Status::Final,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceInfo {
    pub label: String,
    pub first_frame: Option<usize>,
    pub last_frame: Option<usize>,
}

/// Outcome of the coverage gate for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    /// The frame was annotated from scratch.
    Initial,
    /// Coverage above the threshold; frame accepted as tracked.
    Pass,
    /// Coverage at or below the threshold; blank-area repair ran.
    Refine,
}

impl GateDecision {
    pub fn as_str(&self) -> &'static str {
        match self {
            GateDecision::Initial => "initial",
            GateDecision::Pass => "pass",
            GateDecision::Refine => "refine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "initial" => GateDecision::Initial,
            "pass" => GateDecision::Pass,
            "refine" => GateDecision::Refine,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLogEntry {
    pub frame_index: usize,
    pub coverage_before: f64,
    pub gate: GateDecision,
    pub coverage_after: f64,
    /// Short action records such as `retrieved 4` or `new 9`.
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub dims: GridDims,
    pub frames: Vec<FrameAnnotation>,
    pub instances: BTreeMap<InstanceId, InstanceInfo>,
    pub phase_log: BTreeMap<usize, PhaseLogEntry>,
    pub status: Status,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnnotationError {
    #[error("frame {frame}: instance {instance} appears twice")]
    DuplicateInstance { frame: usize, instance: InstanceId },
    #[error("frame {frame}: mask of instance {instance} does not match the video dimensions")]
    DimsMismatch { frame: usize, instance: InstanceId },
    #[error("frame {frame}: instance {instance} has an empty mask")]
    EmptyMask { frame: usize, instance: InstanceId },
    #[error("frame {frame}: instance {instance} missing from the registry")]
    Unregistered { frame: usize, instance: InstanceId },
    #[error("frame {found} stored at position {expected}")]
    FrameOrder { expected: usize, found: usize },
}

impl VideoAnnotation {
    pub fn new(video_id: impl Into<String>, dims: GridDims, frame_count: usize) -> Self {
        Self {
            video_id: video_id.into(),
            dims,
            frames: (0..frame_count).map(FrameAnnotation::new).collect(),
            instances: BTreeMap::new(),
            phase_log: BTreeMap::new(),
            status: Status::Initial,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn next_instance_id(&self) -> InstanceId {
        self.instances.keys().next_back().map_or(1, |id| id + 1)
    }

    /// Adds `id` to the registry (or renames it) without touching frames.
    pub fn register(&mut self, id: InstanceId, label: impl Into<String>) {
        let label = label.into();
        self.instances
            .entry(id)
            .and_modify(|i| i.label = label.clone())
            .or_insert(InstanceInfo { label, first_frame: None, last_frame: None });
    }

    /// Recomputes first/last frame of every registered instance.
    pub fn refresh_extents(&mut self) {
        for info in self.instances.values_mut() {
            info.first_frame = None;
            info.last_frame = None;
        }
        for f in &self.frames {
            for e in f.entries() {
                if let Some(info) = self.instances.get_mut(&e.instance_id) {
                    info.first_frame.get_or_insert(f.frame_index);
                    info.last_frame = Some(f.frame_index);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        for (i, f) in self.frames.iter().enumerate() {
            if f.frame_index != i {
                return Err(AnnotationError::FrameOrder { expected: i, found: f.frame_index });
            }
            f.validate(self.dims)?;
            for e in f.entries() {
                if !self.instances.contains_key(&e.instance_id) {
                    return Err(AnnotationError::Unregistered { frame: i, instance: e.instance_id });
                }
            }
        }
        Ok(())
    }
}

/// One human edit of a refined annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EditOp {
    ReplaceMask { frame: usize, instance: InstanceId, mask: Mask },
    /// Run-length delta: adds (`erase == false`) or erases pixels.
    Paint { frame: usize, instance: InstanceId, erase: bool, mask: Mask },
    Relabel { instance: InstanceId, label: String },
    DeleteInstance { instance: InstanceId },
    AddInstance { instance: InstanceId, label: String, frame: usize, mask: Mask },
    MergeInstances { keep: InstanceId, absorb: InstanceId },
}

impl EditOp {
    pub fn kind(&self) -> &'static str {
        match self {
            EditOp::ReplaceMask { .. } => "replace_mask",
            EditOp::Paint { .. } => "paint",
            EditOp::Relabel { .. } => "relabel",
            EditOp::DeleteInstance { .. } => "delete_instance",
            EditOp::AddInstance { .. } => "add_instance",
            EditOp::MergeInstances { .. } => "merge_instances",
        }
    }

    /// Instances whose records this edit changes.
    pub fn touched_instances(&self) -> Vec<InstanceId> {
        match self {
            EditOp::ReplaceMask { instance, .. }
            | EditOp::Paint { instance, .. }
            | EditOp::Relabel { instance, .. }
            | EditOp::DeleteInstance { instance }
            | EditOp::AddInstance { instance, .. } => vec![*instance],
            EditOp::MergeInstances { keep, absorb } => vec![*keep, *absorb],
        }
    }

    pub fn frame(&self) -> Option<usize> {
        match self {
            EditOp::ReplaceMask { frame, .. } | EditOp::Paint { frame, .. } | EditOp::AddInstance { frame, .. } => {
                Some(*frame)
            }
            _ => None,
        }
    }
}

/// Sequenced edit as stored in the revision log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Revision {
    pub seq: u64,
    pub op: EditOp,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EditError {
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("instance {0} already exists")]
    InstanceExists(InstanceId),
    #[error("instance id 0 is reserved")]
    ReservedId,
    #[error("frame {0} out of range")]
    UnknownFrame(usize),
    #[error("mask dimensions do not match the video")]
    DimsMismatch,
    #[error("label must be non-empty")]
    EmptyLabel,
    #[error("cannot merge instance {0} into itself")]
    SelfMerge(InstanceId),
    #[error("new instance needs a non-empty mask")]
    EmptyMask,
    #[error("revision {found} out of sequence, expected {expected}")]
    Sequence { expected: u64, found: u64 },
}

impl VideoAnnotation {
    fn check_frame(&self, frame: usize) -> Result<(), EditError> {
        if frame < self.frames.len() {
            Ok(())
        } else {
            Err(EditError::UnknownFrame(frame))
        }
    }

    fn check_mask(&self, mask: &Mask) -> Result<(), EditError> {
        if mask.dims() == self.dims {
            Ok(())
        } else {
            Err(EditError::DimsMismatch)
        }
    }

    fn label_of(&self, id: InstanceId) -> Result<String, EditError> {
        self.instances.get(&id).map(|i| i.label.clone()).ok_or(EditError::UnknownInstance(id))
    }

    fn set_manual_mask(&mut self, frame: usize, instance: InstanceId, mask: Mask) -> Result<(), EditError> {
        let label = self.label_of(instance)?;
        let f = &mut self.frames[frame];
        if mask.is_empty() {
            f.remove(instance);
        } else {
            f.upsert(Entry { instance_id: instance, mask, label, provenance: Provenance::Manual });
        }
        Ok(())
    }

    /// Applies one edit. On error the annotation is unchanged.
    pub fn apply(&mut self, op: &EditOp) -> Result<(), EditError> {
        match op {
            EditOp::ReplaceMask { frame, instance, mask } => {
                self.check_frame(*frame)?;
                self.check_mask(mask)?;
                self.set_manual_mask(*frame, *instance, mask.clone())?;
            }
            EditOp::Paint { frame, instance, erase, mask } => {
                self.check_frame(*frame)?;
                self.check_mask(mask)?;
                self.label_of(*instance)?;
                let current = self.frames[*frame]
                    .get(*instance)
                    .map(|e| e.mask.clone())
                    .unwrap_or_else(|| Mask::empty(self.dims));
                let next = if *erase { current.difference(mask) } else { current.union(mask) }
                    .map_err(|_| EditError::DimsMismatch)?;
                self.set_manual_mask(*frame, *instance, next)?;
            }
            EditOp::Relabel { instance, label } => {
                if label.trim().is_empty() {
                    return Err(EditError::EmptyLabel);
                }
                let info = self.instances.get_mut(instance).ok_or(EditError::UnknownInstance(*instance))?;
                info.label = label.clone();
                for f in &mut self.frames {
                    if let Some(e) = f.get(*instance).cloned() {
                        f.upsert(Entry { label: label.clone(), ..e });
                    }
                }
            }
            EditOp::DeleteInstance { instance } => {
                self.instances.remove(instance).ok_or(EditError::UnknownInstance(*instance))?;
                for f in &mut self.frames {
                    f.remove(*instance);
                }
            }
            EditOp::AddInstance { instance, label, frame, mask } => {
                if *instance == 0 {
                    return Err(EditError::ReservedId);
                }
                if self.instances.contains_key(instance) {
                    return Err(EditError::InstanceExists(*instance));
                }
                if label.trim().is_empty() {
                    return Err(EditError::EmptyLabel);
                }
                self.check_frame(*frame)?;
                self.check_mask(mask)?;
                if mask.is_empty() {
                    return Err(EditError::EmptyMask);
                }
                self.instances.insert(
                    *instance,
                    InstanceInfo { label: label.clone(), first_frame: None, last_frame: None },
                );
                self.set_manual_mask(*frame, *instance, mask.clone())?;
            }
            EditOp::MergeInstances { keep, absorb } => {
                if keep == absorb {
                    return Err(EditError::SelfMerge(*keep));
                }
                let label = self.label_of(*keep)?;
                self.label_of(*absorb)?;
                for f in &mut self.frames {
                    let Some(gone) = f.remove(*absorb) else { continue };
                    let mask = match f.get(*keep) {
                        Some(k) => k.mask.union(&gone.mask).map_err(|_| EditError::DimsMismatch)?,
                        None => gone.mask,
                    };
                    f.upsert(Entry { instance_id: *keep, mask, label: label.clone(), provenance: Provenance::Manual });
                }
                self.instances.remove(absorb);
            }
        }
        self.refresh_extents();
        Ok(())
    }
}

/// Folds a revision log over `base`. Sequence numbers must continue from
/// `first_seq` without gaps.
pub fn replay(base: &VideoAnnotation, revisions: &[Revision], first_seq: u64) -> Result<VideoAnnotation, (u64, EditError)> {
    let mut state = base.clone();
    let mut expected = first_seq;
    for rev in revisions {
        if rev.seq != expected {
            return Err((rev.seq, EditError::Sequence { expected, found: rev.seq }));
        }
        // apply on a scratch copy so a failed edit leaves no trace
        let mut next = state.clone();
        next.apply(&rev.op).map_err(|e| (rev.seq, e))?;
        state = next;
        expected += 1;
    }
    Ok(state)
}

/// Kinds of problem the annotation checker reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IssueKind {
    Missing,
    WrongLabel,
    BadBoundary,
    IdSwitch,
}

impl IssueKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            IssueKind::Missing => "missing",
            IssueKind::WrongLabel => "wrong_label",
            IssueKind::BadBoundary => "bad_boundary",
            IssueKind::IdSwitch => "id_switch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "missing" => IssueKind::Missing,
            "wrong_label" => IssueKind::WrongLabel,
            "bad_boundary" => IssueKind::BadBoundary,
            "id_switch" => IssueKind::IdSwitch,
            _ => return None,
        })
    }

    /// Issues that block finalization unless overridden.
    pub fn blocks_finalize(&self) -> bool {
        matches!(self, IssueKind::Missing | IssueKind::WrongLabel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub frame_index: usize,
    pub instance_id: Option<InstanceId>,
    pub kind: IssueKind,
    pub comment: String,
}

/// Checker verdict on a refined video: a 0 to 10 score and localized issues.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewReport {
    pub score: f64,
    pub issues: Vec<Issue>,
}
