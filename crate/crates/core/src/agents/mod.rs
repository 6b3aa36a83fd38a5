//! The four chat-agent roles: semantic label checker, blank area checker,
//! object retriever and annotation checker. Each builds a text prompt from a
//! geometric summary, sends it to a chat backend and parses the reply
//! against a strict one-line grammar, retrying once.

pub mod rules;
pub mod taxonomy;

use std::path::Path;

use thiserror::Error;

use crate::annotation::{FrameAnnotation, InstanceId, Issue, IssueKind, ReviewReport, VideoAnnotation};
use crate::backend::{BackendError, Gateway};
use crate::mask::{BlankRegion, GridDims, Mask};
pub use taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{0}")]
    Precondition(String),
    #[error("{role} reply rejected twice: {reason}")]
    Unparseable { role: &'static str, reason: String },
}

/// Prompt templates with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompts {
    pub label: String,
    pub blank: String,
    pub retriever: String,
    pub checker: String,
}

impl Prompts {
    pub fn embedded() -> Self {
        Self {
            label: include_str!("../../../../prompts/ts.txt").to_string(),
            blank: include_str!("../../../../prompts/tb.txt").to_string(),
            retriever: include_str!("../../../../prompts/retriever.txt").to_string(),
            checker: include_str!("../../../../prompts/checker.txt").to_string(),
        }
    }

    /// Templates from `dir`; files that do not exist keep the embedded text.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut p = Self::embedded();
        for (name, slot) in [
            ("ts.txt", &mut p.label),
            ("tb.txt", &mut p.blank),
            ("retriever.txt", &mut p.retriever),
            ("checker.txt", &mut p.checker),
        ] {
            match std::fs::read_to_string(dir.join(name)) {
                Ok(text) => *slot = text,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        Ok(p)
    }
}

fn fill(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

/// Thresholds the agents are told about in their prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSettings {
    /// Neighbour distance for the existing-object case, as a fraction of
    /// the frame width.
    pub neighbour_distance_fraction: f64,
    pub area_ratio: (f64, f64),
    pub retrieve_iou: f64,
    /// Relative area change between consecutive frames that the checker
    /// treats as suspicious.
    pub area_change: f64,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self { neighbour_distance_fraction: 0.1, area_ratio: (0.5, 2.0), retrieve_iou: 0.3, area_change: 0.5 }
    }
}

/// Panoptic label proposed for an entity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelCandidate {
    pub label: String,
    pub source_taxonomy: String,
    /// Fraction of the entity mask covered by the proposal.
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelQuery {
    pub area_fraction: f64,
    /// Inclusive row range.
    pub rows: (u32, u32),
    /// Smallest circular column window `(start, width)` holding the mask.
    pub cols: (u32, u32),
    pub centroid: (f64, f64),
    pub candidates: Vec<LabelCandidate>,
}

impl LabelQuery {
    pub fn summarize(mask: &Mask, candidates: Vec<LabelCandidate>) -> Option<Self> {
        let dims = mask.dims();
        Some(Self {
            area_fraction: mask.area() as f64 / dims.pixels() as f64,
            rows: mask.row_span()?,
            cols: column_extent(mask)?,
            centroid: mask.centroid()?,
            candidates,
        })
    }

    /// No panoptic proposal overlapped the entity.
    pub fn no_prior(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Smallest column window covering `mask`, going round the seam on wrapping
/// grids.
pub fn column_extent(mask: &Mask) -> Option<(u32, u32)> {
    let occ = mask.column_occupancy();
    let w = occ.len();
    let first = occ.iter().position(|&o| o)?;
    let last = occ.iter().rposition(|&o| o)?;
    if !mask.dims().wrap {
        return Some((first as u32, (last - first + 1) as u32));
    }
    // the longest circular gap of empty columns is what the window leaves out
    let (mut best_len, mut best_end) = (0usize, first);
    let mut run = 0usize;
    for k in 1..=w {
        let c = (first + k) % w;
        if occ[c] {
            if run > best_len {
                best_len = run;
                best_end = c;
            }
            run = 0;
        } else {
            run += 1;
        }
    }
    Some((best_end as u32, (w - best_len) as u32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlankKind {
    BorderMask,
    ExistingMask,
    NewMask,
}

impl BlankKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlankKind::BorderMask => "border",
            BlankKind::ExistingMask => "existing",
            BlankKind::NewMask => "new",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "border" => BlankKind::BorderMask,
            "existing" => BlankKind::ExistingMask,
            "new" => BlankKind::NewMask,
            _ => return None,
        })
    }
}

/// What the blank area checker knows about a previous-frame instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSummary {
    pub instance_id: InstanceId,
    pub label: String,
    pub centroid: (f64, f64),
    pub area: u64,
}

pub fn summarize_frame(frame: &FrameAnnotation) -> Vec<InstanceSummary> {
    frame
        .entries()
        .iter()
        .filter_map(|e| {
            Some(InstanceSummary {
                instance_id: e.instance_id,
                label: e.label.clone(),
                centroid: e.mask.centroid()?,
                area: e.mask.area(),
            })
        })
        .collect()
}

/// Euclidean distance between `(row, col)` points, columns measured the
/// short way round when the grid wraps.
pub fn wrap_distance(a: (f64, f64), b: (f64, f64), dims: GridDims) -> f64 {
    let w = dims.width as f64;
    let mut dc = (a.1 - b.1).abs();
    if dims.wrap {
        dc = dc.rem_euclid(w);
        dc = dc.min(w - dc);
    }
    let dr = a.0 - b.0;
    (dr * dr + dc * dc).sqrt()
}

/// Result of labelling one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDecision {
    pub label: String,
    pub agent_called: bool,
    /// Set when the agent failed twice and the fallback label was used.
    pub escalation: Option<String>,
}

fn point(p: (f64, f64)) -> String {
    format!("{:.3} {:.3}", p.0, p.1)
}

/// Prompt-building clients bound to one chat backend and taxonomy.
pub struct Agents<'a> {
    pub gateway: &'a Gateway,
    pub chat: &'a str,
    pub taxonomy: &'a Taxonomy,
    pub prompts: &'a Prompts,
    pub settings: AgentSettings,
}

const RETRY_NOTE: &str = "RETRY: the previous reply did not follow the required format";

impl Agents<'_> {
    /// Sends `prompt`, parses with `parse`; on rejection asks once more.
    fn ask<T>(&self, prompt: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Result<T, String>, AgentError> {
        let reply = self.gateway.complete(prompt, self.chat)?;
        match parse(&reply) {
            Ok(v) => Ok(Ok(v)),
            Err(first) => {
                log::debug!("agent reply rejected ({first}); retrying");
                let reply = self.gateway.complete(&format!("{prompt}{RETRY_NOTE}\n"), self.chat)?;
                Ok(parse(&reply))
            }
        }
    }

    fn classes_block(&self) -> String {
        self.taxonomy.classes.iter().map(|c| format!("class {c}\n")).collect()
    }

    /// Canonical label for an entity. Unanimous candidates skip the agent.
    pub fn check_semantic_label(&self, q: &LabelQuery) -> Result<LabelDecision, AgentError> {
        let normalized: Vec<Option<String>> = q
            .candidates
            .iter()
            .map(|c| self.taxonomy.normalize(&c.label, Some(&c.source_taxonomy)))
            .collect();
        if let Some(Some(first)) = normalized.first() {
            if normalized.iter().all(|n| n.as_ref() == Some(first)) {
                return Ok(LabelDecision { label: first.clone(), agent_called: false, escalation: None });
            }
        }
        let candidates: String = q
            .candidates
            .iter()
            .map(|c| format!("candidate {} {} {}\n", c.overlap, c.source_taxonomy, c.label))
            .collect();
        let prompt = fill(
            &self.prompts.label,
            &[
                ("classes", self.classes_block()),
                ("area", format!("{}", q.area_fraction)),
                ("rows", format!("{} {}", q.rows.0, q.rows.1)),
                ("cols", format!("{} {}", q.cols.0, q.cols.1)),
                ("centroid", point(q.centroid)),
                ("candidate_count", q.candidates.len().to_string()),
                ("candidates", candidates),
            ],
        );
        let tax = self.taxonomy;
        let parsed = self.ask(&prompt, |reply| {
            let v = single_line(reply, "LABEL: ")?;
            tax.normalize(v, None).ok_or_else(|| format!("label {v:?} is outside the taxonomy"))
        })?;
        Ok(match parsed {
            Ok(label) => LabelDecision { label, agent_called: true, escalation: None },
            Err(reason) => LabelDecision {
                label: tax.fallback.clone(),
                agent_called: true,
                escalation: Some(format!("label checker: {reason}")),
            },
        })
    }

    /// Kind of a blank region. Border-touching regions are always
    /// `BorderMask` and skip the agent; a reply that fails twice counts as
    /// `NewMask`.
    pub fn classify_blank(
        &self,
        region: &BlankRegion,
        prev: &[InstanceSummary],
        frame_index: usize,
        dims: GridDims,
    ) -> Result<BlankKind, AgentError> {
        if region.touches_border() {
            return Ok(BlankKind::BorderMask);
        }
        let instances: String = prev
            .iter()
            .map(|s| format!("instance {} {} {} {}\n", s.instance_id, s.area, point(s.centroid), s.label))
            .collect();
        let prompt = fill(
            &self.prompts.blank,
            &[
                ("frame", frame_index.to_string()),
                ("width", dims.width.to_string()),
                ("height", dims.height.to_string()),
                ("area", region.area().to_string()),
                ("centroid", point(region.centroid)),
                ("left", u8::from(region.touches_left_border()).to_string()),
                ("right", u8::from(region.touches_right_border()).to_string()),
                ("distance", format!("{}", self.settings.neighbour_distance_fraction * dims.width as f64)),
                ("ratio_min", format!("{}", self.settings.area_ratio.0)),
                ("ratio_max", format!("{}", self.settings.area_ratio.1)),
                ("instance_count", prev.len().to_string()),
                ("instances", instances),
            ],
        );
        let parsed = self.ask(&prompt, |reply| {
            let v = single_line(reply, "KIND: ")?;
            BlankKind::parse(v).ok_or_else(|| format!("unknown kind {v:?}"))
        })?;
        Ok(match parsed {
            // the border case was settled above
            Ok(BlankKind::BorderMask) | Err(_) => BlankKind::NewMask,
            Ok(k) => k,
        })
    }

    /// Previous-frame instance the blank region belongs to, if any.
    pub fn retrieve_object(&self, region: &BlankRegion, prev: &FrameAnnotation) -> Result<Option<InstanceId>, AgentError> {
        if prev.entries().is_empty() {
            return Ok(None);
        }
        let mut instances = String::new();
        for e in prev.entries() {
            let iou = region.mask.iou(&e.mask).map_err(|e| AgentError::Precondition(e.to_string()))?;
            instances.push_str(&format!("instance {} {} {}\n", e.instance_id, iou, e.label));
        }
        let prompt = fill(
            &self.prompts.retriever,
            &[
                ("area", region.area().to_string()),
                ("centroid", point(region.centroid)),
                ("threshold", format!("{}", self.settings.retrieve_iou)),
                ("instance_count", prev.entries().len().to_string()),
                ("instances", instances),
            ],
        );
        let parsed = self.ask(&prompt, |reply| {
            let v = single_line(reply, "INSTANCE: ")?;
            if v == "none" {
                return Ok(None);
            }
            let id: InstanceId = crate::textio::parse_uint(v, "instance id")?;
            if prev.get(id).is_none() {
                return Err(format!("instance {id} is not in the previous frame"));
            }
            Ok(Some(id))
        })?;
        Ok(parsed.unwrap_or(None))
    }

    /// Scores a refined video and lists problems for the reviewer.
    pub fn check_annotation(&self, video: &VideoAnnotation) -> Result<ReviewReport, AgentError> {
        if video.frames.is_empty() {
            return Err(AgentError::Precondition("cannot check a video without frames".into()));
        }
        let dims = video.dims;
        let mut frame_lines = String::new();
        for f in &video.frames {
            frame_lines.push_str(&format!("frame {} coverage {}\n", f.frame_index, f.coverage(dims)));
            for s in summarize_frame(f) {
                frame_lines.push_str(&format!(
                    "instance {} {} {} {}\n",
                    s.instance_id,
                    s.area,
                    point(s.centroid),
                    s.label
                ));
            }
        }
        let prompt = fill(
            &self.prompts.checker,
            &[
                ("classes", self.classes_block()),
                ("frames", video.frames.len().to_string()),
                ("width", dims.width.to_string()),
                ("height", dims.height.to_string()),
                ("area_change", format!("{}", self.settings.area_change)),
                ("centroid_jump", format!("{}", self.settings.neighbour_distance_fraction * dims.width as f64)),
                ("frame_lines", frame_lines),
            ],
        );
        match self.ask(&prompt, |reply| parse_report(reply, video))? {
            Ok(r) => Ok(r),
            Err(reason) => Err(AgentError::Unparseable { role: "annotation checker", reason }),
        }
    }
}

/// The reply must be exactly one line `<prefix><value>`.
fn single_line<'r>(reply: &'r str, prefix: &str) -> Result<&'r str, String> {
    let body = reply.strip_suffix('\n').unwrap_or(reply);
    if body.contains('\n') {
        return Err("expected a single line".into());
    }
    let v = body.strip_prefix(prefix).ok_or_else(|| format!("expected {:?}", prefix.trim_end()))?;
    if v.is_empty() || v.trim() != v {
        return Err("empty or padded value".into());
    }
    Ok(v)
}

fn parse_report(reply: &str, video: &VideoAnnotation) -> Result<ReviewReport, String> {
    let body = reply.strip_suffix('\n').unwrap_or(reply);
    let mut lines = body.split('\n');
    let score_tok = lines.next().and_then(|l| l.strip_prefix("SCORE: ")).ok_or("expected SCORE line")?;
    let score: f64 = score_tok.parse().map_err(|_| format!("bad score {score_tok:?}"))?;
    if !(0.0..=10.0).contains(&score) {
        return Err(format!("score {score} outside 0 to 10"));
    }
    let mut issues = Vec::new();
    for line in lines {
        let rest = line.strip_prefix("ISSUE: ").ok_or_else(|| format!("unexpected line {line:?}"))?;
        let (toks, comment) = crate::textio::split_tokens(rest, 3).ok_or_else(|| format!("short issue {line:?}"))?;
        let frame_index: usize = crate::textio::parse_uint(toks[0], "frame")?;
        if frame_index >= video.frames.len() {
            return Err(format!("issue frame {frame_index} out of range"));
        }
        let instance_id = match toks[1] {
            "-" => None,
            t => {
                let id: InstanceId = crate::textio::parse_uint(t, "instance id")?;
                if !video.instances.contains_key(&id) {
                    return Err(format!("issue names unknown instance {id}"));
                }
                Some(id)
            }
        };
        let kind = IssueKind::parse(toks[2]).ok_or_else(|| format!("unknown issue kind {:?}", toks[2]))?;
        if !crate::textio::is_label(comment) {
            return Err("issue without a comment".into());
        }
        issues.push(Issue { frame_index, instance_id, kind, comment: comment.to_string() });
    }
    Ok(ReviewReport { score, issues })
}
