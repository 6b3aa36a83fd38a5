//! Canonical text forms of every store file. Each writer produces the only
//! byte sequence its parser accepts for a given value.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::annotation::{
    EditOp, Entry, FrameAnnotation, GateDecision, InstanceId, InstanceInfo, Issue, IssueKind, PhaseLogEntry,
    Provenance, ReviewReport, Revision, Status,
};
use crate::mask::{GridDims, Mask};
use crate::textio::{is_identifier, is_label, parse_f64, parse_uint, split_tokens, LineError, Lines};

fn opt(v: Option<impl std::fmt::Display>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn parse_opt<T: std::str::FromStr>(tok: &str, what: &str) -> Result<Option<T>, String> {
    if tok == "-" {
        Ok(None)
    } else {
        parse_uint(tok, what).map(Some)
    }
}

fn at<T>(l: &Lines, r: Result<T, String>) -> Result<T, LineError> {
    r.map_err(|m| l.err(m))
}

fn label_or_err(l: &Lines, s: &str) -> Result<String, LineError> {
    if is_label(s) {
        Ok(s.to_string())
    } else {
        Err(l.err(format!("invalid label {s:?}")))
    }
}

// ---- manifest ----

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub video_id: String,
    pub dims: GridDims,
    pub frame_count: usize,
    pub fps: f64,
    /// Extension of the frame rasters, e.g. `pgm`.
    pub raster: String,
    pub config_digest: Option<String>,
    pub status: Status,
    /// Number of frames the annotation loop has completed.
    pub progress: usize,
}

pub fn write_manifest(m: &Manifest) -> String {
    format!(
        "a3v-manifest 1\nvideo {}\n{}\nframes {}\nfps {}\nraster {}\nconfig {}\nstatus {}\nprogress {}\n",
        m.video_id,
        m.dims.header(),
        m.frame_count,
        m.fps,
        m.raster,
        m.config_digest.as_deref().unwrap_or("-"),
        m.status.as_str(),
        m.progress
    )
}

pub fn parse_manifest(text: &str) -> Result<Manifest, LineError> {
    let mut l = Lines::new(text)?;
    l.expect("a3v-manifest 1")?;
    let video_id = l.field("video")?.to_string();
    if !is_identifier(&video_id) {
        return Err(l.err(format!("invalid video id {video_id:?}")));
    }
    let header = l.next()?;
    let dims = at(&l, GridDims::parse_header(header))?;
    let frame_count = l.value("frames", |v| parse_uint(v, "frame count"))?;
    let fps = l.value("fps", |v| parse_f64(v, "fps"))?;
    let raster = l.field("raster")?.to_string();
    if !is_identifier(&raster) {
        return Err(l.err("invalid raster extension"));
    }
    let config = l.field("config")?;
    let config_digest = match config {
        "-" => None,
        hex if hex.len() == 64 && hex.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) => {
            Some(hex.to_string())
        }
        other => return Err(l.err(format!("invalid config digest {other:?}"))),
    };
    let status = l.field("status")?;
    let status = Status::parse(status).ok_or_else(|| l.err(format!("unknown status {status:?}")))?;
    let progress = l.value("progress", |v| parse_uint(v, "progress"))?;
    l.finish()?;
    if progress > frame_count {
        return Err(l.err("progress beyond frame count"));
    }
    Ok(Manifest { video_id, dims, frame_count, fps, raster, config_digest, status, progress })
}

// ---- frame annotations ----

pub fn write_frame(f: &FrameAnnotation, dims: GridDims) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "a3v-frame 1\nframe {}\n{}\nentries {}", f.frame_index, dims.header(), f.entries().len());
    for e in f.entries() {
        let _ = writeln!(out, "entry {} {} {} {}", e.instance_id, e.provenance.as_str(), e.mask.runs().len(), e.label);
        for r in e.mask.runs() {
            let _ = writeln!(out, "{} {} {}", r.row, r.start, r.len);
        }
    }
    out
}

pub fn parse_frame(text: &str) -> Result<(FrameAnnotation, GridDims), LineError> {
    let mut l = Lines::new(text)?;
    l.expect("a3v-frame 1")?;
    let frame_index = l.value("frame", |v| parse_uint(v, "frame index"))?;
    let header = l.next()?;
    let dims = at(&l, GridDims::parse_header(header))?;
    let n: usize = l.value("entries", |v| parse_uint(v, "entry count"))?;
    let mut frame = FrameAnnotation::new(frame_index);
    let mut last: Option<InstanceId> = None;
    for _ in 0..n {
        let rest = l.field("entry")?;
        let (toks, label) = split_tokens(rest, 3).ok_or_else(|| l.err("malformed entry line"))?;
        let id: InstanceId = at(&l, parse_uint(toks[0], "instance id"))?;
        if id == 0 || last.is_some_and(|p| p >= id) {
            return Err(l.err("entries must have increasing non-zero instance ids"));
        }
        last = Some(id);
        let provenance = Provenance::parse(toks[1]).ok_or_else(|| l.err(format!("unknown provenance {:?}", toks[1])))?;
        let runs = at(&l, parse_uint(toks[2], "run count"))?;
        let label = label_or_err(&l, label)?;
        let mask = l.mask_body(dims, runs)?;
        if mask.is_empty() {
            return Err(l.err("entry with empty mask"));
        }
        frame.upsert(Entry { instance_id: id, mask, label, provenance });
    }
    l.finish()?;
    Ok((frame, dims))
}

// ---- instance registry ----

pub fn write_instances(instances: &BTreeMap<InstanceId, InstanceInfo>) -> String {
    let mut out = format!("a3v-instances 1\ncount {}\n", instances.len());
    for (id, info) in instances {
        let _ = writeln!(out, "instance {id} {} {} {}", opt(info.first_frame), opt(info.last_frame), info.label);
    }
    out
}

pub fn parse_instances(text: &str) -> Result<BTreeMap<InstanceId, InstanceInfo>, LineError> {
    let mut l = Lines::new(text)?;
    l.expect("a3v-instances 1")?;
    let n: usize = l.value("count", |v| parse_uint(v, "count"))?;
    let mut out = BTreeMap::new();
    let mut last = 0;
    for _ in 0..n {
        let rest = l.field("instance")?;
        let (toks, label) = split_tokens(rest, 3).ok_or_else(|| l.err("malformed instance line"))?;
        let id: InstanceId = at(&l, parse_uint(toks[0], "instance id"))?;
        if id <= last {
            return Err(l.err("instance ids must increase and be non-zero"));
        }
        last = id;
        let first_frame = at(&l, parse_opt(toks[1], "first frame"))?;
        let last_frame = at(&l, parse_opt(toks[2], "last frame"))?;
        if first_frame.is_some() != last_frame.is_some() {
            return Err(l.err("first and last frame must both be set or both be -"));
        }
        let label = label_or_err(&l, label)?;
        out.insert(id, InstanceInfo { label, first_frame, last_frame });
    }
    l.finish()?;
    Ok(out)
}

// ---- provenance ----

/// Lineage of one frame: the gate record plus free-form single-line records
/// (geometry plans, votes, label candidates, overwrite notes).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameProvenance {
    pub frame_index: usize,
    pub phase: Option<PhaseLogEntry>,
    pub records: Vec<String>,
}

pub fn write_provenance(p: &FrameProvenance) -> String {
    let mut out = format!("a3v-provenance 1\nframe {}\n", p.frame_index);
    match &p.phase {
        None => out.push_str("gate -\n"),
        Some(ph) => {
            let _ = writeln!(out, "gate {} {} {}", ph.gate.as_str(), ph.coverage_before, ph.coverage_after);
            let _ = writeln!(out, "actions {}", ph.actions.len());
            for a in &ph.actions {
                let _ = writeln!(out, "action {a}");
            }
        }
    }
    let _ = writeln!(out, "records {}", p.records.len());
    for r in &p.records {
        out.push_str(r);
        out.push('\n');
    }
    out
}

pub fn parse_provenance(text: &str) -> Result<FrameProvenance, LineError> {
    let mut l = Lines::new(text)?;
    l.expect("a3v-provenance 1")?;
    let frame_index = l.value("frame", |v| parse_uint(v, "frame index"))?;
    let gate = l.field("gate")?;
    let phase = if gate == "-" {
        None
    } else {
        let toks: Vec<&str> = gate.split(' ').collect();
        if toks.len() != 3 {
            return Err(l.err("malformed gate line"));
        }
        let decision = GateDecision::parse(toks[0]).ok_or_else(|| l.err("unknown gate decision"))?;
        let coverage_before = at(&l, parse_f64(toks[1], "coverage"))?;
        let coverage_after = at(&l, parse_f64(toks[2], "coverage"))?;
        let n: usize = l.value("actions", |v| parse_uint(v, "action count"))?;
        let mut actions = Vec::with_capacity(n);
        for _ in 0..n {
            let a = l.field("action")?;
            actions.push(label_or_err(&l, a)?);
        }
        Some(PhaseLogEntry { frame_index, coverage_before, gate: decision, coverage_after, actions })
    };
    let n: usize = l.value("records", |v| parse_uint(v, "record count"))?;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let r = l.next()?;
        records.push(label_or_err(&l, r)?);
    }
    l.finish()?;
    Ok(FrameProvenance { frame_index, phase, records })
}

// ---- review report ----

pub fn write_report(r: &ReviewReport) -> String {
    let mut out = format!("a3v-report 1\nscore {}\nissues {}\n", r.score, r.issues.len());
    for i in &r.issues {
        let _ = writeln!(out, "issue {} {} {} {}", i.frame_index, opt(i.instance_id), i.kind.as_str(), i.comment);
    }
    out
}

pub fn parse_report(text: &str) -> Result<ReviewReport, LineError> {
    let mut l = Lines::new(text)?;
    l.expect("a3v-report 1")?;
    let score = l.value("score", |v| parse_f64(v, "score"))?;
    if !(0.0..=10.0).contains(&score) {
        return Err(l.err("score outside 0..10"));
    }
    let n: usize = l.value("issues", |v| parse_uint(v, "issue count"))?;
    let mut issues = Vec::with_capacity(n);
    for _ in 0..n {
        let rest = l.field("issue")?;
        let (toks, comment) = split_tokens(rest, 3).ok_or_else(|| l.err("malformed issue line"))?;
        let frame_index = at(&l, parse_uint(toks[0], "frame"))?;
        let instance_id = at(&l, parse_opt(toks[1], "instance id"))?;
        let kind = IssueKind::parse(toks[2]).ok_or_else(|| l.err(format!("unknown issue kind {:?}", toks[2])))?;
        let comment = label_or_err(&l, comment)?;
        issues.push(Issue { frame_index, instance_id, kind, comment });
    }
    l.finish()?;
    Ok(ReviewReport { score, issues })
}

// ---- revisions ----

fn write_mask_block(out: &mut String, m: &Mask) {
    m.write_text(out);
}

pub fn write_revision(out: &mut String, rev: &Revision) {
    let seq = rev.seq;
    match &rev.op {
        EditOp::ReplaceMask { frame, instance, mask } => {
            let _ = writeln!(out, "rev {seq} replace_mask {frame} {instance} {}", mask.runs().len());
            write_mask_block(out, mask);
        }
        EditOp::Paint { frame, instance, erase, mask } => {
            let mode = if *erase { "erase" } else { "add" };
            let _ = writeln!(out, "rev {seq} paint {frame} {instance} {mode} {}", mask.runs().len());
            write_mask_block(out, mask);
        }
        EditOp::Relabel { instance, label } => {
            let _ = writeln!(out, "rev {seq} relabel {instance} {label}");
        }
        EditOp::DeleteInstance { instance } => {
            let _ = writeln!(out, "rev {seq} delete_instance {instance}");
        }
        EditOp::AddInstance { instance, label, frame, mask } => {
            let _ = writeln!(out, "rev {seq} add_instance {instance} {frame} {} {label}", mask.runs().len());
            write_mask_block(out, mask);
        }
        EditOp::MergeInstances { keep, absorb } => {
            let _ = writeln!(out, "rev {seq} merge_instances {keep} {absorb}");
        }
    }
}

pub fn write_revisions(revs: &[Revision]) -> String {
    let mut out = String::new();
    for r in revs {
        write_revision(&mut out, r);
    }
    out
}

pub fn parse_revision(l: &mut Lines) -> Result<Revision, LineError> {
    let rest = l.field("rev")?;
    let (toks, args) = split_tokens(rest, 2).ok_or_else(|| l.err("malformed revision line"))?;
    let seq: u64 = at(l, parse_uint(toks[0], "sequence number"))?;
    let kind = toks[1];
    let exact = |l: &Lines, n: usize| -> Result<Vec<&str>, LineError> {
        let v: Vec<&str> = args.split(' ').collect();
        if v.len() != n || v.iter().any(|t| t.is_empty()) {
            return Err(l.err(format!("{kind} takes {n} arguments")));
        }
        Ok(v)
    };
    let op = match kind {
        "replace_mask" => {
            let a = exact(l, 3)?;
            let frame = at(l, parse_uint(a[0], "frame"))?;
            let instance = at(l, parse_uint(a[1], "instance"))?;
            let runs = at(l, parse_uint(a[2], "run count"))?;
            EditOp::ReplaceMask { frame, instance, mask: l.mask(runs)? }
        }
        "paint" => {
            let a = exact(l, 4)?;
            let frame = at(l, parse_uint(a[0], "frame"))?;
            let instance = at(l, parse_uint(a[1], "instance"))?;
            let erase = match a[2] {
                "add" => false,
                "erase" => true,
                other => return Err(l.err(format!("paint mode must be add or erase, got {other:?}"))),
            };
            let runs = at(l, parse_uint(a[3], "run count"))?;
            EditOp::Paint { frame, instance, erase, mask: l.mask(runs)? }
        }
        "relabel" => {
            let (t, label) = split_tokens(args, 1).ok_or_else(|| l.err("relabel needs an instance"))?;
            let instance = at(l, parse_uint(t[0], "instance"))?;
            EditOp::Relabel { instance, label: label_or_err(l, label)? }
        }
        "delete_instance" => {
            let a = exact(l, 1)?;
            EditOp::DeleteInstance { instance: at(l, parse_uint(a[0], "instance"))? }
        }
        "add_instance" => {
            let (t, label) = split_tokens(args, 3).ok_or_else(|| l.err("malformed add_instance"))?;
            let instance = at(l, parse_uint(t[0], "instance"))?;
            let frame = at(l, parse_uint(t[1], "frame"))?;
            let runs = at(l, parse_uint(t[2], "run count"))?;
            let label = label_or_err(l, label)?;
            EditOp::AddInstance { instance, label, frame, mask: l.mask(runs)? }
        }
        "merge_instances" => {
            let a = exact(l, 2)?;
            let keep = at(l, parse_uint(a[0], "instance"))?;
            let absorb = at(l, parse_uint(a[1], "instance"))?;
            EditOp::MergeInstances { keep, absorb }
        }
        other => return Err(l.err(format!("unknown edit kind {other:?}"))),
    };
    Ok(Revision { seq, op })
}

pub fn parse_revisions(text: &str) -> Result<Vec<Revision>, LineError> {
    let mut l = Lines::new(text)?;
    let mut out = Vec::new();
    while !l.at_end() {
        out.push(parse_revision(&mut l)?);
    }
    Ok(out)
}

// ---- review queue ----

/// An item the pipeline could not resolve automatically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Escalation {
    pub frame_index: usize,
    pub instance_id: Option<InstanceId>,
    pub reason: String,
}

pub fn write_queue(items: &[Escalation]) -> String {
    let mut out = String::new();
    for e in items {
        let _ = writeln!(out, "escalate {} {} {}", e.frame_index, opt(e.instance_id), e.reason);
    }
    out
}

pub fn parse_queue(text: &str) -> Result<Vec<Escalation>, LineError> {
    let mut l = Lines::new(text)?;
    let mut out = Vec::new();
    while !l.at_end() {
        let rest = l.field("escalate")?;
        let (toks, reason) = split_tokens(rest, 2).ok_or_else(|| l.err("malformed escalation"))?;
        let frame_index = at(&l, parse_uint(toks[0], "frame"))?;
        let instance_id = at(&l, parse_opt(toks[1], "instance id"))?;
        out.push(Escalation { frame_index, instance_id, reason: label_or_err(&l, reason)? });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> GridDims {
        GridDims::erp(16, 8).unwrap()
    }

    #[test]
    fn frame_golden_bytes() {
        let d = dims();
        let mut f = FrameAnnotation::new(3);
        f.upsert(Entry { instance_id: 2, mask: Mask::rect(d, 1, 15, 1, 2), label: "traffic light".into(), provenance: Provenance::BorderMerged });
        f.upsert(Entry { instance_id: 1, mask: Mask::rect(d, 0, 0, 1, 3), label: "car".into(), provenance: Provenance::Sdr });
        let text = write_frame(&f, d);
        assert_eq!(
            text,
            "a3v-frame 1\nframe 3\ndims 16 8 wrap1\nentries 2\nentry 1 sdr 1 car\n0 0 3\nentry 2 border-merged 2 traffic light\n1 0 1\n1 15 1\n"
        );
        assert_eq!(parse_frame(&text).unwrap(), (f, d));
    }

    #[test]
    fn frame_errors_carry_line_numbers() {
        let bad = "a3v-frame 1\nframe 0\ndims 16 8 wrap1\nentries 1\nentry 1 sdr 1 car\n0 15 3\n";
        assert_eq!(parse_frame(bad).unwrap_err().line, 6);
        let bad = "a3v-frame 1\nframe 0\ndims 16 8 wrap1\nentries 1\nentry 1 bogus 1 car\n0 1 3\n";
        assert_eq!(parse_frame(bad).unwrap_err().line, 5);
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            video_id: "deer".into(),
            dims: dims(),
            frame_count: 12,
            fps: 2.0,
            raster: "pgm".into(),
            config_digest: Some("ab".repeat(32)),
            status: Status::Refined,
            progress: 12,
        };
        let text = write_manifest(&m);
        assert_eq!(parse_manifest(&text).unwrap(), m);
        assert!(text.contains("fps 2\n"));
    }

    #[test]
    fn revisions_round_trip() {
        let d = dims();
        let revs = vec![
            Revision { seq: 1, op: EditOp::Relabel { instance: 3, label: "tree".into() } },
            Revision { seq: 2, op: EditOp::Paint { frame: 0, instance: 3, erase: true, mask: Mask::rect(d, 0, 0, 2, 2) } },
            Revision { seq: 3, op: EditOp::AddInstance { instance: 9, label: "sign board".into(), frame: 1, mask: Mask::rect(d, 2, 2, 1, 1) } },
            Revision { seq: 4, op: EditOp::MergeInstances { keep: 3, absorb: 9 } },
            Revision { seq: 5, op: EditOp::DeleteInstance { instance: 3 } },
            Revision { seq: 6, op: EditOp::ReplaceMask { frame: 0, instance: 1, mask: Mask::empty(d) } },
        ];
        let text = write_revisions(&revs);
        assert_eq!(parse_revisions(&text).unwrap(), revs);
        assert!(parse_revisions("rev 1 relabel 3\n").is_err());
        assert!(parse_revisions("rev 1 merge_instances 3\n").is_err());
    }

    #[test]
    fn report_and_queue_round_trip() {
        let r = ReviewReport {
            score: 9.5,
            issues: vec![Issue { frame_index: 4, instance_id: None, kind: IssueKind::Missing, comment: "instance 2 absent".into() }],
        };
        assert_eq!(parse_report(&write_report(&r)).unwrap(), r);
        let q = vec![Escalation { frame_index: 2, instance_id: Some(5), reason: "label outside taxonomy".into() }];
        assert_eq!(parse_queue(&write_queue(&q)).unwrap(), q);
    }

    #[test]
    fn provenance_round_trip() {
        let p = FrameProvenance {
            frame_index: 5,
            phase: Some(PhaseLogEntry {
                frame_index: 5,
                coverage_before: 0.75,
                gate: GateDecision::Refine,
                coverage_after: 1.0,
                actions: vec!["new 4".into()],
            }),
            records: vec!["seam shift 1024".into()],
        };
        assert_eq!(parse_provenance(&write_provenance(&p)).unwrap(), p);
        let empty = FrameProvenance { frame_index: 0, phase: None, records: vec![] };
        assert_eq!(parse_provenance(&write_provenance(&empty)).unwrap(), empty);
    }
}
