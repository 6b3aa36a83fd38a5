//! Text envelopes exchanged with model servers. Every message starts with an
//! `a3v/1` line, embeds masks in their text form and ends with `end`.
//! Parsing accepts only the canonical form, so `encode(parse(x)) == x`.

use std::fmt::Write as _;

use super::{EntityProposal, FrameRef, PanopticProposal, TrackRequest};
use crate::geometry::Window;
use crate::mask::{GridDims, Mask};
use crate::textio::{is_identifier, is_label, parse_f64, parse_uint, split_tokens, LineError, Lines};

pub const ENTITY_PATH: &str = "/v1/segment/entity";
pub const PANOPTIC_PATH: &str = "/v1/segment/panoptic";
pub const TRACK_PATH: &str = "/v1/track";
pub const COMPLETE_PATH: &str = "/v1/complete";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Entity,
    Panoptic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Segment { kind: SegmentKind, frame: FrameRef },
    Track(TrackRequest),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Entities(Vec<EntityProposal>),
    Panoptic(Vec<PanopticProposal>),
    Track(Vec<(usize, Mask)>),
    Error(String),
}

fn at<T>(l: &Lines, r: Result<T, String>) -> Result<T, LineError> {
    r.map_err(|m| l.err(m))
}

fn parse_confidence(l: &Lines, tok: &str) -> Result<f64, LineError> {
    let c = at(l, parse_f64(tok, "confidence"))?;
    if !(0.0..=1.0).contains(&c) {
        return Err(l.err("confidence outside [0, 1]"));
    }
    Ok(c)
}

impl Request {
    pub fn path(&self) -> &'static str {
        match self {
            Request::Segment { kind: SegmentKind::Entity, .. } => ENTITY_PATH,
            Request::Segment { kind: SegmentKind::Panoptic, .. } => PANOPTIC_PATH,
            Request::Track(_) => TRACK_PATH,
        }
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        match self {
            Request::Segment { kind, frame } => {
                let k = match kind {
                    SegmentKind::Entity => "entity",
                    SegmentKind::Panoptic => "panoptic",
                };
                let header = frame.canvas.header();
                let _ = writeln!(out, "a3v/1 segment {k}");
                let _ = writeln!(out, "video {}", frame.video_id);
                let _ = writeln!(out, "frame {}", frame.frame_index);
                let _ = writeln!(out, "canvas {}", &header["dims ".len()..]);
                let _ = writeln!(out, "view pad {} shift {}", frame.pad_cols, frame.shift_cols);
                match frame.crop {
                    Some(w) => {
                        let _ = writeln!(out, "crop {} {}", w.start, w.width);
                    }
                    None => out.push_str("crop -\n"),
                }
            }
            Request::Track(t) => {
                let _ = writeln!(out, "a3v/1 track");
                let _ = writeln!(out, "video {}", t.video_id);
                let _ = writeln!(out, "prompt-frame {}", t.prompt_frame);
                let _ = writeln!(out, "horizon {}", t.horizon);
                let _ = writeln!(out, "prompt {}", t.prompt_mask.runs().len());
                t.prompt_mask.write_text(&mut out);
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Request, LineError> {
        let mut l = Lines::new(text)?;
        let first = l.next()?;
        let req = match first {
            "a3v/1 segment entity" | "a3v/1 segment panoptic" => {
                let kind = if first.ends_with("entity") { SegmentKind::Entity } else { SegmentKind::Panoptic };
                let video_id = video_id(&mut l)?;
                let frame_index = l.value("frame", |v| parse_uint(v, "frame index"))?;
                let canvas_line = l.field("canvas")?;
                let canvas = at(&l, GridDims::parse_header(&format!("dims {canvas_line}")))?;
                let view = l.field("view")?;
                let v: Vec<&str> = view.split(' ').collect();
                if v.len() != 4 || v[0] != "pad" || v[2] != "shift" {
                    return Err(l.err("expected `view pad <n> shift <n>`"));
                }
                let pad_cols: u32 = at(&l, parse_uint(v[1], "pad"))?;
                let shift_cols: u32 = at(&l, parse_uint(v[3], "shift"))?;
                if 2 * pad_cols as u64 >= canvas.width as u64 || shift_cols >= canvas.width - 2 * pad_cols {
                    return Err(l.err("view does not fit the canvas"));
                }
                let crop = match l.field("crop")? {
                    "-" => None,
                    c => {
                        let (toks, rest) = split_tokens(c, 2).ok_or_else(|| l.err("expected `crop <start> <width>`"))?;
                        let start: u32 = at(&l, parse_uint(toks[0], "crop start"))?;
                        let width: u32 = at(&l, parse_uint(toks[1], "crop width"))?;
                        if !rest.is_empty() || width == 0 || start as u64 + width as u64 > canvas.width as u64 {
                            return Err(l.err("crop outside the canvas"));
                        }
                        Some(Window { start, width })
                    }
                };
                Request::Segment { kind, frame: FrameRef { video_id, frame_index, canvas, pad_cols, shift_cols, crop } }
            }
            "a3v/1 track" => {
                let video_id = video_id(&mut l)?;
                let prompt_frame = l.value("prompt-frame", |v| parse_uint(v, "prompt frame"))?;
                let horizon: usize = l.value("horizon", |v| parse_uint(v, "horizon"))?;
                if horizon == 0 {
                    return Err(l.err("horizon must be at least 1"));
                }
                let runs = l.value("prompt", |v| parse_uint(v, "run count"))?;
                let prompt_mask = l.mask(runs)?;
                if prompt_mask.is_empty() {
                    return Err(l.err("empty prompt mask"));
                }
                Request::Track(TrackRequest { video_id, prompt_frame, prompt_mask, horizon })
            }
            other => return Err(l.err(format!("unknown request {other:?}"))),
        };
        l.expect("end")?;
        l.finish()?;
        Ok(req)
    }
}

fn video_id(l: &mut Lines) -> Result<String, LineError> {
    let v = l.field("video")?;
    if !is_identifier(v) {
        return Err(l.err(format!("invalid video id {v:?}")));
    }
    Ok(v.to_string())
}

impl Response {
    pub fn encode(&self) -> String {
        let mut out = String::new();
        match self {
            Response::Entities(ps) => {
                let _ = writeln!(out, "a3v/1 entities {}", ps.len());
                for p in ps {
                    let _ = writeln!(out, "proposal {} {}", p.confidence, p.mask.runs().len());
                    p.mask.write_text(&mut out);
                }
            }
            Response::Panoptic(ps) => {
                let _ = writeln!(out, "a3v/1 panoptic {}", ps.len());
                for p in ps {
                    let _ = writeln!(
                        out,
                        "proposal {} {} {} {}",
                        p.confidence,
                        p.mask.runs().len(),
                        p.source_taxonomy,
                        p.label
                    );
                    p.mask.write_text(&mut out);
                }
            }
            Response::Track(frames) => {
                let _ = writeln!(out, "a3v/1 track-result {}", frames.len());
                for (i, m) in frames {
                    let _ = writeln!(out, "frame {i} {}", m.runs().len());
                    m.write_text(&mut out);
                }
            }
            Response::Error(msg) => {
                let _ = writeln!(out, "a3v/1 error {msg}");
                return out;
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Response, LineError> {
        let mut l = Lines::new(text)?;
        let first = l.next()?;
        let rest = first.strip_prefix("a3v/1 ").ok_or_else(|| l.err("missing a3v/1 header"))?;
        let (kind, arg) = rest.split_once(' ').ok_or_else(|| l.err("malformed header"))?;
        if kind == "error" {
            if !is_label(arg) {
                return Err(l.err("malformed error message"));
            }
            l.finish()?;
            return Ok(Response::Error(arg.to_string()));
        }
        let n: usize = at(&l, parse_uint(arg, "count"))?;
        let resp = match kind {
            "entities" => {
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    let line = l.field("proposal")?;
                    let toks: Vec<&str> = line.split(' ').collect();
                    if toks.len() != 2 {
                        return Err(l.err("expected `proposal <confidence> <runs>`"));
                    }
                    let confidence = parse_confidence(&l, toks[0])?;
                    let runs = at(&l, parse_uint(toks[1], "run count"))?;
                    let m = l.mask(runs)?;
                    let mask = nonempty(&l, m)?;
                    out.push(EntityProposal { mask, confidence });
                }
                Response::Entities(out)
            }
            "panoptic" => {
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    let line = l.field("proposal")?;
                    let (toks, label) = split_tokens(line, 3).ok_or_else(|| l.err("malformed proposal line"))?;
                    let confidence = parse_confidence(&l, toks[0])?;
                    let runs = at(&l, parse_uint(toks[1], "run count"))?;
                    if !is_identifier(toks[2]) {
                        return Err(l.err("invalid taxonomy id"));
                    }
                    if !is_label(label) {
                        return Err(l.err(format!("invalid label {label:?}")));
                    }
                    let m = l.mask(runs)?;
                    let mask = nonempty(&l, m)?;
                    out.push(PanopticProposal { mask, label: label.to_string(), source_taxonomy: toks[2].to_string(), confidence });
                }
                Response::Panoptic(out)
            }
            "track-result" => {
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    let line = l.field("frame")?;
                    let toks: Vec<&str> = line.split(' ').collect();
                    if toks.len() != 2 {
                        return Err(l.err("expected `frame <index> <runs>`"));
                    }
                    let i = at(&l, parse_uint(toks[0], "frame index"))?;
                    let runs = at(&l, parse_uint(toks[1], "run count"))?;
                    out.push((i, l.mask(runs)?));
                }
                Response::Track(out)
            }
            other => return Err(l.err(format!("unknown response {other:?}"))),
        };
        l.expect("end")?;
        l.finish()?;
        Ok(resp)
    }
}

fn nonempty(l: &Lines, m: Mask) -> Result<Mask, LineError> {
    if m.is_empty() {
        Err(l.err("empty proposal mask"))
    } else {
        Ok(m)
    }
}
