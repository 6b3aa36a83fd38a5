//! Video object segmentation scores: region similarity J (mask IoU),
//! boundary accuracy F (boundary F-measure with a distance tolerance) and
//! their mean.
//!
//! Instances correspond by id. The scored pairs are every (instance, frame)
//! where either side has a nonempty mask; a side without a mask scores 0.
//! Two annotations with no masks at all score 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::annotation::{InstanceId, VideoAnnotation};
use crate::mask::{GridDims, Mask};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("grids differ: {pred} vs {reference}")]
    DimsMismatch { pred: GridDims, reference: GridDims },
    #[error("frame counts differ: {pred} vs {reference}")]
    FrameCount { pred: usize, reference: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceScore {
    pub instance_id: InstanceId,
    pub pairs: usize,
    pub j: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub pairs: usize,
    pub per_instance: Vec<InstanceScore>,
}

/// Tolerance of the usual benchmark protocol: 0.8% of the image diagonal,
/// rounded.
pub fn default_tolerance(dims: GridDims) -> u32 {
    let (w, h) = (dims.width as f64, dims.height as f64);
    (0.008 * (w * w + h * h).sqrt()).round() as u32
}

pub fn jaccard(pred: Option<&Mask>, reference: Option<&Mask>) -> f64 {
    match (pred, reference) {
        (Some(p), Some(r)) => p.iou(r).unwrap_or(0.0),
        (None, None) => 1.0,
        _ => 0.0,
    }
}

/// Boundary F-measure: a boundary pixel counts as matched when the other
/// boundary has a pixel within `radius` (Euclidean, wrap-aware).
pub fn boundary_f(pred: Option<&Mask>, reference: Option<&Mask>, radius: u32) -> f64 {
    let pb = pred.map(Mask::boundary).filter(|m| !m.is_empty());
    let rb = reference.map(Mask::boundary).filter(|m| !m.is_empty());
    let (pb, rb) = match (pb, rb) {
        (None, None) => return 1.0,
        (Some(p), Some(r)) => (p, r),
        _ => return 0.0,
    };
    let precision = pb.intersection_area(&rb.dilate_disk(radius)).unwrap_or(0) as f64 / pb.area() as f64;
    let recall = rb.intersection_area(&pb.dilate_disk(radius)).unwrap_or(0) as f64 / rb.area() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

type Pair<'a> = (InstanceId, Option<&'a Mask>, Option<&'a Mask>);

fn pairs<'a>(pred: &'a VideoAnnotation, reference: &'a VideoAnnotation) -> Result<Vec<Pair<'a>>, MetricsError> {
    if pred.dims != reference.dims {
        return Err(MetricsError::DimsMismatch { pred: pred.dims, reference: reference.dims });
    }
    if pred.frame_count() != reference.frame_count() {
        return Err(MetricsError::FrameCount { pred: pred.frame_count(), reference: reference.frame_count() });
    }
    let mut out = Vec::new();
    for (pf, rf) in pred.frames.iter().zip(&reference.frames) {
        let mut by_id: BTreeMap<InstanceId, (Option<&Mask>, Option<&Mask>)> = BTreeMap::new();
        for e in pf.entries().iter().filter(|e| !e.mask.is_empty()) {
            by_id.entry(e.instance_id).or_default().0 = Some(&e.mask);
        }
        for e in rf.entries().iter().filter(|e| !e.mask.is_empty()) {
            by_id.entry(e.instance_id).or_default().1 = Some(&e.mask);
        }
        out.extend(by_id.into_iter().map(|(id, (p, r))| (id, p, r)));
    }
    Ok(out)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 { 1.0 } else { sum / n as f64 }
}

pub fn region_accuracy(pred: &VideoAnnotation, reference: &VideoAnnotation) -> Result<f64, MetricsError> {
    Ok(mean(pairs(pred, reference)?.into_iter().map(|(_, p, r)| jaccard(p, r))))
}

pub fn boundary_accuracy(pred: &VideoAnnotation, reference: &VideoAnnotation, radius: u32) -> Result<f64, MetricsError> {
    Ok(mean(pairs(pred, reference)?.into_iter().map(|(_, p, r)| boundary_f(p, r, radius))))
}

/// J, F and their mean with a per-instance breakdown. `radius` defaults to
/// [`default_tolerance`].
pub fn j_and_f(pred: &VideoAnnotation, reference: &VideoAnnotation, radius: Option<u32>) -> Result<MetricResult, MetricsError> {
    let radius = radius.unwrap_or_else(|| default_tolerance(reference.dims));
    let scored: Vec<(InstanceId, f64, f64)> =
        pairs(pred, reference)?.into_iter().map(|(id, p, r)| (id, jaccard(p, r), boundary_f(p, r, radius))).collect();
    let mut per: BTreeMap<InstanceId, Vec<(f64, f64)>> = BTreeMap::new();
    for &(id, j, f) in &scored {
        per.entry(id).or_default().push((j, f));
    }
    let j = mean(scored.iter().map(|s| s.1));
    let f = mean(scored.iter().map(|s| s.2));
    Ok(MetricResult {
        j,
        f,
        jf: (j + f) / 2.0,
        pairs: scored.len(),
        per_instance: per
            .into_iter()
            .map(|(id, v)| InstanceScore {
                instance_id: id,
                pairs: v.len(),
                j: mean(v.iter().map(|x| x.0)),
                f: mean(v.iter().map(|x| x.1)),
            })
            .collect(),
    })
}

const HEADER: [&str; 4] = ["Video", "J&F", "J", "F"];

/// Plain-text table with one row per video and a closing `Mean` row.
/// `decimals` fixes the printed precision; `None` prints full precision so
/// the table parses back exactly.
pub fn format_table(rows: &[(String, MetricResult)], decimals: Option<usize>) -> String {
    let num = |v: f64| match decimals {
        Some(d) => format!("{v:.d$}"),
        None => v.to_string(),
    };
    let mut cells: Vec<[String; 4]> = vec![HEADER.map(String::from)];
    for (name, r) in rows {
        cells.push([name.clone(), num(r.jf), num(r.j), num(r.f)]);
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let j = rows.iter().map(|r| r.1.j).sum::<f64>() / n;
        let f = rows.iter().map(|r| r.1.f).sum::<f64>() / n;
        cells.push(["Mean".into(), num((j + f) / 2.0), num(j), num(f)]);
    }
    let widths: Vec<usize> = (0..4).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        }
    }
    out
}

/// Reads a table written by [`format_table`]: `(video, jf, j, f)` rows.
pub fn parse_table(text: &str) -> Result<Vec<(String, f64, f64, f64)>, String> {
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().ok_or("empty table")?.split_whitespace().collect();
    if head != HEADER {
        return Err(format!("unexpected header {head:?}"));
    }
    let rule = lines.next().ok_or("missing rule line")?;
    if rule.chars().any(|c| c != '-' && c != ' ') {
        return Err("malformed rule line".into());
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 4 {
                return Err(format!("row {l:?} does not have 4 columns"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?}"));
            Ok((t[0].to_string(), num(t[1])?, num(t[2])?, num(t[3])?))
        })
        .collect()
}
