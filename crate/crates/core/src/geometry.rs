//! Coordinate plans between the source equirectangular frame and the
//! padded, patched, and seam-recentred canvases the segmentors see.

use std::fmt::Write as _;

use thiserror::Error;

use crate::mask::{BlankRegion, GridDims, Mask, MaskError, Run};
use crate::union_find::UnionFind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("padding needs a horizontally wrapping source grid")]
    NonWrapSource,
    #[error("pad fraction {0} outside [0, 0.5]")]
    PadFraction(f64),
    #[error("invalid patch plan: {0}")]
    PatchPlan(String),
    #[error("mask of window {window} reaches outside columns [{start}, {end})")]
    MaskOutsideWindow { window: usize, start: u32, end: u32 },
    #[error("window index {0} not in plan")]
    UnknownWindow(usize),
    #[error("blank region touches neither border")]
    InteriorRegion,
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Horizontal wrap-padding of a source frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadPlan {
    pub source: GridDims,
    pub pad_cols_each_side: u32,
    pub padded: GridDims,
}

impl PadPlan {
    /// Source column shown at padded column `c`.
    pub fn source_col(&self, c: u32) -> u32 {
        (c as i64 - self.pad_cols_each_side as i64).rem_euclid(self.source.width as i64) as u32
    }

    pub fn describe(&self) -> String {
        format!(
            "pad source {} {} pad {} padded {} {}",
            self.source.width, self.source.height, self.pad_cols_each_side, self.padded.width, self.padded.height
        )
    }
}

pub fn make_pad_plan(source: GridDims, pad_fraction: f64) -> Result<PadPlan, GeometryError> {
    if !source.wrap {
        return Err(GeometryError::NonWrapSource);
    }
    if !(0.0..=0.5).contains(&pad_fraction) {
        return Err(GeometryError::PadFraction(pad_fraction));
    }
    let pad = (pad_fraction * source.width as f64).round() as u32;
    // the padded canvas itself does not wrap: its edges are real borders
    let padded = GridDims::new(source.width + 2 * pad, source.height, pad == 0)?;
    Ok(PadPlan { source, pad_cols_each_side: pad, padded })
}

/// Copies a source mask onto the padded canvas, including its replicas in
/// the pads.
pub fn embed_in_padded(mask: &Mask, plan: &PadPlan) -> Result<Mask, GeometryError> {
    plan.source.check(&mask.dims())?;
    let (w, pw, pad) = (plan.source.width as i64, plan.padded.width as i64, plan.pad_cols_each_side as i64);
    let mut runs = Vec::new();
    for r in mask.runs() {
        for k in -1..=1 {
            let s = r.start as i64 + pad + k * w;
            let e = s + r.len as i64;
            let (s, e) = (s.max(0), e.min(pw));
            if e > s {
                runs.push(Run::new(r.row, s as u32, (e - s) as u32));
            }
        }
    }
    Ok(Mask::from_runs(plan.padded, runs)?)
}

/// Folds a padded-canvas mask back onto the source: a source pixel is set
/// when any of its padded copies is set.
pub fn fold_padded_mask(mask: &Mask, plan: &PadPlan) -> Result<Mask, GeometryError> {
    plan.padded.check(&mask.dims())?;
    let w = plan.source.width as i64;
    let pad = plan.pad_cols_each_side as i64;
    let mut runs = Vec::with_capacity(mask.runs().len() + 8);
    for r in mask.runs() {
        // padded [s, e) maps to source [s - pad, e - pad) mod w
        let mut s = r.start as i64 - pad;
        let e = s + r.len as i64;
        while s < e {
            let base = s.rem_euclid(w);
            let take = (e - s).min(w - base);
            runs.push(Run::new(r.row, base as u32, take as u32));
            s += take;
        }
    }
    Ok(Mask::from_runs(plan.source, runs)?)
}

/// One horizontal window of a patch plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: u32,
    pub width: u32,
}

impl Window {
    pub fn end(&self) -> u32 {
        self.start + self.width
    }

    pub fn overlap(&self, other: &Window) -> Option<Window> {
        let s = self.start.max(other.start);
        let e = self.end().min(other.end());
        (e > s).then(|| Window { start: s, width: e - s })
    }
}

/// Overlapping full-height windows sliding across a canvas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    pub canvas: GridDims,
    pub patch_width: u32,
    pub stride: u32,
    pub windows: Vec<Window>,
}

impl PatchPlan {
    pub fn describe(&self) -> String {
        let mut s = format!("patch width {} stride {} windows", self.patch_width, self.stride);
        for w in &self.windows {
            let _ = write!(s, " {}+{}", w.start, w.width);
        }
        s
    }
}

pub fn make_patch_plan(canvas: GridDims, patch_width: u32, stride: u32) -> Result<PatchPlan, GeometryError> {
    if patch_width == 0 || patch_width > canvas.width {
        return Err(GeometryError::PatchPlan(format!(
            "patch width {patch_width} must lie in [1, {}]",
            canvas.width
        )));
    }
    if stride == 0 || stride > patch_width {
        return Err(GeometryError::PatchPlan(format!("stride {stride} must lie in [1, {patch_width}]")));
    }
    if patch_width < canvas.width && stride == patch_width {
        return Err(GeometryError::PatchPlan("consecutive windows must overlap by at least one column".into()));
    }
    let mut windows = vec![Window { start: 0, width: patch_width }];
    while windows.last().unwrap().end() < canvas.width {
        let next = windows.last().unwrap().start + stride;
        let start = next.min(canvas.width - patch_width);
        windows.push(Window { start, width: patch_width });
    }
    Ok(PatchPlan { canvas, patch_width, stride, windows })
}

/// Merges per-window predictions into full-canvas instances. Masks from two
/// overlapping windows are the same object when their restrictions to the
/// shared columns satisfy `iou > tau`; matches are closed transitively and
/// every group is replaced by the union of its members. Output is ordered by
/// run sequence, so it does not depend on input order.
pub fn stitch_patch_masks(
    per_patch: &[(usize, Vec<Mask>)],
    plan: &PatchPlan,
    tau: f64,
) -> Result<Vec<Mask>, GeometryError> {
    let mut nodes: Vec<(Window, &Mask)> = Vec::new();
    for (idx, masks) in per_patch {
        let win = *plan.windows.get(*idx).ok_or(GeometryError::UnknownWindow(*idx))?;
        for m in masks {
            plan.canvas.check(&m.dims())?;
            if !m.within_cols(win.start, win.width) {
                return Err(GeometryError::MaskOutsideWindow { window: *idx, start: win.start, end: win.end() });
            }
            if !m.is_empty() {
                nodes.push((win, m));
            }
        }
    }
    let mut uf = UnionFind::new(nodes.len());
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            let (wi, mi) = nodes[i];
            let (wj, mj) = nodes[j];
            if wi == wj {
                continue;
            }
            let Some(band) = wi.overlap(&wj) else { continue };
            let a = mi.restrict_cols(band.start, band.width);
            let b = mj.restrict_cols(band.start, band.width);
            if a.matches(&b, tau)? {
                uf.union(i, j);
            }
        }
    }
    let mut out = Vec::new();
    for group in uf.groups() {
        out.push(crate::mask::union_all(group.iter().map(|&i| nodes[i].1), plan.canvas)?);
    }
    out.sort_by(|a, b| a.runs().cmp(b.runs()));
    out.dedup();
    Ok(out)
}

/// Column rotation that moves the seam away from a border region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeamPlan {
    pub source: GridDims,
    /// Recentred column `c` shows source column `(c + shift_cols) mod width`.
    pub shift_cols: u32,
}

impl SeamPlan {
    pub fn identity(source: GridDims) -> Self {
        Self { source, shift_cols: 0 }
    }

    pub fn source_col(&self, c: u32) -> u32 {
        ((c as u64 + self.shift_cols as u64) % self.source.width as u64) as u32
    }

    pub fn describe(&self) -> String {
        format!("seam source {} {} shift {}", self.source.width, self.source.height, self.shift_cols)
    }
}

/// Places the region's centroid in the middle of the recentred view, which
/// puts the seam diametrically opposite it.
pub fn make_seam_plan(source: GridDims, blank: &BlankRegion) -> Result<SeamPlan, GeometryError> {
    if !blank.touches_border() {
        return Err(GeometryError::InteriorRegion);
    }
    source.check(&blank.mask.dims())?;
    Ok(seam_plan_centering(source, blank.centroid.1))
}

/// Seam plan that shows source column `col` at the centre of the view.
pub fn seam_plan_centering(source: GridDims, col: f64) -> SeamPlan {
    let w = source.width as i64;
    let x = (col.round() as i64).rem_euclid(w);
    let shift = (x - w / 2).rem_euclid(w) as u32;
    SeamPlan { source, shift_cols: shift }
}

pub fn recenter_mask(mask: &Mask, plan: &SeamPlan) -> Result<Mask, GeometryError> {
    plan.source.check(&mask.dims())?;
    Ok(mask.rotate_cols(-(plan.shift_cols as i64)))
}

pub fn unrecenter_mask(mask: &Mask, plan: &SeamPlan) -> Result<Mask, GeometryError> {
    plan.source.check(&mask.dims())?;
    Ok(mask.rotate_cols(plan.shift_cols as i64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn erp() -> GridDims {
        GridDims::erp(2048, 1024).unwrap()
    }

    #[test]
    fn window_overlap() {
        let a = Window { start: 0, width: 10 };
        assert_eq!(a.overlap(&Window { start: 5, width: 10 }), Some(Window { start: 5, width: 5 }));
        assert_eq!(a.overlap(&Window { start: 10, width: 10 }), None);
        assert_eq!(a.overlap(&Window { start: 30, width: 10 }), None);
    }

    #[test]
    fn pad_plan_for_canonical_frame() {
        let p = make_pad_plan(erp(), 0.25).unwrap();
        assert_eq!(p.pad_cols_each_side, 512);
        assert_eq!(p.padded.width, 3072);
        assert_eq!(p.padded.height, 1024);
        assert_eq!(p.source_col(0), 1536);
        assert_eq!(p.source_col(512), 0);
        assert_eq!(p.source_col(3071), 511);
    }

    #[test]
    fn zero_pad_is_identity() {
        let p = make_pad_plan(erp(), 0.0).unwrap();
        assert_eq!(p.padded.width, 2048);
        let m = Mask::rect(erp(), 10, 2000, 5, 100);
        let padded = embed_in_padded(&m, &p).unwrap();
        assert_eq!(padded.runs(), m.runs());
        assert_eq!(fold_padded_mask(&padded, &p).unwrap(), m);
    }

    #[test]
    fn pad_plan_errors() {
        let flat = GridDims::new(100, 50, false).unwrap();
        assert_eq!(make_pad_plan(flat, 0.1), Err(GeometryError::NonWrapSource));
        assert!(matches!(make_pad_plan(erp(), 0.6), Err(GeometryError::PadFraction(_))));
        assert!(matches!(make_pad_plan(erp(), -0.1), Err(GeometryError::PadFraction(_))));
    }

    #[test]
    fn fold_interior_mask_translates() {
        let p = make_pad_plan(erp(), 0.25).unwrap();
        let m = Mask::rect(p.padded, 100, 1000, 20, 30);
        let f = fold_padded_mask(&m, &p).unwrap();
        assert_eq!(f, Mask::rect(erp(), 100, 488, 20, 30));
        assert_eq!(f.area(), m.area());
        assert!(fold_padded_mask(&Mask::empty(p.padded), &p).unwrap().is_empty());
        assert!(fold_padded_mask(&Mask::empty(erp()), &p).is_err());
    }

    #[test]
    fn fold_does_not_double_count_replicas() {
        let p = make_pad_plan(erp(), 0.25).unwrap();
        // source cols 2000..2047 appear at padded 464..511 and 2512..2559
        let both = Mask::rect(p.padded, 0, 464, 4, 48).union(&Mask::rect(p.padded, 0, 2512, 4, 48)).unwrap();
        let f = fold_padded_mask(&both, &p).unwrap();
        assert_eq!(f, Mask::rect(erp(), 0, 2000, 4, 48));
    }

    #[test]
    fn patch_plan_enumeration() {
        let canvas = GridDims::new(3072, 1024, false).unwrap();
        let p = make_patch_plan(canvas, 1024, 512).unwrap();
        let starts: Vec<u32> = p.windows.iter().map(|w| w.start).collect();
        assert_eq!(starts, vec![0, 512, 1024, 1536, 2048]);
        let single = make_patch_plan(canvas, 3072, 3072).unwrap();
        assert_eq!(single.windows, vec![Window { start: 0, width: 3072 }]);
        assert!(make_patch_plan(canvas, 1024, 1024).is_err());
        assert!(make_patch_plan(canvas, 4000, 10).is_err());
        assert!(make_patch_plan(canvas, 100, 0).is_err());
    }

    #[test]
    fn patch_plan_clamps_final_window() {
        let canvas = GridDims::new(1000, 10, false).unwrap();
        let p = make_patch_plan(canvas, 300, 200).unwrap();
        let starts: Vec<u32> = p.windows.iter().map(|w| w.start).collect();
        assert_eq!(starts, vec![0, 200, 400, 600, 700]);
        assert_eq!(p.windows.last().unwrap().end(), 1000);
    }

    #[test]
    fn seam_plan_from_seam_region() {
        let d = erp();
        let m = Mask::rect(d, 100, 2038, 10, 20);
        let region = BlankRegion::new(m.clone()).unwrap();
        assert!((region.centroid.1 - 2047.5).abs() < 1e-9);
        let blank = BlankRegion { mask: m, centroid: (105.0, 0.0) };
        let plan = make_seam_plan(d, &blank).unwrap();
        assert_eq!(plan.shift_cols, 1024);
        let interior = BlankRegion::new(Mask::rect(d, 0, 100, 5, 5)).unwrap();
        assert_eq!(make_seam_plan(d, &interior), Err(GeometryError::InteriorRegion));
    }

    #[test]
    fn recenter_joins_seam_pieces() {
        let d = erp();
        let m = Mask::rect(d, 100, 2038, 10, 20);
        assert_eq!(m.runs().len(), 20);
        let region = BlankRegion::new(m.clone()).unwrap();
        let plan = make_seam_plan(d, &region).unwrap();
        let r = recenter_mask(&m, &plan).unwrap();
        assert_eq!(r.runs().len(), 10);
        assert!(!r.touches_left() && !r.touches_right());
        assert_eq!(unrecenter_mask(&r, &plan).unwrap(), m);
        let id = SeamPlan::identity(d);
        assert_eq!(recenter_mask(&m, &id).unwrap(), m);
    }

    #[test]
    fn stitch_merges_spanning_object() {
        let canvas = GridDims::new(40, 4, false).unwrap();
        let plan = make_patch_plan(canvas, 20, 10).unwrap();
        let obj = Mask::rect(canvas, 0, 5, 4, 12);
        let per = vec![(0, vec![obj.restrict_cols(0, 20)]), (1, vec![obj.restrict_cols(10, 20)])];
        assert_eq!(stitch_patch_masks(&per, &plan, 0.5).unwrap(), vec![obj]);
    }

    #[test]
    fn stitch_rejects_out_of_window() {
        let canvas = GridDims::new(40, 4, false).unwrap();
        let plan = make_patch_plan(canvas, 20, 10).unwrap();
        let per = vec![(0, vec![Mask::rect(canvas, 0, 15, 1, 10)])];
        assert!(matches!(stitch_patch_masks(&per, &plan, 0.5), Err(GeometryError::MaskOutsideWindow { .. })));
        let per = vec![(9, vec![])];
        assert_eq!(stitch_patch_masks(&per, &plan, 0.5), Err(GeometryError::UnknownWindow(9)));
    }
}
