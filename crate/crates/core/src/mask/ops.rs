use super::{GridDims, Mask, MaskError, Run};

#[derive(Clone, Copy)]
enum SetOp {
    Union,
    Intersection,
    Difference,
}

impl SetOp {
    fn keep(self, a: bool, b: bool) -> bool {
        match self {
            SetOp::Union => a || b,
            SetOp::Intersection => a && b,
            SetOp::Difference => a && !b,
        }
    }
}

/// Splits sorted runs into per-row slices.
fn rows(runs: &[Run]) -> impl Iterator<Item = (u32, &[Run])> {
    runs.chunk_by(|a, b| a.row == b.row).map(|chunk| (chunk[0].row, chunk))
}

fn combine_row(row: u32, a: &[Run], b: &[Run], op: SetOp, out: &mut Vec<Run>) {
    let mut cuts: Vec<u32> = Vec::with_capacity(2 * (a.len() + b.len()));
    for r in a.iter().chain(b) {
        cuts.push(r.start);
        cuts.push(r.end());
    }
    cuts.sort_unstable();
    cuts.dedup();
    let (mut ia, mut ib) = (0, 0);
    let mut open: Option<(u32, u32)> = None;
    for seg in cuts.windows(2) {
        let (x0, x1) = (seg[0], seg[1]);
        while ia < a.len() && a[ia].end() <= x0 {
            ia += 1;
        }
        while ib < b.len() && b[ib].end() <= x0 {
            ib += 1;
        }
        let in_a = ia < a.len() && a[ia].start <= x0;
        let in_b = ib < b.len() && b[ib].start <= x0;
        if op.keep(in_a, in_b) {
            open = match open {
                Some((s, e)) if e == x0 => Some((s, x1)),
                Some((s, e)) => {
                    out.push(Run::new(row, s, e - s));
                    Some((x0, x1))
                }
                None => Some((x0, x1)),
            };
        }
    }
    if let Some((s, e)) = open {
        out.push(Run::new(row, s, e - s));
    }
}

fn combine(a: &Mask, b: &Mask, op: SetOp) -> Result<Mask, MaskError> {
    a.dims.check(&b.dims)?;
    let mut out = Vec::with_capacity(a.runs.len() + b.runs.len());
    let mut ra = rows(&a.runs).peekable();
    let mut rb = rows(&b.runs).peekable();
    loop {
        match (ra.peek(), rb.peek()) {
            (None, None) => break,
            (Some(&(row, runs)), None) => {
                combine_row(row, runs, &[], op, &mut out);
                ra.next();
            }
            (None, Some(&(row, runs))) => {
                combine_row(row, &[], runs, op, &mut out);
                rb.next();
            }
            (Some(&(r1, x)), Some(&(r2, y))) => {
                if r1 < r2 {
                    combine_row(r1, x, &[], op, &mut out);
                    ra.next();
                } else if r2 < r1 {
                    combine_row(r2, &[], y, op, &mut out);
                    rb.next();
                } else {
                    combine_row(r1, x, y, op, &mut out);
                    ra.next();
                    rb.next();
                }
            }
        }
    }
    Ok(Mask::from_normalized(a.dims, out))
}

impl Mask {
    pub fn union(&self, other: &Mask) -> Result<Mask, MaskError> {
        combine(self, other, SetOp::Union)
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask, MaskError> {
        combine(self, other, SetOp::Intersection)
    }

    pub fn difference(&self, other: &Mask) -> Result<Mask, MaskError> {
        combine(self, other, SetOp::Difference)
    }

    /// `|self ∩ other|` without materialising the intersection.
    pub fn intersection_area(&self, other: &Mask) -> Result<u64, MaskError> {
        self.dims.check(&other.dims)?;
        let (a, b) = (&self.runs, &other.runs);
        let (mut i, mut j) = (0, 0);
        let mut total = 0u64;
        while i < a.len() && j < b.len() {
            let (x, y) = (a[i], b[j]);
            if x.row != y.row {
                if x.row < y.row {
                    i += 1;
                } else {
                    j += 1;
                }
                continue;
            }
            let s = x.start.max(y.start);
            let e = x.end().min(y.end());
            if e > s {
                total += (e - s) as u64;
            }
            if x.end() <= y.end() {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(total)
    }

    /// Intersection over union; 0 when both masks are empty.
    pub fn iou(&self, other: &Mask) -> Result<f64, MaskError> {
        let inter = self.intersection_area(other)?;
        let union = self.area() + other.area() - inter;
        Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
    }

    /// Same-object test: `iou > tau`, strictly.
    pub fn matches(&self, other: &Mask, tau: f64) -> Result<bool, MaskError> {
        Ok(self.iou(other)? > tau)
    }
}

/// Union of every mask; all must live on `dims`.
pub fn union_all<'a>(masks: impl IntoIterator<Item = &'a Mask>, dims: GridDims) -> Result<Mask, MaskError> {
    let mut runs = Vec::new();
    for m in masks {
        dims.check(&m.dims)?;
        runs.extend_from_slice(&m.runs);
    }
    runs.sort_unstable();
    Mask::from_runs(dims, runs)
}

/// Fraction of the canvas covered by at least one mask.
pub fn coverage_rate<'a>(masks: impl IntoIterator<Item = &'a Mask>, dims: GridDims) -> Result<f64, MaskError> {
    let u = union_all(masks, dims)?;
    Ok(u.area() as f64 / dims.pixels() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d() -> GridDims {
        GridDims::erp(10, 10).unwrap()
    }

    #[test]
    fn identity_and_idempotence() {
        let a = Mask::rect(d(), 2, 3, 4, 5);
        assert_eq!(a.union(&Mask::empty(d())).unwrap(), a);
        assert_eq!(a.intersection(&a).unwrap(), a);
        assert!(a.difference(&a).unwrap().is_empty());
    }

    #[test]
    fn iou_cases() {
        let a = Mask::rect(d(), 0, 0, 2, 5);
        assert_eq!(a.iou(&a).unwrap(), 1.0);
        let b = Mask::rect(d(), 5, 5, 2, 2);
        assert_eq!(a.iou(&b).unwrap(), 0.0);
        let e = Mask::empty(d());
        assert_eq!(e.iou(&e).unwrap(), 0.0);
        assert!(!e.matches(&a, 0.0).unwrap());
    }

    #[test]
    fn matches_is_strict() {
        // a = 5 px, b = 3 px inside a: iou = 3/5
        let a = Mask::rect(d(), 0, 0, 1, 5);
        let b = Mask::rect(d(), 0, 0, 1, 3);
        assert_eq!(a.iou(&b).unwrap(), 0.6);
        assert!(a.matches(&b, 0.5).unwrap());
        assert!(!a.matches(&b, 0.6).unwrap());
        let half = Mask::rect(d(), 0, 0, 1, 2);
        let whole = Mask::rect(d(), 0, 0, 1, 4);
        assert!(!half.matches(&whole, 0.5).unwrap());
    }

    #[test]
    fn dims_mismatch_is_an_error() {
        let a = Mask::empty(d());
        let b = Mask::empty(GridDims::erp(10, 11).unwrap());
        assert!(a.iou(&b).is_err());
        assert!(a.union(&b).is_err());
        assert!(coverage_rate([&a, &b], d()).is_err());
    }

    #[test]
    fn coverage_counts_overlaps_once() {
        let dims = GridDims::erp(100, 10).unwrap();
        let a = Mask::rect(dims, 0, 0, 10, 60);
        let b = Mask::rect(dims, 0, 30, 10, 60);
        assert_eq!(coverage_rate([&a, &b], dims).unwrap(), 0.9);
        assert_eq!(coverage_rate([], dims).unwrap(), 0.0);
    }

    #[test]
    fn touching_results_are_maximal() {
        let a = Mask::rect(d(), 0, 0, 1, 3);
        let b = Mask::rect(d(), 0, 3, 1, 3);
        let u = a.union(&b).unwrap();
        assert_eq!(u.runs(), &[Run::new(0, 0, 6)]);
    }
}
