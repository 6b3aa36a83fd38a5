//! Run-length binary masks on the equirectangular pixel grid.
//!
//! A [`Mask`] stores one maximal run per horizontal stretch of set pixels,
//! ordered by `(row, start)`. All set algebra works directly on runs, so the
//! cost of an operation is linear in the number of runs rather than in the
//! number of pixels. When [`GridDims::wrap`] is set, column `0` and column
//! `width - 1` are neighbours for every neighbourhood-based operation.

mod components;
mod ops;
mod text;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use components::{blank_regions, connected_components, BlankRegion, Connectivity};
pub use ops::{coverage_rate, union_all};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("grid dimensions must be positive, got {width}x{height}")]
    EmptyGrid { width: u32, height: u32 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimsMismatch { left: GridDims, right: GridDims },
    #[error("bitmap has {actual} pixels, expected {expected}")]
    BitmapSize { expected: usize, actual: usize },
    #[error("run {run:?} lies outside {dims}")]
    RunOutOfBounds { run: Run, dims: GridDims },
    #[error("mask text line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Pixel grid a mask lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridDims {
    pub width: u32,
    pub height: u32,
    /// Column 0 and column `width - 1` are adjacent.
    pub wrap: bool,
}

impl GridDims {
    pub fn new(width: u32, height: u32, wrap: bool) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::EmptyGrid { width, height });
        }
        Ok(Self { width, height, wrap })
    }

    /// Wrapping grid, the canvas of an equirectangular frame.
    pub fn erp(width: u32, height: u32) -> Result<Self, MaskError> {
        Self::new(width, height, true)
    }

    pub fn pixels(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub(crate) fn check(&self, other: &GridDims) -> Result<(), MaskError> {
        if self == other {
            Ok(())
        } else {
            Err(MaskError::DimsMismatch { left: *self, right: *other })
        }
    }
}

impl std::fmt::Display for GridDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}{}", self.width, self.height, if self.wrap { " (wrap)" } else { "" })
    }
}

/// A horizontal stretch of set pixels `[start, start + len)` in one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Run {
    pub row: u32,
    pub start: u32,
    pub len: u32,
}

impl Run {
    pub fn new(row: u32, start: u32, len: u32) -> Self {
        Self { row, start, len }
    }

    /// One past the last column.
    pub fn end(&self) -> u32 {
        self.start + self.len
    }
}

/// Binary region stored as maximal row runs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    dims: GridDims,
    runs: Vec<Run>,
}

impl Mask {
    pub fn empty(dims: GridDims) -> Self {
        Self { dims, runs: Vec::new() }
    }

    /// The whole canvas.
    pub fn full(dims: GridDims) -> Self {
        let runs = (0..dims.height).map(|r| Run::new(r, 0, dims.width)).collect();
        Self { dims, runs }
    }

    /// Builds a mask from arbitrary runs: sorts, merges overlapping or
    /// touching runs and drops zero-length ones.
    pub fn from_runs(dims: GridDims, runs: impl IntoIterator<Item = Run>) -> Result<Self, MaskError> {
        let mut runs: Vec<Run> = runs.into_iter().filter(|r| r.len > 0).collect();
        for run in &runs {
            if run.row >= dims.height || run.end() > dims.width {
                return Err(MaskError::RunOutOfBounds { run: *run, dims });
            }
        }
        runs.sort_unstable();
        Ok(Self { dims, runs: normalize_sorted(runs) })
    }

    /// Caller guarantees runs are sorted, in bounds, and maximal.
    pub(crate) fn from_normalized(dims: GridDims, runs: Vec<Run>) -> Self {
        debug_assert!(is_normalized(&dims, &runs), "runs not normalized");
        Self { dims, runs }
    }

    /// Encodes a row-major boolean bitmap.
    pub fn encode(bitmap: &[bool], dims: GridDims) -> Result<Self, MaskError> {
        let expected = dims.pixels() as usize;
        if bitmap.len() != expected {
            return Err(MaskError::BitmapSize { expected, actual: bitmap.len() });
        }
        let w = dims.width as usize;
        let mut runs = Vec::new();
        for (row, line) in bitmap.chunks_exact(w).enumerate() {
            let mut col = 0;
            while col < w {
                if line[col] {
                    let start = col;
                    while col < w && line[col] {
                        col += 1;
                    }
                    runs.push(Run::new(row as u32, start as u32, (col - start) as u32));
                } else {
                    col += 1;
                }
            }
        }
        Ok(Self { dims, runs })
    }

    /// Row-major boolean bitmap.
    pub fn decode(&self) -> Vec<bool> {
        let w = self.dims.width as usize;
        let mut out = vec![false; self.dims.pixels() as usize];
        for run in &self.runs {
            let base = run.row as usize * w;
            out[base + run.start as usize..base + run.end() as usize].fill(true);
        }
        out
    }

    /// Axis-aligned rectangle. Rows are clipped to the canvas; columns wrap
    /// on wrapping grids and are clipped otherwise.
    pub fn rect(dims: GridDims, top: i64, left: i64, rows: u32, cols: u32) -> Self {
        let mut runs = Vec::new();
        let r0 = top.max(0);
        let r1 = (top + rows as i64).min(dims.height as i64);
        for row in r0..r1 {
            push_span(&mut runs, dims, row as u32, left, left + cols as i64);
        }
        Self::from_runs(dims, runs).expect("rect spans are clipped to the grid")
    }

    /// Filled ellipse with centre `(cy, cx)` and radii `(ry, rx)`.
    pub fn ellipse(dims: GridDims, cy: f64, cx: f64, ry: f64, rx: f64) -> Self {
        let mut runs = Vec::new();
        if ry > 0.0 && rx > 0.0 {
            let r0 = (cy - ry).floor().max(0.0) as i64;
            let r1 = ((cy + ry).ceil() as i64 + 1).min(dims.height as i64);
            for row in r0..r1 {
                // pixel centres at row + 0.5
                let dy = (row as f64 + 0.5 - cy) / ry;
                if dy.abs() > 1.0 {
                    continue;
                }
                let half = rx * (1.0 - dy * dy).sqrt();
                let lo = (cx - half - 0.5).ceil() as i64;
                let hi = (cx + half - 0.5).floor() as i64 + 1;
                if hi > lo {
                    push_span(&mut runs, dims, row as u32, lo, hi);
                }
            }
        }
        Self::from_runs(dims, runs).expect("ellipse spans are clipped to the grid")
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().map(|r| r.len as u64).sum()
    }

    pub fn contains(&self, row: u32, col: u32) -> bool {
        let idx = self.runs.partition_point(|r| (r.row, r.start) <= (row, col));
        idx > 0 && {
            let r = self.runs[idx - 1];
            r.row == row && col < r.end()
        }
    }

    pub fn touches_left(&self) -> bool {
        self.runs.iter().any(|r| r.start == 0)
    }

    pub fn touches_right(&self) -> bool {
        self.runs.iter().any(|r| r.end() == self.dims.width)
    }

    /// Which columns hold at least one set pixel.
    pub fn column_occupancy(&self) -> Vec<bool> {
        let mut occ = vec![false; self.dims.width as usize];
        for run in &self.runs {
            occ[run.start as usize..run.end() as usize].fill(true);
        }
        occ
    }

    /// Inclusive row range, or `None` for an empty mask.
    pub fn row_span(&self) -> Option<(u32, u32)> {
        Some((self.runs.first()?.row, self.runs.last()?.row))
    }

    /// Mean pixel position `(row, col)`. On wrapping grids the column mean is
    /// taken after unrolling the mask at its widest empty column gap, so a
    /// region split by the seam gets a centroid next to the seam.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let area = self.area();
        if area == 0 {
            return None;
        }
        let w = self.dims.width as i64;
        let offset = if self.dims.wrap { unroll_offset(&self.column_occupancy()) } else { 0 };
        let (mut sr, mut sc) = (0f64, 0f64);
        for run in &self.runs {
            let n = run.len as f64;
            let start = (run.start as i64 - offset).rem_euclid(w) as f64;
            sr += run.row as f64 * n;
            sc += n * (start + (n - 1.0) / 2.0);
        }
        let a = area as f64;
        let col = (sc / a + offset as f64).rem_euclid(w as f64);
        Some((sr / a, col))
    }

    /// Columns `[start, start + width)` are kept, everything else cleared.
    pub fn restrict_cols(&self, start: u32, width: u32) -> Mask {
        let end = start.saturating_add(width).min(self.dims.width);
        let runs = self
            .runs
            .iter()
            .filter_map(|r| {
                let s = r.start.max(start);
                let e = r.end().min(end);
                (e > s).then(|| Run::new(r.row, s, e - s))
            })
            .collect();
        Mask::from_normalized(self.dims, runs)
    }

    /// True if every run lies in columns `[start, start + width)`.
    pub fn within_cols(&self, start: u32, width: u32) -> bool {
        self.runs.iter().all(|r| r.start >= start && r.end() <= start.saturating_add(width))
    }

    /// Moves the mask by `(drow, dcol)`. Rows are clipped; columns wrap on
    /// wrapping grids and are clipped otherwise.
    pub fn translate(&self, drow: i64, dcol: i64) -> Mask {
        let mut runs = Vec::with_capacity(self.runs.len() + 4);
        for run in &self.runs {
            let row = run.row as i64 + drow;
            if row < 0 || row >= self.dims.height as i64 {
                continue;
            }
            let s = run.start as i64 + dcol;
            push_span(&mut runs, self.dims, row as u32, s, s + run.len as i64);
        }
        Mask::from_runs(self.dims, runs).expect("translated spans are clipped to the grid")
    }

    /// Cyclic column rotation: pixel `(r, c)` moves to `(r, (c + k) mod width)`.
    /// Always a permutation, regardless of the wrap flag.
    pub fn rotate_cols(&self, k: i64) -> Mask {
        let w = self.dims.width as i64;
        let mut runs = Vec::with_capacity(self.runs.len() + 4);
        for run in &self.runs {
            let s = (run.start as i64 + k).rem_euclid(w);
            let e = s + run.len as i64;
            if e <= w {
                runs.push(Run::new(run.row, s as u32, run.len));
            } else {
                runs.push(Run::new(run.row, s as u32, (w - s) as u32));
                runs.push(Run::new(run.row, 0, (e - w) as u32));
            }
        }
        Mask::from_runs(self.dims, runs).expect("rotation is a column permutation")
    }

    /// Pixels within Euclidean distance `radius` of the mask; columns wrap
    /// on wrapping grids.
    pub fn dilate_disk(&self, radius: u32) -> Mask {
        let r = radius as i64;
        let mut runs = Vec::with_capacity(self.runs.len() * (2 * radius as usize + 1));
        for dy in -r..=r {
            let half = ((r * r - dy * dy) as f64).sqrt().floor() as i64;
            for run in &self.runs {
                let row = run.row as i64 + dy;
                if row < 0 || row >= self.dims.height as i64 {
                    continue;
                }
                push_span(&mut runs, self.dims, row as u32, run.start as i64 - half, run.end() as i64 + half);
            }
        }
        Mask::from_runs(self.dims, runs).expect("spans are clipped to the grid")
    }

    /// Mask pixels with a 4-neighbour outside the mask. Off-grid rows count
    /// as outside; columns follow the wrap flag.
    pub fn boundary(&self) -> Mask {
        let interior = [(1, 0), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .fold(self.clone(), |acc, &(dr, dc)| acc.intersection(&self.translate(dr, dc)).expect("same dims"));
        self.difference(&interior).expect("same dims")
    }

    pub fn complement(&self) -> Mask {
        Mask::full(self.dims).difference(self).expect("same dims")
    }

    /// Re-targets the same runs onto a grid with another wrap flag or larger
    /// size.
    pub fn with_dims(&self, dims: GridDims) -> Result<Mask, MaskError> {
        Mask::from_runs(dims, self.runs.iter().copied())
    }
}

/// Appends the pixels `[lo, hi)` of `row`, wrapping or clipping columns.
fn push_span(runs: &mut Vec<Run>, dims: GridDims, row: u32, lo: i64, hi: i64) {
    let w = dims.width as i64;
    if hi <= lo {
        return;
    }
    if !dims.wrap {
        let (s, e) = (lo.max(0), hi.min(w));
        if e > s {
            runs.push(Run::new(row, s as u32, (e - s) as u32));
        }
        return;
    }
    if hi - lo >= w {
        runs.push(Run::new(row, 0, w as u32));
        return;
    }
    let s = lo.rem_euclid(w);
    let e = s + (hi - lo);
    if e <= w {
        runs.push(Run::new(row, s as u32, (e - s) as u32));
    } else {
        runs.push(Run::new(row, s as u32, (w - s) as u32));
        runs.push(Run::new(row, 0, (e - w) as u32));
    }
}

/// Column where unrolling a wrapped occupancy profile keeps every piece
/// contiguous: the first occupied column after the widest empty gap.
fn unroll_offset(occ: &[bool]) -> i64 {
    let w = occ.len();
    let Some(first_empty) = occ.iter().position(|&o| !o) else {
        return 0;
    };
    let mut best = (0usize, 0usize);
    let mut run_len = 0usize;
    // walk one full turn starting at an empty column
    for i in 0..w {
        let c = (first_empty + i) % w;
        if !occ[c] {
            run_len += 1;
            if run_len > best.0 {
                best = (run_len, (c + 1) % w);
            }
        } else {
            run_len = 0;
        }
    }
    if best.0 == w {
        0
    } else {
        best.1 as i64
    }
}

fn normalize_sorted(runs: Vec<Run>) -> Vec<Run> {
    let mut out: Vec<Run> = Vec::with_capacity(runs.len());
    for run in runs {
        if let Some(last) = out.last_mut() {
            if last.row == run.row && run.start <= last.end() {
                let end = last.end().max(run.end());
                last.len = end - last.start;
                continue;
            }
        }
        out.push(run);
    }
    out
}

fn is_normalized(dims: &GridDims, runs: &[Run]) -> bool {
    runs.iter().all(|r| r.len > 0 && r.row < dims.height && r.end() <= dims.width)
        && runs
            .windows(2)
            .all(|p| p[0].row < p[1].row || (p[0].row == p[1].row && p[0].end() < p[1].start))
}
