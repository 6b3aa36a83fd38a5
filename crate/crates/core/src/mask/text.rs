//! Line-oriented mask text form:
//!
//! ```text
//! dims <width> <height> wrap<0|1>
//! <row> <start> <length>
//! ...
//! ```
//!
//! Runs appear in canonical `(row, start)` order, one per line. The same
//! block is embedded in store files and backend wire messages.

use std::fmt::Write as _;

use super::{GridDims, Mask, MaskError, Run};

impl GridDims {
    pub fn header(&self) -> String {
        format!("dims {} {} wrap{}", self.width, self.height, u8::from(self.wrap))
    }

    /// Parses a `dims W H wrap{0|1}` header line.
    pub fn parse_header(line: &str) -> Result<GridDims, String> {
        let mut it = line.split(' ');
        if it.next() != Some("dims") {
            return Err(format!("expected dims header, got {line:?}"));
        }
        let w = parse_u32(it.next(), "width")?;
        let h = parse_u32(it.next(), "height")?;
        let wrap = match it.next() {
            Some("wrap0") => false,
            Some("wrap1") => true,
            other => return Err(format!("expected wrap0 or wrap1, got {other:?}")),
        };
        if it.next().is_some() {
            return Err("trailing fields after dims header".into());
        }
        GridDims::new(w, h, wrap).map_err(|e| e.to_string())
    }
}

pub(crate) fn parse_u32(tok: Option<&str>, what: &str) -> Result<u32, String> {
    let tok = tok.ok_or_else(|| format!("missing {what}"))?;
    // canonical decimal only: no sign, no leading zeros
    if tok.is_empty() || (tok.len() > 1 && tok.starts_with('0')) || !tok.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("invalid {what} {tok:?}"));
    }
    tok.parse().map_err(|_| format!("invalid {what} {tok:?}"))
}

impl Mask {
    /// Appends the text form (header plus one line per run) to `out`.
    pub fn write_text(&self, out: &mut String) {
        out.push_str(&self.dims.header());
        out.push('\n');
        for r in &self.runs {
            let _ = writeln!(out, "{} {} {}", r.row, r.start, r.len);
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(16 + self.runs.len() * 12);
        self.write_text(&mut s);
        s
    }

    /// Parses a complete mask block.
    pub fn parse_text(text: &str) -> Result<Mask, MaskError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (n, header) = lines.next().ok_or(MaskError::Parse { line: 1, message: "empty mask text".into() })?;
        let dims = GridDims::parse_header(header).map_err(|message| MaskError::Parse { line: n, message })?;
        let body: Vec<(usize, &str)> = lines.collect();
        Self::parse_runs(dims, body)
    }

    /// Parses exactly `lines` as run lines on `dims`, rejecting anything
    /// non-canonical (unsorted, touching, or overlapping runs).
    pub fn parse_runs<'a>(
        dims: GridDims,
        lines: impl IntoIterator<Item = (usize, &'a str)>,
    ) -> Result<Mask, MaskError> {
        let mut runs: Vec<Run> = Vec::new();
        for (n, line) in lines {
            let err = |message: String| MaskError::Parse { line: n, message };
            let mut it = line.split(' ');
            let row = parse_u32(it.next(), "row").map_err(err)?;
            let start = parse_u32(it.next(), "start").map_err(err)?;
            let len = parse_u32(it.next(), "length").map_err(err)?;
            if it.next().is_some() {
                return Err(err("trailing fields in run line".into()));
            }
            let run = Run::new(row, start, len);
            if len == 0 || row >= dims.height || start as u64 + len as u64 > dims.width as u64 {
                return Err(err(format!("run {row} {start} {len} outside {dims}")));
            }
            if let Some(prev) = runs.last() {
                let ordered = prev.row < row || (prev.row == row && prev.end() < start);
                if !ordered {
                    return Err(err("runs not in canonical order".into()));
                }
            }
            runs.push(run);
        }
        Ok(Mask::from_normalized(dims, runs))
    }
}

impl std::fmt::Display for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_text())
    }
}
