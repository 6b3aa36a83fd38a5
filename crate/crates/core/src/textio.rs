//! Small line cursor shared by the store and wire parsers.

use crate::mask::{GridDims, Mask, MaskError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

pub struct Lines<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Lines<'a> {
    /// Every line must end in `\n`; a missing final newline or `\r` is rejected.
    pub fn new(text: &'a str) -> Result<Self, LineError> {
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(LineError { line: text.lines().count(), message: "missing final newline".into() });
        }
        if let Some(i) = text.lines().position(|l| l.contains('\r')) {
            return Err(LineError { line: i + 1, message: "carriage return".into() });
        }
        Ok(Self { lines: text.lines().collect(), pos: 0 })
    }

    /// 1-based number of the line returned by the next `next()` call.
    pub fn line_no(&self) -> usize {
        self.pos + 1
    }

    pub fn err(&self, message: impl Into<String>) -> LineError {
        LineError { line: self.pos.max(1), message: message.into() }
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.lines.len()
    }

    pub fn peek(&self) -> Option<&'a str> {
        self.lines.get(self.pos).copied()
    }

    pub fn next(&mut self) -> Result<&'a str, LineError> {
        let l = self.lines.get(self.pos).copied().ok_or_else(|| LineError {
            line: self.pos + 1,
            message: "unexpected end of input".into(),
        })?;
        self.pos += 1;
        Ok(l)
    }

    /// Consumes a line of the form `<key> <rest>` and returns `rest`.
    pub fn field(&mut self, key: &str) -> Result<&'a str, LineError> {
        let l = self.next()?;
        match l.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest),
            _ => Err(self.err(format!("expected `{key} ...`, got {l:?}"))),
        }
    }

    /// `field` followed by a value parser.
    pub fn value<T>(&mut self, key: &str, parse: impl FnOnce(&'a str) -> Result<T, String>) -> Result<T, LineError> {
        let v = self.field(key)?;
        parse(v).map_err(|m| self.err(m))
    }

    pub fn expect(&mut self, exact: &str) -> Result<(), LineError> {
        let l = self.next()?;
        if l == exact {
            Ok(())
        } else {
            Err(self.err(format!("expected {exact:?}, got {l:?}")))
        }
    }

    pub fn finish(&self) -> Result<(), LineError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(LineError { line: self.pos + 1, message: "trailing content".into() })
        }
    }

    /// Reads a `dims` header followed by exactly `runs` run lines.
    pub fn mask(&mut self, runs: usize) -> Result<Mask, LineError> {
        let header = self.next()?;
        let dims = GridDims::parse_header(header).map_err(|m| self.err(m))?;
        self.mask_body(dims, runs)
    }

    pub fn mask_body(&mut self, dims: GridDims, runs: usize) -> Result<Mask, LineError> {
        if self.lines.len() - self.pos < runs {
            return Err(LineError { line: self.lines.len() + 1, message: "mask block truncated".into() });
        }
        let start = self.pos;
        let body = self.lines[start..start + runs].iter().enumerate().map(|(i, l)| (start + i + 1, *l));
        let mask = Mask::parse_runs(dims, body).map_err(|e| match e {
            MaskError::Parse { line, message } => LineError { line, message },
            other => LineError { line: start + 1, message: other.to_string() },
        })?;
        self.pos += runs;
        Ok(mask)
    }
}

/// Canonical unsigned integer: digits only, no leading zeros.
pub fn parse_uint<T: std::str::FromStr>(tok: &str, what: &str) -> Result<T, String> {
    if tok.is_empty() || (tok.len() > 1 && tok.starts_with('0')) || !tok.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("invalid {what} {tok:?}"));
    }
    tok.parse().map_err(|_| format!("invalid {what} {tok:?}"))
}

/// Canonical float: must print back exactly as written.
pub fn parse_f64(tok: &str, what: &str) -> Result<f64, String> {
    let v: f64 = tok.parse().map_err(|_| format!("invalid {what} {tok:?}"))?;
    if !v.is_finite() || format!("{v}") != tok {
        return Err(format!("non-canonical {what} {tok:?}"));
    }
    Ok(v)
}

/// Identifiers (video ids, taxonomy ids, backend ids): `[A-Za-z0-9_.-]+`, not
/// starting with a dot.
pub fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && !s.starts_with('.')
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

/// Free-text labels: non-empty, single line, no surrounding whitespace.
pub fn is_label(s: &str) -> bool {
    !s.is_empty() && s.trim() == s && !s.contains(['\n', '\r', '\t'])
}

/// Splits `n` whitespace-separated tokens off the front of `s`, returning
/// them and the remainder (which may contain spaces).
pub fn split_tokens<'a>(s: &'a str, n: usize) -> Option<(Vec<&'a str>, &'a str)> {
    let mut toks = Vec::with_capacity(n);
    let mut rest = s;
    for _ in 0..n {
        let (tok, r) = match rest.split_once(' ') {
            Some((t, r)) => (t, r),
            None => (rest, ""),
        };
        if tok.is_empty() {
            return None;
        }
        toks.push(tok);
        rest = r;
    }
    Some((toks, rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_numbers() {
        assert_eq!(parse_uint::<u32>("12", "n"), Ok(12));
        assert!(parse_uint::<u32>("012", "n").is_err());
        assert!(parse_uint::<u32>("+1", "n").is_err());
        assert_eq!(parse_f64("0.95", "c"), Ok(0.95));
        assert_eq!(parse_f64("1", "c"), Ok(1.0));
        assert!(parse_f64("1.0", "c").is_err());
        assert!(parse_f64("NaN", "c").is_err());
    }

    #[test]
    fn tokens_and_rest() {
        assert_eq!(split_tokens("1 2 red car", 2), Some((vec!["1", "2"], "red car")));
        assert_eq!(split_tokens("1", 1), Some((vec!["1"], "")));
        assert_eq!(split_tokens("1", 2), None);
    }

    #[test]
    fn mask_block_lines() {
        let text = "x 1\ndims 4 2 wrap1\n0 1 2\nend\n";
        let mut l = Lines::new(text).unwrap();
        assert_eq!(l.field("x").unwrap(), "1");
        let m = l.mask(1).unwrap();
        assert_eq!(m.area(), 2);
        l.expect("end").unwrap();
        l.finish().unwrap();
        assert!(Lines::new("a").is_err());
        let mut l = Lines::new("dims 4 2 wrap1\n0 3 2\n").unwrap();
        assert_eq!(l.mask(1).unwrap_err().line, 2);
    }
}
