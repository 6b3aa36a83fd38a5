//! Binary PNM (P4/P5/P6) headers and a PGM writer. Frames are never decoded
//! beyond their header in the engine; backends read pixels themselves.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmKind {
    Bitmap,
    Gray,
    Color,
}

impl PnmKind {
    pub fn extension(&self) -> &'static str {
        match self {
            PnmKind::Bitmap => "pbm",
            PnmKind::Gray => "pgm",
            PnmKind::Color => "ppm",
        }
    }

    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext {
            "pbm" => Some(PnmKind::Bitmap),
            "pgm" => Some(PnmKind::Gray),
            "ppm" => Some(PnmKind::Color),
            _ => None,
        }
    }

    pub fn content_type(&self) -> &'static str {
        match self {
            PnmKind::Bitmap => "image/x-portable-bitmap",
            PnmKind::Gray => "image/x-portable-graymap",
            PnmKind::Color => "image/x-portable-pixmap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RasterInfo {
    pub kind: PnmKind,
    pub width: u32,
    pub height: u32,
}

/// Parses the header of a binary PNM file.
pub fn read_header(path: &Path) -> Result<RasterInfo, RasterError> {
    let shown = path.display().to_string();
    let io = |source| RasterError::Io { path: shown.clone(), source };
    let mut head = Vec::with_capacity(512);
    std::fs::File::open(path).map_err(io)?.take(512).read_to_end(&mut head).map_err(io)?;
    parse_header(&head).map_err(|message| RasterError::Format { path: shown, message })
}

fn parse_header(bytes: &[u8]) -> Result<RasterInfo, String> {
    let kind = match bytes.get(..2) {
        Some(b"P4") => PnmKind::Bitmap,
        Some(b"P5") => PnmKind::Gray,
        Some(b"P6") => PnmKind::Color,
        _ => return Err("not a binary PNM file".into()),
    };
    let fields = if kind == PnmKind::Bitmap { 2 } else { 3 };
    let mut values = Vec::with_capacity(3);
    let mut i = 2;
    while values.len() < fields {
        match bytes.get(i) {
            None => return Err("truncated header".into()),
            Some(b'#') => {
                while bytes.get(i).is_some_and(|&b| b != b'\n') {
                    i += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => i += 1,
            Some(b) if b.is_ascii_digit() => {
                let start = i;
                while bytes.get(i).is_some_and(u8::is_ascii_digit) {
                    i += 1;
                }
                let v: u32 = std::str::from_utf8(&bytes[start..i])
                    .ok()
                    .and_then(|s| s.parse().ok())
                    .ok_or("header value out of range")?;
                values.push(v);
            }
            Some(_) => return Err("malformed header".into()),
        }
    }
    if values[0] == 0 || values[1] == 0 {
        return Err("zero image dimension".into());
    }
    if fields == 3 && !(1..=255).contains(&values[2]) {
        return Err("only 8-bit samples are supported".into());
    }
    Ok(RasterInfo { kind, width: values[0], height: values[1] })
}

/// Writes an 8-bit grayscale PGM.
pub fn write_pgm(path: &Path, width: u32, height: u32, pixels: &[u8]) -> Result<(), RasterError> {
    assert_eq!(pixels.len() as u64, width as u64 * height as u64, "pixel buffer size");
    let io = |source| RasterError::Io { path: path.display().to_string(), source };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    write!(f, "P5\n{width} {height}\n255\n").map_err(io)?;
    f.write_all(pixels).map_err(io)?;
    f.flush().map_err(io)
}
