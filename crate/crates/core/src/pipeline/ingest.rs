//! Admission of source videos into the store.
//!
//! A source is a directory holding either `scene.toml` (a synthetic scene,
//! rendered on ingest) or pre-extracted rasters: a `meta` file with an
//! `fps <rate>` line plus `000000.pgm`, `000001.pgm`, ... (any one of
//! pbm/pgm/ppm). Accepted frames land in `<store>/frames/<video>/`.

use std::path::{Path, PathBuf};

use crate::annotation::Status;
use crate::mask::GridDims;
use crate::raster::{read_header, PnmKind};
use crate::scene::Scene;
use crate::store::{Manifest, Store, StoreError};

use super::{IngestConfig, PipelineError, Result};

/// Reserved name: the raster tree lives beside the video directories.
pub const FRAMES_DIR: &str = "frames";

pub fn raster_dir(store: &Store, video_id: &str) -> PathBuf {
    store.root().join(FRAMES_DIR).join(video_id)
}

pub fn raster_path(store: &Store, manifest: &Manifest, index: usize) -> PathBuf {
    raster_dir(store, &manifest.video_id).join(format!("{index:06}.{}", manifest.raster))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub manifest: Manifest,
    /// Frames in the source before truncation.
    pub source_frames: usize,
}

impl IngestOutcome {
    pub fn truncated(&self) -> bool {
        self.manifest.frame_count < self.source_frames
    }
}

enum Source {
    Scene(Scene),
    Rasters { kind: PnmKind, files: Vec<PathBuf>, fps: f64, dims: (u32, u32) },
}

fn bad(msg: impl Into<String>) -> PipelineError {
    PipelineError::Ingest(msg.into())
}

fn read_fps(dir: &Path) -> Result<f64> {
    let path = dir.join("meta");
    let text = std::fs::read_to_string(&path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    let fps = text
        .lines()
        .find_map(|l| l.trim().strip_prefix("fps "))
        .ok_or_else(|| bad(format!("{}: no fps line", path.display())))?;
    let fps: f64 = fps.trim().parse().map_err(|_| bad(format!("{}: bad frame rate {fps:?}", path.display())))?;
    if !(fps.is_finite() && fps > 0.0) {
        return Err(bad(format!("{}: frame rate must be positive", path.display())));
    }
    Ok(fps)
}

fn scan(dir: &Path) -> Result<Source> {
    let scene_path = dir.join("scene.toml");
    if scene_path.is_file() {
        let scene = Scene::load(&scene_path).map_err(|e| bad(format!("{}: {e}", scene_path.display())))?;
        return Ok(Source::Scene(scene));
    }
    let fps = read_fps(dir)?;
    let kind = [PnmKind::Gray, PnmKind::Color, PnmKind::Bitmap]
        .into_iter()
        .find(|k| dir.join(format!("000000.{}", k.extension())).is_file())
        .ok_or_else(|| bad(format!("{}: no frame 000000.pbm/pgm/ppm", dir.display())))?;
    let mut files = Vec::new();
    loop {
        let p = dir.join(format!("{:06}.{}", files.len(), kind.extension()));
        if !p.is_file() {
            break;
        }
        files.push(p);
    }
    let first = read_header(&files[0])?;
    Ok(Source::Rasters { kind, files, fps, dims: (first.width, first.height) })
}

/// Checks `source` against the admission rules and registers it as
/// `video_id`: too-short videos and wrong frame sizes are rejected, long
/// ones are cut at the maximum duration.
pub fn ingest_video(store: &Store, source: &Path, video_id: &str, cfg: &IngestConfig) -> Result<IngestOutcome> {
    if video_id == FRAMES_DIR {
        return Err(StoreError::BadVideoId(video_id.into()).into());
    }
    if store.video_dir(video_id).join("manifest").exists() {
        return Err(StoreError::Exists(video_id.into()).into());
    }
    let src = scan(source)?;
    let (width, height, fps, total) = match &src {
        Source::Scene(s) => (s.width, s.height, s.fps, s.frames),
        Source::Rasters { files, fps, dims, .. } => (dims.0, dims.1, *fps, files.len()),
    };
    if (width, height) != (cfg.width, cfg.height) {
        return Err(bad(format!("frames are {width}x{height}, expected {}x{}", cfg.width, cfg.height)));
    }
    let seconds = total as f64 / fps;
    if seconds < cfg.min_seconds {
        return Err(bad(format!("{seconds} s is shorter than the minimum of {} s", cfg.min_seconds)));
    }
    let keep = total.min((cfg.max_seconds * fps + 1e-9).floor() as usize);

    let out = raster_dir(store, video_id);
    if out.exists() {
        std::fs::remove_dir_all(&out).map_err(|e| bad(format!("{}: {e}", out.display())))?;
    }
    std::fs::create_dir_all(&out).map_err(|e| bad(format!("{}: {e}", out.display())))?;
    let ext = match &src {
        Source::Scene(scene) => {
            for f in 0..keep {
                crate::raster::write_pgm(&out.join(format!("{f:06}.pgm")), width, height, &scene.render(f))?;
            }
            PnmKind::Gray.extension()
        }
        Source::Rasters { kind, files, .. } => {
            for (i, p) in files.iter().take(keep).enumerate() {
                let info = read_header(p)?;
                if (info.width, info.height) != (width, height) || info.kind != *kind {
                    return Err(bad(format!("{}: frame differs from frame 0 in size or format", p.display())));
                }
                let dest = out.join(format!("{i:06}.{}", kind.extension()));
                std::fs::copy(p, &dest).map_err(|e| bad(format!("{}: {e}", dest.display())))?;
            }
            kind.extension()
        }
    };

    let manifest = Manifest {
        video_id: video_id.into(),
        dims: GridDims::erp(width, height)?,
        frame_count: keep,
        fps,
        raster: ext.into(),
        config_digest: None,
        status: Status::Initial,
        progress: 0,
    };
    store.create_video(&manifest)?;
    Ok(IngestOutcome { manifest, source_frames: total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(frames: usize, fps: f64, w: u32, h: u32) -> String {
        format!(
            "width = {w}\nheight = {h}\nframes = {frames}\nfps = {fps}\n\n[[object]]\nid = 1\nkind = \"stuff\"\nshape = \"rect\"\ntop = 0\nleft = 0\nrows = {h}\ncols = {w}\nlabels = {{ demo = \"sky\" }}\n"
        )
    }

    fn source(text: &str) -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("scene.toml"), text).unwrap();
        d
    }

    fn small() -> IngestConfig {
        IngestConfig { width: 16, height: 8, ..IngestConfig::default() }
    }

    #[test]
    fn duration_rules() {
        let root = tempfile::tempdir().unwrap();
        let store = Store::open(root.path()).unwrap();
        let short = source(&scene(8, 2.0, 16, 8));
        assert!(matches!(ingest_video(&store, short.path(), "short", &small()), Err(PipelineError::Ingest(_))));
        let long = source(&scene(90, 2.0, 16, 8));
        let out = ingest_video(&store, long.path(), "long", &small()).unwrap();
        assert_eq!((out.manifest.frame_count, out.source_frames), (60, 90));
        assert!(out.truncated());
        assert!(raster_path(&store, &out.manifest, 59).is_file());
        assert!(!raster_path(&store, &out.manifest, 60).exists());
        let exact = source(&scene(10, 2.0, 16, 8));
        assert_eq!(ingest_video(&store, exact.path(), "edge", &small()).unwrap().manifest.frame_count, 10);
        assert!(ingest_video(&store, exact.path(), "edge", &small()).is_err());
        assert!(ingest_video(&store, exact.path(), FRAMES_DIR, &small()).is_err());
    }

    #[test]
    fn wrong_dims() {
        let root = tempfile::tempdir().unwrap();
        let store = Store::open(root.path()).unwrap();
        let src = source(&scene(12, 2.0, 32, 8));
        let err = ingest_video(&store, src.path(), "v", &small()).unwrap_err();
        assert!(err.to_string().contains("32x8"), "{err}");
        assert!(store.list_videos().unwrap().is_empty());
    }

    #[test]
    fn raster_source() {
        let root = tempfile::tempdir().unwrap();
        let store = Store::open(root.path()).unwrap();
        let src = tempfile::tempdir().unwrap();
        Scene::parse(&scene(11, 2.0, 16, 8)).unwrap().write_source(src.path()).unwrap();
        let out = ingest_video(&store, src.path(), "r", &small()).unwrap();
        assert_eq!(out.manifest.frame_count, 11);
        assert_eq!(out.manifest.raster, "pgm");
        assert_eq!(store.manifest("r").unwrap(), out.manifest);
        std::fs::remove_file(src.path().join("meta")).unwrap();
        assert!(ingest_video(&store, src.path(), "r2", &small()).is_err());
    }
}
