//! Hand-off to human review and the way back.
//!
//! A bundle is a directory with `manifest`, `report`, `frames/` (the
//! rasters) and `annotations/` (`instances`, one `NNNNNN.ann` per frame and
//! `revisions.log` once edits exist).

use std::fs;
use std::path::{Path, PathBuf};

use crate::annotation::{replay, Status, VideoAnnotation};
use crate::store::{format, Batch, Store, StoreError};

use super::ingest::raster_dir;
use super::{PipelineError, Result};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

fn copy(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to).map_err(io(from))?;
    Ok(())
}

/// Writes the review bundle of a refined video into `out`, which must not
/// exist or be empty.
pub fn export_review(store: &Store, video_id: &str, out: &Path) -> Result<PathBuf> {
    let manifest = store.manifest(video_id)?;
    if manifest.status < Status::Refined {
        return Err(PipelineError::Status { video: video_id.into(), status: manifest.status.as_str(), expected: "refined" });
    }
    if store.report(video_id)?.is_none() {
        return Err(PipelineError::Review(format!("video {video_id:?} has no checker report")));
    }
    if out.exists() && fs::read_dir(out).map_err(io(out))?.next().is_some() {
        return Err(PipelineError::Review(format!("{} is not empty", out.display())));
    }
    let src = store.video_dir(video_id);
    let ann = out.join("annotations");
    let frames = out.join("frames");
    fs::create_dir_all(&ann).map_err(io(&ann))?;
    fs::create_dir_all(&frames).map_err(io(&frames))?;
    copy(&src.join("manifest"), &out.join("manifest"))?;
    copy(&src.join("report"), &out.join("report"))?;
    copy(&src.join("instances"), &ann.join("instances"))?;
    if src.join("revisions.log").is_file() {
        copy(&src.join("revisions.log"), &ann.join("revisions.log"))?;
    }
    let rasters = raster_dir(store, video_id);
    for i in 0..manifest.frame_count {
        let name = format!("{i:06}");
        copy(&src.join(crate::store::frame_file(i)), &ann.join(format!("{name}.ann")))?;
        let raster = rasters.join(format!("{name}.{}", manifest.raster));
        if raster.is_file() {
            copy(&raster, &frames.join(format!("{name}.{}", manifest.raster)))?;
        }
    }
    Ok(out.to_path_buf())
}

/// Applies a reviewed revision log and marks the video final. `log` is a
/// `revisions.log` file or a bundle directory holding one. Revisions the
/// store already has must form a prefix of the log; every edit is checked
/// before anything is written.
pub fn import_revisions(store: &Store, video_id: &str, log: &Path) -> Result<VideoAnnotation> {
    let path = if log.is_dir() { log.join("annotations").join("revisions.log") } else { log.to_path_buf() };
    let revs = match fs::read_to_string(&path) {
        Ok(text) => format::parse_revisions(&text)
            .map_err(|e| PipelineError::Review(format!("{}:{}: {}", path.display(), e.line, e.message)))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && log.is_dir() => Vec::new(),
        Err(e) => return Err(io(&path)(e)),
    };
    let _lock = store.lock_writer(video_id)?;
    let mut manifest = store.manifest(video_id)?;
    if !matches!(manifest.status, Status::Refined | Status::Reviewed) {
        return Err(PipelineError::Status { video: video_id.into(), status: manifest.status.as_str(), expected: "refined or reviewed" });
    }
    for (i, r) in revs.iter().enumerate() {
        let expected = i as u64 + 1;
        if r.seq != expected {
            return Err(StoreError::StaleSequence { expected, found: r.seq }.into());
        }
    }
    let existing = store.revisions(video_id)?;
    if existing.len() > revs.len() || existing[..] != revs[..existing.len()] {
        return Err(PipelineError::Review("log does not extend the revisions already stored".into()));
    }
    let base = store.load_video(video_id)?;
    replay(&base, &revs, 1).map_err(|(seq, error)| StoreError::Revision { seq, error })?;
    manifest.status = Status::Final;
    store.commit(video_id, Batch { manifest: Some(manifest), revisions: Some(revs), ..Batch::default() })?;
    Ok(store.load_current(video_id)?)
}
