//! Durable per-video annotation store.
//!
//! Layout under the root, one directory per video:
//!
//! ```text
//! <video>/manifest
//! <video>/instances
//! <video>/frames/NNNNNN.ann
//! <video>/provenance/NNNNNN.prov
//! <video>/report
//! <video>/revisions.log
//! <video>/queue.log
//! ```
//!
//! Every mutation goes through a journaled batch: the complete set of new
//! file contents is written to `.journal.tmp`, renamed to `journal`, then
//! applied file by file with temp-and-rename and finally removed. A crash
//! before the journal rename leaves the previous state; a crash after it is
//! completed on the next open.

pub mod format;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::{replay, EditError, FrameAnnotation, InstanceId, InstanceInfo, ReviewReport, Revision, Status, VideoAnnotation};
use crate::textio::{is_identifier, LineError};
pub use format::{Escalation, FrameProvenance, Manifest};

const JOURNAL: &str = "journal";
const JOURNAL_TMP: &str = ".journal.tmp";
const WRITER_LOCK: &str = "lock";
const COMMIT_LOCK: &str = "commit.lock";
/// Files outside the canonical content: locks and the operator run log.
const UNHASHED: [&str; 3] = [WRITER_LOCK, COMMIT_LOCK, "run.log"];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("video {0:?} not found")]
    NotFound(String),
    #[error("video {0:?} already exists")]
    Exists(String),
    #[error("invalid video id {0:?}")]
    BadVideoId(String),
    #[error("{path}:{}: {}", .error.line, .error.message)]
    Parse { path: String, error: LineError },
    #[error("frame {0}: annotation file missing")]
    MissingFrame(usize),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("revision {seq}: {error}")]
    Revision { seq: u64, error: EditError },
    #[error("revision sequence {found} does not follow {expected}")]
    StaleSequence { expected: u64, found: u64 },
    #[error("status {from} cannot move to {to}")]
    Status { from: &'static str, to: &'static str },
    #[error("video {0:?} is locked by another writer")]
    Locked(String),
    #[error("injected fault: {0:?}")]
    Injected(FaultPoint),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

/// Crash points for fault-injection tests. The next commit stops at the
/// armed point and returns [`StoreError::Injected`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    /// Journal fully written, not yet renamed into place.
    BeforeJournalRename,
    /// Journal in place, no file applied yet.
    AfterJournalRename,
    /// First file written to its temp name, not yet renamed.
    MidApply,
}

/// New contents for a set of store files, committed atomically.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub manifest: Option<Manifest>,
    pub instances: Option<BTreeMap<InstanceId, InstanceInfo>>,
    pub frames: BTreeMap<usize, FrameAnnotation>,
    pub provenance: BTreeMap<usize, FrameProvenance>,
    pub report: Option<ReviewReport>,
    pub revisions: Option<Vec<Revision>>,
    pub queue: Option<Vec<Escalation>>,
}

impl Batch {
    pub fn is_empty(&self) -> bool {
        self.manifest.is_none()
            && self.instances.is_none()
            && self.frames.is_empty()
            && self.provenance.is_empty()
            && self.report.is_none()
            && self.revisions.is_none()
            && self.queue.is_none()
    }
}

/// Exclusive writer lock on one video, released on drop.
#[derive(Debug)]
pub struct WriterLock {
    _file: File,
}

pub struct Store {
    root: PathBuf,
    fault: Mutex<Option<FaultPoint>>,
}

pub fn frame_file(index: usize) -> String {
    format!("frames/{index:06}.ann")
}

pub fn provenance_file(index: usize) -> String {
    format!("provenance/{index:06}.prov")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    let dir = path.parent().expect("store paths have a parent");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = dir.join(format!(".{}.tmp", path.file_name().unwrap().to_string_lossy()));
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    Ok(tmp)
}

fn read_text(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(StoreError::Io { path: path.display().to_string(), source: e }),
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root, fault: Mutex::new(None) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn video_dir(&self, video_id: &str) -> PathBuf {
        self.root.join(video_id)
    }

    pub fn inject_fault(&self, point: Option<FaultPoint>) {
        *self.fault.lock().unwrap() = point;
    }

    fn take_fault(&self, point: FaultPoint) -> Result<()> {
        let mut f = self.fault.lock().unwrap();
        if *f == Some(point) {
            *f = None;
            return Err(StoreError::Injected(point));
        }
        Ok(())
    }

    fn checked_dir(&self, video_id: &str) -> Result<PathBuf> {
        if !is_identifier(video_id) {
            return Err(StoreError::BadVideoId(video_id.to_string()));
        }
        let dir = self.video_dir(video_id);
        if !dir.join("manifest").is_file() && !dir.join(JOURNAL).is_file() {
            return Err(StoreError::NotFound(video_id.to_string()));
        }
        Ok(dir)
    }

    /// Ids of every video with a manifest, sorted.
    pub fn list_videos(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if is_identifier(&name) && entry.path().join("manifest").is_file() {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Registers a new video with empty frames.
    pub fn create_video(&self, manifest: &Manifest) -> Result<()> {
        if !is_identifier(&manifest.video_id) {
            return Err(StoreError::BadVideoId(manifest.video_id.clone()));
        }
        let dir = self.video_dir(&manifest.video_id);
        if dir.join("manifest").exists() {
            return Err(StoreError::Exists(manifest.video_id.clone()));
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut batch = Batch { manifest: Some(manifest.clone()), instances: Some(BTreeMap::new()), ..Batch::default() };
        for i in 0..manifest.frame_count {
            batch.frames.insert(i, FrameAnnotation::new(i));
        }
        self.commit(&manifest.video_id, batch)
    }

    /// Takes the single-writer lock, failing fast if another process holds it.
    pub fn lock_writer(&self, video_id: &str) -> Result<WriterLock> {
        let dir = self.checked_dir(video_id)?;
        let path = dir.join(WRITER_LOCK);
        let file = File::options().create(true).truncate(false).write(true).open(&path).map_err(io_err(&path))?;
        match file.try_lock() {
            Ok(()) => Ok(WriterLock { _file: file }),
            Err(fs::TryLockError::WouldBlock) => Err(StoreError::Locked(video_id.to_string())),
            Err(fs::TryLockError::Error(e)) => Err(StoreError::Io { path: path.display().to_string(), source: e }),
        }
    }

    fn commit_lock(&self, dir: &Path, exclusive: bool) -> Result<File> {
        let path = dir.join(COMMIT_LOCK);
        let file = File::options().create(true).truncate(false).write(true).open(&path).map_err(io_err(&path))?;
        if exclusive { file.lock() } else { file.lock_shared() }.map_err(io_err(&path))?;
        Ok(file)
    }

    /// Finishes an interrupted commit, if any. Caller holds the commit lock.
    fn recover(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(JOURNAL_TMP);
        if tmp.exists() {
            fs::remove_file(&tmp).map_err(io_err(&tmp))?;
        }
        let journal = dir.join(JOURNAL);
        if let Some(bytes) = fs::read(&journal).ok() {
            let files = decode_journal(&bytes).ok_or_else(|| StoreError::Invariant("corrupt journal".into()))?;
            self.apply_files(dir, &files, false)?;
            fs::remove_file(&journal).map_err(io_err(&journal))?;
        }
        Ok(())
    }

    fn apply_files(&self, dir: &Path, files: &[(String, Vec<u8>)], faults: bool) -> Result<()> {
        for (i, (rel, bytes)) in files.iter().enumerate() {
            let path = dir.join(rel);
            let tmp = write_atomic(&path, bytes)?;
            if faults && i == 0 {
                self.take_fault(FaultPoint::MidApply)?;
            }
            fs::rename(&tmp, &path).map_err(io_err(&path))?;
        }
        Ok(())
    }

    /// Validates `batch` against the stored state and commits it atomically.
    pub fn commit(&self, video_id: &str, batch: Batch) -> Result<()> {
        let dir = self.checked_dir(video_id).or_else(|e| match e {
            StoreError::NotFound(_) if batch.manifest.is_some() => Ok(self.video_dir(video_id)),
            e => Err(e),
        })?;
        let _guard = self.commit_lock(&dir, true)?;
        self.recover(&dir)?;
        self.commit_in(&dir, video_id, batch)
    }

    /// Body of [`Store::commit`]; the caller holds the exclusive commit lock.
    fn commit_in(&self, dir: &Path, video_id: &str, mut batch: Batch) -> Result<()> {
        let dir = dir.to_path_buf();
        let manifest = match &batch.manifest {
            Some(m) => m.clone(),
            None => self.read_manifest(&dir)?,
        };
        if manifest.video_id != video_id {
            return Err(StoreError::Invariant(format!("manifest names video {:?}", manifest.video_id)));
        }
        let registry = match &batch.instances {
            Some(r) => r.clone(),
            None => self.read_instances(&dir)?,
        };
        for (&i, f) in &batch.frames {
            if i >= manifest.frame_count || f.frame_index != i {
                return Err(StoreError::Invariant(format!("frame {i} outside the video")));
            }
            f.validate(manifest.dims).map_err(|e| StoreError::Invariant(e.to_string()))?;
            if let Some(e) = f.entries().iter().find(|e| !registry.contains_key(&e.instance_id)) {
                return Err(StoreError::Invariant(format!("frame {i}: instance {} not registered", e.instance_id)));
            }
        }
        if let Some(r) = &batch.report {
            format::parse_report(&format::write_report(r)).map_err(|e| StoreError::Invariant(format!("report: {}", e.message)))?;
        }

        // overwriting a frame with different content leaves a note in its lineage
        for (&i, f) in &batch.frames {
            let new = format::write_frame(f, manifest.dims);
            let Some(old) = read_text(&dir.join(frame_file(i)))? else { continue };
            if old == new {
                continue;
            }
            if !batch.provenance.contains_key(&i) {
                let existing = self.read_provenance(&dir, i)?.unwrap_or(FrameProvenance { frame_index: i, ..Default::default() });
                batch.provenance.insert(i, existing);
            }
            let note = format!("overwrote {}", &hex::encode(Sha256::digest(old.as_bytes()))[..16]);
            batch.provenance.get_mut(&i).unwrap().records.push(note);
        }

        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        if let Some(m) = &batch.manifest {
            files.push(("manifest".into(), format::write_manifest(m).into_bytes()));
        }
        if let Some(r) = &batch.instances {
            files.push(("instances".into(), format::write_instances(r).into_bytes()));
        }
        for (&i, f) in &batch.frames {
            files.push((frame_file(i), format::write_frame(f, manifest.dims).into_bytes()));
        }
        for (&i, p) in &batch.provenance {
            files.push((provenance_file(i), format::write_provenance(p).into_bytes()));
        }
        if let Some(r) = &batch.report {
            files.push(("report".into(), format::write_report(r).into_bytes()));
        }
        if let Some(r) = &batch.revisions {
            files.push(("revisions.log".into(), format::write_revisions(r).into_bytes()));
        }
        if let Some(q) = &batch.queue {
            files.push(("queue.log".into(), format::write_queue(q).into_bytes()));
        }
        // the manifest goes last so a reader never sees it ahead of its data
        files.rotate_left(usize::from(batch.manifest.is_some()));

        let tmp = dir.join(JOURNAL_TMP);
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&encode_journal(&files)).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        drop(f);
        self.take_fault(FaultPoint::BeforeJournalRename)?;
        let journal = dir.join(JOURNAL);
        fs::rename(&tmp, &journal).map_err(io_err(&journal))?;
        self.take_fault(FaultPoint::AfterJournalRename)?;
        self.apply_files(&dir, &files, true)?;
        fs::remove_file(&journal).map_err(io_err(&journal))?;
        Ok(())
    }

    /// Commits one frame together with its gate record.
    pub fn commit_frame(&self, video_id: &str, frame: &FrameAnnotation, provenance: &FrameProvenance) -> Result<()> {
        let mut batch = Batch::default();
        batch.frames.insert(frame.frame_index, frame.clone());
        batch.provenance.insert(frame.frame_index, provenance.clone());
        self.commit(video_id, batch)
    }

    fn parse<T>(&self, path: &Path, text: &str, f: impl FnOnce(&str) -> std::result::Result<T, LineError>) -> Result<T> {
        f(text).map_err(|error| StoreError::Parse { path: path.display().to_string(), error })
    }

    fn read_manifest(&self, dir: &Path) -> Result<Manifest> {
        let path = dir.join("manifest");
        let text = read_text(&path)?.ok_or_else(|| StoreError::NotFound(dir.display().to_string()))?;
        self.parse(&path, &text, format::parse_manifest)
    }

    fn read_instances(&self, dir: &Path) -> Result<BTreeMap<InstanceId, InstanceInfo>> {
        let path = dir.join("instances");
        match read_text(&path)? {
            Some(text) => self.parse(&path, &text, format::parse_instances),
            None => Ok(BTreeMap::new()),
        }
    }

    fn read_provenance(&self, dir: &Path, i: usize) -> Result<Option<FrameProvenance>> {
        let path = dir.join(provenance_file(i));
        match read_text(&path)? {
            Some(text) => self.parse(&path, &text, format::parse_provenance).map(Some),
            None => Ok(None),
        }
    }

    /// Runs `f` under the shared commit lock after finishing any interrupted
    /// commit, so it observes exactly one committed state.
    fn snapshot<T>(&self, video_id: &str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
        let dir = self.checked_dir(video_id)?;
        if dir.join(JOURNAL).exists() || dir.join(JOURNAL_TMP).exists() {
            let _g = self.commit_lock(&dir, true)?;
            self.recover(&dir)?;
        }
        let _g = self.commit_lock(&dir, false)?;
        f(&dir)
    }

    pub fn manifest(&self, video_id: &str) -> Result<Manifest> {
        self.snapshot(video_id, |dir| self.read_manifest(dir))
    }

    /// Loads the committed annotation (Y_ref once refined) and validates it.
    pub fn load_video(&self, video_id: &str) -> Result<VideoAnnotation> {
        self.snapshot(video_id, |dir| self.load_in(dir))
    }

    fn load_in(&self, dir: &Path) -> Result<VideoAnnotation> {
        let manifest = self.read_manifest(dir)?;
        let mut video = VideoAnnotation::new(manifest.video_id.clone(), manifest.dims, 0);
        video.status = manifest.status;
        video.instances = self.read_instances(dir)?;
        for i in 0..manifest.frame_count {
            let path = dir.join(frame_file(i));
            let text = read_text(&path)?.ok_or(StoreError::MissingFrame(i))?;
            let (frame, dims) = self.parse(&path, &text, format::parse_frame)?;
            if dims != manifest.dims || frame.frame_index != i {
                return Err(StoreError::Invariant(format!("{}: header disagrees with manifest", path.display())));
            }
            video.frames.push(frame);
            if let Some(p) = self.read_provenance(dir, i)? {
                if let Some(phase) = p.phase {
                    video.phase_log.insert(i, phase);
                }
            }
        }
        video.validate().map_err(|e| StoreError::Invariant(e.to_string()))?;
        Ok(video)
    }

    pub fn provenance(&self, video_id: &str, frame: usize) -> Result<Option<FrameProvenance>> {
        self.snapshot(video_id, |dir| self.read_provenance(dir, frame))
    }

    pub fn revisions(&self, video_id: &str) -> Result<Vec<Revision>> {
        self.snapshot(video_id, |dir| self.read_revisions(dir))
    }

    fn read_revisions(&self, dir: &Path) -> Result<Vec<Revision>> {
        let path = dir.join("revisions.log");
        match read_text(&path)? {
            Some(text) => self.parse(&path, &text, format::parse_revisions),
            None => Ok(Vec::new()),
        }
    }

    pub fn report(&self, video_id: &str) -> Result<Option<ReviewReport>> {
        self.snapshot(video_id, |dir| {
            let path = dir.join("report");
            match read_text(&path)? {
                Some(text) => self.parse(&path, &text, format::parse_report).map(Some),
                None => Ok(None),
            }
        })
    }

    pub fn queue(&self, video_id: &str) -> Result<Vec<Escalation>> {
        self.snapshot(video_id, |dir| {
            let path = dir.join("queue.log");
            match read_text(&path)? {
                Some(text) => self.parse(&path, &text, format::parse_queue),
                None => Ok(Vec::new()),
            }
        })
    }

    /// Current state: the revision log replayed over the committed frames.
    pub fn load_current(&self, video_id: &str) -> Result<VideoAnnotation> {
        self.load_current_with_log(video_id).map(|(v, _)| v)
    }

    /// Current state together with the log it was replayed from, both from
    /// one snapshot.
    pub fn load_current_with_log(&self, video_id: &str) -> Result<(VideoAnnotation, Vec<Revision>)> {
        self.snapshot(video_id, |dir| {
            let base = self.load_in(dir)?;
            let revs = self.read_revisions(dir)?;
            let current = replay(&base, &revs, 1).map_err(|(seq, error)| StoreError::Revision { seq, error })?;
            Ok((current, revs))
        })
    }

    /// Appends one edit; the first one moves a refined video to reviewed.
    /// Re-posting the latest revision verbatim is accepted as a no-op so
    /// clients can retry safely.
    pub fn append_revision(&self, video_id: &str, rev: &Revision) -> Result<u64> {
        let dir = self.checked_dir(video_id)?;
        let _g = self.commit_lock(&dir, true)?;
        self.recover(&dir)?;
        let mut manifest = self.read_manifest(&dir)?;
        let mut revs = self.read_revisions(&dir)?;
        if !matches!(manifest.status, Status::Refined | Status::Reviewed) {
            return Err(StoreError::Status { from: manifest.status.as_str(), to: "reviewed" });
        }
        let expected = revs.last().map_or(1, |r| r.seq + 1);
        if rev.seq + 1 == expected && revs.last() == Some(rev) {
            return Ok(rev.seq);
        }
        if rev.seq != expected {
            return Err(StoreError::StaleSequence { expected, found: rev.seq });
        }
        revs.push(rev.clone());
        let base = self.load_in(&dir)?;
        replay(&base, &revs, 1).map_err(|(seq, error)| StoreError::Revision { seq, error })?;
        let mut batch = Batch { revisions: Some(revs), ..Batch::default() };
        if manifest.status == Status::Refined {
            manifest.status = Status::Reviewed;
            batch.manifest = Some(manifest);
        }
        self.commit_in(&dir, video_id, batch)?;
        Ok(rev.seq)
    }

    /// Moves the status forward; moving backwards is an error.
    pub fn set_status(&self, video_id: &str, status: Status) -> Result<()> {
        let mut m = self.manifest(video_id)?;
        if status < m.status {
            return Err(StoreError::Status { from: m.status.as_str(), to: status.as_str() });
        }
        m.status = status;
        self.commit(video_id, Batch { manifest: Some(m), ..Batch::default() })
    }

    /// SHA-256 over every content file, in path order. Locks, temp files
    /// and the run log are excluded.
    pub fn digest(&self, video_id: &str) -> Result<String> {
        self.snapshot(video_id, |dir| {
            let mut files = Vec::new();
            collect_files(dir, dir, &mut files)?;
            files.sort();
            let mut h = Sha256::new();
            for rel in files {
                let bytes = fs::read(dir.join(&rel)).map_err(io_err(&dir.join(&rel)))?;
                h.update(format!("{rel}\n{}\n", bytes.len()).as_bytes());
                h.update(&bytes);
            }
            Ok(hex::encode(h.finalize()))
        })
    }
}

fn collect_files(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || name == JOURNAL {
            continue;
        }
        let path = entry.path();
        if path.is_dir() {
            collect_files(base, &path, out)?;
        } else {
            let rel = path.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/");
            if !UNHASHED.contains(&rel.as_str()) {
                out.push(rel);
            }
        }
    }
    Ok(())
}

fn encode_journal(files: &[(String, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (rel, bytes) in files {
        out.extend_from_slice(format!("file {} {}\n", bytes.len(), rel).as_bytes());
        out.extend_from_slice(bytes);
    }
    out.extend_from_slice(b"end\n");
    out
}

fn decode_journal(mut bytes: &[u8]) -> Option<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    loop {
        let nl = bytes.iter().position(|&b| b == b'\n')?;
        let line = std::str::from_utf8(&bytes[..nl]).ok()?;
        bytes = &bytes[nl + 1..];
        if line == "end" {
            return bytes.is_empty().then_some(out);
        }
        let rest = line.strip_prefix("file ")?;
        let (len, rel) = rest.split_once(' ')?;
        let len: usize = len.parse().ok()?;
        if bytes.len() < len || rel.split('/').any(|p| p.is_empty() || p == "..") {
            return None;
        }
        out.push((rel.to_string(), bytes[..len].to_vec()));
        bytes = &bytes[len..];
    }
}
