//! Per-video orchestration: ingestion, the initial pass on the first frame,
//! the coverage-gated repair loop over the remaining frames and the review
//! round trip.

pub mod config;
pub mod ingest;
pub mod mcr;
pub mod review;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::agents::{AgentError, Agents, Prompts, Taxonomy};
use crate::annotation::{Entry, FrameAnnotation, GateDecision, InstanceId, PhaseLogEntry, Provenance, Status, VideoAnnotation};
use crate::backend::{BackendError, Gateway, Role, TrackRequest};
use crate::geometry::GeometryError;
use crate::mask::{coverage_rate, GridDims, MaskError};
use crate::raster::RasterError;
use crate::sdr::{run_sdr, SdrContext, SdrError, SdrOutput};
use crate::store::{Batch, Escalation, FrameProvenance, Store, StoreError};

pub use config::{Config, IngestConfig, PipelineConfig};
pub use ingest::{ingest_video, IngestOutcome};
pub use mcr::{auto_refine_frame, FrameRepair};
pub use review::{export_review, import_revisions};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Sdr(#[from] SdrError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("ingest: {0}")]
    Ingest(String),
    #[error("config: {0}")]
    Config(String),
    #[error("video {0:?} was started with a different configuration")]
    ConfigMismatch(String),
    #[error("video {video:?} has status {status}, expected {expected}")]
    Status { video: String, status: &'static str, expected: &'static str },
    #[error("review: {0}")]
    Review(String),
    #[error("halted after frame {next_frame} of video {video:?}")]
    Halted { video: String, next_frame: usize },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PipelineError {
    /// Errors worth retrying: the backend may answer next time.
    pub fn is_transient(&self) -> bool {
        let b = match self {
            PipelineError::Backend(b) => b,
            PipelineError::Agent(AgentError::Backend(b)) => b,
            PipelineError::Sdr(SdrError::Backend(b)) => b,
            PipelineError::Sdr(SdrError::Agent(AgentError::Backend(b))) => b,
            _ => return false,
        };
        matches!(b, BackendError::Unreachable { .. } | BackendError::Timeout { .. })
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Backends, taxonomy, prompts and settings bound together for a run.
pub struct Engine {
    pub config: PipelineConfig,
    /// Identifies the configuration in manifests; resuming requires a match.
    pub digest: String,
    pub gateway: Gateway,
    pub taxonomy: Taxonomy,
    pub prompts: Prompts,
    entity: String,
    tracker: String,
    chat: String,
    panoptic: Vec<String>,
}

fn pick(gateway: &Gateway, role: Role, wanted: &Option<String>) -> Result<String> {
    let ids = gateway.ids(role);
    match wanted {
        Some(w) if ids.contains(w) => Ok(w.clone()),
        Some(w) => Err(PipelineError::Config(format!("no {} backend named {w:?}", role.as_str()))),
        None => ids.into_iter().next().ok_or_else(|| PipelineError::Config(format!("no {} backend registered", role.as_str()))),
    }
}

impl Engine {
    pub fn new(config: PipelineConfig, digest: String, gateway: Gateway, taxonomy: Taxonomy, prompts: Prompts) -> Result<Self> {
        config.validate().map_err(PipelineError::Config)?;
        let entity = pick(&gateway, Role::Entity, &config.entity)?;
        let tracker = pick(&gateway, Role::Tracker, &config.tracker)?;
        let chat = pick(&gateway, Role::Chat, &config.chat)?;
        let panoptic = gateway.ids(Role::Panoptic);
        if panoptic.is_empty() {
            return Err(PipelineError::Config("no panoptic backend registered".into()));
        }
        Ok(Self { config, digest, gateway, taxonomy, prompts, entity, tracker, chat, panoptic })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let gateway = Gateway::from_configs(&cfg.backend, &cfg.base_dir)?;
        let taxonomy = Taxonomy::load(&cfg.resolve(&cfg.taxonomy)).map_err(PipelineError::Config)?;
        let prompts = match &cfg.prompts {
            Some(p) => {
                let dir = cfg.resolve(p);
                Prompts::load_dir(&dir).map_err(|e| PipelineError::Config(format!("{}: {e}", dir.display())))?
            }
            None => Prompts::embedded(),
        };
        let digest = cfg.digest().map_err(PipelineError::Config)?;
        Self::new(cfg.pipeline.clone(), digest, gateway, taxonomy, prompts)
    }

    pub fn agents(&self) -> Agents<'_> {
        Agents {
            gateway: &self.gateway,
            chat: &self.chat,
            taxonomy: &self.taxonomy,
            prompts: &self.prompts,
            settings: self.config.agent_settings(),
        }
    }

    pub fn entity_backend(&self) -> &str {
        &self.entity
    }

    pub fn tracker_backend(&self) -> &str {
        &self.tracker
    }

    /// Runs SDR on one frame, whole or restricted to `region`.
    pub fn sdr(
        &self,
        video_id: &str,
        frame_index: usize,
        dims: GridDims,
        first_id: InstanceId,
        region: Option<&crate::mask::Mask>,
    ) -> Result<SdrOutput> {
        let agents = self.agents();
        let settings = self.config.sdr_settings(dims);
        let ctx = SdrContext {
            gateway: &self.gateway,
            entity: &self.entity,
            panoptic: &self.panoptic,
            tracker: &self.tracker,
            agents: &agents,
            settings: &settings,
        };
        Ok(run_sdr(&ctx, video_id, frame_index, dims, first_id, region)?)
    }

    /// Coverage of `frame` as seen by the gate; stuff classes are left out
    /// when the config says so.
    pub fn coverage(&self, frame: &FrameAnnotation, dims: GridDims) -> f64 {
        let counted = frame
            .entries()
            .iter()
            .filter(|e| self.config.count_stuff_toward_coverage || !self.taxonomy.is_stuff(&e.label))
            .map(|e| &e.mask);
        coverage_rate(counted, dims).unwrap_or(0.0)
    }

    fn horizon(&self, from: usize, frame_count: usize) -> usize {
        let rest = frame_count - from;
        self.config.tracker_horizon.map_or(rest, |h| h.min(rest))
    }

    /// Propagates the masks of `ids` at frame `t` forward. Only entries
    /// that are absent or themselves tracked are overwritten. Returns the
    /// frames that changed.
    pub fn retrack(&self, video: &mut VideoAnnotation, t: usize, ids: &[InstanceId]) -> Result<BTreeSet<usize>> {
        let n = video.frame_count();
        let horizon = self.horizon(t, n);
        let mut changed = BTreeSet::new();
        if horizon <= 1 || ids.is_empty() {
            return Ok(changed);
        }
        let prompts: Vec<(InstanceId, Entry)> =
            ids.iter().filter_map(|&id| video.frames[t].get(id).map(|e| (id, e.clone()))).collect();
        let tracks: Vec<(InstanceId, String, Vec<(usize, crate::mask::Mask)>)> = prompts
            .par_iter()
            .map(|(id, e)| {
                let req = TrackRequest { video_id: video.video_id.clone(), prompt_frame: t, prompt_mask: e.mask.clone(), horizon };
                self.gateway.track(&req, &self.tracker).map(|out| (*id, e.label.clone(), out))
            })
            .collect::<std::result::Result<_, _>>()?;
        for (id, label, out) in tracks {
            for (f, mask) in out.into_iter().filter(|(f, _)| *f > t) {
                let frame = &mut video.frames[f];
                match frame.get(id).map(|e| e.provenance) {
                    Some(p) if p != Provenance::Tracked => continue,
                    Some(_) if mask.is_empty() => {
                        frame.remove(id);
                    }
                    None if mask.is_empty() => continue,
                    _ => frame.upsert(Entry { instance_id: id, mask, label: label.clone(), provenance: Provenance::Tracked }),
                }
                changed.insert(f);
            }
        }
        Ok(changed)
    }
}

/// Test hooks for interrupting a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnnotateOptions {
    /// Stop with [`PipelineError::Halted`] once this many frames are done.
    pub halt_after: Option<usize>,
}

/// One frame's outcome, as written to the run log.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSummary {
    pub phase: PhaseLogEntry,
}

impl FrameSummary {
    pub fn line(&self) -> String {
        let p = &self.phase;
        let actions = if p.actions.is_empty() { "-".to_string() } else { p.actions.join("; ") };
        format!(
            "frame {} coverage {:.6} -> {:.6} gate {} actions {}",
            p.frame_index,
            p.coverage_before,
            p.coverage_after,
            p.gate.as_str(),
            actions
        )
    }
}

fn append_run_log(store: &Store, video_id: &str, line: &str) -> Result<()> {
    let path = store.video_dir(video_id).join("run.log");
    let io = |source| PipelineError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::options().create(true).append(true).open(&path).map_err(io)?;
    writeln!(f, "{line}").map_err(io)
}

fn escalations(frame: usize, items: &[(Option<InstanceId>, String)]) -> Vec<Escalation> {
    items.iter().map(|(id, reason)| Escalation { frame_index: frame, instance_id: *id, reason: reason.clone() }).collect()
}

fn with_retries<T>(retries: u32, mut step: impl FnMut() -> Result<T>) -> Result<T> {
    let mut attempt = 0;
    loop {
        match step() {
            Err(e) if e.is_transient() && attempt < retries => {
                log::warn!("retrying after transient failure: {e}");
                attempt += 1;
            }
            r => return r,
        }
    }
}

/// Runs (or resumes) the initial and auto-refine phases on an ingested
/// video and leaves it `refined`, with the checker's report stored. Every
/// frame is one durable commit, so a crash loses at most the frame in
/// flight.
pub fn annotate_video(store: &Store, engine: &Engine, video_id: &str, opts: AnnotateOptions) -> Result<VideoAnnotation> {
    let _lock = store.lock_writer(video_id)?;
    let mut manifest = store.manifest(video_id)?;
    if manifest.status > Status::Initial {
        return Ok(store.load_video(video_id)?);
    }
    match &manifest.config_digest {
        Some(d) if *d != engine.digest && manifest.progress > 0 => {
            return Err(PipelineError::ConfigMismatch(video_id.to_string()));
        }
        _ => manifest.config_digest = Some(engine.digest.clone()),
    }
    let n = manifest.frame_count;
    let dims = manifest.dims;
    let mut queue = store.queue(video_id)?;
    let halt = |done: usize| match opts.halt_after {
        Some(h) if done >= h && done < n => Err(PipelineError::Halted { video: video_id.to_string(), next_frame: done }),
        _ => Ok(()),
    };

    let mut video;
    if manifest.progress == 0 {
        let (v, prov, esc) = with_retries(engine.config.backend_retries, || initial_phase(engine, video_id, dims, n))?;
        video = v;
        queue.extend(esc);
        manifest.progress = 1;
        let phase = prov.phase.clone().expect("initial phase entry");
        let batch = Batch {
            manifest: Some(manifest.clone()),
            instances: Some(video.instances.clone()),
            frames: video.frames.iter().map(|f| (f.frame_index, f.clone())).collect(),
            provenance: BTreeMap::from([(0, prov)]),
            queue: Some(queue.clone()),
            ..Batch::default()
        };
        store.commit(video_id, batch)?;
        append_run_log(store, video_id, &FrameSummary { phase }.line())?;
        halt(1)?;
    } else {
        video = store.load_video(video_id)?;
    }

    while manifest.progress < n {
        let t = manifest.progress;
        let repair = with_retries(engine.config.backend_retries, || {
            auto_refine_frame(engine, &video, t, video.next_instance_id())
        })?;
        let mut changed = BTreeSet::new();
        let gate = repair.phase.gate;
        if gate == GateDecision::Refine {
            for (id, label) in &repair.new_instances {
                video.register(*id, label.clone());
            }
            video.frames[t] = repair.frame.clone();
            changed.insert(t);
            let affected = repair.retrack.clone();
            let more = with_retries(engine.config.backend_retries, || {
                let mut trial = video.clone();
                let c = engine.retrack(&mut trial, t, &affected)?;
                Ok((trial, c))
            })?;
            video = more.0;
            changed.extend(more.1);
            video.refresh_extents();
        }
        queue.extend(escalations(t, &repair.escalations));
        manifest.progress = t + 1;
        let prov = FrameProvenance { frame_index: t, phase: Some(repair.phase.clone()), records: repair.records.clone() };
        let batch = Batch {
            manifest: Some(manifest.clone()),
            instances: (gate == GateDecision::Refine).then(|| video.instances.clone()),
            frames: changed.iter().map(|&f| (f, video.frames[f].clone())).collect(),
            provenance: BTreeMap::from([(t, prov)]),
            queue: (!repair.escalations.is_empty()).then(|| queue.clone()),
            ..Batch::default()
        };
        store.commit(video_id, batch)?;
        append_run_log(store, video_id, &FrameSummary { phase: repair.phase.clone() }.line())?;
        video.phase_log.insert(t, repair.phase);
        halt(t + 1)?;
    }

    // the checker's report closes the automatic phases
    let video = store.load_video(video_id)?;
    let report = engine.agents().check_annotation(&video)?;
    manifest.status = Status::Refined;
    store.commit(video_id, Batch { manifest: Some(manifest), report: Some(report), ..Batch::default() })?;
    Ok(store.load_video(video_id)?)
}

/// SDR on frame 0 and propagation of every refined instance through the
/// video.
fn initial_phase(
    engine: &Engine,
    video_id: &str,
    dims: GridDims,
    n: usize,
) -> Result<(VideoAnnotation, FrameProvenance, Vec<Escalation>)> {
    let out = engine.sdr(video_id, 0, dims, 1, None)?;
    let mut video = VideoAnnotation::new(video_id, dims, n);
    video.frames[0] = out.annotation(0);
    for inst in &out.instances {
        video.register(inst.instance_id, inst.label.clone());
    }
    let ids: Vec<InstanceId> = out.instances.iter().map(|i| i.instance_id).collect();
    engine.retrack(&mut video, 0, &ids)?;
    video.refresh_extents();
    let coverage = engine.coverage(&video.frames[0], dims);
    let phase = PhaseLogEntry {
        frame_index: 0,
        coverage_before: coverage,
        gate: GateDecision::Initial,
        coverage_after: coverage,
        actions: vec![format!("sdr {} instances", out.instances.len())],
    };
    video.phase_log.insert(0, phase.clone());
    let prov = FrameProvenance { frame_index: 0, phase: Some(phase), records: out.records.clone() };
    Ok((video, prov, escalations(0, &out.escalations)))
}
