//! Clients for the model roles (entity segmentor, panoptic segmentor,
//! tracker, chat agent) behind one gateway. Backends are remote HTTP servers
//! or in-process mocks; both go through the same wire codec.

pub mod http;
pub mod mock;
pub mod wire;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Window;
use crate::mask::{GridDims, Mask};
use crate::textio::is_identifier;
use wire::{Request, Response, SegmentKind};

/// A frame (or a view of it) as the segmentors should see it. The canvas is
/// the source frame rotated left by `shift_cols`, then wrap-padded by
/// `pad_cols` on each side; `crop` selects a column window of that canvas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRef {
    pub video_id: String,
    pub frame_index: usize,
    pub canvas: GridDims,
    pub pad_cols: u32,
    pub shift_cols: u32,
    pub crop: Option<Window>,
}

impl FrameRef {
    pub fn whole(video_id: &str, frame_index: usize, source: GridDims) -> Self {
        Self { video_id: video_id.into(), frame_index, canvas: source, pad_cols: 0, shift_cols: 0, crop: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityProposal {
    pub mask: Mask,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanopticProposal {
    pub mask: Mask,
    pub label: String,
    pub source_taxonomy: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackRequest {
    pub video_id: String,
    pub prompt_frame: usize,
    pub prompt_mask: Mask,
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Entity,
    Panoptic,
    Tracker,
    Chat,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Entity => "entity",
            Role::Panoptic => "panoptic",
            Role::Tracker => "tracker",
            Role::Chat => "chat",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend {0:?} is not registered")]
    Unregistered(String),
    #[error("backend {id:?} has role {actual}, expected {expected}")]
    WrongRole { id: String, expected: &'static str, actual: &'static str },
    #[error("backend {backend:?} unreachable: {message}")]
    Unreachable { backend: String, message: String },
    #[error("backend {backend:?} timed out")]
    Timeout { backend: String },
    #[error("backend {backend:?} sent a malformed response: {message}")]
    Protocol { backend: String, message: String },
    #[error("backend {backend:?} reported: {message}")]
    Remote { backend: String, message: String },
    #[error("backend registry: {0}")]
    Config(String),
}

/// Carries one request body to a backend and returns the response body.
pub trait Transport: Send + Sync {
    fn post(&self, path: &str, body: &str) -> Result<String, BackendError>;
}

fn default_max_concurrent() -> usize {
    4
}

fn default_timeout() -> u64 {
    120
}

/// One `[[backend]]` entry of the registry file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub id: String,
    pub role: Role,
    /// `http://host:port` or `mock:<family>:<path>`.
    pub endpoint: String,
    #[serde(default)]
    pub taxonomy: Option<String>,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

/// Counting semaphore bounding in-flight requests per backend.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().unwrap();
            while *free == 0 {
                free = self.cv.wait(free).unwrap();
            }
            *free -= 1;
        }
        struct Release<'a>(&'a Limiter);
        impl Drop for Release<'_> {
            fn drop(&mut self) {
                *self.0.free.lock().unwrap() += 1;
                self.0.cv.notify_one();
            }
        }
        let _r = Release(self);
        f()
    }
}

struct Backend {
    config: BackendConfig,
    transport: Box<dyn Transport>,
    limiter: Limiter,
}

/// Shared entry point to every registered backend.
pub struct Gateway {
    backends: BTreeMap<String, Backend>,
}

impl Gateway {
    pub fn empty() -> Self {
        Self { backends: BTreeMap::new() }
    }

    /// Builds transports for every entry; mock fixture paths are resolved
    /// against `base_dir`.
    pub fn from_configs(configs: &[BackendConfig], base_dir: &Path) -> Result<Self, BackendError> {
        let mut g = Self::empty();
        for c in configs {
            let transport = make_transport(c, base_dir)?;
            g.register(c.clone(), transport)?;
        }
        Ok(g)
    }

    pub fn register(&mut self, config: BackendConfig, transport: Box<dyn Transport>) -> Result<(), BackendError> {
        if !is_identifier(&config.id) {
            return Err(BackendError::Config(format!("invalid backend id {:?}", config.id)));
        }
        if self.backends.contains_key(&config.id) {
            return Err(BackendError::Config(format!("backend {:?} registered twice", config.id)));
        }
        if config.role == Role::Panoptic && !config.taxonomy.as_deref().is_some_and(is_identifier) {
            return Err(BackendError::Config(format!("panoptic backend {:?} needs a taxonomy id", config.id)));
        }
        let limiter = Limiter::new(config.max_concurrent);
        self.backends.insert(config.id.clone(), Backend { config, transport, limiter });
        Ok(())
    }

    /// Ids of backends with `role`, sorted.
    pub fn ids(&self, role: Role) -> Vec<String> {
        self.backends.values().filter(|b| b.config.role == role).map(|b| b.config.id.clone()).collect()
    }

    pub fn config(&self, id: &str) -> Option<&BackendConfig> {
        self.backends.get(id).map(|b| &b.config)
    }

    fn backend(&self, id: &str, role: Role) -> Result<&Backend, BackendError> {
        let b = self.backends.get(id).ok_or_else(|| BackendError::Unregistered(id.to_string()))?;
        if b.config.role != role {
            return Err(BackendError::WrongRole {
                id: id.to_string(),
                expected: role.as_str(),
                actual: b.config.role.as_str(),
            });
        }
        Ok(b)
    }

    fn exchange(&self, id: &str, role: Role, req: &Request) -> Result<Response, BackendError> {
        let b = self.backend(id, role)?;
        let body = b.limiter.run(|| b.transport.post(req.path(), &req.encode()))?;
        let resp = Response::parse(&body)
            .map_err(|e| BackendError::Protocol { backend: id.to_string(), message: e.to_string() })?;
        if let Response::Error(message) = resp {
            return Err(BackendError::Remote { backend: id.to_string(), message });
        }
        Ok(resp)
    }

    fn protocol(id: &str, message: impl Into<String>) -> BackendError {
        BackendError::Protocol { backend: id.to_string(), message: message.into() }
    }

    pub fn segment_entities(&self, frame: &FrameRef, id: &str) -> Result<Vec<EntityProposal>, BackendError> {
        let req = Request::Segment { kind: SegmentKind::Entity, frame: frame.clone() };
        match self.exchange(id, Role::Entity, &req)? {
            Response::Entities(ps) => {
                check_view_masks(id, frame, ps.iter().map(|p| &p.mask))?;
                Ok(ps)
            }
            _ => Err(Self::protocol(id, "expected an entities response")),
        }
    }

    pub fn segment_panoptic(&self, frame: &FrameRef, id: &str) -> Result<Vec<PanopticProposal>, BackendError> {
        let req = Request::Segment { kind: SegmentKind::Panoptic, frame: frame.clone() };
        let declared = self.backend(id, Role::Panoptic)?.config.taxonomy.clone();
        match self.exchange(id, Role::Panoptic, &req)? {
            Response::Panoptic(ps) => {
                check_view_masks(id, frame, ps.iter().map(|p| &p.mask))?;
                if let Some(p) = ps.iter().find(|p| Some(&p.source_taxonomy) != declared.as_ref()) {
                    return Err(Self::protocol(id, format!("label from undeclared taxonomy {:?}", p.source_taxonomy)));
                }
                Ok(ps)
            }
            _ => Err(Self::protocol(id, "expected a panoptic response")),
        }
    }

    /// One mask per frame in `[prompt_frame, prompt_frame + horizon)`.
    pub fn track(&self, req: &TrackRequest, id: &str) -> Result<Vec<(usize, Mask)>, BackendError> {
        if req.horizon == 0 || req.prompt_mask.is_empty() {
            return Err(BackendError::Config("track request needs a prompt and a horizon".into()));
        }
        match self.exchange(id, Role::Tracker, &Request::Track(req.clone()))? {
            Response::Track(frames) => {
                if frames.len() != req.horizon {
                    return Err(Self::protocol(id, format!("{} frames for horizon {}", frames.len(), req.horizon)));
                }
                for (k, (f, m)) in frames.iter().enumerate() {
                    if *f != req.prompt_frame + k || m.dims() != req.prompt_mask.dims() {
                        return Err(Self::protocol(id, format!("unexpected frame {f} in track result")));
                    }
                }
                Ok(frames)
            }
            _ => Err(Self::protocol(id, "expected a track response")),
        }
    }

    /// Plain-text chat completion.
    pub fn complete(&self, prompt: &str, id: &str) -> Result<String, BackendError> {
        let b = self.backend(id, Role::Chat)?;
        b.limiter.run(|| b.transport.post(wire::COMPLETE_PATH, prompt))
    }
}

fn check_view_masks<'a>(id: &str, frame: &FrameRef, masks: impl Iterator<Item = &'a Mask>) -> Result<(), BackendError> {
    for m in masks {
        if m.dims() != frame.canvas {
            return Err(Gateway::protocol(id, "mask dims differ from the request canvas"));
        }
        if let Some(w) = frame.crop {
            if !m.within_cols(w.start, w.width) {
                return Err(Gateway::protocol(id, "mask outside the requested crop"));
            }
        }
    }
    Ok(())
}

fn make_transport(c: &BackendConfig, base_dir: &Path) -> Result<Box<dyn Transport>, BackendError> {
    let ep = c.endpoint.as_str();
    if ep.starts_with("http://") || ep.starts_with("https://") {
        return Ok(Box::new(http::HttpTransport::new(&c.id, ep, c.timeout_secs)));
    }
    let rest = ep
        .strip_prefix("mock:")
        .ok_or_else(|| BackendError::Config(format!("backend {:?}: unsupported endpoint {ep:?}", c.id)))?;
    let (family, path) = rest
        .split_once(':')
        .ok_or_else(|| BackendError::Config(format!("backend {:?}: expected mock:<family>:<path>", c.id)))?;
    let path = base_dir.join(path);
    let scene_source = || {
        if path.is_dir() { mock::SceneSource::Dir(path.clone()) } else { mock::SceneSource::File(path.clone()) }
    };
    let t: Box<dyn Transport> = match (family, c.role) {
        ("scripted", _) => Box::new(mock::ScriptedMock::load(&path)?),
        ("geometric", Role::Entity | Role::Panoptic | Role::Tracker) => {
            Box::new(mock::SceneMock::new(scene_source(), false, c.taxonomy.clone()))
        }
        ("adversarial", Role::Entity | Role::Panoptic | Role::Tracker) => {
            Box::new(mock::SceneMock::new(scene_source(), true, c.taxonomy.clone()))
        }
        ("rules", Role::Chat) => Box::new(crate::agents::rules::RulesAgent::load(&path).map_err(BackendError::Config)?),
        _ => {
            return Err(BackendError::Config(format!(
                "backend {:?}: mock family {family:?} cannot serve role {}",
                c.id,
                c.role.as_str()
            )))
        }
    };
    Ok(t)
}
