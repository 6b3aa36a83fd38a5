#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use panolabel_core::annotation::{EditOp, Entry, GateDecision, InstanceId, Provenance, Revision, Status, VideoAnnotation};
use panolabel_core::backend::wire::{Request, Response};
use panolabel_core::backend::{BackendConfig, BackendError, Gateway, Role, Transport};
use panolabel_core::mask::{GridDims, Mask, Run};
use panolabel_core::pipeline::{annotate_video, ingest_video, AnnotateOptions, Config, Engine, PipelineError};
use panolabel_core::scene::Scene;
use panolabel_core::store::format::Manifest;
use panolabel_core::store::Store;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIXTURES: [&str; 3] = ["static", "deer", "occlusion"];

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// Copy of a fixture with the scene turned by `k` columns and, optionally,
/// the adversarial mocks swapped for faithful ones.
pub fn variant(name: &str, k: i64, faithful: bool) -> tempfile::TempDir {
    let src = fixture(name);
    let dir = tempfile::tempdir().unwrap();
    let scene = Scene::load(&src.join("scene.toml")).unwrap().rotated(k);
    std::fs::write(dir.path().join("scene.toml"), toml::to_string(&scene).unwrap()).unwrap();
    let mut mock = std::fs::read_to_string(src.join("mock.toml")).unwrap();
    if faithful {
        mock = mock.replace("mock:adversarial:", "mock:geometric:");
    }
    std::fs::write(dir.path().join("mock.toml"), mock).unwrap();
    std::fs::copy(src.join("taxonomy.toml"), dir.path().join("taxonomy.toml")).unwrap();
    dir
}

pub fn engine(source: &Path) -> Engine {
    let cfg = Config::load(&source.join("mock.toml"), &[]).unwrap();
    Engine::from_config(&cfg).unwrap()
}

pub fn ingest(store: &Store, source: &Path, id: &str) {
    let cfg = Config::load(&source.join("mock.toml"), &[]).unwrap();
    ingest_video(store, source, id, &cfg.ingest).unwrap();
}

/// Ingests and annotates `source` as `id` in a fresh store under `root`.
pub fn run(root: &Path, source: &Path, id: &str, opts: AnnotateOptions) -> (Store, Result<VideoAnnotation, PipelineError>) {
    let store = Store::open(root).unwrap();
    ingest(&store, source, id);
    let out = annotate_video(&store, &engine(source), id, opts);
    (store, out)
}

pub fn refined_frames(v: &VideoAnnotation) -> Vec<usize> {
    v.phase_log.values().filter(|p| p.gate == GateDecision::Refine).map(|p| p.frame_index).collect()
}

pub fn gates(v: &VideoAnnotation) -> Vec<GateDecision> {
    v.phase_log.values().map(|p| p.gate).collect()
}

/// Checks every frame against the scene's visible objects and returns, per
/// frame, which scene object each instance is.
pub fn match_ground_truth(v: &VideoAnnotation, scene: &Scene) -> Vec<BTreeMap<InstanceId, u32>> {
    let mut out = Vec::new();
    for (f, frame) in v.frames.iter().enumerate() {
        let truth = scene.visible_masks(f);
        let entries: Vec<_> = frame.entries().iter().filter(|e| !e.mask.is_empty()).collect();
        assert_eq!(entries.len(), truth.len(), "frame {f}: instance count");
        let mut map = BTreeMap::new();
        for e in entries {
            let (obj, _) = truth
                .iter()
                .find(|(_, m)| *m == e.mask)
                .unwrap_or_else(|| panic!("frame {f}: instance {} matches no scene object", e.instance_id));
            map.insert(e.instance_id, *obj);
        }
        out.push(map);
    }
    out
}

/// Id bijection under which `b` equals `a` with every mask turned by `k`
/// columns, or a description of the first difference.
pub fn rotated_equal(a: &VideoAnnotation, b: &VideoAnnotation, k: i64) -> Result<BTreeMap<InstanceId, InstanceId>, String> {
    if a.frame_count() != b.frame_count() || a.instances.len() != b.instances.len() {
        return Err("frame or instance counts differ".into());
    }
    let mut map: BTreeMap<InstanceId, InstanceId> = BTreeMap::new();
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        if fa.entries().len() != fb.entries().len() {
            return Err(format!("frame {}: entry counts differ", fa.frame_index));
        }
        for e in fa.entries() {
            let turned = e.mask.rotate_cols(k);
            let Some(other) = fb.entries().iter().find(|o| o.mask == turned && o.label == e.label) else {
                return Err(format!("frame {}: instance {} has no rotated counterpart", fa.frame_index, e.instance_id));
            };
            if *map.entry(e.instance_id).or_insert(other.instance_id) != other.instance_id {
                return Err(format!("frame {}: instance {} changes partner", fa.frame_index, e.instance_id));
            }
        }
    }
    let mut targets: Vec<_> = map.values().collect();
    targets.sort();
    targets.dedup();
    if targets.len() != map.len() {
        return Err("id mapping is not one-to-one".into());
    }
    Ok(map)
}

// ---- brute-force pixel helpers ----

pub type Bitmap = Vec<bool>;

pub fn random_mask(rng: &mut ChaCha8Rng, dims: GridDims) -> Mask {
    let density: f64 = rng.random_range(0.0..1.0);
    let bits: Bitmap = (0..dims.pixels()).map(|_| rng.random_bool(density)).collect();
    Mask::encode(&bits, dims).unwrap()
}

pub fn random_dims(rng: &mut ChaCha8Rng) -> GridDims {
    GridDims::new(rng.random_range(1..=32), rng.random_range(1..=32), rng.random_bool(0.5)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn count(b: &[bool]) -> u64 {
    b.iter().filter(|&&x| x).count() as u64
}

pub fn pixel_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let uni = a.iter().zip(b).filter(|(x, y)| **x || **y).count() as f64;
    if uni == 0.0 { 0.0 } else { inter / uni }
}

/// Boundary pixels: inside, with a 4-neighbour outside; rows beyond the
/// grid are outside, columns wrap when the grid does.
pub fn pixel_boundary(b: &[bool], dims: GridDims) -> Bitmap {
    let (w, h) = (dims.width as i64, dims.height as i64);
    let at = |r: i64, c: i64| -> bool {
        if r < 0 || r >= h {
            return false;
        }
        let c = if dims.wrap {
            c.rem_euclid(w)
        } else if c < 0 || c >= w {
            return false;
        } else {
            c
        };
        b[(r * w + c) as usize]
    };
    let mut out = vec![false; b.len()];
    for r in 0..h {
        for c in 0..w {
            if at(r, c) && !(at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1)) {
                out[(r * w + c) as usize] = true;
            }
        }
    }
    out
}

/// Boundary F-measure by exhaustive nearest-pixel search.
pub fn pixel_boundary_f(p: Option<&[bool]>, r: Option<&[bool]>, dims: GridDims, radius: f64) -> f64 {
    let pts = |b: &[bool]| -> Vec<(i64, i64)> {
        let pb = pixel_boundary(b, dims);
        (0..pb.len()).filter(|&i| pb[i]).map(|i| (i as i64 / dims.width as i64, i as i64 % dims.width as i64)).collect()
    };
    let pp = p.map(pts).unwrap_or_default();
    let rp = r.map(pts).unwrap_or_default();
    match (pp.is_empty(), rp.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let w = dims.width as i64;
    let close = |a: (i64, i64), b: (i64, i64)| {
        let dr = (a.0 - b.0) as f64;
        let mut dc = (a.1 - b.1).abs();
        if dims.wrap {
            dc = dc.min(w - dc);
        }
        dr * dr + (dc * dc) as f64 <= radius * radius
    };
    let matched = |from: &[(i64, i64)], to: &[(i64, i64)]| from.iter().filter(|a| to.iter().any(|b| close(**a, *b))).count() as f64;
    let precision = matched(&pp, &rp) / pp.len() as f64;
    let recall = matched(&rp, &pp) / rp.len() as f64;
    if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) }
}

// ---- random annotations ----

pub fn random_video(r: &mut rand_chacha::ChaCha8Rng, wrap: bool) -> VideoAnnotation {
    let d = GridDims::new(r.random_range(1..=24), r.random_range(1..=12), wrap).unwrap();
    let frames = r.random_range(1..=4usize);
    let mut v = VideoAnnotation::new("clip", d, frames);
    let labels = ["car", "tree", "sky"];
    let provs = [Provenance::Sdr, Provenance::Tracked, Provenance::Retrieved, Provenance::Manual];
    for id in 1..=r.random_range(0..=4u32) {
        v.register(id, labels[r.random_range(0..labels.len())]);
        for f in 0..frames {
            let mask = random_mask(r, d);
            if r.random_bool(0.6) && !mask.is_empty() {
                let e = Entry {
                    instance_id: id,
                    mask,
                    label: v.instances[&id].label.clone(),
                    provenance: provs[r.random_range(0..provs.len())],
                };
                v.frames[f].upsert(e);
            }
        }
    }
    v.refresh_extents();
    v
}

pub fn manifest(v: &VideoAnnotation) -> Manifest {
    Manifest {
        video_id: v.video_id.clone(),
        dims: v.dims,
        frame_count: v.frame_count(),
        fps: 2.0,
        raster: "pgm".into(),
        config_digest: None,
        status: Status::Initial,
        progress: 0,
    }
}

pub fn random_ops(r: &mut rand_chacha::ChaCha8Rng, v: &VideoAnnotation, n: usize) -> Vec<Revision> {
    let mut state = v.clone();
    let mut revs = Vec::new();
    let ids = |s: &VideoAnnotation| s.instances.keys().copied().collect::<Vec<_>>();
    while revs.len() < n {
        let known = ids(&state);
        let pick = |r: &mut rand_chacha::ChaCha8Rng| known.get(r.random_range(0..known.len().max(1))).copied().unwrap_or(1);
        let frame = r.random_range(0..state.frame_count());
        let op = match r.random_range(0..6) {
            0 => EditOp::ReplaceMask { frame, instance: pick(r), mask: random_mask(r, state.dims) },
            1 => EditOp::Paint { frame, instance: pick(r), erase: r.random_bool(0.5), mask: random_mask(r, state.dims) },
            2 => EditOp::Relabel { instance: pick(r), label: "building".into() },
            3 => EditOp::DeleteInstance { instance: pick(r) },
            4 => EditOp::AddInstance { instance: state.next_instance_id(), label: "person".into(), frame, mask: random_mask(r, state.dims) },
            _ => EditOp::MergeInstances { keep: pick(r), absorb: pick(r) },
        };
        if state.apply(&op).is_ok() {
            revs.push(Revision { seq: revs.len() as u64 + 1, op });
        }
    }
    revs
}

// ---- scripted tracker ----

/// Tracker answering each prompt from a table keyed by the prompt's runs;
/// unknown prompts get an empty mask.
pub struct TableTracker {
    pub answers: BTreeMap<Vec<Run>, Mask>,
    pub dims: GridDims,
}

impl Transport for TableTracker {
    fn post(&self, _: &str, body: &str) -> Result<String, BackendError> {
        let Ok(Request::Track(req)) = Request::parse(body) else { panic!("not a track request") };
        let m = self.answers.get(req.prompt_mask.runs()).cloned().unwrap_or_else(|| Mask::empty(self.dims));
        Ok(Response::Track(vec![(req.prompt_frame, m)]).encode())
    }
}

pub fn tracker_gateway(t: TableTracker) -> Gateway {
    let mut g = Gateway::empty();
    let cfg = BackendConfig {
        id: "t".into(),
        role: Role::Tracker,
        endpoint: "mock:none:x".into(),
        taxonomy: None,
        max_concurrent: 4,
        timeout_secs: 1,
    };
    g.register(cfg, Box::new(t)).unwrap();
    g
}
