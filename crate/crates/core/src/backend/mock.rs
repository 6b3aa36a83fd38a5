//! Deterministic in-process model servers. They speak the same wire format
//! as remote backends, so the codec is exercised on every mock call.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::wire::{Request, Response, SegmentKind};
use super::{BackendError, EntityProposal, FrameRef, PanopticProposal, TrackRequest, Transport};
use crate::geometry::{embed_in_padded, PadPlan};
use crate::mask::{GridDims, Mask};
use crate::scene::{Fault, Scene};

const MOCK_CONFIDENCE: f64 = 0.9;

/// Replays recorded request/response pairs. Script format:
///
/// ```text
/// >>> /v1/segment/entity
/// <request lines>
/// <<<
/// <response lines>
/// ===
/// ```
pub struct ScriptedMock {
    pairs: Vec<(String, String, String)>,
}

impl ScriptedMock {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut pairs = Vec::new();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((n, line)) = lines.next() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let path = line.strip_prefix(">>> ").ok_or(format!("line {}: expected `>>> <path>`", n + 1))?;
            let mut req = String::new();
            let mut resp = String::new();
            let mut in_resp = false;
            loop {
                let (n, l) = lines.next().ok_or(format!("line {}: unterminated entry", n + 1))?;
                match l {
                    "<<<" if !in_resp => in_resp = true,
                    "===" if in_resp => break,
                    _ if l.starts_with(">>>") => return Err(format!("line {}: unterminated entry", n + 1)),
                    _ => {
                        let buf = if in_resp { &mut resp } else { &mut req };
                        buf.push_str(l);
                        buf.push('\n');
                    }
                }
            }
            pairs.push((path.to_string(), req, resp));
        }
        Ok(Self { pairs })
    }
}

impl Transport for ScriptedMock {
    fn post(&self, path: &str, body: &str) -> Result<String, BackendError> {
        let hit = self.pairs.iter().find(|(p, req, _)| p == path && req == body);
        Ok(match hit {
            Some((_, _, resp)) => resp.clone(),
            None => Response::Error("no scripted response for this request".into()).encode(),
        })
    }
}

/// Where a scene mock finds the scene for a video.
#[derive(Debug, Clone)]
pub enum SceneSource {
    /// One scene serves every video id.
    File(PathBuf),
    /// `<dir>/<video>.toml` or `<dir>/<video>/scene.toml`.
    Dir(PathBuf),
}

/// Segmentors and tracker backed by a synthetic scene. With `adversarial`
/// set, the scene's `[[fault]]` entries are honoured.
pub struct SceneMock {
    source: SceneSource,
    adversarial: bool,
    taxonomy: Option<String>,
    cache: Mutex<HashMap<String, Arc<Scene>>>,
}

impl SceneMock {
    pub fn new(source: SceneSource, adversarial: bool, taxonomy: Option<String>) -> Self {
        Self { source, adversarial, taxonomy, cache: Mutex::new(HashMap::new()) }
    }

    pub fn from_scene(scene: Scene, adversarial: bool, taxonomy: Option<String>) -> Self {
        let mock = Self::new(SceneSource::File(PathBuf::new()), adversarial, taxonomy);
        mock.cache.lock().unwrap().insert(String::new(), Arc::new(scene));
        mock
    }

    fn scene(&self, video_id: &str) -> Result<Arc<Scene>, String> {
        let key = match &self.source {
            SceneSource::File(_) => String::new(),
            SceneSource::Dir(_) => video_id.to_string(),
        };
        if let Some(s) = self.cache.lock().unwrap().get(&key) {
            return Ok(s.clone());
        }
        let path = match &self.source {
            SceneSource::File(p) => p.clone(),
            SceneSource::Dir(d) => {
                let flat = d.join(format!("{video_id}.toml"));
                if flat.is_file() { flat } else { d.join(video_id).join("scene.toml") }
            }
        };
        let scene = Arc::new(Scene::load(&path).map_err(|e| e.to_string())?);
        self.cache.lock().unwrap().insert(key, scene.clone());
        Ok(scene)
    }

    fn handle(&self, path: &str, body: &str) -> Result<Response, String> {
        let req = Request::parse(body).map_err(|e| format!("bad request: {e}"))?;
        if req.path() != path {
            return Err(format!("request kind does not belong on {path}"));
        }
        match req {
            Request::Segment { kind: SegmentKind::Entity, frame } => {
                let scene = self.scene(&frame.video_id)?;
                Ok(Response::Entities(self.entities(&scene, &frame)?))
            }
            Request::Segment { kind: SegmentKind::Panoptic, frame } => {
                let scene = self.scene(&frame.video_id)?;
                Ok(Response::Panoptic(self.panoptic(&scene, &frame)?))
            }
            Request::Track(t) => {
                let scene = self.scene(&t.video_id)?;
                Ok(Response::Track(self.track(&scene, &t)?))
            }
        }
    }

    /// Visible objects as the view sees them: rotated by the shift, padded,
    /// and clipped to the crop.
    fn view_masks(&self, scene: &Scene, frame: &FrameRef) -> Result<Vec<(u32, Mask)>, String> {
        if frame.frame_index >= scene.frames {
            return Err(format!("frame {} beyond the video", frame.frame_index));
        }
        let source = scene.dims().map_err(|e| e.to_string())?;
        let pad = frame.pad_cols;
        let expected = GridDims::new(source.width + 2 * pad, source.height, pad == 0).map_err(|e| e.to_string())?;
        if frame.canvas != expected {
            return Err(format!("canvas {} does not fit frame {}", frame.canvas, source));
        }
        let plan = PadPlan { source, pad_cols_each_side: pad, padded: expected };
        let mut out = Vec::new();
        for (id, m) in scene.visible_masks(frame.frame_index) {
            let mut m = m.rotate_cols(-(frame.shift_cols as i64));
            if pad > 0 {
                m = embed_in_padded(&m, &plan).map_err(|e| e.to_string())?;
            }
            if let Some(w) = frame.crop {
                m = m.restrict_cols(w.start, w.width);
            }
            if !m.is_empty() {
                out.push((id, m));
            }
        }
        Ok(out)
    }

    fn entities(&self, scene: &Scene, frame: &FrameRef) -> Result<Vec<EntityProposal>, String> {
        let mut out = Vec::new();
        for (id, m) in self.view_masks(scene, frame)? {
            if self.adversarial {
                let missed = scene.faults.iter().any(|f| {
                    matches!(f, Fault::Miss { object, from, to } if *object == id && (*from..*to).contains(&frame.frame_index))
                });
                if missed {
                    continue;
                }
                if scene.faults.iter().any(|f| matches!(f, Fault::Split { object } if *object == id)) {
                    for half in split_halves(&m) {
                        out.push(EntityProposal { mask: half, confidence: MOCK_CONFIDENCE });
                    }
                    continue;
                }
            }
            out.push(EntityProposal { mask: m, confidence: MOCK_CONFIDENCE });
        }
        Ok(out)
    }

    fn panoptic(&self, scene: &Scene, frame: &FrameRef) -> Result<Vec<PanopticProposal>, String> {
        let Some(tax) = &self.taxonomy else {
            return Err("panoptic mock has no taxonomy".into());
        };
        let mut out = Vec::new();
        for (id, m) in self.view_masks(scene, frame)? {
            let obj = scene.object(id).expect("visible objects exist");
            if let Some(label) = obj.labels.get(tax) {
                out.push(PanopticProposal {
                    mask: m,
                    label: label.clone(),
                    source_taxonomy: tax.clone(),
                    confidence: MOCK_CONFIDENCE,
                });
            }
        }
        Ok(out)
    }

    /// Snaps the prompt to the visible object it overlaps most (ties to the
    /// lower id) and follows that object. An object that becomes invisible
    /// stays lost. A prompt overlapping nothing is echoed unchanged.
    fn track(&self, scene: &Scene, req: &TrackRequest) -> Result<Vec<(usize, Mask)>, String> {
        let dims = scene.dims().map_err(|e| e.to_string())?;
        if req.prompt_mask.dims() != dims {
            return Err("prompt dims do not match the video".into());
        }
        let s = req.prompt_frame;
        if s + req.horizon > scene.frames {
            return Err(format!("frames {}..{} beyond the video", s, s + req.horizon));
        }
        let frames = s..s + req.horizon;
        let mut best: Option<(f64, u32, Mask)> = None;
        for (id, m) in scene.visible_masks(s) {
            let iou = req.prompt_mask.iou(&m).map_err(|e| e.to_string())?;
            let better = match &best {
                None => iou > 0.0,
                Some((b, bid, _)) => iou > *b || (iou == *b && id < *bid),
            };
            if better {
                best = Some((iou, id, m));
            }
        }
        let Some((_, id, snapped)) = best else {
            return Ok(frames.map(|f| (f, req.prompt_mask.clone())).collect());
        };

        let faults: &[Fault] = if self.adversarial { &scene.faults } else { &[] };
        let drop_from = faults.iter().find_map(|f| match f {
            Fault::Drop { object, from } if *object == id && s < *from => Some(*from),
            _ => None,
        });
        let half = dims.width / 2;
        let straddles = |m: &Mask| m.touches_left() && m.touches_right();
        // side of the seam the prompt sits on, when the tracker cannot cross it
        let seam_side = faults
            .iter()
            .any(|f| matches!(f, Fault::SeamLoss { object } if *object == id))
            .then(|| snapped.centroid().map(|c| c.1 < half as f64))
            .flatten()
            .filter(|_| !straddles(&snapped));

        let mut lost = false;
        let mut out = Vec::with_capacity(req.horizon);
        for f in frames {
            let mut m = if lost {
                Mask::empty(dims)
            } else {
                scene.visible_masks(f).into_iter().find(|(i, _)| *i == id).map(|(_, m)| m).unwrap_or_else(|| {
                    lost = true;
                    Mask::empty(dims)
                })
            };
            if drop_from.is_some_and(|d| f >= d) {
                lost = true;
                m = Mask::empty(dims);
            }
            if let (Some(left_side), false) = (seam_side, m.is_empty()) {
                if straddles(&m) {
                    m = if left_side { m.restrict_cols(0, half) } else { m.restrict_cols(half, dims.width - half) };
                } else if m.centroid().is_some_and(|c| (c.1 < half as f64) != left_side) {
                    lost = true;
                    m = Mask::empty(dims);
                }
            }
            out.push((f, m));
        }
        Ok(out)
    }
}

/// Splits a mask at its wrap-aware column centroid.
fn split_halves(m: &Mask) -> Vec<Mask> {
    let Some((_, c)) = m.centroid() else { return vec![] };
    let w = m.dims().width;
    let k = (w / 2) as i64 - c.round() as i64;
    let centred = m.rotate_cols(k);
    [centred.restrict_cols(0, w / 2), centred.restrict_cols(w / 2, w - w / 2)]
        .into_iter()
        .map(|h| h.rotate_cols(-k))
        .filter(|h| !h.is_empty())
        .collect()
}

impl Transport for SceneMock {
    fn post(&self, path: &str, body: &str) -> Result<String, BackendError> {
        Ok(match self.handle(path, body) {
            Ok(resp) => resp.encode(),
            Err(msg) => Response::Error(msg.replace('\n', " ")).encode(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::wire::TRACK_PATH;

    fn scene() -> Scene {
        toml::from_str(
            r#"
            width = 100
            height = 20
            frames = 8

            [[object]]
            id = 1
            shape = "rect"
            top = 2
            left = 10
            rows = 4
            cols = 10
            velocity = [0, 2]
            labels = { coco = "car" }

            [[object]]
            id = 2
            shape = "rect"
            top = 10
            left = 80
            rows = 4
            cols = 10
            velocity = [0, 5]
            visible = [[0, 6]]

            [[fault]]
            kind = "drop"
            object = 1
            from = 4

            [[fault]]
            kind = "seam_loss"
            object = 2
            "#,
        )
        .unwrap()
    }

    fn track(mock: &SceneMock, prompt: Mask, from: usize, horizon: usize) -> Vec<(usize, Mask)> {
        let req = Request::Track(TrackRequest { video_id: "v".into(), prompt_frame: from, prompt_mask: prompt, horizon });
        match Response::parse(&mock.post(TRACK_PATH, &req.encode()).unwrap()).unwrap() {
            Response::Track(v) => v,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rigid_translation() {
        let s = scene();
        let d = s.dims().unwrap();
        let mock = SceneMock::from_scene(s, false, None);
        let out = track(&mock, Mask::rect(d, 2, 10, 4, 10), 0, 8);
        for (f, m) in &out {
            assert_eq!(m, &Mask::rect(d, 2, 10 + 2 * *f as i64, 4, 10));
        }
        let one = track(&mock, Mask::rect(d, 2, 10, 4, 10), 0, 1);
        assert_eq!(one, vec![(0, Mask::rect(d, 2, 10, 4, 10))]);
    }

    #[test]
    fn invisible_object_stays_lost() {
        let s = scene();
        let d = s.dims().unwrap();
        let mock = SceneMock::from_scene(s, false, None);
        let out = track(&mock, Mask::rect(d, 10, 80, 4, 10), 0, 8);
        assert!(!out[5].1.is_empty());
        assert!(out[6].1.is_empty() && out[7].1.is_empty());
    }

    #[test]
    fn adversarial_drop_only_before_fault_frame() {
        let s = scene();
        let d = s.dims().unwrap();
        let mock = SceneMock::from_scene(s, true, None);
        let out = track(&mock, Mask::rect(d, 2, 10, 4, 10), 0, 8);
        assert!(!out[3].1.is_empty());
        assert!(out[4..].iter().all(|(_, m)| m.is_empty()));
        let restarted = track(&mock, Mask::rect(d, 2, 18, 4, 10), 4, 4);
        assert!(restarted.iter().all(|(_, m)| !m.is_empty()));
    }

    #[test]
    fn seam_loss_keeps_prompt_side() {
        let s = scene();
        let d = s.dims().unwrap();
        let mock = SceneMock::from_scene(s, true, None);
        let out = track(&mock, Mask::rect(d, 10, 80, 4, 10), 0, 6);
        // frame 2 at cols 90..100, frame 3 straddles 95..105
        assert_eq!(out[2].1, Mask::rect(d, 10, 90, 4, 10));
        assert_eq!(out[3].1, Mask::rect(d, 10, 95, 4, 5));
        assert!(out[4].1.is_empty() && out[5].1.is_empty());
        // a prompt already across the seam is followed normally
        let out = track(&mock, Mask::rect(d, 10, 95, 4, 10), 3, 2);
        assert_eq!(out[1].1, Mask::rect(d, 10, 100, 4, 10));
    }

    #[test]
    fn unmatched_prompt_is_echoed() {
        let s = scene();
        let d = s.dims().unwrap();
        let mock = SceneMock::from_scene(s, false, None);
        let p = Mask::rect(d, 18, 50, 1, 1);
        assert!(track(&mock, p.clone(), 0, 2).iter().all(|(_, m)| *m == p));
    }

    #[test]
    fn split_fault_halves_object() {
        let d = GridDims::erp(100, 10).unwrap();
        let halves = split_halves(&Mask::rect(d, 0, 96, 2, 8));
        assert_eq!(halves.len(), 2);
        assert_eq!(halves[0].union(&halves[1]).unwrap(), Mask::rect(d, 0, 96, 2, 8));
    }

    #[test]
    fn scripted_replay_is_exact() {
        let script = ">>> /v1/track\nhello\n<<<\na3v/1 track-result 0\nend\n===\n";
        let mock = ScriptedMock::parse(script).unwrap();
        assert_eq!(mock.post("/v1/track", "hello\n").unwrap(), "a3v/1 track-result 0\nend\n");
        assert!(mock.post("/v1/track", "other\n").unwrap().starts_with("a3v/1 error"));
        assert!(ScriptedMock::parse(">>> /v1/track\nx\n").is_err());
    }
}
