//! Synthetic panoramic scenes: rectangles and ellipses moving with constant
//! velocity, wrapping horizontally. They drive the geometric mock backends
//! and render the frames that the fixtures ingest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{union_all, GridDims, Mask};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {message}")]
    Load { path: String, message: String },
    #[error("invalid scene: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    #[default]
    Thing,
    Stuff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub id: u32,
    #[serde(default)]
    pub kind: ObjectKind,
    pub shape: Shape,
    pub top: i64,
    pub left: i64,
    pub rows: u32,
    pub cols: u32,
    /// `[rows, cols]` per frame.
    #[serde(default)]
    pub velocity: [i64; 2],
    /// Label per taxonomy id, as a panoptic model of that taxonomy would
    /// name the object.
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    /// Half-open `[from, to)` frame ranges; empty means always visible.
    #[serde(default)]
    pub visible: Vec<[usize; 2]>,
}

/// Scripted misbehaviour of the adversarial mocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    /// The tracker loses `object` at frame `from` when prompted earlier.
    Drop { object: u32, from: usize },
    /// The tracker cannot follow `object` across the seam.
    SeamLoss { object: u32 },
    /// The entity segmentor misses `object` on frames `[from, to)`.
    Miss { object: u32, from: usize, to: usize },
    /// The entity segmentor returns `object` as two halves.
    Split { object: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default, rename = "object")]
    pub objects: Vec<SceneObject>,
    #[serde(default, rename = "fault")]
    pub faults: Vec<Fault>,
}

fn default_fps() -> f64 {
    2.0
}

impl Scene {
    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let err = |message: String| SceneError::Load { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::parse(&text).map_err(|e| err(e.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self, SceneError> {
        let scene: Scene = toml::from_str(text).map_err(|e| SceneError::Invalid(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        self.dims()?;
        if self.frames == 0 || !(self.fps > 0.0) {
            return Err(SceneError::Invalid("frames and fps must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for o in &self.objects {
            if o.id == 0 || !seen.insert(o.id) {
                return Err(SceneError::Invalid(format!("object id {} is zero or repeated", o.id)));
            }
            if o.rows == 0 || o.cols == 0 || o.cols > self.width {
                return Err(SceneError::Invalid(format!("object {} has a bad extent", o.id)));
            }
            if o.visible.iter().any(|[a, b]| a >= b) {
                return Err(SceneError::Invalid(format!("object {} has an empty visibility range", o.id)));
            }
        }
        for f in &self.faults {
            let id = match f {
                Fault::Drop { object, .. } | Fault::SeamLoss { object } | Fault::Miss { object, .. } | Fault::Split { object } => *object,
            };
            if !seen.contains(&id) {
                return Err(SceneError::Invalid(format!("fault names unknown object {id}")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Result<GridDims, SceneError> {
        GridDims::erp(self.width, self.height).map_err(|e| SceneError::Invalid(e.to_string()))
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn is_visible(&self, o: &SceneObject, frame: usize) -> bool {
        frame < self.frames && (o.visible.is_empty() || o.visible.iter().any(|&[a, b]| (a..b).contains(&frame)))
    }

    /// Full silhouette of `o` at `frame`, ignoring occlusion.
    pub fn silhouette(&self, o: &SceneObject, frame: usize) -> Mask {
        let dims = GridDims::erp(self.width, self.height).expect("validated scene");
        let f = frame as i64;
        let top = o.top + o.velocity[0] * f;
        let left = (o.left + o.velocity[1] * f).rem_euclid(self.width as i64);
        match o.shape {
            Shape::Rect => Mask::rect(dims, top, left, o.rows, o.cols),
            Shape::Ellipse => {
                let ry = o.rows as f64 / 2.0;
                let rx = o.cols as f64 / 2.0;
                Mask::ellipse(dims, top as f64 + ry, left as f64 + rx, ry, rx)
            }
        }
    }

    /// Visible part of every object at `frame`, in scene order. Objects
    /// listed later are in front. Fully hidden objects are omitted.
    pub fn visible_masks(&self, frame: usize) -> Vec<(u32, Mask)> {
        let dims = GridDims::erp(self.width, self.height).expect("validated scene");
        let mut front = Mask::empty(dims);
        let mut out = Vec::new();
        for o in self.objects.iter().rev() {
            if !self.is_visible(o, frame) {
                continue;
            }
            let sil = self.silhouette(o, frame);
            let vis = sil.difference(&front).expect("same dims");
            front = front.union(&sil).expect("same dims");
            if !vis.is_empty() {
                out.push((o.id, vis));
            }
        }
        out.reverse();
        out
    }

    /// Pixels covered by any visible object at `frame`.
    pub fn coverage_mask(&self, frame: usize) -> Mask {
        let dims = GridDims::erp(self.width, self.height).expect("validated scene");
        let masks = self.visible_masks(frame);
        union_all(masks.iter().map(|(_, m)| m), dims).expect("same dims")
    }

    /// The same scene turned by `k` columns.
    pub fn rotated(&self, k: i64) -> Scene {
        let mut s = self.clone();
        for o in &mut s.objects {
            o.left = (o.left + k).rem_euclid(self.width as i64);
        }
        s
    }

    /// Grey level of `id` in rendered frames; background is 0.
    pub fn shade(id: u32) -> u8 {
        (1 + (id as u64 * 53) % 254) as u8
    }

    /// Row-major 8-bit rendering of `frame`.
    pub fn render(&self, frame: usize) -> Vec<u8> {
        let w = self.width as usize;
        let mut px = vec![0u8; w * self.height as usize];
        for (id, m) in self.visible_masks(frame) {
            let v = Self::shade(id);
            for r in m.runs() {
                let base = r.row as usize * w + r.start as usize;
                px[base..base + r.len as usize].fill(v);
            }
        }
        px
    }

    /// Writes a raster source directory: `meta` plus one PGM per frame.
    pub fn write_source(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("meta"), format!("fps {}\n", self.fps))?;
        for f in 0..self.frames {
            crate::raster::write_pgm(&dir.join(format!("{f:06}.pgm")), self.width, self.height, &self.render(f))
                .map_err(std::io::Error::other)?;
        }
        Ok(())
    }
}
