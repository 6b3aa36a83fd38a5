use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::AgentSettings;
use crate::backend::BackendConfig;
use crate::mask::{Connectivity, GridDims};
use crate::sdr::{SdrSettings, ShiftConfig};

fn d_rho() -> f64 {
    0.9
}
fn d_tau() -> f64 {
    0.5
}
fn d_pad() -> f64 {
    0.25
}
fn d_min_blank() -> f64 {
    0.0005
}
fn d_true() -> bool {
    true
}
fn d_conn() -> u8 {
    4
}
fn d_half() -> f64 {
    0.5
}
fn d_retrieve() -> f64 {
    0.3
}
fn d_neighbour() -> f64 {
    0.1
}
fn d_ratio() -> [f64; 2] {
    [0.5, 2.0]
}
fn d_retries() -> u32 {
    1
}

/// Knobs of the annotation phases. Unset optional fields are derived from
/// the frame size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Coverage gate: a frame passes when coverage is strictly above it.
    #[serde(default = "d_rho")]
    pub rho: f64,
    /// Match threshold used wherever a more specific one is not set.
    #[serde(default = "d_tau")]
    pub tau: f64,
    pub stitch_tau: Option<f64>,
    pub shift_tau: Option<f64>,
    #[serde(default = "d_pad")]
    pub pad_fraction: f64,
    /// Defaults to the frame height.
    pub patch_width: Option<u32>,
    /// Defaults to half the patch width.
    pub stride: Option<u32>,
    /// Defaults to 1% of the frame width.
    pub shift_magnitude: Option<u32>,
    /// Explicit `[d_row, d_col]` list replacing the 8-neighbourhood.
    pub shift_directions: Option<Vec<[i64; 2]>>,
    #[serde(default = "d_min_blank")]
    pub min_blank_area_fraction: f64,
    #[serde(default = "d_true")]
    pub count_stuff_toward_coverage: bool,
    /// 4 or 8.
    #[serde(default = "d_conn")]
    pub connectivity: u8,
    #[serde(default = "d_half")]
    pub label_overlap: f64,
    #[serde(default = "d_retrieve")]
    pub retrieve_iou: f64,
    #[serde(default = "d_neighbour")]
    pub neighbour_distance_fraction: f64,
    #[serde(default = "d_ratio")]
    pub area_ratio: [f64; 2],
    #[serde(default = "d_half")]
    pub area_change: f64,
    /// Frames a track request covers; defaults to the rest of the video.
    pub tracker_horizon: Option<usize>,
    /// Extra attempts for a frame whose backend calls failed.
    #[serde(default = "d_retries")]
    pub backend_retries: u32,
    /// Backend ids; each defaults to the first registered backend of its
    /// role. Every panoptic backend is used.
    pub entity: Option<String>,
    pub tracker: Option<String>,
    pub chat: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) { Ok(()) } else { Err(format!("{name} = {v} must lie in [0, 1]")) }
        };
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(format!("rho = {} must lie in (0, 1]", self.rho));
        }
        unit("tau", self.tau)?;
        unit("stitch_tau", self.stitch_tau.unwrap_or(0.0))?;
        unit("shift_tau", self.shift_tau.unwrap_or(0.0))?;
        unit("min_blank_area_fraction", self.min_blank_area_fraction)?;
        unit("label_overlap", self.label_overlap)?;
        unit("retrieve_iou", self.retrieve_iou)?;
        if !(0.0..=0.5).contains(&self.pad_fraction) {
            return Err(format!("pad_fraction = {} must lie in [0, 0.5]", self.pad_fraction));
        }
        if Connectivity::from_neighbours(self.connectivity).is_none() {
            return Err("connectivity must be 4 or 8".into());
        }
        if !(self.area_ratio[0] > 0.0 && self.area_ratio[0] <= self.area_ratio[1]) {
            return Err("area_ratio must be [low, high] with 0 < low <= high".into());
        }
        if self.tracker_horizon == Some(0) {
            return Err("tracker_horizon must be at least 1".into());
        }
        self.shift(GridDims::erp(2048, 1024).expect("valid")).validate()
    }

    pub fn connectivity(&self) -> Connectivity {
        Connectivity::from_neighbours(self.connectivity).unwrap_or_default()
    }

    pub fn shift(&self, dims: GridDims) -> ShiftConfig {
        let tau = self.shift_tau.unwrap_or(self.tau);
        match &self.shift_directions {
            Some(dirs) => ShiftConfig { directions: dirs.iter().map(|d| (d[0], d[1])).collect(), tau },
            None => {
                let m = self.shift_magnitude.unwrap_or_else(|| ((dims.width as f64 * 0.01).round() as u32).max(1));
                ShiftConfig::eight_neighbourhood(m as i64, tau)
            }
        }
    }

    pub fn sdr_settings(&self, dims: GridDims) -> SdrSettings {
        let patch_width = self.patch_width.unwrap_or(dims.height);
        SdrSettings {
            pad_fraction: self.pad_fraction,
            patch_width,
            stride: self.stride.unwrap_or((patch_width / 2).max(1)),
            stitch_tau: self.stitch_tau.unwrap_or(self.tau),
            label_overlap: self.label_overlap,
            shift: self.shift(dims),
        }
    }

    pub fn agent_settings(&self) -> AgentSettings {
        AgentSettings {
            neighbour_distance_fraction: self.neighbour_distance_fraction,
            area_ratio: (self.area_ratio[0], self.area_ratio[1]),
            retrieve_iou: self.retrieve_iou,
            area_change: self.area_change,
        }
    }
}

fn d_width() -> u32 {
    2048
}
fn d_height() -> u32 {
    1024
}
fn d_min_s() -> f64 {
    5.0
}
fn d_max_s() -> f64 {
    30.0
}

/// Admission rules for source videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    #[serde(default = "d_width")]
    pub width: u32,
    #[serde(default = "d_height")]
    pub height: u32,
    #[serde(default = "d_min_s")]
    pub min_seconds: f64,
    #[serde(default = "d_max_s")]
    pub max_seconds: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

/// The whole configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub ingest: IngestConfig,
    /// Taxonomy file, relative to the config file.
    pub taxonomy: PathBuf,
    /// Directory overriding the built-in prompt templates.
    pub prompts: Option<PathBuf>,
    #[serde(default)]
    pub backend: Vec<BackendConfig>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Config {
    /// Reads `path` and applies `key=value` overrides (dotted keys, TOML
    /// values; bare words are taken as strings).
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, overrides, base).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str, overrides: &[String], base_dir: PathBuf) -> Result<Self, String> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Config = toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| e.to_string())?;
        cfg.base_dir = base_dir;
        cfg.pipeline.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) }
    }

    /// Hash of everything that influences annotation output: the pipeline
    /// section, the backend registry and the taxonomy file.
    pub fn digest(&self) -> Result<String, String> {
        #[derive(Serialize)]
        struct Canon<'a> {
            pipeline: &'a PipelineConfig,
            backend: &'a [BackendConfig],
        }
        let canon = toml::to_string(&Canon { pipeline: &self.pipeline, backend: &self.backend }).map_err(|e| e.to_string())?;
        let tax_path = self.resolve(&self.taxonomy);
        let tax = std::fs::read(&tax_path).map_err(|e| format!("{}: {e}", tax_path.display()))?;
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        h.update(b"\0");
        h.update(&tax);
        Ok(hex::encode(h.finalize()))
    }
}

fn apply_override(table: &mut toml::Table, o: &str) -> Result<(), String> {
    let (key, raw) = o.split_once('=').ok_or_else(|| format!("override {o:?} is not key=value"))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("override {key:?}: {p} is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!((c.rho, c.tau, c.pad_fraction, c.min_blank_area_fraction), (0.9, 0.5, 0.25, 0.0005));
        assert!(c.count_stuff_toward_coverage);
        let d = GridDims::erp(2048, 1024).unwrap();
        let s = c.sdr_settings(d);
        assert_eq!((s.patch_width, s.stride), (1024, 512));
        assert_eq!(s.shift.directions.len(), 9);
        assert_eq!(s.shift.directions[1], (-20, 0));
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = Config::parse("taxonomy = \"t.toml\"\n", &["pipeline.rho=0.95".into(), "prompts=p".into()], PathBuf::new())
            .unwrap();
        assert_eq!(c.pipeline.rho, 0.95);
        assert_eq!(c.prompts, Some(PathBuf::from("p")));
        assert!(Config::parse("taxonomy = \"t\"\n[pipeline]\nrhoo = 1\n", &[], PathBuf::new()).is_err());
        assert!(Config::parse("taxonomy = \"t\"\n", &["pipeline.bogus=1".into()], PathBuf::new()).is_err());
        assert!(Config::parse("taxonomy = \"t\"\n", &["pipeline.rho=0".into()], PathBuf::new()).is_err());
        assert!(Config::parse("taxonomy = \"t\"\n", &["novalue".into()], PathBuf::new()).is_err());
    }
}
