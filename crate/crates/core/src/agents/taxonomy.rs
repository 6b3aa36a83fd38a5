use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

/// Closed label space plus the merge rules that fold source-model labels
/// into it.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taxonomy {
    pub id: String,
    pub classes: Vec<String>,
    /// Classes that count as amorphous background regions.
    #[serde(default)]
    pub stuff: Vec<String>,
    /// Label used when nothing better is known.
    pub fallback: String,
    /// `taxonomy:label` or bare `label` mapped to a canonical class.
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
    /// Label prefixes mapped to a canonical class, e.g. `wall-` to `wall`.
    #[serde(default)]
    pub prefixes: BTreeMap<String, String>,
}

impl Taxonomy {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let t: Taxonomy = toml::from_str(text).map_err(|e| e.to_string())?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if !crate::textio::is_label(c) || !seen.insert(c.as_str()) {
                return Err(format!("class {c:?} is empty, malformed or repeated"));
            }
        }
        if seen.is_empty() {
            return Err("taxonomy has no classes".into());
        }
        if !seen.contains(self.fallback.as_str()) {
            return Err(format!("fallback {:?} is not a class", self.fallback));
        }
        for s in &self.stuff {
            if !seen.contains(s.as_str()) {
                return Err(format!("stuff label {s:?} is not a class"));
            }
        }
        for (k, v) in self.synonyms.iter().chain(&self.prefixes) {
            if !seen.contains(v.as_str()) {
                return Err(format!("{k:?} maps to {v:?}, which is not a class"));
            }
        }
        for k in self.synonyms.keys() {
            if seen.contains(k.as_str()) {
                return Err(format!("class {k:?} is also a synonym key"));
            }
        }
        Ok(())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.classes.iter().any(|c| c == label)
    }

    pub fn is_stuff(&self, label: &str) -> bool {
        self.stuff.iter().any(|c| c == label)
    }

    /// Canonical class for `label` as named by `source` (a taxonomy id), or
    /// `None` when the label is outside the merge rules. Canonical labels
    /// map to themselves, so normalizing twice changes nothing.
    pub fn normalize(&self, label: &str, source: Option<&str>) -> Option<String> {
        if self.contains(label) {
            return Some(label.to_string());
        }
        if let Some(src) = source {
            if let Some(c) = self.synonyms.get(&format!("{src}:{label}")) {
                return Some(c.clone());
            }
        }
        if let Some(c) = self.synonyms.get(label) {
            return Some(c.clone());
        }
        // longest matching prefix wins
        self.prefixes
            .iter()
            .filter(|(p, _)| label.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map(|(_, c)| c.clone())
    }
}
