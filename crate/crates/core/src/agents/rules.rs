//! Deterministic stand-in for the chat model. It reads the structured part
//! of each prompt and answers by fixed rules, so it sees exactly what a real
//! model would see.

use std::collections::BTreeMap;
use std::path::Path;

use super::Taxonomy;
use crate::backend::{wire::COMPLETE_PATH, BackendError, Transport};

pub struct RulesAgent {
    taxonomy: Taxonomy,
}

impl RulesAgent {
    pub fn load(taxonomy_path: &Path) -> Result<Self, String> {
        Ok(Self::new(Taxonomy::load(taxonomy_path)?))
    }

    pub fn new(taxonomy: Taxonomy) -> Self {
        Self { taxonomy }
    }

    /// Answer to one prompt, or `None` if the prompt is not understood.
    pub fn answer(&self, prompt: &str) -> Option<String> {
        let role = prompt.lines().next()?.strip_prefix("ROLE: ")?;
        match role {
            "semantic-label-checker" => Some(self.label(prompt)),
            "blank-area-checker" => self.blank(prompt),
            "object-retriever" => self.retrieve(prompt),
            "annotation-checker" => self.check(prompt),
            _ => None,
        }
    }

    fn label(&self, prompt: &str) -> String {
        let mut best: Option<(f64, String)> = None;
        for rest in tagged(prompt, "candidate ") {
            let mut it = rest.splitn(3, ' ');
            let (Some(o), Some(src), Some(label)) = (it.next(), it.next(), it.next()) else { continue };
            let (Ok(overlap), Some(canon)) = (o.parse::<f64>(), self.taxonomy.normalize(label, Some(src))) else {
                continue;
            };
            if best.as_ref().is_none_or(|(b, _)| overlap > *b) {
                best = Some((overlap, canon));
            }
        }
        let label = best.map(|(_, l)| l).unwrap_or_else(|| self.taxonomy.fallback.clone());
        format!("LABEL: {label}\n")
    }

    fn blank(&self, prompt: &str) -> Option<String> {
        let width: f64 = field(prompt, "FRAME: ", "width")?;
        let region = tagged(prompt, "REGION: ").next()?;
        let area: f64 = after(region, "area")?;
        let centroid: (f64, f64) = (after(region, "centroid")?, after_nth(region, "centroid", 1)?);
        let left: u8 = after(region, "left-border")?;
        let right: u8 = after(region, "right-border")?;
        let distance: f64 = tagged(prompt, "DISTANCE: ").next()?.parse().ok()?;
        let ratio = tagged(prompt, "AREA-RATIO: ").next()?;
        let (lo, hi): (f64, f64) = {
            let mut it = ratio.split(' ');
            (it.next()?.parse().ok()?, it.next()?.parse().ok()?)
        };
        if left == 1 || right == 1 {
            return Some("KIND: border\n".into());
        }
        // nearest instance among those of comparable size
        let mut nearest: Option<f64> = None;
        for rest in tagged(prompt, "instance ") {
            let t: Vec<&str> = rest.splitn(5, ' ').collect();
            if t.len() < 4 {
                continue;
            }
            let (Ok(a), Ok(cy), Ok(cx)) = (t[1].parse::<f64>(), t[2].parse::<f64>(), t[3].parse::<f64>()) else {
                continue;
            };
            if a <= 0.0 || !(lo..=hi).contains(&(area / a)) {
                continue;
            }
            let mut dc = (centroid.1 - cx).abs().rem_euclid(width);
            dc = dc.min(width - dc);
            let d = ((centroid.0 - cy).powi(2) + dc * dc).sqrt();
            if nearest.is_none_or(|n| d < n) {
                nearest = Some(d);
            }
        }
        let kind = if nearest.is_some_and(|d| d <= distance) { "existing" } else { "new" };
        Some(format!("KIND: {kind}\n"))
    }

    fn retrieve(&self, prompt: &str) -> Option<String> {
        let threshold: f64 = tagged(prompt, "THRESHOLD: ").next()?.parse().ok()?;
        let mut best: Option<(f64, u32)> = None;
        for rest in tagged(prompt, "instance ") {
            let t: Vec<&str> = rest.splitn(3, ' ').collect();
            let (Some(Ok(id)), Some(Ok(iou))) = (t.first().map(|s| s.parse::<u32>()), t.get(1).map(|s| s.parse::<f64>()))
            else {
                continue;
            };
            let better = match best {
                None => true,
                Some((b, bid)) => iou > b || (iou == b && id < bid),
            };
            if better {
                best = Some((iou, id));
            }
        }
        Some(match best {
            Some((iou, id)) if iou >= threshold => format!("INSTANCE: {id}\n"),
            _ => "INSTANCE: none\n".into(),
        })
    }

    fn check(&self, prompt: &str) -> Option<String> {
        let width: f64 = field(prompt, "VIDEO: ", "width")?;
        let area_change: f64 = tagged(prompt, "AREA-CHANGE: ").next()?.parse().ok()?;
        let jump: f64 = tagged(prompt, "CENTROID-JUMP: ").next()?.parse().ok()?;
        let classes: Vec<&str> = tagged(prompt, "class ").collect();

        struct Seen {
            area: f64,
            centroid: (f64, f64),
        }
        let mut coverages = Vec::new();
        // instance id -> frame -> observation; plus the label
        let mut tracks: BTreeMap<u32, (String, BTreeMap<usize, Seen>)> = BTreeMap::new();
        let body = prompt.split_once("\nFRAMES:\n")?.1;
        let mut frame = None;
        for line in body.lines() {
            if let Some(rest) = line.strip_prefix("frame ") {
                let mut it = rest.split(' ');
                frame = Some(it.next()?.parse::<usize>().ok()?);
                it.next()?;
                coverages.push(it.next()?.parse::<f64>().ok()?);
            } else if let Some(rest) = line.strip_prefix("instance ") {
                let t: Vec<&str> = rest.splitn(5, ' ').collect();
                if t.len() != 5 {
                    return None;
                }
                let seen = Seen { area: t[1].parse().ok()?, centroid: (t[2].parse().ok()?, t[3].parse().ok()?) };
                let entry = tracks.entry(t[0].parse().ok()?).or_insert_with(|| (t[4].to_string(), BTreeMap::new()));
                entry.1.insert(frame?, seen);
            }
        }
        if coverages.is_empty() {
            return None;
        }
        let score = 10.0 * coverages.iter().sum::<f64>() / coverages.len() as f64;

        let mut issues: Vec<(usize, u32, u8, String)> = Vec::new();
        for (&id, (label, frames)) in &tracks {
            let (&first, &last) = (frames.keys().next()?, frames.keys().next_back()?);
            if !classes.contains(&label.as_str()) {
                issues.push((first, id, 1, format!("wrong_label label {label} is not a class")));
            }
            for t in first..=last {
                if !frames.contains_key(&t) {
                    issues.push((t, id, 0, format!("missing {label} is annotated before and after this frame")));
                }
            }
            for (t, cur) in frames.iter().skip(1) {
                let Some(prev) = t.checked_sub(1).and_then(|p| frames.get(&p)) else { continue };
                if (cur.area - prev.area).abs() / prev.area <= area_change {
                    continue;
                }
                let mut dc = (cur.centroid.1 - prev.centroid.1).abs().rem_euclid(width);
                dc = dc.min(width - dc);
                let d = ((cur.centroid.0 - prev.centroid.0).powi(2) + dc * dc).sqrt();
                if d > jump {
                    issues.push((*t, id, 3, format!("id_switch {label} changes size and jumps {d:.0} px")));
                } else {
                    issues.push((*t, id, 2, format!("bad_boundary {label} area changes from {} to {}", prev.area, cur.area)));
                }
            }
        }
        issues.sort();
        let mut out = format!("SCORE: {}\n", score.clamp(0.0, 10.0));
        for (t, id, _, text) in issues {
            let (kind, comment) = text.split_once(' ')?;
            out.push_str(&format!("ISSUE: {t} {id} {kind} {comment}\n"));
        }
        Some(out)
    }
}

/// Remainders of the lines starting with `prefix`.
fn tagged<'p>(prompt: &'p str, prefix: &'p str) -> impl Iterator<Item = &'p str> {
    prompt.lines().filter_map(move |l| l.strip_prefix(prefix))
}

/// Token following `key` on a space-separated line.
fn after<T: std::str::FromStr>(line: &str, key: &str) -> Option<T> {
    after_nth(line, key, 0)
}

fn after_nth<T: std::str::FromStr>(line: &str, key: &str, n: usize) -> Option<T> {
    let toks: Vec<&str> = line.split(' ').collect();
    let i = toks.iter().position(|t| *t == key)?;
    toks.get(i + 1 + n)?.parse().ok()
}

fn field<T: std::str::FromStr>(prompt: &str, prefix: &str, key: &str) -> Option<T> {
    after(tagged(prompt, prefix).next()?, key)
}

impl Transport for RulesAgent {
    fn post(&self, path: &str, body: &str) -> Result<String, BackendError> {
        if path != COMPLETE_PATH {
            return Err(BackendError::Remote { backend: "rules".into(), message: format!("no route {path}") });
        }
        Ok(self.answer(body).unwrap_or_else(|| "I cannot help with that.\n".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AgentSettings, Agents, BlankKind, InstanceSummary, LabelCandidate, LabelQuery, Prompts};
    use crate::annotation::{Entry, FrameAnnotation, IssueKind, Provenance, VideoAnnotation};
    use crate::backend::{BackendConfig, Gateway, Role};
    use crate::mask::{BlankRegion, GridDims, Mask};

    fn taxonomy() -> Taxonomy {
        Taxonomy::parse(
            r#"
            id = "demo"
            classes = ["tree", "car", "person", "plane", "wall", "other animals", "sky", "object"]
            stuff = ["sky", "wall"]
            fallback = "object"
            [synonyms]
            "vegetation" = "tree"
            "airplane" = "plane"
            "coco:automobile" = "car"
            "zebra" = "other animals"
            [prefixes]
            "wall-" = "wall"
            "#,
        )
        .unwrap()
    }

    fn gateway() -> Gateway {
        let mut g = Gateway::empty();
        let cfg = BackendConfig {
            id: "chat".into(),
            role: Role::Chat,
            endpoint: "mock:rules:x".into(),
            taxonomy: None,
            max_concurrent: 4,
            timeout_secs: 1,
        };
        g.register(cfg, Box::new(RulesAgent::new(taxonomy()))).unwrap();
        g
    }

    fn with_agents<T>(f: impl FnOnce(&Agents) -> T) -> T {
        let (g, t, p) = (gateway(), taxonomy(), Prompts::embedded());
        f(&Agents { gateway: &g, chat: "chat", taxonomy: &t, prompts: &p, settings: AgentSettings::default() })
    }

    /// Hand-built table: candidate sets and the label a max-overlap rule
    /// over normalized labels must produce.
    #[test]
    fn label_rule_table() {
        let table: &[(&[(&str, &str, f64)], &str)] = &[
            (&[("automobile", "coco", 0.7), ("vegetation", "cityscapes", 0.9)], "tree"),
            (&[("automobile", "coco", 0.95), ("vegetation", "cityscapes", 0.9)], "car"),
            (&[("automobile", "ade20k", 0.95), ("wall-brick", "coco", 0.6)], "wall"),
            (&[("zebra", "coco", 0.6), ("airplane", "coco", 0.6)], "other animals"),
            (&[("spaceship", "coco", 0.9), ("hovercraft", "ade20k", 0.8)], "object"),
            (&[], "object"),
        ];
        with_agents(|a| {
            for (cands, want) in table {
                let d = GridDims::erp(20, 10).unwrap();
                let candidates = cands
                    .iter()
                    .map(|(l, s, o)| LabelCandidate { label: l.to_string(), source_taxonomy: s.to_string(), overlap: *o })
                    .collect();
                let q = LabelQuery::summarize(&Mask::rect(d, 1, 1, 2, 2), candidates).unwrap();
                let got = a.check_semantic_label(&q).unwrap();
                assert_eq!(got.label, *want, "{cands:?}");
                assert!(a.taxonomy.contains(&got.label));
            }
        });
    }

    #[test]
    fn blank_rules() {
        let d = GridDims::erp(200, 100).unwrap();
        let prev = vec![
            InstanceSummary { instance_id: 1, label: "person".into(), centroid: (50.0, 60.0), area: 100 },
            InstanceSummary { instance_id: 2, label: "sky".into(), centroid: (10.0, 100.0), area: 4000 },
        ];
        with_agents(|a| {
            // where instance 1 was, same size
            let r = BlankRegion::new(Mask::rect(d, 45, 55, 10, 10)).unwrap();
            assert_eq!(a.classify_blank(&r, &prev, 3, d).unwrap(), BlankKind::ExistingMask);
            // far away from everything
            let r = BlankRegion::new(Mask::rect(d, 45, 140, 10, 10)).unwrap();
            assert_eq!(a.classify_blank(&r, &prev, 3, d).unwrap(), BlankKind::NewMask);
            // close but three times larger
            let r = BlankRegion::new(Mask::rect(d, 40, 50, 20, 15)).unwrap();
            assert_eq!(a.classify_blank(&r, &prev, 3, d).unwrap(), BlankKind::NewMask);
            let r = BlankRegion::new(Mask::rect(d, 45, 195, 10, 10)).unwrap();
            assert_eq!(a.classify_blank(&r, &prev, 3, d).unwrap(), BlankKind::BorderMask);
        });
    }

    /// Exhaustive IoU scan with the lower-id tie break, the retriever's
    /// oracle.
    fn oracle(region: &Mask, prev: &FrameAnnotation, threshold: f64) -> Option<u32> {
        let mut best: Option<(f64, u32)> = None;
        for e in prev.entries() {
            let inter = region.decode().iter().zip(e.mask.decode()).filter(|(a, b)| **a && *b).count() as f64;
            let uni = region.decode().iter().zip(e.mask.decode()).filter(|(a, b)| **a || *b).count() as f64;
            let iou = inter / uni;
            if best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, e.instance_id));
            }
        }
        best.filter(|(iou, _)| *iou >= threshold).map(|(_, id)| id)
    }

    #[test]
    fn retriever_matches_exhaustive_scan() {
        let d = GridDims::erp(40, 20).unwrap();
        let entry = |id, m: Mask| Entry { instance_id: id, mask: m, label: "car".into(), provenance: Provenance::Tracked };
        let prev = FrameAnnotation::from_entries(
            4,
            vec![
                entry(3, Mask::rect(d, 0, 0, 5, 5)),
                entry(7, Mask::rect(d, 10, 10, 5, 5)),
                entry(9, Mask::rect(d, 10, 20, 5, 5)),
            ],
        )
        .unwrap();
        let regions = [
            Mask::rect(d, 10, 10, 5, 4),
            Mask::rect(d, 10, 15, 5, 5),
            Mask::rect(d, 10, 13, 5, 4),
            Mask::rect(d, 0, 30, 3, 3),
            Mask::rect(d, 1, 1, 3, 3),
        ];
        with_agents(|a| {
            for m in regions {
                let r = BlankRegion::new(m.clone()).unwrap();
                assert_eq!(a.retrieve_object(&r, &prev).unwrap(), oracle(&m, &prev, 0.3), "{m:?}");
            }
            let r = BlankRegion::new(Mask::rect(d, 10, 10, 5, 5)).unwrap();
            assert_eq!(a.retrieve_object(&r, &FrameAnnotation::new(4)).unwrap(), None);
        });
    }

    #[test]
    fn tie_goes_to_lower_id() {
        let d = GridDims::erp(40, 20).unwrap();
        let entry = |id, m: Mask| Entry { instance_id: id, mask: m, label: "car".into(), provenance: Provenance::Tracked };
        let prev = FrameAnnotation::from_entries(
            0,
            vec![entry(4, Mask::rect(d, 0, 0, 4, 4)), entry(2, Mask::rect(d, 0, 8, 4, 4))],
        )
        .unwrap();
        // covers both: IoU 16/48 each
        let r = BlankRegion::new(Mask::rect(d, 0, 0, 4, 12)).unwrap();
        with_agents(|a| assert_eq!(a.retrieve_object(&r, &prev).unwrap(), Some(2)));
    }

    fn video(frames: usize, drop_at: Option<usize>) -> VideoAnnotation {
        let d = GridDims::erp(40, 20).unwrap();
        let mut v = VideoAnnotation::new("v", d, frames);
        for t in 0..frames {
            let thing = Mask::rect(d, 5, 5 + t as i64, 4, 4);
            v.frames[t].upsert(Entry {
                instance_id: 1,
                mask: thing.complement(),
                label: "sky".into(),
                provenance: Provenance::Sdr,
            });
            if drop_at != Some(t) {
                v.frames[t].upsert(Entry { instance_id: 2, mask: thing, label: "car".into(), provenance: Provenance::Tracked });
            }
        }
        v.register(1, "sky");
        v.register(2, "car");
        v.refresh_extents();
        v
    }

    #[test]
    fn golden_video_scores_ten() {
        let r = with_agents(|a| a.check_annotation(&video(5, None)).unwrap());
        assert_eq!(r.score, 10.0);
        assert!(r.issues.is_empty());
    }

    #[test]
    fn one_missing_frame_gives_one_issue() {
        let r = with_agents(|a| a.check_annotation(&video(5, Some(2))).unwrap());
        assert_eq!(r.issues.len(), 1, "{:?}", r.issues);
        assert_eq!((r.issues[0].frame_index, r.issues[0].instance_id, r.issues[0].kind), (2, Some(2), IssueKind::Missing));
        assert!(r.score < 10.0);
    }

    #[test]
    fn empty_video_is_rejected() {
        let d = GridDims::erp(40, 20).unwrap();
        assert!(with_agents(|a| a.check_annotation(&VideoAnnotation::new("v", d, 0)).is_err()));
    }

    #[test]
    fn abrupt_area_changes() {
        let d = GridDims::erp(400, 20).unwrap();
        let mut v = VideoAnnotation::new("v", d, 3);
        let e = |m| Entry { instance_id: 1, mask: m, label: "car".into(), provenance: Provenance::Tracked };
        v.frames[0].upsert(e(Mask::rect(d, 0, 10, 4, 10)));
        v.frames[1].upsert(e(Mask::rect(d, 0, 10, 4, 4)));
        v.frames[2].upsert(e(Mask::rect(d, 0, 200, 4, 10)));
        v.register(1, "car");
        v.refresh_extents();
        let r = with_agents(|a| a.check_annotation(&v).unwrap());
        let kinds: Vec<_> = r.issues.iter().map(|i| (i.frame_index, i.kind)).collect();
        assert_eq!(kinds, vec![(1, IssueKind::BadBoundary), (2, IssueKind::IdSwitch)]);
    }

    #[test]
    fn same_prompt_same_answer() {
        let agent = RulesAgent::new(taxonomy());
        let p = "ROLE: object-retriever\nTHRESHOLD: 0.3\ninstance 2 0.5 car\ninstance 1 0.5 car\nEND\n";
        assert_eq!(agent.answer(p), agent.answer(p));
        assert_eq!(agent.answer(p).unwrap(), "INSTANCE: 1\n");
        assert_eq!(agent.answer("hello"), None);
    }
}
