//! Semantic- and distortion-aware refinement of one frame: segment the
//! wrap-padded frame patch by patch with the entity and panoptic backends,
//! stitch and fold the results, label each entity through the label checker
//! and settle its mask by shift consensus with the tracker.

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{AgentError, Agents, LabelCandidate, LabelQuery};
use crate::annotation::{Entry, FrameAnnotation, InstanceId, Provenance};
use crate::backend::{BackendError, FrameRef, Gateway, PanopticProposal, TrackRequest};
use crate::geometry::{
    fold_padded_mask, make_pad_plan, make_patch_plan, stitch_patch_masks, GeometryError, PadPlan, PatchPlan, Window,
};
use crate::mask::{GridDims, Mask, MaskError};
use crate::UnionFind;

#[derive(Debug, Error)]
pub enum SdrError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("{0}")]
    Config(String),
}

/// Prompt offsets tried by the consensus step, with the match threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftConfig {
    /// `(d_row, d_col)`; must hold `(0, 0)`.
    pub directions: Vec<(i64, i64)>,
    pub tau: f64,
}

impl ShiftConfig {
    /// Identity followed by the eight compass neighbours, clockwise from
    /// north, at distance `magnitude`.
    pub fn eight_neighbourhood(magnitude: i64, tau: f64) -> Self {
        let m = magnitude;
        let directions = vec![(0, 0), (-m, 0), (-m, m), (0, m), (m, m), (m, 0), (m, -m), (0, -m), (-m, -m)];
        Self { directions, tau }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.directions.contains(&(0, 0)) {
            return Err("shift directions must include (0, 0)".into());
        }
        for (i, d) in self.directions.iter().enumerate() {
            if self.directions[..i].contains(d) {
                return Err(format!("shift direction {d:?} repeated"));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(format!("shift tau {} outside [0, 1]", self.tau));
        }
        Ok(())
    }
}

/// Geometry and thresholds of one SDR pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SdrSettings {
    pub pad_fraction: f64,
    pub patch_width: u32,
    pub stride: u32,
    /// Match threshold for stitching windows and folding pad replicas.
    pub stitch_tau: f64,
    /// Minimum share of an entity covered by a panoptic proposal for its
    /// label to become a candidate.
    pub label_overlap: f64,
    pub shift: ShiftConfig,
}

/// Backends and agents an SDR pass talks to.
pub struct SdrContext<'a> {
    pub gateway: &'a Gateway,
    pub entity: &'a str,
    pub panoptic: &'a [String],
    pub tracker: &'a str,
    pub agents: &'a Agents<'a>,
    pub settings: &'a SdrSettings,
}

/// One direction's contribution to a consensus decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    pub direction: (i64, i64),
    /// Digest of the tracker's mask; `None` when the shifted prompt left the
    /// canvas and the direction was skipped.
    pub digest: Option<String>,
    /// The returned mask matches the winner.
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consensus {
    pub mask: Mask,
    pub votes: Vec<Vote>,
    pub winner_votes: usize,
    /// Every direction came back empty and the prompt was kept.
    pub fell_back: bool,
}

/// Short content hash of a mask, used in vote records.
pub fn mask_digest(m: &Mask) -> String {
    let h = Sha256::digest(m.to_text().as_bytes());
    hex::encode(&h[..8])
}

/// Shifts the prompt in every direction, tracks each shifted prompt for
/// one frame at `frame_index`, and returns the result that most others
/// agree with (`iou > tau`). Ties go to the larger IoU sum, then to the
/// earlier direction.
pub fn consensus_refine(
    gateway: &Gateway,
    tracker: &str,
    video_id: &str,
    frame_index: usize,
    prompt: &Mask,
    cfg: &ShiftConfig,
) -> Result<Consensus, SdrError> {
    if prompt.is_empty() {
        return Err(SdrError::Config("consensus needs a nonempty prompt".into()));
    }
    cfg.validate().map_err(SdrError::Config)?;
    let returned: Vec<Option<Mask>> = cfg
        .directions
        .par_iter()
        .map(|&(dr, dc)| {
            let shifted = prompt.translate(dr, dc);
            if shifted.is_empty() {
                return Ok(None);
            }
            let req = TrackRequest { video_id: video_id.into(), prompt_frame: frame_index, prompt_mask: shifted, horizon: 1 };
            let mut out = gateway.track(&req, tracker)?;
            Ok(Some(out.remove(0).1))
        })
        .collect::<Result<_, BackendError>>()?;
    let candidates: Vec<(usize, &Mask)> =
        returned.iter().enumerate().filter_map(|(i, m)| m.as_ref().filter(|m| !m.is_empty()).map(|m| (i, m))).collect();

    // (votes, iou sum) for every candidate, counted over all candidates
    let mut best: Option<(usize, usize, f64)> = None;
    for &(i, m) in &candidates {
        let mut votes = 0;
        let mut sum = 0.0;
        for &(_, other) in &candidates {
            let iou = m.iou(other)?;
            sum += iou;
            if iou > cfg.tau {
                votes += 1;
            }
        }
        let better = match best {
            None => true,
            Some((_, bv, bs)) => votes > bv || (votes == bv && sum > bs),
        };
        if better {
            best = Some((i, votes, sum));
        }
    }

    let (mask, winner_votes, fell_back) = match best {
        Some((i, v, _)) => (returned[i].clone().expect("winner is a candidate"), v, false),
        None => (prompt.clone(), 0, true),
    };
    let mut votes = Vec::with_capacity(returned.len());
    for (dir, r) in cfg.directions.iter().zip(&returned) {
        let matched = match r {
            Some(m) if !m.is_empty() && !fell_back => m.iou(&mask)? > cfg.tau,
            _ => false,
        };
        votes.push(Vote { direction: *dir, digest: r.as_ref().map(mask_digest), matched });
    }
    Ok(Consensus { mask, votes, winner_votes, fell_back })
}

/// Label candidates for an entity: panoptic proposals covering at least
/// `min_overlap` of it, with the covered share.
pub fn build_label_query(
    entity: &Mask,
    panoptic: &[PanopticProposal],
    min_overlap: f64,
) -> Result<LabelQuery, SdrError> {
    let area = entity.area() as f64;
    let mut candidates = Vec::new();
    for p in panoptic {
        let overlap = entity.intersection_area(&p.mask)? as f64 / area;
        if overlap >= min_overlap {
            candidates.push(LabelCandidate {
                label: p.label.clone(),
                source_taxonomy: p.source_taxonomy.clone(),
                overlap,
            });
        }
    }
    LabelQuery::summarize(entity, candidates).ok_or_else(|| SdrError::Config("empty entity mask".into()))
}

/// Merges masks where one mostly contains the other
/// (`|a ∩ b| / min(|a|, |b|) > tau`), transitively. Pad replicas of an
/// object fold onto the same source pixels and collapse here.
pub fn merge_contained(masks: Vec<Mask>, tau: f64) -> Result<Vec<Mask>, MaskError> {
    let masks: Vec<Mask> = masks.into_iter().filter(|m| !m.is_empty()).collect();
    let mut uf = UnionFind::new(masks.len());
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            let inter = masks[i].intersection_area(&masks[j])? as f64;
            let small = masks[i].area().min(masks[j].area()) as f64;
            if inter / small > tau {
                uf.union(i, j);
            }
        }
    }
    let Some(first) = masks.first() else { return Ok(Vec::new()) };
    let dims = first.dims();
    let mut out = Vec::new();
    for g in uf.groups() {
        out.push(crate::mask::union_all(g.iter().map(|&i| &masks[i]), dims)?);
    }
    out.sort_by(|a, b| a.runs().cmp(b.runs()));
    out.dedup();
    Ok(out)
}

/// One labelled, refined instance of an SDR pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedInstance {
    pub instance_id: InstanceId,
    pub mask: Mask,
    pub label: String,
    pub consensus: Consensus,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SdrOutput {
    pub instances: Vec<RefinedInstance>,
    /// Human-readable provenance lines.
    pub records: Vec<String>,
    /// Problems for the review queue, with the instance when known.
    pub escalations: Vec<(Option<InstanceId>, String)>,
}

impl SdrOutput {
    pub fn annotation(&self, frame_index: usize) -> FrameAnnotation {
        let entries = self
            .instances
            .iter()
            .map(|r| Entry {
                instance_id: r.instance_id,
                mask: r.mask.clone(),
                label: r.label.clone(),
                provenance: Provenance::Sdr,
            })
            .collect();
        FrameAnnotation::from_entries(frame_index, entries).expect("fresh ids are distinct")
    }
}

/// Share of an entity that must fall inside the target region in region
/// mode.
const REGION_OVERLAP: f64 = 0.5;

/// Runs SDR on frame `frame_index` of `video_id`. Fresh ids start at
/// `first_id`. With `region`, only the column window around the region is
/// segmented and only entities lying mostly inside it are kept.
pub fn run_sdr(
    ctx: &SdrContext,
    video_id: &str,
    frame_index: usize,
    source: GridDims,
    first_id: InstanceId,
    region: Option<&Mask>,
) -> Result<SdrOutput, SdrError> {
    if ctx.panoptic.is_empty() {
        return Err(SdrError::Config("SDR needs at least one panoptic backend".into()));
    }
    let s = ctx.settings;
    let pad = make_pad_plan(source, s.pad_fraction)?;
    let plan = match region {
        None => make_patch_plan(pad.padded, s.patch_width.min(pad.padded.width), s.stride)?,
        Some(r) => region_plan(r, &pad)?,
    };
    let mut out = SdrOutput::default();
    out.records.push(format!("sdr frame {frame_index} {}", pad.describe()));
    out.records.push(format!("sdr {}", plan.describe()));

    let view = |w: &Window| FrameRef {
        video_id: video_id.into(),
        frame_index,
        canvas: pad.padded,
        pad_cols: pad.pad_cols_each_side,
        shift_cols: 0,
        crop: Some(*w),
    };
    // every window is independent; results keep window order
    let per_window: Vec<(Vec<Mask>, Vec<Vec<PanopticProposal>>)> = plan
        .windows
        .par_iter()
        .map(|w| {
            let f = view(w);
            let ents = ctx.gateway.segment_entities(&f, ctx.entity)?.into_iter().map(|p| p.mask).collect();
            let pans = ctx
                .panoptic
                .iter()
                .map(|id| ctx.gateway.segment_panoptic(&f, id))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((ents, pans))
        })
        .collect::<Result<_, BackendError>>()?;

    let entity_patches: Vec<(usize, Vec<Mask>)> =
        per_window.iter().enumerate().map(|(i, (e, _))| (i, e.clone())).collect();
    let stitched = stitch_patch_masks(&entity_patches, &plan, s.stitch_tau)?;
    let folded = stitched.iter().map(|m| fold_padded_mask(m, &pad)).collect::<Result<Vec<_>, _>>()?;
    let mut entities = merge_contained(folded, s.stitch_tau)?;
    if let Some(r) = region {
        let mut kept = Vec::new();
        for e in entities {
            if e.intersection_area(r)? as f64 / e.area() as f64 >= REGION_OVERLAP {
                kept.push(e);
            }
        }
        entities = kept;
    }
    out.records.push(format!("sdr entities {}", entities.len()));

    let mut panoptic = Vec::new();
    for b in 0..ctx.panoptic.len() {
        panoptic.extend(stitch_panoptic(&per_window, b, &plan, &pad, s.stitch_tau)?);
    }

    let mut next = first_id;
    for entity in entities {
        let q = build_label_query(&entity, &panoptic, s.label_overlap)?;
        let decision = ctx.agents.check_semantic_label(&q)?;
        let consensus = consensus_refine(ctx.gateway, ctx.tracker, video_id, frame_index, &entity, &s.shift)?;
        let mut mask = consensus.mask.clone();
        if let Some(r) = region {
            // a consensus that snapped onto a neighbour would not fill the blank
            if mask.intersection_area(r)? == 0 {
                mask = entity.clone();
            }
        }
        // split proposals of one object converge to the same mask
        if let Some(dup) = out.instances.iter().find(|i| i.mask.matches(&mask, s.shift.tau).unwrap_or(false)) {
            out.records.push(format!("sdr entity merged into instance {}", dup.instance_id));
            continue;
        }
        let id = next;
        next += 1;
        let cands: Vec<String> = q
            .candidates
            .iter()
            .map(|c| format!("{}:{}@{}", c.source_taxonomy, c.label, c.overlap))
            .collect();
        out.records.push(format!(
            "sdr instance {id} label {} via {} candidates [{}]",
            decision.label,
            if decision.agent_called { "agent" } else { "unanimous" },
            cands.join(", ")
        ));
        out.records.push(format!(
            "sdr instance {id} consensus {}/{}{}",
            consensus.winner_votes,
            consensus.votes.len(),
            if consensus.fell_back { " fallback" } else { "" }
        ));
        for v in &consensus.votes {
            out.records.push(format!(
                "vote {id} {} {} {} {}",
                v.direction.0,
                v.direction.1,
                v.digest.as_deref().unwrap_or("skipped"),
                u8::from(v.matched)
            ));
        }
        if let Some(reason) = &decision.escalation {
            out.escalations.push((Some(id), reason.clone()));
        }
        if consensus.fell_back {
            out.escalations.push((Some(id), "consensus: every shifted prompt was lost".into()));
        }
        out.instances.push(RefinedInstance { instance_id: id, mask, label: decision.label, consensus });
    }
    Ok(out)
}

/// Proposals of panoptic backend `b`, stitched per label across windows
/// and folded onto the source frame.
fn stitch_panoptic(
    per_window: &[(Vec<Mask>, Vec<Vec<PanopticProposal>>)],
    b: usize,
    plan: &PatchPlan,
    pad: &PadPlan,
    tau: f64,
) -> Result<Vec<PanopticProposal>, SdrError> {
    use std::collections::BTreeMap;
    let mut by_label: BTreeMap<(String, String), Vec<(usize, Vec<Mask>)>> = BTreeMap::new();
    for (i, (_, pans)) in per_window.iter().enumerate() {
        for p in &pans[b] {
            let slot = by_label.entry((p.source_taxonomy.clone(), p.label.clone())).or_default();
            match slot.last_mut() {
                Some((w, ms)) if *w == i => ms.push(p.mask.clone()),
                _ => slot.push((i, vec![p.mask.clone()])),
            }
        }
    }
    let mut out = Vec::new();
    for ((tax, label), patches) in by_label {
        let stitched = stitch_patch_masks(&patches, plan, tau)?;
        let folded = stitched.iter().map(|m| fold_padded_mask(m, pad)).collect::<Result<Vec<_>, _>>()?;
        for mask in merge_contained(folded, tau)? {
            out.push(PanopticProposal { mask, label: label.clone(), source_taxonomy: tax.clone(), confidence: 1.0 });
        }
    }
    Ok(out)
}

/// A single window on the padded canvas spanning the region's columns plus
/// its own width again on each side.
fn region_plan(region: &Mask, pad: &PadPlan) -> Result<PatchPlan, SdrError> {
    let (start, width) =
        crate::agents::column_extent(region).ok_or_else(|| SdrError::Config("empty region".into()))?;
    let pw = pad.padded.width as i64;
    let w = pad.source.width as i64;
    // padded column of the region's first column; prefer the copy whose
    // extent lies inside the canvas
    let mut s = start as i64 + pad.pad_cols_each_side as i64;
    if s + width as i64 > pw {
        s -= w;
    }
    let lo = (s - width as i64).max(0);
    let hi = (s + 2 * width as i64).min(pw);
    if lo >= hi || s < 0 {
        return Err(SdrError::Config("region does not fit one window of the padded frame".into()));
    }
    let win = Window { start: lo as u32, width: (hi - lo) as u32 };
    Ok(PatchPlan { canvas: pad.padded, patch_width: win.width, stride: win.width, windows: vec![win] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::rules::RulesAgent;
    use crate::agents::{AgentSettings, Prompts, Taxonomy};
    use crate::backend::mock::SceneMock;
    use crate::backend::{BackendConfig, Role, Transport};
    use crate::scene::Scene;
    use std::collections::HashMap;

    /// Tracker returning a fixed mask per shifted prompt.
    struct Table {
        answers: HashMap<Vec<crate::mask::Run>, Mask>,
        dims: GridDims,
    }

    impl Transport for Table {
        fn post(&self, _: &str, body: &str) -> Result<String, BackendError> {
            let crate::backend::wire::Request::Track(req) = crate::backend::wire::Request::parse(body).unwrap() else {
                panic!("not a track request")
            };
            let m = self.answers.get(req.prompt_mask.runs()).cloned().unwrap_or_else(|| Mask::empty(self.dims));
            Ok(crate::backend::wire::Response::Track(vec![(req.prompt_frame, m)]).encode())
        }
    }

    fn tracker_gateway(t: Table) -> Gateway {
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

    fn dims() -> GridDims {
        GridDims::erp(64, 32).unwrap()
    }

    fn prompt() -> Mask {
        Mask::rect(dims(), 10, 10, 6, 6)
    }

    /// Brute-force consensus: the candidate with the most matches, ties to the
    /// larger IoU sum and then the earlier direction.
    fn oracle(cands: &[Mask], tau: f64) -> Mask {
        let score = |m: &Mask| {
            let v = cands.iter().filter(|o| m.iou(o).unwrap() > tau).count();
            let s: f64 = cands.iter().map(|o| m.iou(o).unwrap()).sum();
            (v, s)
        };
        let mut best = 0;
        for i in 1..cands.len() {
            let (a, b) = (score(&cands[i]), score(&cands[best]));
            if a.0 > b.0 || (a.0 == b.0 && a.1 > b.1) {
                best = i;
            }
        }
        cands[best].clone()
    }

    fn run(answers: Vec<Mask>, cfg: &ShiftConfig) -> Consensus {
        let table = cfg
            .directions
            .iter()
            .zip(answers)
            .map(|(&(dr, dc), a)| (prompt().translate(dr, dc).runs().to_vec(), a))
            .collect();
        let g = tracker_gateway(Table { answers: table, dims: dims() });
        consensus_refine(&g, "t", "v", 0, &prompt(), cfg).unwrap()
    }

    #[test]
    fn unanimity() {
        let cfg = ShiftConfig::eight_neighbourhood(1, 0.5);
        let a = Mask::rect(dims(), 9, 9, 8, 8);
        let c = run(vec![a.clone(); 9], &cfg);
        assert_eq!(c.mask, a);
        assert_eq!(c.winner_votes, 9);
        assert!(c.votes.iter().all(|v| v.matched));
    }

    #[test]
    fn majority_of_six_to_three() {
        let cfg = ShiftConfig::eight_neighbourhood(1, 0.5);
        let a = Mask::rect(dims(), 9, 9, 8, 8);
        let b = Mask::rect(dims(), 20, 40, 5, 5);
        let answers = vec![b.clone(), a.clone(), b.clone(), a.clone(), a.clone(), b.clone(), a.clone(), a.clone(), a.clone()];
        let c = run(answers.clone(), &cfg);
        assert_eq!(c.mask, oracle(&answers, 0.5));
        assert_eq!(c.mask, a);
        assert_eq!(c.winner_votes, 6);
        assert_eq!(c.votes.iter().filter(|v| v.matched).count(), 6);
    }

    #[test]
    fn equal_votes_break_on_iou_sum() {
        let cfg = ShiftConfig { directions: vec![(0, 0), (0, 1), (0, -1), (1, 0)], tau: 0.5 };
        // {b, b2} and {a, a} both get two votes; the identical pair has the
        // larger IoU sum
        let a = Mask::rect(dims(), 0, 0, 10, 10);
        let b = Mask::rect(dims(), 0, 8, 10, 10);
        let b2 = Mask::rect(dims(), 0, 9, 10, 10);
        let answers = vec![b.clone(), a.clone(), a.clone(), b2.clone()];
        let c = run(answers.clone(), &cfg);
        assert_eq!(c.mask, oracle(&answers, 0.5));
        assert_eq!(c.winner_votes, 2);
    }

    #[test]
    fn empty_shifts_are_skipped_and_total_loss_falls_back() {
        let cfg = ShiftConfig { directions: vec![(0, 0), (-40, 0)], tau: 0.5 };
        let c = run(vec![Mask::empty(dims()), Mask::empty(dims())], &cfg);
        assert!(c.fell_back);
        assert_eq!(c.mask, prompt());
        assert_eq!(c.votes[1].digest, None);
        assert_eq!(c.winner_votes, 0);
    }

    #[test]
    fn containment_merge() {
        let d = dims();
        let a = Mask::rect(d, 0, 0, 10, 10);
        let inner = Mask::rect(d, 2, 2, 3, 3);
        let other = Mask::rect(d, 20, 20, 3, 3);
        let merged = merge_contained(vec![inner, other.clone(), a.clone()], 0.5).unwrap();
        assert_eq!(merged.len(), 2);
        assert!(merged.contains(&a) && merged.contains(&other));
    }

    #[test]
    fn label_query_threshold() {
        let d = dims();
        let e = Mask::rect(d, 0, 0, 4, 4);
        let p = |m, l: &str| PanopticProposal { mask: m, label: l.into(), source_taxonomy: "coco".into(), confidence: 1.0 };
        let props = vec![p(Mask::rect(d, 0, 0, 8, 8), "car"), p(Mask::rect(d, 0, 2, 4, 4), "tree"), p(Mask::rect(d, 0, 3, 4, 4), "sky")];
        let q = build_label_query(&e, &props, 0.5).unwrap();
        let got: Vec<_> = q.candidates.iter().map(|c| (c.label.as_str(), c.overlap)).collect();
        assert_eq!(got, vec![("car", 1.0), ("tree", 0.5)]);
        let q = build_label_query(&e, &[], 0.5).unwrap();
        assert!(q.no_prior());
    }

    fn scene_gateway(scene: Scene, tax: Taxonomy) -> Gateway {
        let mut g = Gateway::empty();
        let cfg = |id: &str, role, t: Option<&str>| BackendConfig {
            id: id.into(),
            role,
            endpoint: "mock:none:x".into(),
            taxonomy: t.map(String::from),
            max_concurrent: 4,
            timeout_secs: 1,
        };
        g.register(cfg("e", Role::Entity, None), Box::new(SceneMock::from_scene(scene.clone(), false, None))).unwrap();
        for t in ["coco", "ade20k"] {
            g.register(cfg(t, Role::Panoptic, Some(t)), Box::new(SceneMock::from_scene(scene.clone(), false, Some(t.into()))))
                .unwrap();
        }
        g.register(cfg("t", Role::Tracker, None), Box::new(SceneMock::from_scene(scene, false, None))).unwrap();
        g.register(cfg("chat", Role::Chat, None), Box::new(RulesAgent::new(tax))).unwrap();
        g
    }

    fn taxonomy() -> Taxonomy {
        Taxonomy::parse(
            "id = \"t\"\nclasses = [\"car\", \"tree\", \"object\"]\nfallback = \"object\"\n[synonyms]\nvegetation = \"tree\"\n",
        )
        .unwrap()
    }

    fn scene(objects: &str) -> Scene {
        Scene::parse(&format!("width = 128\nheight = 32\nframes = 2\n{objects}")).unwrap()
    }

    fn sdr(scene: Scene, region: Option<&Mask>, panoptic: &[String], patch: u32) -> SdrOutput {
        let tax = taxonomy();
        let g = scene_gateway(scene.clone(), tax.clone());
        let p = Prompts::embedded();
        let agents = Agents { gateway: &g, chat: "chat", taxonomy: &tax, prompts: &p, settings: AgentSettings::default() };
        let settings = SdrSettings {
            pad_fraction: 0.25,
            patch_width: patch,
            stride: patch / 2,
            stitch_tau: 0.5,
            label_overlap: 0.5,
            shift: ShiftConfig::eight_neighbourhood(1, 0.5),
        };
        let ctx = SdrContext { gateway: &g, entity: "e", panoptic, tracker: "t", agents: &agents, settings: &settings };
        run_sdr(&ctx, "v", 0, scene.dims().unwrap(), 1, region).unwrap()
    }

    const TWO_RECTS: &str = r#"
        [[object]]
        id = 1
        kind = "thing"
        shape = "rect"
        top = 4
        left = 10
        rows = 6
        cols = 12
        labels = { coco = "car", ade20k = "car" }
        [[object]]
        id = 2
        kind = "thing"
        shape = "rect"
        top = 14
        left = 60
        rows = 8
        cols = 8
        labels = { coco = "tree", ade20k = "vegetation" }
    "#;

    #[test]
    fn two_rectangles() {
        let sc = scene(TWO_RECTS);
        let out = sdr(sc.clone(), None, &["coco".into(), "ade20k".into()], 32);
        let fa = out.annotation(0);
        assert_eq!(fa.entries().len(), 2);
        let visible = sc.visible_masks(0);
        assert_eq!(fa.get(1).unwrap().mask, visible[0].1);
        assert_eq!(fa.get(1).unwrap().label, "car");
        assert_eq!(fa.get(2).unwrap().mask, visible[1].1);
        assert_eq!(fa.get(2).unwrap().label, "tree");
        for i in &out.instances {
            assert_eq!(i.consensus.winner_votes, i.consensus.votes.iter().filter(|v| v.matched).count());
        }
    }

    #[test]
    fn seam_object_is_one_instance() {
        let sc = scene(
            r#"
            [[object]]
            id = 1
            kind = "thing"
            shape = "rect"
            top = 4
            left = 120
            rows = 6
            cols = 16
            labels = { coco = "car", ade20k = "car" }
        "#,
        );
        let out = sdr(sc.clone(), None, &["coco".into()], 32);
        assert_eq!(out.instances.len(), 1);
        let m = &out.instances[0].mask;
        assert_eq!(*m, sc.visible_masks(0)[0].1);
        assert!(m.touches_left() && m.touches_right());
    }

    #[test]
    fn empty_scene() {
        let out = sdr(scene(""), None, &["coco".into()], 32);
        assert!(out.instances.is_empty());
    }

    #[test]
    fn single_window_matches_folded_backend_output() {
        let sc = scene(TWO_RECTS);
        let out = sdr(sc.clone(), None, &["coco".into()], 192);
        let labels: Vec<_> = out.instances.iter().map(|i| i.label.as_str()).collect();
        assert_eq!(labels, vec!["car", "tree"]);
        let masks: Vec<_> = out.instances.iter().map(|i| i.mask.clone()).collect();
        let want: Vec<_> = sc.visible_masks(0).into_iter().map(|(_, m)| m).collect();
        assert_eq!(masks, want);
    }

    #[test]
    fn region_mode_keeps_only_the_region() {
        let sc = scene(TWO_RECTS);
        let region = sc.visible_masks(0)[1].1.clone();
        let out = sdr(sc, Some(&region), &["coco".into()], 32);
        assert_eq!(out.instances.len(), 1);
        assert_eq!(out.instances[0].mask, region);
        assert_eq!(out.instances[0].instance_id, 1);
    }
}
