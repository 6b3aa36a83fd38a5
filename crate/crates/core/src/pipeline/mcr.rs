//! Motion-continuity refinement of one frame.

use crate::agents::{summarize_frame, BlankKind};
use crate::annotation::{Entry, FrameAnnotation, GateDecision, InstanceId, PhaseLogEntry, Provenance, VideoAnnotation};
use crate::backend::FrameRef;
use crate::geometry::{make_seam_plan, unrecenter_mask};
use crate::mask::{blank_regions, BlankRegion, Mask};
use crate::sdr::{consensus_refine, SdrOutput};

use super::{Engine, PipelineError, Result};

/// Result of the gate and, when it fails, the repairs made to one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRepair {
    pub frame: FrameAnnotation,
    pub phase: PhaseLogEntry,
    pub records: Vec<String>,
    pub escalations: Vec<(Option<InstanceId>, String)>,
    /// Fresh ids with their labels, to be registered.
    pub new_instances: Vec<(InstanceId, String)>,
    /// Instances whose mask changed and must be propagated again.
    pub retrack: Vec<InstanceId>,
}

/// Gates frame `t` of `video` on coverage and repairs its blank regions
/// when coverage is not strictly above the threshold. Each region is
/// handled once; what cannot be resolved is escalated. Fresh ids start at
/// `next_id`.
pub fn auto_refine_frame(engine: &Engine, video: &VideoAnnotation, t: usize, next_id: InstanceId) -> Result<FrameRepair> {
    if t == 0 || t >= video.frame_count() {
        return Err(PipelineError::Config(format!("frame {t} cannot be refined")));
    }
    let dims = video.dims;
    let cfg = &engine.config;
    let current = &video.frames[t];
    let prev = &video.frames[t - 1];
    let before = engine.coverage(current, dims);
    let mut repair = FrameRepair {
        frame: current.clone(),
        phase: PhaseLogEntry {
            frame_index: t,
            coverage_before: before,
            gate: GateDecision::Pass,
            coverage_after: before,
            actions: Vec::new(),
        },
        records: Vec::new(),
        escalations: Vec::new(),
        new_instances: Vec::new(),
        retrack: Vec::new(),
    };
    if before > cfg.rho {
        return Ok(repair);
    }
    repair.phase.gate = GateDecision::Refine;
    repair.records.push(format!("mcr frame {t} coverage {before} not above {}", cfg.rho));

    let masks: Vec<Mask> = current.masks().cloned().collect();
    let regions = blank_regions(&masks, dims, cfg.min_blank_area_fraction, cfg.connectivity())?;
    let agents = engine.agents();
    let prev_summary = summarize_frame(prev);
    let mut next_id = next_id;
    let mut repaired = Mask::empty(dims);

    for (k, region) in regions.iter().enumerate() {
        let (cy, cx) = region.centroid;
        if repaired.intersection_area(&region.mask)? * 2 >= region.area() {
            repair.records.push(format!("mcr region {k} covered by an earlier repair"));
            continue;
        }
        let kind = agents.classify_blank(region, &prev_summary, t, dims)?;
        repair.records.push(format!("mcr region {k} area {} centroid {cy:.3} {cx:.3} kind {}", region.area(), kind.as_str()));
        let mut done = false;

        if kind == BlankKind::BorderMask {
            match handle_border_blank(engine, &video.video_id, t, region, &repair.frame)? {
                Some((id, mask)) => {
                    let label = repair.frame.get(id).map(|e| e.label.clone()).expect("partner is in the frame");
                    repaired = repaired.union(&mask)?;
                    repair.frame.upsert(Entry { instance_id: id, mask, label, provenance: Provenance::BorderMerged });
                    repair.records.push(format!("mcr region {k} border-merged into {id}"));
                    repair.phase.actions.push(format!("border-merge {id}"));
                    repair.retrack.push(id);
                    done = true;
                }
                None => repair.records.push(format!("mcr region {k} has no partner across the seam")),
            }
        }

        if !done && kind == BlankKind::ExistingMask {
            match agents.retrieve_object(region, prev)? {
                Some(id) => {
                    let label = prev.get(id).map(|e| e.label.clone()).expect("retriever checks the id");
                    let c = consensus_refine(
                        &engine.gateway,
                        engine.tracker_backend(),
                        &video.video_id,
                        t,
                        &region.mask,
                        &cfg.shift(dims),
                    )?;
                    let mask = match repair.frame.get(id) {
                        Some(e) => e.mask.union(&c.mask)?,
                        None => c.mask.clone(),
                    };
                    repaired = repaired.union(&mask)?;
                    repair.frame.upsert(Entry { instance_id: id, mask, label, provenance: Provenance::Retrieved });
                    repair.records.push(format!(
                        "mcr region {k} retrieved {id} consensus {}/{}",
                        c.winner_votes,
                        c.votes.len()
                    ));
                    repair.phase.actions.push(format!("retrieve {id}"));
                    repair.retrack.push(id);
                    done = true;
                }
                None => repair.records.push(format!("mcr region {k} retriever miss")),
            }
        }

        if !done {
            let out = handle_new_blank(engine, &video.video_id, t, region, next_id)?;
            repair.records.extend(out.records.iter().cloned());
            repair.escalations.extend(out.escalations.iter().cloned());
            for inst in out.instances {
                let id = inst.instance_id;
                next_id = next_id.max(id + 1);
                repaired = repaired.union(&inst.mask)?;
                repair.frame.upsert(Entry {
                    instance_id: id,
                    mask: inst.mask,
                    label: inst.label.clone(),
                    provenance: Provenance::Sdr,
                });
                repair.new_instances.push((id, inst.label));
                repair.phase.actions.push(format!("new {id}"));
                repair.retrack.push(id);
                done = true;
            }
        }

        if !done {
            repair.phase.actions.push("unresolved".into());
            repair.escalations.push((None, format!("unresolved blank region area {} at {cy:.1} {cx:.1}", region.area())));
        }
    }
    repair.retrack.sort_unstable();
    repair.retrack.dedup();
    repair.phase.coverage_after = engine.coverage(&repair.frame, dims);
    Ok(repair)
}

/// Recentres the view on a blank touching the seam, segments it again and
/// looks for an instance on the opposite border that the proposal
/// continues. Returns the partner id and its merged mask.
pub fn handle_border_blank(
    engine: &Engine,
    video_id: &str,
    t: usize,
    region: &BlankRegion,
    frame: &FrameAnnotation,
) -> Result<Option<(InstanceId, Mask)>> {
    let dims = region.mask.dims();
    let plan = make_seam_plan(dims, region)?;
    let view = FrameRef { video_id: video_id.into(), frame_index: t, canvas: dims, pad_cols: 0, shift_cols: plan.shift_cols, crop: None };
    let proposals = engine.gateway.segment_entities(&view, engine.entity_backend())?;

    let mut best: Option<(u64, Mask)> = None;
    for p in proposals {
        let m = unrecenter_mask(&p.mask, &plan)?;
        let overlap = m.intersection_area(&region.mask)?;
        if overlap > 0 && best.as_ref().is_none_or(|(b, _)| overlap > *b) {
            best = Some((overlap, m));
        }
    }
    let Some((_, candidate)) = best else { return Ok(None) };
    let fill = candidate.intersection(&region.mask)?;
    let rest = candidate.difference(&region.mask)?;
    if rest.is_empty() {
        return Ok(None);
    }

    let (left, right) = (region.touches_left_border(), region.touches_right_border());
    let mut partner: Option<(f64, InstanceId)> = None;
    for e in frame.entries() {
        let opposite = match (left, right) {
            (true, false) => e.mask.touches_right(),
            (false, true) => e.mask.touches_left(),
            _ => e.mask.touches_left() || e.mask.touches_right(),
        };
        if !opposite {
            continue;
        }
        let iou = rest.iou(&e.mask)?;
        // entries are in id order, so ties keep the elder id
        if iou > engine.config.tau && partner.is_none_or(|(b, _)| iou > b) {
            partner = Some((iou, e.instance_id));
        }
    }
    let Some((_, id)) = partner else { return Ok(None) };
    let merged = frame.get(id).expect("partner from this frame").mask.union(&fill)?;
    Ok(Some((id, merged)))
}

/// SDR restricted to the window around `region`; fresh ids from `first_id`.
pub fn handle_new_blank(engine: &Engine, video_id: &str, t: usize, region: &BlankRegion, first_id: InstanceId) -> Result<SdrOutput> {
    engine.sdr(video_id, t, region.mask.dims(), first_id, Some(&region.mask))
}
