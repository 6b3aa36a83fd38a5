//! Dataset statistics: instances per video, the label distribution and
//! how much of each frame the annotation covers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::Result;
use panolabel_core::annotation::VideoAnnotation;
use panolabel_core::mask::coverage_rate;

#[derive(Default)]
struct LabelTally {
    instances: usize,
    masks: usize,
    pixels: u64,
}

/// Ten equal-width coverage bins; a frame with full coverage goes in the last.
fn bin(c: f64) -> usize {
    ((c * 10.0) as usize).min(9)
}

pub fn render(videos: &[VideoAnnotation]) -> Result<String> {
    let mut out = String::new();
    let mut labels: BTreeMap<&str, LabelTally> = BTreeMap::new();
    let mut bins = [0usize; 10];
    let (mut frames, mut instances, mut coverage_sum) = (0usize, 0usize, 0.0);

    let _ = writeln!(out, "videos {}", videos.len());
    for v in videos {
        let mut cov = Vec::with_capacity(v.frames.len());
        for f in &v.frames {
            let c = coverage_rate(f.entries().iter().map(|e| &e.mask), v.dims)?;
            bins[bin(c)] += 1;
            cov.push(c);
            for e in f.entries() {
                let t = labels.entry(e.label.as_str()).or_default();
                t.masks += 1;
                t.pixels += e.mask.area() as u64;
            }
        }
        for i in v.instances.values() {
            labels.entry(i.label.as_str()).or_default().instances += 1;
        }
        let mean = if cov.is_empty() { 0.0 } else { cov.iter().sum::<f64>() / cov.len() as f64 };
        let min = cov.iter().copied().fold(f64::INFINITY, f64::min);
        let _ = writeln!(
            out,
            "video {} status {} frames {} instances {} coverage mean {:.4} min {:.4}",
            v.video_id,
            v.status.as_str(),
            v.frames.len(),
            v.instances.len(),
            mean,
            if cov.is_empty() { 0.0 } else { min },
        );
        frames += v.frames.len();
        instances += v.instances.len();
        coverage_sum += cov.iter().sum::<f64>();
    }

    let _ = writeln!(out, "\nlabels (instances, masks, share of labelled pixels)");
    let total: u64 = labels.values().map(|t| t.pixels).sum();
    let mut order: Vec<(&&str, &LabelTally)> = labels.iter().collect();
    order.sort_by(|a, b| b.1.instances.cmp(&a.1.instances).then(b.1.pixels.cmp(&a.1.pixels)).then(a.0.cmp(b.0)));
    let width = order.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    for (label, t) in order {
        let share = if total == 0 { 0.0 } else { t.pixels as f64 / total as f64 };
        let _ = writeln!(out, "  {label:<width$}  {:>5}  {:>7}  {:>6.2}%", t.instances, t.masks, share * 100.0);
    }

    let _ = writeln!(out, "\nframe coverage");
    for (i, n) in bins.iter().enumerate() {
        let _ = writeln!(out, "  {:.1}-{:.1}  {n}", i as f64 / 10.0, (i + 1) as f64 / 10.0);
    }
    let mean = if frames == 0 { 0.0 } else { coverage_sum / frames as f64 };
    let _ = writeln!(out, "\ntotal frames {frames} instances {instances} mean coverage {mean:.4}");
    Ok(out)
}
