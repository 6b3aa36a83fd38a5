mod common;

use common::*;
use panolabel_core::metrics::{boundary_f, format_table, j_and_f, jaccard, parse_table};
use panolabel_core::mask::{GridDims, Mask};
use panolabel_core::pipeline::AnnotateOptions;
use rand::Rng;

#[test]
fn region_and_boundary_scores_match_pixel_oracles() {
    let mut r = rng(0x6a66);
    for case in 0..300 {
        let d = random_dims(&mut r);
        let (p, q) = (random_mask(&mut r, d), random_mask(&mut r, d));
        let (pb, qb) = (p.decode(), q.decode());
        let radius = r.random_range(0..5u32);
        let j = jaccard(Some(&p), Some(&q));
        assert!((j - pixel_iou(&pb, &qb)).abs() < 1e-9, "case {case}");
        let pe = (!p.is_empty()).then_some(&pb[..]);
        let qe = (!q.is_empty()).then_some(&qb[..]);
        let f = boundary_f(Some(&p), Some(&q), radius);
        let oracle = pixel_boundary_f(pe, qe, d, radius as f64);
        assert!((f - oracle).abs() < 1e-9, "case {case}: {f} vs {oracle}");
    }
}

#[test]
fn shifted_rectangle() {
    let d = GridDims::erp(64, 32).unwrap();
    let a = Mask::rect(d, 8, 60, 10, 12);
    for shift in 0..6 {
        let b = a.translate(0, shift);
        let j = jaccard(Some(&a), Some(&b));
        assert!((j - pixel_iou(&a.decode(), &b.decode())).abs() < 1e-9);
        // 10 x 12 rectangles overlapping in 12 - shift columns
        let expect = (10 * (12 - shift)) as f64 / (10 * (12 + shift)) as f64;
        assert!((j - expect).abs() < 1e-12, "shift {shift}");
        for radius in [0, 1, 3] {
            let f = boundary_f(Some(&a), Some(&b), radius);
            let oracle = pixel_boundary_f(Some(&a.decode()), Some(&b.decode()), d, radius as f64);
            assert!((f - oracle).abs() < 1e-9, "shift {shift} radius {radius}");
        }
    }
}

#[test]
fn missing_sides() {
    let d = GridDims::erp(16, 8).unwrap();
    let m = Mask::rect(d, 1, 1, 3, 3);
    assert_eq!((jaccard(None, None), boundary_f(None, None, 2)), (1.0, 1.0));
    assert_eq!((jaccard(Some(&m), None), boundary_f(None, Some(&m), 2)), (0.0, 0.0));
}

#[test]
fn golden_runs_score_perfectly_against_themselves() {
    let mut rows = Vec::new();
    for name in FIXTURES {
        let root = tempfile::tempdir().unwrap();
        let (_, v) = run(root.path(), &fixture(name), name, AnnotateOptions::default());
        let v = v.unwrap();
        let m = j_and_f(&v, &v, None).unwrap();
        assert_eq!((m.j, m.f, m.jf), (1.0, 1.0, 1.0), "{name}");
        assert!(m.pairs > 0);
        rows.push((name.to_string(), m));
    }
    let parsed = parse_table(&format_table(&rows, None)).unwrap();
    assert_eq!(parsed.len(), 4);
    assert_eq!(parsed.last().unwrap(), &("Mean".to_string(), 1.0, 1.0, 1.0));
}
