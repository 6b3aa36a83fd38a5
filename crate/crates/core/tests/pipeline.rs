mod common;

use common::*;
use panolabel_core::annotation::{EditOp, Provenance, Revision, Status};
use panolabel_core::mask::{BlankRegion, GridDims, Mask};
use panolabel_core::pipeline::mcr::{handle_border_blank, handle_new_blank};
use panolabel_core::pipeline::{annotate_video, export_review, import_revisions, AnnotateOptions, PipelineError};
use panolabel_core::scene::Scene;
use panolabel_core::store::{format, FaultPoint, Store};

fn scene(name: &str) -> Scene {
    Scene::load(&fixture(name).join("scene.toml")).unwrap()
}

#[test]
fn static_scene_never_refines() {
    let root = tempfile::tempdir().unwrap();
    let (_, v) = run(root.path(), &fixture("static"), "static", AnnotateOptions::default());
    let v = v.unwrap();
    assert_eq!(v.status, Status::Refined);
    assert!(refined_frames(&v).is_empty());
    let ids = match_ground_truth(&v, &scene("static"));
    assert!(ids.windows(2).all(|w| w[0] == w[1]));
    let labels: Vec<&str> = v.instances.values().map(|i| i.label.as_str()).collect();
    // ids follow the first run of each mask: sky row 0, tree 300, ground 512, car 600
    assert_eq!(labels, ["sky", "tree", "ground", "car"]);
}

#[test]
fn deer_keeps_one_id_across_the_seam() {
    let root = tempfile::tempdir().unwrap();
    let (store, v) = run(root.path(), &fixture("deer"), "deer", AnnotateOptions::default());
    let v = v.unwrap();
    assert_eq!(refined_frames(&v), [3]);
    let ids = match_ground_truth(&v, &scene("deer"));
    let deer: Vec<u32> = ids.iter().map(|m| *m.iter().find(|(_, o)| **o == 3).unwrap().0).collect();
    assert!(deer.iter().all(|&d| d == deer[0]));
    assert_eq!(v.frames[3].get(deer[0]).unwrap().provenance, Provenance::BorderMerged);
    assert_eq!(v.instances[&deer[0]].label, "deer");
    let prov = store.provenance("deer", 3).unwrap().unwrap();
    assert_eq!(prov.phase.unwrap().actions, [format!("border-merge {}", deer[0])]);
}

#[test]
fn occlusion_refines_exactly_at_the_scripted_failures() {
    let root = tempfile::tempdir().unwrap();
    let (_, v) = run(root.path(), &fixture("occlusion"), "occ", AnnotateOptions::default());
    let v = v.unwrap();
    assert_eq!(refined_frames(&v), [5, 6]);
    for p in v.phase_log.values() {
        assert!(p.coverage_after >= p.coverage_before);
    }
    let ids = match_ground_truth(&v, &scene("occlusion"));
    let car = |f: usize| *ids[f].iter().find(|(_, o)| **o == 4).unwrap().0;
    assert!((0..12).all(|f| car(f) == car(0)));
    assert_eq!(v.frames[5].get(car(0)).unwrap().provenance, Provenance::Retrieved);
    let person = |f: usize| ids[f].iter().find(|(_, o)| **o == 3).map(|(id, _)| *id);
    let before = person(0).unwrap();
    let after = person(6).unwrap();
    assert_ne!(before, after);
    assert_eq!(after, 5, "previous max id + 1");
    assert!((6..12).all(|f| person(f) == Some(after)));
    assert!((4..6).all(|f| person(f).is_none()));
    assert_eq!(v.instances[&after].label, "person");
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let src = fixture("occlusion");
    let a = tempfile::tempdir().unwrap();
    let (sa, va) = run(a.path(), &src, "v", AnnotateOptions::default());
    va.unwrap();
    let b = tempfile::tempdir().unwrap();
    let (sb, vb) = run(b.path(), &src, "v", AnnotateOptions::default());
    vb.unwrap();
    assert_eq!(sa.digest("v").unwrap(), sb.digest("v").unwrap());

    for halt in [1, 5, 6, 11] {
        let c = tempfile::tempdir().unwrap();
        let (sc, vc) = run(c.path(), &src, "v", AnnotateOptions { halt_after: Some(halt) });
        assert!(matches!(vc, Err(PipelineError::Halted { next_frame, .. }) if next_frame == halt));
        assert_eq!(sc.manifest("v").unwrap().progress, halt);
        annotate_video(&sc, &engine(&src), "v", AnnotateOptions::default()).unwrap();
        assert_eq!(sc.digest("v").unwrap(), sa.digest("v").unwrap(), "resume after {halt}");
    }
}

#[test]
fn crash_inside_a_commit_resumes_to_the_same_store() {
    let src = fixture("deer");
    let a = tempfile::tempdir().unwrap();
    let (sa, _) = run(a.path(), &src, "v", AnnotateOptions::default());
    for point in [FaultPoint::BeforeJournalRename, FaultPoint::AfterJournalRename, FaultPoint::MidApply] {
        let c = tempfile::tempdir().unwrap();
        let store = Store::open(c.path()).unwrap();
        ingest(&store, &src, "v");
        annotate_video(&store, &engine(&src), "v", AnnotateOptions { halt_after: Some(3) }).unwrap_err();
        store.inject_fault(Some(point));
        annotate_video(&store, &engine(&src), "v", AnnotateOptions::default()).unwrap_err();
        let reopened = Store::open(c.path()).unwrap();
        annotate_video(&reopened, &engine(&src), "v", AnnotateOptions::default()).unwrap();
        assert_eq!(reopened.digest("v").unwrap(), sa.digest("v").unwrap(), "{point:?}");
    }
}

#[test]
fn resume_with_another_config_is_refused() {
    let src = fixture("static");
    let root = tempfile::tempdir().unwrap();
    let (store, v) = run(root.path(), &src, "v", AnnotateOptions { halt_after: Some(2) });
    v.unwrap_err();
    let mut cfg = panolabel_core::pipeline::Config::load(&src.join("mock.toml"), &["pipeline.rho=0.5".into()]).unwrap();
    cfg.base_dir = src.clone();
    let other = panolabel_core::pipeline::Engine::from_config(&cfg).unwrap();
    assert!(matches!(annotate_video(&store, &other, "v", AnnotateOptions::default()), Err(PipelineError::ConfigMismatch(_))));
}

#[test]
fn second_writer_is_locked_out() {
    let src = fixture("static");
    let root = tempfile::tempdir().unwrap();
    let store = Store::open(root.path()).unwrap();
    ingest(&store, &src, "v");
    let _held = store.lock_writer("v").unwrap();
    let err = annotate_video(&store, &engine(&src), "v", AnnotateOptions::default()).unwrap_err();
    assert!(err.to_string().contains("locked"), "{err}");
}

#[test]
fn border_blank_without_partner_falls_through() {
    // a lone object cut by the seam, with nothing annotated on either side
    let text = "width = 256\nheight = 64\nframes = 2\n\n[[object]]\nid = 1\nshape = \"rect\"\ntop = 10\nleft = 240\nrows = 10\ncols = 32\nlabels = { coco = \"car\", ade20k = \"car\" }\n";
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("scene.toml"), text).unwrap();
    let mock = std::fs::read_to_string(fixture("static").join("mock.toml")).unwrap();
    std::fs::write(dir.path().join("mock.toml"), mock.replace("rho = 0.997", "rho = 0.997\npatch_width = 64")).unwrap();
    std::fs::copy(fixture("static").join("taxonomy.toml"), dir.path().join("taxonomy.toml")).unwrap();
    let e = engine(dir.path());
    let dims = GridDims::erp(256, 64).unwrap();
    let object = Mask::rect(dims, 10, 240, 10, 32);
    let blank = BlankRegion::new(object.restrict_cols(0, 16)).unwrap();
    let empty = panolabel_core::annotation::FrameAnnotation::new(1);
    assert_eq!(handle_border_blank(&e, "v", 1, &blank, &empty).unwrap(), None);

    // with the other half annotated the halves merge under its id
    let mut frame = empty.clone();
    frame.upsert(panolabel_core::annotation::Entry {
        instance_id: 7,
        mask: object.restrict_cols(240, 16),
        label: "car".into(),
        provenance: Provenance::Tracked,
    });
    let (id, merged) = handle_border_blank(&e, "v", 1, &blank, &frame).unwrap().unwrap();
    assert_eq!((id, merged), (7, object.clone()));

    // the new-mask path finds the whole object with the next id
    let out = handle_new_blank(&e, "v", 1, &blank, 8).unwrap();
    assert_eq!(out.instances.len(), 1);
    assert_eq!((out.instances[0].instance_id, out.instances[0].mask.clone()), (8, object));
}

#[test]
fn review_round_trip() {
    let src = fixture("static");
    let root = tempfile::tempdir().unwrap();
    let (store, v) = run(root.path(), &src, "v", AnnotateOptions::default());
    let y_ref = v.unwrap();
    let bundle = root.path().join("bundle");
    export_review(&store, "v", &bundle).unwrap();
    for p in ["manifest", "report", "annotations/instances", "annotations/000011.ann", "frames/000011.pgm"] {
        assert!(bundle.join(p).is_file(), "{p}");
    }
    assert!(export_review(&store, "v", &bundle).is_err(), "bundle directory is not empty");

    // a failing log leaves the store untouched
    let before = store.digest("v").unwrap();
    let bad = vec![
        Revision { seq: 1, op: EditOp::DeleteInstance { instance: 3 } },
        Revision { seq: 2, op: EditOp::Relabel { instance: 3, label: "car".into() } },
    ];
    std::fs::write(root.path().join("bad.log"), format::write_revisions(&bad)).unwrap();
    assert!(import_revisions(&store, "v", &root.path().join("bad.log")).is_err());
    let gap = vec![Revision { seq: 2, op: EditOp::Relabel { instance: 2, label: "car".into() } }];
    std::fs::write(root.path().join("gap.log"), format::write_revisions(&gap)).unwrap();
    assert!(import_revisions(&store, "v", &root.path().join("gap.log")).is_err());
    assert_eq!(store.digest("v").unwrap(), before);

    // relabel reaches every frame
    let tree = *y_ref.instances.iter().find(|(_, i)| i.label == "tree").unwrap().0;
    let good = vec![Revision { seq: 1, op: EditOp::Relabel { instance: tree, label: "building".into() } }];
    std::fs::write(bundle.join("annotations/revisions.log"), format::write_revisions(&good)).unwrap();
    let y_final = import_revisions(&store, "v", &bundle).unwrap();
    assert_eq!(y_final.status, Status::Final);
    assert_eq!(y_final.instances[&tree].label, "building");
    assert!(y_final.frames.iter().all(|f| f.get(tree).unwrap().label == "building"));
    assert!(import_revisions(&store, "v", &bundle).is_err(), "already final");
}

#[test]
fn empty_revision_log_finalizes_unchanged() {
    let src = fixture("static");
    let root = tempfile::tempdir().unwrap();
    let (store, v) = run(root.path(), &src, "v", AnnotateOptions::default());
    let y_ref = v.unwrap();
    let bundle = root.path().join("b");
    export_review(&store, "v", &bundle).unwrap();
    let y_final = import_revisions(&store, "v", &bundle).unwrap();
    assert_eq!(y_final.frames, y_ref.frames);
    assert_eq!(y_final.instances, y_ref.instances);
    assert_eq!(store.manifest("v").unwrap().status, Status::Final);
}
