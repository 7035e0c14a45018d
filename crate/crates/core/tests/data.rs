mod common;

use std::fs;

use propih_core::data::{
    self, aggregate_votes, compose_random, fg_ratio, parse_annotations, parse_votes, synth_dataset, synth_sample,
    MAX_FG_RATIO, MIN_FG_RATIO,
};
use propih_core::{Error, Tensor};

#[test]
fn synthetic_samples_are_deterministic_and_valid() {
    let a = synth_dataset(6, 32, 7).unwrap();
    let b = synth_dataset(6, 32, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].composite, a[1].composite);
    // Each sample depends only on (seed, index).
    assert_eq!(synth_sample(32, 7, 4).unwrap(), a[4]);
    for s in &a {
        assert_eq!(s.composite.shape(), &[1, 3, 32, 32]);
        assert!(s.fg_mask.is_binary());
        let r = s.fg_ratio();
        assert!((MIN_FG_RATIO..=MAX_FG_RATIO).contains(&r), "{}: ratio {r}", s.id);
        assert!(s.composite.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let plane = 32 * 32;
        for i in 0..plane {
            if s.fg_mask.data()[i] == 0.0 {
                for c in 0..3 {
                    assert_eq!(s.composite.data()[c * plane + i], s.background.data()[c * plane + i]);
                }
            }
        }
    }
    assert_eq!(a[3].id, "s00003");
    assert!(synth_dataset(2, 30, 0).is_err());
    assert!(synth_dataset(0, 16, 0).unwrap().is_empty());
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = synth_dataset(3, 16, 1).unwrap();
    let manifest = data::save_dataset(&set, dir.path()).unwrap();
    let back = data::load_dataset(&manifest).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in set.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.fg_mask, b.fg_mask);
        for (x, y) in a.composite.data().iter().zip(b.composite.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
    // Saving what was loaded reproduces the same bytes.
    let again = tempfile::tempdir().unwrap();
    data::save_dataset(&back, again.path()).unwrap();
    for s in &back {
        let name = format!("{}_composite.ppm", s.id);
        assert_eq!(
            fs::read(dir.path().join(&name)).unwrap(),
            fs::read(again.path().join(&name)).unwrap()
        );
    }
}

#[test]
fn image_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ppm");
    fs::write(&p, b"P6\n4 4\n255\n\x01\x02").unwrap();
    match data::load_image(&p) {
        Err(Error::Format(m)) => assert!(m.contains("bad.ppm"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        data::load_mask(dir.path().join("none.pgm")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn annotation_parsing() {
    let text = "{\"id\": \"a\", \"exit_stage\": 2}\n\n{\"id\": \"b\", \"exit_stage\": 4}\n";
    let r = parse_annotations(text).unwrap();
    assert_eq!(r.len(), 2);
    assert_eq!(r[0].labels(), [0.0, 1.0, 1.0]);
    assert!(parse_annotations("{\"id\": \"a\", \"exit_stage\": 5}").is_err());
    assert!(parse_annotations("{\"id\": \"a\", \"exit_stage\": 1}\n{\"id\": \"a\", \"exit_stage\": 2}").is_err());
    assert!(parse_annotations("not json").is_err());
}

#[test]
fn votes_aggregate_by_plurality_with_early_ties() {
    let text = [
        r#"{"id": "x", "exit_stage": 3}"#,
        r#"{"id": "x", "exit_stage": 3}"#,
        r#"{"id": "x", "exit_stage": 1}"#,
        r#"{"id": "a", "exit_stage": 4}"#,
        r#"{"id": "a", "exit_stage": 2}"#,
    ]
    .join("\n");
    let agg = aggregate_votes(&parse_votes(&text).unwrap()).unwrap();
    assert_eq!(agg.len(), 2);
    assert_eq!((agg[0].id.as_str(), agg[0].exit_stage), ("a", 2));
    assert_eq!((agg[1].id.as_str(), agg[1].exit_stage), ("x", 3));
}

#[test]
fn random_composition_hits_the_ratio_band() {
    let mut r = common::rng(3);
    let bg: Tensor = common::uniform(&[1, 3, 40, 40], &mut r, 0.0, 1.0);
    let fg: Tensor = common::uniform(&[1, 3, 10, 10], &mut r, 0.0, 1.0);
    let m = common::rect_mask(10, 1, 1, 8, 8);
    for _ in 0..20 {
        let s = compose_random(&fg, &m, &bg, &mut r, 64).unwrap();
        let ratio = fg_ratio(&s.fg_mask);
        assert!((MIN_FG_RATIO..=MAX_FG_RATIO).contains(&ratio));
    }
    let dot = common::rect_mask(10, 0, 0, 1, 1);
    let big: Tensor = common::uniform(&[1, 3, 10, 10], &mut r, 0.0, 1.0);
    // A single pixel cannot be scaled past the frame to reach 5%.
    assert!(compose_random(&big, &dot, &Tensor::zeros(vec![1, 3, 64, 64]), &mut r, 8).is_err());
}
