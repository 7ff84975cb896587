use proptest::prelude::*;
use vistr_core::annotations::{load_annotations, load_dataset, save_annotations, AnnotationFile};
use vistr_core::mask::{derive_box, rle_decode, rle_encode, Mask};
use vistr_core::synth::{generate_clip, generate_dataset, render_clip, InstanceSpec, Shape, SynthConfig, ZOrder};

/// Column-major runs computed the slow way: walk columns, count runs of
/// equal values, and prepend an empty zero run when the first pixel is set.
fn rle_oracle(m: &Mask) -> Vec<u32> {
    let mut seq = Vec::new();
    for x in 0..m.width {
        for y in 0..m.height {
            seq.push(m.get(y, x));
        }
    }
    let mut out = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for v in seq {
        if v == current {
            run += 1;
        } else {
            out.push(run);
            current = v;
            run = 1;
        }
    }
    out.push(run);
    out
}

#[test]
fn rle_trivial_cases() {
    assert_eq!(rle_encode(&Mask::empty(3, 4)), vec![12]);
    assert_eq!(rle_encode(&Mask::from_fn(3, 4, |_, _| true)), vec![0, 12]);
    assert!(rle_decode(&[12], 3, 4).unwrap().is_empty());
    assert_eq!(rle_decode(&[0, 12], 3, 4).unwrap().area(), 12);
    let mut one = Mask::empty(3, 4);
    one.set(2, 1, true);
    assert_eq!(rle_decode(&rle_encode(&one), 3, 4).unwrap(), one);
    assert!(rle_decode(&[5, 6], 3, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn rle_round_trip_and_oracle(bits in proptest::collection::vec(any::<bool>(), 13 * 17)) {
        let m = Mask::from_bits(13, 17, bits).unwrap();
        let counts = rle_encode(&m);
        prop_assert_eq!(&counts, &rle_oracle(&m));
        prop_assert_eq!(counts.iter().map(|&c| c as usize).sum::<usize>(), 13 * 17);
        prop_assert_eq!(rle_decode(&counts, 13, 17).unwrap(), m);
    }
}

fn static_square() -> InstanceSpec {
    InstanceSpec { shape: Shape::Square, size: 48.0, center: (80.0, 48.0), velocity: (0.0, 0.0), color: [1.0, 0.5, 0.5], frames: (0, 4) }
}

#[test]
fn static_centered_square() {
    let (clip, truths) = render_clip("c", &[static_square()], 4, 96, 160, ZOrder::SizeDescending).unwrap();
    assert_eq!(clip.frames.shape(), &[4, 3, 96, 160]);
    let t = &truths[0];
    for f in 0..4 {
        assert_eq!(t.masks[f], t.masks[0]);
        assert_eq!(t.boxes[f], [0.5, 0.5, 48.0 / 160.0, 0.5]);
        assert!(t.presence[f]);
    }
    assert_eq!(t.masks[0].area(), 48 * 48);
    assert_eq!(t.class_id, 1);
}

#[test]
fn disjoint_shapes_keep_their_areas() {
    let a = InstanceSpec { center: (30.0, 30.0), velocity: (1.0, 0.0), ..static_square() };
    let b = InstanceSpec { shape: Shape::Circle, size: 20.0, center: (120.0, 70.0), velocity: (-1.0, 1.0), color: [0.4, 0.9, 0.4], frames: (0, 4) };
    let (_, truths) = render_clip("c", &[a, b], 4, 96, 160, ZOrder::InstanceIndex).unwrap();
    for f in 0..4 {
        assert_eq!(truths[0].masks[f].intersection(&truths[1].masks[f]), 0);
        assert_eq!(truths[0].masks[f].area(), truths[0].masks[0].area());
        assert_eq!(truths[1].masks[f].area(), truths[1].masks[0].area());
    }
}

#[test]
fn occluded_instance_loses_pixels_to_the_one_on_top() {
    let big = static_square();
    let small = InstanceSpec { size: 10.0, ..static_square() };
    let (_, truths) = render_clip("c", &[big, small], 1, 96, 160, ZOrder::SizeDescending).unwrap();
    assert_eq!(truths[1].masks[0].area(), 100);
    assert_eq!(truths[0].masks[0].area(), 48 * 48 - 100);
}

#[test]
fn boxes_bound_masks_and_absent_frames_are_empty() {
    let cfg = SynthConfig { leave_enter: true, clips: 6, ..SynthConfig::default() };
    let mut saw_absent = false;
    for (_, truths) in generate_dataset(&cfg).unwrap() {
        for t in &truths {
            for f in 0..cfg.t {
                if t.presence[f] {
                    assert_eq!(derive_box(&t.masks[f]), Some(t.boxes[f]));
                } else {
                    saw_absent = true;
                    assert!(t.masks[f].is_empty());
                    assert_eq!(t.boxes[f], [0.0; 4]);
                }
            }
        }
    }
    assert!(saw_absent);
}

#[test]
fn deterministic_and_order_invariant() {
    let cfg = SynthConfig { seed: 7, clips: 4, ..SynthConfig::default() };
    let a = generate_dataset(&cfg).unwrap();
    let b = generate_dataset(&cfg).unwrap();
    assert_eq!(a, b);
    for i in (0..4).rev() {
        assert_eq!(generate_clip(&cfg, i).unwrap(), a[i]);
    }
    let other = generate_dataset(&SynthConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(a[0].0.frames, other[0].0.frames);
}

#[test]
fn instance_count_range_respected() {
    let cfg = SynthConfig { min_instances: 2, max_instances: 3, clips: 10, ..SynthConfig::default() };
    for (_, truths) in generate_dataset(&cfg).unwrap() {
        assert!((2..=3).contains(&truths.len()));
    }
    let too_many = SynthConfig { max_instances: 6, ..SynthConfig::default() };
    assert!(generate_clip(&too_many, 0).is_err());
}

#[test]
fn save_load_round_trip_is_byte_stable() {
    let cfg = SynthConfig { clips: 3, t: 3, height: 24, width: 40, ..SynthConfig::default() };
    let data = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_annotations(&data, dir.path()).unwrap();
    let first = std::fs::read(&path).unwrap();
    save_annotations(&data, dir.path()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);

    let (file, samples) = load_dataset(&path).unwrap();
    assert_eq!(file.videos.len(), 3);
    for (k, s) in samples.iter().enumerate() {
        assert_eq!(s.video_id, k as u64 + 1);
        assert_eq!(s.clip, data[k].0);
        assert_eq!(s.truths, data[k].1);
    }
}

const HAND_WRITTEN: &str = r#"{
  "categories": [{"id": 0, "name": "circle"}, {"id": 1, "name": "square"}, {"id": 2, "name": "triangle"}],
  "videos": [{"id": 9, "T": 2, "height": 2, "width": 3, "frame_files": ["a.bin", "b.bin"]}],
  "annotations": [{
    "video_id": 9, "instance_id": 1, "category_id": 2,
    "boxes": [[0.5, 0.25, 0.3333333333333333, 0.5], [0, 0, 0, 0]],
    "rle_masks": [[2, 1, 3], [6]],
    "presence": [true, false]
  }]
}"#;

#[test]
fn hand_written_file_parses_to_its_text() {
    let file = AnnotationFile::parse(HAND_WRITTEN.as_bytes()).unwrap();
    let v = &file.videos[0];
    assert_eq!((v.id, v.t, v.height, v.width), (9, 2, 2, 3));
    assert_eq!(v.frame_files, vec!["a.bin", "b.bin"]);
    let truths = file.truths(9).unwrap();
    assert_eq!(truths.len(), 1);
    let t = &truths[0];
    assert_eq!(t.class_id, 2);
    assert_eq!(t.presence, vec![true, false]);
    // Runs 2 zeros, 1 one: column-major index 2 is row 0, column 1.
    let mut expect = Mask::empty(2, 3);
    expect.set(0, 1, true);
    assert_eq!(t.masks[0], expect);
    assert!(t.masks[1].is_empty());
    assert_eq!(derive_box(&t.masks[0]), Some(t.boxes[0]));
    assert_eq!(t.boxes[1], [0.0; 4]);
}

#[test]
fn schema_errors_name_the_field() {
    let no_videos = r#"{"categories": [], "annotations": []}"#;
    let err = AnnotationFile::parse(no_videos.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("videos"), "{err}");

    let bad_sum = HAND_WRITTEN.replace("[6]", "[5]");
    let err = AnnotationFile::parse(bad_sum.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("rle_masks[1]"), "{err}");

    let bad_type = HAND_WRITTEN.replace("\"T\": 2", "\"T\": \"two\"");
    let err = AnnotationFile::parse(bad_type.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("videos[0].T"), "{err}");
}

#[test]
fn unwritable_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let data = generate_dataset(&SynthConfig { clips: 1, t: 1, height: 8, width: 8, ..SynthConfig::default() }).unwrap();
    assert!(save_annotations(&data, &blocker.join("sub")).is_err());
    assert!(load_annotations(&dir.path().join("missing.json")).is_err());
}
