use std::collections::BTreeMap;
use std::fs;

use vitlr_core::dataset::{load_clip, load_labels, write_clip, DatasetIndex, Distance, Tag};
use vitlr_core::synth::{
    build_clip, generate_clip, generate_dataset, render_background, ClipShape, ClipSpec, Profile,
};
use vitlr_core::Image;

fn shape() -> ClipShape {
    ClipShape::default()
}

#[test]
fn same_spec_renders_identical_bytes() {
    for profile in [
        Profile::Easy,
        Profile::Mixed,
        Profile::ScenarioSweep,
        Profile::Occlusion,
    ] {
        let spec = ClipSpec::sample(profile, 3, 11, shape()).unwrap();
        let a = generate_clip(&spec, 4).unwrap();
        let b = generate_clip(&spec.clone(), 4).unwrap();
        assert_eq!(a, b, "{profile}");
    }
}

#[test]
fn easy_clip_has_one_static_light() {
    for i in 0..20 {
        let spec = ClipSpec::sample(Profile::Easy, i, 5, shape()).unwrap();
        let (_, labels) = generate_clip(&spec, 4).unwrap();
        assert_eq!(labels[0].lights.len(), 1);
        for l in &labels {
            assert_eq!(l.lights, labels[0].lights);
        }
    }
}

#[test]
fn far_boxes_are_smaller_than_near_boxes() {
    let mut areas: BTreeMap<Distance, Vec<f32>> = BTreeMap::new();
    let mut i = 0;
    while areas.values().map(Vec::len).min().unwrap_or(0) < 100 || areas.len() < 3 {
        let spec = ClipSpec::sample(Profile::Mixed, i, 21, shape()).unwrap();
        let (_, labels) = generate_clip(&spec, 4).unwrap();
        for frame in &labels {
            for l in &frame.lights {
                areas
                    .entry(spec.distance)
                    .or_default()
                    .push(l.bbox.w * l.bbox.h);
            }
        }
        i += 1;
    }
    // Height ranges at h=128 are 24-48, 10-24 and 4-10; aspect is at most 0.45.
    let k = shape().height as f32 / 128.0;
    let bound = |hmin: f32, hmax: f32| ((hmin * k).powi(2) * 0.38, (hmax * k).powi(2) * 0.45);
    let (near_lo, _) = bound(24.0, 48.0);
    let (_, far_hi) = bound(4.0, 10.0);
    let near_min = areas[&Distance::Near]
        .iter()
        .cloned()
        .fold(f32::INFINITY, f32::min);
    let mid_max = areas[&Distance::Mid].iter().cloned().fold(0.0, f32::max);
    let mid_min = areas[&Distance::Mid]
        .iter()
        .cloned()
        .fold(f32::INFINITY, f32::min);
    let far_max = areas[&Distance::Far].iter().cloned().fold(0.0, f32::max);
    assert!(far_max < near_min, "far {far_max} near {near_min}");
    assert!(far_max <= mid_min && mid_max <= near_min);
    assert!(near_min >= near_lo * 0.999 && far_max <= far_hi * 1.001);
}

#[test]
fn write_load_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, profile) in [Profile::Mixed, Profile::Occlusion].into_iter().enumerate() {
        let spec = ClipSpec::sample(profile, i, 9, shape()).unwrap();
        let clip = build_clip(&spec, format!("c{i}"), 4).unwrap();
        let path = dir.path().join(format!("c{i}"));
        write_clip(&path, &clip).unwrap();
        assert_eq!(load_clip(&path).unwrap(), clip);
    }
}

#[test]
fn missing_frame_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ClipSpec::sample(Profile::Easy, 0, 1, shape()).unwrap();
    let clip = build_clip(&spec, "c".into(), 4).unwrap();
    write_clip(dir.path(), &clip).unwrap();
    fs::remove_file(dir.path().join("frame_002.ppm")).unwrap();
    let err = load_clip(dir.path()).unwrap_err().to_string();
    assert!(err.contains("frame_002.ppm"), "{err}");
}

#[test]
fn manifest_field_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"clip_id": "x", "fps": 10, "num_states": 4, "frames": [
        {"image": "a.ppm", "lights": [{"cx": 1, "cy": 1, "w": 2, "h": -1, "state": "red", "visible": true}]}]}"#;
    fs::write(dir.path().join("manifest.json"), text).unwrap();
    let err = load_labels(dir.path()).unwrap_err().to_string();
    assert!(err.contains("frames[0].lights[0].h"), "{err}");

    let text = r#"{"clip_id": "x", "fps": 10, "num_states": 4, "frames": [
        {"image": "a.ppm", "lights": [{"cx": 1, "cy": 1, "w": 2, "h": 1, "state": "blue", "visible": true}]}]}"#;
    fs::write(dir.path().join("manifest.json"), text).unwrap();
    let err = load_labels(dir.path()).unwrap_err().to_string();
    assert!(err.contains("state"), "{err}");
}

#[test]
fn hand_written_two_frame_manifest_loads() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = Image::new(8, 8);
    img.data.fill(100);
    img.write_ppm(&dir.path().join("f0.ppm")).unwrap();
    img.write_ppm(&dir.path().join("f1.ppm")).unwrap();
    let text = r#"{"clip_id": "hand", "fps": 5, "num_states": 4, "frames": [
        {"image": "f0.ppm", "lights": [{"cx": 4, "cy": 4, "w": 2, "h": 4, "state": "yellow", "visible": true}]},
        {"image": "f1.ppm", "lights": [{"cx": 4, "cy": 4, "w": 2, "h": 4, "state": "yellow", "visible": true}]}]}"#;
    fs::write(dir.path().join("manifest.json"), text).unwrap();
    let clip = load_clip(dir.path()).unwrap();
    assert_eq!(clip.labels.len(), 2);
    assert_eq!(clip.frames.len(), 2);
    assert_eq!(clip.targets(1)[0].state, 1);
}

#[test]
fn dataset_split_is_70_10_20() {
    let dir = tempfile::tempdir().unwrap();
    let index = generate_dataset(dir.path(), Profile::Easy, 100, 7, shape()).unwrap();
    assert_eq!(
        (index.train.len(), index.valid.len(), index.test.len()),
        (70, 10, 20)
    );
    assert_eq!(DatasetIndex::read(dir.path()).unwrap(), index);
    for d in index.train.iter().chain(&index.valid).chain(&index.test) {
        assert!(dir.path().join(d).join("manifest.json").is_file());
    }
    assert!(index.test.iter().all(|d| d.starts_with("test/")));
}

#[test]
fn small_counts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate_dataset(dir.path(), Profile::Easy, 9, 7, shape()).is_err());
}

#[test]
fn unwritable_target_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    fs::write(&file, b"x").unwrap();
    assert!(generate_dataset(&file, Profile::Easy, 10, 7, shape()).is_err());
}

#[test]
fn sweep_has_equal_tag_buckets() {
    let dir = tempfile::tempdir().unwrap();
    let index = generate_dataset(dir.path(), Profile::ScenarioSweep, 100, 3, shape()).unwrap();
    let mut counts: BTreeMap<Tag, usize> = BTreeMap::new();
    for d in index.train.iter().chain(&index.valid).chain(&index.test) {
        let clip = load_labels(&dir.path().join(d)).unwrap();
        assert_eq!(clip.tags.len(), 1);
        *counts.entry(clip.tags[0]).or_default() += 1;
    }
    let want: BTreeMap<Tag, usize> = [Tag::Occlusion, Tag::Truncation, Tag::Blur, Tag::Small]
        .into_iter()
        .map(|t| (t, 25))
        .collect();
    assert_eq!(counts, want);
}

#[test]
fn same_seed_gives_identical_index_and_clips() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(a.path(), Profile::Mixed, 12, 99, shape()).unwrap();
    generate_dataset(b.path(), Profile::Mixed, 12, 99, shape()).unwrap();
    let ia = fs::read(a.path().join("index.json")).unwrap();
    assert_eq!(ia, fs::read(b.path().join("index.json")).unwrap());
    for rel in [
        "train/clip_00000/manifest.json",
        "test/clip_00011/frame_007.ppm",
    ] {
        assert_eq!(
            fs::read(a.path().join(rel)).unwrap(),
            fs::read(b.path().join(rel)).unwrap()
        );
    }
}

#[test]
fn light_count_above_query_budget_is_rejected() {
    let mut spec = ClipSpec::sample(Profile::Mixed, 0, 1, shape()).unwrap();
    while spec.lights.len() < 3 {
        let extra = spec.lights[0].clone();
        spec.lights.push(extra);
    }
    assert!(generate_clip(&spec, 2).is_err());
}

#[test]
fn visible_boxes_cover_rendered_pixels() {
    for profile in [
        Profile::Easy,
        Profile::Mixed,
        Profile::ScenarioSweep,
        Profile::Occlusion,
    ] {
        for i in 0..40 {
            let spec = ClipSpec::sample(profile, i, 17, shape()).unwrap();
            let mut bg = render_background(&spec);
            if spec.has(Tag::Blur) {
                bg = bg.box_blur();
            }
            let (frames, labels) = generate_clip(&spec, 4).unwrap();
            for (img, label) in frames.iter().zip(&labels) {
                for l in label.lights.iter().filter(|l| l.visible) {
                    let b = l.bbox;
                    let x0 = (b.cx - b.w / 2.0).floor().max(0.0) as usize;
                    let y0 = (b.cy - b.h / 2.0).floor().max(0.0) as usize;
                    let x1 = ((b.cx + b.w / 2.0).ceil() as usize).min(img.width);
                    let y1 = ((b.cy + b.h / 2.0).ceil() as usize).min(img.height);
                    let differs = (y0..y1).any(|y| (x0..x1).any(|x| img.get(x, y) != bg.get(x, y)));
                    assert!(
                        differs,
                        "{profile} clip {i}: box {b:?} shows only background"
                    );
                }
            }
        }
    }
}

#[test]
fn visible_boxes_stay_inside_unless_truncated() {
    for profile in [Profile::Mixed, Profile::ScenarioSweep] {
        for i in 0..60 {
            let spec = ClipSpec::sample(profile, i, 4, shape()).unwrap();
            let (w, h) = (spec.width as f32, spec.height as f32);
            let (_, labels) = generate_clip(&spec, 4).unwrap();
            for frame in &labels {
                for l in frame.lights.iter().filter(|l| l.visible) {
                    let b = l.bbox;
                    assert!(b.cx > 0.0 && b.cx < w && b.cy > 0.0 && b.cy < h);
                    if !spec.has(Tag::Truncation) {
                        assert!(b.cx - b.w / 2.0 >= 0.0 && b.cx + b.w / 2.0 <= w);
                        assert!(b.cy - b.h / 2.0 >= 0.0 && b.cy + b.h / 2.0 <= h);
                    }
                }
            }
        }
    }
}

#[test]
fn truncated_lights_straddle_the_edge() {
    for i in (1..200).step_by(4) {
        let spec = ClipSpec::sample(Profile::ScenarioSweep, i, 8, shape()).unwrap();
        assert!(spec.has(Tag::Truncation));
        let b = spec.lights[0].bbox(0);
        let w = spec.width as f32;
        assert!(
            b.cx - b.w / 2.0 < 0.0 || b.cx + b.w / 2.0 > w,
            "clip {i}: {b:?}"
        );
    }
}

#[test]
fn occlusion_hides_a_light_that_is_seen_elsewhere() {
    let mut hidden_last = 0;
    let total = 100;
    for i in 0..total {
        let spec = ClipSpec::sample(Profile::Occlusion, i, 31, shape()).unwrap();
        let (_, labels) = generate_clip(&spec, 4).unwrap();
        let o = spec.occluder.as_ref().unwrap();
        let vis: Vec<bool> = labels.iter().map(|f| f.lights[o.light].visible).collect();
        let first_hidden = vis.iter().position(|v| !v).expect("a frame is occluded");
        assert!(vis.iter().any(|&v| v), "clip {i}: light never visible");
        // Hidden frames form one contiguous span.
        let last_hidden = vis.iter().rposition(|v| !v).unwrap();
        assert!(
            vis[first_hidden..=last_hidden].iter().all(|v| !v),
            "clip {i}: {vis:?}"
        );
        if !vis[vis.len() - 1] {
            hidden_last += 1;
        }
        // Labels persist through the occlusion.
        assert!(labels.iter().all(|f| f.lights.len() == spec.lights.len()));
    }
    assert!(hidden_last > total / 3, "{hidden_last}");
}
