use proptest::prelude::*;
use vitlr_core::dataset::load_clip;
use vitlr_core::egolane::{
    egolane_pipeline, project, project_camera, select_ego_light, CameraModel, EgoPose,
    OracleDetector, Projection, DEFAULT_RADIUS,
};
use vitlr_core::metrics::Detection;
use vitlr_core::rng::SplitMix64;
use vitlr_core::synth::{build_clip, generate_dataset, ClipShape, ClipSpec, Profile};
use vitlr_core::BBox;

/// All distances first, then filter, then the minimum under
/// (distance, -confidence, query) ordering.
fn brute_force(dets: &[Detection], u: f64, v: f64, radius: f64) -> Option<usize> {
    let dist: Vec<f64> = dets
        .iter()
        .map(|d| ((d.bbox.cx as f64 - u).powi(2) + (d.bbox.cy as f64 - v).powi(2)).sqrt())
        .collect();
    let mut inside: Vec<usize> = (0..dets.len()).filter(|&i| dist[i] <= radius).collect();
    inside.sort_by(|&a, &b| {
        dist[a]
            .total_cmp(&dist[b])
            .then(dets[b].confidence.total_cmp(&dets[a].confidence))
            .then(dets[a].query.cmp(&dets[b].query))
    });
    inside.first().copied()
}

#[test]
fn selection_matches_brute_force_on_random_scenes() {
    let mut rng = SplitMix64::new(77);
    for scene in 0..1000 {
        let k = rng.below(8);
        let mut queries: Vec<usize> = (0..16).collect();
        rng.shuffle(&mut queries);
        // Integer centres and coarse confidences make exact ties common.
        let dets: Vec<Detection> = (0..k)
            .map(|i| Detection {
                bbox: BBox::new(
                    rng.below(12) as f32 * 5.0,
                    rng.below(12) as f32 * 5.0,
                    3.0,
                    6.0,
                ),
                state: rng.below(4),
                confidence: 0.1 * (1 + rng.below(4)) as f32,
                query: queries[i],
            })
            .collect();
        let (u, v) = if rng.chance(0.5) {
            (rng.below(12) as f64 * 5.0, rng.below(12) as f64 * 5.0)
        } else {
            (rng.uniform(0.0, 60.0), rng.uniform(0.0, 60.0))
        };
        let radius = [5.0, 10.0, 25.0, 50.0][rng.below(4)];
        let got = select_ego_light(&dets, u, v, radius);
        assert_eq!(
            got.map(|s| s.index),
            brute_force(&dets, u, v, radius),
            "scene {scene}"
        );
        if let Some(s) = got {
            assert!(s.distance <= radius);
        }
    }
}

#[test]
fn selection_hand_cases() {
    let d = |cx: f32, conf: f32, query: usize| Detection {
        bbox: BBox::new(cx, 0.0, 2.0, 4.0),
        state: 0,
        confidence: conf,
        query,
    };
    assert!(select_ego_light(&[d(100.0, 0.9, 0)], 0.0, 0.0, 50.0).is_none());
    let s = select_ego_light(&[d(30.0, 0.9, 0), d(10.0, 0.5, 1)], 0.0, 0.0, 50.0).unwrap();
    assert_eq!((s.index, s.distance), (1, 10.0));
    let s = select_ego_light(&[d(-10.0, 0.8, 0), d(10.0, 0.9, 1)], 0.0, 0.0, 50.0).unwrap();
    assert_eq!(s.index, 1);
}

#[test]
fn projection_hand_cases() {
    let cam = CameraModel::new(100.0, 100.0, 320.0, 240.0, 640, 480).unwrap();
    let Projection::Pixel { u, v } = project_camera([0.0, 0.0, 7.0], &cam) else {
        panic!()
    };
    assert!((u - 320.0).abs() < 1e-6 && (v - 240.0).abs() < 1e-6);
    let Projection::Pixel { u, v } = project_camera([1.0, 0.0, 10.0], &cam) else {
        panic!()
    };
    assert!((u - 330.0).abs() < 1e-6 && (v - 240.0).abs() < 1e-6);
    assert_eq!(
        project_camera([0.0, 0.0, 0.0], &cam),
        Projection::BehindCamera
    );
    let pose = EgoPose::identity();
    assert_eq!(
        project([0.0, 0.0, 0.05], &pose, &cam),
        Projection::BehindCamera
    );
}

#[test]
fn camera_validation() {
    assert!(CameraModel::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
    assert!(CameraModel::new(1.0, 1.0, 9.0, 1.0, 4, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_is_scale_invariant(x in -5.0f64..5.0, y in -5.0f64..5.0, z in 1.0f64..100.0, k in 0.1f64..10.0) {
        let cam = CameraModel::new(240.0, 250.0, 128.0, 64.0, 256, 128).unwrap();
        let a = project_camera([x, y, z], &cam);
        let b = project_camera([k * x, k * y, k * z], &cam);
        match (a, b) {
            (Projection::Pixel { u: u1, v: v1 }, Projection::Pixel { u: u2, v: v2 }) => {
                prop_assert!((u1 - u2).abs() < 1e-6 && (v1 - v2).abs() < 1e-6);
            }
            _ => prop_assert!(k * z <= 0.1),
        }
    }
}

#[test]
fn oracle_pipeline_reproduces_state_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let shape = ClipShape::default();
    let index = generate_dataset(dir.path(), Profile::Mixed, 20, 13, shape).unwrap();
    let mut all = index.train.clone();
    all.extend(index.valid.iter().cloned());
    all.extend(index.test.iter().cloned());
    assert_eq!(all.len(), 20);
    let mut switched = 0;
    for (i, rel) in all.iter().enumerate() {
        let clip = load_clip(&dir.path().join(rel)).unwrap();
        let spec = ClipSpec::sample(Profile::Mixed, i, 13, shape).unwrap();
        let poses = clip.poses().unwrap();
        let light = clip.map_light.clone().unwrap();
        let cam = CameraModel::synthetic(shape.width, shape.height);
        let n = 3;
        let records = egolane_pipeline(
            &OracleDetector { window: n },
            &clip,
            &poses,
            &light,
            &cam,
            DEFAULT_RADIUS,
        )
        .unwrap();
        assert_eq!(records.len(), clip.len() + 1 - n);
        let want: Vec<&str> = (n - 1..clip.len())
            .map(|t| spec.lights[0].state_at(t).name())
            .collect();
        let got: Vec<&str> = records.iter().map(|r| r.state.as_str()).collect();
        assert_eq!(got, want, "clip {rel}");
        assert!(records.iter().all(|r| r.distance_px.unwrap() < 1e-3));
        if spec.lights[0].switch.is_some() {
            switched += 1;
        }
    }
    assert!(switched > 0, "no clip exercises a mid-clip switch");
}

#[test]
fn tiny_radius_selects_only_coincident_centres() {
    let shape = ClipShape::default();
    for i in 0..5 {
        let spec = ClipSpec::sample(Profile::Mixed, i, 3, shape).unwrap();
        let clip = build_clip(&spec, "c".into(), 4).unwrap();
        let poses = clip.poses().unwrap();
        let cam = CameraModel::synthetic(shape.width, shape.height);
        let records = egolane_pipeline(
            &OracleDetector { window: 2 },
            &clip,
            &poses,
            clip.map_light.as_ref().unwrap(),
            &cam,
            1e-9,
        )
        .unwrap();
        for r in records {
            match r.distance_px {
                None => assert_eq!(r.state, "none"),
                Some(d) => assert!(d <= 1e-9),
            }
        }
    }
}

#[test]
fn pipeline_edge_cases() {
    let shape = ClipShape::default();
    let spec = ClipSpec::sample(Profile::Easy, 0, 1, shape).unwrap();
    let clip = build_clip(&spec, "c".into(), 4).unwrap();
    let poses = clip.poses().unwrap();
    let light = clip.map_light.clone().unwrap();
    let cam = CameraModel::synthetic(shape.width, shape.height);
    let full = OracleDetector { window: clip.len() };
    assert_eq!(
        egolane_pipeline(&full, &clip, &poses, &light, &cam, 50.0)
            .unwrap()
            .len(),
        1
    );
    assert!(egolane_pipeline(&full, &clip, &poses[1..], &light, &cam, 50.0).is_err());
    // A light behind the camera yields "none" everywhere.
    let mut behind = light.clone();
    behind.xyz[2] = poses[0].position[2] - 1000.0;
    let records = egolane_pipeline(
        &OracleDetector { window: 1 },
        &clip,
        &poses,
        &behind,
        &cam,
        50.0,
    )
    .unwrap();
    assert!(records
        .iter()
        .all(|r| r.state == "none" && r.distance_px.is_none()));
}
