use facedodge::makeup::{MakeupLayer, Palette};
use facedodge::synthface::{
    region_masks, render_identity, synth_stream, CameraProfile, Capture, Cohort, IdentityParams, Range,
    Region,
};

fn still_profile() -> CameraProfile {
    let cap = Capture::default();
    CameraProfile {
        id: "still".into(),
        yaw_deg: Range::fixed(0.0),
        pitch_deg: Range::fixed(0.0),
        roll_deg: Range::fixed(0.0),
        brightness: Range::fixed(0.0),
        scale: Range::fixed(cap.scale),
        offset_px: Range::fixed(0.0),
        lip_tint: Range::fixed(0.0),
        cheek_flush: Range::fixed(0.0),
        noise_sigma: 0.0,
        fps: 10.0,
        background: cap.background,
        image_size: cap.image_size,
    }
}

fn cohort(seed: u64) -> Cohort {
    if seed % 2 == 0 { Cohort::A } else { Cohort::B }
}

#[test]
fn same_seed_gives_same_params_and_image() {
    for seed in [0, 7, 123_456] {
        let a = IdentityParams::from_seed(seed, cohort(seed));
        let b = IdentityParams::from_seed(seed, cohort(seed));
        assert_eq!(a, b);
        a.validate().unwrap();
        let cap = Capture::default();
        assert_eq!(render_identity(&a, &cap).unwrap(), render_identity(&b, &cap).unwrap());
    }
}

#[test]
fn frontal_landmarks_are_symmetric_about_the_nose() {
    for seed in 0..20 {
        let p = IdentityParams::from_seed(seed, cohort(seed));
        let (_, lm) = render_identity(&p, &Capture::default()).unwrap();
        let asym = (lm.left_eye.x + lm.right_eye.x - 2.0 * lm.nose_tip.x).abs();
        assert!(asym < 2.0, "seed {seed}: {asym}");
        assert!(lm.left_eye.x < lm.right_eye.x);
        assert!(lm.mouth_left.x < lm.mouth_right.x);
        assert!(lm.left_brow_outer.x < lm.left_brow_inner.x);
        assert!(lm.right_brow_inner.x < lm.right_brow_outer.x);
    }
}

#[test]
fn distinct_identities_render_distinctly() {
    // close-up framing: the face rather than the shared background fills the frame
    let cap = Capture {
        scale: 84.0,
        ..Capture::default()
    };
    let mut floor = f64::INFINITY;
    for i in 0..20u64 {
        let a = IdentityParams::from_seed(1000 + 2 * i, cohort(i));
        let b = IdentityParams::from_seed(1001 + 2 * i, cohort(i));
        let (ia, _) = render_identity(&a, &cap).unwrap();
        let (ib, _) = render_identity(&b, &cap).unwrap();
        let d = ia.mean_abs_diff(&ib).unwrap();
        floor = floor.min(d);
    }
    println!("identity separation floor: mean |delta| = {floor:.4}");
    assert!(floor > 0.01, "{floor}");
}

#[test]
fn landmarks_stay_consistent_across_camera_poses() {
    let p = IdentityParams::from_seed(42, Cohort::B);
    let mut draws = 0;
    for (k, profile) in CameraProfile::defaults().iter().enumerate() {
        let stream = synth_stream(&p, profile, 50, 900 + k as u64, None).unwrap();
        for f in &stream.frames {
            let gt = f.ground_truth.as_ref().unwrap();
            let lm = &gt.landmarks;
            lm.validate(f.image.width(), f.image.height()).unwrap();
            for e in [lm.left_eye, lm.right_eye] {
                assert!(gt.bbox.contains(e));
                let px = f.image.pixel(e.x.round() as usize, e.y.round() as usize);
                let luma = (px[0] + px[1] + px[2]) / 3.0;
                assert!(luma < 0.3, "frame {} eye pixel {px:?}", f.index);
            }
            assert!(lm.left_eye.x < lm.right_eye.x);
            draws += 1;
        }
    }
    assert_eq!(draws, 100);
}

#[test]
fn default_profiles_keep_faces_large_enough() {
    for profile in CameraProfile::defaults() {
        profile.validate(15.0).unwrap();
        let p = IdentityParams::from_seed(3, Cohort::A);
        for f in synth_stream(&p, &profile, 60, 5, None).unwrap().frames {
            let b = f.ground_truth.unwrap().bbox;
            assert!(b.width >= 15.0 && b.height >= 15.0);
        }
    }
}

#[test]
fn profile_validation_rejects_tiny_faces() {
    let mut profile = CameraProfile::corridor_high();
    profile.scale = Range::new(4.0, 10.0);
    assert!(profile.validate(15.0).is_err());
    let mut profile = CameraProfile::corridor_high();
    profile.lip_tint = Range::new(0.0, 1.5);
    assert!(profile.validate(15.0).is_err());
}

#[test]
fn lips_mask_covers_the_mouth() {
    for seed in 0..10 {
        let p = IdentityParams::from_seed(seed, cohort(seed));
        let (img, lm) = render_identity(&p, &Capture::default()).unwrap();
        let masks = region_masks(&lm, img.width(), img.height()).unwrap();
        assert_eq!(masks.regions().count(), Region::ALL.len());
        let c = lm.mouth_center();
        let v = masks.get(Region::Lips).unwrap().value(c.x.round() as usize, c.y.round() as usize);
        assert!(v > 0.5, "seed {seed}: {v}");
    }
}

#[test]
fn paired_masks_mirror_each_other() {
    let p = IdentityParams::from_seed(6, Cohort::A);
    let (img, lm) = render_identity(&p, &Capture::default()).unwrap();
    let (w, h) = (img.width(), img.height());
    let axis = (w as f64 - 1.0) / 2.0;
    let masks = region_masks(&lm, w, h).unwrap();
    let mirrored = region_masks(&lm.mirrored(axis), w, h).unwrap();
    for region in Region::ALL {
        let a = masks.get(region).unwrap().to_dense(w, h);
        let b = mirrored.get(region.mirror()).unwrap().to_dense(w, h);
        let mut worst: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                worst = worst.max((a[y * w + x] - b[y * w + (w - 1 - x)]).abs());
            }
        }
        assert!(worst < 0.05, "{region}: {worst}");
    }
}

#[test]
fn brow_and_lip_masks_are_disjoint() {
    for seed in 0..10 {
        let p = IdentityParams::from_seed(seed, cohort(seed));
        let (img, lm) = render_identity(&p, &Capture::default()).unwrap();
        let (w, h) = (img.width(), img.height());
        let masks = region_masks(&lm, w, h).unwrap();
        let lips = masks.get(Region::Lips).unwrap().to_dense(w, h);
        for brow in [Region::LeftBrow, Region::RightBrow] {
            let b = masks.get(brow).unwrap().to_dense(w, h);
            let overlap: f64 = b.iter().zip(&lips).map(|(x, y)| x.min(*y)).sum();
            let floor = 0.01 * b.iter().sum::<f64>().min(lips.iter().sum());
            assert!(overlap < floor, "seed {seed} {brow}: {overlap}");
        }
    }
}

#[test]
fn coincident_eyes_are_rejected() {
    let p = IdentityParams::from_seed(2, Cohort::A);
    let (_, mut lm) = render_identity(&p, &Capture::default()).unwrap();
    lm.right_eye = lm.left_eye;
    assert!(region_masks(&lm, 256, 256).is_err());
}

#[test]
fn single_still_frame_equals_the_plain_render() {
    let p = IdentityParams::from_seed(8, Cohort::B);
    let profile = still_profile();
    let stream = synth_stream(&p, &profile, 1, 77, None).unwrap();
    assert_eq!(stream.len(), 1);
    let (img, lm) = render_identity(&p, &profile.center_capture()).unwrap();
    assert_eq!(stream.frames[0].image, img);
    assert_eq!(stream.frames[0].ground_truth.as_ref().unwrap().landmarks, lm);
}

#[test]
fn streams_are_deterministic_under_seed() {
    let p = IdentityParams::from_seed(9, Cohort::A);
    let profile = CameraProfile::corridor_low();
    let a = synth_stream(&p, &profile, 6, 3, None).unwrap();
    assert_eq!(a, synth_stream(&p, &profile, 6, 3, None).unwrap());
    assert_ne!(a, synth_stream(&p, &profile, 6, 4, None).unwrap());
    assert!(a.frames.iter().enumerate().all(|(i, f)| f.index == i && f.camera_id == "cam2"));
}

#[test]
fn zero_frames_are_rejected() {
    let p = IdentityParams::from_seed(9, Cohort::A);
    assert!(synth_stream(&p, &still_profile(), 0, 1, None).is_err());
}

#[test]
fn makeup_changes_stay_inside_the_used_regions() {
    let palette = Palette::default();
    let layers = vec![
        MakeupLayer::from_entry(palette.entry("lip_red").unwrap(), Region::Lips, 0.6, 1.0),
        MakeupLayer::from_entry(palette.entry("brow_dark").unwrap(), Region::LeftBrow, 0.5, 1.0),
        MakeupLayer::from_entry(palette.entry("blush_rose").unwrap(), Region::RightCheek, 0.4, 1.0),
    ];
    let profile = still_profile();
    let mut worst: f64 = 1.0;
    for seed in 0..5 {
        let p = IdentityParams::from_seed(seed, cohort(seed));
        let plain = synth_stream(&p, &profile, 1, 1, None).unwrap();
        let made_up = synth_stream(&p, &profile, 1, 1, Some(&layers)).unwrap();
        let (a, b) = (&plain.frames[0].image, &made_up.frames[0].image);
        let lm = &plain.frames[0].ground_truth.as_ref().unwrap().landmarks;
        let (w, h) = (a.width(), a.height());
        let masks = region_masks(lm, w, h).unwrap();
        let union = masks.union_dense(&[Region::Lips, Region::LeftBrow, Region::RightCheek]);
        let (mut inside, mut total) = (0.0, 0.0);
        for i in 0..w * h {
            let d: f64 = (0..3).map(|c| (a.data()[3 * i + c] - b.data()[3 * i + c]).abs()).sum();
            total += d;
            if union[i] > 0.0 {
                inside += d;
            }
        }
        assert!(total > 0.0);
        worst = worst.min(inside / total);
    }
    println!("makeup locality: worst inside-mass ratio {worst:.5}");
    assert!(worst > 0.99, "{worst}");
}

#[test]
fn streams_export_frames_and_manifest() {
    let p = IdentityParams::from_seed(1, Cohort::A);
    let stream = synth_stream(&p, &CameraProfile::corridor_high(), 3, 2, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    stream.export(dir.path()).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let entries = manifest.as_array().unwrap();
    assert_eq!(entries.len(), 3);
    for e in entries {
        assert!(dir.path().join(e["file"].as_str().unwrap()).exists());
        assert_eq!(e["camera_id"], "cam1");
        assert!(e["bbox"].is_object() && e["landmarks"].is_object());
    }
}

#[test]
fn identity_params_round_trip_through_json() {
    let p = IdentityParams::from_seed(55, Cohort::B);
    let json = serde_json::to_string(&p).unwrap();
    assert_eq!(serde_json::from_str::<IdentityParams>(&json).unwrap(), p);
}
