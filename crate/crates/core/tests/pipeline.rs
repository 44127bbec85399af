//! Stage-by-stage run over generated fixtures, checked against the
//! generator's ground truth.

use std::collections::BTreeMap;

use paddyspec::dataset::{build_manifest, Label};
use paddyspec::imaging::{load_image, RGB, RGNIR};
use paddyspec::pipeline::{calibrate_session, load_fused_set, ndvi_all, register_all, register_report, session_files};
use paddyspec::registration::{register_pair, RegistrationParams};
use paddyspec::synth::{render_pair, write_fixtures, CameraResponse, FixtureParams, PairGeometry, Scene};
use paddyspec::training::InputMode;

#[test]
fn image_pair_registers_to_the_generating_homography() {
    let geo = PairGeometry {
        rgnir_size: (160, 160),
        rgb_size: (160, 160),
        ..PairGeometry::default()
    };
    let truth = geo.homography().unwrap();
    let params = RegistrationParams::default();
    for (i, label) in [Label::Blast, Label::BrownSpot, Label::Healthy].into_iter().enumerate() {
        let scene = Scene::new(label, 100 + i as u64);
        let (rgb, dn) = render_pair(&scene, &CameraResponse::for_session(i as u64), &geo).unwrap();
        let reg = register_pair(&rgb, &dn, &params).unwrap();
        let e = reg.diagnostics.homography.corner_error(&truth, 160, 160);
        assert!(e < 2.0, "{label}: corner error {e:.3} px");
        assert!(reg.diagnostics.inliers >= params.ransac.min_inliers);
        assert_eq!(reg.image.width(), dn.width());
        // the RGB view is wider, so the whole R-G-NIR frame is covered
        assert!(reg.mask.valid_count() as f64 > 0.95 * (160.0 * 160.0));
    }
}

#[test]
fn fixtures_run_through_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let params = FixtureParams {
        per_class: [2, 1, 1],
        sessions: 2,
        seed: 9,
        ..FixtureParams::default()
    };
    assert_eq!(write_fixtures(&root, &params).unwrap(), 4);
    let manifest = build_manifest(&root).unwrap();
    assert_eq!(manifest.counts(), [2, 1, 1]);
    assert_eq!(manifest.records[0].session_id, "s1");
    assert_eq!(manifest.records[1].session_id, "s2");

    let reg_dir = dir.path().join("registered");
    let outcomes = register_all(&manifest.records, &RegistrationParams::default(), &reg_dir, 1, false).unwrap();
    assert!(outcomes.iter().all(|o| o.result.is_ok()));
    let report = register_report(&outcomes).unwrap();
    assert_eq!(report.lines().count(), 5);

    // calibration recovers the inverse of the session camera response
    let mut calibs = BTreeMap::new();
    for (s, path) in session_files(&root.join("sessions")).unwrap().iter().enumerate() {
        let (id, calib) = calibrate_session(path).unwrap();
        let cam = CameraResponse::for_session(params.seed + s as u64);
        for b in 0..3 {
            let f = calib.fits[b];
            assert!((f.gain - 1.0 / cam.gain[b]).abs() < 0.02, "{id} band {b} gain {}", f.gain);
            assert!((f.offset + cam.offset[b] / cam.gain[b]).abs() < 0.01, "{id} band {b} offset {}", f.offset);
        }
        calibs.insert(id, calib);
    }

    let fused_dir = dir.path().join("fused");
    let ndvi = ndvi_all(&manifest.records, &calibs, &reg_dir, &dir.path().join("ndvi"), &fused_dir, 32, 1).unwrap();
    for o in &ndvi {
        let rate = *o.result.as_ref().unwrap();
        assert!(rate < 0.01, "{}: clamp rate {rate}", o.id);
    }
    let set = load_fused_set(&manifest, &fused_dir, InputMode::RgbNdvi).unwrap();
    assert_eq!((set.len(), set.channels, set.size), (4, 4, 32));
    // mean NDVI follows the class NIR levels: blast < brown spot < healthy
    let mean_ndvi = |i: usize| set.inputs[i][3 * 32 * 32..].iter().map(|&v| v as f64).sum::<f64>() / 1024.0;
    let (blast, spot, healthy) = (mean_ndvi(0).max(mean_ndvi(1)), mean_ndvi(2), mean_ndvi(3));
    assert!(blast < spot && spot < healthy, "{blast} {spot} {healthy}");
    let rgb = set.rgb_only();
    assert_eq!(rgb.channels, 3);
}

#[test]
fn parallel_and_serial_registration_agree() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_fixtures(
        &root,
        &FixtureParams {
            per_class: [2, 2, 1],
            ..FixtureParams::default()
        },
    )
    .unwrap();
    let m = build_manifest(&root).unwrap();
    let p = RegistrationParams::default();
    let a = register_all(&m.records, &p, &dir.path().join("a"), 1, false).unwrap();
    let b = register_all(&m.records, &p, &dir.path().join("b"), 3, false).unwrap();
    assert_eq!(register_report(&a).unwrap(), register_report(&b).unwrap());
    for r in &m.records {
        let name = format!("{}_rgb.png", r.id);
        assert_eq!(
            std::fs::read(dir.path().join("a").join(&name)).unwrap(),
            std::fs::read(dir.path().join("b").join(&name)).unwrap()
        );
    }
}

#[test]
fn dry_run_reads_but_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_fixtures(
        &root,
        &FixtureParams {
            per_class: [1, 1, 1],
            ..FixtureParams::default()
        },
    )
    .unwrap();
    let m = build_manifest(&root).unwrap();
    std::fs::write(&m.records[1].rgnir_path, b"not a png").unwrap();
    let out = dir.path().join("out");
    let res = register_all(&m.records, &RegistrationParams::default(), &out, 1, true).unwrap();
    assert!(res[0].result.is_ok() && res[1].result.is_err() && res[2].result.is_ok());
    assert!(!out.exists());
    // inputs stay loadable with the band hints the stages use
    load_image(&m.records[0].rgb_path, &RGB).unwrap();
    load_image(&m.records[0].rgnir_path, &RGNIR).unwrap();
}
