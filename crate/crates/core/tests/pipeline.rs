use std::fs;

use put_core::atlas::BlendMode;
use put_core::demo;
use put_core::pipeline::{self, MetricsReport, PipelineConfig, PipelineError, RunOptions};
use put_core::scene::{build_texel_map, StreetGraph, Vec3};
use put_core::translator::{
    Identity, InputMode, TintStub, TranslateError, Translator, TranslatorRequest, TranslatorResponse, TranslatorSpec,
};
use put_core::viewpath::sample_viewpoints;

mod common;

fn small_demo() -> (demo::DemoScene, PipelineConfig) {
    let scene = demo::demo_scene(2, 256, 8.0);
    let cfg = PipelineConfig {
        pano_width: 256,
        pano_height: 128,
        atlas_size: 256,
        texels_per_m: scene.texels_per_m,
        ..Default::default()
    };
    (scene, cfg)
}

#[test]
fn identity_bake_is_gray_and_consistent() {
    let (scene, cfg) = small_demo();
    let (atlas, report) = pipeline::run_pipeline(&scene.mesh, &scene.streets, &cfg).unwrap();
    assert_eq!(report.consistency_per_iteration.len(), 10);
    assert!(report.consistency_per_iteration.iter().all(|&c| c <= 1e-6));
    assert!(atlas.textured_count() > 1000);
    assert!(atlas.textured().all(|(_, c)| c[0] == c[1] && c[1] == c[2]));
}

#[test]
fn identity_bake_of_a_wall_equals_its_shade() {
    let wall = demo::Quad {
        origin: Vec3::new(-4.0, 6.0, 0.0),
        along: Vec3::x(),
        up: Vec3::z(),
        width: 12.0,
        height: 5.0,
    };
    let (mesh, _) = demo::pack_quads(&[wall], 128, 8.0);
    let streets = StreetGraph { polylines: vec![vec![Vec3::zeros(), Vec3::new(4.0, 0.0, 0.0)]] };
    let cfg = PipelineConfig { atlas_size: 128, spacing_m: 2.0, ..Default::default() };
    let (atlas, _) = pipeline::run_pipeline(&mesh, &streets, &cfg).unwrap();
    // The cameras see the side facing -y.
    let want = (cfg.shading().shade(&-Vec3::y()) * 255.0).round() / 255.0;
    let map = build_texel_map(&mesh, 128, 128);
    let mut checked = 0;
    for e in map.entries() {
        let p = e.point;
        let c = atlas.color(e.texel).expect("whole wall is visible");
        // Bilinear taps mix the background into texels near the silhouette,
        // and re-rendering spreads that by about a pixel per iteration.
        if p.x > -3.0 && p.x < 7.0 && p.z > 0.6 && p.z < 4.4 {
            assert!((c[0] - want).abs() < 1e-9, "texel at {p:?}: {c:?}, want {want}");
            checked += 1;
        }
    }
    assert!(checked > 1500);
}

#[test]
fn overlapping_views_give_two_contributions() {
    let scene = demo::two_view_scene(128, 8.0);
    // Fine pixels keep the nearest-pixel depth error on the oblique fins
    // below the visibility tolerance.
    let cfg = PipelineConfig {
        pano_width: 2048,
        pano_height: 1024,
        atlas_size: 128,
        spacing_m: 4.0,
        ..Default::default()
    };
    let out = pipeline::run_pipeline_with(
        &scene.mesh,
        &scene.streets,
        &cfg,
        &mut TintStub::default(),
        &RunOptions::default(),
    )
    .unwrap();
    let cameras: Vec<Vec3> = sample_viewpoints(&scene.streets, 4.0, cfg.height_m).iter().map(|v| v.position).collect();
    assert_eq!(cameras.len(), 2);
    let map = build_texel_map(&scene.mesh, 128, 128);
    let mut counts = [0usize; 3];
    for e in map.entries() {
        let want = cameras.iter().filter(|c| common::sees(&scene.mesh, c, &e.point, &e.normal)).count();
        let got = out.atlas.contributions(e.texel).len();
        assert_eq!(got, want, "texel {} at {:?}", e.texel, e.point);
        counts[want] += 1;
    }
    assert!(counts[1] > 0 && counts[2] > 0, "{counts:?}");
}

#[test]
fn single_viewpoint_makes_modes_agree() {
    let scene = demo::two_view_scene(128, 8.0);
    let streets = StreetGraph { polylines: vec![vec![Vec3::new(2.0, 0.0, 0.0)]] };
    let cfg = PipelineConfig { atlas_size: 128, ..Default::default() };
    let (report, atlases) =
        pipeline::run_ablation(&scene.mesh, &streets, &cfg, None, || Ok(Box::new(TintStub::default()))).unwrap();
    assert_eq!(report.viewpoints, 1);
    let images: Vec<_> = atlases.iter().map(|a| a.to_rgba_image()).collect();
    assert_eq!(images[0], images[1]);
    assert_eq!(images[1], images[2]);
}

#[test]
fn ablation_report_has_documented_shape() {
    let scene = demo::two_view_scene(64, 4.0);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        atlas_size: 64,
        spacing_m: 4.0,
        output_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    pipeline::run_ablation(&scene.mesh, &scene.streets, &cfg, None, || Ok(Box::new(TintStub::default()))).unwrap();
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ablation.json")).unwrap()).unwrap();
    assert_eq!(v["viewpoints"], 2);
    assert_eq!(v["input_mode"], "merged");
    let modes = v["modes"].as_array().unwrap();
    let names: Vec<&str> = modes.iter().map(|m| m["mode"].as_str().unwrap()).collect();
    assert_eq!(names, ["no_blend", "average", "weighted"]);
    for m in modes {
        assert!(m["seam"].is_number());
        assert!(m["fid"].is_null());
        assert_eq!(m["consistency_per_iteration"].as_array().unwrap().len(), 2);
        let sub = dir.path().join(m["mode"].as_str().unwrap());
        let report: MetricsReport = serde_json::from_str(&fs::read_to_string(sub.join("report.json")).unwrap()).unwrap();
        assert_eq!(report.seam, m["seam"].as_f64().unwrap());
        assert!(sub.join("atlas.png").exists());
        assert!(sub.join("frame_00001.png").exists());
        assert!(sub.join("mask_00001.png").exists());
        assert!(sub.join("depth_00001.png").exists());
    }
}

#[test]
fn sidecar_describes_the_bake() {
    let (scene, mut cfg) = small_demo();
    let dir = tempfile::tempdir().unwrap();
    cfg.output_dir = Some(dir.path().to_path_buf());
    cfg.blend_mode = BlendMode::Average;
    let (atlas, _) = pipeline::run_pipeline(&scene.mesh, &scene.streets, &cfg).unwrap();
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("atlas.json")).unwrap()).unwrap();
    assert_eq!(side["mode"], "average");
    assert_eq!(side["clamp"], serde_json::json!([0.3, 0.7]));
    assert_eq!(side["iterations"], 10);
    assert_eq!(side["textured_texels"], atlas.textured_count());
    let png = image::open(dir.path().join("atlas.png")).unwrap().to_rgba8();
    let opaque = png.pixels().filter(|p| p.0[3] == 255).count();
    assert_eq!(opaque, atlas.textured_count());
    assert!(png.pixels().all(|p| p.0[3] == 0 || p.0[3] == 255));
}

/// Delegates to a tint stub but fails on one iteration.
struct FailsAt {
    inner: TintStub,
    calls: usize,
    fail_on: usize,
}

impl Translator for FailsAt {
    fn translate_request(&mut self, req: &TranslatorRequest) -> Result<TranslatorResponse, TranslateError> {
        let call = self.calls;
        self.calls += 1;
        if call == self.fail_on {
            return Err(TranslateError::Transport("connection reset".into()));
        }
        self.inner.translate_request(req)
    }
}

#[test]
fn failed_bake_persists_atlas_and_resumes() {
    let (scene, mut cfg) = small_demo();
    let reference = tempfile::tempdir().unwrap();
    cfg.output_dir = Some(reference.path().to_path_buf());
    pipeline::run_pipeline_with(&scene.mesh, &scene.streets, &cfg, &mut TintStub::default(), &RunOptions::default())
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    cfg.output_dir = Some(dir.path().to_path_buf());
    let mut failing = FailsAt { inner: TintStub::default(), calls: 0, fail_on: 4 };
    let err = pipeline::run_pipeline_with(&scene.mesh, &scene.streets, &cfg, &mut failing, &RunOptions::default())
        .unwrap_err();
    match err {
        PipelineError::Translation(f) => assert_eq!(f.iteration, 4),
        other => panic!("unexpected {other}"),
    }
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.failed_iteration, Some(4));
    assert_eq!(report.consistency_per_iteration.len(), 4);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("atlas.json")).unwrap()).unwrap();
    assert_eq!(side["iterations"], 4);

    // The stub's tint depends on its call count, so resume with one that has
    // already produced four outputs.
    let mut stub = TintStub::after(4);
    let resumed = RunOptions { start_iteration: 4, reference: None };
    let out = pipeline::run_pipeline_with(&scene.mesh, &scene.streets, &cfg, &mut stub, &resumed).unwrap();
    assert_eq!(out.report.consistency_per_iteration.len(), 10);
    assert_eq!(out.report.failed_iteration, None);
    assert_eq!(
        fs::read(dir.path().join("atlas.png")).unwrap(),
        fs::read(reference.path().join("atlas.png")).unwrap()
    );
}

#[test]
fn resume_rejects_mismatched_start() {
    let (scene, mut cfg) = small_demo();
    let dir = tempfile::tempdir().unwrap();
    cfg.output_dir = Some(dir.path().to_path_buf());
    pipeline::run_pipeline(&scene.mesh, &scene.streets, &cfg).unwrap();
    let opts = RunOptions { start_iteration: 3, reference: None };
    let err = pipeline::run_pipeline_with(&scene.mesh, &scene.streets, &cfg, &mut Identity, &opts).unwrap_err();
    assert!(matches!(err, PipelineError::Resume(_)), "{err}");
    cfg.output_dir = None;
    let err = pipeline::run_pipeline_with(&scene.mesh, &scene.streets, &cfg, &mut Identity, &opts).unwrap_err();
    assert!(matches!(err, PipelineError::Resume(_)), "{err}");
}

#[test]
fn four_channel_identity_returns_the_gray_plane() {
    let (scene, mut cfg) = small_demo();
    cfg.input_mode = InputMode::FourChannel;
    let out =
        pipeline::run_pipeline_with(&scene.mesh, &scene.streets, &cfg, &mut Identity, &RunOptions::default()).unwrap();
    assert_eq!(out.report.consistency_per_iteration.len(), 10);
    assert!(out.atlas.textured_count() > 0);
}

#[test]
fn fid_against_own_outputs_is_zero() {
    let (scene, cfg) = small_demo();
    let first =
        pipeline::run_pipeline_with(&scene.mesh, &scene.streets, &cfg, &mut Identity, &RunOptions::default()).unwrap();
    let feats = put_core::metrics::extract_features(&first.generated, &put_core::metrics::FeatureExtractor::Builtin).unwrap();
    let crops: Vec<_> = first
        .generated
        .iter()
        .map(|g| put_core::metrics::crop_facades(g, Default::default()).unwrap())
        .collect();
    let crop_feats = put_core::metrics::extract_features(&crops, &put_core::metrics::FeatureExtractor::Builtin).unwrap();
    let opts = RunOptions {
        start_iteration: 0,
        reference: Some(pipeline::Reference { full: feats, crop: Some(crop_feats), crop_spec: Default::default() }),
    };
    let out = pipeline::run_pipeline_with(&scene.mesh, &scene.streets, &cfg, &mut Identity, &opts).unwrap();
    assert!(out.report.fid.unwrap().abs() < 1e-6);
    assert!(out.report.crop_fid.unwrap().abs() < 1e-6);
}

#[test]
fn exec_translator_matches_in_process_stub() {
    let scene = demo::demo_scene(4, 128, 4.0);
    let streets = StreetGraph { polylines: vec![vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(10.0, 0.0, 0.0)]] };
    let mut cfg = PipelineConfig {
        pano_width: 128,
        pano_height: 64,
        atlas_size: 128,
        texels_per_m: scene.texels_per_m,
        translator: TranslatorSpec::Exec(format!("{} serve --translator stub", env!("CARGO_BIN_EXE_put"))),
        ..Default::default()
    };
    let (remote, report) = pipeline::run_pipeline(&scene.mesh, &streets, &cfg).unwrap();
    assert_eq!(report.consistency_per_iteration.len(), 3);
    cfg.translator = TranslatorSpec::Stub;
    let (local, _) = pipeline::run_pipeline(&scene.mesh, &streets, &cfg).unwrap();
    assert_eq!(remote.to_rgba_image(), local.to_rgba_image());
}

#[test]
fn dead_exec_translator_fails_the_first_iteration() {
    let scene = demo::two_view_scene(64, 4.0);
    let cfg = PipelineConfig {
        atlas_size: 64,
        spacing_m: 4.0,
        translator: TranslatorSpec::Exec("exit 3".into()),
        ..Default::default()
    };
    match pipeline::run_pipeline(&scene.mesh, &scene.streets, &cfg) {
        Err(PipelineError::Translation(f)) => assert_eq!(f.iteration, 0),
        other => panic!("unexpected {other:?}"),
    }
}
