use std::ffi::{CStr, CString};
use std::ptr;

use seglift::config::RunConfig;
use seglift::eval::segment;
use seglift::fields::{ObjectConfig, RadianceConfig};
use seglift::hash_grid::{auto_dense_threshold, HashGridConfig};
use seglift::losses::LossWeights;
use seglift::render::{render_image, FieldSource};
use seglift::synthetic::{build_dataset, AnalyticScene, RigConfig};
use seglift::train::{Checkpoint, ObjectTrainer, RadianceTrainer, TrainConfig};
use seglift_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(seglift_last_error_message()) }.to_string_lossy().into_owned()
}

fn grid() -> HashGridConfig {
    HashGridConfig {
        num_levels: 2,
        features_per_level: 2,
        base_resolution: 4,
        per_level_scale: 2.0,
        table_size: 256,
        dense_threshold: auto_dense_threshold(256),
    }
}

fn write_checkpoint(path: &std::path::Path) -> (Checkpoint, seglift::dataset::SceneDataset) {
    let rig = RigConfig { train_views: 3, test_views: 1, resolution: 8, ..RigConfig::default() };
    let cfg = RunConfig::desk();
    let ds = build_dataset(&AnalyticScene::default_scene(), &rig, &cfg.corruption).unwrap();
    let train = TrainConfig { stage1_iters: 2, stage1_rays_per_batch: 32, stage2_iters: 2, ..TrainConfig::default() };
    let radiance = RadianceConfig { grid: grid(), density_hidden: vec![8], color_hidden: vec![8], ..RadianceConfig::default() };
    let mut r = RadianceTrainer::new(&ds, radiance, train.clone(), cfg.sampling.clone(), LossWeights::default()).unwrap();
    r.run(|_| {}).unwrap();
    let caches = ObjectTrainer::build_caches(&ds, &r.field, &cfg.sampling, &cfg.postprocess, 1e-3).unwrap();
    let objects = ObjectConfig { grid: grid(), hidden: vec![8], ..ObjectConfig::default() };
    let mut o = ObjectTrainer::new(caches, objects, train, LossWeights::default()).unwrap();
    o.run(|_| {}).unwrap();
    let ck = Checkpoint::from_radiance(&r).with_objects(&o);
    ck.save(path).unwrap();
    (ck, ds)
}

#[test]
fn hungarian_assigns_optimally() {
    let aff = [0.1, 0.9, 0.0, 0.8, 0.7, 0.1];
    let mut gamma = [9u32; 2];
    let mut total = 0.0;
    let s = unsafe { seglift_hungarian(aff.as_ptr(), 2, 3, gamma.as_mut_ptr(), &mut total) };
    assert_eq!(s, SegliftStatus::Ok);
    assert_eq!(gamma, [1, 0]);
    assert!((total - 1.7).abs() < 1e-12);
}

#[test]
fn too_many_masks_reports_capacity() {
    let aff = [0.5; 6];
    let mut gamma = [0u32; 3];
    let s = unsafe { seglift_hungarian(aff.as_ptr(), 3, 2, gamma.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(s, SegliftStatus::Capacity);
    assert!(last_error().contains("3 masks"));
}

#[test]
fn mask_iou_matches_counting() {
    let a = [1u8, 1, 0, 0, 1];
    let b = [0u8, 1, 1, 0, 1];
    let mut out = -1.0;
    assert_eq!(unsafe { seglift_mask_iou(a.as_ptr(), b.as_ptr(), 5, &mut out) }, SegliftStatus::Ok);
    assert_eq!(out, 0.5);
}

#[test]
fn null_pointers_are_rejected() {
    let mut out = 0.0;
    assert_eq!(unsafe { seglift_mask_iou(ptr::null(), ptr::null(), 3, &mut out) }, SegliftStatus::NullPointer);
    assert!(last_error().contains("null"));
    assert_eq!(unsafe { seglift_model_load(ptr::null(), ptr::null_mut()) }, SegliftStatus::NullPointer);
    let mut n = 0;
    assert_eq!(unsafe { seglift_model_num_slots(ptr::null(), &mut n) }, SegliftStatus::NullPointer);
    unsafe { seglift_model_free(ptr::null_mut()) };
}

#[test]
fn missing_and_corrupt_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { seglift_model_load(missing.as_ptr(), &mut m) }, SegliftStatus::Io);
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { seglift_model_load(bad.as_ptr(), &mut m) }, SegliftStatus::Format);
    assert!(m.is_null());
}

#[test]
fn renders_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let (ck, ds) = write_checkpoint(&path);
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { seglift_model_load(cpath.as_ptr(), &mut model) }, SegliftStatus::Ok);
    let mut slots = 0;
    assert_eq!(unsafe { seglift_model_num_slots(model, &mut slots) }, SegliftStatus::Ok);
    assert_eq!(slots as usize, ck.meta.num_slots);
    assert_eq!(unsafe { seglift_model_set_sampling(model, 8, 8, 0.0, 0.0, 0.0) }, SegliftStatus::Ok);
    assert_eq!(unsafe { seglift_model_set_sampling(model, 0, 8, 0.0, 0.0, 0.0) }, SegliftStatus::InvalidArgument);

    let frame = &ds.frames[0];
    let c = &frame.camera;
    let mut c2w = [0.0; 16];
    for i in 0..4 {
        c2w[i * 4..i * 4 + 4].copy_from_slice(&c.camera_to_world[i]);
    }
    let cam = SegliftCamera {
        camera_to_world: c2w,
        fx: c.focal_x,
        fy: c.focal_y,
        cx: c.principal_point.0,
        cy: c.principal_point.1,
        width: c.width as u32,
        height: c.height as u32,
    };
    let px = c.width * c.height;
    let mut rgb = vec![0.0f32; px * 3];
    let mut labels = vec![0u32; px];
    assert_eq!(unsafe { seglift_model_render(model, &cam, rgb.as_mut_ptr(), labels.as_mut_ptr()) }, SegliftStatus::Ok);

    let radiance = ck.radiance_field().unwrap();
    let objects = ck.object_field().unwrap();
    let mut sampling = seglift::render::SamplingConfig::default();
    sampling.coarse_samples = 8;
    sampling.fine_samples = 8;
    let (img, probs) = render_image(c, &FieldSource::new(&radiance, Some(&objects)), &sampling.deterministic(), 0).unwrap();
    assert_eq!(rgb, img.data);
    assert_eq!(labels, segment(&probs).data);
    unsafe { seglift_model_free(model) };
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(seglift_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/seglift.h");
    let Ok(out) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
