//! Exercises the C ABI from Rust: handle lifecycle, status codes, error
//! messages and forward parity with the underlying library.

use std::ffi::{CStr, CString};
use std::ptr;

use vidtr::model::{Model, ModelConfig};
use vidtr::tensor::Tensor;
use vidtr_ffi::*;

fn last_error() -> String {
    unsafe {
        CStr::from_ptr(vidtr_last_error_message())
            .to_string_lossy()
            .into_owned()
    }
}

fn build_toy(seed: u64) -> *mut VidtrModel {
    let name = CString::new("toy").unwrap();
    let mut handle: *mut VidtrModel = ptr::null_mut();
    let status = unsafe { vidtr_model_build_preset(name.as_ptr(), seed, &mut handle) };
    assert_eq!(status, VidtrStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    handle
}

/// Deterministic pseudo-random clip, generated in f32 so the FFI widening
/// to f64 is exactly reproducible on the Rust side.
fn sample_clip(len: usize, seed: u64) -> Vec<f32> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    (0..len)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 40) as f32) / ((1u64 << 24) as f32)
        })
        .collect()
}

#[test]
fn geometry_getters_match_preset() {
    let handle = build_toy(9);
    let cfg = ModelConfig::preset("toy").unwrap();
    unsafe {
        assert_eq!(vidtr_model_clip_len(handle), cfg.clip_len as u64);
        assert_eq!(vidtr_model_frame_width(handle), cfg.frame_w as u64);
        assert_eq!(vidtr_model_frame_height(handle), cfg.frame_h as u64);
        assert_eq!(vidtr_model_channels(handle), cfg.channels as u64);
        assert_eq!(vidtr_model_class_count(handle), cfg.class_count as u64);
        let direct = Model::build(cfg, 9).unwrap();
        assert_eq!(vidtr_model_param_count(handle), direct.param_count() as u64);
        vidtr_model_free(handle);
    }
}

#[test]
fn forward_matches_direct_model() {
    let handle = build_toy(42);
    let cfg = ModelConfig::preset("toy").unwrap();
    let direct = Model::build(cfg.clone(), 42).unwrap();

    let clip_len: usize = cfg.geom().clip_shape().iter().product();
    let clip = sample_clip(clip_len, 7);
    let mut logits = vec![0.0f32; cfg.class_count];
    let status = unsafe {
        vidtr_model_forward(
            handle,
            clip.as_ptr(),
            clip.len(),
            logits.as_mut_ptr(),
            logits.len(),
        )
    };
    assert_eq!(status, VidtrStatus::Ok, "{}", last_error());
    assert_eq!(last_error(), "");

    let wide: Vec<f64> = clip.iter().map(|&v| v as f64).collect();
    let tensor = Tensor::new(cfg.geom().clip_shape(), wide).unwrap();
    let expect = direct.forward(&tensor).unwrap();
    let expect32: Vec<f32> = expect.logits.data().iter().map(|&v| v as f32).collect();
    assert_eq!(logits, expect32);

    unsafe { vidtr_model_free(handle) };
}

#[test]
fn save_load_round_trip_preserves_forward() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let handle = build_toy(3);
    let status = unsafe { vidtr_model_save(handle, cpath.as_ptr()) };
    assert_eq!(status, VidtrStatus::Ok, "{}", last_error());

    let mut reloaded: *mut VidtrModel = ptr::null_mut();
    let status = unsafe { vidtr_model_load(cpath.as_ptr(), &mut reloaded) };
    assert_eq!(status, VidtrStatus::Ok, "{}", last_error());

    let cfg = ModelConfig::preset("toy").unwrap();
    let clip_len: usize = cfg.geom().clip_shape().iter().product();
    let clip = sample_clip(clip_len, 11);
    let mut a = vec![0.0f32; cfg.class_count];
    let mut b = vec![0.0f32; cfg.class_count];
    unsafe {
        let s = vidtr_model_forward(handle, clip.as_ptr(), clip.len(), a.as_mut_ptr(), a.len());
        assert_eq!(s, VidtrStatus::Ok);
        let s = vidtr_model_forward(reloaded, clip.as_ptr(), clip.len(), b.as_mut_ptr(), b.len());
        assert_eq!(s, VidtrStatus::Ok);
        vidtr_model_free(handle);
        vidtr_model_free(reloaded);
    }
    assert_eq!(a, b);
}

#[test]
fn null_and_bad_arguments_report_status() {
    unsafe {
        // null out pointer
        let name = CString::new("toy").unwrap();
        let status = vidtr_model_build_preset(name.as_ptr(), 0, ptr::null_mut());
        assert_eq!(status, VidtrStatus::NullPointer);
        assert!(!last_error().is_empty());

        // null name
        let mut handle: *mut VidtrModel = ptr::null_mut();
        let status = vidtr_model_build_preset(ptr::null(), 0, &mut handle);
        assert_eq!(status, VidtrStatus::NullPointer);

        // unknown preset
        let bogus = CString::new("vidtr-xxl").unwrap();
        let status = vidtr_model_build_preset(bogus.as_ptr(), 0, &mut handle);
        assert_eq!(status, VidtrStatus::InvalidArgument);
        assert!(last_error().contains("vidtr-xxl"), "{}", last_error());

        // getters on null handles
        assert_eq!(vidtr_model_class_count(ptr::null()), 0);
        assert_eq!(vidtr_model_param_count(ptr::null()), 0);

        // free of null is a no-op
        vidtr_model_free(ptr::null_mut());
    }
}

#[test]
fn forward_rejects_wrong_buffer_sizes() {
    let handle = build_toy(1);
    let cfg = ModelConfig::preset("toy").unwrap();
    let clip_len: usize = cfg.geom().clip_shape().iter().product();
    let clip = sample_clip(clip_len, 2);
    let mut logits = vec![0.0f32; cfg.class_count];
    unsafe {
        let s = vidtr_model_forward(
            handle,
            clip.as_ptr(),
            clip.len() - 1,
            logits.as_mut_ptr(),
            logits.len(),
        );
        assert_eq!(s, VidtrStatus::InvalidArgument);
        assert!(last_error().contains("clip"), "{}", last_error());

        let s = vidtr_model_forward(
            handle,
            clip.as_ptr(),
            clip.len(),
            logits.as_mut_ptr(),
            logits.len() + 3,
        );
        assert_eq!(s, VidtrStatus::InvalidArgument);
        assert!(last_error().contains("logits"), "{}", last_error());

        let s = vidtr_model_forward(
            handle,
            ptr::null(),
            clip.len(),
            logits.as_mut_ptr(),
            logits.len(),
        );
        assert_eq!(s, VidtrStatus::NullPointer);
        vidtr_model_free(handle);
    }
}

#[test]
fn load_failures_map_to_distinct_statuses() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut handle: *mut VidtrModel = ptr::null_mut();

        let missing = CString::new(dir.path().join("absent.ckpt").to_str().unwrap().to_string())
            .unwrap();
        let status = vidtr_model_load(missing.as_ptr(), &mut handle);
        assert_eq!(status, VidtrStatus::Io);
        assert!(handle.is_null());

        let garbage = dir.path().join("garbage.ckpt");
        std::fs::write(&garbage, b"not a checkpoint at all").unwrap();
        let cpath = CString::new(garbage.to_str().unwrap()).unwrap();
        let status = vidtr_model_load(cpath.as_ptr(), &mut handle);
        assert_eq!(status, VidtrStatus::Corrupt);
        assert!(!last_error().is_empty());
    }
}
