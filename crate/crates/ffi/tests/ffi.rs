use std::ffi::{CStr, CString};
use std::ptr;

use gconv::profile::{count_flops, count_params};
use gconv::{build_model, forward, ModelConfig};
use gconv_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gconv_last_error()) }.to_string_lossy().into_owned()
}

fn tiny(seed: u64) -> *mut GconvModel {
    let name = CString::new("tiny").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { gconv_model_from_preset(name.as_ptr(), seed, &mut m) }, GconvStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn forward_matches_the_library() {
    let m = tiny(7);
    let tokens = [1usize, 4, 2, 9];
    let mut logits = [0.0f64; 8];
    let mut len = 0usize;
    let st = unsafe {
        gconv_model_forward(
            m,
            tokens.as_ptr(),
            ptr::null(),
            ptr::null(),
            tokens.len(),
            logits.as_mut_ptr(),
            logits.len(),
            &mut len,
        )
    };
    assert_eq!(st, GconvStatus::Ok, "{}", last_error());
    let config = ModelConfig::preset("tiny").unwrap();
    let expected = forward(&build_model(&config, 7).unwrap(), &tokens, &[0; 4], None).unwrap();
    assert_eq!(len, expected.len());
    for (a, b) in logits[..len].iter().zip(expected.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let mut classes = 0;
    assert_eq!(unsafe { gconv_model_num_classes(m, &mut classes) }, GconvStatus::Ok);
    assert_eq!(classes, config.num_classes);
    unsafe { gconv_model_free(m) };
}

#[test]
fn small_buffer_reports_required_length() {
    let m = tiny(0);
    let tokens = [1usize, 2];
    let mut logits = [0.0f64; 1];
    let mut len = 0usize;
    let st = unsafe {
        gconv_model_forward(m, tokens.as_ptr(), ptr::null(), ptr::null(), 2, logits.as_mut_ptr(), 1, &mut len)
    };
    assert_eq!(st, GconvStatus::BufferTooSmall);
    assert_eq!(len, 2);
    assert!(last_error().contains("need 2"));
    unsafe { gconv_model_free(m) };
}

#[test]
fn out_of_range_token_is_an_index_error() {
    let m = tiny(0);
    let tokens = [usize::MAX];
    let mut logits = [0.0f64; 4];
    let mut len = 0usize;
    let st = unsafe {
        gconv_model_forward(m, tokens.as_ptr(), ptr::null(), ptr::null(), 1, logits.as_mut_ptr(), 4, &mut len)
    };
    assert_eq!(st, GconvStatus::Index);
    assert!(!last_error().is_empty());
    unsafe { gconv_model_free(m) };
}

#[test]
fn null_arguments_are_rejected() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { gconv_model_from_preset(ptr::null(), 0, &mut m) }, GconvStatus::NullPointer);
    assert!(m.is_null());
    let mut n = 0u64;
    assert_eq!(unsafe { gconv_model_count_params(ptr::null(), &mut n) }, GconvStatus::NullPointer);
    assert!(last_error().contains("model"));
    unsafe { gconv_model_free(ptr::null_mut()) };
}

#[test]
fn unknown_preset_is_a_config_error() {
    let name = CString::new("gpt-17").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { gconv_model_from_preset(name.as_ptr(), 0, &mut m) }, GconvStatus::Config);
    assert!(m.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn config_text_round_trips_through_the_handle() {
    let config = ModelConfig::preset("tiny").unwrap();
    let text = CString::new(config.to_text()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { gconv_model_from_config_text(text.as_ptr(), 3, &mut m) }, GconvStatus::Ok);
    let mut params = 0u64;
    let (mut macs, mut gflops) = (0u64, 0.0f64);
    unsafe {
        assert_eq!(gconv_model_count_params(m, &mut params), GconvStatus::Ok);
        assert_eq!(gconv_model_count_flops(m, 8, &mut macs, &mut gflops), GconvStatus::Ok);
        gconv_model_free(m);
    }
    let flops = count_flops(&config, 8).unwrap();
    assert_eq!(params, count_params(&config).unwrap().total);
    assert_eq!(macs, flops.total_macs);
    assert_eq!(gflops, flops.gflops);
    assert_eq!(last_error(), "");
}

#[test]
fn save_and_load_preserve_logits() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = tiny(11);
    let mut written = 0u64;
    assert_eq!(unsafe { gconv_model_save(m, path.as_ptr(), &mut written) }, GconvStatus::Ok);
    assert!(written > 0);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { gconv_model_load(path.as_ptr(), &mut back) }, GconvStatus::Ok);

    let tokens = [3usize, 1, 4];
    let segs = [0usize, 1, 1];
    let vis = [true, true, false];
    let run = |h: *mut GconvModel| {
        let mut out = [0.0f64; 4];
        let mut len = 0;
        let st = unsafe {
            gconv_model_forward(h, tokens.as_ptr(), segs.as_ptr(), vis.as_ptr(), 3, out.as_mut_ptr(), 4, &mut len)
        };
        assert_eq!(st, GconvStatus::Ok);
        out[..len].iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(m), run(back));
    unsafe {
        gconv_model_free(m);
        gconv_model_free(back);
    }
}

#[test]
fn truncated_checkpoint_is_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("m.ckpt");
    let path = CString::new(file.to_str().unwrap()).unwrap();
    let m = tiny(0);
    assert_eq!(unsafe { gconv_model_save(m, path.as_ptr(), ptr::null_mut()) }, GconvStatus::Ok);
    unsafe { gconv_model_free(m) };
    let bytes = std::fs::read(&file).unwrap();
    std::fs::write(&file, &bytes[..bytes.len() - 5]).unwrap();
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { gconv_model_load(path.as_ptr(), &mut back) }, GconvStatus::Corruption);
    assert!(back.is_null());

    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { gconv_model_load(missing.as_ptr(), &mut back) }, GconvStatus::Storage);
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/gconv.h");
    for sym in [
        "gconv_last_error",
        "gconv_model_from_preset",
        "gconv_model_from_config_text",
        "gconv_model_load",
        "gconv_model_save",
        "gconv_model_forward",
        "gconv_model_num_classes",
        "gconv_model_count_params",
        "gconv_model_count_flops",
        "gconv_model_free",
        "typedef struct GconvModel GconvModel",
        "GCONV_STATUS_BUFFER_TOO_SMALL = 12",
    ] {
        assert!(header.contains(sym), "{sym}");
    }
}
