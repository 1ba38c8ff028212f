use std::ffi::{CStr, CString};
use std::ptr;

use selfctl::diffhead::DiffusionConfig;
use selfctl::model::{ImageSpec, Model, ModelConfig, NetworkShape};
use selfctl::synthdata;
use selfctl_ffi::*;

fn last_error() -> String {
    let p = selfctl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let shape = NetworkShape {
        width: 16,
        depth_enc: 1,
        depth_dec: 1,
        heads: 2,
        mlp_ratio: 2,
        head_hidden: 16,
        head_blocks: 1,
        time_dim: 8,
    };
    let diffusion = DiffusionConfig {
        sample_steps: 5,
        ..DiffusionConfig::default()
    };
    let cfg = ModelConfig::new(
        ImageSpec::default(),
        &synthdata::vocab(),
        selfctl::AttentionPolicy::PAPER_DEFAULT,
        shape,
        diffusion,
    )
    .unwrap();
    let model = Model::new(cfg, selfctl::DType::F32, 3).unwrap();
    let path = dir.join("tiny.ckpt");
    selfctl::checkpoint::save(&model, 0, &path).unwrap();
    path
}

#[test]
fn policy_table_round_trip() {
    let mut p = SelfctlPolicy {
        text: SelfctlMode::Causal,
        imgcond: SelfctlMode::Causal,
        gen: SelfctlMode::Causal,
        cross: SelfctlMode::Causal,
    };
    assert_eq!(unsafe { selfctl_policy_for_option(3, &mut p) }, SelfctlStatus::Ok);
    assert_eq!(p.text, SelfctlMode::Causal);
    assert_eq!(p.imgcond, SelfctlMode::Bidirectional);
    assert_eq!(p.gen, SelfctlMode::Bidirectional);
    assert_eq!(p.cross, SelfctlMode::Causal);

    assert_eq!(unsafe { selfctl_policy_for_option(9, &mut p) }, SelfctlStatus::InvalidArgument);
    assert!(last_error().contains('9'));
    assert_eq!(unsafe { selfctl_policy_for_option(1, ptr::null_mut()) }, SelfctlStatus::NullPointer);
}

#[test]
fn mask_matches_library() {
    let mut policy = SelfctlPolicy {
        text: SelfctlMode::Causal,
        imgcond: SelfctlMode::Causal,
        gen: SelfctlMode::Causal,
        cross: SelfctlMode::Causal,
    };
    unsafe { selfctl_policy_for_option(3, &mut policy) };
    let mut mask: *mut SelfctlMask = ptr::null_mut();
    assert_eq!(unsafe { selfctl_mask_new(2, 1, 2, &policy, &mut mask) }, SelfctlStatus::Ok);
    let n = unsafe { selfctl_mask_len(mask) };
    assert_eq!(n, 5);
    let mut buf = vec![9u8; n * n];
    assert_eq!(unsafe { selfctl_mask_copy(mask, buf.as_mut_ptr(), buf.len()) }, SelfctlStatus::Ok);
    let expected = [
        1, 0, 0, 0, 0, //
        1, 1, 0, 0, 0, //
        1, 1, 1, 0, 0, //
        1, 1, 1, 1, 1, //
        1, 1, 1, 1, 1,
    ];
    assert_eq!(buf, expected);

    let mut small = vec![0u8; 3];
    assert_eq!(
        unsafe { selfctl_mask_copy(mask, small.as_mut_ptr(), small.len()) },
        SelfctlStatus::InvalidArgument
    );

    let mut reach: *mut SelfctlMask = ptr::null_mut();
    assert_eq!(unsafe { selfctl_mask_reachability(mask, 3, &mut reach) }, SelfctlStatus::Ok);
    let mut rbuf = vec![0u8; n * n];
    unsafe { selfctl_mask_copy(reach, rbuf.as_mut_ptr(), rbuf.len()) };
    // conditions never reach generated positions, however deep
    for q in 0..3 {
        assert_eq!(&rbuf[q * n + 3..q * n + 5], &[0, 0]);
    }
    assert_eq!(
        unsafe { selfctl_mask_reachability(mask, 0, &mut reach) },
        SelfctlStatus::InvalidArgument
    );
    unsafe {
        selfctl_mask_free(reach);
        selfctl_mask_free(mask);
        selfctl_mask_free(ptr::null_mut());
    }

    let mut bad: *mut SelfctlMask = ptr::null_mut();
    assert_eq!(unsafe { selfctl_mask_new(1, 1, 0, &policy, &mut bad) }, SelfctlStatus::InvalidArgument);
    assert!(bad.is_null());
    assert_eq!(unsafe { selfctl_mask_len(ptr::null()) }, 0);
}

#[test]
fn model_generates_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(tiny_checkpoint(dir.path()).to_str().unwrap()).unwrap();
    let mut model: *mut SelfctlModel = ptr::null_mut();
    assert_eq!(unsafe { selfctl_model_load(path.as_ptr(), &mut model) }, SelfctlStatus::Ok);

    let (mut h, mut w, mut c, mut cc) = (0usize, 0usize, 0usize, 0usize);
    assert_eq!(
        unsafe { selfctl_model_image_shape(model, &mut h, &mut w, &mut c, &mut cc) },
        SelfctlStatus::Ok
    );
    assert_eq!((h, w, c, cc), (16, 16, 3, 1));

    let text = CString::new("red square").unwrap();
    let cond = vec![0.0f32; h * w * cc];
    let run = |seed: u64, text: *const std::ffi::c_char, cond: *const f32| {
        let mut out = vec![-1.0f32; h * w * c];
        let status = unsafe { selfctl_model_generate(model, text, cond, 4, 1.0, 1.0, seed, out.as_mut_ptr(), out.len()) };
        (status, out)
    };
    let (s1, a) = run(7, text.as_ptr(), cond.as_ptr());
    let (s2, b) = run(7, text.as_ptr(), cond.as_ptr());
    assert_eq!((s1, s2), (SelfctlStatus::Ok, SelfctlStatus::Ok));
    assert_eq!(a, b);
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    let (s3, _) = run(7, ptr::null(), ptr::null());
    assert_eq!(s3, SelfctlStatus::Ok);

    let mut tiny_out = vec![0.0f32; 4];
    let status = unsafe {
        selfctl_model_generate(model, ptr::null(), ptr::null(), 4, 1.0, 1.0, 0, tiny_out.as_mut_ptr(), tiny_out.len())
    };
    assert_eq!(status, SelfctlStatus::InvalidArgument);
    let mut out = vec![0.0f32; h * w * c];
    let status =
        unsafe { selfctl_model_generate(model, ptr::null(), ptr::null(), 0, 1.0, 1.0, 0, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, SelfctlStatus::InvalidArgument);
    unsafe { selfctl_model_free(model) };
}

#[test]
fn load_failures_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let mut model: *mut SelfctlModel = ptr::null_mut();
    assert_eq!(unsafe { selfctl_model_load(missing.as_ptr(), &mut model) }, SelfctlStatus::Io);
    assert!(last_error().contains("none.ckpt"));

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let garbage = CString::new(garbage.to_str().unwrap()).unwrap();
    assert_ne!(unsafe { selfctl_model_load(garbage.as_ptr(), &mut model) }, SelfctlStatus::Ok);
    assert!(model.is_null());
    assert_eq!(unsafe { selfctl_model_load(ptr::null(), &mut model) }, SelfctlStatus::NullPointer);
}

#[test]
fn header_is_generated() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/selfctl.h")).unwrap();
    for symbol in [
        "selfctl_last_error",
        "selfctl_policy_for_option",
        "selfctl_mask_new",
        "selfctl_mask_copy",
        "selfctl_mask_reachability",
        "selfctl_mask_free",
        "selfctl_model_load",
        "selfctl_model_generate",
        "selfctl_model_free",
        "SELFCTL_STATUS_OK",
        "typedef struct SelfctlModel SelfctlModel",
    ] {
        assert!(header.contains(symbol), "header lacks {symbol}");
    }
}
