use std::ffi::CStr;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use rotconv_ffi::*;

fn tensor(c: usize, h: usize, w: usize, data: &[f64]) -> *mut RcTensor {
    let mut t = ptr::null_mut();
    assert_eq!(
        unsafe { rc_tensor_new(c, h, w, data.as_ptr(), &mut t) },
        RcStatus::Ok
    );
    t
}

fn filter(co: usize, ci: usize, k: usize, data: &[f64]) -> *mut RcFilterBank {
    let mut f = ptr::null_mut();
    assert_eq!(
        unsafe { rc_filter_new(co, ci, k, k, data.as_ptr(), &mut f) },
        RcStatus::Ok
    );
    f
}

fn tensor_data(t: *const RcTensor) -> Vec<f64> {
    let (mut c, mut h, mut w) = (0, 0, 0);
    unsafe {
        assert_eq!(rc_tensor_shape(t, &mut c, &mut h, &mut w), RcStatus::Ok);
        let mut buf = vec![0.0; c * h * w];
        assert_eq!(
            rc_tensor_copy_data(t, buf.as_mut_ptr(), buf.len()),
            RcStatus::Ok
        );
        buf
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(rc_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn ramp(n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|i| ((i * 37 % 23) as f64 - 11.0) * scale)
        .collect()
}

#[test]
fn scatter_matches_gather_through_handles() {
    let x = tensor(2, 6, 5, &ramp(60, 0.1));
    let w = filter(3, 2, 3, &ramp(54, 0.05));
    let (mut g, mut s, mut t) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    let mut mults = 0;
    unsafe {
        assert_eq!(rc_conv_gather_same(x, w, &mut g), RcStatus::Ok);
        assert_eq!(rc_scatter_conv(x, w, &mut s, &mut mults), RcStatus::Ok);
        assert_eq!(rc_tiled_scatter_conv(x, w, 2, 2, 3, &mut t), RcStatus::Ok);
    }
    assert_eq!(mults, 6 * 5 * 9 * 2 * 3);
    let (gd, sd, td) = (tensor_data(g), tensor_data(s), tensor_data(t));
    for (a, b) in gd.iter().zip(&sd) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    assert_eq!(sd, td);
    unsafe {
        for h in [x, g, s, t] {
            rc_tensor_free(h);
        }
        rc_filter_free(w);
    }
}

#[test]
fn group_reuse_and_pooling() {
    let x = tensor(1, 5, 5, &ramp(25, 0.2));
    let w = filter(2, 1, 3, &ramp(18, 0.3));
    let (mut reuse, mut gather) = (ptr::null_mut(), ptr::null_mut());
    let mut mults = 0;
    unsafe {
        assert_eq!(
            rc_group_conv_scatter_reuse(x, w, RcGroup::P4m, &mut reuse, &mut mults),
            RcStatus::Ok
        );
        assert_eq!(
            rc_group_conv_gather(x, w, RcGroup::P4m, &mut gather),
            RcStatus::Ok
        );
    }
    assert_eq!(mults, 25 * 9 * 2);
    let mut shape = [0usize; 4];
    unsafe { assert_eq!(rc_oriented_shape(reuse, shape.as_mut_ptr()), RcStatus::Ok) };
    assert_eq!(shape, [2, 8, 5, 5]);
    let mut a = vec![0.0; 400];
    let mut b = vec![0.0; 400];
    unsafe {
        assert_eq!(
            rc_oriented_copy_data(reuse, a.as_mut_ptr(), 400),
            RcStatus::Ok
        );
        assert_eq!(
            rc_oriented_copy_data(gather, b.as_mut_ptr(), 400),
            RcStatus::Ok
        );
    }
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0));
    }
    let (mut avg, mut max) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(rc_orientation_pool_avg(reuse, &mut avg), RcStatus::Ok);
        assert_eq!(rc_orientation_pool_max(reuse, &mut max), RcStatus::Ok);
    }
    let (avg_d, max_d) = (tensor_data(avg), tensor_data(max));
    assert_eq!(avg_d.len(), 50);
    assert!(avg_d.iter().zip(&max_d).all(|(a, m)| a <= m));
    unsafe {
        rc_oriented_free(reuse);
        rc_oriented_free(gather);
        rc_tensor_free(avg);
        rc_tensor_free(max);
        rc_tensor_free(x);
        rc_filter_free(w);
    }
}

#[test]
fn errors_become_status_codes() {
    let x = tensor(1, 4, 4, &[0.0; 16]);
    let w2 = filter(1, 2, 3, &[0.0; 18]);
    let even = {
        let mut f = ptr::null_mut();
        unsafe { assert_eq!(rc_filter_new(1, 1, 2, 2, ptr::null(), &mut f), RcStatus::Ok) };
        f
    };
    let mut out = ptr::null_mut();
    let mut oriented = ptr::null_mut();
    unsafe {
        assert_eq!(
            rc_conv_gather_same(x, w2, &mut out),
            RcStatus::ChannelMismatch
        );
        assert!(last_error().contains("channel"));
        assert!(out.is_null());
        assert_eq!(
            rc_group_conv_scatter_reuse(x, even, RcGroup::P4, &mut oriented, ptr::null_mut()),
            RcStatus::UnsupportedKernel
        );
        assert_eq!(
            rc_conv_gather_same(ptr::null(), w2, &mut out),
            RcStatus::NullPointer
        );
        assert_eq!(
            rc_tensor_new(1, 1, 1, ptr::null(), ptr::null_mut()),
            RcStatus::NullPointer
        );
        assert_eq!(
            rc_filter_new(1, 1, 0, 3, ptr::null(), &mut ptr::null_mut()),
            RcStatus::InvalidArgument
        );
        let mut small = [0.0; 3];
        assert_eq!(
            rc_tensor_copy_data(x, small.as_mut_ptr(), 3),
            RcStatus::BufferTooSmall
        );
        assert_eq!(
            rc_tensor_copy_data(x, ptr::null_mut(), 16),
            RcStatus::NullPointer
        );
        let mut shape = [0usize; 4];
        assert_eq!(rc_filter_shape(even, shape.as_mut_ptr()), RcStatus::Ok);
        assert_eq!(shape, [1, 1, 2, 2]);
        let mut c = 0;
        assert_eq!(
            rc_tensor_shape(x, &mut c, &mut c, ptr::null_mut()),
            RcStatus::NullPointer
        );
        let mut fd = [1.0; 4];
        assert_eq!(rc_filter_copy_data(even, fd.as_mut_ptr(), 4), RcStatus::Ok);
        assert_eq!(fd, [0.0; 4]);
        assert_eq!(
            rc_tensor_copy_data(x, [0.0; 16].as_mut_ptr(), 16),
            RcStatus::Ok
        );
        assert_eq!(last_error(), "");
        rc_tensor_free(ptr::null_mut());
        rc_tensor_free(x);
        rc_filter_free(w2);
        rc_filter_free(even);
    }
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("rotconv.h")
}

#[test]
fn header_declares_the_api() {
    let text = std::fs::read_to_string(header()).expect("generated header");
    for name in [
        "rc_last_error",
        "rc_tensor_new",
        "rc_tensor_free",
        "rc_filter_new",
        "rc_conv_gather_same",
        "rc_scatter_conv",
        "rc_tiled_scatter_conv",
        "rc_group_conv_gather",
        "rc_group_conv_scatter_reuse",
        "rc_orientation_pool_avg",
        "rc_orientation_pool_max",
        "RC_STATUS_OK",
        "typedef struct RcTensor RcTensor",
    ] {
        assert!(text.contains(name), "missing {name}");
    }
}

/// Compiles a small C program against the header and the static library.
/// Skipped when no C compiler is installed.
#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let deps = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib_dir = deps.parent().unwrap();
    let staticlib = lib_dir.join("librotconv_ffi.a");
    if !staticlib.exists() {
        eprintln!("{} not built; skipping", staticlib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "rotconv.h"
int main(void) {
    double x[9] = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    double w[9] = {1, 1, 1, 1, 1, 1, 1, 1, 1};
    RcTensor *t = NULL, *y = NULL;
    RcFilterBank *f = NULL;
    uint64_t mults = 0;
    if (rc_tensor_new(1, 3, 3, x, &t) != RC_STATUS_OK) return 1;
    if (rc_filter_new(1, 1, 3, 3, w, &f) != RC_STATUS_OK) return 2;
    if (rc_scatter_conv(t, f, &y, &mults) != RC_STATUS_OK) return 3;
    double out[9];
    if (rc_tensor_copy_data(y, out, 9) != RC_STATUS_OK) return 4;
    printf("%g %g %llu\n", out[0], out[4], (unsigned long long)mults);
    RcFilterBank *bad = NULL;
    if (rc_filter_new(1, 1, 0, 3, NULL, &bad) != RC_STATUS_INVALID_ARGUMENT) return 5;
    rc_tensor_free(t);
    rc_tensor_free(y);
    rc_filter_free(f);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{out:?}");
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "12 45 81");
}
