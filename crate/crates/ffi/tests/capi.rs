use std::ffi::{CStr, CString};
use std::ptr;

use densitypath_ffi::*;

fn last_error() -> String {
    let p = dp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn set(p: *mut DpProblem, kv: &str) {
    let s = CString::new(kv).unwrap();
    assert_eq!(unsafe { dp_problem_set(p, s.as_ptr()) }, DpStatus::Ok, "{kv}: {}", last_error());
}

#[test]
fn unknown_problem_is_a_config_error() {
    let name = CString::new("no-such-problem").unwrap();
    let mut p = ptr::null_mut();
    let st = unsafe { dp_problem_from_name(name.as_ptr(), &mut p) };
    assert_eq!(st, DpStatus::Config);
    assert!(p.is_null());
    assert!(last_error().contains("no-such-problem"));
}

#[test]
fn null_arguments_are_reported() {
    assert_eq!(unsafe { dp_problem_from_name(ptr::null(), ptr::null_mut()) }, DpStatus::NullPointer);
    let mut n = 0usize;
    assert_eq!(unsafe { dp_problem_dim(ptr::null(), &mut n) }, DpStatus::NullPointer);
    assert_eq!(unsafe { dp_run(ptr::null(), ptr::null_mut()) }, DpStatus::NullPointer);
    unsafe {
        dp_problem_free(ptr::null_mut());
        dp_run_free(ptr::null_mut());
    }
}

#[test]
fn bad_override_leaves_problem_intact() {
    let name = CString::new("scc").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { dp_problem_from_name(name.as_ptr(), &mut p) }, DpStatus::Ok);
    let bad = CString::new("quadrature.n=1").unwrap();
    assert_eq!(unsafe { dp_problem_set(p, bad.as_ptr()) }, DpStatus::Config);
    let mut d = 0usize;
    assert_eq!(unsafe { dp_problem_dim(p, &mut d) }, DpStatus::Ok);
    assert_eq!(d, 2);
    unsafe { dp_problem_free(p) };
}

#[test]
fn toml_parse_errors_are_config_errors() {
    let t = CString::new("seed = 1\n[problem]\nname = 3").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { dp_problem_from_toml(t.as_ptr(), &mut p) }, DpStatus::Config);
}

#[test]
fn w2_of_shifted_points() {
    let x = [0.0, 0.0, 1.0, 0.0];
    let y = [3.0, 4.0, 4.0, 4.0];
    let mut w = 0.0;
    assert_eq!(unsafe { dp_w2_empirical(x.as_ptr(), 2, y.as_ptr(), 2, 2, &mut w) }, DpStatus::Ok);
    assert!((w - 5.0).abs() < 1e-12);
    assert_eq!(unsafe { dp_w2_empirical(x.as_ptr(), 0, y.as_ptr(), 0, 2, &mut w) }, DpStatus::Numeric);
}

#[test]
fn tiny_run_through_handles() {
    let name = CString::new("gauss-pair").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { dp_problem_from_name(name.as_ptr(), &mut p) }, DpStatus::Ok);
    for kv in [
        "architecture.dims=[2, 8, 2]",
        "quadrature.n=4",
        "quadrature.m=32",
        "quadrature.k=1",
        "optim.epochs=1",
        "optim.path_steps=2",
        "optim.coupling_steps=2",
        "optim.warmup_steps=2",
        "optim.pretrain.steps=5",
    ] {
        set(p, kv);
    }
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { dp_run(p, &mut run) }, DpStatus::Ok, "{}", last_error());
    let mut n = 0usize;
    assert_eq!(unsafe { dp_run_len(run, &mut n) }, DpStatus::Ok);
    assert_eq!(n, 2);
    let mut m = DpMetrics::default();
    assert_eq!(unsafe { dp_run_metrics(run, 1, &mut m) }, DpStatus::Ok);
    assert_eq!(m.epoch, 1);
    assert!(m.action.is_finite());
    assert_eq!(unsafe { dp_run_metrics(run, 2, &mut m) }, DpStatus::InvalidArgument);

    let mut buf = vec![0.0; dp_export_rows() * 2];
    let mut rows = 0usize;
    let st = unsafe { dp_run_positions(run, 0.5, buf.as_mut_ptr(), buf.len(), &mut rows) };
    assert_eq!(st, DpStatus::Ok);
    assert_eq!(rows, dp_export_rows());
    assert!(buf.iter().all(|v| v.is_finite()));
    let st = unsafe { dp_run_positions(run, 0.5, buf.as_mut_ptr(), 3, &mut rows) };
    assert_eq!(st, DpStatus::InvalidArgument);
    let st = unsafe { dp_run_positions(run, 1.5, buf.as_mut_ptr(), buf.len(), &mut rows) };
    assert_eq!(st, DpStatus::InvalidArgument);
    unsafe {
        dp_run_free(run);
        dp_problem_free(p);
    }
}

#[test]
fn header_declares_the_interface_and_compiles() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/densitypath.h")).unwrap();
    for f in ["dp_problem_from_name", "dp_run_positions", "dp_last_error", "DP_STATUS_OK", "DpMetrics"] {
        assert!(header.contains(f), "{f} missing from header");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"densitypath.h\"\nint main(void) { DpProblem *p = 0; return dp_problem_from_name(\"scc\", &p) == DP_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .output()
        .expect("a C compiler is needed to check the header");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
