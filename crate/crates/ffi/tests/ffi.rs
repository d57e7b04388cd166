use std::ffi::{c_char, CString};
use std::ptr;

use sensemask_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { sm_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(511)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn config(text: &str) -> *mut SmConfig {
    let text = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { sm_config_parse(text.as_ptr(), &mut cfg) }, SmStatus::SmOk, "{}", last_error());
    cfg
}

const TINY: &str = "experiment = expander\nm = 8\nn = 16\nd = 2\ns = 2\niterations = 3\nepochs = 1\n\
                    samples_per_epoch = 40\ntest_samples = 20\nbatch_size = 10\nscale = 0.3\n";

#[test]
fn config_errors_surface_as_status_and_message() {
    let text = CString::new("experiment = expander\nbogus = 1").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { sm_config_parse(text.as_ptr(), &mut cfg) }, SmStatus::SmConfig);
    assert!(cfg.is_null());
    assert!(last_error().contains("bogus"));

    let cfg = config(TINY);
    let (k, v) = (CString::new("d").unwrap(), CString::new("0").unwrap());
    assert_eq!(unsafe { sm_config_set(cfg, k.as_ptr(), v.as_ptr()) }, SmStatus::SmConfig);
    let v = CString::new("3").unwrap();
    assert_eq!(unsafe { sm_config_set(cfg, k.as_ptr(), v.as_ptr()) }, SmStatus::SmOk);
    assert_eq!(last_error(), "");
    unsafe { sm_config_free(cfg) };
}

#[test]
fn null_pointers_are_rejected() {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { sm_config_parse(ptr::null(), &mut cfg) }, SmStatus::SmNullPointer);
    let mut rows = 0;
    assert_eq!(unsafe { sm_mask_shape(ptr::null(), &mut rows, &mut rows) }, SmStatus::SmNullPointer);
    unsafe {
        sm_mask_free(ptr::null_mut());
        sm_config_free(ptr::null_mut());
        sm_operator_free(ptr::null_mut());
    }
}

#[test]
fn mask_round_trip_and_operator() {
    let dir = tempfile::tempdir().unwrap();
    let bits = [1u8, 0, 0, 0, 1, 0];
    let mut mask = ptr::null_mut();
    assert_eq!(unsafe { sm_mask_new(2, 3, bits.as_ptr(), &mut mask) }, SmStatus::SmOk);
    let bad = [2u8, 0, 0, 0, 0, 0];
    let mut other = ptr::null_mut();
    assert_eq!(unsafe { sm_mask_new(2, 3, bad.as_ptr(), &mut other) }, SmStatus::SmStructure);

    let path = CString::new(dir.path().join("m.gldm").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sm_mask_write(mask, path.as_ptr()) }, SmStatus::SmOk);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { sm_mask_read(path.as_ptr(), &mut back) }, SmStatus::SmOk);
    let (mut r, mut c) = (0, 0);
    assert_eq!(unsafe { sm_mask_shape(back, &mut r, &mut c) }, SmStatus::SmOk);
    assert_eq!((r, c), (2, 3));
    let mut small = [0u8; 4];
    assert_eq!(unsafe { sm_mask_bits(back, small.as_mut_ptr(), small.len()) }, SmStatus::SmBufferTooSmall);
    let mut out = [9u8; 6];
    assert_eq!(unsafe { sm_mask_bits(back, out.as_mut_ptr(), out.len()) }, SmStatus::SmOk);
    assert_eq!(out, bits);

    let cfg = config("experiment = group_testing\nm = 2\nn = 3\nd = 1\ns = 1\nscale = 0.5\n");
    let mut op = ptr::null_mut();
    assert_eq!(unsafe { sm_operator_new(cfg, mask, 0.5, &mut op) }, SmStatus::SmOk, "{}", last_error());
    let (mut n, mut m) = (0, 0);
    assert_eq!(unsafe { sm_operator_shape(op, &mut n, &mut m) }, SmStatus::SmOk);
    assert_eq!((n, m), (3, 2));
    let x = [1.0, 2.0, 4.0];
    let mut y = [0.0; 2];
    assert_eq!(unsafe { sm_operator_apply(op, x.as_ptr(), 3, y.as_mut_ptr(), 2) }, SmStatus::SmOk);
    assert_eq!(y, [0.5, 1.0]);
    let mut xt = [0.0; 3];
    assert_eq!(unsafe { sm_operator_adjoint(op, y.as_ptr(), 2, xt.as_mut_ptr(), 3) }, SmStatus::SmOk);
    assert_eq!(xt, [0.25, 0.5, 0.0]);
    assert_eq!(unsafe { sm_operator_apply(op, x.as_ptr(), 2, y.as_mut_ptr(), 2) }, SmStatus::SmDimension);
    unsafe {
        sm_operator_free(op);
        sm_config_free(cfg);
        sm_mask_free(mask);
        sm_mask_free(back);
    }
}

#[test]
fn train_then_evaluate_the_learned_mask() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TINY);
    let out = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
    let mut mask = ptr::null_mut();
    assert_eq!(unsafe { sm_train(cfg, out.as_ptr(), &mut mask) }, SmStatus::SmOk, "{}", last_error());
    assert!(dir.path().join("run/manifest.txt").exists());
    let (mut r, mut c) = (0, 0);
    unsafe { sm_mask_shape(mask, &mut r, &mut c) };
    assert_eq!((r, c), (8, 16));

    let eval_dir = CString::new(dir.path().join("eval").to_str().unwrap()).unwrap();
    let mut a = SmMetrics::default();
    let mut b = SmMetrics::default();
    assert_eq!(unsafe { sm_evaluate(cfg, mask, eval_dir.as_ptr(), &mut a) }, SmStatus::SmOk, "{}", last_error());
    assert_eq!(unsafe { sm_evaluate(cfg, mask, eval_dir.as_ptr(), &mut b) }, SmStatus::SmOk);
    assert!(a.nmae_db.is_finite());
    assert_eq!(a, b);
    unsafe {
        sm_mask_free(mask);
        sm_config_free(cfg);
    }
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sensemask.h")).unwrap();
    for f in [
        "sm_last_error",
        "sm_config_parse",
        "sm_config_set",
        "sm_config_free",
        "sm_train",
        "sm_baseline",
        "sm_evaluate",
        "sm_mask_read",
        "sm_mask_new",
        "sm_mask_write",
        "sm_mask_shape",
        "sm_mask_bits",
        "sm_mask_free",
        "sm_operator_new",
        "sm_operator_shape",
        "sm_operator_apply",
        "sm_operator_adjoint",
        "sm_operator_free",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from the header");
    }
    assert!(header.contains("typedef struct SmMask SmMask;"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"sensemask.h\"\n\
         int main(void) {\n\
           SmConfig *cfg = NULL;\n\
           SmStatus st = sm_config_parse(\"experiment = expander\", &cfg);\n\
           sm_config_free(cfg);\n\
           return st == SM_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
