use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use gpcorr::correction::{correct, CorrectionOptions, Order, PerturbationSet};
use gpcorr::derivatives::{precompute, StoragePolicy};
use gpcorr::gp::{train, TestGrid, TrainingSet};
use gpcorr::kernel::Hyperparams;
use gpcorr_ffi::*;
use nalgebra::{DMatrix, DVector};

const X: [f64; 8] = [0.0, 0.1, 0.3, 0.2, 0.6, 0.9, 0.8, 0.4];
const Y: [f64; 4] = [0.5, -0.2, 1.1, 0.3];
const XE: [f64; 6] = [0.1, 0.1, 0.5, 0.5, 0.9, 0.2];

struct Model(*mut GpcModel);

impl Drop for Model {
    fn drop(&mut self) {
        unsafe { gpc_model_free(self.0) }
    }
}

fn model() -> Model {
    let mut out = ptr::null_mut();
    let st = unsafe { gpc_model_train(X.as_ptr(), Y.as_ptr(), 4, XE.as_ptr(), 3, 2, 1.0, 0.4, 0.1, &mut out) };
    assert_eq!(st, GpcStatus::Ok);
    Model(out)
}

fn last_error() -> String {
    let p = gpc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn correction_matches_the_library() {
    let m = model();
    let mut ops = ptr::null_mut();
    assert_eq!(
        unsafe { gpc_operators_build(m.0, GpcStorage::Lazy, &mut ops) },
        GpcStatus::Ok
    );

    let idx = [1usize, 3];
    let deltas = [0.01, -0.02, 0.0, 0.015];
    let (mut mean, mut cov) = ([0.0; 3], [0.0; 9]);
    let st = unsafe {
        gpc_correct(
            ops,
            m.0,
            idx.as_ptr(),
            deltas.as_ptr(),
            2,
            2,
            mean.as_mut_ptr(),
            cov.as_mut_ptr(),
        )
    };
    assert_eq!(st, GpcStatus::Ok);
    assert!(gpc_last_error().is_null());

    let lib = train(
        TrainingSet::new(DMatrix::from_row_slice(4, 2, &X), DVector::from_column_slice(&Y)).unwrap(),
        TestGrid::new(DMatrix::from_row_slice(3, 2, &XE)).unwrap(),
        Hyperparams::new(1.0, 0.4, 0.1).unwrap(),
    )
    .unwrap();
    let mut pert = PerturbationSet::new(2, 0.05).unwrap();
    pert.insert(1, &deltas[..2]).unwrap();
    pert.insert(3, &deltas[2..]).unwrap();
    let lib_ops = precompute(&lib, StoragePolicy::Lazy).unwrap();
    let want = correct(&lib_ops, &lib, &pert, Order::Second, &CorrectionOptions::default()).unwrap();
    assert_eq!(mean.as_slice(), want.mean.as_slice());
    assert_eq!(cov.as_slice(), want.cov.transpose().as_slice());

    let mut base = [0.0; 3];
    assert_eq!(
        unsafe { gpc_model_posterior(m.0, base.as_mut_ptr(), ptr::null_mut()) },
        GpcStatus::Ok
    );
    assert_eq!(base.as_slice(), lib.mean_hat().as_slice());
    unsafe { gpc_operators_free(ops) };
}

#[test]
fn dims_and_cache_round_trip() {
    let m = model();
    let (mut t, mut mm, mut n) = (0, 0, 0);
    assert_eq!(unsafe { gpc_model_dims(m.0, &mut t, &mut mm, &mut n) }, GpcStatus::Ok);
    assert_eq!((t, mm, n), (4, 3, 2));

    let dir = tempfile::tempdir().unwrap();
    let file = CString::new(dir.path().join("ops.gprc").to_str().unwrap()).unwrap();
    let mut ops = ptr::null_mut();
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(gpc_operators_build(m.0, GpcStorage::Dense, &mut ops), GpcStatus::Ok);
        assert_eq!(gpc_operators_save(ops, m.0, file.as_ptr()), GpcStatus::Ok);
        assert_eq!(gpc_operators_load(file.as_ptr(), m.0, &mut back), GpcStatus::Ok);
    }
    let idx = [0usize];
    let d = [0.02, 0.01];
    let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
    unsafe {
        gpc_correct(
            ops,
            m.0,
            idx.as_ptr(),
            d.as_ptr(),
            1,
            1,
            a.as_mut_ptr(),
            ptr::null_mut(),
        );
        gpc_correct(
            back,
            m.0,
            idx.as_ptr(),
            d.as_ptr(),
            1,
            1,
            b.as_mut_ptr(),
            ptr::null_mut(),
        );
        gpc_operators_free(ops);
        gpc_operators_free(back);
    }
    assert_eq!(a, b);

    let missing = CString::new(dir.path().join("none.gprc").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(
        unsafe { gpc_operators_load(missing.as_ptr(), m.0, &mut none) },
        GpcStatus::Io
    );
    assert!(none.is_null());
}

#[test]
fn failures_set_status_and_message() {
    let m = model();
    let mut ops = ptr::null_mut();
    assert_eq!(
        unsafe { gpc_operators_build(m.0, GpcStorage::Auto, &mut ops) },
        GpcStatus::Ok
    );
    let d = [0.01, 0.01];
    let mut mean = [0.0; 3];
    unsafe {
        let st = gpc_correct(
            ops,
            m.0,
            [9usize].as_ptr(),
            d.as_ptr(),
            1,
            2,
            mean.as_mut_ptr(),
            ptr::null_mut(),
        );
        assert_eq!(st, GpcStatus::IndexOutOfRange);
        assert!(last_error().contains('9'));

        let st = gpc_correct(
            ops,
            m.0,
            [0usize].as_ptr(),
            d.as_ptr(),
            1,
            3,
            mean.as_mut_ptr(),
            ptr::null_mut(),
        );
        assert_eq!(st, GpcStatus::InvalidInput);
        assert!(last_error().contains("order"));

        let st = gpc_correct(
            ops,
            m.0,
            [0usize, 0].as_ptr(),
            [0.0; 4].as_ptr(),
            2,
            2,
            ptr::null_mut(),
            ptr::null_mut(),
        );
        assert_eq!(st, GpcStatus::InvalidInput);

        let st = gpc_correct(
            ptr::null(),
            m.0,
            ptr::null(),
            ptr::null(),
            0,
            2,
            ptr::null_mut(),
            ptr::null_mut(),
        );
        assert_eq!(st, GpcStatus::NullPointer);

        let mut bad = ptr::null_mut();
        let st = gpc_model_train(X.as_ptr(), Y.as_ptr(), 4, XE.as_ptr(), 3, 2, 1.0, -0.4, 0.1, &mut bad);
        assert_eq!(st, GpcStatus::InvalidInput);
        assert!(bad.is_null());

        gpc_operators_free(ops);
        gpc_model_free(ptr::null_mut());
    }
}

/// The generated header compiles as C and links against the static library.
#[test]
fn header_compiles_and_links() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = root.join("include/gpcorr.h");
    assert!(header.exists());
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include "gpcorr.h"
int main(void) {
    double x[2] = {0.0, 1.0}, y[2] = {1.0, 2.0}, xe[1] = {0.5}, mean[1];
    size_t idx[1] = {1};
    double d[1] = {0.01};
    GpcModel *m = NULL;
    GpcOperators *ops = NULL;
    if (gpc_model_train(x, y, 2, xe, 1, 1, 1.0, 0.5, 0.1, &m) != GPC_STATUS_OK) return 1;
    if (gpc_operators_build(m, GPC_STORAGE_AUTO, &ops) != GPC_STATUS_OK) return 2;
    if (gpc_correct(ops, m, idx, d, 1, 2, mean, NULL) != GPC_STATUS_OK) return 3;
    gpc_operators_free(ops);
    gpc_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(root.join("include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success(), "header does not compile");

    // the static library sits next to this test binary's deps directory
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().unwrap().parent().unwrap().join("libgpcorr_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping link step", lib.display());
        return;
    }
    let bin = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg("-I")
        .arg(root.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "link failed");
    assert!(Command::new(&bin).status().unwrap().success(), "C smoke program failed");
}

fn which_cc() -> Result<String, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
        .map(String::from)
        .ok_or(())
}
