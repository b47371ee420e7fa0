use std::ffi::{c_char, CStr, CString};
use std::ptr;

use srrag_ffi::*;

fn cstrs(items: &[&str]) -> (Vec<CString>, Vec<*const c_char>) {
    let owned: Vec<CString> = items.iter().map(|s| CString::new(*s).unwrap()).collect();
    let ptrs = owned.iter().map(|c| c.as_ptr()).collect();
    (owned, ptrs)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(srrag_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

unsafe fn new_store(dim: u32) -> *mut SrragDatastore {
    let (_owned, tokens) = cstrs(&["<Self>", "<Wiki>"]);
    let mut ds = ptr::null_mut();
    assert_eq!(srrag_datastore_new(dim, tokens.as_ptr(), 2, &mut ds), SrragStatus::Ok);
    ds
}

unsafe fn insert(ds: *mut SrragDatastore, key: &[f32], label: &str) -> (SrragStatus, u64) {
    let label = CString::new(label).unwrap();
    let mut id = u64::MAX;
    let st = srrag_datastore_insert(ds, key.as_ptr(), key.len(), label.as_ptr(), ptr::null(), &mut id);
    (st, id)
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(srrag_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn datastore_lifecycle() {
    unsafe {
        let ds = new_store(2);
        assert_eq!(srrag_datastore_dim(ds), 2);
        assert_eq!(srrag_datastore_token_count(ds), 2);
        assert_eq!(CStr::from_ptr(srrag_datastore_token(ds, 1)).to_str().unwrap(), "<Wiki>");
        assert!(srrag_datastore_token(ds, 2).is_null());

        for i in 0..30 {
            let label = if i < 9 { "<Wiki>" } else { "<Self>" };
            let (st, id) = insert(ds, &[1.0, i as f32 * 1e-3], label);
            assert_eq!(st, SrragStatus::Ok);
            assert_eq!(id, i);
        }
        assert_eq!(srrag_datastore_len(ds), 30);
        assert_eq!(insert(ds, &[1.0], "<Self>").0, SrragStatus::DimensionMismatch);
        assert_eq!(insert(ds, &[1.0, 0.0], "<Foo>").0, SrragStatus::UnknownLabel);
        assert!(last_error().contains("<Foo>"));
        assert_eq!(insert(ds, &[0.0, 0.0], "<Self>").0, SrragStatus::ZeroVector);

        let q = [1.0f32, 0.0];
        let mut probs = [0.0f64; 2];
        assert_eq!(
            srrag_datastore_distribution(ds, q.as_ptr(), 2, 30, probs.as_mut_ptr(), 2),
            SrragStatus::Ok
        );
        assert_eq!(probs, [0.7, 0.3]);
        assert_eq!(
            srrag_datastore_distribution(ds, q.as_ptr(), 2, 30, probs.as_mut_ptr(), 1),
            SrragStatus::BufferTooSmall
        );

        let mut ids = [0u64; 5];
        let mut sims = [0.0f64; 5];
        let mut labels = [9u16; 5];
        let mut count = 0usize;
        let st = srrag_datastore_knn(
            ds,
            q.as_ptr(),
            2,
            5,
            ids.as_mut_ptr(),
            sims.as_mut_ptr(),
            labels.as_mut_ptr(),
            5,
            &mut count,
        );
        assert_eq!(st, SrragStatus::Ok);
        assert_eq!(count, 5);
        assert_eq!(ids, [0, 1, 2, 3, 4]);
        assert!(sims.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(labels, [1; 5]);
        let st = srrag_datastore_knn(
            ds,
            q.as_ptr(),
            2,
            5,
            ids.as_mut_ptr(),
            ptr::null_mut(),
            ptr::null_mut(),
            3,
            &mut count,
        );
        assert_eq!((st, count), (SrragStatus::BufferTooSmall, 5));

        assert_eq!(srrag_datastore_remove(ds, 3), SrragStatus::Ok);
        assert_eq!(srrag_datastore_remove(ds, 3), SrragStatus::UnknownId);
        assert_eq!(srrag_datastore_len(ds), 29);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("s.srpd").to_str().unwrap()).unwrap();
        assert_eq!(srrag_datastore_save(ds, path.as_ptr()), SrragStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(srrag_datastore_open(path.as_ptr(), &mut back), SrragStatus::Ok);
        assert_eq!(srrag_datastore_len(back), 29);
        srrag_datastore_free(back);

        std::fs::write(dir.path().join("bad.srpd"), b"NOPE0000").unwrap();
        let bad = CString::new(dir.path().join("bad.srpd").to_str().unwrap()).unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(srrag_datastore_open(bad.as_ptr(), &mut h), SrragStatus::CorruptFile);
        assert!(h.is_null());
        let missing = CString::new(dir.path().join("missing").to_str().unwrap()).unwrap();
        assert_eq!(srrag_datastore_open(missing.as_ptr(), &mut h), SrragStatus::Io);

        srrag_datastore_free(ds);
        srrag_datastore_free(ptr::null_mut());
    }
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        assert_eq!(srrag_datastore_len(ptr::null()), 0);
        assert_eq!(srrag_datastore_remove(ptr::null_mut(), 0), SrragStatus::NullPointer);
        assert_eq!(
            srrag_datastore_open(ptr::null(), ptr::null_mut()),
            SrragStatus::NullPointer
        );
        let mut out = ptr::null_mut();
        assert_eq!(
            srrag_datastore_new(0, ptr::null(), 0, &mut out),
            SrragStatus::InvalidArgument
        );
        let bad = [0xffu8, 0];
        let tokens = [bad.as_ptr().cast::<c_char>()];
        assert_eq!(
            srrag_datastore_new(2, tokens.as_ptr(), 1, &mut out),
            SrragStatus::InvalidUtf8
        );
    }
}

#[test]
fn routing_decisions() {
    unsafe {
        let p_m = [0.854, 0.146];
        let p_d = [0.7, 0.3];
        let mut selected = 9usize;
        let mut combined = [0.0f64; 2];
        assert_eq!(
            srrag_route_decide(
                p_m.as_ptr(),
                p_d.as_ptr(),
                2,
                0,
                0.1,
                &mut selected,
                combined.as_mut_ptr()
            ),
            SrragStatus::Ok
        );
        assert_eq!(selected, 0);
        assert!((combined[1] - 0.0438).abs() < 1e-9);
        assert_eq!(
            srrag_route_decide(p_m.as_ptr(), p_d.as_ptr(), 2, 0, 0.0, &mut selected, ptr::null_mut()),
            SrragStatus::Ok
        );
        assert_eq!(selected, 1);

        let p_m3 = [0.2, 0.5, 0.3];
        let p_d3 = [0.2, 0.4, 0.4];
        assert_eq!(
            srrag_route_decide(p_m3.as_ptr(), p_d3.as_ptr(), 3, 2, 0.1, &mut selected, ptr::null_mut()),
            SrragStatus::Ok
        );
        assert_eq!(selected, 1);
        assert_eq!(
            srrag_route_decide(p_m3.as_ptr(), p_d3.as_ptr(), 3, 3, 0.1, &mut selected, ptr::null_mut()),
            SrragStatus::InvalidArgument
        );
        let bad = [1.5, 0.1];
        assert_eq!(
            srrag_route_decide(bad.as_ptr(), p_d.as_ptr(), 2, 0, 0.1, &mut selected, ptr::null_mut()),
            SrragStatus::InvalidArgument
        );
    }
}

#[test]
fn lexical_matching() {
    unsafe {
        let pred = CString::new("haiti (saint-domingue).").unwrap();
        let (_g, golds) = cstrs(&["Haiti"]);
        let mut m = false;
        assert_eq!(
            srrag_lexical_match(pred.as_ptr(), golds.as_ptr(), 1, SrragMatchMode::Substring, &mut m),
            SrragStatus::Ok
        );
        assert!(m);
        let b = CString::new("B").unwrap();
        let (_a, a) = cstrs(&["A"]);
        assert_eq!(
            srrag_lexical_match(b.as_ptr(), a.as_ptr(), 1, SrragMatchMode::ExactChoice, &mut m),
            SrragStatus::Ok
        );
        assert!(!m);
        assert_eq!(
            srrag_lexical_match(b.as_ptr(), a.as_ptr(), 0, SrragMatchMode::ExactChoice, &mut m),
            SrragStatus::InvalidArgument
        );
    }
}

/// Compiles and runs a C program against the generated header and the
/// static library.
#[test]
fn header_compiles_and_links() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if std::process::Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler, skipping");
        return;
    }
    let manifest = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    if !lib_dir.join("libsrrag_ffi.a").exists() {
        eprintln!("static library not built, skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "srrag.h"
int main(void) {
    const char *tokens[] = {"<Self>", "<Wiki>"};
    SrragDatastore *ds = NULL;
    if (srrag_datastore_new(2, tokens, 2, &ds) != SRRAG_STATUS_OK) return 1;
    float key[2] = {1.0f, 0.0f};
    uint64_t id = 0;
    if (srrag_datastore_insert(ds, key, 2, "<Wiki>", NULL, &id) != SRRAG_STATUS_OK) return 2;
    if (srrag_datastore_insert(ds, key, 2, "<Foo>", NULL, &id) != SRRAG_STATUS_UNKNOWN_LABEL) return 3;
    double probs[2];
    if (srrag_datastore_distribution(ds, key, 2, 30, probs, 2) != SRRAG_STATUS_OK) return 4;
    printf("%s %.1f %.1f\n", srrag_version(), probs[0], probs[1]);
    srrag_datastore_free(ds);
    return 0;
}
"#,
    )
    .unwrap();
    let out = dir.path().join("main");
    let status = std::process::Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(lib_dir.join("libsrrag_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let run = std::process::Command::new(&out).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status);
    assert_eq!(
        String::from_utf8_lossy(&run.stdout).trim(),
        format!("{} 0.0 1.0", env!("CARGO_PKG_VERSION"))
    );
}
