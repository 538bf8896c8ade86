use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use fisher_probe::data::{load_embeddings, Example};
use fisher_probe::models::{save_checkpoint, ModelSpec};
use fisher_probe::{build_model, lambda_max, Classifier};
use fisher_probe_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> Option<String> {
    let p = fp_last_error_message();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

struct Fixture {
    _dir: tempfile::TempDir,
    point_ckpt: CString,
    text_ckpt: CString,
    embeddings: CString,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let point = dir.path().join("point.ckpt");
    save_checkpoint(&build_model(&ModelSpec::synthetic_mlp(), 3).unwrap(), &point).unwrap();
    let emb = dir.path().join("emb.txt");
    std::fs::write(
        &emb,
        "good 0.5 -0.1 0.3 0.2\nbad -0.4 0.2 -0.3 0.1\nmovie 0.1 0.1 -0.2 0.4\nthe 0.0 0.3 0.1 -0.1\n",
    )
    .unwrap();
    let text = dir.path().join("text.ckpt");
    save_checkpoint(&build_model(&ModelSpec::text_cnn(4, 2), 3).unwrap(), &text).unwrap();
    Fixture {
        point_ckpt: cstr(&point),
        text_ckpt: cstr(&text),
        embeddings: cstr(&emb),
        _dir: dir,
    }
}

unsafe fn load(ckpt: &CString, emb: Option<&CString>) -> (FpStatus, *mut FpModel) {
    let mut m = ptr::null_mut();
    let s = fp_model_load(ckpt.as_ptr(), emb.map_or(ptr::null(), |e| e.as_ptr()), &mut m);
    (s, m)
}

#[test]
fn point_scores_match_library() {
    let fx = fixture();
    unsafe {
        let (s, m) = load(&fx.point_ckpt, None);
        assert_eq!(s, FpStatus::Ok);
        assert!(last_error().is_none());
        let mut classes = 0;
        assert_eq!(fp_model_num_classes(m, &mut classes), FpStatus::Ok);
        assert_eq!(classes, 2);

        let x = [0.3, -1.2];
        let (mut lam, mut pred, mut probs) = (0.0, 9usize, [0.0; 2]);
        let s = fp_score_point(m, x.as_ptr(), 2, &mut lam, &mut pred, probs.as_mut_ptr(), 2);
        assert_eq!(s, FpStatus::Ok);

        let clf = Classifier::new(build_model(&ModelSpec::synthetic_mlp(), 3).unwrap(), None).unwrap();
        let r = lambda_max(&clf, &Example::point("x", x.to_vec(), 0)).unwrap();
        assert_eq!(lam.to_bits(), r.lambda_max.to_bits());
        assert_eq!(pred, r.prediction);
        assert_eq!(probs.to_vec(), r.probs);
        fp_model_free(m);
    }
}

#[test]
fn text_scores_match_library() {
    let fx = fixture();
    unsafe {
        let (s, m) = load(&fx.text_ckpt, Some(&fx.embeddings));
        assert_eq!(s, FpStatus::Ok, "{:?}", last_error());
        let text = CString::new("the good movie").unwrap();
        let mut lam = 0.0;
        let s = fp_score_text(m, text.as_ptr(), &mut lam, ptr::null_mut(), ptr::null_mut(), 0);
        assert_eq!(s, FpStatus::Ok);

        let table = load_embeddings(fx.embeddings.to_str().unwrap()).unwrap();
        let model = build_model(&ModelSpec::text_cnn(4, 2), 3).unwrap();
        let clf = Classifier::new(model, Some(table)).unwrap();
        let r = lambda_max(&clf, &Example::text("t", "the good movie", 0)).unwrap();
        assert_eq!(lam.to_bits(), r.lambda_max.to_bits());
        fp_model_free(m);
    }
}

#[test]
fn error_codes() {
    let fx = fixture();
    unsafe {
        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        let (s, m) = load(&missing, None);
        assert_eq!(s, FpStatus::Io);
        assert!(m.is_null());
        assert!(last_error().unwrap().contains("/nonexistent/model.ckpt"));

        // An embedding file is not a checkpoint.
        let (s, _) = load(&fx.embeddings, None);
        assert_eq!(s, FpStatus::Parse);

        let (s, _) = load(&fx.text_ckpt, None);
        assert_eq!(s, FpStatus::InvalidInput);

        assert_eq!(fp_model_load(ptr::null(), ptr::null(), ptr::null_mut()), FpStatus::NullArgument);

        let (_, m) = load(&fx.point_ckpt, None);
        let mut lam = 0.0;
        let x = [0.1, 0.2, 0.3];
        let s = fp_score_point(m, x.as_ptr(), 3, &mut lam, ptr::null_mut(), ptr::null_mut(), 0);
        assert_eq!(s, FpStatus::InvalidInput);
        let mut probs = [0.0; 1];
        let s = fp_score_point(m, x.as_ptr(), 2, &mut lam, ptr::null_mut(), probs.as_mut_ptr(), 1);
        assert_eq!(s, FpStatus::BufferTooSmall);
        let s = fp_score_point(m, x.as_ptr(), 2, ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), 0);
        assert_eq!(s, FpStatus::NullArgument);
        let bad = [0xffu8, 0];
        let s = fp_score_text(m, bad.as_ptr().cast(), &mut lam, ptr::null_mut(), ptr::null_mut(), 0);
        assert_eq!(s, FpStatus::InvalidUtf8);

        let s = fp_score_point(m, x.as_ptr(), 2, &mut lam, ptr::null_mut(), ptr::null_mut(), 0);
        assert_eq!(s, FpStatus::Ok);
        assert!(last_error().is_none());
        fp_model_free(m);
        fp_model_free(ptr::null_mut());
    }
}

#[test]
fn overlap_fixture() {
    let a = [0.0, 0.0, 1.0, 1.0];
    let b = [0.0, 1.0, 1.0, 1.0];
    let mut pct = 0.0;
    let s = unsafe { fp_histogram_overlap(a.as_ptr(), 4, b.as_ptr(), 4, 2, &mut pct) };
    assert_eq!(s, FpStatus::Ok);
    assert_eq!(pct, 75.0);
    let s = unsafe { fp_histogram_overlap(a.as_ptr(), 0, b.as_ptr(), 4, 2, &mut pct) };
    assert_eq!(s, FpStatus::InvalidInput);
}

#[test]
fn header_declares_api() {
    let header =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/fisher_probe.h"))
            .unwrap();
    for name in [
        "typedef struct FpModel FpModel",
        "FP_STATUS_BUFFER_TOO_SMALL",
        "fp_model_load",
        "fp_model_free",
        "fp_model_num_classes",
        "fp_score_text",
        "fp_score_point",
        "fp_histogram_overlap",
        "fp_last_error_message",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}

fn target_dir() -> std::path::PathBuf {
    // .../target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_scores() {
    use std::process::Command;
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let out_dir = target_dir();
    let mut build = Command::new(env!("CARGO"));
    build.args(["build", "-p", "fisher-probe-ffi", "--lib"]);
    if out_dir.file_name().unwrap() == "release" {
        build.arg("--release");
    }
    assert!(build.status().unwrap().success());

    let fx = fixture();
    let exe = fx._dir.path().join("score");
    let status = Command::new(cc)
        .arg(manifest.join("examples/score.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(out_dir.join("libfisher_probe_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());

    let out = Command::new(&exe)
        .args([fx.point_ckpt.to_str().unwrap(), "0.3", "-1.2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fields: Vec<String> = String::from_utf8(out.stdout)
        .unwrap()
        .split_whitespace()
        .map(String::from)
        .collect();
    let clf = Classifier::new(build_model(&ModelSpec::synthetic_mlp(), 3).unwrap(), None).unwrap();
    let r = lambda_max(&clf, &Example::point("x", vec![0.3, -1.2], 0)).unwrap();
    assert_eq!(fields[0].parse::<f64>().unwrap().to_bits(), r.lambda_max.to_bits());
    assert_eq!(fields[1].parse::<usize>().unwrap(), r.prediction);

    let missing = Command::new(&exe).args(["/nonexistent.ckpt", "0", "0"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("load failed (3)"));
}
