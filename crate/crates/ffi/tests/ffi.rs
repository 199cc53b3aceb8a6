use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use qmbias_ffi::*;

fn data(rel: &str) -> CString {
    let p: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel);
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> Option<String> {
    let p = qmbias_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(qmbias_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn binarize_both_scales() {
    let mut out = 9i8;
    let cases = [
        (QmScale::FourPoint, 1, 1),
        (QmScale::FourPoint, 2, 1),
        (QmScale::FourPoint, 3, 0),
        (QmScale::FourPoint, 4, 0),
        (QmScale::Likert7, 1, 0),
        (QmScale::Likert7, 3, 0),
        (QmScale::Likert7, 4, -1),
        (QmScale::Likert7, 5, 1),
        (QmScale::Likert7, 7, 1),
    ];
    for (scale, value, want) in cases {
        assert_eq!(unsafe { qmbias_binarize(scale, value, &mut out) }, QmStatus::Ok);
        assert_eq!(out, want, "{scale:?} {value}");
    }
    assert_eq!(
        unsafe { qmbias_binarize(QmScale::FourPoint, 5, &mut out) },
        QmStatus::InvalidArgument
    );
    assert!(last_error().is_some());
    assert_eq!(
        unsafe { qmbias_binarize(QmScale::Likert7, 1, ptr::null_mut()) },
        QmStatus::NullPointer
    );
    assert!(last_error().unwrap().contains("out"));
}

#[test]
fn success_clears_the_last_error() {
    let mut out = 0i8;
    unsafe { qmbias_binarize(QmScale::FourPoint, 0, &mut out) };
    assert!(last_error().is_some());
    unsafe { qmbias_binarize(QmScale::FourPoint, 1, &mut out) };
    assert!(last_error().is_none());
}

#[test]
fn predict_normalizes_and_flags_undefined() {
    let (mut label, mut p) = (0i8, 0.0f64);
    assert_eq!(unsafe { qmbias_predict(0.3, 0.1, &mut label, &mut p) }, QmStatus::Ok);
    assert_eq!(label, 1);
    assert!((p - 0.75).abs() < 1e-12);
    assert_eq!(unsafe { qmbias_predict(0.1, 0.3, &mut label, &mut p) }, QmStatus::Ok);
    assert_eq!(label, 0);
    assert!((p - 0.25).abs() < 1e-12);
    assert_eq!(unsafe { qmbias_predict(0.0, 0.0, &mut label, &mut p) }, QmStatus::Ok);
    assert_eq!(label, -1);
    assert!(p.is_nan());
    assert_eq!(
        unsafe { qmbias_predict(1.5, 0.0, &mut label, &mut p) },
        QmStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { qmbias_predict(f64::NAN, 0.0, &mut label, &mut p) },
        QmStatus::InvalidArgument
    );
}

#[test]
fn std_bias_and_pearson() {
    let biases = [0.3, -0.4];
    let mut out = 0.0;
    assert_eq!(unsafe { qmbias_std_bias(biases.as_ptr(), 2, &mut out) }, QmStatus::Ok);
    assert!((out - (0.125f64).sqrt()).abs() < 1e-12);
    assert_eq!(unsafe { qmbias_std_bias(ptr::null(), 3, &mut out) }, QmStatus::NullPointer);

    let xs = [1.0, 2.0, 3.0, 4.0];
    let ys = [2.0, 4.0, 5.0, 4.0];
    assert_eq!(unsafe { qmbias_pearson(xs.as_ptr(), ys.as_ptr(), 4, &mut out) }, QmStatus::Ok);
    // sxy 3.5, sxx 5, syy 4.75
    assert!((out - 3.5 / (23.75f64).sqrt()).abs() < 1e-12);
    let flat = [1.0; 4];
    assert_eq!(
        unsafe { qmbias_pearson(xs.as_ptr(), flat.as_ptr(), 4, &mut out) },
        QmStatus::Degenerate
    );
}

#[test]
fn corpus_handle_round_trip() {
    let (m, q) = (data("appendix/matrix.csv"), data("appendix/questions.json"));
    let mut corpus = ptr::null_mut();
    assert_eq!(unsafe { qmbias_corpus_load(m.as_ptr(), q.as_ptr(), &mut corpus) }, QmStatus::Ok);
    assert!(!corpus.is_null());

    let mut n = 0usize;
    assert_eq!(unsafe { qmbias_corpus_respondents(corpus, &mut n) }, QmStatus::Ok);
    assert_eq!(n, 192);

    let id = CString::new("Q13.4").unwrap();
    let mut v = 0.0;
    assert_eq!(
        unsafe { qmbias_corpus_majority_baseline(corpus, id.as_ptr(), &mut v) },
        QmStatus::Ok
    );
    // 115 no against 49 yes
    assert!((v - 115.0 / 164.0).abs() < 1e-12);
    assert_eq!(unsafe { qmbias_corpus_yes_mean(corpus, id.as_ptr(), &mut v) }, QmStatus::Ok);
    assert!((v - 49.0 / 164.0).abs() < 1e-12);

    let bad = CString::new("Q99").unwrap();
    assert_ne!(unsafe { qmbias_corpus_yes_mean(corpus, bad.as_ptr(), &mut v) }, QmStatus::Ok);
    assert!(last_error().unwrap().contains("Q99"));
    unsafe { qmbias_corpus_free(corpus) };
    unsafe { qmbias_corpus_free(ptr::null_mut()) };
}

#[test]
fn corpus_load_errors() {
    let mut corpus = ptr::null_mut();
    let missing = data("appendix/nope.csv");
    let q = data("appendix/questions.json");
    assert_eq!(
        unsafe { qmbias_corpus_load(missing.as_ptr(), q.as_ptr(), &mut corpus) },
        QmStatus::Io
    );
    assert!(corpus.is_null());
    assert_eq!(
        unsafe { qmbias_corpus_load(ptr::null(), q.as_ptr(), &mut corpus) },
        QmStatus::NullPointer
    );
    let bytes = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { qmbias_corpus_load(bytes.as_ptr() as *const c_char, q.as_ptr(), &mut corpus) },
        QmStatus::InvalidUtf8
    );
}

#[test]
fn render_zero_shot_llama3() {
    let text = CString::new("Do you support X?").unwrap();
    let template = CString::new("llama3").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { qmbias_render_zero_shot(text.as_ptr(), template.as_ptr(), &mut out) },
        QmStatus::Ok
    );
    let s = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { qmbias_string_free(out) };
    assert_eq!(
        s,
        "<|start_header_id|>user<|end_header_id|>\n\n\
         Please respond with 'yes' or 'no': Do you support X?\nYour response:<|eot_id|>\
         <|start_header_id|>assistant<|end_header_id|>\n\n"
    );

    let unknown = CString::new("mistral").unwrap();
    assert_ne!(
        unsafe { qmbias_render_zero_shot(text.as_ptr(), unknown.as_ptr(), &mut out) },
        QmStatus::Ok
    );
    assert!(out.is_null());
}

#[test]
fn run_toy_config_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = data("toy/run.toml");
    let run_dir = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut resolved = 0usize;
    assert_eq!(
        unsafe { qmbias_run(config.as_ptr(), run_dir.as_ptr(), &mut resolved) },
        QmStatus::Ok,
        "{:?}",
        last_error()
    );
    assert!(resolved > 0);
    let reports: Vec<_> = std::fs::read_dir(dir.path().join("reports"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(reports.iter().any(|f| f == "metrics.csv"), "{reports:?}");
    assert_eq!(
        unsafe { qmbias_run(ptr::null(), run_dir.as_ptr(), ptr::null_mut()) },
        QmStatus::NullPointer
    );
}
