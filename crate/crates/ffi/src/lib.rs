//! C ABI over the qmbias library.
//!
//! Every function returns a [`QmStatus`]; results go through out-pointers.
//! On failure a message is kept per thread and can be read with
//! [`qmbias_last_error`]. Strings returned by the library must be released
//! with [`qmbias_string_free`], corpora with [`qmbias_corpus_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qmbias::gateway::YesNoMass;
use qmbias::orchestrator::{run, RunConfig, RunDir, RunOptions, RunStatus};
use qmbias::prompt::{render_raw_named, PromptFactory, PromptFormat};
use qmbias::report::{emit_reports, ReportOptions};
use qmbias::survey::{ingest_corpus, AnswerMatrix, CorpusSchema, Scale};
use qmbias::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Degenerate = 6,
    /// The run stopped with unresolved queries; rerun to resume.
    Incomplete = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QmScale {
    FourPoint = 0,
    Likert7 = 1,
}

/// Loaded answer matrix.
pub struct QmCorpus {
    matrix: AnswerMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> QmStatus {
    match err {
        Error::Io { .. } => QmStatus::Io,
        Error::Ingest { .. } | Error::Json(_) | Error::Csv(_) | Error::Metadata(_) => QmStatus::Parse,
        Error::Degenerate(_) | Error::NoGoldAnswers(_) | Error::NoRespondents => QmStatus::Degenerate,
        Error::Incomplete { .. } => QmStatus::Incomplete,
        Error::Backend { .. } | Error::Cache(_) => QmStatus::Internal,
        _ => QmStatus::InvalidArgument,
    }
}

struct Fail(QmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic for `qmbias_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> QmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            QmStatus::Ok
        }
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            QmStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(QmStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(QmStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(QmStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(QmStatus::NullPointer, format!("{name} is null")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(QmStatus::Internal, "string contains a NUL byte".into()))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn qmbias_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn qmbias_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn qmbias_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Binary answer for a raw scale value: 1 yes, 0 no, -1 missing (Likert neutral).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qmbias_binarize(scale: QmScale, value: u8, out: *mut i8) -> QmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let scale = match scale {
            QmScale::FourPoint => Scale::FourPoint,
            QmScale::Likert7 => Scale::Likert7,
        };
        let answer = scale
            .binarize(value)
            .map_err(|e| Fail(QmStatus::InvalidArgument, e.to_string()))?;
        *out = match answer.as_bool() {
            Some(true) => 1,
            Some(false) => 0,
            None => -1,
        };
        Ok(())
    })
}

/// Label (1, 0 or -1) and normalized yes-probability (NaN when undefined).
///
/// # Safety
/// `label` and `p_yes_norm` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn qmbias_predict(
    p_yes_raw: f64,
    p_no_raw: f64,
    label: *mut i8,
    p_yes_norm: *mut f64,
) -> QmStatus {
    guard(|| {
        let label = out_arg(label, "label")?;
        let p_yes_norm = out_arg(p_yes_norm, "p_yes_norm")?;
        let valid = |p: f64| p.is_finite() && (0.0..=1.0).contains(&p);
        if !valid(p_yes_raw) || !valid(p_no_raw) {
            return Err(Fail(QmStatus::InvalidArgument, "masses must lie in [0, 1]".into()));
        }
        let p = qmbias::metrics::predict(YesNoMass::new(p_yes_raw, p_no_raw));
        *label = p.label;
        *p_yes_norm = p.p_yes_norm.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Root mean square of `len` bias scores.
///
/// # Safety
/// `biases` must point to `len` readable values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qmbias_std_bias(biases: *const f64, len: usize, out: *mut f64) -> QmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = qmbias::metrics::std_bias(slice_arg(biases, len, "biases")?)?;
        Ok(())
    })
}

/// Pearson correlation of two series of length `len`.
///
/// # Safety
/// `xs` and `ys` must each point to `len` readable values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qmbias_pearson(
    xs: *const f64,
    ys: *const f64,
    len: usize,
    out: *mut f64,
) -> QmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = qmbias::metrics::pearson(slice_arg(xs, len, "xs")?, slice_arg(ys, len, "ys")?)?;
        Ok(())
    })
}

/// Loads a wide CSV and its question metadata with the default column mapping.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be valid. The handle is
/// released with `qmbias_corpus_free`.
#[no_mangle]
pub unsafe extern "C" fn qmbias_corpus_load(
    matrix_path: *const c_char,
    questions_path: *const c_char,
    out: *mut *mut QmCorpus,
) -> QmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = str_arg(matrix_path, "matrix_path")?;
        let q = str_arg(questions_path, "questions_path")?;
        let (matrix, _) = ingest_corpus(m, q, &CorpusSchema::default())?;
        *out = Box::into_raw(Box::new(QmCorpus { matrix }));
        Ok(())
    })
}

/// # Safety
/// `corpus` must come from `qmbias_corpus_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn qmbias_corpus_free(corpus: *mut QmCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// # Safety
/// `corpus` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn qmbias_corpus_respondents(corpus: *const QmCorpus, out: *mut usize) -> QmStatus {
    guard(|| {
        let c = corpus
            .as_ref()
            .ok_or_else(|| Fail(QmStatus::NullPointer, "corpus is null".into()))?;
        *out_arg(out, "out")? = c.matrix.respondents().len();
        Ok(())
    })
}

/// Share of "yes" among respondents with a gold answer to `question_id`.
///
/// # Safety
/// `corpus` and `out` must be valid; `question_id` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qmbias_corpus_yes_mean(
    corpus: *const QmCorpus,
    question_id: *const c_char,
    out: *mut f64,
) -> QmStatus {
    guard(|| {
        let c = corpus
            .as_ref()
            .ok_or_else(|| Fail(QmStatus::NullPointer, "corpus is null".into()))?;
        let id = str_arg(question_id, "question_id")?;
        *out_arg(out, "out")? = c.matrix.human_yes_mean(id)?.mean;
        Ok(())
    })
}

/// Accuracy of always answering the majority class.
///
/// # Safety
/// `corpus` and `out` must be valid; `question_id` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qmbias_corpus_majority_baseline(
    corpus: *const QmCorpus,
    question_id: *const c_char,
    out: *mut f64,
) -> QmStatus {
    guard(|| {
        let c = corpus
            .as_ref()
            .ok_or_else(|| Fail(QmStatus::NullPointer, "corpus is null".into()))?;
        let id = str_arg(question_id, "question_id")?;
        *out_arg(out, "out")? = c.matrix.majority_baseline(id)?.accuracy;
        Ok(())
    })
}

/// Zero-shot prompt for `target_text` in a raw chat template ("llama3" or "olmo").
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be valid. The result is
/// released with `qmbias_string_free`.
#[no_mangle]
pub unsafe extern "C" fn qmbias_render_zero_shot(
    target_text: *const c_char,
    template_id: *const c_char,
    out: *mut *mut c_char,
) -> QmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let text = str_arg(target_text, "target_text")?;
        let template = str_arg(template_id, "template_id")?;
        let format = PromptFormat::raw(template.parse()?);
        let prompt = PromptFactory::new(format).build_zero_shot(text)?;
        *out = into_c_string(render_raw_named(&prompt, template)?)?;
        Ok(())
    })
}

/// Executes the run described by a TOML config in `run_dir` and writes the
/// reports. Returns `Incomplete` when queries remain unresolved.
///
/// # Safety
/// Paths must be NUL-terminated; `resolved` may be NULL, otherwise it receives
/// the number of resolved results.
#[no_mangle]
pub unsafe extern "C" fn qmbias_run(
    config_path: *const c_char,
    run_dir: *const c_char,
    resolved: *mut usize,
) -> QmStatus {
    guard(|| {
        let config = RunConfig::load(str_arg(config_path, "config_path")?)?;
        let dir = Path::new(str_arg(run_dir, "run_dir")?);
        match run(&config, dir, &RunOptions::default())? {
            RunStatus::Complete(results) => {
                let (matrix, _) = config.load_corpus()?;
                emit_reports(&results, &matrix, &RunDir::open(dir).reports(), &ReportOptions::default())?;
                if let Some(r) = resolved.as_mut() {
                    *r = results.entries.len();
                }
                Ok(())
            }
            RunStatus::Incomplete(rem) => {
                if let Some(r) = resolved.as_mut() {
                    *r = rem.total - rem.unresolved.len();
                }
                Err(Fail(
                    QmStatus::Incomplete,
                    format!("{} of {} queries unresolved", rem.unresolved.len(), rem.total),
                ))
            }
        }
    })
}
