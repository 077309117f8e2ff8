// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI for the stepwise tokenizer, problem parser, model and patching
//! metric.
//!
//! Every fallible function returns an [`SwStatus`]. On failure a message
//! is stored per thread and can be read with [`sw_last_error_message`]; a
//! successful call leaves the previous message in place. Handles are
//! opaque, created by `*_parse`/`*_init`/`*_load` and released by the
//! matching `*_free`. Panics never cross the boundary; they surface as
//! [`SwStatus::Panic`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stepwise::interpret::{patch_effect, Metric, RunLogits};
use stepwise::minigpt::{
    load_checkpoint, save_checkpoint, sliding_window_mask, ForwardOptions, ModelConfig, ModelState,
};
use stepwise::taskgen::{tokenize_text, OrderMode, Problem, Split, TokenId, VOCAB_SIZE};
use stepwise::trainer::predict;

/// Status codes. Values 3 to 9 match the exit codes of the `stepwise`
/// binary for the same error class.
#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Exhausted = 6,
    InvalidInput = 7,
    Numeric = 8,
    Probe = 9,
    BufferTooSmall = 10,
    /// The patching effect is undefined for these logits.
    Degenerate = 11,
    Panic = 12,
}

/// Patching-effect metric.
#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwMetric {
    A = 0,
    B = 1,
    C = 2,
}

/// A parsed problem.
pub struct SwProblem(Problem);

/// Transformer weights in 32-bit floats.
pub struct SwModel(ModelState<f32>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Fail {
    Null(&'static str),
    Utf8(&'static str),
    TooSmall { need: usize, cap: usize },
    Degenerate,
    Lib(stepwise::Error),
}

impl From<stepwise::Error> for Fail {
    fn from(e: stepwise::Error) -> Self {
        Fail::Lib(e)
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &stepwise::Error) -> SwStatus {
    match e.exit_code() {
        3 => SwStatus::Config,
        4 => SwStatus::Io,
        5 => SwStatus::Format,
        6 => SwStatus::Exhausted,
        7 => SwStatus::InvalidInput,
        9 => SwStatus::Probe,
        _ => SwStatus::Numeric,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SwStatus::Ok,
        Ok(Err(fail)) => {
            let (status, msg) = match fail {
                Fail::Null(what) => (SwStatus::NullPointer, format!("null pointer: {what}")),
                Fail::Utf8(what) => (SwStatus::InvalidUtf8, format!("{what} is not valid UTF-8")),
                Fail::TooSmall { need, cap } => {
                    (SwStatus::BufferTooSmall, format!("buffer holds {cap} elements, {need} needed"))
                }
                Fail::Degenerate => (SwStatus::Degenerate, "patching effect undefined: denominator near zero".into()),
                Fail::Lib(e) => (status_of(&e), e.to_string()),
            };
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SwStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

/// Copy `src` into a caller buffer of `cap` elements, always reporting the
/// needed length through `out_len`.
unsafe fn fill<T: Copy>(src: &[T], out: *mut T, cap: usize, out_len: *mut usize) -> Result<(), Fail> {
    *out_arg(out_len, "out_len")? = src.len();
    if cap < src.len() {
        return Err(Fail::TooSmall { need: src.len(), cap });
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of this thread's most recent failure, or NULL. Valid until the
/// next failing call on this thread.
#[no_mangle]
pub extern "C" fn sw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Forget this thread's last error message.
#[no_mangle]
pub extern "C" fn sw_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Size of the fixed vocabulary.
#[no_mangle]
pub extern "C" fn sw_vocab_size() -> usize {
    VOCAB_SIZE
}

/// Token ids of `text`. `out_len` receives the token count even when the
/// buffer is too small.
#[no_mangle]
pub unsafe extern "C" fn sw_tokenize(text: *const c_char, out: *mut u32, cap: usize, out_len: *mut usize) -> SwStatus {
    guard(|| {
        let ids = tokenize_text(str_arg(text, "text")?)?;
        fill(&ids, out, cap, out_len)
    })
}

/// Parse a forward-order problem such as `a=4+6,b=a-2,b>>?`.
#[no_mangle]
pub unsafe extern "C" fn sw_problem_parse(text: *const c_char, out: *mut *mut SwProblem) -> SwStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let out = out_arg(out, "out")?;
        let n = text.matches(',').count();
        let order: Vec<usize> = (0..n).collect();
        let p = Problem::from_text(text, &order, OrderMode::Forward, Split::TestId)?;
        *out = Box::into_raw(Box::new(SwProblem(p)));
        Ok(())
    })
}

/// Release a problem; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn sw_problem_free(p: *mut SwProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Answer in `0..23`.
#[no_mangle]
pub unsafe extern "C" fn sw_problem_answer(p: *const SwProblem, out: *mut u8) -> SwStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(p, "problem")?.0.answer();
        Ok(())
    })
}

/// Number of premises.
#[no_mangle]
pub unsafe extern "C" fn sw_problem_n_steps(p: *const SwProblem, out: *mut usize) -> SwStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(p, "problem")?.0.n_steps();
        Ok(())
    })
}

/// Number of steps whose subtrahend is a variable.
#[no_mangle]
pub unsafe extern "C" fn sw_problem_n_vas(p: *const SwProblem, out: *mut usize) -> SwStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(p, "problem")?.0.n_vas();
        Ok(())
    })
}

/// Prompt tokens (BOS through `?`), without the answer.
#[no_mangle]
pub unsafe extern "C" fn sw_problem_prompt_tokens(
    p: *const SwProblem,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> SwStatus {
    guard(|| {
        let seq = handle(p, "problem")?.0.token_seq()?;
        fill(seq.prompt(), out, cap, out_len)
    })
}

/// Freshly initialized model with `n_layers` blocks, `n_heads` heads and
/// width `d_model`; other settings take their defaults.
#[no_mangle]
pub unsafe extern "C" fn sw_model_init(
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    seed: u64,
    out: *mut *mut SwModel,
) -> SwStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = ModelState::init(&ModelConfig::with_shape(n_layers, n_heads, d_model), seed)?;
        *out = Box::into_raw(Box::new(SwModel(m)));
        Ok(())
    })
}

/// Load a checkpoint directory.
#[no_mangle]
pub unsafe extern "C" fn sw_model_load(dir: *const c_char, out: *mut *mut SwModel) -> SwStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let out = out_arg(out, "out")?;
        let m = load_checkpoint(Path::new(dir))?;
        *out = Box::into_raw(Box::new(SwModel(m)));
        Ok(())
    })
}

/// Write a checkpoint directory.
#[no_mangle]
pub unsafe extern "C" fn sw_model_save(m: *const SwModel, dir: *const c_char) -> SwStatus {
    guard(|| {
        let m = handle(m, "model")?;
        save_checkpoint(&m.0, Path::new(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// Release a model; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn sw_model_free(m: *mut SwModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of scalar parameters.
#[no_mangle]
pub unsafe extern "C" fn sw_model_param_count(m: *const SwModel, out: *mut usize) -> SwStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(m, "model")?.0.n_params();
        Ok(())
    })
}

fn window_opt(window: usize) -> Option<usize> {
    (window > 0).then_some(window)
}

/// Logits over the vocabulary at the last position of `ids`. A `window`
/// of 0 means plain causal attention.
#[no_mangle]
pub unsafe extern "C" fn sw_model_next_logits(
    m: *const SwModel,
    ids: *const u32,
    n: usize,
    window: usize,
    out: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> SwStatus {
    guard(|| {
        let m = handle(m, "model")?;
        if ids.is_null() {
            return Err(Fail::Null("ids"));
        }
        let ids: &[TokenId] = std::slice::from_raw_parts(ids, n);
        let logits = m.0.forward(ids, ForwardOptions::window(window_opt(window)))?;
        fill(logits.row(n.saturating_sub(1)), out, cap, out_len)
    })
}

/// Greedy answer token for a problem.
#[no_mangle]
pub unsafe extern "C" fn sw_model_predict(
    m: *const SwModel,
    p: *const SwProblem,
    window: usize,
    out_token: *mut u32,
) -> SwStatus {
    guard(|| {
        let m = handle(m, "model")?;
        let seq = handle(p, "problem")?.0.token_seq()?;
        let out = out_arg(out_token, "out_token")?;
        *out = predict(&m.0, &[seq], ForwardOptions::window(window_opt(window)))?[0];
        Ok(())
    })
}

/// Additive sliding-window mask, `seq_len * seq_len` row-major values of
/// 0 or negative infinity.
#[no_mangle]
pub unsafe extern "C" fn sw_sliding_window_mask(
    seq_len: usize,
    window: usize,
    out: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> SwStatus {
    guard(|| {
        let mask = sliding_window_mask::<f32>(seq_len, window)?;
        fill(mask.data(), out, cap, out_len)
    })
}

/// Answer-position logits of one patching sample.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SwRunLogits {
    /// Clean run at the clean answer `r`.
    pub cl_r: f64,
    /// Patched run at `r`.
    pub pt_r: f64,
    /// Clean run at the corrupted answer `r'`.
    pub cl_rp: f64,
    pub pt_rp: f64,
    /// Corrupted run at `r` and at `r'`.
    pub star_r: f64,
    pub star_rp: f64,
}

/// Patching effect of one sample under `metric` (an [`SwMetric`] value);
/// [`SwStatus::Degenerate`] when undefined.
#[no_mangle]
pub unsafe extern "C" fn sw_patch_effect(logits: *const SwRunLogits, metric: i32, out: *mut f64) -> SwStatus {
    guard(|| {
        let l = handle(logits, "logits")?;
        let out = out_arg(out, "out")?;
        let metric = match metric {
            m if m == SwMetric::A as i32 => Metric::A,
            m if m == SwMetric::B as i32 => Metric::B,
            m if m == SwMetric::C as i32 => Metric::C,
            m => return Err(Fail::Lib(stepwise::Error::Config(format!("unknown metric {m}")))),
        };
        let rl = RunLogits {
            cl_r: l.cl_r,
            pt_r: l.pt_r,
            cl_rp: l.cl_rp,
            pt_rp: l.pt_rp,
            star_r: l.star_r,
            star_rp: l.star_rp,
        };
        *out = patch_effect(&rl, metric).ok_or(Fail::Degenerate)?;
        Ok(())
    })
}
