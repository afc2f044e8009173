//! C ABI over the caption-to-image pipeline: opaque model handles loaded
//! from checkpoints, image generation, caption redescription and the
//! word-swap probe. All functions return a status code; the message for the
//! most recent failure on the calling thread is available via
//! `recap_last_error`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;

use libc::{c_char, c_int};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use recap::captioner::Captioner;
use recap::harness::checkpoint::{has_group, load_captioner, load_model, read_manifest};
use recap::harness::probe::{word_swap_probe, Field};
use recap::model::Model;
use recap::synthdata::grammar_vocab;
use recap::tensor::{no_grad, Tensor};
use recap::text::{tokenize, Vocab};
use recap::Config;

/// Status codes returned by every fallible call.
pub const RECAP_OK: c_int = 0;
pub const RECAP_ERR_INVALID_ARGUMENT: c_int = 1;
pub const RECAP_ERR_CHECKPOINT: c_int = 2;
pub const RECAP_ERR_RUNTIME: c_int = 3;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_else(|_| CString::new("error").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(code: c_int, msg: &str) -> c_int {
    set_error(msg);
    code
}

/// Opaque handle: a loaded model plus everything needed to run it.
pub struct RecapModel {
    cfg: Config,
    model: Model,
    captioner: Option<Captioner>,
    vocab: Vocab,
}

/// Message for the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn recap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn cstr<'a>(p: *const c_char, what: &str) -> Result<&'a str, c_int> {
    if p.is_null() {
        return Err(fail(RECAP_ERR_INVALID_ARGUMENT, &format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RECAP_ERR_INVALID_ARGUMENT, &format!("{what} is not valid UTF-8")))
}

/// Loads a checkpoint directory into a new handle. On success writes the
/// handle through `out` and returns RECAP_OK; the handle must be released
/// with `recap_model_free`.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn recap_model_load(dir: *const c_char, out: *mut *mut RecapModel) -> c_int {
    if out.is_null() {
        return fail(RECAP_ERR_INVALID_ARGUMENT, "out is null");
    }
    let dir = match cstr(dir, "dir") {
        Ok(s) => Path::new(s),
        Err(c) => return c,
    };
    let manifest = match read_manifest(dir) {
        Ok(m) => m,
        Err(e) => return fail(RECAP_ERR_CHECKPOINT, &e.to_string()),
    };
    let cfg = manifest.config.clone();
    let vocab = grammar_vocab();
    if vocab.len() != manifest.vocab_size {
        return fail(
            RECAP_ERR_CHECKPOINT,
            &format!("checkpoint vocabulary size {} does not match {}", manifest.vocab_size, vocab.len()),
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let model = Model::new(&mut rng, &cfg, vocab.len());
    if let Err(e) = load_model(dir, &manifest, &model) {
        return fail(RECAP_ERR_CHECKPOINT, &e.to_string());
    }
    let captioner = if has_group(&manifest, "stream") {
        let cap = Captioner::new(&mut rng, &cfg, vocab.len());
        if let Err(e) = load_captioner(dir, &manifest, &cap) {
            return fail(RECAP_ERR_CHECKPOINT, &e.to_string());
        }
        Some(cap)
    } else {
        None
    };
    let handle = Box::new(RecapModel { cfg, model, captioner, vocab });
    *out = Box::into_raw(handle);
    RECAP_OK
}

/// Releases a handle returned by `recap_model_load`. NULL is a no-op.
///
/// # Safety
/// `handle` must come from `recap_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn recap_model_free(handle: *mut RecapModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Side length in pixels of the finest generated image.
///
/// # Safety
/// `handle` must be a live handle from `recap_model_load`.
#[no_mangle]
pub unsafe extern "C" fn recap_image_side(handle: *const RecapModel) -> usize {
    if handle.is_null() {
        return 0;
    }
    (*handle).cfg.final_side()
}

fn generate_image(h: &RecapModel, caption: &str, seed: u64) -> Result<Tensor, c_int> {
    let toks = tokenize(caption, &h.vocab, h.cfg.sentence_len)
        .map_err(|e| fail(RECAP_ERR_INVALID_ARGUMENT, &e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::randn(&mut rng, &[h.cfg.z_dim], 1.0);
    let e = Tensor::randn(&mut rng, &[h.cfg.aug_dim], 1.0);
    no_grad(|| Ok::<_, recap::Error>(h.model.generate(&toks, &z, &e)?.images.last().unwrap().clone()))
        .map_err(|e| fail(RECAP_ERR_RUNTIME, &e.to_string()))
}

/// Generates the finest-stage image for a caption into a caller buffer of
/// interleaved RGB bytes (3 * side * side, row major).
///
/// # Safety
/// `caption` must be NUL-terminated; `pixels` must point to at least
/// `pixels_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn recap_generate(
    handle: *const RecapModel,
    caption: *const c_char,
    seed: u64,
    pixels: *mut u8,
    pixels_len: usize,
) -> c_int {
    if handle.is_null() {
        return fail(RECAP_ERR_INVALID_ARGUMENT, "handle is null");
    }
    let h = &*handle;
    let caption = match cstr(caption, "caption") {
        Ok(s) => s,
        Err(c) => return c,
    };
    let side = h.cfg.final_side();
    let need = 3 * side * side;
    if pixels.is_null() || pixels_len < need {
        return fail(RECAP_ERR_INVALID_ARGUMENT, &format!("pixel buffer needs {need} bytes, got {pixels_len}"));
    }
    let img = match generate_image(h, caption, seed) {
        Ok(t) => t,
        Err(c) => return c,
    };
    let d = img.data_vec();
    let buf = std::slice::from_raw_parts_mut(pixels, need);
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                let v = (d[c * side * side + y * side + x] + 1.0) / 2.0;
                buf[(y * side + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    RECAP_OK
}

/// Generates an image for the caption, then decodes the frozen captioner's
/// description of it into `text` (NUL-terminated, truncated to fit).
/// Requires a checkpoint that carries captioner weights.
///
/// # Safety
/// `caption` must be NUL-terminated; `text` must point to at least
/// `text_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn recap_redescribe(
    handle: *const RecapModel,
    caption: *const c_char,
    seed: u64,
    text: *mut c_char,
    text_len: usize,
) -> c_int {
    if handle.is_null() {
        return fail(RECAP_ERR_INVALID_ARGUMENT, "handle is null");
    }
    let h = &*handle;
    let cap = match &h.captioner {
        Some(c) => c,
        None => return fail(RECAP_ERR_INVALID_ARGUMENT, "checkpoint holds no captioner weights"),
    };
    let caption = match cstr(caption, "caption") {
        Ok(s) => s,
        Err(c) => return c,
    };
    if text.is_null() || text_len == 0 {
        return fail(RECAP_ERR_INVALID_ARGUMENT, "text buffer is empty");
    }
    let img = match generate_image(h, caption, seed) {
        Ok(t) => t,
        Err(c) => return c,
    };
    let toks = match cap.greedy_decode(&img, h.cfg.sentence_len) {
        Ok(t) => t,
        Err(e) => return fail(RECAP_ERR_RUNTIME, &e.to_string()),
    };
    let words: Vec<&str> =
        toks.ids[..toks.true_length].iter().filter_map(|&id| h.vocab.token(id)).collect();
    let s = words.join(" ");
    let bytes = s.as_bytes();
    let n = bytes.len().min(text_len - 1);
    std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, text, n);
    *text.add(n) = 0;
    RECAP_OK
}

/// Swaps one attribute word (`field` in shape|color|bg_color|size|position)
/// and reports through `followed` whether the oracle sees the new value in
/// the regenerated image.
///
/// # Safety
/// String arguments must be NUL-terminated; `followed` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn recap_probe(
    handle: *const RecapModel,
    caption: *const c_char,
    field: *const c_char,
    value: *const c_char,
    seed: u64,
    followed: *mut bool,
) -> c_int {
    if handle.is_null() || followed.is_null() {
        return fail(RECAP_ERR_INVALID_ARGUMENT, "handle or out pointer is null");
    }
    let h = &*handle;
    let (caption, field, value) = match (cstr(caption, "caption"), cstr(field, "field"), cstr(value, "value")) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (Err(c), _, _) | (_, Err(c), _) | (_, _, Err(c)) => return c,
    };
    let field = match Field::parse(field) {
        Ok(f) => f,
        Err(e) => return fail(RECAP_ERR_INVALID_ARGUMENT, &e.to_string()),
    };
    match word_swap_probe(&h.model, &h.vocab, &h.cfg, caption, field, value, seed) {
        Ok(trial) => {
            *followed = trial.followed;
            RECAP_OK
        }
        Err(e) => fail(RECAP_ERR_INVALID_ARGUMENT, &e.to_string()),
    }
}
