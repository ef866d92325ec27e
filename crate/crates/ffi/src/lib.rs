//! C ABI over model loading, image sampling and Jacobi caption decoding.
//!
//! Every entry point returns a [`UdnStatus`] code; on failure the message is
//! kept per thread and read back with [`udn_last_error`]. Models are opaque
//! handles owned by the caller until [`udn_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use unidenoise::denoise::{default_max_iters, jacobi_decode, sample_image, SamplingConfig};
use unidenoise::model::Model;
use unidenoise::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UdnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Data = 3,
    Numeric = 4,
    BufferTooSmall = 5,
    Panic = 6,
    Internal = 7,
}

/// Opaque model handle.
pub struct UdnModel {
    model: Model,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UdnModelInfo {
    pub text_vocab: u32,
    pub image_vocab: u32,
    pub total_vocab: u32,
    /// Token id of the first image code.
    pub image_offset: u32,
    pub eos: u32,
    /// Prompt tokens accepted, BOS excluded.
    pub max_prompt: u32,
    pub image_cells: u32,
    pub response_len: u32,
    pub num_params: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UdnSampleParams {
    pub steps: u32,
    pub cfg_scale: f64,
    /// 0 keeps the whole image vocabulary.
    pub top_k: u32,
    pub temperature: f64,
    /// Nonzero picks the most likely code at every step.
    pub greedy: u8,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> UdnStatus {
    match e {
        Error::Config(_) | Error::Plan(_) | Error::Schedule(_) | Error::Dimension { .. } | Error::Index(_) => {
            UdnStatus::InvalidArgument
        }
        Error::Data(_) | Error::Path { .. } | Error::Io(_) | Error::Json(_) | Error::Format(_) => UdnStatus::Data,
        Error::Numeric(_) => UdnStatus::Numeric,
        _ => UdnStatus::Internal,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (UdnStatus, String)>) -> UdnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            UdnStatus::Ok
        }
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside unidenoise");
            UdnStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (UdnStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (UdnStatus, String) {
    (UdnStatus::NullArgument, format!("{what} is null"))
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (UdnStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `out` must be null or point to `cap` writable values; `out_len` must be
/// null or writable.
unsafe fn write_out(src: &[u32], out: *mut u32, cap: usize, out_len: *mut usize) -> Result<(), (UdnStatus, String)> {
    if out_len.is_null() {
        return Err(null("out_len"));
    }
    *out_len = src.len();
    if src.len() > cap {
        return Err((
            UdnStatus::BufferTooSmall,
            format!("output needs {} values, buffer holds {cap}", src.len()),
        ));
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(null("out"));
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

/// Greedy 16-step, unguided defaults.
#[no_mangle]
pub extern "C" fn udn_sample_params_default() -> UdnSampleParams {
    let d = SamplingConfig::default();
    UdnSampleParams {
        steps: d.steps as u32,
        cfg_scale: d.cfg_scale,
        top_k: 0,
        temperature: d.temperature,
        greedy: u8::from(d.greedy),
        seed: d.seed,
    }
}

/// Loads a checkpoint. On success `*out` holds a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn udn_model_load(path: *const c_char, out: *mut *mut UdnModel) -> UdnStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (UdnStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = Model::load(Path::new(p)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(UdnModel { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`udn_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn udn_model_free(model: *mut UdnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn udn_model_info(model: *const UdnModel, info: *mut UdnModelInfo) -> UdnStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let info = info.as_mut().ok_or_else(|| null("info"))?;
        let c = m.config;
        *info = UdnModelInfo {
            text_vocab: c.vocab.text_vocab_size,
            image_vocab: c.vocab.image_vocab_size,
            total_vocab: c.vocab.total_size(),
            image_offset: c.vocab.image_offset(),
            eos: c.vocab.eos(),
            max_prompt: (c.prompt_len - 1) as u32,
            image_cells: c.image_tokens() as u32,
            response_len: c.response_len as u32,
            num_params: m.num_params() as u64,
        };
        Ok(())
    })
}

/// Samples one grid for `prompt` (text token ids). Writes the grid's token
/// ids to `out_grid` and its length to `*out_len`; a short buffer yields
/// `BufferTooSmall` with `*out_len` set to the size needed.
///
/// # Safety
/// Pointers must be valid for the lengths given; `params` and `out_len`
/// must be non-null.
#[no_mangle]
pub unsafe extern "C" fn udn_sample_image(
    model: *const UdnModel,
    prompt: *const u32,
    prompt_len: usize,
    params: *const UdnSampleParams,
    out_grid: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> UdnStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let prompt = slice(prompt, prompt_len, "prompt")?;
        let sc = SamplingConfig {
            steps: p.steps as usize,
            cfg_scale: p.cfg_scale,
            top_k: (p.top_k > 0).then_some(p.top_k as usize),
            temperature: p.temperature,
            greedy: p.greedy != 0,
            seed: p.seed,
        };
        let t = sample_image(m, prompt, &sc).map_err(lib_err)?;
        write_out(t.final_state(), out_grid, out_cap, out_len)
    })
}

/// Jacobi-decodes a caption for `grid` (image token ids). Writes the caption
/// up to and including EOS; `*iterations` (if non-null) receives the
/// forward passes spent.
///
/// # Safety
/// Pointers must be valid for the lengths given; `out_len` must be
/// non-null.
#[no_mangle]
pub unsafe extern "C" fn udn_decode_caption(
    model: *const UdnModel,
    grid: *const u32,
    grid_len: usize,
    seed: u64,
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
    iterations: *mut u32,
) -> UdnStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let grid = slice(grid, grid_len, "grid")?;
        let fmt = m.config.format();
        let n = fmt.response_len;
        let ctx = fmt.mmu(grid, &[]).map_err(lib_err)?;
        let t = jacobi_decode(m, &ctx, n, default_max_iters(n), seed).map_err(lib_err)?;
        if let Some(it) = iterations.as_mut() {
            *it = t.converged_iteration() as u32;
        }
        write_out(t.output(fmt.vocab.eos()), out_tokens, out_cap, out_len)
    })
}

/// Copies this thread's last error message, NUL-terminated and truncated to
/// `cap`, into `buf`. Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn udn_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}
