//! C interface to the masked token codec.
//!
//! Models are opaque `McModel` handles. Every call returns an [`McStatus`];
//! on failure [`mc_last_error`] describes the cause. Byte buffers handed out
//! by the library are released with [`mc_bytes_free`], token buffers are
//! always owned by the caller.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use maskcodec::coder::{self, Bitstream};
use maskcodec::probmodel::checkpoint::Checkpoint;
use maskcodec::probmodel::{CountingModel, EntropyModel, MimModel, ModelKind, UniformModel, VarModel};
use maskcodec::schedules::{MaskSchedule, ScheduleKind};
use maskcodec::tokens::TokenGrid;
use maskcodec::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Schedule = 4,
    ModelMismatch = 5,
    Bitstream = 6,
    Truncated = 7,
    Checksum = 8,
    Parse = 9,
    Io = 10,
    BufferTooSmall = 11,
    Internal = 12,
}

impl From<&Error> for McStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => McStatus::Dimension,
            Error::InvalidArgument(_) => McStatus::InvalidArgument,
            Error::Schedule(_) => McStatus::Schedule,
            Error::ModelMismatch(_) => McStatus::ModelMismatch,
            Error::Bitstream(_) => McStatus::Bitstream,
            Error::Truncated(_) => McStatus::Truncated,
            Error::Checksum { .. } => McStatus::Checksum,
            Error::Parse(_) => McStatus::Parse,
            Error::Io(_) => McStatus::Io,
            _ => McStatus::Internal,
        }
    }
}

/// An entropy model usable for coding.
pub struct McModel(Box<dyn EntropyModel>);

/// Library-owned bytes.
#[repr(C)]
pub struct McBytes {
    pub data: *mut u8,
    pub len: usize,
}

/// Dimensions and coding state recorded in a stream header.
#[repr(C)]
#[derive(Debug, Default, Clone, Copy)]
pub struct McStreamInfo {
    pub h: u32,
    pub w: u32,
    pub vocab: u32,
    pub groups_transmitted: u32,
    pub payload_bytes: u32,
    pub header_bytes: u32,
    pub sample_seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(McStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(McStatus::from(&e), e.to_string())
    }
}

type FfiResult<T = ()> = Result<T, Fail>;

/// Runs `f`, converting errors and panics into a status code.
fn guard<F: FnOnce() -> FfiResult>(f: F) -> McStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            McStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            McStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(McStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(McStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize, what: &str) -> FfiResult<&'a [u8]> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_arg<'a>(m: *const McModel) -> FfiResult<&'a dyn EntropyModel> {
    m.as_ref().map(|m| m.0.as_ref()).ok_or_else(|| null("model"))
}

unsafe fn put_model(out: *mut *mut McModel, m: Box<dyn EntropyModel>) -> FfiResult {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(McModel(m)));
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn mc_model_uniform(vocab: u32, out: *mut *mut McModel) -> McStatus {
    guard(|| put_model(out, Box::new(UniformModel::new(vocab as usize)?)))
}

/// Adaptive counting model starting from empty counts.
#[no_mangle]
pub unsafe extern "C" fn mc_model_counting(vocab: u32, out: *mut *mut McModel) -> McStatus {
    guard(|| put_model(out, Box::new(CountingModel::new(vocab as usize)?)))
}

/// Loads a counting, MIM or VAR checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn mc_model_load(path: *const c_char, out: *mut *mut McModel) -> McStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let ck = Checkpoint::load(Path::new(path))?;
        let m: Box<dyn EntropyModel> = match ck.kind {
            ModelKind::Counting => Box::new(CountingModel::from_checkpoint(&ck)?),
            ModelKind::Mim => Box::new(MimModel::from_checkpoint(&ck)?),
            ModelKind::Var => Box::new(VarModel::from_checkpoint(&ck)?),
            other => return Err(Fail(McStatus::ModelMismatch, format!("{path} holds a {} model", other.name()))),
        };
        put_model(out, m)
    })
}

#[no_mangle]
pub unsafe extern "C" fn mc_model_vocab(model: *const McModel) -> u32 {
    model.as_ref().map_or(0, |m| m.0.vocab() as u32)
}

#[no_mangle]
pub unsafe extern "C" fn mc_model_free(model: *mut McModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Encodes an `h × w` row-major token grid. `groups` is the number of
/// groups to transmit, 0 meaning all of them; `sample_seed` is stored for
/// hybrid decoding.
#[no_mangle]
pub unsafe extern "C" fn mc_encode(
    model: *const McModel,
    tokens: *const u32,
    h: u32,
    w: u32,
    schedule: *const c_char,
    groups: u32,
    sample_seed: u64,
    out: *mut McBytes,
) -> McStatus {
    guard(|| {
        let model = model_arg(model)?;
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let (h, w) = (h as usize, w as usize);
        let t = std::slice::from_raw_parts(tokens, h * w).to_vec();
        let grid = TokenGrid::new(h, w, model.vocab(), t)?;
        let kind: ScheduleKind = str_arg(schedule, "schedule")?.parse()?;
        let sched = MaskSchedule::build(&kind, h, w)?;
        let k = if groups == 0 { sched.num_groups() } else { groups as usize };
        let bs = coder::encode_prefix(&grid, &sched, model, k, sample_seed)?;
        let mut bytes = bs.to_bytes().into_boxed_slice();
        *out = McBytes { data: bytes.as_mut_ptr(), len: bytes.len() };
        std::mem::forget(bytes);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mc_bytes_free(bytes: McBytes) {
    if !bytes.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(bytes.data, bytes.len)));
    }
}

#[no_mangle]
pub unsafe extern "C" fn mc_stream_info(data: *const u8, len: usize, info: *mut McStreamInfo) -> McStatus {
    guard(|| {
        let bs = Bitstream::from_bytes(bytes_arg(data, len, "data")?)?;
        if info.is_null() {
            return Err(null("info"));
        }
        let hd = &bs.header;
        *info = McStreamInfo {
            h: hd.h as u32,
            w: hd.w as u32,
            vocab: hd.v,
            groups_transmitted: hd.groups_transmitted as u32,
            payload_bytes: hd.payload_len,
            header_bytes: hd.byte_len() as u32,
            sample_seed: hd.sample_seed,
        };
        Ok(())
    })
}

unsafe fn write_tokens(grid: &TokenGrid, out: *mut u32, cap: usize) -> FfiResult {
    if out.is_null() {
        return Err(null("tokens_out"));
    }
    if cap < grid.len() {
        return Err(Fail(McStatus::BufferTooSmall, format!("need room for {} tokens, got {cap}", grid.len())));
    }
    ptr::copy_nonoverlapping(grid.indices().as_ptr(), out, grid.len());
    Ok(())
}

/// Losslessly decodes a fully transmitted stream into `tokens_out`
/// (row-major, `cap` entries available).
#[no_mangle]
pub unsafe extern "C" fn mc_decode(model: *const McModel, data: *const u8, len: usize, tokens_out: *mut u32, cap: usize) -> McStatus {
    guard(|| {
        let model = model_arg(model)?;
        let bs = Bitstream::from_bytes(bytes_arg(data, len, "data")?)?;
        write_tokens(&coder::decode_grid(&bs, model)?, tokens_out, cap)
    })
}

/// Decodes the transmitted groups and samples the remaining ones with
/// `seed`.
#[no_mangle]
pub unsafe extern "C" fn mc_hybrid_decode(
    model: *const McModel,
    data: *const u8,
    len: usize,
    seed: u64,
    tokens_out: *mut u32,
    cap: usize,
) -> McStatus {
    guard(|| {
        let model = model_arg(model)?;
        let bs = Bitstream::from_bytes(bytes_arg(data, len, "data")?)?;
        write_tokens(&coder::hybrid_decode(&bs, model, seed)?, tokens_out, cap)
    })
}

/// Bits per pixel of uniformly coded `h × w` tokens over a `img_h × img_w`
/// image.
#[no_mangle]
pub unsafe extern "C" fn mc_rate_uniform(h: u32, w: u32, vocab: u32, img_h: u32, img_w: u32, out: *mut f64) -> McStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = coder::rate_uniform(h as usize, w as usize, vocab as usize, img_h as usize, img_w as usize)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mc_savings_percent(bpp: f64, baseline: f64, out: *mut f64) -> McStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = coder::savings_percent(bpp, baseline)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(mc_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn encode_decode_through_the_c_surface() {
        unsafe {
            let mut m = ptr::null_mut();
            assert_eq!(mc_model_counting(16, &mut m), McStatus::Ok);
            let tokens: Vec<u32> = (0..64).map(|i| (i / 5) % 16).collect();
            let mut out = McBytes { data: ptr::null_mut(), len: 0 };
            let sched = c"quincunx";
            assert_eq!(mc_encode(m, tokens.as_ptr(), 8, 8, sched.as_ptr(), 0, 0, &mut out), McStatus::Ok);
            let mut info = McStreamInfo::default();
            assert_eq!(mc_stream_info(out.data, out.len, &mut info), McStatus::Ok);
            assert_eq!((info.h, info.w, info.vocab, info.groups_transmitted), (8, 8, 16, 5));
            let mut back = vec![0u32; 64];
            assert_eq!(mc_decode(m, out.data, out.len, back.as_mut_ptr(), 64), McStatus::Ok);
            assert_eq!(back, tokens);
            assert_eq!(mc_decode(m, out.data, out.len, back.as_mut_ptr(), 10), McStatus::BufferTooSmall);
            assert!(last_error().contains("64"));
            assert_eq!(mc_decode(m, out.data, out.len - 1, back.as_mut_ptr(), 64), McStatus::Truncated);
            mc_bytes_free(out);
            mc_model_free(m);
        }
    }

    #[test]
    fn bad_arguments_map_to_codes() {
        unsafe {
            let mut m = ptr::null_mut();
            assert_eq!(mc_model_uniform(1, &mut m), McStatus::InvalidArgument);
            assert!(m.is_null());
            assert_eq!(mc_model_uniform(8, ptr::null_mut()), McStatus::NullPointer);
            assert_eq!(mc_model_load(c"/nonexistent/model.ckpt".as_ptr(), &mut m), McStatus::Io);
            assert_eq!(mc_model_uniform(8, &mut m), McStatus::Ok);
            assert_eq!(last_error(), "");
            let tokens = [0u32; 16];
            let mut out = McBytes { data: ptr::null_mut(), len: 0 };
            assert_eq!(mc_encode(m, tokens.as_ptr(), 4, 4, c"spiral".as_ptr(), 0, 0, &mut out), McStatus::Parse);
            assert_eq!(mc_encode(m, tokens.as_ptr(), 4, 4, c"quincunx".as_ptr(), 9, 0, &mut out), McStatus::InvalidArgument);
            let mut r = 0.0;
            assert_eq!(mc_rate_uniform(8, 8, 128, 512, 512, &mut r), McStatus::Ok);
            assert_eq!(r, 0.001708984375);
            mc_model_free(m);
        }
    }
}
