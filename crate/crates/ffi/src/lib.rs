//! C ABI over the core library: opaque handles, integer error codes, and a
//! thread-local last-error message. Trajectories cross the boundary as
//! JSON strings so callers do not need the Rust structs.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use bdlm_core::decoder::{DecodeMode, DecodePolicy};
use bdlm_core::model::ModelParams;
use bdlm_core::service::{Server, ServiceState};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdlmStatus {
    BdlmOk = 0,
    /// A required pointer argument was null.
    BdlmNullArgument = 1,
    /// A string argument was not valid UTF-8.
    BdlmInvalidUtf8 = 2,
    /// The operation itself failed; see bdlm_last_error().
    BdlmFailed = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) -> BdlmStatus {
    let c = CString::new(msg.to_string()).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
    BdlmStatus::BdlmFailed
}

/// Message of the most recent failure on this thread. Valid until the next
/// failing call; never null.
#[no_mangle]
pub extern "C" fn bdlm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opaque model handle.
pub struct BdlmModel {
    params: ModelParams,
}

/// Opaque handle to a running rollout service.
pub struct BdlmServer {
    server: Server,
}

unsafe fn utf8_arg<'a>(ptr: *const c_char) -> Result<&'a str, BdlmStatus> {
    if ptr.is_null() {
        return Err(BdlmStatus::BdlmNullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| BdlmStatus::BdlmInvalidUtf8)
}

/// Loads a checkpoint into a new model handle.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bdlm_model_load(path: *const c_char, out: *mut *mut BdlmModel) -> BdlmStatus {
    if out.is_null() {
        return BdlmStatus::BdlmNullArgument;
    }
    let path = match utf8_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match bdlm_core::model::load_checkpoint(Path::new(path)) {
        Ok(params) => {
            *out = Box::into_raw(Box::new(BdlmModel { params }));
            BdlmStatus::BdlmOk
        }
        Err(e) => set_error(e),
    }
}

/// Saves the model to a checkpoint file.
///
/// # Safety
/// `model` must come from bdlm_model_load; `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn bdlm_model_save(model: *const BdlmModel, path: *const c_char) -> BdlmStatus {
    let Some(model) = model.as_ref() else {
        return BdlmStatus::BdlmNullArgument;
    };
    let path = match utf8_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match bdlm_core::model::save_checkpoint(&model.params, Path::new(path)) {
        Ok(()) => BdlmStatus::BdlmOk,
        Err(e) => set_error(e),
    }
}

/// Frees a model handle. Null is a no-op.
///
/// # Safety
/// `model` must come from bdlm_model_load and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bdlm_model_free(model: *mut BdlmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Generates from a token prompt and returns the trajectory as a JSON
/// string via `out_json`; free it with bdlm_string_free. `dynamic_mode`
/// 0 decodes one token per step, nonzero uses threshold decoding.
///
/// # Safety
/// `prompt` must point to `prompt_len` readable u32 values; `out_json`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bdlm_generate(
    model: *const BdlmModel,
    prompt: *const u32,
    prompt_len: usize,
    dynamic_mode: i32,
    threshold: f32,
    temperature: f32,
    max_new_tokens: usize,
    seed: u64,
    out_json: *mut *mut c_char,
) -> BdlmStatus {
    let Some(model) = model.as_ref() else {
        return BdlmStatus::BdlmNullArgument;
    };
    if prompt.is_null() || out_json.is_null() {
        return BdlmStatus::BdlmNullArgument;
    }
    let prompt = std::slice::from_raw_parts(prompt, prompt_len);
    let policy = DecodePolicy {
        mode: if dynamic_mode == 0 { DecodeMode::Static } else { DecodeMode::Dynamic },
        threshold,
        temperature,
        max_new_tokens,
        seed,
    };
    let traj = match bdlm_core::decoder::generate_seeded(&model.params, prompt, &policy) {
        Ok(t) => t,
        Err(e) => return set_error(e),
    };
    let json = match serde_json::to_string(&traj) {
        Ok(j) => j,
        Err(e) => return set_error(e),
    };
    match CString::new(json) {
        Ok(c) => {
            *out_json = c.into_raw();
            BdlmStatus::BdlmOk
        }
        Err(e) => set_error(e),
    }
}

/// Frees a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from a bdlm_* call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bdlm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Starts a rollout service for the checkpoint on `addr`
/// (e.g. "127.0.0.1:7431"; port 0 picks one). The bound address is
/// returned via `out_addr` (free with bdlm_string_free).
///
/// # Safety
/// All pointer arguments must be valid; strings must be C strings.
#[no_mangle]
pub unsafe extern "C" fn bdlm_server_start(
    checkpoint: *const c_char,
    addr: *const c_char,
    out_server: *mut *mut BdlmServer,
    out_addr: *mut *mut c_char,
) -> BdlmStatus {
    if out_server.is_null() || out_addr.is_null() {
        return BdlmStatus::BdlmNullArgument;
    }
    let checkpoint = match utf8_arg(checkpoint) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let addr = match utf8_arg(addr) {
        Ok(a) => a,
        Err(s) => return s,
    };
    let state = match ServiceState::load(Path::new(checkpoint)) {
        Ok(s) => std::sync::Arc::new(s),
        Err(e) => return set_error(e),
    };
    let server = match Server::spawn(state, addr) {
        Ok(s) => s,
        Err(e) => return set_error(e),
    };
    let bound = server.addr.to_string();
    match CString::new(bound) {
        Ok(c) => {
            *out_addr = c.into_raw();
            *out_server = Box::into_raw(Box::new(BdlmServer { server }));
            BdlmStatus::BdlmOk
        }
        Err(e) => set_error(e),
    }
}

/// Stops the service and frees the handle. Null is a no-op.
///
/// # Safety
/// `server` must come from bdlm_server_start and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bdlm_server_stop(server: *mut BdlmServer) {
    if !server.is_null() {
        let mut s = Box::from_raw(server);
        s.server.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bdlm_core::model::{init_params, save_checkpoint, ModelConfig};
    use std::ffi::CString;

    fn tmp_ckpt(name: &str) -> std::path::PathBuf {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 64,
            block_size: 4,
            ..ModelConfig::toy()
        };
        let params = init_params(&cfg).unwrap();
        let path = std::env::temp_dir().join(name);
        save_checkpoint(&params, &path).unwrap();
        path
    }

    #[test]
    fn load_generate_free_round_trip() {
        let path = tmp_ckpt("bdlm_ffi_test.ckpt");
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        let mut model: *mut BdlmModel = std::ptr::null_mut();
        unsafe {
            assert_eq!(bdlm_model_load(cpath.as_ptr(), &mut model), BdlmStatus::BdlmOk);
            let prompt: Vec<u32> = vec![14, 1, 10, 2, 11]; // BOS 1 + 2 =
            let mut json: *mut c_char = std::ptr::null_mut();
            let st = bdlm_generate(model, prompt.as_ptr(), prompt.len(), 1, 0.9, 1.0, 8, 0, &mut json);
            assert_eq!(st, BdlmStatus::BdlmOk);
            let text = CStr::from_ptr(json).to_str().unwrap();
            assert!(text.contains("\"output\""));
            bdlm_string_free(json);
            bdlm_model_free(model);
        }
    }

    #[test]
    fn null_and_missing_path_report_errors() {
        unsafe {
            let mut model: *mut BdlmModel = std::ptr::null_mut();
            assert_eq!(
                bdlm_model_load(std::ptr::null(), &mut model),
                BdlmStatus::BdlmNullArgument
            );
            let bad = CString::new("/nonexistent/nope.ckpt").unwrap();
            assert_eq!(bdlm_model_load(bad.as_ptr(), &mut model), BdlmStatus::BdlmFailed);
            let msg = CStr::from_ptr(bdlm_last_error()).to_str().unwrap();
            assert!(!msg.is_empty());
        }
    }

    #[test]
    fn server_starts_and_stops_via_ffi() {
        let path = tmp_ckpt("bdlm_ffi_server.ckpt");
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        let caddr = CString::new("127.0.0.1:0").unwrap();
        let mut server: *mut BdlmServer = std::ptr::null_mut();
        let mut bound: *mut c_char = std::ptr::null_mut();
        unsafe {
            let st = bdlm_server_start(cpath.as_ptr(), caddr.as_ptr(), &mut server, &mut bound);
            assert_eq!(st, BdlmStatus::BdlmOk);
            let addr = CStr::from_ptr(bound).to_str().unwrap().to_string();
            let mut client = bdlm_core::service::Client::connect(&addr).unwrap();
            assert_eq!(client.version().unwrap().version, 1);
            bdlm_string_free(bound);
            bdlm_server_stop(server);
        }
    }
}
