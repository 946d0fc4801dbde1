//! C ABI over the attention-vig models and patch graphs.
//!
//! Every function returns an [`AvigStatus`]. On failure the message is
//! available from [`avig_last_error`] on the same thread until the next call.
//! Handles are opaque, owned by the caller, and released with the matching
//! `_free` function. Buffers are caller-allocated; tensors are row-major f64.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use attention_vig::graph::{build_knn, build_svga};
use attention_vig::heatmap::similarity_map;
use attention_vig::model::{count_flops, load_checkpoint, save_checkpoint, Model, ModelConfig};
use attention_vig::{Error, PatchGraph, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvigStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A caller-allocated output buffer was too small.
    BufferTooSmall = 3,
    Config = 4,
    InvalidInput = 5,
    Dimension = 6,
    Contract = 7,
    Format = 8,
    Io = 9,
    /// Internal failure; the message names the cause.
    Panic = 10,
}

/// Opaque model handle.
pub struct AvigModel(Model);

/// Opaque patch graph handle.
pub struct AvigGraph(PatchGraph);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(AvigStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config(_) => AvigStatus::Config,
            Error::InvalidInput(_) => AvigStatus::InvalidInput,
            Error::Dimension { .. } => AvigStatus::Dimension,
            Error::Contract(_) => AvigStatus::Contract,
            Error::Format { .. } => AvigStatus::Format,
            Error::Io { .. } => AvigStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AvigStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> AvigStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => AvigStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal error".into());
            set_error(msg);
            AvigStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(AvigStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(p: *mut T, what: &str, value: T) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

unsafe fn tensor_arg(p: *const f64, shape: &[usize], what: &str) -> Result<Tensor, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let len = shape.iter().product();
    Ok(Tensor::new(shape, std::slice::from_raw_parts(p, len).to_vec())?)
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, cap: usize, what: &str) -> Result<(), Failure> {
    if src.len() > cap {
        return Err(Failure(
            AvigStatus::BufferTooSmall,
            format!("`{what}` holds {cap} values, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(null(what));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn avig_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
/// Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn avig_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a freshly initialized model from a preset name (`S`, `M`, `B`, `Micro`).
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn avig_model_from_preset(preset: *const c_char, seed: u64, out: *mut *mut AvigModel) -> AvigStatus {
    guard(|| {
        let config = ModelConfig::from_preset(str_arg(preset, "preset")?)?;
        let model = Model::build(config, seed)?;
        write_out(out, "out", Box::into_raw(Box::new(AvigModel(model))))
    })
}

/// Loads a checkpoint written by `avig train` or [`avig_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn avig_model_load(path: *const c_char, out: *mut *mut AvigModel) -> AvigStatus {
    guard(|| {
        let model = load_checkpoint(str_arg(path, "path")?)?;
        write_out(out, "out", Box::into_raw(Box::new(AvigModel(model))))
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn avig_model_save(model: *const AvigModel, path: *const c_char) -> AvigStatus {
    guard(|| Ok(save_checkpoint(&ref_arg(model, "model")?.0, str_arg(path, "path")?)?))
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn avig_model_free(model: *mut AvigModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avig_model_num_params(model: *const AvigModel, out: *mut u64) -> AvigStatus {
    guard(|| write_out(out, "out", ref_arg(model, "model")?.0.num_params() as u64))
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avig_model_num_classes(model: *const AvigModel, out: *mut usize) -> AvigStatus {
    guard(|| write_out(out, "out", ref_arg(model, "model")?.0.config().num_classes))
}

/// Multiply-accumulates of one forward pass at `resolution × resolution`.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avig_model_flops(model: *const AvigModel, resolution: usize, out: *mut u64) -> AvigStatus {
    guard(|| write_out(out, "out", count_flops(ref_arg(model, "model")?.0.config(), resolution)?))
}

/// Inference-mode logits for `n` images of shape `[c, h, w]`, written as
/// `[n, num_classes]` into `logits`, which holds `logits_len` values.
///
/// # Safety
/// `images` must hold `n·c·h·w` values and `logits` `logits_len` values.
#[no_mangle]
pub unsafe extern "C" fn avig_model_predict(
    model: *const AvigModel,
    images: *const f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    logits: *mut f64,
    logits_len: usize,
) -> AvigStatus {
    guard(|| {
        let model = &ref_arg(model, "model")?.0;
        let x = tensor_arg(images, &[n, c, h, w], "images")?;
        let out = model.predict(&x)?;
        copy_out(out.data(), logits, logits_len, "logits")
    })
}

/// Query-key cosine similarity of patch `(row, col)` to every patch of the
/// first stage grid, for one `[c, h, w]` image. The grid extent is written to
/// `out_height`/`out_width` and the row-major values to `out`.
///
/// # Safety
/// `image` must hold `c·h·w` values, `out` `out_len` values, and both
/// extent pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn avig_model_heatmap(
    model: *const AvigModel,
    image: *const f64,
    c: usize,
    h: usize,
    w: usize,
    row: usize,
    col: usize,
    out: *mut f64,
    out_len: usize,
    out_height: *mut usize,
    out_width: *mut usize,
) -> AvigStatus {
    guard(|| {
        let model = &ref_arg(model, "model")?.0;
        let x = tensor_arg(image, &[1, c, h, w], "image")?;
        let map = similarity_map(model, &x, row, col)?;
        write_out(out_height, "out_height", map.height)?;
        write_out(out_width, "out_width", map.width)?;
        copy_out(&map.values, out, out_len, "out")
    })
}

/// Sparse vision graph on an `height × width` patch grid.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avig_graph_svga(height: usize, width: usize, out: *mut *mut AvigGraph) -> AvigStatus {
    guard(|| {
        let g = build_svga(height, width)?;
        write_out(out, "out", Box::into_raw(Box::new(AvigGraph(g))))
    })
}

/// `k` nearest neighbors of each of `n` feature rows of width `c`.
///
/// # Safety
/// `features` must hold `n·c` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avig_graph_knn(features: *const f64, n: usize, c: usize, k: usize, out: *mut *mut AvigGraph) -> AvigStatus {
    guard(|| {
        let g = build_knn(&tensor_arg(features, &[n, c], "features")?, k)?;
        write_out(out, "out", Box::into_raw(Box::new(AvigGraph(g))))
    })
}

/// # Safety
/// `graph` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avig_graph_node_count(graph: *const AvigGraph, out: *mut usize) -> AvigStatus {
    guard(|| write_out(out, "out", ref_arg(graph, "graph")?.0.node_count()))
}

/// Neighbors of `node` in order. `out_len` always receives the degree; if it
/// exceeds `cap` the call fails with `BufferTooSmall` and `buf` is untouched.
///
/// # Safety
/// `buf` must hold `cap` values; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avig_graph_neighbors(
    graph: *const AvigGraph,
    node: usize,
    buf: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> AvigStatus {
    guard(|| {
        let g = &ref_arg(graph, "graph")?.0;
        if node >= g.node_count() {
            return Err(Failure(
                AvigStatus::InvalidInput,
                format!("node {node} out of range for {} nodes", g.node_count()),
            ));
        }
        let nbrs = g.neighbors(node);
        write_out(out_len, "out_len", nbrs.len())?;
        copy_out(nbrs, buf, cap, "buf")
    })
}

/// Releases a graph. Null is ignored.
///
/// # Safety
/// `graph` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn avig_graph_free(graph: *mut AvigGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}
