//! C ABI over the convbn engine.
//!
//! Every fallible function returns a [`CbnStatus`]. On failure the message is
//! kept per thread and can be read with [`cbn_last_error_message`]. Objects
//! are opaque handles created by `*_new` / `*_load` / `*_forward` calls and
//! released with the matching `*_free`. Output handles are written only on
//! success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use convbn::graph::{self, BnMode, ExecOptions};
use convbn::ops::{BnParams, ConvGeometry, ConvParams};
use convbn::{io, ConvBnBlock, DType, Error, Graph, Mode, Saved, Shape, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CbnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Domain = 4,
    Mode = 5,
    Format = 6,
    Schema = 7,
    Unsupported = 8,
    Io = 9,
    NonFinite = 10,
    /// A Rust panic was caught at the boundary.
    Internal = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CbnDtype {
    F32 = 0,
    F64 = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CbnMode {
    Train = 0,
    Eval = 1,
    Tune = 2,
    Deploy = 3,
}

/// Dense tensor.
pub struct CbnTensor(Tensor);

/// One Conv+BN block.
pub struct CbnBlock(ConvBnBlock);

/// Tensors a block forward left for its backward.
pub struct CbnSaved(Saved);

/// Computation graph with its parameter store.
pub struct CbnGraph(Graph);

/// Gradients of one block backward. Absent gradients are null and need no
/// freeing.
#[repr(C)]
pub struct CbnBlockGrads {
    pub dx: *mut CbnTensor,
    pub dweight: *mut CbnTensor,
    pub dbias: *mut CbnTensor,
    pub dgamma: *mut CbnTensor,
    pub dbeta: *mut CbnTensor,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CbnStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::Shape(_) | Error::DegenerateBatch { .. } => CbnStatus::Shape,
        Error::Domain(_) => CbnStatus::Domain,
        Error::Mode(_) => CbnStatus::Mode,
        Error::Format { .. } | Error::Ingestion { .. } => CbnStatus::Format,
        Error::Schema { .. } | Error::Json(_) => CbnStatus::Schema,
        Error::UnsupportedRewrite(_) => CbnStatus::Unsupported,
        Error::Io(_) => CbnStatus::Io,
        Error::NonFinite(_) => CbnStatus::NonFinite,
        Error::Input(_) | Error::FootprintMismatch(_) => CbnStatus::InvalidArgument,
        Error::AtNode { source, .. } => status_of(source),
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Engine(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Fail {
        Fail::Engine(e)
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CbnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CbnStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            CbnStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            CbnStatus::InvalidArgument
        }
        Ok(Err(Fail::Engine(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            CbnStatus::Internal
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(slot: *mut *mut T, what: &'static str) -> Result<&'a mut *mut T, Fail> {
    slot.as_mut().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    let s = get(p, what)?;
    let s = CStr::from_ptr(s).to_str().map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn mode_of(m: CbnMode) -> Mode {
    match m {
        CbnMode::Train => Mode::Train,
        CbnMode::Eval => Mode::Eval,
        CbnMode::Tune => Mode::Tune,
        CbnMode::Deploy => Mode::Deploy,
    }
}

fn cmode(m: Mode) -> CbnMode {
    match m {
        Mode::Train => CbnMode::Train,
        Mode::Eval => CbnMode::Eval,
        Mode::Tune => CbnMode::Tune,
        Mode::Deploy => CbnMode::Deploy,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cbn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn cbn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

// ---- tensors ----

/// Creates a tensor from `numel` row-major values of the given shape. F32
/// tensors round the values to single precision.
///
/// # Safety
/// `dims` must point to `rank` values and `data` to `numel` values.
#[no_mangle]
pub unsafe extern "C" fn cbn_tensor_new(
    dtype: CbnDtype,
    dims: *const usize,
    rank: usize,
    data: *const f64,
    numel: usize,
    out_tensor: *mut *mut CbnTensor,
) -> CbnStatus {
    guard(|| {
        let slot = out(out_tensor, "out_tensor")?;
        let dims = slice(dims, rank, "dims")?;
        let data = slice(data, numel, "data")?;
        let dtype = match dtype {
            CbnDtype::F32 => DType::F32,
            CbnDtype::F64 => DType::F64,
        };
        let t = Tensor::new(dtype, Shape::new(dims.to_vec())?, data.to_vec())?;
        *slot = boxed(CbnTensor(t));
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn cbn_tensor_free(t: *mut CbnTensor) {
    free(t)
}

/// # Safety
/// `t` must be a live tensor handle; `out_dtype` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbn_tensor_dtype(t: *const CbnTensor, out_dtype: *mut CbnDtype) -> CbnStatus {
    guard(|| {
        let t = get(t, "tensor")?;
        *get_mut(out_dtype, "out_dtype")? = match t.0.dtype() {
            DType::F32 => CbnDtype::F32,
            DType::F64 => CbnDtype::F64,
        };
        Ok(())
    })
}

/// Number of elements; 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn cbn_tensor_numel(t: *const CbnTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.numel())
}

/// Rank; 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn cbn_tensor_rank(t: *const CbnTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.rank())
}

/// Copies the extents into `dims`, which holds `cap` values.
///
/// # Safety
/// `t` must be a live tensor handle and `dims` writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn cbn_tensor_dims(t: *const CbnTensor, dims: *mut usize, cap: usize) -> CbnStatus {
    guard(|| {
        let t = get(t, "tensor")?;
        let d = t.0.dims();
        if cap < d.len() {
            return Err(Fail::Arg(format!("dims buffer holds {cap}, rank is {}", d.len())));
        }
        if !d.is_empty() {
            get_mut(dims, "dims")?;
            std::slice::from_raw_parts_mut(dims, d.len()).copy_from_slice(d);
        }
        Ok(())
    })
}

/// Copies the values into `data`, which holds `cap` values.
///
/// # Safety
/// `t` must be a live tensor handle and `data` writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn cbn_tensor_read(t: *const CbnTensor, data: *mut f64, cap: usize) -> CbnStatus {
    guard(|| {
        let t = get(t, "tensor")?;
        let v = t.0.data();
        if cap < v.len() {
            return Err(Fail::Arg(format!("data buffer holds {cap}, tensor has {}", v.len())));
        }
        if !v.is_empty() {
            get_mut(data, "data")?;
            std::slice::from_raw_parts_mut(data, v.len()).copy_from_slice(v);
        }
        Ok(())
    })
}

// ---- blocks ----

/// Builds an Eval-mode block. `bias` may be null. Geometry arrays are
/// `{h, w}` pairs.
///
/// # Safety
/// Tensor arguments must be live handles (or null for `bias`); the arrays
/// must hold two values each.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cbn_block_new(
    weight: *const CbnTensor,
    bias: *const CbnTensor,
    gamma: *const CbnTensor,
    beta: *const CbnTensor,
    running_mean: *const CbnTensor,
    running_var: *const CbnTensor,
    stride: *const usize,
    padding: *const usize,
    eps: f64,
    momentum: f64,
    out_block: *mut *mut CbnBlock,
) -> CbnStatus {
    guard(|| {
        let slot = out(out_block, "out_block")?;
        let s = slice(stride, 2, "stride")?;
        let p = slice(padding, 2, "padding")?;
        let conv = ConvParams::new(
            get(weight, "weight")?.0.clone(),
            bias.as_ref().map(|b| b.0.clone()),
            ConvGeometry::new((s[0], s[1]), (p[0], p[1])),
        )?;
        let bn = BnParams {
            gamma: get(gamma, "gamma")?.0.clone(),
            beta: get(beta, "beta")?.0.clone(),
            running_mean: get(running_mean, "running_mean")?.0.clone(),
            running_var: get(running_var, "running_var")?.0.clone(),
            eps,
            momentum,
        };
        *slot = boxed(CbnBlock(ConvBnBlock::new(conv, bn)?));
        Ok(())
    })
}

/// # Safety
/// `b` must be null or a live block handle.
#[no_mangle]
pub unsafe extern "C" fn cbn_block_free(b: *mut CbnBlock) {
    free(b)
}

/// # Safety
/// `b` must be a live block handle.
#[no_mangle]
pub unsafe extern "C" fn cbn_block_set_mode(b: *mut CbnBlock, mode: CbnMode) -> CbnStatus {
    guard(|| Ok(get_mut(b, "block")?.0.set_mode(mode_of(mode))?))
}

/// # Safety
/// `b` must be a live block handle; `out_mode` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbn_block_mode(b: *const CbnBlock, out_mode: *mut CbnMode) -> CbnStatus {
    guard(|| {
        *get_mut(out_mode, "out_mode")? = cmode(get(b, "block")?.0.mode());
        Ok(())
    })
}

/// Per-channel `gamma / sqrt(running_var + eps)`. Fails in Deploy mode.
///
/// # Safety
/// `b` must be a live block handle.
#[no_mangle]
pub unsafe extern "C" fn cbn_block_scaling_coefficients(b: *const CbnBlock, out_tensor: *mut *mut CbnTensor) -> CbnStatus {
    guard(|| {
        let slot = out(out_tensor, "out_tensor")?;
        *slot = boxed(CbnTensor(get(b, "block")?.0.scaling_coefficients()?));
        Ok(())
    })
}

/// Forward pass in the block's mode. In Train mode the running statistics
/// are updated when `update_running` is nonzero. `out_saved` may be null when
/// no backward will follow.
///
/// # Safety
/// Handles must be live; `out_z` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbn_block_forward(
    b: *mut CbnBlock,
    x: *const CbnTensor,
    update_running: i32,
    out_z: *mut *mut CbnTensor,
    out_saved: *mut *mut CbnSaved,
) -> CbnStatus {
    guard(|| {
        let block = get_mut(b, "block")?;
        let z_slot = out(out_z, "out_z")?;
        let f = block.0.forward(&get(x, "x")?.0)?;
        if let (Some(update), true) = (f.running, update_running != 0) {
            block.0.apply_running_update(update)?;
        }
        *z_slot = boxed(CbnTensor(f.z));
        if let Some(s) = out_saved.as_mut() {
            *s = boxed(CbnSaved(f.saved));
        }
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a live saved handle.
#[no_mangle]
pub unsafe extern "C" fn cbn_saved_free(s: *mut CbnSaved) {
    free(s)
}

/// Number of saved elements, the backward memory footprint.
///
/// # Safety
/// `s` must be null or a live saved handle.
#[no_mangle]
pub unsafe extern "C" fn cbn_saved_elements(s: *const CbnSaved) -> usize {
    s.as_ref().map_or(0, |s| s.0.elements())
}

/// Backward pass for upstream gradient `dz`. Each non-null field of
/// `out_grads` must later be released with [`cbn_tensor_free`].
///
/// # Safety
/// Handles must be live; `out_grads` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbn_block_backward(
    b: *const CbnBlock,
    saved: *const CbnSaved,
    dz: *const CbnTensor,
    out_grads: *mut CbnBlockGrads,
) -> CbnStatus {
    guard(|| {
        let slot = get_mut(out_grads, "out_grads")?;
        let g = get(b, "block")?.0.backward(&get(saved, "saved")?.0, &get(dz, "dz")?.0)?;
        let opt = |t: Option<Tensor>| t.map_or(ptr::null_mut(), |t| boxed(CbnTensor(t)));
        *slot = CbnBlockGrads {
            dx: boxed(CbnTensor(g.dx)),
            dweight: boxed(CbnTensor(g.dweight)),
            dbias: opt(g.dbias),
            dgamma: opt(g.dgamma),
            dbeta: opt(g.dbeta),
        };
        Ok(())
    })
}

/// Frees every tensor in `grads` and nulls the fields.
///
/// # Safety
/// `grads` must be null or filled by [`cbn_block_backward`].
#[no_mangle]
pub unsafe extern "C" fn cbn_block_grads_free(grads: *mut CbnBlockGrads) {
    if let Some(g) = grads.as_mut() {
        for p in [&mut g.dx, &mut g.dweight, &mut g.dbias, &mut g.dgamma, &mut g.dbeta] {
            free(*p);
            *p = ptr::null_mut();
        }
    }
}

// ---- graphs ----

/// Loads a graph JSON. `params_path` may be null, in which case the file the
/// JSON names is used.
///
/// # Safety
/// Strings must be NUL-terminated; `out_graph` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbn_graph_load(
    json_path: *const c_char,
    params_path: *const c_char,
    out_graph: *mut *mut CbnGraph,
) -> CbnStatus {
    guard(|| {
        let slot = out(out_graph, "out_graph")?;
        let mut g = Graph::load(path(json_path, "json_path")?)?;
        if !params_path.is_null() {
            g.attach_params(io::read(path(params_path, "params_path")?)?)?;
        }
        g.check_params()?;
        *slot = boxed(CbnGraph(g));
        Ok(())
    })
}

/// Writes the graph JSON and its parameters (`params_name`, relative to the
/// JSON's directory).
///
/// # Safety
/// Handles and strings must be valid.
#[no_mangle]
pub unsafe extern "C" fn cbn_graph_save(g: *const CbnGraph, json_path: *const c_char, params_name: *const c_char) -> CbnStatus {
    guard(|| {
        let g = get(g, "graph")?;
        let name = path(params_name, "params_name")?;
        let name = name.to_str().expect("checked UTF-8");
        Ok(g.0.save(path(json_path, "json_path")?, Some(name))?)
    })
}

/// # Safety
/// `g` must be null or a live graph handle.
#[no_mangle]
pub unsafe extern "C" fn cbn_graph_free(g: *mut CbnGraph) {
    free(g)
}

/// Fuses every eligible Conv->BN pair into `mode` (Tune or Deploy) and
/// reports how many were rewritten. `out_rewritten` may be null.
///
/// # Safety
/// `g` must be a live graph handle.
#[no_mangle]
pub unsafe extern "C" fn cbn_graph_turn_on(g: *mut CbnGraph, mode: CbnMode, out_rewritten: *mut usize) -> CbnStatus {
    guard(|| {
        let report = graph::turn_on(&mut get_mut(g, "graph")?.0, mode_of(mode))?;
        if let Some(n) = out_rewritten.as_mut() {
            *n = report.rewritten.len();
        }
        Ok(())
    })
}

/// Undoes every rewrite. `out_reverted` may be null.
///
/// # Safety
/// `g` must be a live graph handle.
#[no_mangle]
pub unsafe extern "C" fn cbn_graph_revert(g: *mut CbnGraph, out_reverted: *mut usize) -> CbnStatus {
    guard(|| {
        let report = graph::revert(&mut get_mut(g, "graph")?.0)?;
        if let Some(n) = out_reverted.as_mut() {
            *n = report.reverted.len();
        }
        Ok(())
    })
}

/// Runs the graph. Unfused BN nodes use batch statistics when `train_bn` is
/// nonzero and running statistics otherwise.
///
/// # Safety
/// Handles must be live; `out_y` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbn_graph_forward(
    g: *const CbnGraph,
    x: *const CbnTensor,
    train_bn: i32,
    out_y: *mut *mut CbnTensor,
) -> CbnStatus {
    guard(|| {
        let slot = out(out_y, "out_y")?;
        let bn_mode = if train_bn != 0 { BnMode::Train } else { BnMode::Eval };
        let fp = graph::forward(&get(g, "graph")?.0, &get(x, "x")?.0, &ExecOptions { bn_mode })?;
        *slot = boxed(CbnTensor(fp.output));
        Ok(())
    })
}
