//! C ABI over the `pgasr` library.
//!
//! Graphs and models are opaque heap handles created by `*_new`/`*_load` and
//! released with the matching `*_free`. Every fallible call returns a
//! [`PgasrStatus`]; on failure, [`pgasr_last_error_message`] describes the
//! most recent error on the calling thread. Tensors are passed as flat,
//! row-major buffers whose lengths follow from the documented shapes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use pgasr::autodiff::Tensor;
use pgasr::datasets::{Standardizer, CHANNELS};
use pgasr::error::Error;
use pgasr::evaluation::compute_metrics;
use pgasr::grid_graph::{GraphOperator, Neighborhood, UrbanGraph};
use pgasr::model::{load_checkpoint, ModelState};
use pgasr::reweighting::{
    combine_scores, model_uncertainty, normalize_weights, physical_consistency, Aggregation,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgasrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    NonFinite = 5,
    Internal = 6,
}

/// Opaque urban flow graph.
pub struct PgasrGraph {
    graph: UrbanGraph,
}

/// Opaque trained model with its standardization constants.
pub struct PgasrModel {
    state: ModelState,
    standardizer: Standardizer,
}

/// Error metrics in flow units; MAPE in percent, NaN when no target passed the mask.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PgasrMetrics {
    pub mae_in: f64,
    pub mae_out: f64,
    pub mape_in: f64,
    pub mape_out: f64,
    pub n_eval_points: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> PgasrStatus {
    match err {
        Error::Io(_) => PgasrStatus::Io,
        Error::Checkpoint { .. } => PgasrStatus::Checkpoint,
        Error::NonFinite(_) => PgasrStatus::NonFinite,
        Error::Pipeline(_) | Error::Divergence { .. } | Error::Json(_) | Error::Csv(_) => {
            PgasrStatus::Internal
        }
        _ => PgasrStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> PgasrStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let (status, msg) = match outcome {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            return PgasrStatus::Ok;
        }
        Ok(Err(Failure::Null(what))) => (PgasrStatus::NullPointer, format!("{what} is null")),
        Ok(Err(Failure::Invalid(msg))) => (PgasrStatus::InvalidArgument, msg),
        Ok(Err(Failure::Lib(e))) => (status_of(&e), e.to_string()),
        Err(_) => (PgasrStatus::Internal, "internal panic".to_string()),
    };
    set_error(msg);
    status
}

fn non_null<T>(p: *const T, what: &'static str) -> FfiResult<*const T> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

/// Borrows `len` elements; a zero length accepts any pointer.
unsafe fn input<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    Ok(slice::from_raw_parts(non_null(p, what)?, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p as *const T, what)?;
    Ok(slice::from_raw_parts_mut(p, len))
}

fn checked_len(parts: &[usize]) -> FfiResult<usize> {
    parts
        .iter()
        .try_fold(1usize, |acc, &p| acc.checked_mul(p))
        .ok_or_else(|| Failure::Invalid("buffer size overflows".into()))
}

/// Message of the last failed call on this thread, or null after a success.
///
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn pgasr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates an `height × width` grid graph with 4- or 8-connectivity.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn pgasr_graph_new_grid(
    height: usize,
    width: usize,
    neighbors: u32,
    out: *mut *mut PgasrGraph,
) -> PgasrStatus {
    guard(|| {
        non_null(out as *const _, "out")?;
        let hood = match neighbors {
            4 => Neighborhood::Four,
            8 => Neighborhood::Eight,
            n => {
                return Err(Failure::Invalid(format!(
                    "neighbors must be 4 or 8, got {n}"
                )))
            }
        };
        let graph = UrbanGraph::grid(height, width, hood)?;
        *out = Box::into_raw(Box::new(PgasrGraph { graph }));
        Ok(())
    })
}

/// Releases a graph; null is ignored.
///
/// # Safety
/// `graph` must come from [`pgasr_graph_new_grid`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pgasr_graph_free(graph: *mut PgasrGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Number of regions `M`, or 0 for a null handle.
///
/// # Safety
/// `graph` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgasr_graph_num_nodes(graph: *const PgasrGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.graph.num_nodes())
}

/// Softmax over `n` scores plus `1/n`, written to `out`.
///
/// # Safety
/// `eps` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn pgasr_normalize_weights(
    eps: *const f64,
    n: usize,
    out: *mut f64,
) -> PgasrStatus {
    guard(|| {
        let eps = input(eps, n, "eps")?;
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scores".into()).into());
        }
        output(out, n, "out")?.copy_from_slice(&normalize_weights(eps));
        Ok(())
    })
}

/// `alpha·u + beta·c` elementwise over `n` scores.
///
/// # Safety
/// `u_norm`, `c_norm` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn pgasr_combine_scores(
    u_norm: *const f64,
    c_norm: *const f64,
    n: usize,
    alpha: f64,
    beta: f64,
    out: *mut f64,
) -> PgasrStatus {
    guard(|| {
        let u = input(u_norm, n, "u_norm")?;
        let c = input(c_norm, n, "c_norm")?;
        output(out, n, "out")?.copy_from_slice(&combine_scores(u, c, alpha, beta));
        Ok(())
    })
}

/// Consistency score per sample from `[batch, M, 2]` predictions and last steps.
///
/// `aggregation` is 0 for the row-normalized adjacency and 1 for the binary one.
///
/// # Safety
/// `y_pred` and `x_last` must hold `batch·M·2` doubles and `out` `batch` doubles.
#[no_mangle]
pub unsafe extern "C" fn pgasr_physical_consistency(
    graph: *const PgasrGraph,
    y_pred: *const f64,
    x_last: *const f64,
    batch: usize,
    aggregation: u32,
    out: *mut f64,
) -> PgasrStatus {
    guard(|| {
        let graph = &(*non_null(graph, "graph")?).graph;
        let agg = match aggregation {
            0 => Aggregation::RowNormalized,
            1 => Aggregation::Binary,
            a => {
                return Err(Failure::Invalid(format!(
                    "aggregation must be 0 or 1, got {a}"
                )))
            }
        };
        let m = graph.num_nodes();
        let len = checked_len(&[batch, m, CHANNELS])?;
        let shape = vec![batch, m, CHANNELS];
        let y = Tensor::new(shape.clone(), input(y_pred, len, "y_pred")?.to_vec());
        let x = Tensor::new(shape, input(x_last, len, "x_last")?.to_vec());
        let c = physical_consistency(&y, &x, agg.matrix(graph))?;
        output(out, batch, "out")?.copy_from_slice(&c);
        Ok(())
    })
}

/// MC-dropout variance per sample from `k` stacked passes of `batch × per_sample` values.
///
/// # Safety
/// `stack` must hold `k·batch·per_sample` doubles and `out` `batch` doubles.
#[no_mangle]
pub unsafe extern "C" fn pgasr_model_uncertainty(
    stack: *const f64,
    k: usize,
    batch: usize,
    per_sample: usize,
    out: *mut f64,
) -> PgasrStatus {
    guard(|| {
        let pass = checked_len(&[batch, per_sample])?;
        let data = input(stack, checked_len(&[k, pass])?, "stack")?;
        let passes: Vec<Tensor<f64>> = (0..k)
            .map(|i| {
                Tensor::new(
                    vec![batch, per_sample],
                    data[i * pass..(i + 1) * pass].to_vec(),
                )
            })
            .collect();
        let u = model_uncertainty(&passes)?;
        output(out, batch, "out")?.copy_from_slice(&u);
        Ok(())
    })
}

/// MAE and masked MAPE over `n_points` `[inflow, outflow]` pairs.
///
/// # Safety
/// `y_true` and `y_pred` must hold `2·n_points` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgasr_compute_metrics(
    y_true: *const f64,
    y_pred: *const f64,
    n_points: usize,
    mask_threshold: f64,
    out: *mut PgasrMetrics,
) -> PgasrStatus {
    guard(|| {
        let out = output(out, 1, "out")?;
        let len = checked_len(&[n_points, CHANNELS])?;
        let t = Tensor::new(
            vec![n_points, CHANNELS],
            input(y_true, len, "y_true")?.to_vec(),
        );
        let p = Tensor::new(
            vec![n_points, CHANNELS],
            input(y_pred, len, "y_pred")?.to_vec(),
        );
        let m = compute_metrics(&t, &p, mask_threshold)?;
        out[0] = PgasrMetrics {
            mae_in: m.mae_in,
            mae_out: m.mae_out,
            mape_in: m.mape_in.unwrap_or(f64::NAN),
            mape_out: m.mape_out.unwrap_or(f64::NAN),
            n_eval_points: m.n_eval_points,
        };
        Ok(())
    })
}

/// Loads a checkpoint written by the training pipeline.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgasr_model_load(
    path: *const c_char,
    out: *mut *mut PgasrModel,
) -> PgasrStatus {
    guard(|| {
        non_null(out as *const _, "out")?;
        let path = CStr::from_ptr(non_null(path, "path")?)
            .to_str()
            .map_err(|_| Failure::Invalid("path is not valid UTF-8".into()))?;
        let (state, meta) = load_checkpoint(Path::new(path))?;
        let standardizer = meta.standardizer.ok_or_else(|| {
            Failure::Invalid("checkpoint carries no standardization constants".into())
        })?;
        *out = Box::into_raw(Box::new(PgasrModel {
            state,
            standardizer,
        }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`pgasr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pgasr_model_free(model: *mut PgasrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input window length `T_in` the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgasr_model_input_len(model: *const PgasrModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.input_len)
}

/// Next-step flows `[batch, M, 2]` from flow windows `[batch, T_in, M, 2]`, both in flow units.
///
/// # Safety
/// `x` must hold `batch·T_in·M·2` floats and `out` `batch·M·2` floats.
#[no_mangle]
pub unsafe extern "C" fn pgasr_model_predict(
    model: *const PgasrModel,
    graph: *const PgasrGraph,
    x: *const f32,
    batch: usize,
    out: *mut f32,
) -> PgasrStatus {
    guard(|| {
        let model = &*non_null(model, "model")?;
        let graph = &(*non_null(graph, "graph")?).graph;
        let m = graph.num_nodes();
        if m != model.state.num_nodes {
            return Err(Failure::Invalid(format!(
                "graph has {m} nodes but the model was trained on {}",
                model.state.num_nodes
            )));
        }
        let t = model.state.input_len;
        let len = checked_len(&[batch, t, m, CHANNELS])?;
        let raw = Tensor::new(vec![batch, t, m, CHANNELS], input(x, len, "x")?.to_vec());
        let cfg = &model.state.config;
        let op = GraphOperator::new(graph, cfg.chebyshev_order, cfg.lambda_max)?;
        let y = model
            .state
            .predict(&op, &model.standardizer.standardize(&raw))?;
        let y = model.standardizer.destandardize(&y);
        output(out, checked_len(&[batch, m, CHANNELS])?, "out")?.copy_from_slice(y.data());
        Ok(())
    })
}
