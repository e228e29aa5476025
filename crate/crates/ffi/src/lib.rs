//! C interface to the FLOPs cost model, the Pareto frontier and the pipeline
//! simulator.
//!
//! Every fallible function returns an [`LpStatus`]. On failure a message is
//! kept per thread and can be read with [`lp_last_error_message`] until the
//! next failing call on that thread. Objects crossing the boundary are opaque
//! handles owned by the caller and released with their `_free` function.
//! Panics never unwind into C; they are reported as [`LpStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use localpar::flops::{self, CostModelConstants, ModelId};
use localpar::pareto;
use localpar::pipesim::{self, PipelineConfig, PipelineMode, SimReport};
use localpar::Scheme;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Runtime = 3,
    Panic = 4,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpMethod {
    Backprop = 0,
    Greedy = 1,
    Overlapping = 2,
    /// Uses the `k` argument as the number of blocks.
    Chunked = 3,
    /// Uses the `k` argument as the number of trained layers.
    LastK = 4,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpPipelineMode {
    PipelinedBackprop = 0,
    ChunkedLocal = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LpCostConstants {
    pub layers: u64,
    pub forward_cost: f64,
    pub aux_cost: f64,
    pub backward_multiplier: f64,
    /// Ignored unless `has_parameters` is true.
    pub parameters: u64,
    pub has_parameters: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LpMethodCost {
    pub cost_per_example: f64,
    pub cost: f64,
    pub time: f64,
    pub parallelism: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LpCommunicationTotals {
    pub local_total: f64,
    pub backprop_total: f64,
}

/// Opaque pipeline configuration.
pub struct LpPipeline(PipelineConfig);

/// Opaque simulation result.
pub struct LpSimReport(SimReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn guard(f: impl FnOnce() -> Result<(), (LpStatus, String)>) -> LpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LpStatus::Panic
        }
    }
}

fn invalid(e: impl ToString) -> (LpStatus, String) {
    (LpStatus::InvalidArgument, e.to_string())
}

fn null(name: &str) -> (LpStatus, String) {
    (LpStatus::NullPointer, format!("`{name}` is null"))
}

fn to_constants(c: &LpCostConstants) -> CostModelConstants {
    CostModelConstants {
        layers: c.layers as usize,
        forward_cost: c.forward_cost,
        aux_cost: c.aux_cost,
        backward_multiplier: c.backward_multiplier,
        parameters: c.has_parameters.then_some(c.parameters),
    }
}

fn from_constants(c: &CostModelConstants) -> LpCostConstants {
    LpCostConstants {
        layers: c.layers as u64,
        forward_cost: c.forward_cost,
        aux_cost: c.aux_cost,
        backward_multiplier: c.backward_multiplier,
        parameters: c.parameters.unwrap_or(0),
        has_parameters: c.parameters.is_some(),
    }
}

fn scheme(method: LpMethod, k: u64) -> Scheme {
    match method {
        LpMethod::Backprop => Scheme::Backprop,
        LpMethod::Greedy => Scheme::Greedy,
        LpMethod::Overlapping => Scheme::Overlapping,
        LpMethod::Chunked => Scheme::Chunked(k as usize),
        LpMethod::LastK => Scheme::LastK(k as usize),
    }
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Published constants of a named model (`mlp4096`, `resnet18`, ...).
///
/// # Safety
/// `model` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_registry(model: *const c_char, out: *mut LpCostConstants) -> LpStatus {
    guard(|| {
        if model.is_null() {
            return Err(null("model"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let name = CStr::from_ptr(model).to_str().map_err(invalid)?;
        let id: ModelId = name.parse().map_err(invalid)?;
        *out = from_constants(&flops::registry(id));
        Ok(())
    })
}

/// Constants of a dense ReLU network with `layers` hidden layers of width
/// `hidden`.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_mlp_constants(
    hidden: u64,
    layers: u64,
    input: u64,
    classes: u64,
    out: *mut LpCostConstants,
) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if hidden == 0 || layers == 0 || input == 0 || classes == 0 {
            return Err(invalid("dimensions must be positive"));
        }
        let c = flops::mlp_constants(hidden as usize, layers as usize, input as usize, classes as usize);
        *out = from_constants(&c);
        Ok(())
    })
}

/// Total FLOPs and sequential FLOPs of `steps` updates at `batch`.
///
/// # Safety
/// `constants` must point to a valid struct and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_method_cost(
    constants: *const LpCostConstants,
    method: LpMethod,
    k: u64,
    batch: u64,
    steps: u64,
    out: *mut LpMethodCost,
) -> LpStatus {
    guard(|| {
        if constants.is_null() {
            return Err(null("constants"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let c = to_constants(&*constants);
        let m = flops::method_cost(&c, scheme(method, k), batch as usize, steps as usize).map_err(invalid)?;
        *out = LpMethodCost {
            cost_per_example: m.cost_per_example,
            cost: m.cost,
            time: m.time,
            parallelism: m.parallelism,
        };
        Ok(())
    })
}

/// Writes the indices of the non-dominated `(cost, time)` points, ordered by
/// time, to `out_indices` and their count to `out_len`. `out_indices` must
/// have room for `n` entries.
///
/// # Safety
/// `costs` and `times` must point to `n` readable doubles, `out_indices` to
/// `n` writable entries and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_pareto_frontier(
    costs: *const f64,
    times: *const f64,
    n: usize,
    out_indices: *mut usize,
    out_len: *mut usize,
) -> LpStatus {
    guard(|| {
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        if n > 0 && (costs.is_null() || times.is_null() || out_indices.is_null()) {
            return Err(null("costs, times or out_indices"));
        }
        let points: Vec<(f64, f64)> = if n == 0 {
            Vec::new()
        } else {
            let c = std::slice::from_raw_parts(costs, n);
            let t = std::slice::from_raw_parts(times, n);
            c.iter().copied().zip(t.iter().copied()).collect()
        };
        if points.iter().any(|(c, t)| c.is_nan() || t.is_nan()) {
            return Err(invalid("NaN cost or time"));
        }
        let idx = pareto::frontier_indices(&points);
        for (i, &v) in idx.iter().enumerate() {
            *out_indices.add(i) = v;
        }
        *out_len = idx.len();
        Ok(())
    })
}

/// Pipeline with equal per-stage costs and unit byte sizes.
///
/// # Safety
/// `out` must be a writable pointer; the handle must be released with
/// [`lp_pipeline_free`].
#[no_mangle]
pub unsafe extern "C" fn lp_pipeline_uniform(
    mode: LpPipelineMode,
    stages: u64,
    microbatches: u64,
    forward: u64,
    backward: u64,
    aux: u64,
    out: *mut *mut LpPipeline,
) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mode = match mode {
            LpPipelineMode::PipelinedBackprop => PipelineMode::PipelinedBackprop,
            LpPipelineMode::ChunkedLocal => PipelineMode::ChunkedLocal,
        };
        let cfg = PipelineConfig::uniform(mode, stages as usize, microbatches as usize, forward, backward, aux);
        cfg.validate().map_err(invalid)?;
        *out = Box::into_raw(Box::new(LpPipeline(cfg)));
        Ok(())
    })
}

/// Parses a pipeline from TOML text.
///
/// # Safety
/// `toml` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lp_pipeline_from_toml(toml: *const c_char, out: *mut *mut LpPipeline) -> LpStatus {
    guard(|| {
        if toml.is_null() {
            return Err(null("toml"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(toml).to_str().map_err(invalid)?;
        let cfg = PipelineConfig::from_toml(text).map_err(invalid)?;
        *out = Box::into_raw(Box::new(LpPipeline(cfg)));
        Ok(())
    })
}

/// Sets the number of minibatches (backprop) or steps (local) to simulate.
///
/// # Safety
/// `pipeline` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_pipeline_set_steps(pipeline: *mut LpPipeline, steps: u64) -> LpStatus {
    guard(|| {
        let p = pipeline.as_mut().ok_or_else(|| null("pipeline"))?;
        if steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        p.0.steps = steps as usize;
        Ok(())
    })
}

/// Replaces the bytes crossing each of the `n = stages - 1` boundaries.
///
/// # Safety
/// `pipeline` must be a live handle and `bytes` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn lp_pipeline_set_boundary_bytes(
    pipeline: *mut LpPipeline,
    bytes: *const f64,
    n: usize,
) -> LpStatus {
    guard(|| {
        let p = pipeline.as_mut().ok_or_else(|| null("pipeline"))?;
        if n + 1 != p.0.num_stages {
            return Err(invalid(format!("expected {} boundaries", p.0.num_stages - 1)));
        }
        p.0.boundary_activation_bytes = if n == 0 {
            Vec::new()
        } else if bytes.is_null() {
            return Err(null("bytes"));
        } else {
            std::slice::from_raw_parts(bytes, n).to_vec()
        };
        Ok(())
    })
}

/// # Safety
/// `pipeline` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_pipeline_free(pipeline: *mut LpPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Runs the simulation.
///
/// # Safety
/// `pipeline` must be a live handle and `out` writable; the report must be
/// released with [`lp_report_free`].
#[no_mangle]
pub unsafe extern "C" fn lp_simulate(pipeline: *const LpPipeline, out: *mut *mut LpSimReport) -> LpStatus {
    guard(|| {
        let p = pipeline.as_ref().ok_or_else(|| null("pipeline"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let report = pipesim::simulate(&p.0).map_err(|e| (LpStatus::Runtime, e.to_string()))?;
        *out = Box::into_raw(Box::new(LpSimReport(report)));
        Ok(())
    })
}

/// Makespan in cycles, or 0 for a null handle.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_report_total_cycles(report: *const LpSimReport) -> u64 {
    report.as_ref().map_or(0, |r| r.0.total_cycles)
}

/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_report_num_stages(report: *const LpSimReport) -> u64 {
    report.as_ref().map_or(0, |r| r.0.num_stages as u64)
}

/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_report_steady_state_fraction(report: *const LpSimReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.0.steady_state_fraction)
}

/// Busy fraction of one stage.
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lp_report_stage_utilization(report: *const LpSimReport, stage: u64, out: *mut f64) -> LpStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = *r
            .0
            .utilization
            .get(stage as usize)
            .ok_or_else(|| invalid(format!("stage {stage} out of range")))?;
        Ok(())
    })
}

/// Estimated memory of one stage in the configured byte unit.
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lp_report_stage_memory(report: *const LpSimReport, stage: u64, out: *mut f64) -> LpStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = *r
            .0
            .memory_bytes
            .get(stage as usize)
            .ok_or_else(|| invalid(format!("stage {stage} out of range")))?;
        Ok(())
    })
}

/// The report as a JSON string, or null on failure. Release with
/// [`lp_string_free`].
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_report_to_json(report: *const LpSimReport) -> *mut c_char {
    let Some(r) = report.as_ref() else {
        set_error("`report` is null");
        return ptr::null_mut();
    };
    match serde_json::to_string(&r.0).ok().and_then(|s| CString::new(s).ok()) {
        Some(s) => s.into_raw(),
        None => {
            set_error("report serialization failed");
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_report_free(report: *mut LpSimReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Total bytes moved (sent plus received, summed over stages) for
/// `microbatches` microbatches under both modes.
///
/// # Safety
/// `boundary_bytes` must point to `n` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lp_communication_totals(
    boundary_bytes: *const f64,
    n: usize,
    microbatches: u64,
    out: *mut LpCommunicationTotals,
) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = if n == 0 {
            &[][..]
        } else if boundary_bytes.is_null() {
            return Err(null("boundary_bytes"));
        } else {
            std::slice::from_raw_parts(boundary_bytes, n)
        };
        let r = pipesim::communication_report(bytes, microbatches as usize);
        *out = LpCommunicationTotals {
            local_total: r.local.total(),
            backprop_total: r.backprop.total(),
        };
        Ok(())
    })
}
