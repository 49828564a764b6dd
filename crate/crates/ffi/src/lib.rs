//! C ABI over the sampfa crate.
//!
//! Networks, solutions and models are opaque handles created by the
//! library and released with the matching `*_free` function. Every
//! fallible call returns a [`SampfaStatus`]; on failure a description is
//! available from [`sampfa_last_error`] on the same thread. Array
//! arguments are caller-allocated with their length passed alongside.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use num_complex::Complex64;
use sampfa::angle::{bfs_par, NeighborOrder};
use sampfa::cases::ieee39;
use sampfa::grid::{graph_stats, load_case, parse_case, Network};
use sampfa::pf::{directed_index, solve, Init, PowerFlowSolution, SolveOptions};
use sampfa::rmgl::{Model, ModelInput};

/// Result of a library call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampfaStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Malformed input: bad JSON, invalid network, wrong buffer length.
    InvalidInput = 2,
    /// File could not be read.
    Io = 3,
    /// Newton iteration stopped without meeting the tolerance.
    NotConverged = 4,
    /// Singular Jacobian, non-finite values or incomplete angle recovery.
    Numerical = 5,
    /// A Rust panic was caught at the boundary.
    Internal = 6,
}

/// Parsed power network.
pub struct SampfaNetwork(Network);

/// Converged or last-iterate power flow state.
pub struct SampfaSolution(PowerFlowSolution);

/// Trained surrogate model.
pub struct SampfaModel(Model);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SampfaSolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
    pub pv_to_pq_switches: usize,
    pub wall_time: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SampfaGraphStats {
    pub n_buses: usize,
    pub n_branches: usize,
    pub avg_degree: f64,
    pub algebraic_connectivity: f64,
    pub connected: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior nul removed"));
}

struct Failure(SampfaStatus, String);

fn fail<T>(status: SampfaStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, records its error message and converts panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SampfaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SampfaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            SampfaStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(SampfaStatus::NullPointer, format!("{name} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(SampfaStatus::NullPointer, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(SampfaStatus::InvalidInput, format!("{name}: {e}")))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, want: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return fail(SampfaStatus::NullPointer, format!("{name} is null"));
    }
    if len != want {
        return fail(
            SampfaStatus::InvalidInput,
            format!("{name} has length {len}, expected {want}"),
        );
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn in_slice<'a>(p: *const f64, len: usize, want: usize, name: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return fail(SampfaStatus::NullPointer, format!("{name} is null"));
    }
    if len != want {
        return fail(
            SampfaStatus::InvalidInput,
            format!("{name} has length {len}, expected {want}"),
        );
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(SampfaStatus::NullPointer, "output handle is null");
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn sampfa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn sampfa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a network from nul-terminated JSON.
///
/// # Safety
/// `json` must be null or a valid C string; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn sampfa_network_from_json(
    json: *const c_char,
    out: *mut *mut SampfaNetwork,
) -> SampfaStatus {
    guard(|| {
        let text = c_str(json, "json")?;
        let net = parse_case(text).map_err(|e| Failure(SampfaStatus::InvalidInput, e.to_string()))?;
        store(out, SampfaNetwork(net))
    })
}

/// Loads a network from a JSON case file.
///
/// # Safety
/// `path` must be null or a valid C string; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn sampfa_network_load(
    path: *const c_char,
    out: *mut *mut SampfaNetwork,
) -> SampfaStatus {
    guard(|| {
        let p = c_str(path, "path")?;
        let net = load_case(p).map_err(|e| {
            let status = match e {
                sampfa::grid::GridError::Io { .. } => SampfaStatus::Io,
                _ => SampfaStatus::InvalidInput,
            };
            Failure(status, e.to_string())
        })?;
        store(out, SampfaNetwork(net))
    })
}

/// The built-in IEEE 39-bus case.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn sampfa_network_ieee39(out: *mut *mut SampfaNetwork) -> SampfaStatus {
    guard(|| store(out, SampfaNetwork(ieee39())))
}

/// # Safety
/// `net` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sampfa_network_free(net: *mut SampfaNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of buses; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sampfa_network_bus_count(net: *const SampfaNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.0.n_buses())
}

/// Number of branches, in and out of service; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sampfa_network_branch_count(net: *const SampfaNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.0.branches.len())
}

/// # Safety
/// `net` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sampfa_graph_stats(
    net: *const SampfaNetwork,
    out: *mut SampfaGraphStats,
) -> SampfaStatus {
    guard(|| {
        let n = &deref(net, "net")?.0;
        if out.is_null() {
            return fail(SampfaStatus::NullPointer, "out is null");
        }
        let s = graph_stats(n);
        *out = SampfaGraphStats {
            n_buses: s.n_buses,
            n_branches: s.n_branches,
            avg_degree: s.avg_degree,
            algebraic_connectivity: s.algebraic_connectivity,
            connected: s.connected,
        };
        Ok(())
    })
}

/// Flat-start Newton-Raphson power flow. Non-positive `tol` or zero
/// `max_iter` select the defaults (1e-8 p.u., 200). On
/// `SAMPFA_STATUS_NOT_CONVERGED` the last iterate is still returned in
/// `out`. `report` may be null.
///
/// # Safety
/// `net` must be a live handle; `out` writable; `report` null or writable.
#[no_mangle]
pub unsafe extern "C" fn sampfa_solve(
    net: *const SampfaNetwork,
    tol: f64,
    max_iter: usize,
    out: *mut *mut SampfaSolution,
    report: *mut SampfaSolveReport,
) -> SampfaStatus {
    guard(|| {
        let n = &deref(net, "net")?.0;
        if out.is_null() {
            return fail(SampfaStatus::NullPointer, "out is null");
        }
        let mut opts = SolveOptions::default();
        if tol > 0.0 {
            opts.tol = tol;
        }
        if max_iter > 0 {
            opts.max_iter = max_iter;
        }
        let (sol, rep) = solve(n, &Init::Flat, &opts).map_err(|e| {
            let status = match e {
                sampfa::pf::PfError::Grid(_) | sampfa::pf::PfError::InitLength { .. } => {
                    SampfaStatus::InvalidInput
                }
                _ => SampfaStatus::Numerical,
            };
            Failure(status, e.to_string())
        })?;
        if let Some(r) = report.as_mut() {
            *r = SampfaSolveReport {
                converged: rep.converged,
                iterations: rep.iterations,
                max_mismatch: rep.max_mismatch,
                pv_to_pq_switches: rep.pv_to_pq_switches,
                wall_time: rep.wall_time,
            };
        }
        store(out, SampfaSolution(sol))?;
        if !rep.converged {
            return fail(
                SampfaStatus::NotConverged,
                format!(
                    "not converged after {} iterations, mismatch {:.3e}",
                    rep.iterations, rep.max_mismatch
                ),
            );
        }
        Ok(())
    })
}

/// # Safety
/// `sol` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sampfa_solution_free(sol: *mut SampfaSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// Copies bus states. Every array holds one entry per bus; any may be null
/// to skip it. Angles are in radians, powers in p.u.
///
/// # Safety
/// Non-null arrays must hold `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sampfa_solution_buses(
    sol: *const SampfaSolution,
    v: *mut f64,
    theta: *mut f64,
    p: *mut f64,
    q: *mut f64,
    n: usize,
) -> SampfaStatus {
    guard(|| {
        let s = &deref(sol, "sol")?.0;
        for (dst, src, name) in [(v, &s.v, "v"), (theta, &s.theta, "theta"), (p, &s.p, "p"), (q, &s.q, "q")] {
            if !dst.is_null() {
                out_slice(dst, n, src.len(), name)?.copy_from_slice(src);
            }
        }
        Ok(())
    })
}

/// Copies series branch flows, two per branch: entry `2k` is measured at
/// the from bus of branch `k`, entry `2k + 1` at its to bus.
///
/// # Safety
/// `p` and `q` must each hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sampfa_solution_branch_flows(
    sol: *const SampfaSolution,
    p: *mut f64,
    q: *mut f64,
    len: usize,
) -> SampfaStatus {
    guard(|| {
        let s = &deref(sol, "sol")?.0;
        let want = s.s_branch.len();
        let p = out_slice(p, len, want, "p")?;
        let q = out_slice(q, len, want, "q")?;
        for (k, f) in s.s_branch.iter().enumerate() {
            p[k] = f.re;
            q[k] = f.im;
        }
        Ok(())
    })
}

/// Recovers bus angles from voltage magnitudes and series branch flows
/// (layout of [`sampfa_solution_branch_flows`]), starting at the slack bus
/// with the network's reference angle. Fails with
/// `SAMPFA_STATUS_NUMERICAL` when some bus cannot be reached; reached
/// buses are still written and the rest are NaN.
///
/// # Safety
/// `v` and `theta` must hold `n` doubles; `p` and `q` must hold `len`.
#[no_mangle]
pub unsafe extern "C" fn sampfa_recover_angles(
    net: *const SampfaNetwork,
    v: *const f64,
    n: usize,
    p: *const f64,
    q: *const f64,
    len: usize,
    theta: *mut f64,
) -> SampfaStatus {
    guard(|| {
        let net = &deref(net, "net")?.0;
        let nb = net.n_buses();
        let v = in_slice(v, n, nb, "v")?;
        let p = in_slice(p, len, 2 * net.branches.len(), "p")?;
        let q = in_slice(q, len, 2 * net.branches.len(), "q")?;
        let out = out_slice(theta, n, nb, "theta")?;
        let Some(slack) = net.slack() else {
            return fail(SampfaStatus::InvalidInput, "network has no slack bus");
        };
        let flows: Vec<Complex64> = p.iter().zip(q).map(|(&a, &b)| Complex64::new(a, b)).collect();
        let a = bfs_par(net, v, &flows, slack, net.ref_angle, NeighborOrder::BranchOrder);
        out.copy_from_slice(&a.theta);
        if !a.is_complete() {
            return fail(
                SampfaStatus::Numerical,
                format!("{} buses unreachable", a.unassigned.len()),
            );
        }
        Ok(())
    })
}

/// Loads a checkpoint and its `<path>.json` sidecar.
///
/// # Safety
/// `path` must be a valid C string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sampfa_model_load(
    path: *const c_char,
    out: *mut *mut SampfaModel,
) -> SampfaStatus {
    guard(|| {
        let p = c_str(path, "path")?;
        let m = Model::load(p.as_ref()).map_err(|e| Failure(SampfaStatus::Io, e.to_string()))?;
        store(out, SampfaModel(m))
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sampfa_model_free(model: *mut SampfaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the model on `net`. `bus_out` receives `[P, Q, V]` per bus
/// (`bus_len = 3 n`); `branch_out` receives `[P, Q]` per directed flow in
/// the layout of [`sampfa_solution_branch_flows`] (`branch_len = 4 E`),
/// with zeros for out-of-service branches.
///
/// # Safety
/// Handles must be live; arrays must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn sampfa_model_predict(
    model: *const SampfaModel,
    net: *const SampfaNetwork,
    bus_out: *mut f64,
    bus_len: usize,
    branch_out: *mut f64,
    branch_len: usize,
) -> SampfaStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let net = &deref(net, "net")?.0;
        let bus = out_slice(bus_out, bus_len, 3 * net.n_buses(), "bus_out")?;
        let br = out_slice(branch_out, branch_len, 4 * net.branches.len(), "branch_out")?;
        let input = ModelInput::from_network(net, net.n_buses())
            .map_err(|e| Failure(SampfaStatus::InvalidInput, e.to_string()))?;
        let pred = m
            .predict(&input)
            .map_err(|e| Failure(SampfaStatus::InvalidInput, e.to_string()))?;
        for (i, x) in pred.x_out.iter().enumerate() {
            bus[3 * i..3 * i + 3].copy_from_slice(x);
        }
        br.fill(0.0);
        for (e, h) in pred.edges.iter().zip(&pred.h_out) {
            let k = directed_index(e.branch, e.dir);
            br[2 * k..2 * k + 2].copy_from_slice(h);
        }
        if bus.iter().chain(br.iter()).any(|x| !x.is_finite()) {
            return fail(SampfaStatus::Numerical, "prediction is not finite");
        }
        Ok(())
    })
}
