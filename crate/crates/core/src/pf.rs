//! Newton-Raphson AC power flow in polar coordinates.
//!
//! Branch flows in a [`PowerFlowSolution`] are the flows through the series
//! element only; the charging admittance at each end is accounted for as a
//! separate shunt term, so that per-bus balance reads
//!
//! ```text
//! P_i = Σ_l P_l + V_i² (Σ g_m,l / t_l² + g_sh,i)
//! Q_i = Σ_l Q_l − V_i² (Σ b_m,l / t_l² + b_sh,i)
//! ```
//!
//! with `t_l` the tap when bus `i` is the tapped (`from`) end and 1 otherwise.

use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::grid::{build_ybus, Branch, BusKind, GridError, Network};
use crate::linalg::{lu_solve, Dense};

/// Which end of a branch a flow is measured at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Measured at `from`, flowing toward `to`.
    Forward,
    /// Measured at `to`, flowing toward `from`.
    Reverse,
}

impl Direction {
    pub fn sending(self, br: &Branch) -> usize {
        match self {
            Direction::Forward => br.from,
            Direction::Reverse => br.to,
        }
    }

    pub fn receiving(self, br: &Branch) -> usize {
        match self {
            Direction::Forward => br.to,
            Direction::Reverse => br.from,
        }
    }

    /// Voltage seen by the series element at the sending end, after the
    /// off-nominal tap.
    pub fn effective_voltage(self, v_send: f64, br: &Branch) -> f64 {
        match self {
            Direction::Forward => v_send / br.tap,
            Direction::Reverse => v_send,
        }
    }

    /// Factor applied to the sending end's charging admittance.
    pub fn charging_factor(self, br: &Branch) -> f64 {
        match self {
            Direction::Forward => 1.0 / (br.tap * br.tap),
            Direction::Reverse => 1.0,
        }
    }
}

/// Index of a directed flow in `PowerFlowSolution::s_branch`.
pub fn directed_index(branch: usize, dir: Direction) -> usize {
    match dir {
        Direction::Forward => 2 * branch,
        Direction::Reverse => 2 * branch + 1,
    }
}

/// Complex power entering the series element of `branch` at the sending
/// end: `y*(V_s'² − V_s' V_r' e^{jθ_sr})`, where the primes denote voltages
/// referred through the tap.
pub fn branch_flow(
    v_send: f64,
    v_recv: f64,
    theta_sr: f64,
    branch: &Branch,
    dir: Direction,
) -> Complex64 {
    let y = branch.series_admittance();
    let (vs, vr) = match dir {
        Direction::Forward => (v_send / branch.tap, v_recv),
        Direction::Reverse => (v_send, v_recv / branch.tap),
    };
    y.conj() * (vs * vs - vs * vr * Complex64::from_polar(1.0, theta_sr))
}

/// Power absorbed by the charging admittance at the sending end.
pub fn charging_power(v_send: f64, branch: &Branch, dir: Direction) -> Complex64 {
    let k = v_send * v_send * dir.charging_factor(branch);
    Complex64::new(branch.g_m * k, -branch.b_m * k)
}

/// Total power leaving the sending bus into the branch (series + charging).
pub fn terminal_flow(
    v_send: f64,
    v_recv: f64,
    theta_sr: f64,
    branch: &Branch,
    dir: Direction,
) -> Complex64 {
    branch_flow(v_send, v_recv, theta_sr, branch, dir) + charging_power(v_send, branch, dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Series-element flows, two entries per branch (see [`directed_index`]).
    /// Out-of-service branches carry zeros.
    pub s_branch: Vec<Complex64>,
}

impl PowerFlowSolution {
    pub fn flow(&self, branch: usize, dir: Direction) -> Complex64 {
        self.s_branch[directed_index(branch, dir)]
    }
}

/// Series flows of every branch at the given bus voltages.
pub fn all_branch_flows(net: &Network, v: &[f64], theta: &[f64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); 2 * net.branches.len()];
    for (k, br) in net.in_service() {
        let (f, t) = (br.from, br.to);
        out[2 * k] = branch_flow(v[f], v[t], theta[f] - theta[t], br, Direction::Forward);
        out[2 * k + 1] = branch_flow(v[t], v[f], theta[t] - theta[f], br, Direction::Reverse);
    }
    out
}

/// Complex injections `S = V ⊙ conj(Y V)`.
pub fn injections(ybus: &Dense<Complex64>, v: &[f64], theta: &[f64]) -> Vec<Complex64> {
    let n = v.len();
    let vc: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(v[i], theta[i])).collect();
    (0..n)
        .map(|i| {
            let current: Complex64 = ybus.row(i).iter().zip(&vc).map(|(y, v)| y * v).sum();
            vc[i] * current.conj()
        })
        .collect()
}

/// Per-bus shunt coefficients `(Σ g, Σ b)` multiplying `V_i²` in the
/// balance equation: branch charging at each end plus the bus shunt.
pub fn shunt_coefficients(net: &Network) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = net.buses.iter().map(|b| (b.g_sh, b.b_sh)).collect();
    for (_, br) in net.in_service() {
        for dir in [Direction::Forward, Direction::Reverse] {
            let f = dir.charging_factor(br);
            let s = dir.sending(br);
            out[s].0 += br.g_m * f;
            out[s].1 += br.b_m * f;
        }
    }
    out
}

/// Signed per-bus imbalance from injections and branch flows:
/// `ΔP_i = P_i − Σ P_l − V_i² G_i`, `ΔQ_i = Q_i − Σ Q_l + V_i² B_i`.
pub fn kcl_residual(
    net: &Network,
    v: &[f64],
    p: &[f64],
    q: &[f64],
    s_branch: &[Complex64],
) -> Vec<(f64, f64)> {
    let shunts = shunt_coefficients(net);
    let mut out: Vec<(f64, f64)> = (0..net.n_buses())
        .map(|i| {
            let v2 = v[i] * v[i];
            (p[i] - v2 * shunts[i].0, q[i] + v2 * shunts[i].1)
        })
        .collect();
    for (k, br) in net.in_service() {
        for dir in [Direction::Forward, Direction::Reverse] {
            let s = s_branch[directed_index(k, dir)];
            let bus = dir.sending(br);
            out[bus].0 -= s.re;
            out[bus].1 -= s.im;
        }
    }
    out
}

/// Largest |ΔP| or |ΔQ| of [`kcl_residual`] over all buses.
pub fn max_kcl_residual(net: &Network, sol: &PowerFlowSolution) -> f64 {
    kcl_residual(net, &sol.v, &sol.p, &sol.q, &sol.s_branch)
        .into_iter()
        .fold(0.0, |m, (dp, dq)| m.max(dp.abs()).max(dq.abs()))
}

/// Specified-minus-computed mismatch at the network's setpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    /// Zero at the slack bus.
    pub dp: Vec<f64>,
    /// Zero at PV and slack buses.
    pub dq: Vec<f64>,
    /// Computed injections at every bus, slack included.
    pub p_calc: Vec<f64>,
    pub q_calc: Vec<f64>,
}

impl Mismatch {
    pub fn max_abs(&self) -> f64 {
        self.dp
            .iter()
            .chain(&self.dq)
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// Mismatch of the power balance at `(v, theta)` evaluated from branch
/// flows and shunts.
pub fn mismatch(net: &Network, v: &[f64], theta: &[f64]) -> Mismatch {
    let n = net.n_buses();
    let flows = all_branch_flows(net, v, theta);
    let zeros = vec![0.0; n];
    // Residual with zero injections is minus the computed injection.
    let calc = kcl_residual(net, v, &zeros, &zeros, &flows);
    let p_calc: Vec<f64> = calc.iter().map(|c| -c.0).collect();
    let q_calc: Vec<f64> = calc.iter().map(|c| -c.1).collect();
    let mut dp = vec![0.0; n];
    let mut dq = vec![0.0; n];
    for (i, bus) in net.buses.iter().enumerate() {
        if matches!(bus.kind, BusKind::PQ | BusKind::PV) {
            dp[i] = bus.p_set - p_calc[i];
        }
        if bus.kind == BusKind::PQ {
            dq[i] = bus.q_set - q_calc[i];
        }
    }
    Mismatch {
        dp,
        dq,
        p_calc,
        q_calc,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub enforce_q_limits: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            enforce_q_limits: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub enum Init {
    #[default]
    Flat,
    Warm {
        v: Vec<f64>,
        theta: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    /// Newton updates applied.
    pub iterations: usize,
    pub max_mismatch: f64,
    pub pv_to_pq_switches: usize,
    pub wall_time: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum PfError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("initial point has {got} entries, network has {expected} buses")]
    InitLength { expected: usize, got: usize },
    #[error("non-finite state at iteration {iteration}")]
    NonFinite { iteration: usize },
}

/// Unknown layout of the Newton system: angles of `pvpq`, then magnitudes
/// of `pq`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewtonIndex {
    pub pvpq: Vec<usize>,
    pub pq: Vec<usize>,
}

impl NewtonIndex {
    pub fn from_kinds(kinds: &[BusKind]) -> Self {
        let pq: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i] == BusKind::PQ).collect();
        let pvpq = (0..kinds.len())
            .filter(|&i| matches!(kinds[i], BusKind::PQ | BusKind::PV))
            .collect();
        Self { pvpq, pq }
    }

    pub fn len(&self) -> usize {
        self.pvpq.len() + self.pq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `F = S_calc − S_spec` restricted to the Newton unknowns.
pub fn mismatch_vector(
    ybus: &Dense<Complex64>,
    v: &[f64],
    theta: &[f64],
    s_spec: &[Complex64],
    idx: &NewtonIndex,
) -> Vec<f64> {
    let s = injections(ybus, v, theta);
    idx.pvpq
        .iter()
        .map(|&i| s[i].re - s_spec[i].re)
        .chain(idx.pq.iter().map(|&i| s[i].im - s_spec[i].im))
        .collect()
}

/// Analytic Jacobian of [`mismatch_vector`] with respect to
/// `(theta[pvpq], v[pq])`.
pub fn jacobian(ybus: &Dense<Complex64>, v: &[f64], theta: &[f64], idx: &NewtonIndex) -> Dense<f64> {
    let n = v.len();
    let vc: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(v[i], theta[i])).collect();
    let vn: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(1.0, theta[i])).collect();
    let ibus: Vec<Complex64> = (0..n)
        .map(|i| ybus.row(i).iter().zip(&vc).map(|(y, v)| y * v).sum())
        .collect();
    let j = Complex64::i();

    // dS_i/dθ_k = j V_i conj(δ_ik I_i − Y_ik V_k)
    let ds_dva = |i: usize, k: usize| {
        let mut inner = -ybus[(i, k)] * vc[k];
        if i == k {
            inner += ibus[i];
        }
        j * vc[i] * inner.conj()
    };
    // dS_i/d|V_k| = V_i conj(Y_ik Vn_k) + δ_ik conj(I_i) Vn_i
    let ds_dvm = |i: usize, k: usize| {
        let mut d = vc[i] * (ybus[(i, k)] * vn[k]).conj();
        if i == k {
            d += ibus[i].conj() * vn[i];
        }
        d
    };

    let (npvpq, npq) = (idx.pvpq.len(), idx.pq.len());
    let mut jac = Dense::zeros(npvpq + npq, npvpq + npq);
    for (r, &i) in idx.pvpq.iter().enumerate() {
        for (c, &k) in idx.pvpq.iter().enumerate() {
            jac[(r, c)] = ds_dva(i, k).re;
        }
        for (c, &k) in idx.pq.iter().enumerate() {
            jac[(r, npvpq + c)] = ds_dvm(i, k).re;
        }
    }
    for (r, &i) in idx.pq.iter().enumerate() {
        for (c, &k) in idx.pvpq.iter().enumerate() {
            jac[(npvpq + r, c)] = ds_dva(i, k).im;
        }
        for (c, &k) in idx.pq.iter().enumerate() {
            jac[(npvpq + r, npvpq + c)] = ds_dvm(i, k).im;
        }
    }
    jac
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Limit {
    Upper,
    Lower,
}

/// Solves the power flow of `net` from `init`.
///
/// Non-convergence is not an error: the last iterate is returned with
/// `converged == false`. A singular Jacobian is.
pub fn solve(
    net: &Network,
    init: &Init,
    opts: &SolveOptions,
) -> Result<(PowerFlowSolution, SolveReport), PfError> {
    let start = Instant::now();
    net.validate()?;
    net.check_connected()?;
    let n = net.n_buses();
    let ybus = build_ybus(net);

    let mut kinds: Vec<BusKind> = net.buses.iter().map(|b| b.kind).collect();
    let mut at_limit: Vec<Option<Limit>> = vec![None; n];
    let mut s_spec: Vec<Complex64> = net
        .buses
        .iter()
        .map(|b| Complex64::new(b.p_set, b.q_set))
        .collect();

    let (mut v, mut theta) = match init {
        Init::Flat => {
            let v = net
                .buses
                .iter()
                .map(|b| if b.kind == BusKind::PQ { 1.0 } else { b.v_set })
                .collect();
            (v, vec![net.ref_angle; n])
        }
        Init::Warm { v, theta } => {
            for len in [v.len(), theta.len()] {
                if len != n {
                    return Err(PfError::InitLength { expected: n, got: len });
                }
            }
            (v.clone(), theta.clone())
        }
    };
    for (i, bus) in net.buses.iter().enumerate() {
        if bus.kind == BusKind::Slack {
            v[i] = bus.v_set;
            theta[i] = net.ref_angle;
        }
    }

    // A warm start may already sit on a reactive limit; recognise that so an
    // exact initial point needs no updates.
    if let (Init::Warm { .. }, true) = (init, opts.enforce_q_limits) {
        let s = injections(&ybus, &v, &theta);
        for (i, bus) in net.buses.iter().enumerate() {
            if bus.kind != BusKind::PV || (v[i] - bus.v_set).abs() <= 1e-12 {
                continue;
            }
            let q = s[i].im;
            let hit_upper = q >= bus.q_max - opts.tol && v[i] < bus.v_set;
            let hit_lower = q <= bus.q_min + opts.tol && v[i] > bus.v_set;
            if hit_upper || hit_lower {
                let limit = if hit_upper { Limit::Upper } else { Limit::Lower };
                kinds[i] = BusKind::PQ;
                at_limit[i] = Some(limit);
                s_spec[i].im = if hit_upper { bus.q_max } else { bus.q_min };
            }
        }
    }
    for (i, bus) in net.buses.iter().enumerate() {
        if kinds[i] == BusKind::PV {
            v[i] = bus.v_set;
        }
    }

    let mut iterations = 0;
    let mut switches = 0;
    let switch_budget = 4 * n + 8;
    let mut idx = NewtonIndex::from_kinds(&kinds);
    let mut max_mismatch;
    let converged = loop {
        let mut switched = false;
        if iterations > 0 && opts.enforce_q_limits && switches < switch_budget {
            let s = injections(&ybus, &v, &theta);
            for (i, bus) in net.buses.iter().enumerate() {
                if bus.kind != BusKind::PV {
                    continue;
                }
                match at_limit[i] {
                    None => {
                        let q = s[i].im;
                        let limit = if q > bus.q_max {
                            Some((Limit::Upper, bus.q_max))
                        } else if q < bus.q_min {
                            Some((Limit::Lower, bus.q_min))
                        } else {
                            None
                        };
                        if let Some((lim, value)) = limit {
                            kinds[i] = BusKind::PQ;
                            at_limit[i] = Some(lim);
                            s_spec[i].im = value;
                            switched = true;
                            switches += 1;
                        }
                    }
                    Some(lim) => {
                        let release = match lim {
                            Limit::Upper => v[i] > bus.v_set,
                            Limit::Lower => v[i] < bus.v_set,
                        };
                        if release {
                            kinds[i] = BusKind::PV;
                            at_limit[i] = None;
                            v[i] = bus.v_set;
                            s_spec[i].im = bus.q_set;
                            switched = true;
                            switches += 1;
                        }
                    }
                }
            }
            if switched {
                idx = NewtonIndex::from_kinds(&kinds);
            }
        }

        let f = mismatch_vector(&ybus, &v, &theta, &s_spec, &idx);
        max_mismatch = f.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if !max_mismatch.is_finite() {
            return Err(PfError::NonFinite { iteration: iterations });
        }
        if max_mismatch < opts.tol && !switched {
            break true;
        }
        if iterations >= opts.max_iter {
            break false;
        }
        let jac = jacobian(&ybus, &v, &theta, &idx);
        let dx = lu_solve(&jac, &f).map_err(|_| PfError::SingularJacobian {
            iteration: iterations,
        })?;
        let npvpq = idx.pvpq.len();
        for (k, &i) in idx.pvpq.iter().enumerate() {
            theta[i] -= dx[k];
        }
        for (k, &i) in idx.pq.iter().enumerate() {
            v[i] -= dx[npvpq + k];
        }
        iterations += 1;
    };

    let s = injections(&ybus, &v, &theta);
    let solution = PowerFlowSolution {
        s_branch: all_branch_flows(net, &v, &theta),
        p: s.iter().map(|c| c.re).collect(),
        q: s.iter().map(|c| c.im).collect(),
        v,
        theta,
    };
    let report = SolveReport {
        converged,
        iterations,
        max_mismatch,
        pv_to_pq_switches: switches,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((solution, report))
}
