//! Extreme-error metrics, accuracy, branch error amplification and the
//! Newton warm-start benchmark.

use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::angle::{bfs_par, AngleAssignment, NeighborOrder};
use crate::grid::Network;
use crate::pf::{
    branch_flow, directed_index, kcl_residual, solve, Direction, Init, PowerFlowSolution,
    SolveOptions,
};
use crate::rmgl::{Model, ModelError, ModelInput, ModelOutput};

/// Predicted operating state in the layout of [`PowerFlowSolution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedState {
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Two entries per branch; out-of-service branches carry zeros.
    pub s_branch: Vec<Complex64>,
    /// Radians, once recovered.
    pub theta: Option<Vec<f64>>,
}

impl PredictedState {
    pub fn from_solution(sol: &PowerFlowSolution) -> Self {
        Self {
            v: sol.v.clone(),
            p: sol.p.clone(),
            q: sol.q.clone(),
            s_branch: sol.s_branch.clone(),
            theta: Some(sol.theta.clone()),
        }
    }

    pub fn from_model_output(out: &ModelOutput, net: &Network) -> Self {
        let mut s_branch = vec![Complex64::new(0.0, 0.0); 2 * net.branches.len()];
        for (e, h) in out.edges.iter().zip(&out.h_out) {
            s_branch[directed_index(e.branch, e.dir)] = Complex64::new(h[0], h[1]);
        }
        Self {
            v: out.x_out.iter().map(|x| x[2]).collect(),
            p: out.x_out.iter().map(|x| x[0]).collect(),
            q: out.x_out.iter().map(|x| x[1]).collect(),
            s_branch,
            theta: None,
        }
    }

    /// Recovers angles from the predicted flows, referenced to the slack.
    /// Unreached buses take the reference angle.
    pub fn recover_angles(&mut self, net: &Network) -> AngleAssignment {
        let slack = net.slack().unwrap_or(0);
        let asg = bfs_par(
            net,
            &self.v,
            &self.s_branch,
            slack,
            net.ref_angle,
            NeighborOrder::BranchOrder,
        );
        self.theta = Some(
            asg.theta
                .iter()
                .map(|&t| if t.is_finite() { t } else { net.ref_angle })
                .collect(),
        );
        asg
    }
}

/// Per-sample maxima over buses and branches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleErrors {
    /// p.u.
    pub e_v: f64,
    /// Degrees; absent without recovered angles.
    pub e_theta: Option<f64>,
    /// MVA, magnitude of the complex branch flow error.
    pub e_sl: f64,
    /// MVA, magnitude of the complex power balance residual.
    pub e_ds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub mu_v: f64,
    pub mu_sl: f64,
    pub mu_ds: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            mu_v: 0.01,
            mu_sl: 10.0,
            mu_ds: 10.0,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), String> {
        if [self.mu_v, self.mu_sl, self.mu_ds]
            .iter()
            .all(|t| t.is_finite() && *t > 0.0)
        {
            Ok(())
        } else {
            Err(format!("thresholds must be positive: {self:?}"))
        }
    }

    pub fn accepts(&self, e: &SampleErrors) -> bool {
        e.e_v <= self.mu_v && e.e_sl <= self.mu_sl && e.e_ds <= self.mu_ds
    }
}

fn max_abs(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(0.0, |m, x| m.max(x.abs()))
}

pub fn sample_errors(
    pred: &PredictedState,
    truth: &PowerFlowSolution,
    net: &Network,
) -> SampleErrors {
    let base = net.base_mva;
    let e_v = max_abs(pred.v.iter().zip(&truth.v).map(|(a, b)| a - b));
    let e_theta = pred.theta.as_ref().map(|th| {
        max_abs(th.iter().zip(&truth.theta).map(|(a, b)| a - b)).to_degrees()
    });
    let e_sl = pred
        .s_branch
        .iter()
        .zip(&truth.s_branch)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).norm()))
        * base;
    let e_ds = kcl_residual(net, &pred.v, &pred.p, &pred.q, &pred.s_branch)
        .iter()
        .fold(0.0_f64, |m, &(dp, dq)| m.max(dp.hypot(dq)))
        * base;
    SampleErrors {
        e_v,
        e_theta,
        e_sl,
        e_ds,
    }
}

/// Fraction of samples whose voltage, branch and balance errors all lie
/// within the thresholds. `None` for an empty list.
pub fn accuracy(errors: &[SampleErrors], thr: &Thresholds) -> Option<f64> {
    if errors.is_empty() {
        return None;
    }
    let ok = errors.iter().filter(|e| thr.accepts(e)).count();
    Some(ok as f64 / errors.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mean_e_v: f64,
    /// Mean over samples with recovered angles.
    pub mean_e_theta: Option<f64>,
    pub mean_e_sl: f64,
    pub mean_e_ds: f64,
    pub accuracy: f64,
    pub thresholds: Thresholds,
}

pub fn summarize(errors: &[SampleErrors], thr: &Thresholds) -> Option<EvalReport> {
    let n = errors.len() as f64;
    let acc = accuracy(errors, thr)?;
    let thetas: Vec<f64> = errors.iter().filter_map(|e| e.e_theta).collect();
    Some(EvalReport {
        samples: errors.len(),
        mean_e_v: errors.iter().map(|e| e.e_v).sum::<f64>() / n,
        mean_e_theta: (!thetas.is_empty())
            .then(|| thetas.iter().sum::<f64>() / thetas.len() as f64),
        mean_e_sl: errors.iter().map(|e| e.e_sl).sum::<f64>() / n,
        mean_e_ds: errors.iter().map(|e| e.e_ds).sum::<f64>() / n,
        accuracy: acc,
        thresholds: *thr,
    })
}

/// Model prediction with recovered angles for one case.
pub fn predict_state(model: &Model, net: &Network) -> Result<PredictedState, ModelError> {
    let input = ModelInput::from_network(net, net.n_buses())?;
    let out = model.predict(&input)?;
    let mut state = PredictedState::from_model_output(&out, net);
    state.recover_angles(net);
    Ok(state)
}

/// Evaluates the model on solved cases, in index order.
pub fn evaluate_model(
    model: &Model,
    cases: &[(Network, PowerFlowSolution)],
) -> Result<Vec<SampleErrors>, ModelError> {
    cases
        .par_iter()
        .map(|(net, sol)| Ok(sample_errors(&predict_state(model, net)?, sol, net)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplificationEntry {
    pub branch: usize,
    pub y_abs: f64,
    pub k1: Complex64,
    pub k2: Complex64,
    pub k3: Complex64,
    /// p.u.
    pub linearized: f64,
    pub exact: f64,
    /// Relative distance between the linearized and exact complex errors.
    pub rel_err: f64,
}

/// First-order sensitivity of each in-service branch's forward series flow
/// to errors `dv_i`, `dv_j` and `dtheta` in its terminal state, compared
/// with re-evaluating the flow at the perturbed state. Sorted by
/// decreasing admittance magnitude.
pub fn amplification_report(
    net: &Network,
    sol: &PowerFlowSolution,
    dv_i: f64,
    dv_j: f64,
    dtheta: f64,
) -> Vec<AmplificationEntry> {
    let mut out: Vec<AmplificationEntry> = net
        .in_service()
        .map(|(k, br)| {
            let (vi, vj) = (sol.v[br.from], sol.v[br.to]);
            let th = sol.theta[br.from] - sol.theta[br.to];
            let y = br.series_admittance();
            // Sending voltage referred through the tap.
            let vi_t = vi / br.tap;
            let e = Complex64::from_polar(1.0, th);
            let k1 = 2.0 * vi_t - vj * e;
            let k2 = vi_t * e;
            let k3 = vi_t * vj * e;
            let yc = y.conj();
            let lin = yc * (k1 * (dv_i / br.tap) - k2 * dv_j - Complex64::i() * k3 * dtheta);
            let exact = branch_flow(vi + dv_i, vj + dv_j, th + dtheta, br, Direction::Forward)
                - branch_flow(vi, vj, th, br, Direction::Forward);
            AmplificationEntry {
                branch: k,
                y_abs: y.norm(),
                k1,
                k2,
                k3,
                linearized: lin.norm(),
                exact: exact.norm(),
                rel_err: (lin - exact).norm() / exact.norm().max(f64::MIN_POSITIVE),
            }
        })
        .collect();
    out.sort_by(|a, b| b.y_abs.total_cmp(&a.y_abs).then(a.branch.cmp(&b.branch)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchArm {
    pub convergence_rate: f64,
    /// Newton updates averaged over all cases. Failed solves count with
    /// the iterations they used, or the iteration limit on a hard error.
    pub mean_iterations: f64,
    /// Total Newton time in seconds.
    pub nr_time: f64,
    /// Total time spent producing initial points in seconds.
    pub init_time: f64,
    pub iterations: Vec<usize>,
    pub failures: Vec<CaseFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmstartReport {
    pub cases: usize,
    pub flat: BenchArm,
    pub warm: BenchArm,
}

fn run_arm<F>(cases: &[Network], opts: &SolveOptions, init: F) -> BenchArm
where
    F: Fn(usize, &Network) -> Result<Init, String> + Sync,
{
    let runs: Vec<(usize, bool, f64, f64, Option<String>)> = cases
        .par_iter()
        .enumerate()
        .map(|(i, net)| {
            let t0 = Instant::now();
            let init = init(i, net);
            let init_time = t0.elapsed().as_secs_f64();
            let init = match init {
                Ok(x) => x,
                Err(e) => return (opts.max_iter, false, 0.0, init_time, Some(e)),
            };
            let t1 = Instant::now();
            let res = solve(net, &init, opts);
            let nr = t1.elapsed().as_secs_f64();
            match res {
                Ok((_, rep)) if rep.converged => (rep.iterations, true, nr, init_time, None),
                Ok((_, rep)) => (
                    rep.iterations,
                    false,
                    nr,
                    init_time,
                    Some(format!("not converged, mismatch {:.3e}", rep.max_mismatch)),
                ),
                Err(e) => (opts.max_iter, false, nr, init_time, Some(e.to_string())),
            }
        })
        .collect();
    let n = runs.len().max(1) as f64;
    BenchArm {
        convergence_rate: runs.iter().filter(|r| r.1).count() as f64 / n,
        mean_iterations: runs.iter().map(|r| r.0 as f64).sum::<f64>() / n,
        nr_time: runs.iter().map(|r| r.2).sum(),
        init_time: runs.iter().map(|r| r.3).sum(),
        iterations: runs.iter().map(|r| r.0).collect(),
        failures: runs
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                r.4.clone().map(|reason| CaseFailure { case: i, reason })
            })
            .collect(),
    }
}

/// Solves every case from a flat start and from `init`, with the same
/// options.
pub fn warmstart_bench<F>(cases: &[Network], opts: &SolveOptions, init: F) -> WarmstartReport
where
    F: Fn(usize, &Network) -> Result<Init, String> + Sync,
{
    WarmstartReport {
        cases: cases.len(),
        flat: run_arm(cases, opts, |_, _| Ok(Init::Flat)),
        warm: run_arm(cases, opts, init),
    }
}

/// Initial point from model voltages and recovered angles.
pub fn model_init(model: &Model, net: &Network) -> Result<Init, String> {
    let state = predict_state(model, net).map_err(|e| e.to_string())?;
    Ok(Init::Warm {
        v: state.v,
        theta: state.theta.expect("angles recovered"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::ieee39;
    use crate::grid::tests::{bus, line};
    use crate::grid::BusKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solved39() -> (Network, PowerFlowSolution) {
        let net = ieee39();
        let (sol, _) = solve(&net, &Init::Flat, &SolveOptions::default()).unwrap();
        (net, sol)
    }

    #[test]
    fn exact_prediction_has_zero_error() {
        let (net, sol) = solved39();
        let e = sample_errors(&PredictedState::from_solution(&sol), &sol, &net);
        assert_eq!(e.e_v, 0.0);
        assert_eq!(e.e_theta, Some(0.0));
        assert_eq!(e.e_sl, 0.0);
        assert!(e.e_ds < 1e-6, "{}", e.e_ds);
    }

    #[test]
    fn single_voltage_error_is_the_maximum() {
        let (net, sol) = solved39();
        let mut pred = PredictedState::from_solution(&sol);
        pred.v[7] += 0.02;
        let e = sample_errors(&pred, &sol, &net);
        assert!((e.e_v - 0.02).abs() < 1e-15);
    }

    #[test]
    fn errors_match_a_direct_scan() {
        let (net, sol) = solved39();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pred = PredictedState::from_solution(&sol);
        let mut jitter = |x: &mut f64| *x += rng.gen_range(-0.01..0.01);
        pred.v.iter_mut().for_each(&mut jitter);
        pred.p.iter_mut().for_each(&mut jitter);
        pred.q.iter_mut().for_each(&mut jitter);
        pred.theta.as_mut().unwrap().iter_mut().for_each(&mut jitter);
        for s in pred.s_branch.iter_mut() {
            s.re += rng.gen_range(-0.01..0.01);
            s.im += rng.gen_range(-0.01..0.01);
        }
        let e = sample_errors(&pred, &sol, &net);

        let mut ev = 0.0_f64;
        let mut et = 0.0_f64;
        for i in 0..net.n_buses() {
            ev = ev.max((pred.v[i] - sol.v[i]).abs());
            et = et.max((pred.theta.as_ref().unwrap()[i] - sol.theta[i]).abs());
        }
        let mut esl = 0.0_f64;
        for k in 0..pred.s_branch.len() {
            let d = pred.s_branch[k] - sol.s_branch[k];
            esl = esl.max((d.re * d.re + d.im * d.im).sqrt());
        }
        // Power balance written out bus by bus.
        let mut eds = 0.0_f64;
        for i in 0..net.n_buses() {
            let bi = &net.buses[i];
            let mut dp = pred.p[i] - pred.v[i] * pred.v[i] * bi.g_sh;
            let mut dq = pred.q[i] + pred.v[i] * pred.v[i] * bi.b_sh;
            for (k, br) in net.branches.iter().enumerate() {
                if !br.status {
                    continue;
                }
                let (idx, fac) = if br.from == i {
                    (2 * k, 1.0 / (br.tap * br.tap))
                } else if br.to == i {
                    (2 * k + 1, 1.0)
                } else {
                    continue;
                };
                let v2 = pred.v[i] * pred.v[i] * fac;
                dp -= pred.s_branch[idx].re + br.g_m * v2;
                dq -= pred.s_branch[idx].im - br.b_m * v2;
            }
            eds = eds.max((dp * dp + dq * dq).sqrt());
        }
        assert_eq!(e.e_v, ev);
        assert!((e.e_theta.unwrap() - et * 180.0 / std::f64::consts::PI).abs() < 1e-12);
        assert!((e.e_sl - esl * 100.0).abs() < 1e-12);
        assert!((e.e_ds - eds * 100.0).abs() < 1e-9, "{} vs {}", e.e_ds, eds * 100.0);
    }

    #[test]
    fn accuracy_counts_samples_within_all_thresholds() {
        let thr = Thresholds::default();
        let ok = SampleErrors {
            e_v: 0.005,
            e_theta: None,
            e_sl: 5.0,
            e_ds: 5.0,
        };
        let bad = SampleErrors { e_v: 0.02, ..ok };
        assert_eq!(accuracy(&[SampleErrors::default(); 3], &thr), Some(1.0));
        assert_eq!(accuracy(&[ok], &thr), Some(1.0));
        assert_eq!(accuracy(&[ok, bad], &thr), Some(0.5));
        assert_eq!(accuracy(&[], &thr), None);
        let looser = Thresholds { mu_v: 0.05, ..thr };
        assert_eq!(accuracy(&[ok, bad], &looser), Some(1.0));
    }

    fn two_bus(y_abs: f64) -> (Network, PowerFlowSolution) {
        let x = 1.0 / y_abs;
        let net = Network {
            base_mva: 100.0,
            buses: vec![
                bus(0, BusKind::Slack, 0.0, 0.0, 1.0),
                bus(1, BusKind::PQ, 0.0, 0.0, 1.0),
            ],
            branches: vec![line(0, 1, 0.0, x)],
            ref_angle: 0.0,
        };
        let sol = PowerFlowSolution {
            v: vec![1.0, 1.0],
            theta: vec![0.0, 0.0],
            p: vec![0.0, 0.0],
            q: vec![0.0, 0.0],
            s_branch: vec![Complex64::new(0.0, 0.0); 2],
        };
        (net, sol)
    }

    #[test]
    fn coefficients_are_unity_at_nominal_state() {
        let (net, sol) = two_bus(10.0);
        let r = amplification_report(&net, &sol, 1e-6, 0.0, 0.0);
        for k in [r[0].k1, r[0].k2, r[0].k3] {
            assert!((k - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn stiff_branch_amplifies_voltage_error() {
        let (net, sol) = two_bus(1000.0);
        let r = amplification_report(&net, &sol, 1e-3, 0.0, 0.0);
        assert!((r[0].linearized - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linearization_error_shrinks_with_perturbation() {
        let (net, sol) = solved39();
        let errs: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&d| {
                amplification_report(&net, &sol, d, -0.5 * d, 0.7 * d)
                    .iter()
                    .fold(0.0_f64, |m, e| m.max(e.rel_err))
            })
            .collect();
        assert!(errs[1] < errs[0] * 0.2 && errs[2] < errs[1] * 0.2, "{errs:?}");
    }

    #[test]
    fn exact_init_needs_no_updates() {
        let (net, sol) = solved39();
        let rep = warmstart_bench(std::slice::from_ref(&net), &SolveOptions::default(), |_, _| {
            Ok(Init::Warm {
                v: sol.v.clone(),
                theta: sol.theta.clone(),
            })
        });
        assert_eq!(rep.warm.mean_iterations, 0.0);
        assert_eq!(rep.warm.convergence_rate, 1.0);
        assert_eq!(rep.flat.convergence_rate, 1.0);
        assert!(rep.flat.mean_iterations > 0.0);
    }

    #[test]
    fn failed_init_is_recorded() {
        let (net, _) = solved39();
        let rep = warmstart_bench(&[net], &SolveOptions::default(), |_, _| Err("no model".into()));
        assert_eq!(rep.warm.convergence_rate, 0.0);
        assert_eq!(rep.warm.failures.len(), 1);
    }
}
