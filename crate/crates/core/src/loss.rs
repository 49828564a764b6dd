//! Data-physics hybrid training loss.
//!
//! Every physics term is evaluated on de-normalized predictions in p.u.;
//! the data term compares standardized outputs so that voltages and large
//! branch flows carry comparable weight.

use serde::{Deserialize, Serialize};

use crate::angle::SINGULAR_DENOMINATOR;
use crate::grid::Network;
use crate::pf::{shunt_coefficients, Direction, PowerFlowSolution};
use crate::rmgl::{DirectedEdge, NormStats, Prediction, N_BRANCH_OUT, N_BUS_OUT};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Floor applied to the squared sending-end voltage in the branch-loss term.
pub const V2_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub data: f64,
    pub phy: f64,
    /// Bus part of the data term.
    pub n: f64,
    /// Branch part of the data term.
    pub e: f64,
    pub kcl: f64,
    pub loss: f64,
    pub angle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::stage1()
    }
}

impl LossWeights {
    pub fn stage1() -> Self {
        Self {
            data: 1.0,
            phy: 0.3,
            n: 1.0,
            e: 5.0,
            kcl: 0.5,
            loss: 0.0,
            angle: 0.0,
        }
    }

    pub fn stage2() -> Self {
        Self {
            loss: 0.1,
            angle: 3.0,
            ..Self::stage1()
        }
    }

    pub fn zero() -> Self {
        Self {
            data: 0.0,
            phy: 0.0,
            n: 0.0,
            e: 0.0,
            kcl: 0.0,
            loss: 0.0,
            angle: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [self.data, self.phy, self.n, self.e, self.kcl, self.loss, self.angle];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(format!("loss weights must be finite and non-negative: {self:?}"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSchedule {
    pub stage1: LossWeights,
    pub stage2: LossWeights,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            stage1: LossWeights::stage1(),
            stage2: LossWeights::stage2(),
            stage1_epochs: 50,
            stage2_epochs: 150,
        }
    }
}

impl StageSchedule {
    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    /// Stage number (1 or 2) and weights of a zero-based epoch.
    pub fn at(&self, epoch: usize) -> (u8, LossWeights) {
        if epoch < self.stage1_epochs {
            (1, self.stage1)
        } else {
            (2, self.stage2)
        }
    }
}

/// Ground truth of one sample in the model's edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// `[n, 3]` of `(P, Q, V)`.
    pub bus: Tensor,
    /// `[2E, 2]` of `(P, Q)`, aligned with the model's directed edges.
    pub branch: Tensor,
    pub theta: Vec<f64>,
}

impl Targets {
    pub fn from_solution(sol: &PowerFlowSolution, edges: &[DirectedEdge]) -> Self {
        let n = sol.v.len();
        let bus = (0..n).flat_map(|i| [sol.p[i], sol.q[i], sol.v[i]]).collect();
        let branch = edges
            .iter()
            .flat_map(|e| {
                let s = sol.flow(e.branch, e.dir);
                [s.re, s.im]
            })
            .collect();
        Self {
            bus: Tensor::matrix(n, N_BUS_OUT, bus).expect("bus targets"),
            branch: Tensor::matrix(edges.len(), N_BRANCH_OUT, branch).expect("branch targets"),
            theta: sol.theta.clone(),
        }
    }
}

/// Constants of one sample needed by the loss terms.
#[derive(Debug, Clone)]
pub struct LossContext {
    n: usize,
    n_edges: usize,
    bus_target_norm: Tensor,
    branch_target_norm: Tensor,
    /// `[n, 2E]` with a one where bus `i` sends edge `e`.
    incidence: Tensor,
    /// `[n, 2]` of `(−G_i, +B_i)` multiplying `V_i²`.
    shunt: Tensor,
    send: Vec<usize>,
    partner: Vec<usize>,
    /// `[2E, 1]` factor turning `V_send²` into the tap-referred square.
    v_scale: Tensor,
    /// `[2E, 2]` of `(r, x)`.
    rx: Tensor,
    g: Tensor,
    b: Tensor,
    y2: Tensor,
    /// `θ_send − θ_recv` per edge.
    theta_diff: Tensor,
}

impl LossContext {
    pub fn new(net: &Network, edges: &[DirectedEdge], targets: &Targets, stats: &NormStats) -> Self {
        let n = net.n_buses();
        let m = edges.len();
        let mut incidence = vec![0.0; n * m];
        let mut send = Vec::with_capacity(m);
        let mut partner = Vec::with_capacity(m);
        let (mut v_scale, mut rx, mut g, mut b, mut y2, mut th) =
            (vec![], vec![], vec![], vec![], vec![], vec![]);
        for (k, e) in edges.iter().enumerate() {
            let br = &net.branches[e.branch];
            incidence[e.from * m + k] = 1.0;
            send.push(e.from);
            partner.push(
                edges
                    .iter()
                    .position(|o| o.branch == e.branch && o.dir != e.dir)
                    .unwrap_or(k),
            );
            v_scale.push(match e.dir {
                Direction::Forward => 1.0 / (br.tap * br.tap),
                Direction::Reverse => 1.0,
            });
            rx.extend([br.r, br.x]);
            let y = br.series_admittance();
            g.push(y.re);
            b.push(y.im);
            y2.push(y.norm_sqr());
            th.push(targets.theta[e.from] - targets.theta[e.to]);
        }
        let shunt = shunt_coefficients(net)
            .into_iter()
            .flat_map(|(gs, bs)| [-gs, bs])
            .collect();
        let col = |v: Vec<f64>| Tensor::matrix(m, 1, v).expect("column");
        Self {
            n,
            n_edges: m,
            bus_target_norm: stats.bus_out.normalize(&targets.bus),
            branch_target_norm: stats.branch_out.normalize(&targets.branch),
            incidence: Tensor::matrix(n, m, incidence).expect("incidence"),
            shunt: Tensor::matrix(n, 2, shunt).expect("shunt"),
            send,
            partner,
            v_scale: col(v_scale),
            rx: Tensor::matrix(m, 2, rx).expect("rx"),
            g: col(g),
            b: col(b),
            y2: col(y2),
            theta_diff: col(th),
        }
    }
}

/// Unweighted terms of one sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleTerms<'g> {
    pub bus_mse: Var<'g>,
    pub branch_mse: Var<'g>,
    pub kcl: Var<'g>,
    pub branch_loss: Var<'g>,
    pub angle: Var<'g>,
    /// Directed edges left out of the angle term (near-singular).
    pub skipped_angles: usize,
}

fn zero(g: &Graph) -> Var<'_> {
    g.constant(Tensor::scalar(0.0))
}

/// Mean squared error of standardized bus and branch outputs.
pub fn data_terms<'g>(
    g: &'g Graph,
    pred: &Prediction<'g>,
    ctx: &LossContext,
) -> Result<(Var<'g>, Var<'g>), TensorError> {
    let bus = pred
        .bus_norm
        .sub(g.constant(ctx.bus_target_norm.clone()))?
        .square()
        .mean();
    let branch = if ctx.n_edges == 0 {
        zero(g)
    } else {
        pred.branch_norm
            .sub(g.constant(ctx.branch_target_norm.clone()))?
            .square()
            .mean()
    };
    Ok((bus, branch))
}

/// Mean over buses of `|ΔP_i| + |ΔQ_i|` with
/// `ΔP_i = P_i − Σ P_l − V_i² G_i` and `ΔQ_i = Q_i − Σ Q_l + V_i² B_i`.
pub fn kcl_term<'g>(g: &'g Graph, pred: &Prediction<'g>, ctx: &LossContext) -> Result<Var<'g>, TensorError> {
    let n = ctx.n;
    let pq = pred.bus.slice_cols(0, 2)?;
    let v2 = pred.bus.slice_cols(2, 3)?.square().broadcast_to(n, 2)?;
    let mut r = pq.add(v2.mul(g.constant(ctx.shunt.clone()))?)?;
    if ctx.n_edges > 0 {
        r = r.sub(g.constant(ctx.incidence.clone()).matmul(pred.branch)?)?;
    }
    Ok(r.abs().sum().scale(1.0 / n as f64))
}

/// Squared tap-referred sending-end voltage per directed edge.
fn v_send_sq<'g>(g: &'g Graph, pred: &Prediction<'g>, ctx: &LossContext) -> Result<Var<'g>, TensorError> {
    pred.bus
        .slice_cols(2, 3)?
        .gather_rows(&ctx.send)?
        .square()
        .mul(g.constant(ctx.v_scale.clone()))
}

/// Mean over directed edges of `| |I²r| − |P_ij + P_ji| | + | |I²x| − |Q_ij + Q_ji| |`
/// with `I² = (P² + Q²) / V_send²`.
pub fn branch_loss_term<'g>(
    g: &'g Graph,
    pred: &Prediction<'g>,
    ctx: &LossContext,
) -> Result<Var<'g>, TensorError> {
    let m = ctx.n_edges;
    if m == 0 {
        return Ok(zero(g));
    }
    let vs2 = v_send_sq(g, pred, ctx)?;
    if vs2.value().data().iter().any(|&x| x < V2_FLOOR) {
        log::warn!("sending-end voltage below floor in branch-loss term");
    }
    let s2 = pred
        .branch
        .square()
        .matmul(g.constant(Tensor::full(&[2, 1], 1.0)))?;
    let i2 = s2.div(vs2.clamp_min(V2_FLOOR))?;
    let physical = i2.broadcast_to(m, 2)?.mul(g.constant(ctx.rx.clone()))?.abs();
    let predicted = pred.branch.add(pred.branch.gather_rows(&ctx.partner)?)?.abs();
    Ok(physical.sub(predicted)?.abs().sum().scale(1.0 / m as f64))
}

/// Mean absolute error between angle differences implied by predicted flows
/// and the true ones. Edges whose denominator is within
/// [`SINGULAR_DENOMINATOR`] of zero are skipped and counted.
pub fn angle_term<'g>(
    g: &'g Graph,
    pred: &Prediction<'g>,
    ctx: &LossContext,
) -> Result<(Var<'g>, usize), TensorError> {
    let m = ctx.n_edges;
    if m == 0 {
        return Ok((zero(g), 0));
    }
    let p = pred.branch.slice_cols(0, 1)?;
    let q = pred.branch.slice_cols(1, 2)?;
    let (gc, bc) = (g.constant(ctx.g.clone()), g.constant(ctx.b.clone()));
    let num = p.mul(bc)?.add(q.mul(gc)?)?;
    let den = p
        .mul(gc)?
        .sub(q.mul(bc)?)?
        .sub(v_send_sq(g, pred, ctx)?.mul(g.constant(ctx.y2.clone()))?)?;
    let keep: Vec<usize> = den
        .value()
        .data()
        .iter()
        .enumerate()
        .filter(|(_, d)| d.abs() > SINGULAR_DENOMINATOR)
        .map(|(i, _)| i)
        .collect();
    let skipped = m - keep.len();
    if keep.is_empty() {
        return Ok((zero(g), skipped));
    }
    let theta = num.gather_rows(&keep)?.div(den.gather_rows(&keep)?)?.atan();
    let target = g.constant(ctx.theta_diff.clone()).gather_rows(&keep)?;
    let err = theta.sub(target)?.abs().mean();
    Ok((err, skipped))
}

pub fn sample_terms<'g>(
    g: &'g Graph,
    pred: &Prediction<'g>,
    ctx: &LossContext,
) -> Result<SampleTerms<'g>, TensorError> {
    let (bus_mse, branch_mse) = data_terms(g, pred, ctx)?;
    let (angle, skipped_angles) = angle_term(g, pred, ctx)?;
    Ok(SampleTerms {
        bus_mse,
        branch_mse,
        kcl: kcl_term(g, pred, ctx)?,
        branch_loss: branch_loss_term(g, pred, ctx)?,
        angle,
        skipped_angles,
    })
}

/// Batch-averaged loss values. The weighted fields sum to `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub data: f64,
    pub kcl: f64,
    pub loss_term: f64,
    pub angle_term: f64,
    pub raw_bus_mse: f64,
    pub raw_branch_mse: f64,
    pub raw_kcl: f64,
    pub raw_branch_loss: f64,
    pub raw_angle: f64,
    pub skipped_angles: usize,
}

/// `ε_data (ε_N L_bus + ε_E L_branch) + ε_phy (ε_KCL L_KCL + ε_loss L_loss + ε_angle L_angle)`,
/// averaged over the batch.
pub fn hybrid_loss<'g>(
    g: &'g Graph,
    preds: &[Prediction<'g>],
    ctxs: &[&LossContext],
    w: &LossWeights,
) -> Result<(Var<'g>, LossBreakdown), TensorError> {
    assert_eq!(preds.len(), ctxs.len(), "one context per prediction");
    let inv_b = 1.0 / preds.len().max(1) as f64;
    let mut parts = Vec::new();
    let mut bd = LossBreakdown::default();
    let factors = [
        w.data * w.n,
        w.data * w.e,
        w.phy * w.kcl,
        w.phy * w.loss,
        w.phy * w.angle,
    ];
    for (pred, ctx) in preds.iter().zip(ctxs) {
        let t = sample_terms(g, pred, ctx)?;
        let vars = [t.bus_mse, t.branch_mse, t.kcl, t.branch_loss, t.angle];
        let vals: Vec<f64> = vars.iter().map(|v| v.item()).collect();
        bd.raw_bus_mse += vals[0] * inv_b;
        bd.raw_branch_mse += vals[1] * inv_b;
        bd.raw_kcl += vals[2] * inv_b;
        bd.raw_branch_loss += vals[3] * inv_b;
        bd.raw_angle += vals[4] * inv_b;
        bd.skipped_angles += t.skipped_angles;
        for (v, f) in vars.iter().zip(factors) {
            if f != 0.0 {
                parts.push(v.scale(f * inv_b));
            }
        }
    }
    bd.data = factors[0] * bd.raw_bus_mse + factors[1] * bd.raw_branch_mse;
    bd.kcl = factors[2] * bd.raw_kcl;
    bd.loss_term = factors[3] * bd.raw_branch_loss;
    bd.angle_term = factors[4] * bd.raw_angle;
    let mut total = zero(g);
    for p in parts {
        total = total.add(p)?;
    }
    bd.total = total.item();
    Ok((total, bd))
}
