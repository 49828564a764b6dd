//! Phase-angle recovery from voltage magnitudes and branch flows.
//!
//! A single branch's angle difference follows from inverting the series
//! flow equation; network-wide angles come from a breadth-first walk out of
//! the slack bus along a spanning tree.

use std::collections::VecDeque;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{Branch, Network};
use crate::pf::{directed_index, Direction};

/// Denominators closer to zero than this are treated as singular.
pub const SINGULAR_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("branch angle is singular: denominator {denominator:e}")]
pub struct SingularBranch {
    pub denominator: f64,
}

/// Numerator and denominator of `tan θ_sr` for a measured series flow.
pub fn angle_ratio_terms(p: f64, q: f64, v_send: f64, branch: &Branch, dir: Direction) -> (f64, f64) {
    let y = branch.series_admittance();
    let (g, b) = (y.re, y.im);
    let vs = dir.effective_voltage(v_send, branch);
    let num = b * p + g * q;
    let den = g * p - b * q - vs * vs * (g * g + b * b);
    (num, den)
}

/// Angle difference `θ_send − θ_recv` implied by a series flow `p + jq`
/// measured at the sending end. Range (−π/2, π/2).
pub fn branch_angle_diff(
    p: f64,
    q: f64,
    v_send: f64,
    branch: &Branch,
    dir: Direction,
) -> Result<f64, SingularBranch> {
    let (num, den) = angle_ratio_terms(p, q, v_send, branch, dir);
    if !(den.abs() > SINGULAR_DENOMINATOR) {
        return Err(SingularBranch { denominator: den });
    }
    Ok((num / den).atan())
}

/// Queue discipline for neighbour expansion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum NeighborOrder {
    /// Neighbours in branch order.
    #[default]
    BranchOrder,
    /// Neighbour lists shuffled with the given seed.
    Shuffled(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleResidual {
    pub branch: usize,
    /// `|(θ_from − θ_to) − Δθ_branch|` for a non-tree branch.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleAssignment {
    /// Radians; NaN for buses the walk could not reach.
    pub theta: Vec<f64>,
    pub visited: Vec<usize>,
    pub slack: usize,
    pub slack_angle: f64,
    pub unassigned: Vec<usize>,
    /// Branches skipped because their angle difference was singular.
    pub singular_branches: Vec<usize>,
    pub cycle_residuals: Vec<CycleResidual>,
}

impl AngleAssignment {
    pub fn max_cycle_residual(&self) -> f64 {
        self.cycle_residuals
            .iter()
            .fold(0.0, |m, c| m.max(c.residual))
    }

    pub fn is_complete(&self) -> bool {
        self.unassigned.is_empty()
    }
}

/// Breadth-first phase angle recovery.
///
/// `flows` holds series flows indexed by [`directed_index`] (two per
/// branch). Each newly reached bus `n` adjacent to a settled bus `s` gets
/// `θ_n = θ_s − Δθ_sn`, with `Δθ_sn` evaluated from the flow measured at `s`.
/// Non-tree branches only contribute cycle-consistency residuals.
pub fn bfs_par(
    net: &Network,
    v: &[f64],
    flows: &[Complex64],
    slack: usize,
    slack_angle: f64,
    order: NeighborOrder,
) -> AngleAssignment {
    let n = net.n_buses();
    let mut adj = net.adjacency_lists();
    if let NeighborOrder::Shuffled(seed) = order {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for list in &mut adj {
            list.shuffle(&mut rng);
        }
    }

    let diff = |k: usize, from_bus: usize| -> Result<f64, SingularBranch> {
        let br = &net.branches[k];
        let dir = if from_bus == br.from {
            Direction::Forward
        } else {
            Direction::Reverse
        };
        let s = flows[directed_index(k, dir)];
        branch_angle_diff(s.re, s.im, v[from_bus], br, dir)
    };

    let mut theta = vec![f64::NAN; n];
    let mut tree_edge = vec![false; net.branches.len()];
    let mut singular = Vec::new();
    theta[slack] = slack_angle;
    let mut visited = vec![slack];
    let mut queue = VecDeque::from([slack]);
    while let Some(s) = queue.pop_front() {
        for &(nb, k) in &adj[s] {
            if !theta[nb].is_nan() {
                continue;
            }
            match diff(k, s) {
                Ok(d) => {
                    theta[nb] = theta[s] - d;
                    tree_edge[k] = true;
                    visited.push(nb);
                    queue.push_back(nb);
                }
                Err(_) => singular.push(k),
            }
        }
    }

    let cycle_residuals = net
        .in_service()
        .filter(|(k, br)| !tree_edge[*k] && !theta[br.from].is_nan() && !theta[br.to].is_nan())
        .filter_map(|(k, br)| {
            diff(k, br.from).ok().map(|d| CycleResidual {
                branch: k,
                residual: ((theta[br.from] - theta[br.to]) - d).abs(),
            })
        })
        .collect();
    singular.sort_unstable();
    singular.dedup();

    AngleAssignment {
        unassigned: (0..n).filter(|&i| theta[i].is_nan()).collect(),
        theta,
        visited,
        slack,
        slack_angle,
        singular_branches: singular,
        cycle_residuals,
    }
}
