//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::Rng;
use sampfa::cases::ieee39;
use sampfa::grid::{Branch, Bus, BusKind, Network};
use sampfa::pf::{solve, Init, PowerFlowSolution, SolveOptions};

pub fn solved39() -> (Network, PowerFlowSolution) {
    let net = ieee39();
    let (sol, rep) = solve(&net, &Init::Flat, &SolveOptions::default()).unwrap();
    assert!(rep.converged);
    (net, sol)
}

/// Connected random network: a random spanning tree plus `extra` chords,
/// bus 0 as slack, about a quarter of the remaining buses PV.
pub fn random_network(rng: &mut impl Rng, n: usize, extra: usize) -> Network {
    let buses = (0..n)
        .map(|id| {
            let kind = if id == 0 {
                BusKind::Slack
            } else if rng.gen_bool(0.25) {
                BusKind::PV
            } else {
                BusKind::PQ
            };
            let (p, q) = match kind {
                BusKind::PV => (rng.gen_range(0.0..0.6), 0.0),
                _ => (-rng.gen_range(0.0..0.4), -rng.gen_range(-0.05..0.15)),
            };
            Bus {
                id,
                kind,
                p_set: if kind == BusKind::Slack { 0.0 } else { p },
                q_set: if kind == BusKind::PQ { q } else { 0.0 },
                v_set: if kind == BusKind::PQ { 1.0 } else { rng.gen_range(0.98..1.05) },
                q_min: -10.0,
                q_max: 10.0,
                g_sh: 0.0,
                b_sh: if rng.gen_bool(0.1) { rng.gen_range(0.0..0.2) } else { 0.0 },
            }
        })
        .collect();
    let mut branches = Vec::new();
    let mut link = |rng: &mut dyn rand::RngCore, from: usize, to: usize| {
        let tap = if rng.gen_bool(0.2) { rng.gen_range(0.95..1.05) } else { 1.0 };
        branches.push(Branch {
            from,
            to,
            r: rng.gen_range(0.002..0.03),
            x: rng.gen_range(0.02..0.2),
            g_m: 0.0,
            b_m: rng.gen_range(0.0..0.05),
            tap,
            status: true,
        });
    };
    for i in 1..n {
        let j = rng.gen_range(0..i);
        link(rng, j, i);
    }
    for _ in 0..extra {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            link(rng, a, b);
        }
    }
    Network {
        base_mva: 100.0,
        buses,
        branches,
        ref_angle: 0.0,
    }
}

/// A random network with `n` buses that solves from a flat start.
pub fn solved_random(rng: &mut impl Rng, n: usize, extra: usize) -> (Network, PowerFlowSolution) {
    loop {
        let net = random_network(rng, n, extra);
        if let Ok((sol, rep)) = solve(&net, &Init::Flat, &SolveOptions::default()) {
            if rep.converged {
                return (net, sol);
            }
        }
    }
}
