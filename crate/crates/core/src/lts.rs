//! Local topology slicing: subgraphs of solved parent cases with boundary
//! tie-lines replaced by equivalent loads, optional load perturbation and
//! branch outages, and JSON-Lines dataset generation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{graph_stats, BusKind, Network};
use crate::pf::{solve, terminal_flow, Direction, Init, PfError, PowerFlowSolution, SolveOptions};
use crate::rmgl::bus_features;

#[derive(Debug, thiserror::Error)]
pub enum LtsError {
    #[error("slice of {size} buses from bus {start} contains no generator")]
    NoGenerator { start: usize, size: usize },
    #[error("component of bus {start} has only {available} buses, {size} requested")]
    TooSmall {
        start: usize,
        size: usize,
        available: usize,
    },
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("re-solve did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error(transparent)]
    PowerFlow(#[from] PfError),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("no valid sample for index {index} after {attempts} attempts")]
    Exhausted { index: usize, attempts: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub parent_id: usize,
    pub start_bus: usize,
    pub seed: u64,
    pub index: usize,
    pub perturbed: bool,
    /// Opened branches, as sub-network branch indices.
    pub outages: Vec<usize>,
    /// Parent bus of every sub-network bus.
    pub bus_map: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicedSample {
    pub network: Network,
    pub solution: PowerFlowSolution,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub sizes: Vec<usize>,
    pub samples_per_size: usize,
    /// Relative load perturbation `m`; factors are drawn from `[1−m, 1+m]`.
    pub perturbation: f64,
    pub max_outages: usize,
    /// Perturb and re-solve every slice; when false, base slices are emitted.
    pub perturb: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            sizes: (25..=39).collect(),
            samples_per_size: 10,
            perturbation: 0.2,
            max_outages: 2,
            perturb: true,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn total(&self) -> usize {
        self.sizes.len() * self.samples_per_size
    }

    pub fn validate(&self, parent_sizes: &[usize]) -> Result<(), LtsError> {
        let smallest = parent_sizes.iter().copied().min().unwrap_or(0);
        if self.total() == 0 {
            return Err(LtsError::Spec("no samples requested".into()));
        }
        if parent_sizes.is_empty() {
            return Err(LtsError::Spec("no parent cases".into()));
        }
        if let Some(s) = self.sizes.iter().find(|&&s| s < 2 || s > smallest) {
            return Err(LtsError::Spec(format!("size {s} outside 2..={smallest}")));
        }
        if !(0.0..1.0).contains(&self.perturbation) {
            return Err(LtsError::Spec("perturbation must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Extracts a connected subgraph of `target_n` buses grown from `start_bus`.
///
/// At each step a bus is drawn uniformly from the current frontier. Every
/// branch crossing the boundary is removed and its terminal flow at the
/// interior end (series part plus charging) becomes an equivalent load on
/// that bus, so the restricted parent solution remains an exact solution of
/// the slice.
pub fn slice(
    parent: &Network,
    parent_sol: &PowerFlowSolution,
    start_bus: usize,
    target_n: usize,
    rng: &mut impl Rng,
) -> Result<SlicedSample, LtsError> {
    let n = parent.n_buses();
    let adj = parent.adjacency_lists();
    let mut inside = vec![false; n];
    let mut in_frontier = vec![false; n];
    let mut selected = vec![start_bus];
    inside[start_bus] = true;
    let mut frontier = Vec::new();
    let mut grow = |bus: usize, frontier: &mut Vec<usize>, inside: &[bool]| {
        for &(nb, _) in &adj[bus] {
            if !inside[nb] && !in_frontier[nb] {
                in_frontier[nb] = true;
                frontier.push(nb);
            }
        }
    };
    grow(start_bus, &mut frontier, &inside);
    while selected.len() < target_n {
        if frontier.is_empty() {
            return Err(LtsError::TooSmall {
                start: start_bus,
                size: target_n,
                available: selected.len(),
            });
        }
        let pick = frontier.swap_remove(rng.gen_range(0..frontier.len()));
        inside[pick] = true;
        selected.push(pick);
        grow(pick, &mut frontier, &inside);
    }
    selected.sort_unstable();
    if !selected.iter().any(|&b| parent.buses[b].kind.is_generator()) {
        return Err(LtsError::NoGenerator {
            start: start_bus,
            size: target_n,
        });
    }
    let mut new_id = vec![usize::MAX; n];
    for (k, &b) in selected.iter().enumerate() {
        new_id[b] = k;
    }

    let mut buses: Vec<_> = selected
        .iter()
        .enumerate()
        .map(|(k, &b)| {
            let mut bus = parent.buses[b].clone();
            bus.id = k;
            bus
        })
        .collect();
    let mut p: Vec<f64> = selected.iter().map(|&b| parent_sol.p[b]).collect();
    let mut q: Vec<f64> = selected.iter().map(|&b| parent_sol.q[b]).collect();
    let mut branches = Vec::new();
    let mut s_branch = Vec::new();
    for (k, br) in parent.branches.iter().enumerate() {
        let (fi, ti) = (inside[br.from], inside[br.to]);
        if fi && ti {
            let mut b = br.clone();
            b.from = new_id[br.from];
            b.to = new_id[br.to];
            branches.push(b);
            s_branch.push(parent_sol.flow(k, Direction::Forward));
            s_branch.push(parent_sol.flow(k, Direction::Reverse));
        } else if (fi || ti) && br.status {
            let dir = if fi { Direction::Forward } else { Direction::Reverse };
            let s = dir.sending(br);
            let r = dir.receiving(br);
            let tie = terminal_flow(
                parent_sol.v[s],
                parent_sol.v[r],
                parent_sol.theta[s] - parent_sol.theta[r],
                br,
                dir,
            );
            let bus = &mut buses[new_id[s]];
            bus.p_set -= tie.re;
            bus.q_set -= tie.im;
            bus.q_min -= tie.im;
            bus.q_max -= tie.im;
            p[new_id[s]] -= tie.re;
            q[new_id[s]] -= tie.im;
        }
    }

    let v: Vec<f64> = selected.iter().map(|&b| parent_sol.v[b]).collect();
    let theta: Vec<f64> = selected.iter().map(|&b| parent_sol.theta[b]).collect();
    let slack = match buses.iter().position(|b| b.kind == BusKind::Slack) {
        Some(s) => s,
        None => {
            let s = buses
                .iter()
                .enumerate()
                .filter(|(_, b)| b.kind == BusKind::PV)
                .fold(None::<(usize, f64)>, |best, (i, b)| match best {
                    Some((_, bv)) if bv >= b.v_set => best,
                    _ => Some((i, b.v_set)),
                })
                .map(|(i, _)| i)
                .expect("a generator is present");
            buses[s].kind = BusKind::Slack;
            buses[s].v_set = v[s];
            s
        }
    };
    let network = Network {
        base_mva: parent.base_mva,
        buses,
        branches,
        ref_angle: theta[slack],
    };
    Ok(SlicedSample {
        network,
        solution: PowerFlowSolution {
            v,
            theta,
            p,
            q,
            s_branch,
        },
        provenance: Provenance {
            parent_id: 0,
            start_bus,
            seed: 0,
            index: 0,
            perturbed: false,
            outages: Vec::new(),
            bus_map: selected,
        },
    })
}

/// Scales loads, redispatches generation, opens up to `max_outages`
/// non-bridge branches and re-solves from the sample's own solution.
///
/// PQ injections are scaled by independent factors in `[1−m, 1+m]` for P
/// and Q. PV active injections are scaled uniformly by the ratio of new to
/// old total PQ load; the slack absorbs the remainder.
pub fn perturb_and_resolve(
    sample: &SlicedSample,
    spec: &DatasetSpec,
    opts: &SolveOptions,
    rng: &mut impl Rng,
) -> Result<SlicedSample, LtsError> {
    let mut net = sample.network.clone();
    let m = spec.perturbation;
    if m > 0.0 {
        let load = |net: &Network| -> f64 {
            net.buses
                .iter()
                .filter(|b| b.kind == BusKind::PQ)
                .map(|b| -b.p_set)
                .sum()
        };
        let before = load(&net);
        for b in net.buses.iter_mut().filter(|b| b.kind == BusKind::PQ) {
            b.p_set *= rng.gen_range(1.0 - m..=1.0 + m);
            b.q_set *= rng.gen_range(1.0 - m..=1.0 + m);
            b.q_min = b.q_set;
            b.q_max = b.q_set;
        }
        let after = load(&net);
        let ratio = if before.abs() > 1e-9 { after / before } else { 1.0 };
        for b in net.buses.iter_mut().filter(|b| b.kind == BusKind::PV) {
            b.p_set *= ratio;
        }
    }
    let mut outages = Vec::new();
    let n_out = if spec.max_outages > 0 {
        rng.gen_range(0..=spec.max_outages)
    } else {
        0
    };
    for _ in 0..n_out {
        let bridges = net.bridges();
        let candidates: Vec<usize> = net
            .in_service()
            .map(|(k, _)| k)
            .filter(|k| !bridges.contains(k))
            .collect();
        let Some(&k) = candidates.choose(rng) else {
            break;
        };
        net.branches[k].status = false;
        outages.push(k);
    }
    let init = Init::Warm {
        v: sample.solution.v.clone(),
        theta: sample.solution.theta.clone(),
    };
    let (solution, report) = solve(&net, &init, opts)?;
    if !report.converged {
        return Err(LtsError::NotConverged {
            iterations: report.iterations,
        });
    }
    let mut provenance = sample.provenance.clone();
    provenance.perturbed = true;
    provenance.outages = outages;
    Ok(SlicedSample {
        network: net,
        solution,
        provenance,
    })
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub provenance: Provenance,
    pub network: Network,
    /// Per bus `[p, q, v, qmin, qmax, g_self, b_self]`.
    pub inputs: Vec<[f64; 7]>,
    /// Per bus `[p, q, v]`.
    pub bus_targets: Vec<[f64; 3]>,
    /// Per directed branch `[p, q]`, forward then reverse for each branch.
    pub branch_targets: Vec<[f64; 2]>,
    /// Radians. Kept for evaluation only.
    pub theta: Vec<f64>,
    pub slack: usize,
}

impl DatasetRecord {
    pub fn from_sample(s: &SlicedSample) -> Self {
        let sol = &s.solution;
        Self {
            provenance: s.provenance.clone(),
            inputs: bus_features(&s.network),
            bus_targets: (0..sol.v.len()).map(|i| [sol.p[i], sol.q[i], sol.v[i]]).collect(),
            branch_targets: sol.s_branch.iter().map(|c| [c.re, c.im]).collect(),
            theta: sol.theta.clone(),
            slack: s.network.slack().unwrap_or(0),
            network: s.network.clone(),
        }
    }

    pub fn solution(&self) -> PowerFlowSolution {
        PowerFlowSolution {
            v: self.bus_targets.iter().map(|t| t[2]).collect(),
            theta: self.theta.clone(),
            p: self.bus_targets.iter().map(|t| t[0]).collect(),
            q: self.bus_targets.iter().map(|t| t[1]).collect(),
            s_branch: self
                .branch_targets
                .iter()
                .map(|t| Complex64::new(t[0], t[1]))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBucket {
    pub size: usize,
    pub count: usize,
    pub discarded: usize,
    pub avg_degree: Spread,
    pub algebraic_connectivity: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub samples: usize,
    pub discarded: usize,
    pub max_base_mismatch: f64,
    pub buckets: Vec<SizeBucket>,
    pub wall_time: f64,
}

/// Attempts per sample before generation gives up.
pub const MAX_ATTEMPTS: usize = 200;

/// Random stream of sample `index`, independent of execution order.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

struct Generated {
    sample: SlicedSample,
    discarded: usize,
    base_mismatch: f64,
}

fn generate_one(
    parents: &[(Network, PowerFlowSolution)],
    spec: &DatasetSpec,
    opts: &SolveOptions,
    index: usize,
) -> Result<Generated, LtsError> {
    let size = spec.sizes[index / spec.samples_per_size];
    let parent_id = index % parents.len();
    let (parent, sol) = &parents[parent_id];
    let mut rng = sample_rng(spec.seed, index);
    let mut discarded = 0;
    for _ in 0..MAX_ATTEMPTS {
        let start = rng.gen_range(0..parent.n_buses());
        let mut base = match slice(parent, sol, start, size, &mut rng) {
            Ok(s) => s,
            Err(LtsError::NoGenerator { .. } | LtsError::TooSmall { .. }) => continue,
            Err(e) => return Err(e),
        };
        base.provenance.parent_id = parent_id;
        base.provenance.seed = spec.seed;
        base.provenance.index = index;
        let base_mismatch = crate::pf::mismatch(&base.network, &base.solution.v, &base.solution.theta).max_abs();
        if !spec.perturb {
            return Ok(Generated {
                sample: base,
                discarded,
                base_mismatch,
            });
        }
        match perturb_and_resolve(&base, spec, opts, &mut rng) {
            Ok(sample) => {
                return Ok(Generated {
                    sample,
                    discarded,
                    base_mismatch,
                })
            }
            Err(LtsError::NotConverged { .. } | LtsError::PowerFlow(_)) => {
                log::debug!("sample {index}: re-solve failed, discarding");
                discarded += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Err(LtsError::Exhausted {
        index,
        attempts: MAX_ATTEMPTS,
    })
}

/// Generates every sample of `spec` in index order. The result does not
/// depend on how many worker threads run.
pub fn generate_samples(
    parents: &[(Network, PowerFlowSolution)],
    spec: &DatasetSpec,
    opts: &SolveOptions,
    workers: usize,
) -> Result<(Vec<SlicedSample>, GenerationReport), LtsError> {
    let start = Instant::now();
    let sizes: Vec<usize> = parents.iter().map(|(n, _)| n.n_buses()).collect();
    spec.validate(&sizes)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| LtsError::Spec(e.to_string()))?;
    let results: Vec<Result<Generated, LtsError>> = pool.install(|| {
        (0..spec.total())
            .into_par_iter()
            .map(|i| generate_one(parents, spec, opts, i))
            .collect()
    });

    let mut samples = Vec::with_capacity(results.len());
    let mut buckets: BTreeMap<usize, (usize, usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut max_base_mismatch = 0.0_f64;
    let mut discarded = 0;
    for r in results {
        let g = r?;
        let st = graph_stats(&g.sample.network);
        let b = buckets.entry(g.sample.network.n_buses()).or_default();
        b.0 += 1;
        b.1 += g.discarded;
        b.2.push(st.avg_degree);
        b.3.push(st.algebraic_connectivity);
        discarded += g.discarded;
        max_base_mismatch = max_base_mismatch.max(g.base_mismatch);
        samples.push(g.sample);
    }
    let report = GenerationReport {
        samples: samples.len(),
        discarded,
        max_base_mismatch,
        buckets: buckets
            .into_iter()
            .map(|(size, (count, disc, deg, conn))| SizeBucket {
                size,
                count,
                discarded: disc,
                avg_degree: Spread::of(&deg),
                algebraic_connectivity: Spread::of(&conn),
            })
            .collect(),
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((samples, report))
}

pub fn write_dataset(path: &Path, samples: &[SlicedSample]) -> Result<(), LtsError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        let line = serde_json::to_string(&DatasetRecord::from_sample(s))
            .map_err(|e| LtsError::Json { line: s.provenance.index + 1, source: e })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Generates the dataset, writes it as JSON Lines and returns the report.
pub fn generate_dataset(
    parents: &[(Network, PowerFlowSolution)],
    spec: &DatasetSpec,
    opts: &SolveOptions,
    workers: usize,
    path: &Path,
) -> Result<GenerationReport, LtsError> {
    let (samples, report) = generate_samples(parents, spec, opts, workers)?;
    write_dataset(path, &samples)?;
    log::info!(
        "wrote {} samples ({} discarded) to {}",
        report.samples,
        report.discarded,
        path.display()
    );
    Ok(report)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, LtsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LtsError::Json { line: i + 1, source: e })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::ieee39;
    use crate::grid::tests::{bus, line};
    use crate::pf::mismatch;

    fn solved39() -> (Network, PowerFlowSolution) {
        let net = ieee39();
        let (sol, _) = solve(&net, &Init::Flat, &SolveOptions::default()).unwrap();
        (net, sol)
    }

    #[test]
    fn full_slice_is_the_parent() {
        let (net, sol) = solved39();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = slice(&net, &sol, 5, 39, &mut rng).unwrap();
        assert_eq!(s.network, net);
        assert_eq!(s.solution, sol);
    }

    #[test]
    fn chain_without_generator_is_rejected() {
        let net = Network {
            base_mva: 100.0,
            buses: vec![
                bus(0, BusKind::Slack, 0.0, 0.0, 1.0),
                bus(1, BusKind::PQ, -0.1, 0.0, 1.0),
                bus(2, BusKind::PQ, -0.1, 0.0, 1.0),
            ],
            branches: vec![line(0, 1, 0.01, 0.1), line(1, 2, 0.01, 0.1)],
            ref_angle: 0.0,
        };
        let (sol, _) = solve(&net, &Init::Flat, &SolveOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            slice(&net, &sol, 2, 2, &mut rng),
            Err(LtsError::NoGenerator { .. })
        ));
    }

    #[test]
    fn slices_are_exact_and_have_one_slack() {
        let (net, sol) = solved39();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut done = 0;
        while done < 40 {
            let start = rng.gen_range(0..39);
            let size = rng.gen_range(2..=39);
            let Ok(s) = slice(&net, &sol, start, size, &mut rng) else { continue };
            done += 1;
            assert_eq!(s.network.n_buses(), size);
            assert!(s.network.is_connected());
            s.network.validate().unwrap();
            let mm = mismatch(&s.network, &s.solution.v, &s.solution.theta);
            assert!(mm.max_abs() < 1e-8, "size {size}: {}", mm.max_abs());
            assert!(crate::pf::max_kcl_residual(&s.network, &s.solution) < 1e-8);
        }
    }

    #[test]
    fn redesignated_slack_uses_highest_setpoint() {
        let (net, sol) = solved39();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let start = rng.gen_range(0..39);
            let Ok(s) = slice(&net, &sol, start, 12, &mut rng) else { continue };
            if s.provenance.bus_map.contains(&30) {
                continue;
            }
            let slack = s.network.slack().unwrap();
            let pv_max = s
                .network
                .buses
                .iter()
                .filter(|b| b.kind == BusKind::PV)
                .map(|b| net.buses[s.provenance.bus_map[b.id]].v_set)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(net.buses[s.provenance.bus_map[slack]].v_set >= pv_max);
            assert_eq!(s.network.ref_angle, s.solution.theta[slack]);
            let (re, rep) = solve(&s.network, &Init::Flat, &SolveOptions::default()).unwrap();
            assert!(rep.converged);
            for (a, b) in re.theta.iter().zip(&s.solution.theta) {
                assert!((a - b).abs() < 1e-6);
            }
            return;
        }
        panic!("no slice without the parent slack found");
    }

    #[test]
    fn zero_perturbation_keeps_the_solution() {
        let (net, sol) = solved39();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = slice(&net, &sol, 3, 20, &mut rng).unwrap();
        let spec = DatasetSpec {
            perturbation: 0.0,
            max_outages: 0,
            ..Default::default()
        };
        let init = Init::Warm {
            v: base.solution.v.clone(),
            theta: base.solution.theta.clone(),
        };
        let (_, rep) = solve(&base.network, &init, &SolveOptions::default()).unwrap();
        assert_eq!(rep.iterations, 0);
        let out = perturb_and_resolve(&base, &spec, &SolveOptions::default(), &mut rng).unwrap();
        for (a, b) in out.solution.v.iter().zip(&base.solution.v) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ring_outage_keeps_connectivity() {
        let net = Network {
            base_mva: 100.0,
            buses: vec![
                bus(0, BusKind::Slack, 0.0, 0.0, 1.0),
                bus(1, BusKind::PQ, -0.2, -0.05, 1.0),
                bus(2, BusKind::PQ, -0.2, -0.05, 1.0),
                bus(3, BusKind::PQ, -0.2, -0.05, 1.0),
            ],
            branches: vec![
                line(0, 1, 0.01, 0.1),
                line(1, 2, 0.01, 0.1),
                line(2, 3, 0.01, 0.1),
                line(3, 0, 0.01, 0.1),
            ],
            ref_angle: 0.0,
        };
        let (sol, _) = solve(&net, &Init::Flat, &SolveOptions::default()).unwrap();
        let base = SlicedSample {
            network: net,
            solution: sol,
            provenance: Provenance {
                parent_id: 0,
                start_bus: 0,
                seed: 0,
                index: 0,
                perturbed: false,
                outages: vec![],
                bus_map: vec![0, 1, 2, 3],
            },
        };
        let spec = DatasetSpec {
            perturbation: 0.0,
            max_outages: 1,
            ..Default::default()
        };
        let mut opened = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = perturb_and_resolve(&base, &spec, &SolveOptions::default(), &mut rng).unwrap();
            assert!(out.network.is_connected());
            opened += out.provenance.outages.len();
        }
        assert!(opened > 0);
    }

    #[test]
    fn perturbed_loads_stay_in_band() {
        let (net, sol) = solved39();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = slice(&net, &sol, 10, 30, &mut rng).unwrap();
        let spec = DatasetSpec {
            max_outages: 2,
            ..Default::default()
        };
        let out = perturb_and_resolve(&base, &spec, &SolveOptions::default(), &mut rng).unwrap();
        for (a, b) in out.network.buses.iter().zip(&base.network.buses) {
            if a.kind == BusKind::PQ {
                assert!(a.p_set.abs() <= b.p_set.abs() * 1.2 + 1e-15);
                assert!(a.p_set.abs() >= b.p_set.abs() * 0.8 - 1e-15);
            }
        }
        assert!(mismatch(&out.network, &out.solution.v, &out.solution.theta).max_abs() < 1e-8);
    }

    #[test]
    fn dataset_is_deterministic_and_complete() {
        let parents = vec![solved39()];
        let spec = DatasetSpec {
            sizes: vec![12],
            samples_per_size: 10,
            seed: 7,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        let opts = SolveOptions::default();
        let ra = generate_dataset(&parents, &spec, &opts, 1, &a).unwrap();
        generate_dataset(&parents, &spec, &opts, 3, &b).unwrap();
        let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(ta, tb);
        assert_eq!(ra.samples, 10);
        let recs = read_dataset(&a).unwrap();
        assert_eq!(recs.len(), 10);
        for r in &recs {
            assert_eq!(r.network.n_buses(), 12);
            let sol = r.solution();
            assert!(mismatch(&r.network, &sol.v, &sol.theta).max_abs() < 1e-8);
        }
        assert!(ra.max_base_mismatch < 1e-8);
    }
}
