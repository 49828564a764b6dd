//! Grid data model, admittance assembly, graph statistics and case-file I/O.
//!
//! All quantities are per-unit on `base_mva`. Bus ids are positional: the
//! bus at index `k` of `Network::buses` must carry `id == k`, and branch
//! endpoints refer to those ids.
//!
//! Branches use the π-model with an off-nominal tap on the `from` side:
//!
//! ```text
//! Yff = (y + y_m) / t²    Yft = -y / t
//! Ytf = -y / t            Ytt = y + y_m
//! ```
//!
//! where `y = 1 / (r + jx)` and `y_m = g_m + j b_m` is the charging admittance
//! placed at each end.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::linalg::{symmetric_eigenvalues, Dense};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BusKind {
    PQ,
    PV,
    Slack,
    /// Padding row of a model input. Never valid inside a [`Network`].
    Virtual,
}

impl BusKind {
    pub fn is_generator(self) -> bool {
        matches!(self, BusKind::PV | BusKind::Slack)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Net active injection (generation minus load).
    #[serde(rename = "p")]
    pub p_set: f64,
    /// Net reactive injection. Only prescribed for PQ buses.
    #[serde(rename = "q")]
    pub q_set: f64,
    /// Voltage setpoint for PV and slack buses, initial guess otherwise.
    #[serde(rename = "v")]
    pub v_set: f64,
    #[serde(rename = "qmin")]
    pub q_min: f64,
    #[serde(rename = "qmax")]
    pub q_max: f64,
    #[serde(rename = "gsh")]
    pub g_sh: f64,
    #[serde(rename = "bsh")]
    pub b_sh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    #[serde(rename = "gm")]
    pub g_m: f64,
    #[serde(rename = "bm")]
    pub b_m: f64,
    pub tap: f64,
    pub status: bool,
}

impl Branch {
    /// Series admittance `g_L + j b_L = 1 / (r + jx)`.
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(self.r, self.x).inv()
    }

    pub fn charging(&self) -> Complex64 {
        Complex64::new(self.g_m, self.b_m)
    }

    /// Edge feature `[g_L, b_L, tap]`.
    pub fn edge_feature(&self) -> [f64; 3] {
        let y = self.series_admittance();
        [y.re, y.im, self.tap]
    }

    pub fn other_end(&self, bus: usize) -> usize {
        if bus == self.from {
            self.to
        } else {
            self.from
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    #[serde(rename = "baseMVA")]
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    /// Angle of the slack bus in radians.
    #[serde(
        rename = "refAngle",
        default,
        skip_serializing_if = "is_positive_zero"
    )]
    pub ref_angle: f64,
}

fn is_positive_zero(v: &f64) -> bool {
    v.to_bits() == 0
}

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("case file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid case JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("buses[{position}]: id {id} must equal its position")]
    BusIdOrder { position: usize, id: usize },
    #[error("buses[{bus}]: kind Virtual is only valid in padded model inputs")]
    VirtualBus { bus: usize },
    #[error("buses[{bus}]: qmin {q_min} exceeds qmax {q_max}")]
    ReactiveLimits { bus: usize, q_min: f64, q_max: f64 },
    #[error("buses[{bus}]: voltage setpoint {v} must be positive for {kind:?} buses")]
    VoltageSetpoint { bus: usize, kind: BusKind, v: f64 },
    #[error("no slack bus")]
    NoSlack,
    #[error("multiple slack buses: {first} and {second}")]
    MultipleSlack { first: usize, second: usize },
    #[error("branches[{branch}]: unknown bus reference {bus}")]
    UnknownBus { branch: usize, bus: usize },
    #[error("branches[{branch}]: from and to are both bus {bus}")]
    SelfLoop { branch: usize, bus: usize },
    #[error("branches[{branch}]: zero series impedance")]
    ZeroImpedance { branch: usize },
    #[error("branches[{branch}]: tap ratio {tap} must be positive")]
    BadTap { branch: usize, tap: f64 },
    #[error("{field} is not finite")]
    NonFinite { field: String },
    #[error("baseMVA must be positive, got {0}")]
    BaseMva(f64),
    #[error("buses {unreached:?} are not connected to the slack bus")]
    Disconnected { unreached: Vec<usize> },
}

impl Network {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn in_service(&self) -> impl Iterator<Item = (usize, &Branch)> {
        self.branches.iter().enumerate().filter(|(_, b)| b.status)
    }

    pub fn n_in_service(&self) -> usize {
        self.branches.iter().filter(|b| b.status).count()
    }

    /// Checks every structural invariant, including exactly one slack bus.
    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.base_mva.is_finite() && self.base_mva > 0.0) {
            return Err(GridError::BaseMva(self.base_mva));
        }
        if !self.ref_angle.is_finite() {
            return Err(GridError::NonFinite {
                field: "refAngle".into(),
            });
        }
        let mut slack = None;
        for (k, bus) in self.buses.iter().enumerate() {
            if bus.id != k {
                return Err(GridError::BusIdOrder {
                    position: k,
                    id: bus.id,
                });
            }
            let fields = [
                ("p", bus.p_set),
                ("q", bus.q_set),
                ("v", bus.v_set),
                ("qmin", bus.q_min),
                ("qmax", bus.q_max),
                ("gsh", bus.g_sh),
                ("bsh", bus.b_sh),
            ];
            if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
                return Err(GridError::NonFinite {
                    field: format!("buses[{k}].{name}"),
                });
            }
            if bus.q_min > bus.q_max {
                return Err(GridError::ReactiveLimits {
                    bus: k,
                    q_min: bus.q_min,
                    q_max: bus.q_max,
                });
            }
            match bus.kind {
                BusKind::Virtual => return Err(GridError::VirtualBus { bus: k }),
                BusKind::PV | BusKind::Slack if bus.v_set <= 0.0 => {
                    return Err(GridError::VoltageSetpoint {
                        bus: k,
                        kind: bus.kind,
                        v: bus.v_set,
                    })
                }
                _ => {}
            }
            if bus.kind == BusKind::Slack {
                if let Some(first) = slack {
                    return Err(GridError::MultipleSlack { first, second: k });
                }
                slack = Some(k);
            }
        }
        if slack.is_none() {
            return Err(GridError::NoSlack);
        }
        let n = self.buses.len();
        for (k, br) in self.branches.iter().enumerate() {
            for bus in [br.from, br.to] {
                if bus >= n {
                    return Err(GridError::UnknownBus { branch: k, bus });
                }
            }
            if br.from == br.to {
                return Err(GridError::SelfLoop {
                    branch: k,
                    bus: br.from,
                });
            }
            let fields = [
                ("r", br.r),
                ("x", br.x),
                ("gm", br.g_m),
                ("bm", br.b_m),
                ("tap", br.tap),
            ];
            if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
                return Err(GridError::NonFinite {
                    field: format!("branches[{k}].{name}"),
                });
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(GridError::ZeroImpedance { branch: k });
            }
            if !(br.tap > 0.0) {
                return Err(GridError::BadTap {
                    branch: k,
                    tap: br.tap,
                });
            }
            let y = br.series_admittance();
            if !(y.re.is_finite() && y.im.is_finite()) {
                return Err(GridError::ZeroImpedance { branch: k });
            }
        }
        Ok(())
    }

    pub fn slack(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.kind == BusKind::Slack)
    }

    /// In-service neighbours per bus as `(neighbour, branch index)`, in
    /// branch order.
    pub fn adjacency_lists(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n_buses()];
        for (k, br) in self.in_service() {
            adj[br.from].push((br.to, k));
            adj[br.to].push((br.from, k));
        }
        adj
    }

    /// Buses reachable from `start` over in-service branches, in BFS order.
    pub fn reachable_from(&self, start: usize) -> Vec<usize> {
        let adj = self.adjacency_lists();
        let mut seen = vec![false; self.n_buses()];
        let mut order = vec![start];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    order.push(v);
                    queue.push_back(v);
                }
            }
        }
        order
    }

    pub fn is_connected(&self) -> bool {
        self.n_buses() == 0 || self.reachable_from(0).len() == self.n_buses()
    }

    /// Fails with the list of buses not reachable from the slack.
    pub fn check_connected(&self) -> Result<(), GridError> {
        let slack = self.slack().ok_or(GridError::NoSlack)?;
        let reached = self.reachable_from(slack);
        if reached.len() == self.n_buses() {
            return Ok(());
        }
        let mut seen = vec![false; self.n_buses()];
        for b in reached {
            seen[b] = true;
        }
        Err(GridError::Disconnected {
            unreached: (0..self.n_buses()).filter(|&b| !seen[b]).collect(),
        })
    }

    /// In-service branches whose removal disconnects their component.
    /// Parallel branches are never bridges.
    pub fn bridges(&self) -> Vec<usize> {
        let n = self.n_buses();
        let adj = self.adjacency_lists();
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0usize; n];
        let mut timer = 0;
        let mut out = Vec::new();
        for root in 0..n {
            if disc[root] != usize::MAX {
                continue;
            }
            // (vertex, branch used to enter, next adjacency index)
            let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(root, None, 0)];
            disc[root] = timer;
            low[root] = timer;
            timer += 1;
            while let Some(frame) = stack.last_mut() {
                let (u, via, idx) = *frame;
                if idx < adj[u].len() {
                    frame.2 += 1;
                    let (v, k) = adj[u][idx];
                    if Some(k) == via {
                        continue;
                    }
                    if disc[v] == usize::MAX {
                        disc[v] = timer;
                        low[v] = timer;
                        timer += 1;
                        stack.push((v, Some(k), 0));
                    } else {
                        low[u] = low[u].min(disc[v]);
                    }
                } else {
                    stack.pop();
                    if let (Some(&(p, _, _)), Some(k)) = (stack.last(), via) {
                        low[p] = low[p].min(low[u]);
                        if low[u] > disc[p] {
                            out.push(k);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Nodal admittance matrix. Out-of-service branches contribute nothing.
pub fn build_ybus(net: &Network) -> Dense<Complex64> {
    let n = net.n_buses();
    let mut y = Dense::zeros(n, n);
    for (i, bus) in net.buses.iter().enumerate() {
        y[(i, i)] += Complex64::new(bus.g_sh, bus.b_sh);
    }
    for (_, br) in net.in_service() {
        let ys = br.series_admittance();
        let ym = br.charging();
        let t = br.tap;
        let (f, k) = (br.from, br.to);
        y[(f, f)] += (ys + ym) / (t * t);
        y[(k, k)] += ys + ym;
        y[(f, k)] -= ys / t;
        y[(k, f)] -= ys / t;
    }
    y
}

/// Per-branch edge feature, aligned with the in-service branch order.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFeature {
    pub branch: usize,
    pub from: usize,
    pub to: usize,
    /// `[g_L, b_L, tap]`
    pub feature: [f64; 3],
}

/// Weighted adjacency `A[i][j] = Σ |y_L|` over in-service branches between
/// `i` and `j`, plus the edge feature of each in-service branch.
pub fn weighted_adjacency(net: &Network) -> (Dense<f64>, Vec<EdgeFeature>) {
    let n = net.n_buses();
    let mut a = Dense::zeros(n, n);
    let mut edges = Vec::new();
    for (k, br) in net.in_service() {
        let w = br.series_admittance().norm();
        a[(br.from, br.to)] += w;
        a[(br.to, br.from)] += w;
        edges.push(EdgeFeature {
            branch: k,
            from: br.from,
            to: br.to,
            feature: br.edge_feature(),
        });
    }
    (a, edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_buses: usize,
    pub n_branches: usize,
    pub avg_degree: f64,
    pub algebraic_connectivity: f64,
    pub connected: bool,
}

/// Reactance-based edge weight `1 / |x|`; purely resistive branches fall
/// back to `|y_L|`.
fn reactance_weight(br: &Branch) -> f64 {
    if br.x != 0.0 {
        1.0 / br.x.abs()
    } else {
        br.series_admittance().norm()
    }
}

/// Second-smallest eigenvalue of `I - D^{-1/2} A D^{-1/2}`.
///
/// Returns `None` when some vertex has zero degree.
pub fn normalized_laplacian_fiedler(adj: &Dense<f64>) -> Option<f64> {
    let n = adj.rows();
    if n < 2 {
        return None;
    }
    let deg: Vec<f64> = (0..n).map(|i| adj.row(i).iter().sum()).collect();
    if deg.iter().any(|&d| d <= 0.0) {
        return None;
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut l = Dense::identity(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                l[(i, j)] = -adj[(i, j)] * inv_sqrt[i] * inv_sqrt[j];
            }
        }
    }
    Some(symmetric_eigenvalues(&l)[1])
}

/// Average degree and algebraic connectivity of the in-service graph.
///
/// Degrees count incident in-service branches. The connectivity uses the
/// normalized Laplacian of the `1/x` weighted adjacency and is reported as 0
/// for a disconnected graph.
pub fn graph_stats(net: &Network) -> GraphStats {
    let n = net.n_buses();
    let mut degree = vec![0usize; n];
    let mut w = Dense::zeros(n, n);
    for (_, br) in net.in_service() {
        degree[br.from] += 1;
        degree[br.to] += 1;
        let wt = reactance_weight(br);
        w[(br.from, br.to)] += wt;
        w[(br.to, br.from)] += wt;
    }
    let avg_degree = if n == 0 {
        0.0
    } else {
        degree.iter().sum::<usize>() as f64 / n as f64
    };
    let connected = n > 0 && net.is_connected();
    let algebraic_connectivity = if connected {
        normalized_laplacian_fiedler(&w).unwrap_or(0.0).max(0.0)
    } else {
        0.0
    };
    GraphStats {
        n_buses: n,
        n_branches: net.n_in_service(),
        avg_degree,
        algebraic_connectivity,
        connected,
    }
}

pub fn parse_case(text: &str) -> Result<Network, GridError> {
    let net: Network = serde_json::from_str(text)?;
    net.validate()?;
    Ok(net)
}

pub fn load_case(path: impl AsRef<Path>) -> Result<Network, GridError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_case(&text)
}

pub fn save_case(net: &Network, path: impl AsRef<Path>) -> Result<(), GridError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(net)?;
    fs::write(path, text).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })
}
