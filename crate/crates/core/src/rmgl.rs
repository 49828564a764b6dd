//! Reference-free multi-task graph learning model.
//!
//! Bus features and a bus-type matrix are embedded, mixed by a stack of
//! masked graph transformer layers (multi-head attention plus graph
//! attention over the branch set), and projected to per-bus `(P, Q, V)` and
//! per-directed-branch `(P, Q)` predictions. Bus angles never enter the
//! model.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{build_ybus, BusKind, Network};
use crate::pf::Direction;
use crate::tensor::{self, CheckpointError, Graph, Tensor, TensorError, Var};

pub const N_FEATURES: usize = 7;
pub const N_TYPES: usize = 3;
pub const N_EDGE: usize = 3;
pub const N_BUS_OUT: usize = 3;
pub const N_BRANCH_OUT: usize = 2;
const LN_EPS: f64 = 1e-5;
const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("checkpoint sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_max: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub gat_heads: usize,
    pub ffn_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_max: 48,
            d_model: 64,
            layers: 3,
            heads: 4,
            gat_heads: 2,
            ffn_width: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_max == 0 || self.d_model == 0 || self.ffn_width == 0 {
            return err("n_max, d_model and ffn_width must be positive");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return err("d_model must be a positive multiple of heads");
        }
        if self.gat_heads == 0 || self.d_model % self.gat_heads != 0 {
            return err("d_model must be a positive multiple of gat_heads");
        }
        Ok(())
    }
}

/// Per-column standardization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Affine {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Column statistics of `rows`; near-constant columns keep unit scale.
    pub fn fit<'a>(width: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        for r in rows {
            n += 1;
            for j in 0..width {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
        }
        if n == 0 {
            return Self::identity(width);
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = (0..width)
            .map(|j| {
                let var = (sq[j] / nf - mean[j] * mean[j]).max(0.0);
                let s = var.sqrt();
                if s > 1e-8 * (1.0 + mean[j].abs()) {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_row(&self, row: &[f64], out: &mut Vec<f64>) {
        out.extend(row.iter().enumerate().map(|(j, x)| (x - self.mean[j]) / self.std[j]));
    }

    pub fn normalize(&self, t: &Tensor) -> Tensor {
        let (rows, _) = t.dims2();
        let mut data = Vec::with_capacity(t.len());
        for i in 0..rows {
            self.normalize_row(t.row(i), &mut data);
        }
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    fn mean_row(&self) -> Tensor {
        Tensor::matrix(1, self.width(), self.mean.clone()).expect("row")
    }

    fn std_row(&self) -> Tensor {
        Tensor::matrix(1, self.width(), self.std.clone()).expect("row")
    }
}

/// Standardization of inputs, edge features and outputs, fitted on the
/// training set and stored with the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input: Affine,
    pub edge: Affine,
    pub bus_out: Affine,
    pub branch_out: Affine,
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            input: Affine::identity(N_FEATURES),
            edge: Affine::identity(N_EDGE),
            bus_out: Affine::identity(N_BUS_OUT),
            branch_out: Affine::identity(N_BRANCH_OUT),
        }
    }
}

impl NormStats {
    /// Fits statistics over the real rows of `inputs` and the matching
    /// targets (`[n, 3]` bus and `[2E, 2]` branch tensors).
    pub fn fit(inputs: &[ModelInput], bus_targets: &[Tensor], branch_targets: &[Tensor]) -> Self {
        let input = Affine::fit(
            N_FEATURES,
            inputs.iter().flat_map(|m| (0..m.real_n).map(move |i| m.x_in.row(i))),
        );
        let edge = Affine::fit(
            N_EDGE,
            inputs.iter().flat_map(|m| m.edges.iter().map(|e| &e.feature[..])),
        );
        let rows = |ts: &'_ [Tensor]| -> Vec<Vec<f64>> {
            ts.iter()
                .flat_map(|t| (0..t.dims2().0).map(move |i| t.row(i).to_vec()))
                .collect()
        };
        let bus = rows(bus_targets);
        let br = rows(branch_targets);
        Self {
            input,
            edge,
            bus_out: Affine::fit(N_BUS_OUT, bus.iter().map(|r| r.as_slice())),
            branch_out: Affine::fit(N_BRANCH_OUT, br.iter().map(|r| r.as_slice())),
        }
    }
}

/// One-hot-like type code of a bus.
pub fn type_row(kind: BusKind) -> [f64; 3] {
    match kind {
        BusKind::PQ => [1.0, 1.0, 0.0],
        BusKind::PV => [1.0, 0.0, 2.0],
        BusKind::Slack => [0.0, 0.0, 1.0],
        BusKind::Virtual => [0.0, 0.0, 0.0],
    }
}

/// Per-bus input features `[P, Q, V, q_min, q_max, g_self, b_self]`.
///
/// Quantities a bus type leaves unknown get placeholders: `V = 1` at PQ
/// buses, `Q = 0` at PV buses and `P = Q = 0` at the slack. The last two
/// columns are the bus's self admittance.
pub fn bus_features(net: &Network) -> Vec<[f64; 7]> {
    let y = build_ybus(net);
    net.buses
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let (p, q, v) = match b.kind {
                BusKind::PQ => (b.p_set, b.q_set, 1.0),
                BusKind::PV => (b.p_set, 0.0, b.v_set),
                _ => (0.0, 0.0, b.v_set),
            };
            let yii = y[(i, i)];
            [p, q, v, b.q_min, b.q_max, yii.re, yii.im]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectedEdge {
    pub branch: usize,
    pub dir: Direction,
    /// Sending bus.
    pub from: usize,
    pub to: usize,
    /// `[g_L, b_L, tap]` forward, `[g_L, b_L, 1/tap]` reverse.
    pub feature: [f64; 3],
}

/// Directed edges of the in-service branches: forward then reverse for each.
pub fn directed_edges(net: &Network) -> Vec<DirectedEdge> {
    let mut out = Vec::with_capacity(2 * net.n_in_service());
    for (k, br) in net.in_service() {
        let [g, b, tap] = br.edge_feature();
        out.push(DirectedEdge {
            branch: k,
            dir: Direction::Forward,
            from: br.from,
            to: br.to,
            feature: [g, b, tap],
        });
        out.push(DirectedEdge {
            branch: k,
            dir: Direction::Reverse,
            from: br.to,
            to: br.from,
            feature: [g, b, 1.0 / tap],
        });
    }
    out
}

/// Padded model input of one network. Rows at and beyond `real_n` are
/// virtual buses.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub x_in: Tensor,
    pub types: Tensor,
    pub adjacency: Tensor,
    pub edges: Vec<DirectedEdge>,
    pub real_n: usize,
}

impl ModelInput {
    pub fn from_network(net: &Network, n_pad: usize) -> Result<Self, ModelError> {
        let n = net.n_buses();
        if n == 0 || n > n_pad {
            return Err(ModelError::Input(format!(
                "{n} buses do not fit a padded size of {n_pad}"
            )));
        }
        let mut x = vec![0.0; n_pad * N_FEATURES];
        for (i, f) in bus_features(net).iter().enumerate() {
            x[i * N_FEATURES..(i + 1) * N_FEATURES].copy_from_slice(f);
        }
        let mut t = vec![0.0; n_pad * N_TYPES];
        for (i, b) in net.buses.iter().enumerate() {
            t[i * N_TYPES..(i + 1) * N_TYPES].copy_from_slice(&type_row(b.kind));
        }
        let mut a = vec![0.0; n_pad * n_pad];
        for (_, br) in net.in_service() {
            let w = br.series_admittance().norm();
            a[br.from * n_pad + br.to] += w;
            a[br.to * n_pad + br.from] += w;
        }
        Ok(Self {
            x_in: Tensor::matrix(n_pad, N_FEATURES, x)?,
            types: Tensor::matrix(n_pad, N_TYPES, t)?,
            adjacency: Tensor::matrix(n_pad, n_pad, a)?,
            edges: directed_edges(net),
            real_n: n,
        })
    }

    pub fn n_pad(&self) -> usize {
        self.x_in.dims2().0
    }

    /// The same input with a different amount of zero-filled padding.
    pub fn repadded(&self, n_pad: usize) -> Result<Self, ModelError> {
        if n_pad < self.real_n {
            return Err(ModelError::Input(format!(
                "cannot pad {} buses to {n_pad}",
                self.real_n
            )));
        }
        let old = self.n_pad();
        let copy_rows = |t: &Tensor, w: usize| {
            let mut d = vec![0.0; n_pad * w];
            d[..self.real_n * w].copy_from_slice(&t.data()[..self.real_n * w]);
            Tensor::matrix(n_pad, w, d)
        };
        let mut a = vec![0.0; n_pad * n_pad];
        for i in 0..self.real_n {
            a[i * n_pad..i * n_pad + self.real_n]
                .copy_from_slice(&self.adjacency.data()[i * old..i * old + self.real_n]);
        }
        Ok(Self {
            x_in: copy_rows(&self.x_in, N_FEATURES)?,
            types: copy_rows(&self.types, N_TYPES)?,
            adjacency: Tensor::matrix(n_pad, n_pad, a)?,
            edges: self.edges.clone(),
            real_n: self.real_n,
        })
    }

    fn validate(&self) -> Result<(), ModelError> {
        let p = self.n_pad();
        if self.real_n == 0 || self.real_n > p {
            return Err(ModelError::Input(format!("real_n {} with {p} rows", self.real_n)));
        }
        if self.types.shape() != [p, N_TYPES] || self.adjacency.shape() != [p, p] {
            return Err(ModelError::Input("type or adjacency shape".into()));
        }
        for i in self.real_n..p {
            if self.types.row(i).iter().any(|&x| x != 0.0) {
                return Err(ModelError::Input(format!("row {i} is padding but not virtual")));
            }
        }
        if let Some(e) = self
            .edges
            .iter()
            .find(|e| e.from >= self.real_n || e.to >= self.real_n)
        {
            return Err(ModelError::Input(format!(
                "branch {} references a virtual bus",
                e.branch
            )));
        }
        Ok(())
    }

    /// Additive attention mask: `-inf` where either bus is virtual.
    fn mha_mask(&self) -> Tensor {
        let p = self.n_pad();
        let r = self.real_n;
        let mut m = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                if i >= r || j >= r {
                    m[i * p + j] = f64::NEG_INFINITY;
                }
            }
        }
        Tensor::matrix(p, p, m).expect("square")
    }

    /// Neighbourhoods for graph attention: connected buses plus a self loop
    /// on every real bus.
    fn gat_mask(&self) -> Tensor {
        let p = self.n_pad();
        let a = self.adjacency.data();
        let mut m = vec![f64::NEG_INFINITY; p * p];
        for i in 0..self.real_n {
            m[i * p + i] = 0.0;
            for j in 0..self.real_n {
                if a[i * p + j] != 0.0 {
                    m[i * p + j] = 0.0;
                }
            }
        }
        Tensor::matrix(p, p, m).expect("square")
    }
}

/// De-normalized predictions for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    /// Per real bus `[P, Q, V]`.
    pub x_out: Vec<[f64; 3]>,
    /// Per directed in-service branch `[P, Q]`, aligned with `edges`.
    pub h_out: Vec<[f64; 2]>,
    pub edges: Vec<DirectedEdge>,
}

/// Differentiable predictions of one sample.
#[derive(Clone, Copy, Debug)]
pub struct Prediction<'g> {
    /// Standardized `[n, 3]` bus outputs.
    pub bus_norm: Var<'g>,
    /// Standardized `[2E, 2]` branch outputs.
    pub branch_norm: Var<'g>,
    /// Bus outputs in p.u.
    pub bus: Var<'g>,
    /// Branch flows in p.u.
    pub branch: Var<'g>,
}

const GLOBAL: usize = 6;
const PER_LAYER: usize = 12;
const LAYER_NAMES: [&str; PER_LAYER] = [
    "ln1.gamma", "ln1.beta", "attn.w_qkv", "gat.w", "gat.a_src", "gat.a_dst", "ln2.gamma",
    "ln2.beta", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

#[derive(Debug, Clone, Copy)]
enum P {
    WIn,
    WT,
    WBus,
    WA,
    WH,
    WBranch,
}

#[derive(Debug, Clone, Copy)]
enum L {
    Ln1G,
    Ln1B,
    WQkv,
    GatW,
    GatSrc,
    GatDst,
    Ln2G,
    Ln2B,
    W1,
    B1,
    W2,
    B2,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    config: ModelConfig,
    stats: NormStats,
}

/// Parameters plus the configuration and normalization they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stats: NormStats,
    names: Vec<String>,
    params: Vec<Tensor>,
}

fn parameter_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.d_model;
    let dg = d / c.gat_heads;
    let mut out = vec![
        ("embed.w_in".to_string(), vec![N_FEATURES, d]),
        ("embed.w_t".to_string(), vec![N_TYPES, d]),
        ("bus_head.w".to_string(), vec![d, N_BUS_OUT]),
        ("branch_head.w_a".to_string(), vec![N_EDGE, d]),
        ("branch_head.w_h".to_string(), vec![4 * d, d]),
        ("branch_head.w_out".to_string(), vec![d, N_BRANCH_OUT]),
    ];
    for l in 0..c.layers {
        let shapes = [
            vec![1, d],
            vec![1, d],
            vec![d, 3 * d],
            vec![d, d],
            vec![dg, c.gat_heads],
            vec![dg, c.gat_heads],
            vec![1, d],
            vec![1, d],
            vec![d, c.ffn_width],
            vec![1, c.ffn_width],
            vec![c.ffn_width, d],
            vec![1, d],
        ];
        for (name, shape) in LAYER_NAMES.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out
}

impl Model {
    /// Xavier-uniform weights, unit norm gains, zero biases.
    pub fn new(config: ModelConfig, stats: NormStats, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, params) = parameter_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("gamma") {
                    Tensor::full(&shape, 1.0)
                } else if name.ends_with("beta") || name.ends_with(".b1") || name.ends_with(".b2") {
                    Tensor::zeros(&shape)
                } else {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
                    Tensor::new(shape, data).expect("shape")
                };
                (name, t)
            })
            .unzip();
        Ok(Self {
            config,
            stats,
            names,
            params,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `g` as a differentiable leaf.
    pub fn bind<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.params.iter().map(|t| g.param(t.clone())).collect()
    }

    fn global<'g>(&self, vars: &[Var<'g>], p: P) -> Var<'g> {
        vars[p as usize]
    }

    fn layer<'g>(&self, vars: &[Var<'g>], l: usize, p: L) -> Var<'g> {
        vars[GLOBAL + l * PER_LAYER + p as usize]
    }

    /// Forward pass of a batch whose inputs share one padded size.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        vars: &[Var<'g>],
        batch: &[&ModelInput],
    ) -> Result<Vec<Prediction<'g>>, ModelError> {
        let c = &self.config;
        let Some(first) = batch.first() else {
            return Ok(Vec::new());
        };
        let p = first.n_pad();
        if p > c.n_max {
            return Err(ModelError::Input(format!("padded size {p} exceeds n_max {}", c.n_max)));
        }
        for m in batch {
            m.validate()?;
            if m.n_pad() != p {
                return Err(ModelError::Input("batch mixes padded sizes".into()));
            }
        }
        let b = batch.len();
        let d = c.d_model;

        let mut x_data = Vec::with_capacity(b * p * N_FEATURES);
        let mut t_data = Vec::with_capacity(b * p * N_TYPES);
        for m in batch {
            for i in 0..p {
                self.stats.input.normalize_row(m.x_in.row(i), &mut x_data);
            }
            t_data.extend_from_slice(m.types.data());
        }
        let x_in = g.constant(Tensor::matrix(b * p, N_FEATURES, x_data)?);
        let types = g.constant(Tensor::matrix(b * p, N_TYPES, t_data)?);
        let mut x = x_in
            .matmul(self.global(vars, P::WIn))?
            .add(types.matmul(self.global(vars, P::WT))?)?
            .leaky_relu();

        let mha_masks: Vec<Tensor> = batch.iter().map(|m| m.mha_mask()).collect();
        let gat_masks: Vec<Tensor> = batch.iter().map(|m| m.gat_mask()).collect();
        let rows: Vec<Vec<usize>> = (0..b).map(|s| (s * p..(s + 1) * p).collect()).collect();

        for l in 0..c.layers {
            let h = x
                .layer_norm(LN_EPS)
                .mul_broadcast(self.layer(vars, l, L::Ln1G))?
                .add_broadcast(self.layer(vars, l, L::Ln1B))?;
            let agg = self.mix(g, vars, l, h, &rows, &mha_masks, &gat_masks)?;
            let x1 = x.add(agg)?;
            let h2 = x1
                .layer_norm(LN_EPS)
                .mul_broadcast(self.layer(vars, l, L::Ln2G))?
                .add_broadcast(self.layer(vars, l, L::Ln2B))?;
            let f = h2
                .matmul(self.layer(vars, l, L::W1))?
                .add_broadcast(self.layer(vars, l, L::B1))?
                .leaky_relu()
                .matmul(self.layer(vars, l, L::W2))?
                .add_broadcast(self.layer(vars, l, L::B2))?;
            x = x1.add(f)?;
        }

        let bus_all = x.matmul(self.global(vars, P::WBus))?;

        // [X_i ∥ X_j ∥ X_i − X_j ∥ A W_A] W_H, with W_H split into row blocks.
        let wh = self.global(vars, P::WH);
        let block = |k: usize| wh.gather_rows(&(k * d..(k + 1) * d).collect::<Vec<_>>());
        let (w_i, w_j, w_diff, w_edge) = (block(0)?, block(1)?, block(2)?, block(3)?);
        let u_send = x.matmul(w_i.add(w_diff)?)?;
        let u_recv = x.matmul(w_j.sub(w_diff)?)?;
        let mut send_rows = Vec::new();
        let mut recv_rows = Vec::new();
        let mut edge_data = Vec::new();
        let mut edge_offsets = vec![0];
        for (s, m) in batch.iter().enumerate() {
            for e in &m.edges {
                send_rows.push(s * p + e.from);
                recv_rows.push(s * p + e.to);
                self.stats.edge.normalize_row(&e.feature, &mut edge_data);
            }
            edge_offsets.push(send_rows.len());
        }
        let n_edges = send_rows.len();
        let branch_all = if n_edges > 0 {
            let feats = g.constant(Tensor::matrix(n_edges, N_EDGE, edge_data)?);
            let edge_term = feats.matmul(self.global(vars, P::WA))?.matmul(w_edge)?;
            let hl = u_send
                .gather_rows(&send_rows)?
                .add(u_recv.gather_rows(&recv_rows)?)?
                .add(edge_term)?;
            Some(hl.leaky_relu().matmul(self.global(vars, P::WBranch))?)
        } else {
            None
        };

        let bus_mean = g.constant(self.stats.bus_out.mean_row());
        let bus_std = g.constant(self.stats.bus_out.std_row());
        let br_mean = g.constant(self.stats.branch_out.mean_row());
        let br_std = g.constant(self.stats.branch_out.std_row());
        let mut out = Vec::with_capacity(b);
        for (s, m) in batch.iter().enumerate() {
            let bus_norm = bus_all.gather_rows(&(s * p..s * p + m.real_n).collect::<Vec<_>>())?;
            let branch_norm = match branch_all {
                Some(all) => {
                    all.gather_rows(&(edge_offsets[s]..edge_offsets[s + 1]).collect::<Vec<_>>())?
                }
                None => g.constant(Tensor::zeros(&[0, N_BRANCH_OUT])),
            };
            let bus = bus_norm.mul_broadcast(bus_std)?.add_broadcast(bus_mean)?;
            let branch = if m.edges.is_empty() {
                branch_norm
            } else {
                branch_norm.mul_broadcast(br_std)?.add_broadcast(br_mean)?
            };
            out.push(Prediction {
                bus_norm,
                branch_norm,
                bus,
                branch,
            });
        }
        Ok(out)
    }

    /// Multi-head attention plus graph attention, per sample.
    #[allow(clippy::too_many_arguments)]
    fn mix<'g>(
        &self,
        g: &'g Graph,
        vars: &[Var<'g>],
        l: usize,
        h: Var<'g>,
        rows: &[Vec<usize>],
        mha_masks: &[Tensor],
        gat_masks: &[Tensor],
    ) -> Result<Var<'g>, ModelError> {
        let c = &self.config;
        let d = c.d_model;
        let dh = d / c.heads;
        let dg = d / c.gat_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = rows.first().map_or(0, Vec::len);

        let qkv = h.matmul(self.layer(vars, l, L::WQkv))?;
        let wh = h.matmul(self.layer(vars, l, L::GatW))?;
        let src = self.layer(vars, l, L::GatSrc);
        let dst = self.layer(vars, l, L::GatDst);
        let mut gat_heads = Vec::with_capacity(c.gat_heads);
        for k in 0..c.gat_heads {
            let whk = wh.slice_cols(k * dg, (k + 1) * dg)?;
            let s = whk.matmul(src.slice_cols(k, k + 1)?)?;
            let t = whk.matmul(dst.slice_cols(k, k + 1)?)?;
            gat_heads.push((whk, s, t));
        }

        let mut per_sample = Vec::with_capacity(rows.len());
        for (s, idx) in rows.iter().enumerate() {
            let qkv_s = qkv.gather_rows(idx)?;
            let mut parts = Vec::with_capacity(c.heads);
            for k in 0..c.heads {
                let q = qkv_s.slice_cols(k * dh, (k + 1) * dh)?;
                let kk = qkv_s.slice_cols(d + k * dh, d + (k + 1) * dh)?;
                let v = qkv_s.slice_cols(2 * d + k * dh, 2 * d + (k + 1) * dh)?;
                let att = q
                    .matmul(kk.transpose())?
                    .scale(scale)
                    .masked_softmax(&mha_masks[s])?;
                parts.push(att.matmul(v)?);
            }
            let mha = g.concat(&parts)?;

            let mut gparts = Vec::with_capacity(c.gat_heads);
            for (whk, src_k, dst_k) in &gat_heads {
                let e = src_k
                    .gather_rows(idx)?
                    .broadcast_to(p, p)?
                    .add(dst_k.gather_rows(idx)?.transpose().broadcast_to(p, p)?)?
                    .leaky_relu()
                    .masked_softmax(&gat_masks[s])?;
                gparts.push(e.matmul(whk.gather_rows(idx)?)?);
            }
            let gat = g.concat(&gparts)?;
            per_sample.push(mha.add(gat)?);
        }
        Ok(g.vstack(&per_sample)?)
    }

    /// Inference without a tape.
    pub fn predict(&self, input: &ModelInput) -> Result<ModelOutput, ModelError> {
        let g = Graph::no_grad();
        let vars = self.bind(&g);
        let pred = self.forward(&g, &vars, &[input])?[0];
        let bus = pred.bus.to_tensor();
        let br = pred.branch.to_tensor();
        Ok(ModelOutput {
            x_out: (0..input.real_n)
                .map(|i| [bus.at(i, 0), bus.at(i, 1), bus.at(i, 2)])
                .collect(),
            h_out: (0..input.edges.len())
                .map(|e| [br.at(e, 0), br.at(e, 1)])
                .collect(),
            edges: input.edges.clone(),
        })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the parameter file at `path` and a JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let named: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        tensor::save_params(path, &named)?;
        let side = Sidecar {
            format_version: SIDECAR_VERSION,
            config: self.config.clone(),
            stats: self.stats.clone(),
        };
        let sp = Self::sidecar_path(path);
        let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
        fs::write(&sp, text).map_err(|e| ModelError::Sidecar {
            path: sp,
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let sp = Self::sidecar_path(path);
        let side_err = |reason: String| ModelError::Sidecar {
            path: sp.clone(),
            reason,
        };
        let text = fs::read_to_string(&sp).map_err(|e| side_err(e.to_string()))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| side_err(e.to_string()))?;
        if side.format_version != SIDECAR_VERSION {
            return Err(side_err(format!("unsupported version {}", side.format_version)));
        }
        side.config.validate()?;
        let loaded = tensor::load_params(path)?;
        let expected = parameter_shapes(&side.config);
        if loaded.len() != expected.len() {
            return Err(ModelError::Checkpoint(CheckpointError::Mismatch {
                name: "<all>".into(),
                reason: format!("{} tensors, expected {}", loaded.len(), expected.len()),
            }));
        }
        for ((name, t), (en, es)) in loaded.iter().zip(&expected) {
            if name != en || t.shape() != es.as_slice() {
                return Err(ModelError::Checkpoint(CheckpointError::Mismatch {
                    name: name.clone(),
                    reason: format!("expected {en} with shape {es:?}, found {:?}", t.shape()),
                }));
            }
        }
        let (names, params) = loaded.into_iter().unzip();
        Ok(Self {
            config: side.config,
            stats: side.stats,
            names,
            params,
        })
    }
}
