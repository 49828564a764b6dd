use std::cell::{Ref, RefCell};

use super::{Tensor, TensorError};

/// Slope of the negative half of [`Var::leaky_relu`] when none is given.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Concat(Vec<usize>),
    VStack(Vec<usize>),
    SliceCols { input: usize, start: usize },
    GatherRows { input: usize, index: Vec<usize> },
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    Abs(usize),
    Sqrt(usize),
    Square(usize),
    Atan(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    ClampMin(usize, f64),
    MaskedSoftmax(usize),
    Broadcast(usize),
    LayerNorm { input: usize, inv_std: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Concat(..) => "concat",
            Op::VStack(..) => "vstack",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Atan(..) => "atan",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::ClampMin(..) => "clamp_min",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::Broadcast(..) => "broadcast",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    name: &'static str,
    needs_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the tape is always topologically sorted.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            record: true,
        }
    }

    /// A graph that evaluates values only. Nothing on it is differentiable.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, self.record)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            name: "leaf",
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.record && inputs.iter().any(|&i| nodes[i].needs_grad);
        let name = op.name();
        let op = if needs_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            name,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// First node holding a non-finite value, if any.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        let nodes = self.nodes.borrow();
        match nodes.iter().position(|n| !n.value.is_finite()) {
            Some(node) => Err(TensorError::NonFinite {
                node,
                op: nodes[node].name,
            }),
            None => Ok(()),
        }
    }

    /// Concatenates 2-D tensors along the last axis.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>, TensorError> {
        let (rows, widths, data) = {
            let nodes = self.nodes.borrow();
            let rows = parts.first().map_or(0, |p| nodes[p.id].value.dims2().0);
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (r, c) = nodes[p.id].value.dims2();
                if r != rows {
                    return Err(TensorError::Shape {
                        op: "concat",
                        lhs: nodes[parts[0].id].value.shape().to_vec(),
                        rhs: nodes[p.id].value.shape().to_vec(),
                    });
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row(i));
                }
            }
            (rows, total, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::new(vec![rows, widths], data)?;
        Ok(self.push(value, Op::Concat(ids.clone()), &ids))
    }

    /// Stacks 2-D tensors of equal width along the first axis.
    pub fn vstack<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>, TensorError> {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let cols = parts.first().map_or(0, |p| nodes[p.id].value.dims2().1);
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let v = &nodes[p.id].value;
                if v.dims2().1 != cols || v.shape().len() != 2 {
                    return Err(TensorError::Shape {
                        op: "vstack",
                        lhs: nodes[parts[0].id].value.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                rows += v.dims2().0;
                data.extend_from_slice(v.data());
            }
            (rows, cols, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::VStack(ids.clone()), &ids))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes[..=loss.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the loss does not depend
    /// on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        let shape = var.shape();
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut [f64]> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

/// `c += op(a) * op(b)` for row-major operands, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    // Row-major storage of op(a) (m×k) and op(b) (k×n).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    // SAFETY: all slices cover the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2();
            let (_, n) = val(*b).dims2();
            if let Some(ga) = acc(grads, nodes, *a) {
                gemm_acc(m, n, k, g, false, val(*b).data(), true, ga, 1.0);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gemm_acc(k, m, n, val(*a).data(), true, g, false, gb, 1.0);
            }
        }
        Op::Add(a, b) => {
            for (x, sign) in [(*a, 1.0), (*b, 1.0)] {
                if let Some(gx) = acc(grads, nodes, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
                }
            }
        }
        Op::Sub(a, b) => {
            for (x, sign) in [(*a, 1.0), (*b, -1.0)] {
                if let Some(gx) = acc(grads, nodes, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                let bv = val(*b).data();
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                let av = val(*a).data();
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b).data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / bv[i];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                let out = node.value.data();
                for i in 0..g.len() {
                    gb[i] -= g[i] * out[i] / bv[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Concat(parts) => {
            let (rows, total) = node.value.dims2();
            let mut offset = 0;
            for &p in parts {
                let (_, w) = val(p).dims2();
                if let Some(gp) = acc(grads, nodes, p) {
                    for i in 0..rows {
                        let src = &g[i * total + offset..i * total + offset + w];
                        gp[i * w..(i + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
                offset += w;
            }
        }
        Op::VStack(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                if let Some(gp) = acc(grads, nodes, p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, s)| *d += s);
                }
                offset += len;
            }
        }
        Op::SliceCols { input, start } => {
            let (rows, w) = node.value.dims2();
            let (_, cols) = val(*input).dims2();
            if let Some(gi) = acc(grads, nodes, *input) {
                for i in 0..rows {
                    let dst = &mut gi[i * cols + start..i * cols + start + w];
                    dst.iter_mut()
                        .zip(&g[i * w..(i + 1) * w])
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::GatherRows { input, index } => {
            let (_, cols) = val(*input).dims2();
            if let Some(gi) = acc(grads, nodes, *input) {
                for (r, &src) in index.iter().enumerate() {
                    let dst = &mut gi[src * cols..(src + 1) * cols];
                    dst.iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = val(*a).dims2();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Abs(a) => unary_grad(nodes, grads, *a, g, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::Sqrt(a) => {
            let out = node.value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * 0.5 / out[i];
                }
            }
        }
        Op::Square(a) => unary_grad(nodes, grads, *a, g, |x, _| 2.0 * x),
        Op::Atan(a) => unary_grad(nodes, grads, *a, g, |x, _| 1.0 / (1.0 + x * x)),
        Op::Relu(a) => unary_grad(nodes, grads, *a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::LeakyRelu(a, slope) => {
            let slope = *slope;
            unary_grad(nodes, grads, *a, g, move |x, _| if x > 0.0 { 1.0 } else { slope })
        }
        Op::ClampMin(a, floor) => {
            let floor = *floor;
            unary_grad(nodes, grads, *a, g, move |x, _| if x > floor { 1.0 } else { 0.0 })
        }
        Op::MaskedSoftmax(a) => {
            let (rows, cols) = node.value.dims2();
            let y = node.value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        ga[i * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Broadcast(a) => {
            let (r, c) = val(*a).dims2();
            let (_, cols) = node.value.dims2();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (idx, s) in g.iter().enumerate() {
                    let (i, j) = (idx / cols, idx % cols);
                    ga[(if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }] += s;
                }
            }
        }
        Op::LayerNorm { input, inv_std } => {
            let (rows, cols) = node.value.dims2();
            let xhat = node.value.data();
            if let Some(gi) = acc(grads, nodes, *input) {
                let d = cols as f64;
                for i in 0..rows {
                    let xr = &xhat[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let mean_g: f64 = gr.iter().sum::<f64>() / d;
                    let mean_gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d;
                    for j in 0..cols {
                        gi[i * cols + j] += inv_std[i] * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
            }
        }
    }
}

fn unary_grad(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    g: &[f64],
    deriv: impl Fn(f64, usize) -> f64,
) {
    let x = nodes[a].value.data();
    if let Some(ga) = acc(grads, nodes, a) {
        for i in 0..g.len() {
            ga[i] += g[i] * deriv(x[i], i);
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn graph(self) -> &'g Graph {
        self.graph
    }

    pub fn shape(self) -> Vec<usize> {
        self.graph.value(self.id).shape().to_vec()
    }

    pub fn dims2(self) -> (usize, usize) {
        self.graph.value(self.id).dims2()
    }

    pub fn value(self) -> Ref<'g, Tensor> {
        self.graph.value(self.id)
    }

    pub fn to_tensor(self) -> Tensor {
        self.graph.value(self.id).clone()
    }

    pub fn item(self) -> f64 {
        self.graph.value(self.id).item()
    }

    fn same_shape(self, other: Var<'g>, op: &'static str) -> Result<(), TensorError> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(TensorError::Shape { op, lhs: a, rhs: b });
        }
        Ok(())
    }

    fn zip_with(
        self,
        other: Var<'g>,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>, TensorError> {
        self.same_shape(other, name)?;
        let value = {
            let a = self.graph.value(self.id);
            let b = self.graph.value(other.id);
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.graph.push(value, op, &[self.id, other.id]))
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let value = {
            let a = self.graph.value(self.id);
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect())
                .expect("same shape")
        };
        self.graph.push(value, op, &[self.id])
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        let value = {
            let a = self.graph.value(self.id);
            let b = self.graph.value(other.id);
            let (m, k) = a.dims2();
            let (k2, n) = b.dims2();
            if a.shape().len() != 2 || b.shape().len() != 2 || k != k2 {
                return Err(TensorError::Shape {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; m * n];
            gemm_acc(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
            Tensor::new(vec![m, n], out)?
        };
        Ok(self.graph.push(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.zip_with(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.zip_with(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.zip_with(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.zip_with(other, Op::Div(self.id, other.id), "div", |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.map(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.map(Op::AddScalar(self.id), |x| x + c)
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g>, TensorError> {
        let value = {
            let a = self.graph.value(self.id);
            let (rows, cols) = a.dims2();
            if start > end || end > cols {
                return Err(TensorError::Index {
                    op: "slice_cols",
                    index: end,
                    len: cols,
                });
            }
            let w = end - start;
            let mut data = Vec::with_capacity(rows * w);
            for i in 0..rows {
                data.extend_from_slice(&a.row(i)[start..end]);
            }
            Tensor::new(vec![rows, w], data)?
        };
        Ok(self.graph.push(value, Op::SliceCols { input: self.id, start }, &[self.id]))
    }

    /// Rows selected by `index`, repeated entries allowed.
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'g>, TensorError> {
        let value = {
            let a = self.graph.value(self.id);
            let (rows, cols) = a.dims2();
            let mut data = Vec::with_capacity(index.len() * cols);
            for &i in index {
                if i >= rows {
                    return Err(TensorError::Index {
                        op: "gather_rows",
                        index: i,
                        len: rows,
                    });
                }
                data.extend_from_slice(a.row(i));
            }
            Tensor::new(vec![index.len(), cols], data)?
        };
        let op = Op::GatherRows {
            input: self.id,
            index: index.to_vec(),
        };
        Ok(self.graph.push(value, op, &[self.id]))
    }

    pub fn transpose(self) -> Var<'g> {
        let value = {
            let a = self.graph.value(self.id);
            let (r, c) = a.dims2();
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], data).expect("transpose shape")
        };
        self.graph.push(value, Op::Transpose(self.id), &[self.id])
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.graph.value(self.id).data().iter().sum();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'g> {
        let m = {
            let a = self.graph.value(self.id);
            a.data().iter().sum::<f64>() / a.len().max(1) as f64
        };
        self.graph.push(Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    pub fn abs(self) -> Var<'g> {
        self.map(Op::Abs(self.id), f64::abs)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.map(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(self) -> Var<'g> {
        self.map(Op::Square(self.id), |x| x * x)
    }

    /// Single-argument arctangent, range (−π/2, π/2).
    pub fn atan(self) -> Var<'g> {
        self.map(Op::Atan(self.id), f64::atan)
    }

    pub fn relu(self) -> Var<'g> {
        self.map(Op::Relu(self.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(self) -> Var<'g> {
        self.leaky_relu_with(LEAKY_SLOPE)
    }

    pub fn leaky_relu_with(self, slope: f64) -> Var<'g> {
        self.map(Op::LeakyRelu(self.id, slope), move |x| if x > 0.0 { x } else { slope * x })
    }

    /// `max(x, floor)`; no gradient flows below the floor.
    pub fn clamp_min(self, floor: f64) -> Var<'g> {
        self.map(Op::ClampMin(self.id, floor), move |x| x.max(floor))
    }

    /// Row-wise softmax of `self + mask`. Entries with a `-inf` mask get
    /// exactly zero weight and zero gradient; a fully masked row is all
    /// zeros.
    pub fn masked_softmax(self, mask: &Tensor) -> Result<Var<'g>, TensorError> {
        let value = {
            let a = self.graph.value(self.id);
            if a.shape() != mask.shape() || a.shape().len() != 2 {
                return Err(TensorError::Shape {
                    op: "masked_softmax",
                    lhs: a.shape().to_vec(),
                    rhs: mask.shape().to_vec(),
                });
            }
            let (rows, cols) = a.dims2();
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                let xr = a.row(i);
                let mr = mask.row(i);
                let mx = xr
                    .iter()
                    .zip(mr)
                    .map(|(x, m)| x + m)
                    .fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let row = &mut out[i * cols..(i + 1) * cols];
                let mut total = 0.0;
                for j in 0..cols {
                    let z = xr[j] + mr[j];
                    let e = if z == f64::NEG_INFINITY { 0.0 } else { (z - mx).exp() };
                    row[j] = e;
                    total += e;
                }
                row.iter_mut().for_each(|e| *e /= total);
            }
            Tensor::new(vec![rows, cols], out)?
        };
        Ok(self.graph.push(value, Op::MaskedSoftmax(self.id), &[self.id]))
    }

    /// Expands a `[1, c]`, `[r, 1]`, `[1, 1]`, vector or scalar tensor to
    /// `[rows, cols]`.
    pub fn broadcast_to(self, rows: usize, cols: usize) -> Result<Var<'g>, TensorError> {
        let value = {
            let a = self.graph.value(self.id);
            let (r, c) = a.dims2();
            if a.shape().len() > 2 || !(r == 1 || r == rows) || !(c == 1 || c == cols) {
                return Err(TensorError::Shape {
                    op: "broadcast",
                    lhs: a.shape().to_vec(),
                    rhs: vec![rows, cols],
                });
            }
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                let ri = if r == 1 { 0 } else { i };
                for j in 0..cols {
                    data.push(a.data()[ri * c + if c == 1 { 0 } else { j }]);
                }
            }
            Tensor::new(vec![rows, cols], data)?
        };
        Ok(self.graph.push(value, Op::Broadcast(self.id), &[self.id]))
    }

    /// `self + bias` with `bias` broadcast to `self`'s shape.
    pub fn add_broadcast(self, bias: Var<'g>) -> Result<Var<'g>, TensorError> {
        let (r, c) = self.dims2();
        let b = if bias.dims2() == (r, c) && bias.shape().len() == 2 {
            bias
        } else {
            bias.broadcast_to(r, c)?
        };
        self.add(b)
    }

    /// `self * w` with `w` broadcast to `self`'s shape.
    pub fn mul_broadcast(self, w: Var<'g>) -> Result<Var<'g>, TensorError> {
        let (r, c) = self.dims2();
        let b = if w.dims2() == (r, c) && w.shape().len() == 2 {
            w
        } else {
            w.broadcast_to(r, c)?
        };
        self.mul(b)
    }

    /// Standardizes each row of a 2-D tensor to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Var<'g> {
        let (value, inv_std) = {
            let a = self.graph.value(self.id);
            let (rows, cols) = a.dims2();
            let d = cols as f64;
            let mut out = Vec::with_capacity(rows * cols);
            let mut inv = Vec::with_capacity(rows);
            for i in 0..rows {
                let r = a.row(i);
                let mean = r.iter().sum::<f64>() / d;
                let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
                let s = 1.0 / (var + eps).sqrt();
                inv.push(s);
                out.extend(r.iter().map(|x| (x - mean) * s));
            }
            (Tensor::new(a.shape().to_vec(), out).expect("layer norm shape"), inv)
        };
        self.graph.push(value, Op::LayerNorm { input: self.id, inv_std }, &[self.id])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let grads = g.backward(x.square()).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn atan_value_and_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let y = x.atan();
        assert!((y.item() - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        assert_eq!(g.backward(y).unwrap().get(x).item(), 0.5);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[0.3, 5.0, -0.2], [1.0, 2.0, 3.0]]));
        let ninf = f64::NEG_INFINITY;
        let mask = Tensor::from_rows(&[[0.0, ninf, 0.0], [ninf, ninf, ninf]]);
        let y = x.masked_softmax(&mask).unwrap();
        let v = y.to_tensor();
        assert_eq!(v.at(0, 1), 0.0);
        assert!((v.at(0, 0) + v.at(0, 2) - 1.0).abs() < 1e-15);
        assert_eq!(v.row(1), &[0.0, 0.0, 0.0]);
        let w = g.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]));
        let grads = g.backward(y.mul(w).unwrap().sum()).unwrap().get(x);
        assert_eq!(grads.at(0, 1), 0.0);
        assert_eq!(grads.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn independent_parameter_gets_zero_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::from_rows(&[[1.0, 2.0]]));
        let grads = g.backward(x.square()).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_leaf_accumulates() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let a = x.square();
        let b = x.scale(3.0);
        let grads = g.backward(a.add(b).unwrap()).unwrap();
        assert_eq!(grads.get(x).item(), 7.0);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[1.0, 2.0]]));
        assert!(matches!(g.backward(x.square()), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(err.to_string(), "matmul: incompatible shapes [2, 3] and [2, 3]");
    }

    #[test]
    fn no_grad_forward_is_bitwise_identical() {
        let build = |g: &Graph| {
            let x = g.param(Tensor::from_rows(&[[0.3, -1.2], [2.0, 0.7]]));
            let w = g.param(Tensor::from_rows(&[[0.5, 0.1], [-0.4, 0.9]]));
            x.matmul(w).unwrap().layer_norm(1e-5).leaky_relu().atan().to_tensor()
        };
        let a = build(&Graph::new());
        let b = build(&Graph::no_grad());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_finite_values_are_located() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(-1.0));
        let _ = x.sqrt();
        assert!(matches!(g.check_finite(), Err(TensorError::NonFinite { node: 1, op: "sqrt" })));
    }
}
