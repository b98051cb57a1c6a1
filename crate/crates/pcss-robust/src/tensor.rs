//! Dense tensor arithmetic with tape-based reverse-mode differentiation.
//!
//! Everything downstream (losses, attacks, the flow, attention, Sinkhorn)
//! differentiates through this module. Values are `f64` throughout. A [`Tape`]
//! records primitive operations during the forward pass; [`Tape::backward`]
//! replays them in reverse and accumulates gradients into every
//! `requires_grad` leaf.
//!
//! Single-threaded within one tape; distinct tapes are independent.

use std::cell::RefCell;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite result produced by {op}")]
    NumericFault { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called twice on the same tape without reset")]
    DoubleBackward,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Plain dense array: row-major data plus shape. No gradient state.
#[derive(Clone, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl fmt::Debug for Arr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Arr{:?}{:?}", self.shape, &self.data)
    }
}

impl Arr {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Arr { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Arr {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Arr {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Arr {
            shape: vec![r, c],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows/cols of a 2-D array; a 1-D array of n elements reads as n x 1.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (self.shape[0], 1),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2 on rank-{} array", self.shape.len()),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sign with sign(0) = 0.
    pub fn sign(&self) -> Arr {
        self.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// A primitive operation recorded on the tape.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    // the constant is recorded for completeness; the backward pass ignores it
    AddScalar(usize, #[allow(dead_code)] f64),
    Matmul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Recip(usize),
    L2Norm(usize),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    RowLogSumExp(usize),
    RowSum(usize),
    SumAll(usize),
    MeanAll(usize),
    AddRowBroadcast(usize, usize),
    AddColBroadcast(usize, usize),
    MulColBroadcast(usize, usize),
    GatherRows(usize, Vec<usize>),
    SelectPerRow(usize, Vec<usize>),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize, usize),
    /// Mean of neighbor coordinates per point: out[i] = mean_{j in nbrs[i]} x[j].
    NeighborMean(usize, Vec<Vec<usize>>),
    /// Mean squared spread around the neighbor centroid:
    /// out[i] = (1/k) sum_j ||x[j] - c_i||^2 with c_i the neighbor mean.
    NeighborSpread(usize, Vec<Vec<usize>>),
}

struct Node {
    op: Op,
    value: Arr,
    requires_grad: bool,
}

/// Wengert tape: append-only record of primitive ops, replayed in reverse.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Arr>>>,
    back_done: RefCell<bool>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.idx, self.value())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            back_done: RefCell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Arr, requires_grad: bool) -> Var<'_> {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&self, value: Arr) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, op: Op, value: Arr, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn value_of(&self, idx: usize) -> Arr {
        self.nodes.borrow()[idx].value.clone()
    }

    fn requires(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    fn record(&self, opname: &'static str, op: Op, value: Arr, parents: &[usize]) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(TensorError::NumericFault { op: opname });
        }
        let rg = parents.iter().any(|&p| self.requires(p));
        Ok(self.push(op, value, rg))
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// `requires_grad` node reachable from `loss`; leaves the rest at zero.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        {
            let nodes = self.nodes.borrow();
            let lshape = &nodes[loss.idx].value.shape;
            if nodes[loss.idx].value.len() != 1 {
                return Err(TensorError::NonScalarLoss(lshape.clone()));
            }
        }
        if *self.back_done.borrow() {
            return Err(TensorError::DoubleBackward);
        }
        *self.back_done.borrow_mut() = true;

        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Arr>> = vec![None; n];
        grads[loss.idx] = Some(Arr::scalar(1.0));

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !nodes[i].requires_grad {
                continue;
            }
            backprop_op(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // keep only grads of requires_grad nodes
        for (i, slot) in grads.iter_mut().enumerate() {
            if !nodes[i].requires_grad {
                *slot = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Arr>], idx: usize, contrib: Arr) {
    match &mut grads[idx] {
        Some(g) => {
            for (a, b) in g.data.iter_mut().zip(contrib.data.iter()) {
                *a += b;
            }
        }
        None => grads[idx] = Some(contrib),
    }
}

#[allow(clippy::needless_range_loop)]
fn backprop_op(nodes: &[Node], i: usize, g: &Arr, grads: &mut [Option<Arr>]) {
    let val = |j: usize| -> &Arr { &nodes[j].value };
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = Arr {
                shape: va.shape.clone(),
                data: g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
            };
            let gb = Arr {
                shape: vb.shape.clone(),
                data: g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect(),
            };
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Neg(a) => accumulate(grads, *a, g.map(|v| -v)),
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(grads, *a, g.map(|v| v * c));
        }
        Op::AddScalar(a, _) => accumulate(grads, *a, g.clone()),
        Op::Matmul(a, b) => {
            // y = A B => dA = G B^T, dB = A^T G
            let (va, vb) = (val(*a), val(*b));
            let (m, k) = va.dims2();
            let (_, n) = vb.dims2();
            let mut ga = Arr::zeros(&[m, k]);
            let mut gb = Arr::zeros(&[k, n]);
            for r in 0..m {
                for c in 0..n {
                    let go = g.data[r * n + c];
                    if go == 0.0 {
                        continue;
                    }
                    for t in 0..k {
                        ga.data[r * k + t] += go * vb.data[t * n + c];
                        gb.data[t * n + c] += go * va.data[r * k + t];
                    }
                }
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Transpose(a) => {
            let (m, n) = val(*a).dims2();
            let mut ga = Arr::zeros(&[m, n]);
            for r in 0..m {
                for c in 0..n {
                    ga.data[r * n + c] = g.data[c * m + r];
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::Relu(a) => {
            let va = val(*a);
            let ga = Arr {
                shape: va.shape.clone(),
                data: g
                    .data
                    .iter()
                    .zip(&va.data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect(),
            };
            accumulate(grads, *a, ga);
        }
        Op::Tanh(a) => {
            let y = &nodes[i].value;
            let ga = Arr {
                shape: y.shape.clone(),
                data: g
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(gv, yv)| gv * (1.0 - yv * yv))
                    .collect(),
            };
            accumulate(grads, *a, ga);
        }
        Op::Exp(a) => {
            let y = &nodes[i].value;
            let ga = Arr {
                shape: y.shape.clone(),
                data: g.data.iter().zip(&y.data).map(|(gv, yv)| gv * yv).collect(),
            };
            accumulate(grads, *a, ga);
        }
        Op::Ln(a) => {
            let va = val(*a);
            let ga = Arr {
                shape: va.shape.clone(),
                data: g.data.iter().zip(&va.data).map(|(gv, xv)| gv / xv).collect(),
            };
            accumulate(grads, *a, ga);
        }
        Op::Sqrt(a) => {
            let y = &nodes[i].value;
            let ga = Arr {
                shape: y.shape.clone(),
                data: g
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(gv, yv)| gv * 0.5 / yv)
                    .collect(),
            };
            accumulate(grads, *a, ga);
        }
        Op::Recip(a) => {
            let va = val(*a);
            let ga = Arr {
                shape: va.shape.clone(),
                data: g
                    .data
                    .iter()
                    .zip(&va.data)
                    .map(|(gv, xv)| -gv / (xv * xv))
                    .collect(),
            };
            accumulate(grads, *a, ga);
        }
        Op::L2Norm(a) => {
            // d‖x‖/dx = x / ‖x‖, with the zero subgradient at the origin
            let va = val(*a);
            let norm = nodes[i].value.data[0];
            let gv = g.data[0];
            let ga = Arr {
                shape: va.shape.clone(),
                data: va
                    .data
                    .iter()
                    .map(|xv| if norm == 0.0 { 0.0 } else { gv * xv / norm })
                    .collect(),
            };
            accumulate(grads, *a, ga);
        }
        Op::RowSoftmax(a) => {
            // dx = y * (g - sum(g * y) per row)
            let y = &nodes[i].value;
            let (m, n) = y.dims2();
            let mut ga = Arr::zeros(&[m, n]);
            for r in 0..m {
                let row = &y.data[r * n..(r + 1) * n];
                let grow = &g.data[r * n..(r + 1) * n];
                let dot: f64 = row.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                for c in 0..n {
                    ga.data[r * n + c] = row[c] * (grow[c] - dot);
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::RowLogSoftmax(a) => {
            // dx = g - softmax(x) * rowsum(g)
            let y = &nodes[i].value; // log-softmax values
            let (m, n) = y.dims2();
            let mut ga = Arr::zeros(&[m, n]);
            for r in 0..m {
                let grow = &g.data[r * n..(r + 1) * n];
                let gsum: f64 = grow.iter().sum();
                for c in 0..n {
                    let p = y.data[r * n + c].exp();
                    ga.data[r * n + c] = grow[c] - p * gsum;
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::RowLogSumExp(a) => {
            // y_r = lse(x_r); dx_rc = g_r * softmax(x_r)_c
            let va = val(*a);
            let y = &nodes[i].value;
            let (m, n) = va.dims2();
            let mut ga = Arr::zeros(&[m, n]);
            for r in 0..m {
                let lse = y.data[r];
                for c in 0..n {
                    ga.data[r * n + c] = g.data[r] * (va.data[r * n + c] - lse).exp();
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::RowSum(a) => {
            let (m, n) = val(*a).dims2();
            let mut ga = Arr::zeros(&[m, n]);
            for r in 0..m {
                for c in 0..n {
                    ga.data[r * n + c] = g.data[r];
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::SumAll(a) => {
            let va = val(*a);
            accumulate(
                grads,
                *a,
                Arr {
                    shape: va.shape.clone(),
                    data: vec![g.data[0]; va.len()],
                },
            );
        }
        Op::MeanAll(a) => {
            let va = val(*a);
            let scale = g.data[0] / va.len() as f64;
            accumulate(
                grads,
                *a,
                Arr {
                    shape: va.shape.clone(),
                    data: vec![scale; va.len()],
                },
            );
        }
        Op::AddRowBroadcast(a, r) => {
            let (m, n) = val(*a).dims2();
            accumulate(grads, *a, g.clone());
            let mut gr = Arr::zeros(&val(*r).shape);
            for row in 0..m {
                for c in 0..n {
                    gr.data[c] += g.data[row * n + c];
                }
            }
            accumulate(grads, *r, gr);
        }
        Op::AddColBroadcast(a, cv) => {
            let (m, n) = val(*a).dims2();
            accumulate(grads, *a, g.clone());
            let mut gc = Arr::zeros(&val(*cv).shape);
            for row in 0..m {
                for c in 0..n {
                    gc.data[row] += g.data[row * n + c];
                }
            }
            accumulate(grads, *cv, gc);
        }
        Op::MulColBroadcast(a, cv) => {
            let va = val(*a);
            let vc = val(*cv);
            let (m, n) = va.dims2();
            let mut ga = Arr::zeros(&[m, n]);
            let mut gc = Arr::zeros(&vc.shape);
            for row in 0..m {
                for c in 0..n {
                    ga.data[row * n + c] = g.data[row * n + c] * vc.data[row];
                    gc.data[row] += g.data[row * n + c] * va.data[row * n + c];
                }
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *cv, gc);
        }
        Op::GatherRows(a, idx) => {
            let (m, n) = val(*a).dims2();
            let mut ga = Arr::zeros(&[m, n]);
            for (out_r, &src_r) in idx.iter().enumerate() {
                for c in 0..n {
                    ga.data[src_r * n + c] += g.data[out_r * n + c];
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::SelectPerRow(a, labels) => {
            let (m, n) = val(*a).dims2();
            let mut ga = Arr::zeros(&[m, n]);
            for (r, &c) in labels.iter().enumerate() {
                ga.data[r * n + c] = g.data[r];
            }
            accumulate(grads, *a, ga);
        }
        Op::ConcatRows(a, b) => {
            let va = val(*a);
            let vb = val(*b);
            let na = va.len();
            accumulate(
                grads,
                *a,
                Arr {
                    shape: va.shape.clone(),
                    data: g.data[..na].to_vec(),
                },
            );
            accumulate(
                grads,
                *b,
                Arr {
                    shape: vb.shape.clone(),
                    data: g.data[na..].to_vec(),
                },
            );
        }
        Op::ConcatCols(a, b) => {
            let (m, na) = val(*a).dims2();
            let (_, nb) = val(*b).dims2();
            let mut ga = Arr::zeros(&[m, na]);
            let mut gb = Arr::zeros(&[m, nb]);
            let n = na + nb;
            for r in 0..m {
                for c in 0..na {
                    ga.data[r * na + c] = g.data[r * n + c];
                }
                for c in 0..nb {
                    gb.data[r * nb + c] = g.data[r * n + na + c];
                }
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::SliceCols(a, start, end) => {
            let (m, n) = val(*a).dims2();
            let w = end - start;
            let mut ga = Arr::zeros(&[m, n]);
            for r in 0..m {
                for c in 0..w {
                    ga.data[r * n + start + c] = g.data[r * w + c];
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::NeighborMean(a, nbrs) => {
            let (m, d) = val(*a).dims2();
            let mut ga = Arr::zeros(&[m, d]);
            for (i_pt, ns) in nbrs.iter().enumerate() {
                let k = ns.len() as f64;
                for &j in ns {
                    for c in 0..d {
                        ga.data[j * d + c] += g.data[i_pt * d + c] / k;
                    }
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::NeighborSpread(a, nbrs) => {
            // t_i = (1/k) sum_j ||x_j - c_i||^2, c_i the neighbor mean.
            // d t_i / d x_j = (2/k)(x_j - c_i); the centroid terms cancel.
            let va = val(*a);
            let (_, d) = va.dims2();
            let mut ga = Arr::zeros(&va.shape);
            for (i_pt, ns) in nbrs.iter().enumerate() {
                let k = ns.len() as f64;
                let mut centroid = vec![0.0; d];
                for &j in ns {
                    for c in 0..d {
                        centroid[c] += va.data[j * d + c] / k;
                    }
                }
                let go = g.data[i_pt];
                for &j in ns {
                    for c in 0..d {
                        ga.data[j * d + c] += go * 2.0 / k * (va.data[j * d + c] - centroid[c]);
                    }
                }
            }
            accumulate(grads, *a, ga);
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Arr {
        self.tape.value_of(self.idx)
    }

    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar_value on non-scalar");
        v.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.idx)
    }

    /// Gradient populated by the last backward pass; zeros if unreachable.
    pub fn grad(&self) -> Arr {
        let grads = self.tape.grads.borrow();
        match grads.get(self.idx).and_then(|g| g.clone()) {
            Some(g) => g,
            None => Arr::zeros(&self.value().shape),
        }
    }

    fn same_shape(&self, other: Var<'t>, op: &'static str) -> Result<()> {
        let a = self.tape.nodes.borrow();
        let (sa, sb) = (&a[self.idx].value.shape, &a[other.idx].value.shape);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        }
        Ok(())
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        self.tape.record(
            "add",
            Op::Add(self.idx, other.idx),
            Arr {
                shape: a.shape,
                data,
            },
            &[self.idx, other.idx],
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        self.tape.record(
            "sub",
            Op::Sub(self.idx, other.idx),
            Arr {
                shape: a.shape,
                data,
            },
            &[self.idx, other.idx],
        )
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        self.tape.record(
            "mul",
            Op::Mul(self.idx, other.idx),
            Arr {
                shape: a.shape,
                data,
            },
            &[self.idx, other.idx],
        )
    }

    pub fn neg(self) -> Result<Var<'t>> {
        let v = self.value().map(|x| -x);
        self.tape.record("neg", Op::Neg(self.idx), v, &[self.idx])
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x * c);
        self.tape
            .record("scale", Op::Scale(self.idx, c), v, &[self.idx])
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x + c);
        self.tape
            .record("add_scalar", Op::AddScalar(self.idx, c), v, &[self.idx])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", a.shape, b.shape),
            });
        }
        let mut out = Arr::zeros(&[m, n]);
        for r in 0..m {
            for t in 0..k {
                let av = a.data[r * k + t];
                if av == 0.0 {
                    continue;
                }
                for c in 0..n {
                    out.data[r * n + c] += av * b.data[t * n + c];
                }
            }
        }
        self.tape.record(
            "matmul",
            Op::Matmul(self.idx, other.idx),
            out,
            &[self.idx, other.idx],
        )
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.dims2();
        let mut out = Arr::zeros(&[n, m]);
        for r in 0..m {
            for c in 0..n {
                out.data[c * m + r] = a.data[r * n + c];
            }
        }
        self.tape
            .record("transpose", Op::Transpose(self.idx), out, &[self.idx])
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let v = self.value().map(|x| x.max(0.0));
        self.tape.record("relu", Op::Relu(self.idx), v, &[self.idx])
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::tanh);
        self.tape.record("tanh", Op::Tanh(self.idx), v, &[self.idx])
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::exp);
        self.tape.record("exp", Op::Exp(self.idx), v, &[self.idx])
    }

    pub fn ln(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::ln);
        self.tape.record("ln", Op::Ln(self.idx), v, &[self.idx])
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::sqrt);
        self.tape.record("sqrt", Op::Sqrt(self.idx), v, &[self.idx])
    }

    pub fn recip(self) -> Result<Var<'t>> {
        let v = self.value().map(|x| 1.0 / x);
        self.tape
            .record("recip", Op::Recip(self.idx), v, &[self.idx])
    }

    pub fn row_softmax(self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.dims2();
        let mut out = Arr::zeros(&[m, n]);
        for r in 0..m {
            let row = &a.data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..n {
                let e = (row[c] - mx).exp();
                out.data[r * n + c] = e;
                sum += e;
            }
            for c in 0..n {
                out.data[r * n + c] /= sum;
            }
        }
        self.tape
            .record("row_softmax", Op::RowSoftmax(self.idx), out, &[self.idx])
    }

    pub fn row_log_softmax(self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.dims2();
        let mut out = Arr::zeros(&[m, n]);
        for r in 0..m {
            let row = &a.data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for c in 0..n {
                out.data[r * n + c] = row[c] - lse;
            }
        }
        self.tape.record(
            "row_log_softmax",
            Op::RowLogSoftmax(self.idx),
            out,
            &[self.idx],
        )
    }

    pub fn row_logsumexp(self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.dims2();
        let mut out = Arr::zeros(&[m, 1]);
        for r in 0..m {
            let row = &a.data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.data[r] = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        }
        self.tape
            .record("row_logsumexp", Op::RowLogSumExp(self.idx), out, &[self.idx])
    }

    pub fn row_sum(self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.dims2();
        let mut out = Arr::zeros(&[m, 1]);
        for r in 0..m {
            out.data[r] = a.data[r * n..(r + 1) * n].iter().sum();
        }
        self.tape
            .record("row_sum", Op::RowSum(self.idx), out, &[self.idx])
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let s: f64 = self.value().data.iter().sum();
        self.tape
            .record("sum_all", Op::SumAll(self.idx), Arr::scalar(s), &[self.idx])
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.is_empty() {
            return Err(TensorError::Invalid("mean of empty tensor".into()));
        }
        let s: f64 = v.data.iter().sum::<f64>() / v.len() as f64;
        self.tape.record(
            "mean_all",
            Op::MeanAll(self.idx),
            Arr::scalar(s),
            &[self.idx],
        )
    }

    /// matrix (m x n) + row vector broadcast down rows. Row operand may be 1 x n or n.
    pub fn add_row_broadcast(self, row: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let r = row.value();
        let (m, n) = a.dims2();
        if r.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("{:?} + row {:?}", a.shape, r.shape),
            });
        }
        let mut out = a.clone();
        for rr in 0..m {
            for c in 0..n {
                out.data[rr * n + c] += r.data[c];
            }
        }
        self.tape.record(
            "add_row_broadcast",
            Op::AddRowBroadcast(self.idx, row.idx),
            out,
            &[self.idx, row.idx],
        )
    }

    /// matrix (m x n) + column vector (m or m x 1) broadcast across columns.
    pub fn add_col_broadcast(self, col: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let cv = col.value();
        let (m, n) = a.dims2();
        if cv.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "add_col_broadcast",
                detail: format!("{:?} + col {:?}", a.shape, cv.shape),
            });
        }
        let mut out = a.clone();
        for r in 0..m {
            for c in 0..n {
                out.data[r * n + c] += cv.data[r];
            }
        }
        self.tape.record(
            "add_col_broadcast",
            Op::AddColBroadcast(self.idx, col.idx),
            out,
            &[self.idx, col.idx],
        )
    }

    /// matrix (m x n) * column vector (m or m x 1) broadcast across columns.
    pub fn mul_col_broadcast(self, col: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let cv = col.value();
        let (m, n) = a.dims2();
        if cv.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "mul_col_broadcast",
                detail: format!("{:?} * col {:?}", a.shape, cv.shape),
            });
        }
        let mut out = a.clone();
        for r in 0..m {
            for c in 0..n {
                out.data[r * n + c] *= cv.data[r];
            }
        }
        self.tape.record(
            "mul_col_broadcast",
            Op::MulColBroadcast(self.idx, col.idx),
            out,
            &[self.idx, col.idx],
        )
    }

    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.dims2();
        for &i in indices {
            if i >= m {
                return Err(TensorError::Invalid(format!(
                    "gather_rows index {} out of {} rows",
                    i, m
                )));
            }
        }
        let mut out = Arr::zeros(&[indices.len(), n]);
        for (r, &src) in indices.iter().enumerate() {
            out.data[r * n..(r + 1) * n].copy_from_slice(&a.data[src * n..(src + 1) * n]);
        }
        self.tape.record(
            "gather_rows",
            Op::GatherRows(self.idx, indices.to_vec()),
            out,
            &[self.idx],
        )
    }

    /// out[r] = self[r, labels[r]] as an m x 1 column.
    pub fn select_per_row(self, labels: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.dims2();
        if labels.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "select_per_row",
                detail: format!("{} labels for {} rows", labels.len(), m),
            });
        }
        for &l in labels {
            if l >= n {
                return Err(TensorError::Invalid(format!(
                    "label {} out of {} columns",
                    l, n
                )));
            }
        }
        let mut out = Arr::zeros(&[m, 1]);
        for (r, &c) in labels.iter().enumerate() {
            out.data[r] = a.data[r * n + c];
        }
        self.tape.record(
            "select_per_row",
            Op::SelectPerRow(self.idx, labels.to_vec()),
            out,
            &[self.idx],
        )
    }

    pub fn concat_rows(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (ma, na) = a.dims2();
        let (mb, nb) = b.dims2();
        if na != nb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                detail: format!("{:?} vs {:?}", a.shape, b.shape),
            });
        }
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        self.tape.record(
            "concat_rows",
            Op::ConcatRows(self.idx, other.idx),
            Arr {
                shape: vec![ma + mb, na],
                data,
            },
            &[self.idx, other.idx],
        )
    }

    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (ma, na) = a.dims2();
        let (mb, nb) = b.dims2();
        if ma != mb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("{:?} vs {:?}", a.shape, b.shape),
            });
        }
        let n = na + nb;
        let mut out = Arr::zeros(&[ma, n]);
        for r in 0..ma {
            out.data[r * n..r * n + na].copy_from_slice(&a.data[r * na..(r + 1) * na]);
            out.data[r * n + na..(r + 1) * n].copy_from_slice(&b.data[r * nb..(r + 1) * nb]);
        }
        self.tape.record(
            "concat_cols",
            Op::ConcatCols(self.idx, other.idx),
            out,
            &[self.idx, other.idx],
        )
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.dims2();
        if start >= end || end > n {
            return Err(TensorError::Invalid(format!(
                "slice_cols {}..{} on width {}",
                start, end, n
            )));
        }
        let w = end - start;
        let mut out = Arr::zeros(&[m, w]);
        for r in 0..m {
            out.data[r * w..(r + 1) * w].copy_from_slice(&a.data[r * n + start..r * n + end]);
        }
        self.tape.record(
            "slice_cols",
            Op::SliceCols(self.idx, start, end),
            out,
            &[self.idx],
        )
    }

    /// Per-point neighbor centroid over fixed neighbor index lists.
    pub fn neighbor_mean(self, nbrs: &[Vec<usize>]) -> Result<Var<'t>> {
        let a = self.value();
        let (m, d) = a.dims2();
        let mut out = Arr::zeros(&[nbrs.len(), d]);
        for (i, ns) in nbrs.iter().enumerate() {
            if ns.is_empty() {
                return Err(TensorError::Invalid("empty neighbor list".into()));
            }
            let k = ns.len() as f64;
            for &j in ns {
                if j >= m {
                    return Err(TensorError::Invalid("neighbor index out of range".into()));
                }
                for c in 0..d {
                    out.data[i * d + c] += a.data[j * d + c] / k;
                }
            }
        }
        self.tape.record(
            "neighbor_mean",
            Op::NeighborMean(self.idx, nbrs.to_vec()),
            out,
            &[self.idx],
        )
    }

    /// Mean squared distance of the neighbors to their centroid (covariance trace).
    pub fn neighbor_spread(self, nbrs: &[Vec<usize>]) -> Result<Var<'t>> {
        let a = self.value();
        let (_, d) = a.dims2();
        let mut out = Arr::zeros(&[nbrs.len(), 1]);
        for (i, ns) in nbrs.iter().enumerate() {
            let k = ns.len() as f64;
            let mut centroid = vec![0.0; d];
            for &j in ns {
                for c in 0..d {
                    centroid[c] += a.data[j * d + c] / k;
                }
            }
            let mut t = 0.0;
            for &j in ns {
                for c in 0..d {
                    let dlt = a.data[j * d + c] - centroid[c];
                    t += dlt * dlt;
                }
            }
            out.data[i] = t / k;
        }
        self.tape.record(
            "neighbor_spread",
            Op::NeighborSpread(self.idx, nbrs.to_vec()),
            out,
            &[self.idx],
        )
    }

    /// Mean cross-entropy of `self` (logits, m x C) against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        self.row_log_softmax()?
            .select_per_row(labels)?
            .mean_all()?
            .neg()
    }

    /// Global L2 norm of the whole tensor (differentiable).
    pub fn l2_norm(self) -> Result<Var<'t>> {
        let v = Arr::scalar(self.value().frobenius_norm());
        self.tape
            .record("l2_norm", Op::L2Norm(self.idx), v, &[self.idx])
    }
}
