//! Minimal reverse-mode autodiff over dense 2-D arrays.
//!
//! Training runs in f32; gradient checks instantiate the same graphs in f64.
//! A [`Tape`] owns the nodes of one forward pass; [`Var`] is an index into it.
//! There is no global state: disjoint tapes may run on different threads.

pub mod gradcheck;
pub mod params;
pub mod session;

use std::cell::RefCell;

pub use params::ParamSet;
pub use session::{AttnOpts, Session};

/// Scalar type the tape is generic over.
pub trait Real:
    Copy
    + PartialEq
    + PartialOrd
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn max(self, other: Self) -> Self {
                self.max(other)
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<R> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

impl<R: Real> Array<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array { rows, cols, data: vec![R::ZERO; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), rows * cols, "array size mismatch");
        Array { rows, cols, data }
    }

    pub fn from_f64_slice(rows: usize, cols: usize, data: &[f64]) -> Self {
        Array::from_vec(rows, cols, data.iter().map(|&v| R::from_f64(v)).collect())
    }

    pub fn get(&self, r: usize, c: usize) -> R {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: R) {
        self.data[r * self.cols + c] = v;
    }

    pub fn map_to<S: Real>(&self) -> Array<S> {
        Array {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| S::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<R> {
    /// Gradient-tracked input.
    Leaf,
    /// Input with no gradient.
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    RmsNorm { x: Var, gain: Var },
    Gelu(Var),
    Silu(Var),
    Sigmoid(Var),
    Embed { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Rope { x: Var, cos: Vec<R>, sin: Vec<R> },
    CrossEntropyMean { logits: Var, targets: Vec<usize> },
    MseMean { pred: Var, target: Vec<R> },
    MeanRows(Var),
}

struct Node<R> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
    op: Op<R>,
}

const LN_EPS: f64 = 1e-5;

/// The computation graph of one forward pass.
pub struct Tape<R> {
    nodes: RefCell<Vec<Node<R>>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    fn push(&self, rows: usize, cols: usize, data: Vec<R>, op: Op<R>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { rows, cols, data, op });
        Var(nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[v.0].rows, nodes[v.0].cols)
    }

    pub fn value(&self, v: Var) -> Array<R> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Array { rows: n.rows, cols: n.cols, data: n.data.clone() }
    }

    pub fn scalar(&self, v: Var) -> R {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar() on non-scalar");
        n.data[0]
    }

    pub fn leaf(&self, a: &Array<R>) -> Var {
        self.push(a.rows, a.cols, a.data.clone(), Op::Leaf)
    }

    pub fn constant(&self, a: &Array<R>) -> Var {
        self.push(a.rows, a.cols, a.data.clone(), Op::Const)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (m, k, n, data) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            assert_eq!(na.cols, nb.rows, "matmul {}x{} . {}x{}", na.rows, na.cols, nb.rows, nb.cols);
            let (m, k, n) = (na.rows, na.cols, nb.cols);
            let mut out = vec![R::ZERO; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = na.data[i * k + p];
                    if av == R::ZERO {
                        continue;
                    }
                    let brow = &nb.data[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            (m, k, n, out)
        };
        let _ = k;
        self.push(m, n, data, Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            assert_eq!((na.rows, na.cols), (nb.rows, nb.cols), "add shape mismatch");
            let data = na.data.iter().zip(&nb.data).map(|(&x, &y)| x + y).collect();
            (na.rows, na.cols, data)
        };
        self.push(rows, cols, data, Op::Add(a, b))
    }

    /// Add a `[1, N]` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let (na, nr) = (&nodes[a.0], &nodes[row.0]);
            assert_eq!(nr.rows, 1, "add_row needs a [1, N] row");
            assert_eq!(na.cols, nr.cols, "add_row width mismatch");
            let mut data = na.data.clone();
            for r in 0..na.rows {
                for c in 0..na.cols {
                    data[r * na.cols + c] += nr.data[c];
                }
            }
            (na.rows, na.cols, data)
        };
        self.push(rows, cols, data, Op::AddRow(a, row))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            assert_eq!((na.rows, na.cols), (nb.rows, nb.cols), "mul shape mismatch");
            let data = na.data.iter().zip(&nb.data).map(|(&x, &y)| x * y).collect();
            (na.rows, na.cols, data)
        };
        self.push(rows, cols, data, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let kk = R::from_f64(k);
            (na.rows, na.cols, na.data.iter().map(|&x| x * kk).collect())
        };
        self.push(rows, cols, data, Op::Scale(a, k))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let mut data = vec![R::ZERO; na.data.len()];
            for r in 0..na.rows {
                for c in 0..na.cols {
                    data[c * na.rows + r] = na.data[r * na.cols + c];
                }
            }
            (na.cols, na.rows, data)
        };
        self.push(rows, cols, data, Op::Transpose(a))
    }

    /// Row-wise softmax, numerically stabilized.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let mut data = vec![R::ZERO; na.data.len()];
            for r in 0..na.rows {
                let row = &na.data[r * na.cols..(r + 1) * na.cols];
                let mx = row.iter().copied().fold(row[0], R::max);
                let mut sum = R::ZERO;
                for (o, &x) in data[r * na.cols..(r + 1) * na.cols].iter_mut().zip(row) {
                    *o = (x - mx).exp();
                    sum += *o;
                }
                for o in &mut data[r * na.cols..(r + 1) * na.cols] {
                    *o = *o / sum;
                }
            }
            (na.rows, na.cols, data)
        };
        self.push(rows, cols, data, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with learned gain/bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Var {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let (nx, ng, nb) = (&nodes[x.0], &nodes[gain.0], &nodes[bias.0]);
            assert_eq!(ng.cols, nx.cols, "layer_norm gain width");
            assert_eq!(nb.cols, nx.cols, "layer_norm bias width");
            let mut data = vec![R::ZERO; nx.data.len()];
            let eps = R::from_f64(LN_EPS);
            let inv_n = R::from_f64(1.0 / nx.cols as f64);
            for r in 0..nx.rows {
                let row = &nx.data[r * nx.cols..(r + 1) * nx.cols];
                let mut mean = R::ZERO;
                for &v in row {
                    mean += v;
                }
                mean = mean * inv_n;
                let mut var = R::ZERO;
                for &v in row {
                    var += (v - mean) * (v - mean);
                }
                var = var * inv_n;
                let inv_std = R::ONE / (var + eps).sqrt();
                for c in 0..nx.cols {
                    let xhat = (row[c] - mean) * inv_std;
                    data[r * nx.cols + c] = xhat * ng.data[c] + nb.data[c];
                }
            }
            (nx.rows, nx.cols, data)
        };
        self.push(rows, cols, data, Op::LayerNorm { x, gain, bias })
    }

    /// Row-wise RMS normalization with learned gain.
    pub fn rms_norm(&self, x: Var, gain: Var) -> Var {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let (nx, ng) = (&nodes[x.0], &nodes[gain.0]);
            assert_eq!(ng.cols, nx.cols, "rms_norm gain width");
            let mut data = vec![R::ZERO; nx.data.len()];
            let eps = R::from_f64(LN_EPS);
            let inv_n = R::from_f64(1.0 / nx.cols as f64);
            for r in 0..nx.rows {
                let row = &nx.data[r * nx.cols..(r + 1) * nx.cols];
                let mut ms = R::ZERO;
                for &v in row {
                    ms += v * v;
                }
                let inv_rms = R::ONE / (ms * inv_n + eps).sqrt();
                for c in 0..nx.cols {
                    data[r * nx.cols + c] = row[c] * inv_rms * ng.data[c];
                }
            }
            (nx.rows, nx.cols, data)
        };
        self.push(rows, cols, data, Op::RmsNorm { x, gain })
    }

    pub fn gelu(&self, a: Var) -> Var {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let data = na.data.iter().map(|&x| gelu_fwd(x)).collect();
            (na.rows, na.cols, data)
        };
        self.push(rows, cols, data, Op::Gelu(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let data = na.data.iter().map(|&x| x * sigmoid_fwd(x)).collect();
            (na.rows, na.cols, data)
        };
        self.push(rows, cols, data, Op::Silu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let data = na.data.iter().map(|&x| sigmoid_fwd(x)).collect();
            (na.rows, na.cols, data)
        };
        self.push(rows, cols, data, Op::Sigmoid(a))
    }

    /// Row lookup: `out[t] = table[ids[t]]`.
    pub fn embed(&self, table: Var, ids: &[usize]) -> Var {
        let (cols, data) = {
            let nodes = self.nodes.borrow();
            let nt = &nodes[table.0];
            let mut data = Vec::with_capacity(ids.len() * nt.cols);
            for &id in ids {
                assert!(id < nt.rows, "embed id {id} out of table rows {}", nt.rows);
                data.extend_from_slice(&nt.data[id * nt.cols..(id + 1) * nt.cols]);
            }
            (nt.cols, data)
        };
        self.push(ids.len(), cols, data, Op::Embed { table, ids: ids.to_vec() })
    }

    /// Gather rows by index; duplicates allowed.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Var {
        let (cols, data) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let mut data = Vec::with_capacity(idx.len() * nx.cols);
            for &i in idx {
                assert!(i < nx.rows, "gather index {i} out of {} rows", nx.rows);
                data.extend_from_slice(&nx.data[i * nx.cols..(i + 1) * nx.cols]);
            }
            (nx.cols, data)
        };
        self.push(idx.len(), cols, data, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].cols;
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let np = &nodes[p.0];
                assert_eq!(np.cols, cols, "concat_rows width mismatch");
                data.extend_from_slice(&np.data);
                rows += np.rows;
            }
            (rows, cols, data)
        };
        self.push(rows, cols, data, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (rows, cols, data) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].rows;
            let total: usize = parts.iter().map(|&p| nodes[p.0].cols).sum();
            let mut data = vec![R::ZERO; rows * total];
            let mut off = 0;
            for &p in parts {
                let np = &nodes[p.0];
                assert_eq!(np.rows, rows, "concat_cols height mismatch");
                for r in 0..rows {
                    data[r * total + off..r * total + off + np.cols]
                        .copy_from_slice(&np.data[r * np.cols..(r + 1) * np.cols]);
                }
                off += np.cols;
            }
            (rows, total, data)
        };
        self.push(rows, cols, data, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let (rows, data) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            assert!(start + len <= nx.cols, "slice_cols out of range");
            let mut data = Vec::with_capacity(nx.rows * len);
            for r in 0..nx.rows {
                data.extend_from_slice(&nx.data[r * nx.cols + start..r * nx.cols + start + len]);
            }
            (nx.rows, data)
        };
        self.push(rows, len, data, Op::SliceCols { x, start })
    }

    /// Rotary position embedding over even-width rows; `positions[t]` is the
    /// rotation index of row `t`.
    pub fn rope(&self, x: Var, positions: &[usize], base: f64) -> Var {
        let (rows, cols, data, cos, sin) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            assert_eq!(nx.rows, positions.len(), "rope positions length");
            assert_eq!(nx.cols % 2, 0, "rope needs even width");
            let half = nx.cols / 2;
            let mut cos = vec![R::ZERO; nx.rows * half];
            let mut sin = vec![R::ZERO; nx.rows * half];
            for (t, &pos) in positions.iter().enumerate() {
                for i in 0..half {
                    let theta = pos as f64 / base.powf(2.0 * i as f64 / nx.cols as f64);
                    cos[t * half + i] = R::from_f64(theta.cos());
                    sin[t * half + i] = R::from_f64(theta.sin());
                }
            }
            let mut data = vec![R::ZERO; nx.data.len()];
            for t in 0..nx.rows {
                for i in 0..half {
                    let x1 = nx.data[t * nx.cols + 2 * i];
                    let x2 = nx.data[t * nx.cols + 2 * i + 1];
                    let (c, s) = (cos[t * half + i], sin[t * half + i]);
                    data[t * nx.cols + 2 * i] = x1 * c - x2 * s;
                    data[t * nx.cols + 2 * i + 1] = x1 * s + x2 * c;
                }
            }
            (nx.rows, nx.cols, data, cos, sin)
        };
        self.push(rows, cols, data, Op::Rope { x, cos, sin })
    }

    /// Mean cross-entropy of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy_mean(&self, logits: Var, targets: &[usize]) -> Var {
        let data = {
            let nodes = self.nodes.borrow();
            let nl = &nodes[logits.0];
            assert_eq!(nl.rows, targets.len(), "cross_entropy target count");
            let mut total = R::ZERO;
            for (t, &target) in targets.iter().enumerate() {
                assert!(target < nl.cols, "target {target} out of vocab {}", nl.cols);
                let row = &nl.data[t * nl.cols..(t + 1) * nl.cols];
                let mx = row.iter().copied().fold(row[0], R::max);
                let mut sum = R::ZERO;
                for &x in row {
                    sum += (x - mx).exp();
                }
                total += mx + sum.ln() - row[target];
            }
            vec![total * R::from_f64(1.0 / targets.len() as f64)]
        };
        self.push(1, 1, data, Op::CrossEntropyMean { logits, targets: targets.to_vec() })
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse_mean(&self, pred: Var, target: &Array<R>) -> Var {
        let data = {
            let nodes = self.nodes.borrow();
            let np = &nodes[pred.0];
            assert_eq!((np.rows, np.cols), (target.rows, target.cols), "mse target shape");
            let mut total = R::ZERO;
            for (&p, &t) in np.data.iter().zip(&target.data) {
                total += (p - t) * (p - t);
            }
            vec![total * R::from_f64(1.0 / np.data.len() as f64)]
        };
        self.push(1, 1, data, Op::MseMean { pred, target: target.data.clone() })
    }

    /// Column means: `[M, N] -> [1, N]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let (cols, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let mut data = vec![R::ZERO; na.cols];
            for r in 0..na.rows {
                for (c, d) in data.iter_mut().enumerate() {
                    *d += na.data[r * na.cols + c];
                }
            }
            let inv = R::from_f64(1.0 / na.rows as f64);
            for d in &mut data {
                *d = *d * inv;
            }
            (na.cols, data)
        };
        self.push(1, cols, data, Op::MeanRows(a))
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Gradients<R> {
        let nodes = self.nodes.borrow();
        assert_eq!((nodes[loss.0].rows, nodes[loss.0].cols), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<R>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![R::ONE]);

        for i in (0..=loss.0).rev() {
            let Some(g_out) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf | Op::Const => {
                    grads[i] = Some(g_out);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                    let (m, k, n) = (na.rows, na.cols, nb.cols);
                    {
                        let ga = ensure(&mut grads, a.0, na.data.len(), &nodes);
                        for r in 0..m {
                            for p in 0..k {
                                let mut acc = R::ZERO;
                                for c in 0..n {
                                    acc += g_out[r * n + c] * nb.data[p * n + c];
                                }
                                ga[r * k + p] += acc;
                            }
                        }
                    }
                    {
                        let gb = ensure(&mut grads, b.0, nb.data.len(), &nodes);
                        for p in 0..k {
                            for r in 0..m {
                                let av = na.data[r * k + p];
                                if av == R::ZERO {
                                    continue;
                                }
                                for c in 0..n {
                                    gb[p * n + c] += av * g_out[r * n + c];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, &g_out, &nodes);
                    accumulate(&mut grads, b.0, &g_out, &nodes);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, a.0, &g_out, &nodes);
                    let cols = node.cols;
                    let gr = ensure(&mut grads, row.0, cols, &nodes);
                    for r in 0..node.rows {
                        for c in 0..cols {
                            gr[c] += g_out[r * cols + c];
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                    {
                        let ga = ensure(&mut grads, a.0, na.data.len(), &nodes);
                        for (j, g) in g_out.iter().enumerate() {
                            ga[j] += *g * nb.data[j];
                        }
                    }
                    {
                        let gb = ensure(&mut grads, b.0, nb.data.len(), &nodes);
                        for (j, g) in g_out.iter().enumerate() {
                            gb[j] += *g * na.data[j];
                        }
                    }
                }
                Op::Scale(a, kf) => {
                    let k = R::from_f64(*kf);
                    let ga = ensure(&mut grads, a.0, nodes[a.0].data.len(), &nodes);
                    for (j, g) in g_out.iter().enumerate() {
                        ga[j] += *g * k;
                    }
                }
                Op::Transpose(a) => {
                    let na = &nodes[a.0];
                    let ga = ensure(&mut grads, a.0, na.data.len(), &nodes);
                    for r in 0..node.rows {
                        for c in 0..node.cols {
                            ga[c * na.cols + r] += g_out[r * node.cols + c];
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let na = &nodes[a.0];
                    let ga = ensure(&mut grads, a.0, na.data.len(), &nodes);
                    let cols = node.cols;
                    for r in 0..node.rows {
                        let y = &node.data[r * cols..(r + 1) * cols];
                        let gy = &g_out[r * cols..(r + 1) * cols];
                        let mut dot = R::ZERO;
                        for c in 0..cols {
                            dot += gy[c] * y[c];
                        }
                        for c in 0..cols {
                            ga[r * cols + c] += y[c] * (gy[c] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (nx, ng) = (&nodes[x.0], &nodes[gain.0]);
                    let cols = node.cols;
                    let inv_n = R::from_f64(1.0 / cols as f64);
                    let eps = R::from_f64(LN_EPS);
                    // Recompute per-row stats.
                    for r in 0..node.rows {
                        let row = &nx.data[r * cols..(r + 1) * cols];
                        let mut mean = R::ZERO;
                        for &v in row {
                            mean += v;
                        }
                        mean = mean * inv_n;
                        let mut var = R::ZERO;
                        for &v in row {
                            var += (v - mean) * (v - mean);
                        }
                        var = var * inv_n;
                        let inv_std = R::ONE / (var + eps).sqrt();
                        let gy = &g_out[r * cols..(r + 1) * cols];
                        let mut mean_dxhat = R::ZERO;
                        let mut mean_dxhat_xhat = R::ZERO;
                        let mut xhat = vec![R::ZERO; cols];
                        let mut dxhat = vec![R::ZERO; cols];
                        for c in 0..cols {
                            xhat[c] = (row[c] - mean) * inv_std;
                            dxhat[c] = gy[c] * ng.data[c];
                            mean_dxhat += dxhat[c];
                            mean_dxhat_xhat += dxhat[c] * xhat[c];
                        }
                        mean_dxhat = mean_dxhat * inv_n;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
                        {
                            let gx = ensure(&mut grads, x.0, nx.data.len(), &nodes);
                            for c in 0..cols {
                                gx[r * cols + c] +=
                                    (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) * inv_std;
                            }
                        }
                        {
                            let gg = ensure(&mut grads, gain.0, cols, &nodes);
                            for c in 0..cols {
                                gg[c] += gy[c] * xhat[c];
                            }
                        }
                        {
                            let gb = ensure(&mut grads, bias.0, cols, &nodes);
                            for c in 0..cols {
                                gb[c] += gy[c];
                            }
                        }
                    }
                }
                Op::RmsNorm { x, gain } => {
                    let (nx, ng) = (&nodes[x.0], &nodes[gain.0]);
                    let cols = node.cols;
                    let inv_n = R::from_f64(1.0 / cols as f64);
                    let eps = R::from_f64(LN_EPS);
                    for r in 0..node.rows {
                        let row = &nx.data[r * cols..(r + 1) * cols];
                        let mut ms = R::ZERO;
                        for &v in row {
                            ms += v * v;
                        }
                        let rms2 = ms * inv_n + eps;
                        let inv_rms = R::ONE / rms2.sqrt();
                        let gy = &g_out[r * cols..(r + 1) * cols];
                        let mut dot = R::ZERO; // sum_j dyhat_j * x_j
                        for c in 0..cols {
                            dot += gy[c] * ng.data[c] * row[c];
                        }
                        {
                            let gx = ensure(&mut grads, x.0, nx.data.len(), &nodes);
                            for c in 0..cols {
                                let dyhat = gy[c] * ng.data[c];
                                gx[r * cols + c] +=
                                    dyhat * inv_rms - row[c] * dot * inv_n * inv_rms / rms2;
                            }
                        }
                        {
                            let gg = ensure(&mut grads, gain.0, cols, &nodes);
                            for c in 0..cols {
                                gg[c] += gy[c] * row[c] * inv_rms;
                            }
                        }
                    }
                }
                Op::Gelu(a) => {
                    let na = &nodes[a.0];
                    let ga = ensure(&mut grads, a.0, na.data.len(), &nodes);
                    for (j, g) in g_out.iter().enumerate() {
                        ga[j] += *g * gelu_bwd(na.data[j]);
                    }
                }
                Op::Silu(a) => {
                    let na = &nodes[a.0];
                    let ga = ensure(&mut grads, a.0, na.data.len(), &nodes);
                    for (j, g) in g_out.iter().enumerate() {
                        let s = sigmoid_fwd(na.data[j]);
                        ga[j] += *g * (s + na.data[j] * s * (R::ONE - s));
                    }
                }
                Op::Sigmoid(a) => {
                    let na = &nodes[a.0];
                    let ga = ensure(&mut grads, a.0, na.data.len(), &nodes);
                    for (j, g) in g_out.iter().enumerate() {
                        let y = node.data[j];
                        ga[j] += *g * y * (R::ONE - y);
                    }
                    let _ = na;
                }
                Op::Embed { table, ids } => {
                    let nt = &nodes[table.0];
                    let cols = nt.cols;
                    let gt = ensure(&mut grads, table.0, nt.data.len(), &nodes);
                    for (t, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt[id * cols + c] += g_out[t * cols + c];
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    let nx = &nodes[x.0];
                    let cols = nx.cols;
                    let gx = ensure(&mut grads, x.0, nx.data.len(), &nodes);
                    for (t, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gx[i * cols + c] += g_out[t * cols + c];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let np_rows = nodes[p.0].rows;
                        let np_len = nodes[p.0].data.len();
                        let gp = ensure(&mut grads, p.0, np_len, &nodes);
                        let cols = node.cols;
                        for r in 0..np_rows {
                            for c in 0..cols {
                                gp[r * cols + c] += g_out[(off + r) * cols + c];
                            }
                        }
                        off += np_rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let np_cols = nodes[p.0].cols;
                        let np_len = nodes[p.0].data.len();
                        let gp = ensure(&mut grads, p.0, np_len, &nodes);
                        for r in 0..node.rows {
                            for c in 0..np_cols {
                                gp[r * np_cols + c] += g_out[r * node.cols + off + c];
                            }
                        }
                        off += np_cols;
                    }
                }
                Op::SliceCols { x, start } => {
                    let nx = &nodes[x.0];
                    let gx = ensure(&mut grads, x.0, nx.data.len(), &nodes);
                    for r in 0..node.rows {
                        for c in 0..node.cols {
                            gx[r * nx.cols + start + c] += g_out[r * node.cols + c];
                        }
                    }
                }
                Op::Rope { x, cos, sin } => {
                    let nx = &nodes[x.0];
                    let half = node.cols / 2;
                    let gx = ensure(&mut grads, x.0, nx.data.len(), &nodes);
                    for t in 0..node.rows {
                        for i in 0..half {
                            let gy1 = g_out[t * node.cols + 2 * i];
                            let gy2 = g_out[t * node.cols + 2 * i + 1];
                            let (c, s) = (cos[t * half + i], sin[t * half + i]);
                            gx[t * node.cols + 2 * i] += gy1 * c + gy2 * s;
                            gx[t * node.cols + 2 * i + 1] += -gy1 * s + gy2 * c;
                        }
                    }
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let nl = &nodes[logits.0];
                    let cols = nl.cols;
                    let g = g_out[0] * R::from_f64(1.0 / targets.len() as f64);
                    let gl = ensure(&mut grads, logits.0, nl.data.len(), &nodes);
                    for (t, &target) in targets.iter().enumerate() {
                        let row = &nl.data[t * cols..(t + 1) * cols];
                        let mx = row.iter().copied().fold(row[0], R::max);
                        let mut sum = R::ZERO;
                        for &v in row {
                            sum += (v - mx).exp();
                        }
                        for c in 0..cols {
                            let p = (row[c] - mx).exp() / sum;
                            let indicator = if c == target { R::ONE } else { R::ZERO };
                            gl[t * cols + c] += g * (p - indicator);
                        }
                    }
                }
                Op::MseMean { pred, target } => {
                    let np = &nodes[pred.0];
                    let scale = g_out[0] * R::from_f64(2.0 / np.data.len() as f64);
                    let gp = ensure(&mut grads, pred.0, np.data.len(), &nodes);
                    for (j, (&p, &t)) in np.data.iter().zip(target).enumerate() {
                        gp[j] += scale * (p - t);
                    }
                }
                Op::MeanRows(a) => {
                    let na = &nodes[a.0];
                    let inv = R::from_f64(1.0 / na.rows as f64);
                    let ga = ensure(&mut grads, a.0, na.data.len(), &nodes);
                    for r in 0..na.rows {
                        for c in 0..na.cols {
                            ga[r * na.cols + c] += g_out[c] * inv;
                        }
                    }
                }
            }
        }

        Gradients { grads, shapes: nodes.iter().map(|n| (n.rows, n.cols)).collect() }
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
    shapes: Vec<(usize, usize)>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` did not affect it.
    pub fn of(&self, v: Var) -> Array<R> {
        let (rows, cols) = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Array { rows, cols, data: g.clone() },
            None => Array::zeros(rows, cols),
        }
    }
}

fn ensure<'a, R: Real>(
    grads: &'a mut [Option<Vec<R>>],
    idx: usize,
    len: usize,
    _nodes: &[Node<R>],
) -> &'a mut Vec<R> {
    grads[idx].get_or_insert_with(|| vec![R::ZERO; len])
}

fn accumulate<R: Real>(grads: &mut [Option<Vec<R>>], idx: usize, g: &[R], nodes: &[Node<R>]) {
    let slot = ensure(grads, idx, nodes[idx].data.len(), nodes);
    for (s, &v) in slot.iter_mut().zip(g) {
        *s += v;
    }
}

fn sigmoid_fwd<R: Real>(x: R) -> R {
    R::ONE / (R::ONE + (-x).exp())
}

fn gelu_fwd<R: Real>(x: R) -> R {
    let c = R::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = R::from_f64(0.044715);
    let u = c * (x + k * x * x * x);
    R::from_f64(0.5) * x * (R::ONE + u.tanh())
}

fn gelu_bwd<R: Real>(x: R) -> R {
    let c = R::from_f64(0.7978845608028654);
    let k = R::from_f64(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = R::ONE - t * t;
    let du = c * (R::ONE + R::from_f64(3.0) * k * x * x);
    R::from_f64(0.5) * (R::ONE + t) + R::from_f64(0.5) * x * sech2 * du
}

/// Additive attention mask value for blocked positions.
pub const MASK_NEG: f64 = -1e30;

/// Causal mask `[n, n]`: 0 on and below the diagonal, `MASK_NEG` above.
pub fn causal_mask<R: Real>(n: usize) -> Array<R> {
    let mut m = Array::zeros(n, n);
    for r in 0..n {
        for c in r + 1..n {
            m.set(r, c, R::from_f64(MASK_NEG));
        }
    }
    m
}

/// Key mask `[n_q, n_k]`: columns where `allowed` is false get `MASK_NEG`.
pub fn key_mask<R: Real>(n_q: usize, allowed: &[bool]) -> Array<R> {
    let mut m = Array::zeros(n_q, allowed.len());
    for r in 0..n_q {
        for (c, &ok) in allowed.iter().enumerate() {
            if !ok {
                m.set(r, c, R::from_f64(MASK_NEG));
            }
        }
    }
    m
}
