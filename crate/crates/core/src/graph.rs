//! Record-on-forward tape for reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node. Nodes are stored in
//! creation order, which is already a topological order, so `backward` walks
//! the tape once from the end. A node takes part in the backward pass only if
//! one of its inputs does (`needs_grad`); `stop_gradient` cuts that chain.
//!
//! The tape also keeps a multiply-accumulate FLOP counter. Only the matrix
//! class operations (matmul, batched matmul, batched mat-vec, depthwise
//! convolution and the selective scan) contribute, following the counting
//! rules in [`crate::flops`].

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    Abs,
    Square,
    Recip,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleShift(Var, f64),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Unary(Var, Unary),
    SumAll(Var),
    SumLast(Var),
    LogSumExpLast(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    BroadcastRows(Var),
    StopGradient,
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        seqs: usize,
        len: usize,
        width: usize,
    },
    BatchedMatVec {
        mat: Var,
        vec: Var,
        r: usize,
        c: usize,
    },
    Scan(Box<ScanNode>),
    ConvStep {
        window: Var,
        kernel: Var,
        bias: Var,
    },
    SsmStep {
        u: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        h: Var,
        n_state: usize,
        p: usize,
    },
    PoolRows {
        x: Var,
        groups: Vec<Vec<(usize, f64)>>,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
}

#[derive(Clone, Debug)]
struct ScanNode {
    u: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    h0: Var,
    dims: ScanDims,
    /// h_t for t = 0..L, laid out [S, L, n].
    states: Vec<f64>,
}

/// Extents of a batched selective scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub seqs: usize,
    pub len: usize,
    pub n_state: usize,
    pub m: usize,
    pub p: usize,
}

impl ScanDims {
    /// FLOPs charged per sequence step.
    pub fn step_flops(&self) -> u64 {
        let (n, m, p) = (self.n_state as u64, self.m as u64, self.p as u64);
        2 * (n * n + n * m + p * n + p * m)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

/// A single-owner differentiation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    flops: u64,
    check_finite: bool,
    stops: StopValues,
}

/// Record/replay of `stop_gradient` outputs, so finite differences can hold
/// the stopped quantities at their base-point values.
#[derive(Debug, Default)]
struct StopValues {
    record: bool,
    recorded: Vec<Tensor>,
    frozen: Option<Vec<Tensor>>,
    cursor: usize,
}

fn dims_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

// out[m,n] += a[k,m]^T * b[k,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn unary_fwd(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Softplus => softplus(x),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Recip => 1.0 / x,
    }
}

fn unary_deriv(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Gelu => {
            let inner = GELU_C * (x + 0.044715 * x * x * x);
            let t = inner.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Softplus => sigmoid(x),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Recip => -y * y,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}

/// Selective scan forward over `[S, L, ..]` buffers; returns (y, states).
pub(crate) fn scan_forward(
    dims: ScanDims,
    u: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    h0: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let ScanDims {
        seqs,
        len,
        n_state: n,
        m,
        p,
    } = dims;
    let mut y = vec![0.0; seqs * len * p];
    let mut states = vec![0.0; seqs * len * n];
    let mut h = vec![0.0; n];
    for s in 0..seqs {
        h.copy_from_slice(&h0[s * n..(s + 1) * n]);
        for t in 0..len {
            let st = s * len + t;
            states[st * n..(st + 1) * n].copy_from_slice(&h);
            let ut = &u[st * m..(st + 1) * m];
            let at = &a[st * n..(st + 1) * n];
            let bt = &b[st * n * m..(st + 1) * n * m];
            let ct = &c[st * p * n..(st + 1) * p * n];
            let dt = &d[st * p * m..(st + 1) * p * m];
            let yt = &mut y[st * p..(st + 1) * p];
            for (i, yi) in yt.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (cv, hv) in ct[i * n..(i + 1) * n].iter().zip(&h) {
                    acc += cv * hv;
                }
                for (dv, uv) in dt[i * m..(i + 1) * m].iter().zip(ut) {
                    acc += dv * uv;
                }
                *yi = acc;
            }
            for i in 0..n {
                let mut acc = at[i] * h[i];
                for (bv, uv) in bt[i * m..(i + 1) * m].iter().zip(ut) {
                    acc += bv * uv;
                }
                h[i] = acc;
            }
        }
    }
    (y, states)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            check_finite: cfg!(debug_assertions),
            ..Self::default()
        }
    }

    /// Enables or disables the per-operation NaN/Inf check.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate FLOPs recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {} at node {}",
                op_name(&op),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds an input tensor. Gradients are reported for it after
    /// [`Graph::backward`] iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dims_err(name, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    fn row_check(&self, x: Var, v: Var, name: &str) -> Result<usize> {
        let n = self.value(x).last_dim();
        if self.value(v).len() != n || self.value(x).rank() == 0 {
            return Err(dims_err(name, self.shape(x), self.shape(v)));
        }
        Ok(n)
    }

    /// `x[.., j] + v[j]`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let n = self.row_check(x, v, "add_row")?;
        let vv = self.data(v);
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(vv).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x) || self.needs(v);
        self.push(t, Op::AddRow(x, v), ng)
    }

    /// `x[.., j] * v[j]`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let n = self.row_check(x, v, "mul_row")?;
        let vv = self.data(v);
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(vv).map(|(a, b)| a * b))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x) || self.needs(v);
        self.push(t, Op::MulRow(x, v), ng)
    }

    /// `scale * x + shift`.
    pub fn affine_scalar(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(x).map(|v| scale * v + shift);
        let ng = self.needs(x);
        self.push(t, Op::ScaleShift(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine_scalar(x, scale, 0.0)
    }

    /// `x[.., k] @ w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(dims_err("matmul", xs, ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = self.value(x).len() / k.max(1);
        let mut out = vec![0.0; rows * n];
        mm_nn(self.data(x), self.data(w), &mut out, rows, k, n);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n;
        self.flops += 2 * (rows * k * n) as u64;
        let ng = self.needs(x) || self.needs(w);
        self.push(Tensor::new(shape, out)?, Op::MatMul(x, w), ng)
    }

    /// Affine map `x @ w + b` over the trailing axis.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::Dimension(format!(
                "affine: input shape {xs:?} does not match weight shape {ws:?}"
            )));
        }
        if bs.len() != 1 || bs[0] != ws[1] {
            return Err(Error::Dimension(format!(
                "affine: bias shape {bs:?} does not match weight shape {ws:?}"
            )));
        }
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Batched product of `a [S, M, K]` with `b [S, K, N]`, or with
    /// `b [S, N, K]` transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dims_err("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(dims_err("bmm", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for s in 0..batch {
            let asl = &ad[s * m * k..(s + 1) * m * k];
            let bsl = &bd[s * k * n..(s + 1) * k * n];
            let osl = &mut out[s * m * n..(s + 1) * m * n];
            if trans_b {
                mm_nt(asl, bsl, osl, m, k, n);
            } else {
                mm_nn(asl, bsl, osl, m, k, n);
            }
        }
        self.flops += 2 * (batch * m * k * n) as u64;
        let ng = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            ng,
        )
    }

    /// Softmax over the trailing axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if n == 0 || self.value(x).rank() == 0 {
            return Err(Error::Dimension(format!(
                "softmax over empty axis in shape {:?}",
                self.shape(x)
            )));
        }
        let out = softmax_rows(self.data(x), n);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.needs(x);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Normalizes each trailing-axis vector to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.row_check(x, gain, "layer_norm")?;
        self.row_check(x, bias, "layer_norm")?;
        if d == 0 || eps <= 0.0 {
            return Err(Error::Contract("layer_norm needs d >= 1 and eps > 0".into()));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let t = self.value(x).map(|v| unary_fwd(kind, v));
        let ng = self.needs(x);
        self.push(t, Op::Unary(x, kind), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Recip)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(t, Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums the trailing axis away.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(Error::Dimension("sum_last on a scalar".into()));
        }
        let n = xs[xs.len() - 1];
        let data = self.data(x).chunks(n.max(1)).map(|r| r.iter().sum()).collect();
        let t = Tensor::new(xs[..xs.len() - 1].to_vec(), data)?;
        let ng = self.needs(x);
        self.push(t, Op::SumLast(x), ng)
    }

    /// `log Σ exp` over the trailing axis, computed with max subtraction.
    pub fn logsumexp_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || xs[xs.len() - 1] == 0 {
            return Err(Error::Dimension(format!("logsumexp over empty axis {xs:?}")));
        }
        let n = xs[xs.len() - 1];
        let data = self
            .data(x)
            .chunks(n)
            .map(|r| {
                let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let t = Tensor::new(xs[..xs.len() - 1].to_vec(), data)?;
        let ng = self.needs(x);
        self.push(t, Op::LogSumExpLast(x), ng)
    }

    /// Concatenates along the trailing axis; leading extents must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let rows = numel(lead);
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(dims_err("concat_last", &first, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push(Tensor::new(shape, out)?, Op::ConcatLast(xs.to_vec()), ng)
    }

    /// Concatenates along axis 0; trailing extents must agree.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if first.is_empty() {
            return Err(Error::Dimension("concat_rows on scalars".into()));
        }
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(dims_err("concat_rows", &first, s));
            }
            rows += s[0];
            out.extend_from_slice(self.data(v));
        }
        let mut shape = first.clone();
        shape[0] = rows;
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push(Tensor::new(shape, out)?, Op::ConcatRows(xs.to_vec()), ng)
    }

    fn row_size(&self, x: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::Dimension("row op on a scalar".into()));
        }
        Ok((s[0], numel(&s[1..])))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, stride) = self.row_size(x)?;
        if start + len > rows {
            return Err(Error::Dimension(format!(
                "slice {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let data = self.data(x)[start * stride..(start + len) * stride].to_vec();
        let mut shape = self.shape(x).to_vec();
        shape[0] = len;
        let ng = self.needs(x);
        self.push(Tensor::new(shape, data)?, Op::SliceRows { x, start }, ng)
    }

    /// Selects rows along axis 0 (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, stride) = self.row_size(x)?;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::Dimension(format!("row {r} out of {n}")));
            }
            data.extend_from_slice(&self.data(x)[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = rows.len();
        let ng = self.needs(x);
        self.push(
            Tensor::new(shape, data)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    /// Weighted sums of rows along axis 0: output row `g` is
    /// `Σ w · x[i]` over `groups[g]`. Empty groups give zero rows.
    /// Not charged as FLOPs (pooling, like other elementwise work).
    pub fn pool_rows(&mut self, x: Var, groups: &[Vec<(usize, f64)>]) -> Result<Var> {
        let (n, stride) = self.row_size(x)?;
        let xd = self.data(x);
        let mut data = vec![0.0; groups.len() * stride];
        for (gi, grp) in groups.iter().enumerate() {
            let o = &mut data[gi * stride..(gi + 1) * stride];
            for &(r, w) in grp {
                if r >= n {
                    return Err(Error::Dimension(format!("row {r} out of {n}")));
                }
                for (a, b) in o.iter_mut().zip(&xd[r * stride..(r + 1) * stride]) {
                    *a += w * b;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = groups.len();
        let ng = self.needs(x);
        self.push(
            Tensor::new(shape, data)?,
            Op::PoolRows {
                x,
                groups: groups.to_vec(),
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Repeats `v` (any shape) `rows` times along a new leading axis.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let src = self.data(v);
        let mut data = Vec::with_capacity(rows * src.len());
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(self.shape(v));
        let ng = self.needs(v);
        self.push(Tensor::new(shape, data)?, Op::BroadcastRows(v), ng)
    }

    /// Identity forward; contributes nothing to the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let st = &mut self.stops;
        let t = match &st.frozen {
            Some(vals) => {
                let t = vals
                    .get(st.cursor)
                    .ok_or_else(|| Error::Contract("more stop_gradient calls than frozen values".into()))?;
                if t.shape() != self.nodes[x.0].value.shape() {
                    return Err(dims_err("stop_gradient", t.shape(), self.nodes[x.0].value.shape()));
                }
                t.clone()
            }
            None => self.nodes[x.0].value.clone(),
        };
        st.cursor += 1;
        if st.record {
            st.recorded.push(t.clone());
        }
        self.push(t, Op::StopGradient, false)
    }

    /// Starts recording `stop_gradient` outputs.
    pub fn record_stop_values(&mut self) {
        self.stops.record = true;
    }

    pub fn take_stop_values(&mut self) -> Vec<Tensor> {
        std::mem::take(&mut self.stops.recorded)
    }

    /// Makes the i-th `stop_gradient` call output `values[i]` instead of its
    /// input's value.
    pub fn freeze_stop_values(&mut self, values: Vec<Tensor>) {
        self.stops.frozen = Some(values);
        self.stops.cursor = 0;
    }

    /// Depthwise causal convolution over `x [S, L, m]` with `kernel [w, m]`
    /// and `bias [m]`: `y[s,t,c] = bias[c] + Σ_j kernel[j,c]·x[s,t-j,c]`,
    /// with zero left padding.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 2 || ks[1] != xs[2] || self.shape(bias) != [xs[2]] {
            return Err(dims_err("causal_conv1d", &xs, &ks));
        }
        let (seqs, len, m) = (xs[0], xs[1], xs[2]);
        let width = ks[0];
        let (xd, kd, bd) = (self.data(x), self.data(kernel), self.data(bias));
        let mut out = vec![0.0; xd.len()];
        for s in 0..seqs {
            for t in 0..len {
                let o = &mut out[(s * len + t) * m..(s * len + t + 1) * m];
                o.copy_from_slice(bd);
                for j in 0..width.min(t + 1) {
                    let xr = &xd[(s * len + t - j) * m..(s * len + t - j + 1) * m];
                    let kr = &kd[j * m..(j + 1) * m];
                    for c in 0..m {
                        o[c] += kr[c] * xr[c];
                    }
                }
            }
        }
        self.flops += 2 * (seqs * len * width * m) as u64;
        let ng = self.needs(x) || self.needs(kernel) || self.needs(bias);
        self.push(
            Tensor::new(xs, out)?,
            Op::Conv1d {
                x,
                kernel,
                bias,
                seqs,
                len,
                width,
            },
            ng,
        )
    }

    /// Row-wise matrix-vector products: `mat` holds one row-major `r × c`
    /// matrix per row of `vec [R, c]`; the result is `[R, r]`.
    pub fn batched_matvec(&mut self, mat: Var, vec: Var, r: usize, c: usize) -> Result<Var> {
        let vs = self.shape(vec).to_vec();
        if vs.len() != 2 || vs[1] != c || self.value(mat).len() != vs[0] * r * c {
            return Err(dims_err("batched_matvec", self.shape(mat), &vs));
        }
        let rows = vs[0];
        let (md, vd) = (self.data(mat), self.data(vec));
        let mut out = vec![0.0; rows * r];
        for i in 0..rows {
            let v = &vd[i * c..(i + 1) * c];
            for a in 0..r {
                let mrow = &md[(i * r + a) * c..(i * r + a + 1) * c];
                out[i * r + a] = mrow.iter().zip(v).map(|(x, y)| x * y).sum();
            }
        }
        self.flops += 2 * (rows * r * c) as u64;
        let ng = self.needs(mat) || self.needs(vec);
        self.push(
            Tensor::new(vec![rows, r], out)?,
            Op::BatchedMatVec { mat, vec, r, c },
            ng,
        )
    }

    /// Input-dependent linear recurrence, one left-to-right pass per sequence:
    ///
    /// `y_t = C_t h_t + D_t u_t`, `h_{t+1} = diag(a_t) h_t + B_t u_t`.
    ///
    /// Shapes: `u [S,L,m]`, `a [S,L,n]`, `b [S,L,n·m]`, `c [S,L,p·n]`,
    /// `d [S,L,p·m]`, `h0 [S,n]`; output `[S,L,p]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        h0: Var,
        n_state: usize,
        p: usize,
    ) -> Result<Var> {
        let us = self.shape(u).to_vec();
        if us.len() != 3 {
            return Err(Error::Dimension(format!("scan input must be [S,L,m], got {us:?}")));
        }
        let dims = ScanDims {
            seqs: us[0],
            len: us[1],
            n_state,
            m: us[2],
            p,
        };
        let sl = dims.seqs * dims.len;
        let expect = [
            (a, sl * n_state, "a"),
            (b, sl * n_state * dims.m, "b"),
            (c, sl * p * n_state, "c"),
            (d, sl * p * dims.m, "d"),
            (h0, dims.seqs * n_state, "h0"),
        ];
        for (v, n, name) in expect {
            if self.value(v).len() != n {
                return Err(Error::Dimension(format!(
                    "scan operand {name} has shape {:?}, expected {n} values for input {us:?}",
                    self.shape(v)
                )));
            }
        }
        if dims.len == 0 {
            return Err(Error::Contract("selective scan needs L >= 1".into()));
        }
        let (y, states) = scan_forward(
            dims,
            self.data(u),
            self.data(a),
            self.data(b),
            self.data(c),
            self.data(d),
            self.data(h0),
        );
        if self.check_finite {
            if let Some(i) = states.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite scan state at step {}",
                    (i / n_state) % dims.len
                )));
            }
        }
        self.flops += sl as u64 * dims.step_flops();
        let ng = [u, a, b, c, d, h0].iter().any(|&v| self.needs(v));
        self.push(
            Tensor::new(vec![dims.seqs, dims.len, p], y)?,
            Op::Scan(Box::new(ScanNode {
                u,
                a,
                b,
                c,
                d,
                h0,
                dims,
                states,
            })),
            ng,
        )
    }

    /// Last-position output of the depthwise causal convolution, given the
    /// most recent inputs `window [R, w', m]` (oldest first, `w' <= w`).
    /// Charged as a full-width kernel, like [`Graph::causal_conv1d`].
    pub fn conv_step(&mut self, window: Var, kernel: Var, bias: Var) -> Result<Var> {
        let ws = self.shape(window).to_vec();
        let ks = self.shape(kernel).to_vec();
        if ws.len() != 3 || ks.len() != 2 || ks[1] != ws[2] || ws[1] > ks[0] || ws[1] == 0 {
            return Err(dims_err("conv_step", &ws, &ks));
        }
        let (rows, hist, m) = (ws[0], ws[1], ws[2]);
        let (xd, kd, bd) = (self.data(window), self.data(kernel), self.data(bias));
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let o = &mut out[r * m..(r + 1) * m];
            o.copy_from_slice(bd);
            for j in 0..hist {
                // lag j reads position hist-1-j
                let xr = &xd[(r * hist + hist - 1 - j) * m..(r * hist + hist - j) * m];
                for c in 0..m {
                    o[c] += kd[j * m + c] * xr[c];
                }
            }
        }
        self.flops += 2 * (rows * ks[0] * m) as u64;
        let ng = self.needs(window) || self.needs(kernel) || self.needs(bias);
        self.push(
            Tensor::new(vec![rows, m], out)?,
            Op::ConvStep {
                window,
                kernel,
                bias,
            },
            ng,
        )
    }

    /// One step of the selective recurrence for `R` independent rows.
    /// Returns `[R, p + n]`: the readout `C h + D u` followed by the next
    /// state `diag(a) h + B u`. Charged like one step of
    /// [`Graph::selective_scan`].
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_step(
        &mut self,
        u: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        h: Var,
        n_state: usize,
        p: usize,
    ) -> Result<Var> {
        let us = self.shape(u).to_vec();
        if us.len() != 2 {
            return Err(Error::Dimension(format!("ssm_step input must be [R,m], got {us:?}")));
        }
        let (rows, m) = (us[0], us[1]);
        for (v, n, name) in [
            (a, rows * n_state, "a"),
            (b, rows * n_state * m, "b"),
            (c, rows * p * n_state, "c"),
            (d, rows * p * m, "d"),
            (h, rows * n_state, "h"),
        ] {
            if self.value(v).len() != n {
                return Err(Error::Dimension(format!(
                    "ssm_step operand {name} has shape {:?}, expected {n} values",
                    self.shape(v)
                )));
            }
        }
        let dims = ScanDims {
            seqs: rows,
            len: 1,
            n_state,
            m,
            p,
        };
        let (y, _) = scan_forward(
            dims,
            self.data(u),
            self.data(a),
            self.data(b),
            self.data(c),
            self.data(d),
            self.data(h),
        );
        let (ud, ad, bd, hd) = (self.data(u), self.data(a), self.data(b), self.data(h));
        let width = p + n_state;
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            out[r * width..r * width + p].copy_from_slice(&y[r * p..(r + 1) * p]);
            for i in 0..n_state {
                let mut acc = ad[r * n_state + i] * hd[r * n_state + i];
                let brow = &bd[(r * n_state + i) * m..(r * n_state + i + 1) * m];
                for (bv, uv) in brow.iter().zip(&ud[r * m..(r + 1) * m]) {
                    acc += bv * uv;
                }
                out[r * width + p + i] = acc;
            }
        }
        self.flops += rows as u64 * dims.step_flops();
        let ng = [u, a, b, c, d, h].iter().any(|&v| self.needs(v));
        self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::SsmStep {
                u,
                a,
                b,
                c,
                d,
                h,
                n_state,
                p,
            },
            ng,
        )
    }

    /// Columns `start..start + len` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let w = *xs.last().ok_or_else(|| Error::Dimension("slice_last on scalar".into()))?;
        if start + len > w {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} out of width {w}",
                start + len
            )));
        }
        let data = self
            .data(x)
            .chunks(w.max(1))
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let ng = self.needs(x);
        self.push(Tensor::new(shape, data)?, Op::SliceLast { x, start }, ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if self.needs(loss) {
            self.grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        // keep gradients only on leaves that asked for them
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad {
                if self.grads[i].is_none() {
                    self.grads[i] = Some(vec![0.0; node.value.len()]);
                }
            } else {
                self.grads[i] = None;
            }
        }
        Ok(())
    }

    /// Gradient of the last `backward` loss w.r.t. a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.acc(v) {
            f(g);
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.acc_with(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc_with(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                self.acc_with(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc_with(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let bv = self.data(*b).to_vec();
                let av = self.data(*a).to_vec();
                self.acc_with(*a, |ga| {
                    for ((x, gv), y) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += gv * y;
                    }
                });
                self.acc_with(*b, |gb| {
                    for ((x, gv), y) in gb.iter_mut().zip(g).zip(&av) {
                        *x += gv * y;
                    }
                });
            }
            Op::AddRow(x, v) => {
                let n = self.value(*v).len();
                self.acc_with(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                self.acc_with(*v, |gv| {
                    for row in g.chunks(n) {
                        gv.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::MulRow(x, v) => {
                let n = self.value(*v).len();
                let vv = self.data(*v).to_vec();
                let xv = self.data(*x).to_vec();
                self.acc_with(*x, |gx| {
                    for (grow, gin) in gx.chunks_mut(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            grow[j] += gin[j] * vv[j];
                        }
                    }
                });
                self.acc_with(*v, |gv| {
                    for (xrow, gin) in xv.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            gv[j] += gin[j] * xrow[j];
                        }
                    }
                });
            }
            Op::ScaleShift(x, s) => {
                let s = *s;
                self.acc_with(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b));
            }
            Op::MatMul(x, w) => {
                let ws = self.shape(*w).to_vec();
                let (k, n) = (ws[0], ws[1]);
                let rows = g.len() / n.max(1);
                if self.needs(*x) {
                    let wv = self.data(*w).to_vec();
                    self.acc_with(*x, |gx| mm_nt(g, &wv, gx, rows, n, k));
                }
                if self.needs(*w) {
                    let xv = self.data(*x).to_vec();
                    self.acc_with(*w, |gw| mm_tn(&xv, g, gw, k, rows, n));
                }
            }
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.needs(*a) {
                    let bv = self.data(*b).to_vec();
                    self.acc_with(*a, |ga| {
                        for s in 0..batch {
                            let gs = &g[s * m * n..(s + 1) * m * n];
                            let bs = &bv[s * k * n..(s + 1) * k * n];
                            let out = &mut ga[s * m * k..(s + 1) * m * k];
                            if *trans_b {
                                // b is [n, k]
                                mm_nn(gs, bs, out, m, n, k);
                            } else {
                                mm_nt(gs, bs, out, m, n, k);
                            }
                        }
                    });
                }
                if self.needs(*b) {
                    let av = self.data(*a).to_vec();
                    self.acc_with(*b, |gb| {
                        for s in 0..batch {
                            let gs = &g[s * m * n..(s + 1) * m * n];
                            let as_ = &av[s * m * k..(s + 1) * m * k];
                            let out = &mut gb[s * k * n..(s + 1) * k * n];
                            if *trans_b {
                                // d b[n,k] = g^T a
                                mm_tn(gs, as_, out, n, m, k);
                            } else {
                                mm_tn(as_, gs, out, k, m, n);
                            }
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                let n = self.value(*x).last_dim();
                let y = self.nodes[i].value.data().to_vec();
                self.acc_with(*x, |gx| {
                    for ((grow, yrow), gin) in gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yrow.iter().zip(gin).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            grow[j] += yrow[j] * (gin[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let gv = self.data(*gain).to_vec();
                if self.needs(*x) {
                    self.acc_with(*x, |gx| {
                        for (r, inv) in inv_std.iter().enumerate() {
                            let gin = &g[r * d..(r + 1) * d];
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut mean_dxh = 0.0;
                            let mut mean_dxh_xh = 0.0;
                            for j in 0..d {
                                let dxh = gin[j] * gv[j];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xh[j];
                            }
                            mean_dxh /= d as f64;
                            mean_dxh_xh /= d as f64;
                            for j in 0..d {
                                let dxh = gin[j] * gv[j];
                                gx[r * d + j] += inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                            }
                        }
                    });
                }
                self.acc_with(*gain, |gg| {
                    for (gin, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gin[j] * xh[j];
                        }
                    }
                });
                self.acc_with(*bias, |gb| {
                    for gin in g.chunks(d) {
                        gb.iter_mut().zip(gin).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Unary(x, kind) => {
                let xv = self.data(*x).to_vec();
                let yv = self.nodes[i].value.data().to_vec();
                let kind = *kind;
                self.acc_with(*x, |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * unary_deriv(kind, xv[j], yv[j]);
                    }
                });
            }
            Op::SumAll(x) => {
                let s = g[0];
                self.acc_with(*x, |gx| gx.iter_mut().for_each(|a| *a += s));
            }
            Op::SumLast(x) => {
                let n = self.value(*x).last_dim();
                self.acc_with(*x, |gx| {
                    for (grow, &gv) in gx.chunks_mut(n).zip(g) {
                        grow.iter_mut().for_each(|a| *a += gv);
                    }
                });
            }
            Op::LogSumExpLast(x) => {
                let n = self.value(*x).last_dim();
                let sm = softmax_rows(self.data(*x), n);
                self.acc_with(*x, |gx| {
                    for ((grow, srow), &gv) in gx.chunks_mut(n).zip(sm.chunks(n)).zip(g) {
                        for j in 0..n {
                            grow[j] += gv * srow[j];
                        }
                    }
                });
            }
            Op::ConcatLast(xs) => {
                let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for (&v, &w) in xs.iter().zip(&widths) {
                    self.acc_with(v, |gv| {
                        for r in 0..rows {
                            for j in 0..w {
                                gv[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    self.acc_with(v, |gv| {
                        gv.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b)
                    });
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let xs = self.shape(*x);
                let stride = numel(&xs[1..]);
                let o = start * stride;
                self.acc_with(*x, |gx| {
                    gx[o..o + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b)
                });
            }
            Op::GatherRows { x, rows } => {
                let stride = numel(&self.shape(*x)[1..]);
                self.acc_with(*x, |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..stride {
                            gx[r * stride + j] += g[k * stride + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc_with(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::BroadcastRows(v) => {
                let n = self.value(*v).len();
                self.acc_with(*v, |gv| {
                    for row in g.chunks(n) {
                        gv.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                seqs,
                len,
                width,
            } => {
                let (seqs, len, width) = (*seqs, *len, *width);
                let m = self.value(*bias).len();
                let xv = self.data(*x).to_vec();
                let kv = self.data(*kernel).to_vec();
                self.acc_with(*bias, |gb| {
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
                self.acc_with(*kernel, |gk| {
                    for s in 0..seqs {
                        for t in 0..len {
                            let go = &g[(s * len + t) * m..(s * len + t + 1) * m];
                            for j in 0..width.min(t + 1) {
                                let xr = &xv[(s * len + t - j) * m..(s * len + t - j + 1) * m];
                                for c in 0..m {
                                    gk[j * m + c] += go[c] * xr[c];
                                }
                            }
                        }
                    }
                });
                self.acc_with(*x, |gx| {
                    for s in 0..seqs {
                        for t in 0..len {
                            let go = &g[(s * len + t) * m..(s * len + t + 1) * m];
                            for j in 0..width.min(t + 1) {
                                let base = (s * len + t - j) * m;
                                for c in 0..m {
                                    gx[base + c] += go[c] * kv[j * m + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::BatchedMatVec { mat, vec, r, c } => {
                let (r, c) = (*r, *c);
                let rows = g.len() / r.max(1);
                let mv = self.data(*mat).to_vec();
                let vv = self.data(*vec).to_vec();
                self.acc_with(*mat, |gm| {
                    for i in 0..rows {
                        for a in 0..r {
                            let ga = g[i * r + a];
                            for b in 0..c {
                                gm[(i * r + a) * c + b] += ga * vv[i * c + b];
                            }
                        }
                    }
                });
                self.acc_with(*vec, |gv| {
                    for i in 0..rows {
                        for a in 0..r {
                            let ga = g[i * r + a];
                            for b in 0..c {
                                gv[i * c + b] += ga * mv[(i * r + a) * c + b];
                            }
                        }
                    }
                });
            }
            Op::Scan(node) => self.scan_backward(node, g),
            Op::ConvStep {
                window,
                kernel,
                bias,
            } => {
                let ws = self.shape(*window).to_vec();
                let (rows, hist, m) = (ws[0], ws[1], ws[2]);
                let xv = self.data(*window).to_vec();
                let kv = self.data(*kernel).to_vec();
                self.acc_with(*bias, |gb| {
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
                self.acc_with(*kernel, |gk| {
                    for r in 0..rows {
                        for j in 0..hist {
                            let base = (r * hist + hist - 1 - j) * m;
                            for c in 0..m {
                                gk[j * m + c] += g[r * m + c] * xv[base + c];
                            }
                        }
                    }
                });
                self.acc_with(*window, |gx| {
                    for r in 0..rows {
                        for j in 0..hist {
                            let base = (r * hist + hist - 1 - j) * m;
                            for c in 0..m {
                                gx[base + c] += g[r * m + c] * kv[j * m + c];
                            }
                        }
                    }
                });
            }
            Op::SsmStep {
                u,
                a,
                b,
                c,
                d,
                h,
                n_state,
                p,
            } => {
                let (n, p) = (*n_state, *p);
                let width = n + p;
                let m = self.value(*u).last_dim();
                let rows = g.len() / width;
                let (uv, av, bv) = (self.data(*u).to_vec(), self.data(*a).to_vec(), self.data(*b).to_vec());
                let (cv, dv, hv) = (self.data(*c).to_vec(), self.data(*d).to_vec(), self.data(*h).to_vec());
                let mut du = vec![0.0; uv.len()];
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                let mut dc = vec![0.0; cv.len()];
                let mut dd = vec![0.0; dv.len()];
                let mut dh = vec![0.0; hv.len()];
                for r in 0..rows {
                    let gy = &g[r * width..r * width + p];
                    let gh = &g[r * width + p..(r + 1) * width];
                    let ur = &uv[r * m..(r + 1) * m];
                    for i in 0..n {
                        let gi = gh[i];
                        da[r * n + i] += gi * hv[r * n + i];
                        dh[r * n + i] += gi * av[r * n + i];
                        let off = (r * n + i) * m;
                        for k in 0..m {
                            db[off + k] += gi * ur[k];
                            du[r * m + k] += gi * bv[off + k];
                        }
                    }
                    for (o, &gr) in gy.iter().enumerate() {
                        let coff = (r * p + o) * n;
                        for i in 0..n {
                            dc[coff + i] += gr * hv[r * n + i];
                            dh[r * n + i] += gr * cv[coff + i];
                        }
                        let doff = (r * p + o) * m;
                        for k in 0..m {
                            dd[doff + k] += gr * ur[k];
                            du[r * m + k] += gr * dv[doff + k];
                        }
                    }
                }
                for (v, gv) in [(*u, du), (*a, da), (*b, db), (*c, dc), (*d, dd), (*h, dh)] {
                    self.acc_with(v, |acc| acc.iter_mut().zip(&gv).for_each(|(x, y)| *x += y));
                }
            }
            Op::PoolRows { x, groups } => {
                let stride = numel(&self.shape(*x)[1..]);
                self.acc_with(*x, |gx| {
                    for (gi, grp) in groups.iter().enumerate() {
                        for &(r, w) in grp {
                            for j in 0..stride {
                                gx[r * stride + j] += w * g[gi * stride + j];
                            }
                        }
                    }
                });
            }
            Op::SliceLast { x, start } => {
                let w = self.value(*x).last_dim();
                let len = self.nodes[i].value.last_dim();
                let start = *start;
                self.acc_with(*x, |gx| {
                    for (grow, gin) in gx.chunks_mut(w).zip(g.chunks(len)) {
                        for j in 0..len {
                            grow[start + j] += gin[j];
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    fn scan_backward(&mut self, node: &ScanNode, gy: &[f64]) {
        let ScanDims {
            seqs,
            len,
            n_state: n,
            m,
            p,
        } = node.dims;
        let u = self.data(node.u).to_vec();
        let a = self.data(node.a).to_vec();
        let b = self.data(node.b).to_vec();
        let c = self.data(node.c).to_vec();
        let d = self.data(node.d).to_vec();
        let h = &node.states;
        let mut du = vec![0.0; u.len()];
        let mut da = vec![0.0; a.len()];
        let mut db = vec![0.0; b.len()];
        let mut dc = vec![0.0; c.len()];
        let mut dd = vec![0.0; d.len()];
        let mut dh0 = vec![0.0; seqs * n];
        // gradient w.r.t. h_{t+1}, carried backwards
        let mut carry = vec![0.0; n];
        let mut dh = vec![0.0; n];
        for s in 0..seqs {
            carry.iter_mut().for_each(|v| *v = 0.0);
            for t in (0..len).rev() {
                let st = s * len + t;
                let ht = &h[st * n..(st + 1) * n];
                let ut = &u[st * m..(st + 1) * m];
                let gyt = &gy[st * p..(st + 1) * p];
                let at = &a[st * n..(st + 1) * n];
                // transition: h_{t+1} = a ⊙ h_t + B u_t
                for i in 0..n {
                    let gi = carry[i];
                    da[st * n + i] += gi * ht[i];
                    dh[i] = gi * at[i];
                    let brow = &b[(st * n + i) * m..(st * n + i + 1) * m];
                    let dbrow = &mut db[(st * n + i) * m..(st * n + i + 1) * m];
                    for k in 0..m {
                        dbrow[k] += gi * ut[k];
                        du[st * m + k] += gi * brow[k];
                    }
                }
                // readout: y_t = C h_t + D u_t
                for (r, &gr) in gyt.iter().enumerate() {
                    let crow = (st * p + r) * n;
                    for i in 0..n {
                        dc[crow + i] += gr * ht[i];
                        dh[i] += gr * c[crow + i];
                    }
                    let drow = (st * p + r) * m;
                    for k in 0..m {
                        dd[drow + k] += gr * ut[k];
                        du[st * m + k] += gr * d[drow + k];
                    }
                }
                carry.copy_from_slice(&dh);
            }
            dh0[s * n..(s + 1) * n].copy_from_slice(&carry);
        }
        let pairs = [
            (node.u, du),
            (node.a, da),
            (node.b, db),
            (node.c, dc),
            (node.d, dd),
            (node.h0, dh0),
        ];
        for (v, gv) in pairs {
            self.acc_with(v, |acc| acc.iter_mut().zip(&gv).for_each(|(x, y)| *x += y));
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::ScaleShift(..) => "scale",
        Op::MatMul(..) => "matmul",
        Op::Bmm { .. } => "bmm",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Unary(_, k) => match k {
            Unary::Gelu => "gelu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Recip => "recip",
        },
        Op::SumAll(..) => "sum",
        Op::SumLast(..) => "sum_last",
        Op::LogSumExpLast(..) => "logsumexp",
        Op::ConcatLast(..) => "concat_last",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::Reshape(..) => "reshape",
        Op::BroadcastRows(..) => "broadcast_rows",
        Op::StopGradient => "stop_gradient",
        Op::Conv1d { .. } => "causal_conv1d",
        Op::BatchedMatVec { .. } => "batched_matvec",
        Op::Scan(..) => "selective_scan",
        Op::ConvStep { .. } => "conv_step",
        Op::SsmStep { .. } => "ssm_step",
        Op::PoolRows { .. } => "pool_rows",
        Op::SliceLast { .. } => "slice_last",
    }
}
