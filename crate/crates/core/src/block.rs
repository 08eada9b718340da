//! Sequence blocks: the selective state-space block and its two ablation
//! baselines (constant-matrix SSM, single-head softmax attention).
//!
//! All three share one skeleton over `x [S, L, d]`:
//!
//! ```text
//! y = LN(x + mixer(x))
//! z = LN(y + FFN(y))
//! ```
//!
//! The SSM mixers compute `Proj_out(scan(Conv1D(Proj_in(x))))`, where the
//! post-convolution token `u_t` both drives the recurrence and, in the
//! selective case, emits the per-step matrices `A_t` (diagonal, squashed into
//! (0, 1)), `B_t`, `C_t` and `D_t`.

use crate::config::{BlockKind, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{FeedForward, Linear, Norm};
use crate::params::{Ctx, ParamBuilder, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub d: usize,
    pub m: usize,
    pub p: usize,
    pub n_state: usize,
    pub d_ff: usize,
    pub conv_width: usize,
}

impl BlockDims {
    pub fn from_config(c: &ModelConfig) -> Self {
        Self {
            d: c.d,
            m: c.m,
            p: c.p,
            n_state: c.n_state,
            d_ff: c.d_ff,
            conv_width: c.conv_width,
        }
    }

    /// Total width of the emitted `(A, B, C, D)` per token.
    fn ssm_width(&self) -> usize {
        let (n, m, p) = (self.n_state, self.m, self.p);
        n + n * m + p * n + p * m
    }
}

/// Per-token projections emitting the selective SSM matrices.
#[derive(Clone, Debug)]
pub struct SelectiveProj {
    pub a: Linear,
    pub b: Linear,
    pub c: Linear,
    pub d: Linear,
}

/// Learned constant SSM matrices.
#[derive(Clone, Debug)]
pub struct FixedSsm {
    /// Pre-sigmoid diagonal of `A`.
    pub a: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub d: ParamId,
}

#[derive(Clone, Debug)]
pub enum SsmMatrices {
    Selective(SelectiveProj),
    Fixed(FixedSsm),
}

#[derive(Clone, Debug)]
pub struct SsmMixer {
    pub in_proj: Linear,
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub matrices: SsmMatrices,
    pub out_proj: Linear,
}

#[derive(Clone, Debug)]
pub struct AttentionMixer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Ssm(SsmMixer),
    Attention(AttentionMixer),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub kind: BlockKind,
    pub dims: BlockDims,
    pub mixer: Mixer,
    pub norm1: Norm,
    pub ffn: FeedForward,
    pub norm2: Norm,
}

/// Recurrent state threaded through [`Block::step`].
#[derive(Clone, Debug)]
pub struct BlockState {
    /// Recent projected inputs `[R, m]`, oldest first, at most `w - 1`.
    history: Vec<Var>,
    /// SSM hidden state `[R, n]`.
    pub h: Var,
}

/// The `(A, B, C, D)` operands handed to the scan.
struct ScanOperands {
    a: Var,
    b: Var,
    c: Var,
    d: Var,
}

impl Block {
    pub fn new(pb: &mut ParamBuilder, name: &str, kind: BlockKind, dims: BlockDims) -> Result<Self> {
        let BlockDims {
            d,
            m,
            p,
            n_state: n,
            d_ff,
            conv_width,
        } = dims;
        let mixer = match kind {
            BlockKind::Attention => Mixer::Attention(AttentionMixer {
                q: Linear::new(pb, &format!("{name}.attn.q"), d, m)?,
                k: Linear::new(pb, &format!("{name}.attn.k"), d, m)?,
                v: Linear::new(pb, &format!("{name}.attn.v"), d, m)?,
                out: Linear::new(pb, &format!("{name}.attn.out"), m, d)?,
            }),
            BlockKind::Tamba | BlockKind::Mamba => {
                let in_proj = Linear::new(pb, &format!("{name}.ssm.in_proj"), d, m)?;
                let conv_kernel = pb.uniform(
                    &format!("{name}.ssm.conv.kernel"),
                    &[conv_width, m],
                    1.0 / conv_width as f64,
                )?;
                let conv_bias = pb.zeros(&format!("{name}.ssm.conv.bias"), &[m])?;
                let matrices = if kind == BlockKind::Tamba {
                    // small emissions keep the initial recurrence well scaled
                    let proj = |pb: &mut ParamBuilder, tag: &str, out: usize, scale: f64| -> Result<Linear> {
                        let weight = pb.uniform(&format!("{name}.ssm.{tag}.weight"), &[m, out], scale)?;
                        let bias = pb.zeros(&format!("{name}.ssm.{tag}.bias"), &[out])?;
                        Ok(Linear {
                            weight,
                            bias: Some(bias),
                            d_in: m,
                            d_out: out,
                        })
                    };
                    let s = 1.0 / m as f64;
                    SsmMatrices::Selective(SelectiveProj {
                        a: proj(pb, "W_A", n, (3.0 / m as f64).sqrt())?,
                        b: proj(pb, "W_B", n * m, s)?,
                        c: proj(pb, "W_C", p * n, s)?,
                        d: proj(pb, "W_D", p * m, s)?,
                    })
                } else {
                    let s = 1.0 / (m as f64).sqrt();
                    SsmMatrices::Fixed(FixedSsm {
                        a: pb.uniform(&format!("{name}.ssm.A"), &[n], 1.0)?,
                        b: pb.uniform(&format!("{name}.ssm.B"), &[n, m], s)?,
                        c: pb.uniform(&format!("{name}.ssm.C"), &[p, n], s)?,
                        d: pb.uniform(&format!("{name}.ssm.D"), &[p, m], s)?,
                    })
                };
                Mixer::Ssm(SsmMixer {
                    in_proj,
                    conv_kernel,
                    conv_bias,
                    matrices,
                    out_proj: Linear::new(pb, &format!("{name}.ssm.out_proj"), p, d)?,
                })
            }
        };
        Ok(Self {
            kind,
            dims,
            mixer,
            norm1: Norm::new(pb, &format!("{name}.norm1"), d)?,
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), d, d_ff)?,
            norm2: Norm::new(pb, &format!("{name}.norm2"), d)?,
        })
    }

    fn check_input(&self, cx: &Ctx, x: Var) -> Result<(usize, usize)> {
        let s = cx.g.shape(x);
        if s.len() != 3 || s[2] != self.dims.d {
            return Err(Error::Dimension(format!(
                "block expects [S, L, {}], got {s:?}",
                self.dims.d
            )));
        }
        Ok((s[0], s[1]))
    }

    /// Full-sequence forward over `x [S, L, d]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        self.check_input(cx, x)?;
        let inner = match &self.mixer {
            Mixer::Ssm(mix) => {
                let u = mix.input(cx, x)?;
                let y = mix.scan(cx, u, self.dims)?;
                mix.out_proj.forward(cx, y)?
            }
            Mixer::Attention(att) => {
                let (out, _) = att.forward(cx, x, self.dims.m)?;
                out
            }
        };
        self.finish(cx, x, inner)
    }

    fn finish(&self, cx: &mut Ctx, x: Var, inner: Var) -> Result<Var> {
        let r = cx.g.add(x, inner)?;
        let y = self.norm1.forward(cx, r)?;
        let f = self.ffn.forward(cx, y)?;
        let r2 = cx.g.add(y, f)?;
        self.norm2.forward(cx, r2)
    }

    /// Fresh recurrent state for `rows` independent sequences, with the SSM
    /// state set to `h0` (zeros when `None`).
    pub fn init_state(&self, cx: &mut Ctx, rows: usize, h0: Option<Var>) -> Result<BlockState> {
        if !matches!(self.mixer, Mixer::Ssm(_)) {
            return Err(Error::Contract("step mode needs a state-space block".into()));
        }
        let h = match h0 {
            Some(h) => h,
            None => cx.g.constant(Tensor::zeros(&[rows, self.dims.n_state])),
        };
        Ok(BlockState {
            history: Vec::new(),
            h,
        })
    }

    /// One recurrent step over `x [R, d]`, advancing `state`. Running `L`
    /// steps reproduces [`Block::forward`] on the stacked sequence.
    pub fn step(&self, cx: &mut Ctx, x: Var, state: &mut BlockState) -> Result<Var> {
        let Mixer::Ssm(mix) = &self.mixer else {
            return Err(Error::Contract("step mode needs a state-space block".into()));
        };
        let BlockDims {
            d,
            m,
            p,
            n_state: n,
            conv_width,
            ..
        } = self.dims;
        let rows = cx.g.shape(x)[0];
        if cx.g.shape(x) != [rows, d] {
            return Err(Error::Dimension(format!(
                "step expects [R, {d}], got {:?}",
                cx.g.shape(x)
            )));
        }
        let xin = mix.in_proj.forward(cx, x)?;
        let mut window: Vec<Var> = state.history.clone();
        window.push(xin);
        let hist = window.len();
        let stacked = cx.g.concat_last(&window)?;
        let stacked = cx.g.reshape(stacked, &[rows, hist, m])?;
        let (k, b) = (cx.p(mix.conv_kernel), cx.p(mix.conv_bias));
        let u = cx.g.conv_step(stacked, k, b)?;
        if window.len() >= conv_width {
            window.remove(0);
        }
        state.history = window;
        let ops = mix.operands(cx, u, rows, self.dims)?;
        let out = cx.g.ssm_step(u, ops.a, ops.b, ops.c, ops.d, state.h, n, p)?;
        let y = cx.g.slice_last(out, 0, p)?;
        state.h = cx.g.slice_last(out, p, n)?;
        let inner = mix.out_proj.forward(cx, y)?;
        self.finish(cx, x, inner)
    }

    /// Attention weights `[S, L, L]` of an attention block.
    pub fn attention_weights(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        self.check_input(cx, x)?;
        match &self.mixer {
            Mixer::Attention(att) => Ok(att.forward(cx, x, self.dims.m)?.1),
            Mixer::Ssm(_) => Err(Error::Contract("not an attention block".into())),
        }
    }

    pub fn num_params(&self) -> usize {
        let BlockDims {
            d,
            m,
            p,
            n_state: n,
            conv_width,
            ..
        } = self.dims;
        let mixer = match &self.mixer {
            Mixer::Attention(a) => {
                a.q.num_params() + a.k.num_params() + a.v.num_params() + a.out.num_params()
            }
            Mixer::Ssm(s) => {
                let mats = match &s.matrices {
                    SsmMatrices::Selective(_) => (m + 1) * self.dims.ssm_width(),
                    SsmMatrices::Fixed(_) => n + n * m + p * n + p * m,
                };
                (d + 1) * m + conv_width * m + m + mats + (p + 1) * d
            }
        };
        mixer + self.norm1.num_params() + self.ffn.num_params() + self.norm2.num_params()
    }
}

impl SsmMixer {
    fn input(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let xin = self.in_proj.forward(cx, x)?;
        let (k, b) = (cx.p(self.conv_kernel), cx.p(self.conv_bias));
        cx.g.causal_conv1d(xin, k, b)
    }

    /// Emits `(A, B, C, D)` for `rows` tokens from `u [.., m]`.
    fn operands(&self, cx: &mut Ctx, u: Var, rows: usize, dims: BlockDims) -> Result<ScanOperands> {
        match &self.matrices {
            SsmMatrices::Selective(pr) => {
                let a_raw = pr.a.forward(cx, u)?;
                Ok(ScanOperands {
                    a: cx.g.sigmoid(a_raw)?,
                    b: pr.b.forward(cx, u)?,
                    c: pr.c.forward(cx, u)?,
                    d: pr.d.forward(cx, u)?,
                })
            }
            SsmMatrices::Fixed(f) => {
                let _ = dims;
                let a_raw = cx.p(f.a);
                let a = cx.g.sigmoid(a_raw)?;
                let (b, c, d) = (cx.p(f.b), cx.p(f.c), cx.p(f.d));
                Ok(ScanOperands {
                    a: cx.g.broadcast_rows(a, rows)?,
                    b: cx.g.broadcast_rows(b, rows)?,
                    c: cx.g.broadcast_rows(c, rows)?,
                    d: cx.g.broadcast_rows(d, rows)?,
                })
            }
        }
    }

    fn scan(&self, cx: &mut Ctx, u: Var, dims: BlockDims) -> Result<Var> {
        let s = cx.g.shape(u).to_vec();
        let (seqs, len) = (s[0], s[1]);
        let ops = self.operands(cx, u, seqs * len, dims)?;
        let h0 = cx.g.constant(Tensor::zeros(&[seqs, dims.n_state]));
        cx.g.selective_scan(u, ops.a, ops.b, ops.c, ops.d, h0, dims.n_state, dims.p)
    }
}

impl AttentionMixer {
    /// Returns (projected output `[S, L, d]`, weights `[S, L, L]`).
    fn forward(&self, cx: &mut Ctx, x: Var, dk: usize) -> Result<(Var, Var)> {
        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, x)?;
        let v = self.v.forward(cx, x)?;
        let scores = cx.g.bmm(q, k, true)?;
        let scores = cx.g.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let w = cx.g.softmax(scores)?;
        let mixed = cx.g.bmm(w, v, false)?;
        Ok((self.out.forward(cx, mixed)?, w))
    }
}

/// Analytic forward FLOPs of one block over a sequence of length `len`
/// (per sequence).
///
/// Affine layers cost `2·d_in·d_out` per token; the depthwise convolution
/// `2·w·m` per token; the scan `2·(n² + n·m + p·n + p·m)` per token; the
/// selective projections are affine layers `m → (n + n·m + p·n + p·m)`;
/// attention adds `2·L²·d_k` for scores and `2·L²·d_k` for the weighted sum.
/// Elementwise work, normalization and softmax are not counted.
pub fn block_flops(kind: BlockKind, dims: BlockDims, len: usize) -> u64 {
    let BlockDims {
        d,
        m,
        p,
        n_state: n,
        d_ff,
        conv_width,
    } = dims;
    let l = len as u64;
    let aff = |i: usize, o: usize| 2 * (i * o) as u64 * l;
    let ffn = aff(d, d_ff) + aff(d_ff, d);
    let mixer = match kind {
        BlockKind::Attention => {
            let lsq = l * l;
            3 * aff(d, m) + 2 * lsq * m as u64 + 2 * lsq * m as u64 + aff(m, d)
        }
        BlockKind::Tamba | BlockKind::Mamba => {
            let scan = 2 * l * (n * n + n * m + p * n + p * m) as u64;
            let conv = 2 * l * (conv_width * m) as u64;
            let select = if kind == BlockKind::Tamba {
                aff(m, dims.ssm_width())
            } else {
                0
            };
            aff(d, m) + conv + select + scan + aff(p, d)
        }
    };
    mixer + ffn
}

/// FLOPs of one recurrent [`Block::step`] per row (state-space kinds only).
pub fn block_step_flops(kind: BlockKind, dims: BlockDims) -> u64 {
    block_flops(kind, dims, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(d: usize) -> BlockDims {
        BlockDims {
            d,
            m: 6,
            p: 6,
            n_state: 3,
            d_ff: 10,
            conv_width: 4,
        }
    }

    fn build(kind: BlockKind, d: usize, seed: u64) -> (Block, ParamStore) {
        let mut pb = ParamBuilder::new(seed);
        let b = Block::new(&mut pb, "block.0", kind, dims(d)).unwrap();
        (b, pb.finish())
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn shape_contract_all_kinds() {
        for kind in BlockKind::ALL {
            let (b, store) = build(kind, 16, 1);
            let mut cx = Ctx::new(&store, false);
            let x = cx.g.constant(rand_input(&[1, 7, 16], 2));
            let y = b.forward(&mut cx, x).unwrap();
            assert_eq!(cx.g.shape(y), &[1, 7, 16]);
        }
    }

    #[test]
    fn param_count_matches_store() {
        for kind in BlockKind::ALL {
            let (b, store) = build(kind, 8, 1);
            assert_eq!(b.num_params(), store.num_scalars(), "{kind:?}");
        }
        let (t, _) = build(BlockKind::Tamba, 8, 1);
        let (m, _) = build(BlockKind::Mamba, 8, 1);
        assert!(m.num_params() < t.num_params());
    }

    #[test]
    fn dead_residual_branches_give_double_norm() {
        let (b, mut store) = build(BlockKind::Tamba, 5, 3);
        let Mixer::Ssm(mix) = &b.mixer else { unreachable!() };
        for id in [mix.out_proj.weight, mix.out_proj.bias.unwrap()]
            .into_iter()
            .chain([b.ffn.down.weight, b.ffn.down.bias.unwrap()])
        {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut cx = Ctx::new(&store, false);
        let xt = rand_input(&[2, 4, 5], 9);
        let x = cx.g.constant(xt.clone());
        let y = b.forward(&mut cx, x).unwrap();
        // LN(LN(x)) with unit gain and zero bias
        let ln = |v: &[f64]| -> Vec<f64> {
            let mu = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - mu) / (var + 1e-5).sqrt()).collect()
        };
        for (row, out) in xt.data().chunks(5).zip(cx.g.value(y).data().chunks(5)) {
            let want = ln(&ln(row));
            for (a, b) in want.iter().zip(out) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_mode_reproduces_sequence_forward() {
        let (b, store) = build(BlockKind::Tamba, 8, 5);
        let xt = rand_input(&[3, 9, 8], 4);
        let mut cx = Ctx::new(&store, false);
        let x = cx.g.constant(xt.clone());
        let full = b.forward(&mut cx, x).unwrap();
        let full = cx.g.value(full).clone();
        let mut state = b.init_state(&mut cx, 3, None).unwrap();
        for t in 0..9 {
            let rows: Vec<f64> = (0..3)
                .flat_map(|s| xt.data()[(s * 9 + t) * 8..(s * 9 + t + 1) * 8].to_vec())
                .collect();
            let xs = cx.g.constant(Tensor::new(vec![3, 8], rows).unwrap());
            let y = b.step(&mut cx, xs, &mut state).unwrap();
            for s in 0..3 {
                for j in 0..8 {
                    let a = cx.g.value(y).at(&[s, j]);
                    let e = full.at(&[s, t, j]);
                    assert!((a - e).abs() < 1e-12, "t={t} s={s} j={j}: {a} vs {e}");
                }
            }
        }
    }

    #[test]
    fn attention_single_step_and_uniform_keys() {
        let (b, mut store) = build(BlockKind::Attention, 4, 2);
        let mut cx = Ctx::new(&store, false);
        let x = cx.g.constant(rand_input(&[1, 1, 4], 3));
        let w = b.attention_weights(&mut cx, x).unwrap();
        assert_eq!(cx.g.value(w).data(), &[1.0]);

        // zero key projection: all keys equal, output is the mean of values
        let Mixer::Attention(att) = &b.mixer else { unreachable!() };
        let kw = att.k.weight;
        let shape = store.get(kw).shape().to_vec();
        *store.get_mut(kw) = Tensor::zeros(&shape);
        let mut cx = Ctx::new(&store, false);
        let x = cx.g.constant(rand_input(&[1, 5, 4], 8));
        let w = b.attention_weights(&mut cx, x).unwrap();
        for v in cx.g.value(w).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn flops_formula_examples() {
        let dm = dims(8);
        let f = |k, l| block_flops(k, dm, l);
        let ssm = |l: u64| 2 * l * (9 + 18 + 18 + 36);
        assert_eq!(ssm(2), 2 * ssm(1));
        // whole SSM block is linear in L
        assert_eq!(f(BlockKind::Tamba, 128), 2 * f(BlockKind::Tamba, 64));
        // attention quadratic term quadruples
        let quad = |l: u64| f(BlockKind::Attention, l as usize) - 2 * f(BlockKind::Attention, l as usize / 2);
        assert_eq!(quad(128) * 4, quad(256));
    }

    #[test]
    fn instrumented_flops_match_formula() {
        for kind in BlockKind::ALL {
            let (b, store) = build(kind, 8, 1);
            for len in [1, 5, 12] {
                let mut cx = Ctx::new(&store, false);
                let x = cx.g.constant(rand_input(&[2, len, 8], 1));
                b.forward(&mut cx, x).unwrap();
                assert_eq!(cx.g.flops(), 2 * block_flops(kind, b.dims, len), "{kind:?} L={len}");
            }
        }
    }

    /// Direct transcription of the recurrence, one sequence at a time.
    fn naive_scan(u: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor, n: usize, p: usize) -> Vec<f64> {
        let (seqs, len, m) = (u.shape()[0], u.shape()[1], u.shape()[2]);
        let mut y = Vec::new();
        for s in 0..seqs {
            let mut h = vec![0.0; n];
            for t in 0..len {
                let k = s * len + t;
                let ut = &u.data()[k * m..(k + 1) * m];
                for o in 0..p {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += c.data()[k * p * n + o * n + i] * h[i];
                    }
                    for j in 0..m {
                        acc += d.data()[k * p * m + o * m + j] * ut[j];
                    }
                    y.push(acc);
                }
                let mut next = vec![0.0; n];
                for i in 0..n {
                    next[i] = a.data()[k * n + i] * h[i];
                    for j in 0..m {
                        next[i] += b.data()[k * n * m + i * m + j] * ut[j];
                    }
                }
                h = next;
            }
        }
        y
    }

    fn scan_inputs(seqs: usize, len: usize, n: usize, m: usize, p: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |w: usize| Tensor::uniform(&[seqs, len, w], 1.0, &mut rng);
        let u = t(m);
        let a = t(n).map(|v| 0.5 + 0.45 * v);
        vec![u, a, t(n * m), t(p * n), t(p * m)]
    }

    #[test]
    fn scan_matches_naive_recurrence() {
        let (n, m, p) = (3, 2, 4);
        let ins = scan_inputs(2, 6, n, m, p, 11);
        let mut g = Graph::new();
        let v: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let h0 = g.constant(Tensor::zeros(&[2, n]));
        let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], h0, n, p).unwrap();
        let want = naive_scan(&ins[0], &ins[1], &ins[2], &ins[3], &ins[4], n, p);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.flops(), 12 * 2 * (9 + 6 + 12 + 8));
    }

    #[test]
    fn scan_unit_delay_and_frozen_state() {
        let len = 5;
        let u = Tensor::new(vec![1, len, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let full = |v: f64| Tensor::full(&[1, len, 1], v);
        let mut g = Graph::new();
        let uv = g.constant(u);
        let (zero, one) = (g.constant(full(0.0)), g.constant(full(1.0)));
        let h0 = g.constant(Tensor::zeros(&[1, 1]));
        let y = g.selective_scan(uv, zero, one, one, zero, h0, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0, 4.0]);

        // a = 1, B = 0: the state never moves from h0
        let h0 = g.constant(Tensor::full(&[1, 1], 0.7));
        let y = g.selective_scan(uv, one, zero, one, zero, h0, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let (n, m, p) = (2, 3, 2);
        let mut ins = scan_inputs(2, 4, n, m, p, 3);
        ins.push(Tensor::uniform(&[2, n], 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
        let r = crate::gradcheck::grad_check(
            |g, v| {
                let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], n, p)?;
                let y2 = g.square(y)?;
                g.sum(y2)
            },
            &ins,
            &Default::default(),
        )
        .unwrap();
        assert!(r.passed, "{:?}", r.max_rel_error);
    }

    #[test]
    fn step_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, m, p, rows) = (2, 3, 2, 2);
        let mut t = |s: &[usize]| Tensor::uniform(s, 1.0, &mut rng);
        let ins = vec![
            t(&[rows, 3, m]),
            t(&[4, m]),
            t(&[m]),
            t(&[rows, n]),
            t(&[rows, n * m]),
            t(&[rows, p * n]),
            t(&[rows, p * m]),
            t(&[rows, n]),
        ];
        let r = crate::gradcheck::grad_check(
            |g, v| {
                let u = g.conv_step(v[0], v[1], v[2])?;
                let a = g.sigmoid(v[3])?;
                let o = g.ssm_step(u, a, v[4], v[5], v[6], v[7], n, p)?;
                let o = g.slice_last(o, 1, p + n - 1)?;
                let o = g.square(o)?;
                g.sum(o)
            },
            &ins,
            &Default::default(),
        )
        .unwrap();
        assert!(r.passed, "{:?}", r.max_rel_error);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        for kind in BlockKind::ALL {
            let (b, store) = build(kind, 4, 21);
            let xt = rand_input(&[2, 5, 4], 22);
            let r = crate::gradcheck::check_params(
                &store,
                |cx| {
                    let x = cx.g.constant(xt.clone());
                    let y = b.forward(cx, x)?;
                    let w = cx.g.constant(rand_input(&[2, 5, 4], 23));
                    let y = cx.g.mul(y, w)?;
                    cx.g.sum(y)
                },
                &Default::default(),
            )
            .unwrap();
            assert!(r.passed, "{kind:?}: {:?}", r.max_rel_error);
        }
    }

    #[test]
    fn ssm_blocks_are_causal() {
        for kind in [BlockKind::Tamba, BlockKind::Mamba] {
            let (b, store) = build(kind, 6, 30);
            let xt = rand_input(&[1, 10, 6], 31);
            let mut bumped = xt.clone();
            for j in 0..6 {
                let v = bumped.at(&[0, 6, j]);
                bumped.set(&[0, 6, j], v + 3.0);
            }
            let mut cx = Ctx::new(&store, false);
            let (x0, x1) = (cx.g.constant(xt), cx.g.constant(bumped));
            let (y0, y1) = (b.forward(&mut cx, x0).unwrap(), b.forward(&mut cx, x1).unwrap());
            let (y0, y1) = (cx.g.value(y0), cx.g.value(y1));
            assert_eq!(y0.data()[..36], y1.data()[..36], "{kind:?}");
            assert_ne!(y0.data()[36..42], y1.data()[36..42]);
        }
    }

    #[test]
    fn constant_projections_reduce_selective_to_fixed() {
        let (tb, mut ts) = build(BlockKind::Tamba, 6, 40);
        let (mb, ms) = build(BlockKind::Mamba, 6, 41);
        for (name, t) in ms.iter() {
            if let Some(id) = ts.id(name) {
                *ts.get_mut(id) = t.clone();
            }
        }
        let (Mixer::Ssm(tm), Mixer::Ssm(mm)) = (&tb.mixer, &mb.mixer) else { unreachable!() };
        let (SsmMatrices::Selective(sel), SsmMatrices::Fixed(fix)) = (&tm.matrices, &mm.matrices) else {
            unreachable!()
        };
        for (proj, constant) in [(&sel.a, fix.a), (&sel.b, fix.b), (&sel.c, fix.c), (&sel.d, fix.d)] {
            let shape = ts.get(proj.weight).shape().to_vec();
            *ts.get_mut(proj.weight) = Tensor::zeros(&shape);
            let flat = ms.get(constant).data().to_vec();
            *ts.get_mut(proj.bias.unwrap()) = Tensor::from_vec(flat);
        }
        let xt = rand_input(&[2, 7, 6], 42);
        let mut cx = Ctx::new(&ts, false);
        let x = cx.g.constant(xt.clone());
        let yt = b_out(&tb, &mut cx, x);
        let mut cx = Ctx::new(&ms, false);
        let x = cx.g.constant(xt);
        let ym = b_out(&mb, &mut cx, x);
        for (a, b) in yt.data().iter().zip(ym.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn b_out(b: &Block, cx: &mut Ctx, x: Var) -> Tensor {
        let y = b.forward(cx, x).unwrap();
        cx.g.value(y).clone()
    }
}
