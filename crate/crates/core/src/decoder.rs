//! Query-based recursive decoding, proposal scoring and refinement.
//!
//! `K` learned queries, offset by the target's memory row, step through the
//! future one chunk at a time. At each step a query attends over the scene
//! memory, the target's per-step encoder outputs and its own previous state,
//! then advances a selective block in step mode; a head emits waypoint
//! deltas. A gated recurrent scorer turns each (stopped) proposal into a
//! confidence, and a refinement pass over the stopped proposals emits the
//! Laplace mixture parameters.

use crate::block::{block_flops, Block, BlockDims, BlockState};
use crate::config::{BlockKind, ModelConfig};
use crate::embedding::positional_table;
use crate::encoder::{CrossAttention, SceneMemory};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Linear, Norm};
use crate::params::{Ctx, ParamBuilder, ParamId};
use crate::tensor::Tensor;
use serde::Serialize;

#[derive(Clone, Debug)]
pub struct Decoder {
    pub d: usize,
    pub modes: usize,
    pub future: usize,
    pub chunk: usize,
    pub max_len: usize,
    pub dims: BlockDims,
    pub queries: ParamId,
    pub attn: CrossAttention,
    pub norm: Norm,
    pub block: Block,
    pub head: Linear,
}

/// Gated recurrent scorer.
#[derive(Clone, Debug)]
pub struct Scorer {
    pub hidden: usize,
    pub embed: Linear,
    pub cross: CrossAttention,
    /// Input-to-gates `d → 3h` (update, reset, candidate).
    pub wx: Linear,
    /// Hidden-to-gates `h → 3h`.
    pub wh: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct Refiner {
    pub embed: Linear,
    pub cross: CrossAttention,
    pub block: Block,
    /// `d → 4`: location offset and raw scale per coordinate.
    pub head: Linear,
    pub b_min: f64,
}

/// Graph handles for one target's decoded outputs (agent frame).
#[derive(Clone, Copy, Debug)]
pub struct TargetOutput {
    /// `[K, T', 2]`.
    pub proposals: Var,
    /// `[K]` raw confidences.
    pub scores: Var,
    /// `[K]` mixing coefficients.
    pub pi: Var,
    /// `[K]` log mixing coefficients.
    pub log_pi: Var,
    pub mu: Var,
    pub b: Var,
}

fn memory_row(cx: &mut Ctx, mem: &SceneMemory, row: usize, d: usize) -> Result<Var> {
    let r = cx.g.slice_rows(mem.memory, row, 1)?;
    cx.g.reshape(r, &[d])
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d;
        let dims = BlockDims::from_config(cfg);
        Ok(Self {
            d,
            modes: cfg.modes,
            future: cfg.future,
            chunk: cfg.chunk,
            max_len: cfg.max_len,
            dims,
            queries: pb.uniform("decoder.queries", &[cfg.modes, d], 1.0)?,
            attn: CrossAttention::new(pb, "decoder.attn", d)?,
            norm: Norm::new(pb, "decoder.norm", d)?,
            block: Block::new(pb, "decoder.block", BlockKind::Tamba, dims)?,
            head: Linear::new(pb, "decoder.head", d, 2 * cfg.chunk)?,
        })
    }

    pub fn steps(&self) -> usize {
        self.future / self.chunk
    }

    pub fn num_params(&self) -> usize {
        self.modes * self.d
            + self.attn.num_params()
            + self.norm.num_params()
            + self.block.num_params()
            + self.head.num_params()
    }

    /// Proposals `[K, T', 2]` for memory row `row`, accumulated from the
    /// origin of the target frame.
    pub fn decode_proposals(&self, cx: &mut Ctx, mem: &SceneMemory, row: usize) -> Result<Var> {
        self.decode_with(cx, mem, row, |_, _| Ok(None))
    }

    /// As [`Decoder::decode_proposals`], with `memory_at(r)` optionally
    /// substituting the memory rows attended at step `r`.
    pub fn decode_with<F>(&self, cx: &mut Ctx, mem: &SceneMemory, row: usize, memory_at: F) -> Result<Var>
    where
        F: Fn(&mut Ctx, usize) -> Result<Option<Var>>,
    {
        let (d, k) = (self.d, self.modes);
        if row >= mem.rows.len() {
            return Err(Error::Lookup(format!("memory row {row} out of {}", mem.rows.len())));
        }
        let steps = self.steps();
        if steps > self.max_len {
            return Err(Error::Config(format!(
                "{steps} decoding steps exceed positional table length {}",
                self.max_len
            )));
        }
        let target_seq = cx.g.slice_rows(mem.temporal, row, 1)?;
        let l = cx.g.shape(target_seq)[1];
        let target_seq = cx.g.reshape(target_seq, &[l, d])?;
        let shared = |cx: &mut Ctx, memory: Var| -> Result<(Var, Var, usize)> {
            let kv = cx.g.concat_rows(&[memory, target_seq])?;
            let n = cx.g.shape(kv)[0];
            let keys = self.attn.k.forward(cx, kv)?;
            let vals = self.attn.v.forward(cx, kv)?;
            Ok((cx.g.reshape(keys, &[1, n, d])?, cx.g.reshape(vals, &[1, n, d])?, n))
        };
        let base = shared(cx, mem.memory)?;

        let target = memory_row(cx, mem, row, d)?;
        let q = cx.p(self.queries);
        let mut s = cx.g.add_row(q, target)?;
        let mut state: BlockState = self.block.init_state(cx, k, None)?;
        let table = positional_table(steps, d);
        let mut last: Option<Var> = None;
        let mut points = Vec::with_capacity(self.future);
        for r in 0..steps {
            let (keys, vals, n) = match memory_at(cx, r)? {
                Some(m) => shared(cx, m)?,
                None => base,
            };
            let pe_row = Tensor::new(vec![d], table.data()[r * d..(r + 1) * d].to_vec())?;
            let pe = cx.g.constant(pe_row);
            let qin = cx.g.add_row(s, pe)?;

            let qp = self.attn.q.forward(cx, qin)?;
            let k_self = self.attn.k.forward(cx, s)?;
            let v_self = self.attn.v.forward(cx, s)?;
            let q3 = cx.g.reshape(qp, &[1, k, d])?;
            let sc_shared = cx.g.bmm(q3, keys, true)?;
            let sc_shared = cx.g.reshape(sc_shared, &[k, n])?;
            let sc_self = cx.g.batched_matvec(qp, k_self, 1, d)?;
            let scores = cx.g.concat_last(&[sc_shared, sc_self])?;
            let w = cx.g.softmax(scores)?;
            let w_shared = cx.g.slice_last(w, 0, n)?;
            let w_self = cx.g.slice_last(w, n, 1)?;
            let w3 = cx.g.reshape(w_shared, &[1, k, n])?;
            let mixed = cx.g.bmm(w3, vals, false)?;
            let mixed = cx.g.reshape(mixed, &[k, d])?;
            let own = cx.g.batched_matvec(v_self, w_self, d, 1)?;
            let attended = cx.g.add(mixed, own)?;
            let x = cx.g.add(qin, attended)?;
            let x = self.norm.forward(cx, x)?;

            let y = self.block.step(cx, x, &mut state)?;
            let delta = self.head.forward(cx, y)?;
            for j in 0..self.chunk {
                let dj = cx.g.slice_last(delta, 2 * j, 2)?;
                let p = match last {
                    Some(prev) => cx.g.add(prev, dj)?,
                    None => dj,
                };
                points.push(p);
                last = Some(p);
            }
            s = y;
        }
        let flat = cx.g.concat_last(&points)?;
        cx.g.reshape(flat, &[k, self.future, 2])
    }

    /// Instrumented FLOPs of one [`Decoder::decode_proposals`] call with
    /// `n_mem` memory rows and `track_steps` observed steps.
    pub fn flops(&self, n_mem: usize, track_steps: usize) -> u64 {
        let (d, k) = (self.d, self.modes);
        let n = n_mem + track_steps;
        let per_step = 2 * (3 * k * d * d) as u64
            + 2 * (k * n * d) as u64
            + 2 * (k * d) as u64
            + 2 * (k * n * d) as u64
            + 2 * (k * d) as u64
            + k as u64 * block_flops(BlockKind::Tamba, self.dims, 1)
            + 2 * (k * d * 2 * self.chunk) as u64;
        2 * (2 * n * d * d) as u64 + self.steps() as u64 * per_step
    }
}

impl Scorer {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let (d, h) = (cfg.d, cfg.scorer_hidden);
        Ok(Self {
            hidden: h,
            embed: Linear::new(pb, "scorer.embed", 2, d)?,
            cross: CrossAttention::new(pb, "scorer.cross", d)?,
            wx: Linear::new(pb, "scorer.gru.wx", d, 3 * h)?,
            wh: Linear::no_bias(pb, "scorer.gru.wh", h, 3 * h)?,
            out: Linear::new(pb, "scorer.out", h, 1)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.embed.num_params()
            + self.cross.num_params()
            + self.wx.num_params()
            + self.wh.num_params()
            + self.out.num_params()
    }

    /// Raw confidences `[K]` for proposals `[K, T', 2]`.
    pub fn score(&self, cx: &mut Ctx, mem: &SceneMemory, row: usize, proposals: Var) -> Result<Var> {
        let shape = cx.g.shape(proposals).to_vec();
        let (k, t) = (shape[0], shape[1]);
        let d = self.embed.d_out;
        let h_dim = self.hidden;
        let target = memory_row(cx, mem, row, d)?;
        let tok = self.embed.forward(cx, proposals)?;
        let tok = cx.g.add_row(tok, target)?;
        let flat = cx.g.reshape(tok, &[k * t, d])?;
        let (ctx_feat, _) = self.cross.forward(cx, flat, mem.memory)?;
        let feat = cx.g.add(flat, ctx_feat)?;
        let gates_x = self.wx.forward(cx, feat)?;
        let mut h = cx.g.constant(Tensor::zeros(&[k, h_dim]));
        for step in 0..t {
            let ix: Vec<usize> = (0..k).map(|m| m * t + step).collect();
            let gx = cx.g.gather_rows(gates_x, &ix)?;
            let gh = self.wh.forward(cx, h)?;
            let zx = cx.g.slice_last(gx, 0, h_dim)?;
            let zh = cx.g.slice_last(gh, 0, h_dim)?;
            let z = cx.g.add(zx, zh)?;
            let z = cx.g.sigmoid(z)?;
            let rx = cx.g.slice_last(gx, h_dim, h_dim)?;
            let rh = cx.g.slice_last(gh, h_dim, h_dim)?;
            let r = cx.g.add(rx, rh)?;
            let r = cx.g.sigmoid(r)?;
            let nx = cx.g.slice_last(gx, 2 * h_dim, h_dim)?;
            let nh = cx.g.slice_last(gh, 2 * h_dim, h_dim)?;
            let rn = cx.g.mul(r, nh)?;
            let cand = cx.g.add(nx, rn)?;
            let cand = cx.g.tanh(cand)?;
            // h = n + z ⊙ (h - n)
            let diff = cx.g.sub(h, cand)?;
            let zd = cx.g.mul(z, diff)?;
            h = cx.g.add(cand, zd)?;
        }
        let act = cx.g.gelu(h)?;
        let c = self.out.forward(cx, act)?;
        cx.g.reshape(c, &[k])
    }

    pub fn flops(&self, modes: usize, future: usize, n_mem: usize) -> u64 {
        let d = self.embed.d_out;
        let h = self.hidden;
        let tokens = modes * future;
        2 * (tokens * 2 * d) as u64
            + CrossAttention::flops(d, tokens, n_mem)
            + 2 * (tokens * d * 3 * h) as u64
            + 2 * (tokens * h * 3 * h) as u64
            + 2 * (modes * h) as u64
    }
}

impl Refiner {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            embed: Linear::new(pb, "refine.embed", 2, d)?,
            cross: CrossAttention::new(pb, "refine.cross", d)?,
            block: Block::new(pb, "refine.block", BlockKind::Tamba, BlockDims::from_config(cfg))?,
            head: Linear::zeroed(pb, "refine.head", d, 4)?,
            b_min: cfg.b_min,
        })
    }

    pub fn num_params(&self) -> usize {
        self.embed.num_params() + self.cross.num_params() + self.block.num_params() + self.head.num_params()
    }

    /// `(μ, b)`, both `[K, T', 2]`, from stopped proposals.
    pub fn refine(&self, cx: &mut Ctx, mem: &SceneMemory, row: usize, stopped: Var, max_len: usize) -> Result<(Var, Var)> {
        let shape = cx.g.shape(stopped).to_vec();
        let (k, t) = (shape[0], shape[1]);
        let d = self.embed.d_out;
        let target = memory_row(cx, mem, row, d)?;
        let tok = self.embed.forward(cx, stopped)?;
        let tok = cx.g.add_row(tok, target)?;
        let tok = crate::embedding::positional_encode(cx, tok, max_len)?;
        let flat = cx.g.reshape(tok, &[k * t, d])?;
        let (ctx_feat, _) = self.cross.forward(cx, flat, mem.memory)?;
        let x = cx.g.add(flat, ctx_feat)?;
        let x = cx.g.reshape(x, &[k, t, d])?;
        let y = self.block.forward(cx, x)?;
        let out = self.head.forward(cx, y)?;
        let dmu = cx.g.slice_last(out, 0, 2)?;
        let raw = cx.g.slice_last(out, 2, 2)?;
        let mu = cx.g.add(stopped, dmu)?;
        let b = cx.g.softplus(raw)?;
        let b = cx.g.affine_scalar(b, 1.0, self.b_min)?;
        Ok((mu, b))
    }

    pub fn flops(&self, modes: usize, future: usize, n_mem: usize) -> u64 {
        let d = self.embed.d_out;
        let tokens = modes * future;
        2 * (tokens * 2 * d) as u64
            + CrossAttention::flops(d, tokens, n_mem)
            + modes as u64 * block_flops(BlockKind::Tamba, self.block.dims, future)
            + 2 * (tokens * d * 4) as u64
    }
}

/// Runs decode → score → refine for one memory row.
pub fn decode_target(
    cx: &mut Ctx,
    decoder: &Decoder,
    scorer: &Scorer,
    refiner: &Refiner,
    mem: &SceneMemory,
    row: usize,
) -> Result<TargetOutput> {
    let proposals = decoder.decode_proposals(cx, mem, row)?;
    let stopped = cx.g.stop_gradient(proposals)?;
    let scores = scorer.score(cx, mem, row, stopped)?;
    let pi = cx.g.softmax(scores)?;
    let lse = cx.g.logsumexp_last(scores)?;
    let k = cx.g.shape(scores)[0];
    let lse = cx.g.broadcast_rows(lse, k)?;
    let log_pi = cx.g.sub(scores, lse)?;
    let (mu, b) = refiner.refine(cx, mem, row, stopped, decoder.max_len)?;
    Ok(TargetOutput {
        proposals,
        scores,
        pi,
        log_pi,
        mu,
        b,
    })
}

/// Plain-value predictions for one target.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionSet {
    pub target_id: String,
    pub modes: usize,
    pub steps: usize,
    /// `K × T'` waypoints, mode-major.
    pub proposals: Vec<[f64; 2]>,
    pub mu: Vec<[f64; 2]>,
    /// Per-coordinate Laplace scales (longitudinal, lateral in the target frame).
    pub b: Vec<[f64; 2]>,
    pub pi: Vec<f64>,
    pub scores: Vec<f64>,
}

fn pairs(t: &Tensor) -> Vec<[f64; 2]> {
    t.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

impl PredictionSet {
    pub fn from_output(cx: &Ctx, target_id: &str, out: &TargetOutput) -> Self {
        let shape = cx.g.shape(out.proposals);
        Self {
            target_id: target_id.to_string(),
            modes: shape[0],
            steps: shape[1],
            proposals: pairs(cx.g.value(out.proposals)),
            mu: pairs(cx.g.value(out.mu)),
            b: pairs(cx.g.value(out.b)),
            pi: cx.g.value(out.pi).data().to_vec(),
            scores: cx.g.value(out.scores).data().to_vec(),
        }
    }

    /// Trajectory of mode `k` (refined locations).
    pub fn mode(&self, k: usize) -> &[[f64; 2]] {
        &self.mu[k * self.steps..(k + 1) * self.steps]
    }

    pub fn proposal(&self, k: usize) -> &[[f64; 2]] {
        &self.proposals[k * self.steps..(k + 1) * self.steps]
    }

    /// Maps locations from the target frame back to the world.
    pub fn to_world(mut self, tf: &crate::scenario::FrameTransform) -> Self {
        for p in self.mu.iter_mut().chain(self.proposals.iter_mut()) {
            *p = tf.invert_point(*p);
        }
        self
    }

    pub fn check(&self) -> Result<()> {
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.pi.iter().any(|&p| p < 0.0) {
            return Err(Error::Numeric(format!("mixing weights sum to {total}")));
        }
        if self.b.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::Numeric("non-positive scale".into()));
        }
        let finite = self
            .mu
            .iter()
            .chain(&self.proposals)
            .flatten()
            .chain(&self.scores)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite prediction".into()));
        }
        Ok(())
    }

    /// CSV with columns `mode,step,x,y,scale_x,scale_y,pi`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,step,x,y,scale_x,scale_y,pi\n");
        for k in 0..self.modes {
            for t in 0..self.steps {
                let i = k * self.steps + t;
                s.push_str(&format!(
                    "{k},{t},{:?},{:?},{:?},{:?},{:?}\n",
                    self.mu[i][0], self.mu[i][1], self.b[i][0], self.b[i][1], self.pi[k]
                ));
            }
        }
        s
    }

    /// Parses [`PredictionSet::to_csv`] output back into `(μ, b, π)`.
    pub fn from_csv(target_id: &str, text: &str) -> Result<Self> {
        let bad = |m: String| Error::Parse {
            context: target_id.to_string(),
            message: m,
        };
        let mut lines = text.lines();
        if lines.next() != Some("mode,step,x,y,scale_x,scale_y,pi") {
            return Err(bad("missing header".into()));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("line {}: expected 7 fields", n + 2)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", n + 2)));
            let k: usize = f[0].parse().map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
            let t: usize = f[1].parse().map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
            rows.push((k, t, [num(f[2])?, num(f[3])?], [num(f[4])?, num(f[5])?], num(f[6])?));
        }
        let modes = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let steps = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if modes * steps != rows.len() {
            return Err(bad("ragged prediction table".into()));
        }
        let mut mu = vec![[0.0; 2]; rows.len()];
        let mut b = vec![[0.0; 2]; rows.len()];
        let mut pi = vec![0.0; modes];
        for (k, t, m, s, p) in rows {
            mu[k * steps + t] = m;
            b[k * steps + t] = s;
            pi[k] = p;
        }
        Ok(Self {
            target_id: target_id.to_string(),
            modes,
            steps,
            proposals: mu.clone(),
            mu,
            b,
            pi,
            scores: Vec::new(),
        })
    }

    /// JSON summary: target, scores and mixing weights.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "target": self.target_id,
            "scores": self.scores,
            "pi": self.pi,
        })
    }
}
