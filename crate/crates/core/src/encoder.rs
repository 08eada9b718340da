//! The three decomposed encoders (temporal, scene, traffic) and the shared
//! scene memory consumed by the decoder.

use crate::block::{block_flops, Block, BlockDims};
use crate::config::{BlockKind, ModelConfig};
use crate::embedding::{EncodedScene, TrafficSource};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::Linear;
use crate::params::{Ctx, ParamBuilder};
use crate::tensor::Tensor;

/// Softmax attention of query rows over key rows,
/// `w_ij = softmax_j(q_i · k_j)` without temperature, `out_i = Σ_j w_ij v_j`.
/// Projections are bias-free so an all-zero key set yields zero output.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl CrossAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::no_bias(pb, &format!("{name}.q"), d, d)?,
            k: Linear::no_bias(pb, &format!("{name}.k"), d, d)?,
            v: Linear::no_bias(pb, &format!("{name}.v"), d, d)?,
        })
    }

    /// `queries [Nq, d]`, `keys [Nk, d]` → (`[Nq, d]`, weights `[Nq, Nk]`).
    pub fn forward(&self, cx: &mut Ctx, queries: Var, keys: Var) -> Result<(Var, Var)> {
        let (nq, nk) = (cx.g.shape(queries)[0], cx.g.shape(keys)[0]);
        if nk == 0 {
            return Err(Error::Contract("cross-attention over zero keys".into()));
        }
        let d = self.q.d_out;
        let q = self.q.forward(cx, queries)?;
        let k = self.k.forward(cx, keys)?;
        let v = self.v.forward(cx, keys)?;
        let q = cx.g.reshape(q, &[1, nq, d])?;
        let k = cx.g.reshape(k, &[1, nk, d])?;
        let v = cx.g.reshape(v, &[1, nk, d])?;
        let s = cx.g.bmm(q, k, true)?;
        let w = cx.g.softmax(s)?;
        let o = cx.g.bmm(w, v, false)?;
        let o = cx.g.reshape(o, &[nq, d])?;
        let w = cx.g.reshape(w, &[nq, nk])?;
        Ok((o, w))
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params()
    }

    pub fn flops(d: usize, nq: usize, nk: usize) -> u64 {
        if nk == 0 {
            return 0;
        }
        2 * (nq * d * d + 2 * nk * d * d + 2 * nq * nk * d) as u64
    }
}

#[derive(Clone, Debug)]
pub struct Stack {
    pub blocks: Vec<Block>,
}

impl Stack {
    fn new(pb: &mut ParamBuilder, name: &str, kind: BlockKind, dims: BlockDims, depth: usize) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| Block::new(pb, &format!("{name}.block.{i}"), kind, dims))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// Runs every block over `x [S, L, d]`, re-zeroing masked steps after
    /// each one.
    pub fn forward(&self, cx: &mut Ctx, mut x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let zero = match mask {
            Some(m) if m.iter().any(|&v| !v) => {
                let d = cx.g.value(x).last_dim();
                let data = m
                    .iter()
                    .flat_map(|&v| std::iter::repeat(if v { 1.0 } else { 0.0 }).take(d))
                    .collect();
                Some(cx.g.constant(Tensor::new(cx.g.shape(x).to_vec(), data)?))
            }
            _ => None,
        };
        for b in &self.blocks {
            x = b.forward(cx, x)?;
            if let Some(z) = zero {
                x = cx.g.mul(x, z)?;
            }
        }
        Ok(x)
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(Block::num_params).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub d: usize,
    pub kind: BlockKind,
    pub dims: BlockDims,
    pub temporal: Stack,
    pub scene: Stack,
    pub traffic: Stack,
    pub scene_cross: CrossAttention,
    pub traffic_cross: CrossAttention,
    pub memory_proj: Linear,
}

/// Per-target context shared by every decoding query.
#[derive(Clone, Debug)]
pub struct SceneMemory {
    /// `[n_rows, d]` projected memory.
    pub memory: Var,
    /// Scenario agent index per memory row: vehicles and motorcycles in
    /// scenario order, then pedestrians.
    pub rows: Vec<usize>,
    /// Per-step encoder outputs `[n_rows, L, d]`.
    pub temporal: Var,
    pub z_time: Var,
    pub z_scene: Var,
    pub z_traffic: Var,
    /// Scene weights `[n_rows, n_scene]`.
    pub alpha: Var,
    /// Traffic weights `[n_dyn, n_live_tc]`, absent without live
    /// traffic-control tokens.
    pub beta: Option<Var>,
}

impl SceneMemory {
    pub fn row_of(&self, agent_index: usize) -> Option<usize> {
        self.rows.iter().position(|&r| r == agent_index)
    }
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let dims = BlockDims::from_config(cfg);
        let d = cfg.d;
        Ok(Self {
            d,
            kind: cfg.block,
            dims,
            temporal: Stack::new(pb, "encoder.temporal", cfg.block, dims, cfg.depth)?,
            scene: Stack::new(pb, "encoder.scene", cfg.block, dims, cfg.depth)?,
            traffic: Stack::new(pb, "encoder.traffic", cfg.block, dims, cfg.depth)?,
            scene_cross: CrossAttention::new(pb, "encoder.scene.cross", d)?,
            traffic_cross: CrossAttention::new(pb, "encoder.traffic.cross", d)?,
            memory_proj: Linear::new(pb, "encoder.memory_proj", 3 * d, d)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.temporal.num_params()
            + self.scene.num_params()
            + self.traffic.num_params()
            + self.scene_cross.num_params()
            + self.traffic_cross.num_params()
            + self.memory_proj.num_params()
    }

    /// Per-agent sequence encoding `[n_agents, L, d]`.
    pub fn encode_temporal(&self, cx: &mut Ctx, enc: &EncodedScene) -> Result<Option<Var>> {
        enc.agent_tokens
            .map(|t| self.temporal.forward(cx, t, Some(&enc.agent_mask)))
            .transpose()
    }

    /// Scene stack over pooled polylines, each a length-1 sequence: `[n_scene, d]`.
    pub fn encode_scene(&self, cx: &mut Ctx, enc: &EncodedScene) -> Result<Option<Var>> {
        let Some(t) = enc.scene_tokens else {
            return Ok(None);
        };
        let n = enc.n_scene();
        let x = cx.g.reshape(t, &[n, 1, self.d])?;
        let y = self.scene.forward(cx, x, None)?;
        Ok(Some(cx.g.reshape(y, &[n, self.d])?))
    }

    pub fn encode_traffic(&self, cx: &mut Ctx, enc: &EncodedScene) -> Result<Option<Var>> {
        enc.traffic_tokens
            .map(|t| self.traffic.forward(cx, t, Some(&enc.traffic_mask)))
            .transpose()
    }

    /// Z_scene: each summary attends over the scene elements.
    pub fn encode_scene_cross(&self, cx: &mut Ctx, summary: Var, scene: Var) -> Result<(Var, Var)> {
        self.scene_cross.forward(cx, summary, scene)
    }

    /// Z_traffic: dynamic agents attend over traffic-control summaries;
    /// zeros when there are none.
    pub fn encode_traffic_cross(&self, cx: &mut Ctx, dyn_summary: Var, tc: Option<Var>) -> Result<(Var, Option<Var>)> {
        match tc {
            Some(tc) => {
                let (o, w) = self.traffic_cross.forward(cx, dyn_summary, tc)?;
                Ok((o, Some(w)))
            }
            None => {
                let n = cx.g.shape(dyn_summary)[0];
                Ok((cx.g.constant(Tensor::zeros(&[n, self.d])), None))
            }
        }
    }

    /// Runs all three encoders and fuses them into per-agent memory rows.
    pub fn build_scene_memory(&self, cx: &mut Ctx, enc: &EncodedScene) -> Result<SceneMemory> {
        let d = self.d;
        let steps = enc.steps;
        let temporal = self.encode_temporal(cx, enc)?;
        let scene = self
            .encode_scene(cx, enc)?
            .ok_or_else(|| Error::Contract("scene encoder needs at least one map polyline".into()))?;
        let traffic = self.encode_traffic(cx, enc)?;

        let peds: Vec<(usize, usize)> = enc
            .traffic_rows
            .iter()
            .enumerate()
            .filter_map(|(r, s)| match s {
                TrafficSource::Pedestrian(i) => Some((r, *i)),
                TrafficSource::Light(_) => None,
            })
            .collect();
        let n_dyn = enc.n_agents();
        let mut rows = enc.agent_rows.clone();
        rows.extend(peds.iter().map(|&(_, i)| i));

        // per-step outputs for every memory row
        let mut seqs = Vec::new();
        if let Some(t) = temporal {
            seqs.push(t);
        }
        if !peds.is_empty() {
            let tr = traffic.expect("pedestrians imply traffic tokens");
            let ix: Vec<usize> = peds.iter().map(|&(r, _)| r).collect();
            seqs.push(cx.g.gather_rows(tr, &ix)?);
        }
        if seqs.is_empty() {
            return Err(Error::Contract("scene has no dynamic agents".into()));
        }
        let seq_all = if seqs.len() == 1 { seqs[0] } else { cx.g.concat_rows(&seqs)? };
        let n_rows = rows.len();
        let flat = cx.g.reshape(seq_all, &[n_rows * steps, d])?;
        let last: Vec<usize> = (0..n_rows).map(|r| r * steps + steps - 1).collect();
        let z_time = cx.g.gather_rows(flat, &last)?;

        let (z_scene, alpha) = self.encode_scene_cross(cx, z_time, scene)?;

        // traffic-control summaries: final step of rows still live there
        let live: Vec<usize> = (0..enc.n_traffic())
            .filter(|&r| enc.traffic_mask[r * steps + steps - 1])
            .collect();
        let tc = match (traffic, live.is_empty()) {
            (Some(tr), false) => {
                let f = cx.g.reshape(tr, &[enc.n_traffic() * steps, d])?;
                let ix: Vec<usize> = live.iter().map(|&r| r * steps + steps - 1).collect();
                Some(cx.g.gather_rows(f, &ix)?)
            }
            _ => None,
        };
        let (z_traffic, beta) = if n_dyn > 0 {
            let dyn_summary = cx.g.slice_rows(z_time, 0, n_dyn)?;
            let (zt, beta) = self.encode_traffic_cross(cx, dyn_summary, tc)?;
            if peds.is_empty() {
                (zt, beta)
            } else {
                let z = cx.g.constant(Tensor::zeros(&[peds.len(), d]));
                (cx.g.concat_rows(&[zt, z])?, beta)
            }
        } else {
            (cx.g.constant(Tensor::zeros(&[n_rows, d])), None)
        };

        let cat = cx.g.concat_last(&[z_time, z_scene, z_traffic])?;
        let memory = self.memory_proj.forward(cx, cat)?;
        Ok(SceneMemory {
            memory,
            rows,
            temporal: seq_all,
            z_time,
            z_scene,
            z_traffic,
            alpha,
            beta,
        })
    }

    /// Instrumented FLOPs of [`Encoder::build_scene_memory`].
    pub fn flops(&self, counts: &EncoderCounts) -> u64 {
        let depth = self.temporal.blocks.len() as u64;
        let per = |l: usize| block_flops(self.kind, self.dims, l);
        let d = self.d;
        depth * (counts.n_dyn as u64 * per(counts.steps))
            + depth * (counts.n_scene as u64 * per(1))
            + depth * (counts.n_traffic as u64 * per(counts.steps))
            + CrossAttention::flops(d, counts.n_dyn + counts.n_ped, counts.n_scene)
            + if counts.n_dyn > 0 {
                CrossAttention::flops(d, counts.n_dyn, counts.n_live_traffic)
            } else {
                0
            }
            + 2 * ((counts.n_dyn + counts.n_ped) * 3 * d * d) as u64
    }
}

/// Element counts that determine encoder cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncoderCounts {
    pub steps: usize,
    pub n_dyn: usize,
    pub n_ped: usize,
    pub n_scene: usize,
    pub n_traffic: usize,
    /// Traffic-control rows valid at the final observed step.
    pub n_live_traffic: usize,
}

impl EncoderCounts {
    pub fn of(enc: &EncodedScene) -> Self {
        let steps = enc.steps;
        Self {
            steps,
            n_dyn: enc.n_agents(),
            n_ped: enc
                .traffic_rows
                .iter()
                .filter(|s| matches!(s, TrafficSource::Pedestrian(_)))
                .count(),
            n_scene: enc.n_scene(),
            n_traffic: enc.n_traffic(),
            n_live_traffic: (0..enc.n_traffic())
                .filter(|&r| enc.traffic_mask[r * steps + steps - 1])
                .count(),
        }
    }
}
