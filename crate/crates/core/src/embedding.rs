//! Polyline embedding: per-category embedders, the shared pedestrian /
//! traffic-light embedder with cross-category fusion, and sinusoidal
//! positional encoding.
//!
//! Agent tracks and traffic lights become per-step tokens; static map
//! polylines are embedded per point and pooled into one token each.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Linear, Norm};
use crate::params::{Ctx, ParamBuilder};
use crate::scenario::{Agent, Category, Polyline, Scenario, Signal};
use crate::tensor::Tensor;

/// Per-step agent / traffic-light features:
/// `[x, y, Δx, Δy, cos θ, sin θ, speed, vehicle, motorcycle, pedestrian,
/// traffic_light, red, green]`.
pub const AGENT_RAW: usize = 13;
/// Per-point map features `[x, y]`.
pub const MAP_RAW: usize = 2;

/// Two-layer feedforward: `LN(A₂ · LN(GELU(A₁ x)))`.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub l1: Linear,
    pub n1: Norm,
    pub l2: Linear,
    pub n2: Norm,
}

impl Embedder {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_raw: usize, d: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(pb, &format!("{name}.l1"), d_raw, d)?,
            n1: Norm::new(pb, &format!("{name}.norm1"), d)?,
            l2: Linear::new(pb, &format!("{name}.l2"), d, d)?,
            n2: Norm::new(pb, &format!("{name}.norm2"), d)?,
        })
    }

    pub fn d_raw(&self) -> usize {
        self.l1.d_in
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.g.value(x).last_dim();
        if w != self.d_raw() {
            return Err(Error::Dimension(format!(
                "embedder expects raw width {}, got {w}",
                self.d_raw()
            )));
        }
        let h = self.l1.forward(cx, x)?;
        let h = cx.g.gelu(h)?;
        let h = self.n1.forward(cx, h)?;
        let h = self.l2.forward(cx, h)?;
        self.n2.forward(cx, h)
    }

    pub fn num_params(&self) -> usize {
        self.l1.num_params() + self.n1.num_params() + self.l2.num_params() + self.n2.num_params()
    }

    pub fn flops(&self, tokens: usize) -> u64 {
        self.l1.flops(tokens) + self.l2.flops(tokens)
    }
}

/// `LN(GELU(affine([a ‖ b])))`, 2d → d.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub proj: Linear,
    pub norm: Norm,
}

impl Fusion {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(pb, &format!("{name}.proj"), 2 * d, d)?,
            norm: Norm::new(pb, &format!("{name}.norm"), d)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.proj.num_params() + self.norm.num_params()
    }
}

/// How pedestrians and traffic lights are embedded.
#[derive(Clone, Debug)]
pub enum TrafficEmbedding {
    Joint { shared: Embedder, fusion: Fusion },
    Separate { pedestrian: Embedder, light: Embedder },
}

#[derive(Clone, Debug)]
pub struct EmbedderBank {
    pub d: usize,
    pub max_len: usize,
    pub vehicle: Embedder,
    pub motorcycle: Embedder,
    pub lane: Embedder,
    pub map_edge: Embedder,
    pub sidewalk: Embedder,
    pub traffic_sign: Embedder,
    pub traffic: TrafficEmbedding,
}

impl EmbedderBank {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d;
        let mut e = |cat: &str, raw: usize| Embedder::new(pb, &format!("embed.{cat}"), raw, d);
        let vehicle = e("vehicle", AGENT_RAW)?;
        let motorcycle = e("motorcycle", AGENT_RAW)?;
        let lane = e("lane", MAP_RAW)?;
        let map_edge = e("map_edge", MAP_RAW)?;
        let sidewalk = e("sidewalk", MAP_RAW)?;
        let traffic_sign = e("traffic_sign", MAP_RAW)?;
        let traffic = if cfg.joint {
            TrafficEmbedding::Joint {
                shared: e("joint", AGENT_RAW)?,
                fusion: Fusion::new(pb, "embed.fusion", d)?,
            }
        } else {
            TrafficEmbedding::Separate {
                pedestrian: e("pedestrian", AGENT_RAW)?,
                light: e("traffic_light", AGENT_RAW)?,
            }
        };
        Ok(Self {
            d,
            max_len: cfg.max_len,
            vehicle,
            motorcycle,
            lane,
            map_edge,
            sidewalk,
            traffic_sign,
            traffic,
        })
    }

    /// The embedder a category routes to. Pedestrians and traffic lights
    /// share one in joint mode.
    pub fn route(&self, cat: Category) -> &Embedder {
        match (cat, &self.traffic) {
            (Category::Vehicle, _) => &self.vehicle,
            (Category::Motorcycle, _) => &self.motorcycle,
            (Category::Lane, _) => &self.lane,
            (Category::MapEdge, _) => &self.map_edge,
            (Category::Sidewalk, _) => &self.sidewalk,
            (Category::TrafficSign, _) => &self.traffic_sign,
            (Category::Pedestrian | Category::TrafficLight, TrafficEmbedding::Joint { shared, .. }) => shared,
            (Category::Pedestrian, TrafficEmbedding::Separate { pedestrian, .. }) => pedestrian,
            (Category::TrafficLight, TrafficEmbedding::Separate { light, .. }) => light,
        }
    }

    /// Routes by category name.
    pub fn route_name(&self, name: &str) -> Result<&Embedder> {
        Category::parse(name)
            .map(|c| self.route(c))
            .ok_or_else(|| Error::Routing(format!("no embedder for category '{name}'")))
    }

    pub fn fusion(&self) -> Option<&Fusion> {
        match &self.traffic {
            TrafficEmbedding::Joint { fusion, .. } => Some(fusion),
            TrafficEmbedding::Separate { .. } => None,
        }
    }

    pub fn num_params(&self) -> usize {
        let fixed = [
            &self.vehicle,
            &self.motorcycle,
            &self.lane,
            &self.map_edge,
            &self.sidewalk,
            &self.traffic_sign,
        ]
        .iter()
        .map(|e| e.num_params())
        .sum::<usize>();
        fixed
            + match &self.traffic {
                TrafficEmbedding::Joint { shared, fusion } => shared.num_params() + fusion.num_params(),
                TrafficEmbedding::Separate { pedestrian, light } => {
                    pedestrian.num_params() + light.num_params()
                }
            }
    }
}

/// Sinusoidal table `[len, d]`: even channels `sin(t / 10000^(2i/d))`, odd
/// channels the matching cosine.
pub fn positional_table(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for t in 0..len {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, d], data).expect("table shape")
}

/// Adds the positional table along the second-to-last axis of `x [.., L, d]`.
pub fn positional_encode(cx: &mut Ctx, x: Var, max_len: usize) -> Result<Var> {
    let shape = cx.g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::Dimension(format!("positional_encode needs [.., L, d], got {shape:?}")));
    }
    let (len, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if len > max_len {
        return Err(Error::Config(format!(
            "sequence length {len} exceeds positional table length {max_len}"
        )));
    }
    let table = positional_table(len, d);
    let reps = cx.g.value(x).len() / (len * d).max(1);
    let mut data = Vec::with_capacity(reps * len * d);
    for _ in 0..reps {
        data.extend_from_slice(table.data());
    }
    let pe = cx.g.constant(Tensor::new(shape, data)?);
    cx.g.add(x, pe)
}

/// Raw per-step features of an agent track plus its validity mask.
pub fn agent_features(agent: &Agent, steps: usize) -> (Vec<f64>, Vec<bool>) {
    let mut raw = vec![0.0; steps * AGENT_RAW];
    let mut mask = vec![false; steps];
    for (t, s) in agent.states.iter().enumerate().take(steps) {
        if !s.valid {
            continue;
        }
        mask[t] = true;
        let (dx, dy) = match t.checked_sub(1).map(|p| &agent.states[p]) {
            Some(prev) if prev.valid => (s.position[0] - prev.position[0], s.position[1] - prev.position[1]),
            _ => (0.0, 0.0),
        };
        let r = &mut raw[t * AGENT_RAW..(t + 1) * AGENT_RAW];
        r[..7].copy_from_slice(&[
            s.position[0],
            s.position[1],
            dx,
            dy,
            s.heading.cos(),
            s.heading.sin(),
            s.speed(),
        ]);
        let hot = match agent.category {
            Category::Vehicle => 7,
            Category::Motorcycle => 8,
            _ => 9,
        };
        r[hot] = 1.0;
    }
    (raw, mask)
}

/// Raw per-step features of a traffic light; always valid.
pub fn light_features(light: &Polyline, steps: usize) -> Vec<f64> {
    let p = &light.points[0];
    let mut raw = vec![0.0; steps * AGENT_RAW];
    for t in 0..steps {
        let r = &mut raw[t * AGENT_RAW..(t + 1) * AGENT_RAW];
        r[0] = p[0];
        r[1] = p[1];
        r[10] = 1.0;
        match light.signal_at(t) {
            Signal::Red => r[11] = 1.0,
            Signal::Green => r[12] = 1.0,
            Signal::Unknown => {}
        }
    }
    raw
}

/// What a traffic-stream row was built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrafficSource {
    /// Index into `Scenario::agents`.
    Pedestrian(usize),
    /// Index into `Scenario::map`.
    Light(usize),
}

#[derive(Clone, Debug)]
pub struct EncodedScene {
    pub steps: usize,
    /// `[n_agents, L, d]` for vehicles and motorcycles.
    pub agent_tokens: Option<Var>,
    /// Scenario agent index per agent row.
    pub agent_rows: Vec<usize>,
    /// Row-major `[n_agents, L]`.
    pub agent_mask: Vec<bool>,
    /// `[n_scene, d]`, one per static polyline.
    pub scene_tokens: Option<Var>,
    /// Map index per scene row.
    pub scene_rows: Vec<usize>,
    /// `[n_tc, L, d]`: pedestrians first, then traffic lights.
    pub traffic_tokens: Option<Var>,
    pub traffic_rows: Vec<TrafficSource>,
    pub traffic_mask: Vec<bool>,
}

impl EncodedScene {
    pub fn n_agents(&self) -> usize {
        self.agent_rows.len()
    }

    pub fn n_scene(&self) -> usize {
        self.scene_rows.len()
    }

    pub fn n_traffic(&self) -> usize {
        self.traffic_rows.len()
    }
}

/// Embeds `raw [n, L, d_raw]` with the category's embedder.
pub fn embed_category(cx: &mut Ctx, bank: &EmbedderBank, raw: Var, cat: Category) -> Result<Var> {
    bank.route(cat).forward(cx, raw)
}

/// Cross-category fusion of two aligned token sets of width d.
pub fn fuse_joint(cx: &mut Ctx, fusion: &Fusion, ped: Var, tl: Var) -> Result<Var> {
    let (a, b) = (cx.g.shape(ped).to_vec(), cx.g.shape(tl).to_vec());
    if a != b || a.last() != Some(&fusion.proj.d_out) {
        return Err(Error::Dimension(format!("fusion inputs {a:?} and {b:?}")));
    }
    let cat = cx.g.concat_last(&[ped, tl])?;
    let h = fusion.proj.forward(cx, cat)?;
    let h = cx.g.gelu(h)?;
    fusion.norm.forward(cx, h)
}

fn mask_tensor(mask: &[bool], d: usize) -> Tensor {
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat(if m { 1.0 } else { 0.0 }).take(d))
        .collect();
    Tensor::new(vec![mask.len(), d], data).expect("mask shape")
}

/// Embeds one category's tracks `[n, L, AGENT_RAW]`, adds positions and
/// zeroes masked steps.
fn embed_tracks(
    cx: &mut Ctx,
    bank: &EmbedderBank,
    cat: Category,
    raw: Vec<f64>,
    mask: &[bool],
    steps: usize,
) -> Result<Var> {
    let n = mask.len() / steps;
    let x = cx.g.constant(Tensor::new(vec![n, steps, AGENT_RAW], raw)?);
    let e = embed_category(cx, bank, x, cat)?;
    let e = positional_encode(cx, e, bank.max_len)?;
    apply_mask(cx, e, mask, bank.d)
}

fn apply_mask(cx: &mut Ctx, x: Var, mask: &[bool], d: usize) -> Result<Var> {
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let shape = cx.g.shape(x).to_vec();
    let m = cx.g.constant(mask_tensor(mask, d).reshape(&shape)?);
    cx.g.mul(x, m)
}

/// Stacks per-category results back into the original element order.
fn reassemble(cx: &mut Ctx, parts: Vec<(Vec<usize>, Var)>) -> Result<Option<(Var, Vec<usize>)>> {
    if parts.is_empty() {
        return Ok(None);
    }
    let mut order: Vec<usize> = parts.iter().flat_map(|(ix, _)| ix.iter().copied()).collect();
    let vars: Vec<Var> = parts.iter().map(|(_, v)| *v).collect();
    let stacked = if vars.len() == 1 { vars[0] } else { cx.g.concat_rows(&vars)? };
    let mut perm: Vec<usize> = (0..order.len()).collect();
    perm.sort_by_key(|&i| order[i]);
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return Ok(Some((stacked, order)));
    }
    let out = cx.g.gather_rows(stacked, &perm)?;
    order.sort_unstable();
    Ok(Some((out, order)))
}

/// Per-step masked mean of `tokens [n, L, d]` broadcast to `rows` track
/// rows: output `[rows, L, d]`.
fn step_mean(cx: &mut Ctx, tokens: Option<Var>, mask: &[bool], steps: usize, rows: usize, d: usize) -> Result<Var> {
    let Some(tok) = tokens else {
        return Ok(cx.g.constant(Tensor::zeros(&[rows, steps, d])));
    };
    let n = mask.len() / steps;
    let mut per_step = Vec::with_capacity(steps);
    for t in 0..steps {
        let live: Vec<usize> = (0..n).filter(|&i| mask[i * steps + t]).collect();
        let w = 1.0 / live.len().max(1) as f64;
        per_step.push(live.into_iter().map(|i| (i * steps + t, w)).collect::<Vec<_>>());
    }
    let groups: Vec<Vec<(usize, f64)>> = (0..rows).flat_map(|_| per_step.iter().cloned()).collect();
    let flat = cx.g.reshape(tok, &[n * steps, d])?;
    let pooled = cx.g.pool_rows(flat, &groups)?;
    cx.g.reshape(pooled, &[rows, steps, d])
}

/// Embeds every element of an (agent-frame) scenario.
pub fn encode_inputs(cx: &mut Ctx, bank: &EmbedderBank, scenario: &Scenario) -> Result<EncodedScene> {
    let steps = scenario.horizon.observed;
    let d = bank.d;

    // vehicles and motorcycles
    let mut agent_parts = Vec::new();
    let mut agent_mask_by_index = vec![Vec::new(); scenario.agents.len()];
    for cat in [Category::Vehicle, Category::Motorcycle] {
        let idx: Vec<usize> = (0..scenario.agents.len())
            .filter(|&i| scenario.agents[i].category == cat)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let (mut raw, mut mask) = (Vec::new(), Vec::new());
        for &i in &idx {
            let (r, m) = agent_features(&scenario.agents[i], steps);
            raw.extend(r);
            agent_mask_by_index[i] = m.clone();
            mask.extend(m);
        }
        let tok = embed_tracks(cx, bank, cat, raw, &mask, steps)?;
        agent_parts.push((idx, tok));
    }
    let (agent_tokens, agent_rows) = match reassemble(cx, agent_parts)? {
        Some((v, rows)) => (Some(v), rows),
        None => (None, Vec::new()),
    };
    let agent_mask = agent_rows
        .iter()
        .flat_map(|&i| agent_mask_by_index[i].iter().copied())
        .collect();

    // static polylines, pooled over points
    let mut scene_parts = Vec::new();
    for cat in Category::ALL.into_iter().filter(|c| c.is_static_scene()) {
        let idx: Vec<usize> = (0..scenario.map.len())
            .filter(|&i| scenario.map[i].category == cat)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let (mut raw, mut pe, mut groups) = (Vec::new(), Vec::new(), Vec::new());
        let mut offset = 0;
        for &i in &idx {
            let pts = &scenario.map[i].points;
            if pts.len() > bank.max_len {
                return Err(Error::Config(format!(
                    "polyline '{}' has {} points, positional table holds {}",
                    scenario.map[i].id,
                    pts.len(),
                    bank.max_len
                )));
            }
            let table = positional_table(pts.len(), d);
            pe.extend_from_slice(table.data());
            for p in pts {
                raw.extend_from_slice(&p[..MAP_RAW]);
            }
            let w = 1.0 / pts.len() as f64;
            groups.push((offset..offset + pts.len()).map(|r| (r, w)).collect::<Vec<_>>());
            offset += pts.len();
        }
        let x = cx.g.constant(Tensor::new(vec![offset, MAP_RAW], raw)?);
        let e = embed_category(cx, bank, x, cat)?;
        let pe = cx.g.constant(Tensor::new(vec![offset, d], pe)?);
        let e = cx.g.add(e, pe)?;
        let pooled = cx.g.pool_rows(e, &groups)?;
        scene_parts.push((idx, pooled));
    }
    let (scene_tokens, scene_rows) = match reassemble(cx, scene_parts)? {
        Some((v, rows)) => (Some(v), rows),
        None => (None, Vec::new()),
    };

    // pedestrians then traffic lights
    let peds: Vec<usize> = (0..scenario.agents.len())
        .filter(|&i| scenario.agents[i].category == Category::Pedestrian)
        .collect();
    let lights: Vec<usize> = (0..scenario.map.len())
        .filter(|&i| scenario.map[i].category == Category::TrafficLight)
        .collect();
    let mut ped_mask = Vec::new();
    let ped_tok = if peds.is_empty() {
        None
    } else {
        let mut raw = Vec::new();
        for &i in &peds {
            let (r, m) = agent_features(&scenario.agents[i], steps);
            raw.extend(r);
            ped_mask.extend(m);
        }
        Some(embed_tracks(cx, bank, Category::Pedestrian, raw, &ped_mask, steps)?)
    };
    let light_mask = vec![true; lights.len() * steps];
    let light_tok = if lights.is_empty() {
        None
    } else {
        let raw = lights
            .iter()
            .flat_map(|&i| light_features(&scenario.map[i], steps))
            .collect();
        Some(embed_tracks(cx, bank, Category::TrafficLight, raw, &light_mask, steps)?)
    };
    let (ped_tok, light_tok) = match bank.fusion() {
        Some(fusion) => {
            let fused_ped = match ped_tok {
                Some(p) => {
                    let other = step_mean(cx, light_tok, &light_mask, steps, peds.len(), d)?;
                    let f = fuse_joint(cx, fusion, p, other)?;
                    Some(apply_mask(cx, f, &ped_mask, d)?)
                }
                None => None,
            };
            let fused_light = match light_tok {
                Some(l) => {
                    let other = step_mean(cx, ped_tok, &ped_mask, steps, lights.len(), d)?;
                    Some(fuse_joint(cx, fusion, l, other)?)
                }
                None => None,
            };
            (fused_ped, fused_light)
        }
        None => (ped_tok, light_tok),
    };
    let traffic_tokens = match (ped_tok, light_tok) {
        (Some(p), Some(l)) => Some(cx.g.concat_rows(&[p, l])?),
        (p, l) => p.or(l),
    };
    let traffic_rows = peds
        .iter()
        .map(|&i| TrafficSource::Pedestrian(i))
        .chain(lights.iter().map(|&i| TrafficSource::Light(i)))
        .collect();
    let mut traffic_mask = ped_mask;
    traffic_mask.extend(light_mask);

    Ok(EncodedScene {
        steps,
        agent_tokens,
        agent_rows,
        agent_mask,
        scene_tokens,
        scene_rows,
        traffic_tokens,
        traffic_rows,
        traffic_mask,
    })
}

/// Instrumented FLOPs of [`encode_inputs`] for the given element counts.
pub fn embedding_flops(
    d: usize,
    joint: bool,
    track_steps: usize,
    n_agents: usize,
    map_points: usize,
    n_traffic: usize,
) -> u64 {
    let agent = |tokens: usize| 2 * (tokens * (AGENT_RAW * d + d * d)) as u64;
    let map = 2 * (map_points * (MAP_RAW * d + d * d)) as u64;
    let traffic = agent(n_traffic * track_steps)
        + if joint {
            2 * (n_traffic * track_steps * 2 * d * d) as u64
        } else {
            0
        };
    agent(n_agents * track_steps) + map + traffic
}
