//! Traffic scenes: agents with observed state histories, map polylines, and
//! the JSON file format used to store them.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Vehicle,
    Motorcycle,
    Pedestrian,
    TrafficLight,
    Lane,
    MapEdge,
    Sidewalk,
    TrafficSign,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Vehicle,
        Category::Motorcycle,
        Category::Pedestrian,
        Category::TrafficLight,
        Category::Lane,
        Category::MapEdge,
        Category::Sidewalk,
        Category::TrafficSign,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Vehicle => "vehicle",
            Category::Motorcycle => "motorcycle",
            Category::Pedestrian => "pedestrian",
            Category::TrafficLight => "traffic_light",
            Category::Lane => "lane",
            Category::MapEdge => "map_edge",
            Category::Sidewalk => "sidewalk",
            Category::TrafficSign => "traffic_sign",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// Agents that move: vehicles, motorcycles and pedestrians.
    pub fn is_dynamic(self) -> bool {
        matches!(
            self,
            Category::Vehicle | Category::Motorcycle | Category::Pedestrian
        )
    }

    /// Elements that exert traffic control: pedestrians and traffic lights.
    pub fn is_traffic_control(self) -> bool {
        matches!(self, Category::Pedestrian | Category::TrafficLight)
    }

    /// Static scene elements (everything neither dynamic nor traffic control).
    pub fn is_static_scene(self) -> bool {
        !self.is_dynamic() && !self.is_traffic_control()
    }
}

/// Per-step traffic light state, stored as a numeric point attribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    Unknown = 0,
    Red = 1,
    Green = 2,
}

impl Signal {
    pub fn from_code(v: f64) -> Option<Self> {
        match v {
            x if x == 0.0 => Some(Signal::Unknown),
            x if x == 1.0 => Some(Signal::Red),
            x if x == 2.0 => Some(Signal::Green),
            _ => None,
        }
    }

    pub fn code(self) -> f64 {
        self as i32 as f64
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_heading(h: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = h - two_pi * ((h + PI) / two_pi).floor();
    if r >= PI {
        r -= two_pi;
    }
    if r < -PI {
        r += two_pi;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub position: [f64; 2],
    pub heading: f64,
    pub timestep: usize,
    pub velocity: [f64; 2],
    pub valid: bool,
}

impl AgentState {
    pub fn invalid(timestep: usize) -> Self {
        Self {
            position: [0.0; 2],
            heading: 0.0,
            timestep,
            velocity: [0.0; 2],
            valid: false,
        }
    }

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub id: String,
    pub category: Category,
    pub states: Vec<AgentState>,
}

impl Agent {
    pub fn last(&self) -> &AgentState {
        self.states.last().expect("agents have at least one state")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub id: String,
    pub category: Category,
    /// Each point is `[x, y, attrs...]`; all points share one width.
    pub points: Vec<Vec<f64>>,
}

impl Polyline {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    /// Signal at observed step `t` for a traffic light (unknown when absent).
    pub fn signal_at(&self, t: usize) -> Signal {
        self.points
            .first()
            .and_then(|p| p.get(2 + t))
            .and_then(|&v| Signal::from_code(v))
            .unwrap_or(Signal::Unknown)
    }
}

/// Future positions per target id.
pub type GroundTruth = BTreeMap<String, Vec<[f64; 2]>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    pub observed: usize,
    pub future: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub sample_rate_hz: f64,
    pub horizon: Horizon,
    pub agents: Vec<Agent>,
    pub map: Vec<Polyline>,
    pub target_ids: Vec<String>,
    pub ground_truth: Option<GroundTruth>,
}

// ---- file format -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRecord {
    x: f64,
    y: f64,
    heading: f64,
    vx: f64,
    vy: f64,
    valid: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentRecord {
    id: String,
    category: String,
    states: Vec<StateRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolylineRecord {
    id: String,
    category: String,
    points: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioRecord {
    version: u32,
    sample_rate_hz: f64,
    horizon: Horizon,
    agents: Vec<AgentRecord>,
    map: Vec<PolylineRecord>,
    targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<BTreeMap<String, Vec<[f64; 2]>>>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

impl Scenario {
    /// Parses and validates a scenario document. `context` names the source
    /// in error messages.
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let rec: ScenarioRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: format!("{context}:{}:{}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        if rec.version != 1 {
            return Err(invalid(format!("unsupported version {}", rec.version)));
        }
        let agents = rec
            .agents
            .into_iter()
            .map(|a| {
                let category = Category::parse(&a.category).ok_or_else(|| {
                    invalid(format!("agent '{}': unknown category {:?}", a.id, a.category))
                })?;
                let states = a
                    .states
                    .iter()
                    .enumerate()
                    .map(|(t, s)| AgentState {
                        position: [s.x, s.y],
                        heading: normalize_heading(s.heading),
                        timestep: t,
                        velocity: [s.vx, s.vy],
                        valid: s.valid,
                    })
                    .collect();
                Ok(Agent {
                    id: a.id,
                    category,
                    states,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let map = rec
            .map
            .into_iter()
            .map(|p| {
                let category = Category::parse(&p.category).ok_or_else(|| {
                    invalid(format!("polyline '{}': unknown category {:?}", p.id, p.category))
                })?;
                Ok(Polyline {
                    id: p.id,
                    category,
                    points: p.points,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scenario = Scenario {
            sample_rate_hz: rec.sample_rate_hz,
            horizon: rec.horizon,
            agents,
            map,
            target_ids: rec.targets,
            ground_truth: rec.ground_truth,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        let rec = ScenarioRecord {
            version: 1,
            sample_rate_hz: self.sample_rate_hz,
            horizon: self.horizon,
            agents: self
                .agents
                .iter()
                .map(|a| AgentRecord {
                    id: a.id.clone(),
                    category: a.category.as_str().to_string(),
                    states: a
                        .states
                        .iter()
                        .map(|s| StateRecord {
                            x: s.position[0],
                            y: s.position[1],
                            heading: s.heading,
                            vx: s.velocity[0],
                            vy: s.velocity[1],
                            valid: s.valid,
                        })
                        .collect(),
                })
                .collect(),
            map: self
                .map
                .iter()
                .map(|p| PolylineRecord {
                    id: p.id.clone(),
                    category: p.category.as_str().to_string(),
                    points: p.points.clone(),
                })
                .collect(),
            targets: self.target_ids.clone(),
            ground_truth: self.ground_truth.clone(),
        };
        serde_json::to_string_pretty(&rec).expect("scenario serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn agent(&self, id: &str) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn agent_index(&self, id: &str) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let t_obs = self.horizon.observed;
        if t_obs == 0 || self.horizon.future == 0 {
            return Err(invalid("horizon lengths must be at least 1"));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(invalid("sample_rate_hz must be positive"));
        }
        let mut ids = HashSet::new();
        for a in &self.agents {
            if !ids.insert(a.id.as_str()) {
                return Err(invalid(format!("duplicate agent id '{}'", a.id)));
            }
            if !a.category.is_dynamic() {
                return Err(invalid(format!(
                    "agent '{}': category {} is not a dynamic agent",
                    a.id,
                    a.category.as_str()
                )));
            }
            if a.states.len() != t_obs {
                return Err(invalid(format!(
                    "agent '{}': {} states, expected {t_obs}",
                    a.id,
                    a.states.len()
                )));
            }
            for (t, s) in a.states.iter().enumerate() {
                let finite = s.position.iter().chain(&s.velocity).all(|v| v.is_finite())
                    && s.heading.is_finite();
                if !finite {
                    return Err(invalid(format!("agent '{}': non-finite state at step {t}", a.id)));
                }
                if s.timestep != t || !(-PI..PI).contains(&s.heading) {
                    return Err(invalid(format!("agent '{}': malformed state at step {t}", a.id)));
                }
            }
        }
        let mut poly_ids = HashSet::new();
        for p in &self.map {
            if !poly_ids.insert(p.id.as_str()) {
                return Err(invalid(format!("duplicate polyline id '{}'", p.id)));
            }
            if p.category.is_dynamic() {
                return Err(invalid(format!(
                    "polyline '{}': category {} belongs to agents",
                    p.id,
                    p.category.as_str()
                )));
            }
            let dim = p.dim();
            if p.points.is_empty() || dim < 2 || p.points.iter().any(|q| q.len() != dim) {
                return Err(invalid(format!(
                    "polyline '{}': needs at least one point and a shared width >= 2",
                    p.id
                )));
            }
            if p.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(invalid(format!("polyline '{}': non-finite coordinate", p.id)));
            }
            if p.category == Category::TrafficLight {
                if p.points.len() != 1 || (dim != 2 && dim != 2 + t_obs) {
                    return Err(invalid(format!(
                        "polyline '{}': a traffic light is one point [x, y] or [x, y, state x {t_obs}]",
                        p.id
                    )));
                }
                if p.points[0][2..].iter().any(|&v| Signal::from_code(v).is_none()) {
                    return Err(invalid(format!(
                        "polyline '{}': signal states must be 0 (unknown), 1 (red) or 2 (green)",
                        p.id
                    )));
                }
            }
        }
        if self.target_ids.is_empty() {
            return Err(invalid("scenario has no targets"));
        }
        let mut seen = HashSet::new();
        for id in &self.target_ids {
            if !seen.insert(id) {
                return Err(invalid(format!("target '{id}' listed twice")));
            }
            let agent = self
                .agent(id)
                .ok_or_else(|| invalid(format!("target '{id}' is not an agent")))?;
            if !agent.last().valid {
                return Err(invalid(format!(
                    "target '{id}' is not observed at the final step"
                )));
            }
        }
        if let Some(gt) = &self.ground_truth {
            for (id, traj) in gt {
                if !self.target_ids.contains(id) {
                    return Err(invalid(format!("ground truth for non-target '{id}'")));
                }
                if traj.len() != self.horizon.future {
                    return Err(invalid(format!(
                        "ground truth for '{id}' has {} steps, expected {}",
                        traj.len(),
                        self.horizon.future
                    )));
                }
                if traj.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(invalid(format!("ground truth for '{id}' is not finite")));
                }
            }
        }
        Ok(())
    }

    /// Applies a rigid transform to every position, heading, velocity and
    /// ground-truth point.
    pub fn transformed(&self, tf: &FrameTransform) -> Scenario {
        let mut out = self.clone();
        for a in &mut out.agents {
            for s in &mut a.states {
                if s.valid {
                    s.position = tf.apply_point(s.position);
                    s.velocity = tf.apply_vector(s.velocity);
                    s.heading = normalize_heading(s.heading - tf.heading);
                }
            }
        }
        for p in &mut out.map {
            for q in &mut p.points {
                let [x, y] = tf.apply_point([q[0], q[1]]);
                q[0] = x;
                q[1] = y;
            }
        }
        if let Some(gt) = &mut out.ground_truth {
            for traj in gt.values_mut() {
                for q in traj.iter_mut() {
                    *q = tf.apply_point(*q);
                }
            }
        }
        out
    }

    /// Re-expresses the scene in the frame where `target_id`'s final observed
    /// pose is the origin with heading 0.
    pub fn to_agent_frame(&self, target_id: &str) -> Result<(Scenario, FrameTransform)> {
        let agent = self
            .agent(target_id)
            .ok_or_else(|| Error::Lookup(format!("no agent '{target_id}'")))?;
        let last = agent.last();
        let tf = FrameTransform {
            origin: last.position,
            heading: last.heading,
        };
        Ok((self.transformed(&tf), tf))
    }
}

/// World → local map `p' = R(-θ)(p - origin)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameTransform {
    pub origin: [f64; 2],
    pub heading: f64,
}

impl FrameTransform {
    pub fn identity() -> Self {
        Self {
            origin: [0.0; 2],
            heading: 0.0,
        }
    }

    pub fn apply_vector(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    pub fn invert_vector(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        self.apply_vector([p[0] - self.origin[0], p[1] - self.origin[1]])
    }

    pub fn invert_point(&self, p: [f64; 2]) -> [f64; 2] {
        let v = self.invert_vector(p);
        [v[0] + self.origin[0], v[1] + self.origin[1]]
    }

    /// The transform whose `apply_point` is this one's `invert_point`.
    pub fn inverse(&self) -> Self {
        let o = self.apply_point([0.0, 0.0]);
        Self {
            origin: o,
            heading: -self.heading,
        }
    }
}
