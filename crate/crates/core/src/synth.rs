//! Synthetic scenes built from kinematic motifs.
//!
//! Every agent follows a simple closed-form kinematic law sampled at the scene
//! rate: heading `θ_t = θ_0 + ω·t/rate`, speed `v_{t+1} = max(v_t - a/rate, 0)`,
//! and positions integrate the stated velocity, `p_{t+1} = p_t + v_t/rate`.
//! Ground truth continues the same law past the observation window.

use crate::error::{Error, Result};
use crate::scenario::{
    normalize_heading, Agent, AgentState, Category, GroundTruth, Horizon, Polyline, Scenario,
    Signal,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motif {
    /// Straight driving at constant velocity along a lane.
    ConstantVelocity,
    /// Constant speed and yaw rate.
    Turn,
    /// Braking to a stop while a crossing vehicle passes ahead.
    Yield,
    /// Braking for a red light while a pedestrian crosses.
    PedestrianCrossing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub observed: usize,
    pub future: usize,
    pub sample_rate_hz: f64,
    /// Sampled uniformly per scene.
    pub motifs: Vec<Motif>,
    pub lanes: usize,
    pub lane_points: usize,
    /// Additional constant-velocity vehicles on neighbouring lanes.
    pub extra_vehicles: usize,
    pub targets: usize,
    /// Speed range in m/s.
    pub speed: [f64; 2],
    /// Yaw-rate magnitude range in rad/s for the turn motif.
    pub yaw_rate: [f64; 2],
    /// Braking deceleration range in m/s².
    pub decel: [f64; 2],
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            observed: 20,
            future: 30,
            sample_rate_hz: 10.0,
            motifs: vec![
                Motif::ConstantVelocity,
                Motif::Turn,
                Motif::Yield,
                Motif::PedestrianCrossing,
            ],
            lanes: 2,
            lane_points: 10,
            extra_vehicles: 1,
            targets: 1,
            speed: [4.0, 12.0],
            yaw_rate: [0.05, 0.3],
            decel: [1.0, 3.0],
        }
    }
}

impl GeneratorSpec {
    /// Only straight constant-velocity scenes.
    pub fn constant_velocity() -> Self {
        Self {
            motifs: vec![Motif::ConstantVelocity],
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Generation(m.to_string()));
        if self.targets == 0 {
            return fail("at least one target is required");
        }
        if self.targets > 1 + self.extra_vehicles {
            return fail("more targets than vehicles");
        }
        if self.observed == 0 || self.future == 0 {
            return fail("horizon lengths must be at least 1");
        }
        if self.motifs.is_empty() {
            return fail("no motifs configured");
        }
        if self.lanes == 0 {
            return fail("lane-following agents need at least one lane");
        }
        if self.lane_points < 2 {
            return fail("lanes need at least two points");
        }
        if !(self.sample_rate_hz > 0.0) {
            return fail("sample rate must be positive");
        }
        let range_ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !range_ok(self.speed) || self.speed[0] < 0.0 {
            return fail("invalid speed range");
        }
        if !range_ok(self.yaw_rate) || !range_ok(self.decel) || self.decel[0] <= 0.0 {
            return fail("invalid yaw-rate or deceleration range");
        }
        Ok(())
    }
}

/// One kinematic sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematic {
    pub position: [f64; 2],
    pub heading: f64,
    pub velocity: [f64; 2],
}

/// Rolls out `steps` samples of the constant yaw-rate / constant-deceleration
/// law from an initial pose and speed.
pub fn rollout(
    start: [f64; 2],
    heading: f64,
    speed: f64,
    yaw_rate: f64,
    decel: f64,
    steps: usize,
    rate: f64,
) -> Vec<Kinematic> {
    let mut out = Vec::with_capacity(steps);
    let mut p = start;
    let mut v = speed;
    for t in 0..steps {
        let theta = heading + yaw_rate * t as f64 / rate;
        let vel = [v * theta.cos(), v * theta.sin()];
        out.push(Kinematic {
            position: p,
            heading: normalize_heading(theta),
            velocity: vel,
        });
        p = [p[0] + vel[0] / rate, p[1] + vel[1] / rate];
        v = (v - decel / rate).max(0.0);
    }
    out
}

fn to_states(samples: &[Kinematic]) -> Vec<AgentState> {
    samples
        .iter()
        .enumerate()
        .map(|(t, k)| AgentState {
            position: k.position,
            heading: k.heading,
            timestep: t,
            velocity: k.velocity,
            valid: true,
        })
        .collect()
}

struct Road {
    origin: [f64; 2],
    heading: f64,
}

impl Road {
    /// Road coordinates (along, across) to world.
    fn at(&self, s: f64, l: f64) -> [f64; 2] {
        let (sn, cs) = self.heading.sin_cos();
        [
            self.origin[0] + s * cs - l * sn,
            self.origin[1] + s * sn + l * cs,
        ]
    }
}

const LANE_WIDTH: f64 = 3.5;

/// Generates one scene and its ground truth. Identical `(seed, spec)` pairs
/// give identical output.
pub fn generate_synthetic(seed: u64, spec: &GeneratorSpec) -> Result<(Scenario, GroundTruth)> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = spec.sample_rate_hz;
    let (t_obs, t_fut) = (spec.observed, spec.future);
    let total = t_obs + t_fut;
    let motif = spec.motifs[rng.gen_range(0..spec.motifs.len())];
    let road = Road {
        origin: [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)],
        heading: rng.gen_range(-PI..PI),
    };
    let lane_offset = |i: usize| (i as f64 - (spec.lanes as f64 - 1.0) / 2.0) * LANE_WIDTH;
    let speed = rng.gen_range(spec.speed[0]..=spec.speed[1]);

    let mut rollouts: Vec<(String, Category, Vec<Kinematic>)> = Vec::new();
    let mut map = Vec::new();
    let mut light: Option<Polyline> = None;

    // target on lane 0, at the road origin when observation ends
    let ego_lane = lane_offset(0);
    let observed_span = speed * (t_obs as f64 - 1.0) / rate;
    let ego_start = road.at(-observed_span, ego_lane);
    let ego = match motif {
        Motif::ConstantVelocity => rollout(ego_start, road.heading, speed, 0.0, 0.0, total, rate),
        Motif::Turn => {
            let mag = rng.gen_range(spec.yaw_rate[0]..=spec.yaw_rate[1]);
            let w = if rng.gen_bool(0.5) { mag } else { -mag };
            rollout(ego_start, road.heading, speed, w, 0.0, total, rate)
        }
        Motif::Yield | Motif::PedestrianCrossing => {
            let a = rng.gen_range(spec.decel[0]..=spec.decel[1]);
            let start = road.at(0.0, ego_lane);
            let samples = rollout(start, road.heading, speed, 0.0, a, total, rate);
            let stop_s = speed * speed / (2.0 * a) + 2.0;
            if motif == Motif::Yield {
                let cross_speed = rng.gen_range(spec.speed[0]..=spec.speed[1]).max(1.0);
                let cross_start = road.at(stop_s + 4.0, -20.0 - rng.gen_range(0.0..10.0));
                let crossing = rollout(
                    cross_start,
                    road.heading + PI / 2.0,
                    cross_speed,
                    0.0,
                    0.0,
                    total,
                    rate,
                );
                rollouts.push(("crossing".into(), Category::Vehicle, crossing));
            } else {
                let walk = rng.gen_range(1.0..1.8);
                let ped_start = road.at(stop_s + 3.0, -8.0 - rng.gen_range(0.0..2.0));
                let ped = rollout(ped_start, road.heading + PI / 2.0, walk, 0.0, 0.0, total, rate);
                rollouts.push(("ped".into(), Category::Pedestrian, ped));
                let [lx, ly] = road.at(stop_s, lane_offset(spec.lanes - 1) + LANE_WIDTH);
                let mut point = vec![lx, ly];
                point.extend(std::iter::repeat(Signal::Red.code()).take(t_obs));
                light = Some(Polyline {
                    id: "light".into(),
                    category: Category::TrafficLight,
                    points: vec![point],
                });
            }
            samples
        }
    };
    rollouts.insert(0, ("ego".into(), Category::Vehicle, ego));

    for k in 0..spec.extra_vehicles {
        let lane = if spec.lanes > 1 { 1 + k % (spec.lanes - 1) } else { 0 };
        let v = rng.gen_range(spec.speed[0]..=spec.speed[1]);
        let s0 = rng.gen_range(-30.0..10.0) - v * (t_obs as f64 - 1.0) / rate;
        let l = lane_offset(lane) + if lane == 0 { 0.0 } else { rng.gen_range(-0.3..0.3) };
        let samples = rollout(road.at(s0, l), road.heading, v, 0.0, 0.0, total, rate);
        let cat = if rng.gen_bool(0.25) {
            Category::Motorcycle
        } else {
            Category::Vehicle
        };
        rollouts.push((format!("veh{k}"), cat, samples));
    }

    let (s_min, s_max) = (-120.0, 120.0);
    let lane_pts = |l: f64| -> Vec<Vec<f64>> {
        (0..spec.lane_points)
            .map(|i| {
                let s = s_min + (s_max - s_min) * i as f64 / (spec.lane_points - 1) as f64;
                road.at(s, l).to_vec()
            })
            .collect()
    };
    for i in 0..spec.lanes {
        map.push(Polyline {
            id: format!("lane{i}"),
            category: Category::Lane,
            points: lane_pts(lane_offset(i)),
        });
    }
    let edge = lane_offset(spec.lanes - 1) + LANE_WIDTH / 2.0;
    let edge_lo = lane_offset(0) - LANE_WIDTH / 2.0;
    map.push(Polyline {
        id: "edge_left".into(),
        category: Category::MapEdge,
        points: lane_pts(edge),
    });
    map.push(Polyline {
        id: "edge_right".into(),
        category: Category::MapEdge,
        points: lane_pts(edge_lo),
    });
    map.push(Polyline {
        id: "sidewalk".into(),
        category: Category::Sidewalk,
        points: lane_pts(edge + 2.0),
    });
    if rng.gen_bool(0.5) {
        map.push(Polyline {
            id: "sign".into(),
            category: Category::TrafficSign,
            points: vec![road.at(rng.gen_range(0.0..40.0), edge + 1.0).to_vec()],
        });
    }
    map.extend(light);

    let mut agents = Vec::with_capacity(rollouts.len());
    let mut gt = GroundTruth::new();
    let target_ids: Vec<String> = rollouts
        .iter()
        .filter(|(_, c, _)| matches!(c, Category::Vehicle | Category::Motorcycle))
        .map(|(id, _, _)| id.clone())
        .filter(|id| id != "crossing")
        .take(spec.targets)
        .collect();
    if target_ids.len() < spec.targets {
        return Err(Error::Generation("not enough lane vehicles for targets".into()));
    }
    for (id, category, samples) in rollouts {
        if target_ids.contains(&id) {
            gt.insert(
                id.clone(),
                samples[t_obs..].iter().map(|k| k.position).collect(),
            );
        }
        agents.push(Agent {
            id,
            category,
            states: to_states(&samples[..t_obs]),
        });
    }
    let scenario = Scenario {
        sample_rate_hz: rate,
        horizon: Horizon {
            observed: t_obs,
            future: t_fut,
        },
        agents,
        map,
        target_ids,
        ground_truth: None,
    };
    scenario.validate()?;
    Ok((scenario, gt))
}

/// A scene with its ground truth embedded.
pub fn generate_labeled(seed: u64, spec: &GeneratorSpec) -> Result<Scenario> {
    let (mut s, gt) = generate_synthetic(seed, spec)?;
    s.ground_truth = Some(gt);
    Ok(s)
}
