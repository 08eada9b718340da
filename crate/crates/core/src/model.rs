//! End-to-end forecaster: embed → encode → decode → score → refine.

use crate::config::ModelConfig;
use crate::decoder::{decode_target, Decoder, PredictionSet, Refiner, Scorer, TargetOutput};
use crate::embedding::{embedding_flops, encode_inputs, EmbedderBank};
use crate::encoder::{Encoder, EncoderCounts, SceneMemory};
use crate::error::{Error, Result};
use crate::objective::{target_loss, LossConfig, TargetLoss};
use crate::params::{Ctx, ParamBuilder, ParamStore};
use crate::scenario::{Category, FrameTransform, Scenario};
use std::sync::atomic::{AtomicUsize, Ordering};

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub bank: EmbedderBank,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub scorer: Scorer,
    pub refiner: Refiner,
    encode_calls: AtomicUsize,
}

/// Sizes that determine the forward cost of one target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScenarioSize {
    pub encoder: EncoderCounts,
    /// Total points over static map polylines.
    pub map_points: usize,
}

impl ScenarioSize {
    pub fn of(scenario: &Scenario) -> Self {
        let steps = scenario.horizon.observed;
        let count = |c: Category| scenario.agents.iter().filter(|a| a.category == c).count();
        let peds = count(Category::Pedestrian);
        let lights = scenario
            .map
            .iter()
            .filter(|p| p.category == Category::TrafficLight)
            .count();
        let live_peds = scenario
            .agents
            .iter()
            .filter(|a| a.category == Category::Pedestrian && a.states.get(steps - 1).is_some_and(|s| s.valid))
            .count();
        let statics = scenario.map.iter().filter(|p| p.category.is_static_scene());
        Self {
            encoder: EncoderCounts {
                steps,
                n_dyn: count(Category::Vehicle) + count(Category::Motorcycle),
                n_ped: peds,
                n_scene: statics.clone().count(),
                n_traffic: peds + lights,
                n_live_traffic: live_peds + lights,
            },
            map_points: statics.map(|p| p.points.len()).sum(),
        }
    }
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut pb = ParamBuilder::new(seed);
        let model = Self::declare(&mut pb, cfg)?;
        Ok((model, pb.finish()))
    }

    /// Declares parameters into `pb`.
    pub fn declare(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            bank: EmbedderBank::new(pb, cfg)?,
            encoder: Encoder::new(pb, cfg)?,
            decoder: Decoder::new(pb, cfg)?,
            scorer: Scorer::new(pb, cfg)?,
            refiner: Refiner::new(pb, cfg)?,
            encode_calls: AtomicUsize::new(0),
        })
    }

    /// Rebuilds the architecture for `cfg` and checks `store` against it.
    pub fn for_checkpoint(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let mut pb = ParamBuilder::new(0);
        let model = Self::declare(&mut pb, cfg)?;
        let fresh = pb.finish();
        let mut check = fresh.clone();
        check.assign_from(store)?;
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.bank.num_params()
            + self.encoder.num_params()
            + self.decoder.num_params()
            + self.scorer.num_params()
            + self.refiner.num_params()
    }

    /// Number of scene encodings run so far.
    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    fn check_scenario(&self, sc: &Scenario) -> Result<()> {
        if sc.horizon.observed != self.cfg.observed || sc.horizon.future != self.cfg.future {
            return Err(Error::Validation(format!(
                "scenario horizon {}/{} does not match model {}/{}",
                sc.horizon.observed, sc.horizon.future, self.cfg.observed, self.cfg.future
            )));
        }
        Ok(())
    }

    /// Encodes an agent-frame scenario once.
    pub fn encode(&self, cx: &mut Ctx, local: &Scenario) -> Result<SceneMemory> {
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let enc = encode_inputs(cx, &self.bank, local)?;
        self.encoder.build_scene_memory(cx, &enc)
    }

    /// Full forward for one target in its own frame.
    pub fn forward_target(&self, cx: &mut Ctx, scenario: &Scenario, target: &str) -> Result<(TargetOutput, FrameTransform)> {
        self.check_scenario(scenario)?;
        let index = scenario
            .agent_index(target)
            .ok_or_else(|| Error::Lookup(format!("no agent '{target}'")))?;
        let (local, tf) = scenario.to_agent_frame(target)?;
        let mem = self.encode(cx, &local)?;
        let row = mem
            .row_of(index)
            .ok_or_else(|| Error::Lookup(format!("agent '{target}' has no memory row")))?;
        let out = decode_target(cx, &self.decoder, &self.scorer, &self.refiner, &mem, row)?;
        Ok((out, tf))
    }

    /// Predictions for `target`, in the world frame.
    pub fn predict(&self, store: &ParamStore, scenario: &Scenario, target: &str) -> Result<PredictionSet> {
        let mut cx = Ctx::new(store, false);
        let (out, tf) = self.forward_target(&mut cx, scenario, target)?;
        let set = PredictionSet::from_output(&cx, target, &out).to_world(&tf);
        set.check()?;
        Ok(set)
    }

    /// Loss for one target against world-frame ground truth; the loss is
    /// evaluated in the target frame.
    pub fn target_loss(
        &self,
        cx: &mut Ctx,
        scenario: &Scenario,
        target: &str,
        gt_world: &[[f64; 2]],
        loss: &LossConfig,
    ) -> Result<TargetLoss> {
        if gt_world.len() != self.cfg.future {
            return Err(Error::Validation(format!(
                "ground truth for '{target}' has {} steps, expected {}",
                gt_world.len(),
                self.cfg.future
            )));
        }
        let (out, tf) = self.forward_target(cx, scenario, target)?;
        let gt: Vec<[f64; 2]> = gt_world.iter().map(|&p| tf.apply_point(p)).collect();
        target_loss(cx, &out, &gt, loss)
    }

    /// Analytic forward FLOPs of one target's prediction.
    pub fn flops(&self, size: &ScenarioSize) -> u64 {
        let e = &size.encoder;
        let (k, t) = (self.cfg.modes, self.cfg.future);
        let n_mem = e.n_dyn + e.n_ped;
        embedding_flops(self.cfg.d, self.cfg.joint, e.steps, e.n_dyn, size.map_points, e.n_traffic)
            + self.encoder.flops(e)
            + self.decoder.flops(n_mem, e.steps)
            + self.scorer.flops(k, t, n_mem)
            + self.refiner.flops(k, t, n_mem)
    }
}
