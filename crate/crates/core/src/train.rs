//! Run configuration, data loading, optimizer, learning-rate schedule and the
//! minibatch training loop.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{min_ade, Forecast};
use crate::model::Model;
use crate::objective::{total_loss, LossConfig, LossReport, TrainingLog};
use crate::params::{Ctx, ParamStore};
use crate::scenario::Scenario;
use crate::synth::{generate_labeled, GeneratorSpec};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Reduce-on-plateau settings; validation minADE must drop by at least
/// `threshold` to count as an improvement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            factor: 0.1,
            threshold: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Scenes drawn from the generator; split seeds derive from the run seed.
    Synthetic {
        spec: GeneratorSpec,
        train: usize,
        val: usize,
    },
    /// Directories of scenario files with embedded ground truth.
    Directory { train: PathBuf, val: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            spec: GeneratorSpec::default(),
            train: 512,
            val: 128,
        }
    }
}

/// Timing sweep settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub reps: usize,
    /// Shortest time one measured sample may take; shorter samples repeat the
    /// forward pass in an inner loop.
    pub min_sample_ns: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![64, 128, 256, 512, 1024, 2048, 4096],
            reps: 20,
            min_sample_ns: 2_000_000,
        }
    }
}

// Full-scale runs used batch 128 and 50 epochs; defaults here are desk-sized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub plateau: PlateauConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub data: DataSource,
    pub execution: Execution,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            plateau: PlateauConfig::default(),
            loss: LossConfig::default(),
            batch_size: 16,
            epochs: 20,
            seed: 0,
            data: DataSource::default(),
            execution: Execution::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1");
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("invalid optimizer settings");
        }
        let p = &self.plateau;
        if p.patience == 0 || !(p.factor > 0.0 && p.factor < 1.0) || !(p.threshold >= 0.0) {
            return bad("invalid plateau settings");
        }
        if self.bench.reps == 0 || self.bench.lengths.iter().any(|&l| l == 0) {
            return bad("invalid benchmark settings");
        }
        if let DataSource::Synthetic { spec, train, val } = &self.data {
            if *train == 0 || *val == 0 {
                return bad("synthetic splits must be non-empty");
            }
            if spec.observed != self.model.observed || spec.future != self.model.future {
                return bad("generator horizon differs from the model horizon");
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: "run config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                context: path.display().to_string(),
                message,
            },
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Train and validation sets for this run.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synthetic { spec, train, val } => Ok((
                Dataset::synthetic(spec, self.seed, Split::Train, *train)?,
                Dataset::synthetic(spec, self.seed, Split::Val, *val)?,
            )),
            DataSource::Directory { train, val } => Ok((Dataset::load_dir(train)?, Dataset::load_dir(val)?)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Seed of scene `i` in a split.
pub fn scene_seed(run_seed: u64, split: Split, i: usize) -> u64 {
    let tag = match split {
        Split::Train => 1u64,
        Split::Val => 2,
    };
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 48) ^ i as u64
}

/// Labeled scenes; every target with ground truth is a training item.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub scenarios: Vec<Scenario>,
}

impl Dataset {
    pub fn synthetic(spec: &GeneratorSpec, seed: u64, split: Split, n: usize) -> Result<Self> {
        let scenarios = (0..n)
            .map(|i| generate_labeled(scene_seed(seed, split, i), spec))
            .collect::<Result<_>>()?;
        Ok(Self { scenarios })
    }

    /// Loads every `*.json` in `dir` except `manifest.json`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let is_json = path.extension().is_some_and(|x| x == "json");
            if is_json && path.file_name().is_some_and(|n| n != "manifest.json") {
                paths.push(path);
            }
        }
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Validation(format!("no scenario files in {}", dir.display())));
        }
        let scenarios = paths.iter().map(|p| Scenario::load(p)).collect::<Result<_>>()?;
        Ok(Self { scenarios })
    }

    /// `(scenario index, target id, ground truth)` for every labeled target.
    pub fn items(&self) -> Vec<Item<'_>> {
        let mut out = Vec::new();
        for (i, sc) in self.scenarios.iter().enumerate() {
            let Some(gt) = &sc.ground_truth else { continue };
            for t in &sc.target_ids {
                if let Some(g) = gt.get(t) {
                    out.push(Item {
                        scene: i,
                        target: t.clone(),
                        gt: g.as_slice(),
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Item<'a> {
    pub scene: usize,
    pub target: String,
    pub gt: &'a [[f64; 2]],
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub lr: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            lr: cfg.lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

/// Reduce-on-plateau state machine over a minimized metric.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub cfg: PlateauConfig,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(cfg: PlateauConfig) -> Self {
        Self {
            cfg,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one validation value. Returns whether it improved and the
    /// (possibly reduced) learning rate.
    pub fn observe(&mut self, metric: f64, lr: f64) -> (bool, f64) {
        if metric < self.best - self.cfg.threshold {
            self.best = metric;
            self.bad_epochs = 0;
            return (true, lr);
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.cfg.patience {
            self.bad_epochs = 0;
            return (false, lr * self.cfg.factor);
        }
        (false, lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_min_ade: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Parameters at the best validation epoch.
    pub best: ParamStore,
    pub log: TrainingLog,
    pub epochs: Vec<EpochRecord>,
}

impl TrainOutput {
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_minADE,lr\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:?},{:?},{:?}\n", e.epoch, e.train_loss, e.val_min_ade, e.lr));
        }
        s
    }
}

/// Mean loss report and mean gradient of one minibatch. Per-item results are
/// reduced in item order, so the sum does not depend on scheduling.
pub fn batch_gradient(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    batch: &[Item],
    loss: &LossConfig,
    exec: Execution,
) -> Result<(LossReport, Vec<Tensor>)> {
    let per_item = exec.map(batch, |_, it| -> Result<(LossReport, Vec<Tensor>)> {
        let mut cx = Ctx::new(store, true);
        let l = model.target_loss(&mut cx, &data.scenarios[it.scene], &it.target, it.gt, loss)?;
        let report = l.report(&cx);
        Ok((report, cx.backward(l.total)?))
    });
    let mut reports = Vec::with_capacity(batch.len());
    let mut sum: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let scale = 1.0 / batch.len() as f64;
    for r in per_item {
        let (report, grads) = r?;
        reports.push(report);
        for (acc, g) in sum.iter_mut().zip(&grads) {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v * scale;
            }
        }
    }
    Ok((total_loss(&reports, loss.lambda)?, sum))
}

/// Mean minADE over the validation targets at `K = min(6, modes)`.
pub fn validation_min_ade(model: &Model, store: &ParamStore, data: &Dataset, exec: Execution) -> Result<f64> {
    let items = data.items();
    if items.is_empty() {
        return Err(Error::Validation("validation set has no labeled targets".into()));
    }
    let k = model.cfg.modes.min(6);
    let errs = exec.map(&items, |_, it| -> Result<f64> {
        let p = model.predict(store, &data.scenarios[it.scene], &it.target)?;
        min_ade(&Forecast::from(&p), it.gt, k)
    });
    let mut total = 0.0;
    for e in errs {
        total += e?;
    }
    Ok(total / items.len() as f64)
}

/// Minibatch training with per-epoch validation and best-checkpoint tracking.
pub fn train(cfg: &RunConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    let (model, mut store) = Model::build(&cfg.model, cfg.seed)?;
    let mut items = train_set.items();
    if items.is_empty() {
        return Err(Error::Validation("training set has no labeled targets".into()));
    }
    let mut adam = Adam::new(cfg.optimizer, &store);
    let mut plateau = Plateau::new(cfg.plateau);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut log = TrainingLog::default();
    let mut epochs = Vec::new();
    let mut best = store.clone();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        items.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in items.chunks(cfg.batch_size) {
            let (report, grads) = batch_gradient(&model, &store, train_set, batch, &cfg.loss, cfg.execution)?;
            if !report.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient at epoch {epoch}, step {step} (loss {})",
                    report.total
                )));
            }
            adam.step(&mut store, &grads);
            log.push(epoch, step, report, adam.lr);
            sum += report.total;
            count += 1;
            step += 1;
        }
        let val = validation_min_ade(&model, &store, val_set, cfg.execution)?;
        let (improved, lr) = plateau.observe(val, adam.lr);
        if improved {
            best = store.clone();
        }
        adam.lr = lr;
        epochs.push(EpochRecord {
            epoch,
            train_loss: sum / count as f64,
            val_min_ade: val,
            lr,
        });
    }
    Ok(TrainOutput { best, log, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_reduces_after_patience() {
        let mut p = Plateau::new(PlateauConfig::default());
        let mut lr = 1e-3;
        let mut seen = Vec::new();
        for _ in 0..6 {
            lr = p.observe(1.0, lr).1;
            seen.push(lr);
        }
        assert_eq!(&seen[..5], &[1e-3; 5]);
        assert!((lr - 1e-4).abs() < 1e-18);
        // improvements below the threshold do not reset patience
        let mut p = Plateau::new(PlateauConfig::default());
        p.observe(1.0, 1.0);
        for i in 1..5 {
            assert_eq!(p.observe(1.0 - 2e-5 * i as f64, 1.0), (false, 1.0));
        }
        assert_eq!(p.observe(0.5, 1.0), (true, 1.0));
    }

    #[test]
    fn lr_only_decreases_by_factor() {
        let mut p = Plateau::new(PlateauConfig::default());
        let mut lr = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let v: f64 = rand::Rng::gen_range(&mut rng, 0.0..1.0);
            let next = p.observe(v, lr).1;
            assert!(next == lr || next == lr * 0.1);
            lr = next;
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
        let mut a = Adam::new(AdamConfig::default(), &s);
        a.step(&mut s, &[Tensor::from_vec(vec![3.0, -0.1, 0.0])]);
        let w = s.by_name("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(matches!(RunConfig::from_json("{\"bogus\": 1}"), Err(Error::Parse { .. })));
        let bad = RunConfig { batch_size: 0, ..RunConfig::default() };
        assert!(RunConfig::from_json(&bad.to_json()).is_err());
    }

    #[test]
    fn parallel_and_sequential_gradients_agree() {
        let model_cfg = ModelConfig {
            d: 8,
            m: 8,
            p: 8,
            n_state: 4,
            d_ff: 16,
            depth: 1,
            modes: 3,
            observed: 6,
            future: 5,
            scorer_hidden: 6,
            ..ModelConfig::default()
        };
        let spec = GeneratorSpec { observed: 6, future: 5, ..GeneratorSpec::default() };
        let data = Dataset::synthetic(&spec, 3, Split::Train, 6).unwrap();
        let (model, store) = Model::build(&model_cfg, 0).unwrap();
        let items = data.items();
        let loss = LossConfig::default();
        let (ra, ga) = batch_gradient(&model, &store, &data, &items, &loss, Execution::Parallel).unwrap();
        let (rb, gb) = batch_gradient(&model, &store, &data, &items, &loss, Execution::Sequential).unwrap();
        assert_eq!(ra.total, rb.total);
        assert_eq!(ga, gb);
    }
}
