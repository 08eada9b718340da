//! Evaluation, ablation grid, scaling benchmark and scenario export.

use crate::block::{block_flops, Block, BlockDims};
use crate::config::{BlockKind, ModelConfig};
use crate::decoder::PredictionSet;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{count_params, report, Forecast, MetricReport};
use crate::model::{Model, ScenarioSize};
use crate::params::{Ctx, ParamBuilder, ParamStore};
use crate::scenario::Scenario;
use crate::synth::{generate_labeled, GeneratorSpec};
use crate::tensor::Tensor;
use crate::train::{scene_seed, train, Dataset, RunConfig, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const REPORT_FILE: &str = "report.json";
pub const PREDICTION_DIR: &str = "predictions";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";

/// Anything that can produce world-frame predictions for a target.
pub trait Predictor: Sync {
    fn predict(&self, scenario: &Scenario, target: &str) -> Result<PredictionSet>;
    fn params_m(&self) -> f64;
    /// Forward cost of one target of `scenario`, in GigaOps.
    fn flops_g(&self, scenario: &Scenario) -> f64;
}

pub struct Trained<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
}

impl Predictor for Trained<'_> {
    fn predict(&self, scenario: &Scenario, target: &str) -> Result<PredictionSet> {
        self.model.predict(self.store, scenario, target)
    }

    fn params_m(&self) -> f64 {
        count_params(self.store)
    }

    fn flops_g(&self, scenario: &Scenario) -> f64 {
        self.model.flops(&ScenarioSize::of(scenario)) as f64 / 1e9
    }
}

/// Test stub that answers every mode with the recorded ground truth.
pub struct GroundTruthOracle {
    pub modes: usize,
}

impl Predictor for GroundTruthOracle {
    fn predict(&self, scenario: &Scenario, target: &str) -> Result<PredictionSet> {
        let gt = scenario
            .ground_truth
            .as_ref()
            .and_then(|g| g.get(target))
            .ok_or_else(|| Error::Lookup(format!("no ground truth for '{target}'")))?;
        let k = self.modes;
        let mu: Vec<[f64; 2]> = (0..k).flat_map(|_| gt.iter().copied()).collect();
        Ok(PredictionSet {
            target_id: target.to_string(),
            modes: k,
            steps: gt.len(),
            proposals: mu.clone(),
            b: vec![[1.0; 2]; mu.len()],
            mu,
            pi: vec![1.0 / k as f64; k],
            scores: vec![0.0; k],
        })
    }

    fn params_m(&self) -> f64 {
        0.0
    }

    fn flops_g(&self, _: &Scenario) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    /// `(file name, predictions)` per labeled target, in dataset order.
    pub predictions: Vec<(String, PredictionSet)>,
}

fn prediction_file(scene: usize, target: &str) -> String {
    format!("scene{scene:05}_{target}.csv")
}

/// Metrics at K = 6 and K = 1 over every labeled target. FLOPs refer to the
/// first scenario's size.
pub fn evaluate(predictor: &dyn Predictor, data: &Dataset, exec: Execution) -> Result<Evaluation> {
    let items = data.items();
    let first = data
        .scenarios
        .first()
        .filter(|_| !items.is_empty())
        .ok_or_else(|| Error::Validation("no labeled targets to evaluate".into()))?;
    let preds = exec.map(&items, |_, it| predictor.predict(&data.scenarios[it.scene], &it.target));
    let mut predictions = Vec::with_capacity(items.len());
    for (it, p) in items.iter().zip(preds) {
        predictions.push((prediction_file(it.scene, &it.target), p?));
    }
    let batch: Vec<(Forecast, &[[f64; 2]])> = predictions
        .iter()
        .zip(&items)
        .map(|((_, p), it)| (Forecast::from(p), it.gt))
        .collect();
    let report = report(&batch, predictor.params_m(), predictor.flops_g(first))?;
    Ok(Evaluation { report, predictions })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl Evaluation {
    /// Writes `report.json` and one prediction CSV per target under `out`.
    pub fn write(&self, out: &Path) -> Result<()> {
        let dir = out.join(PREDICTION_DIR);
        create_dir(&dir)?;
        write(&out.join(REPORT_FILE), self.report.to_json_string())?;
        for (name, p) in &self.predictions {
            write(&dir.join(name), p.to_csv())?;
        }
        Ok(())
    }
}

/// Recomputes the report from exported prediction CSVs.
pub fn replay(pred_dir: &Path, data: &Dataset, params_m: f64, flops_g: f64) -> Result<MetricReport> {
    let items = data.items();
    let mut sets = Vec::with_capacity(items.len());
    for it in &items {
        let path = pred_dir.join(prediction_file(it.scene, &it.target));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        sets.push(PredictionSet::from_csv(&it.target, &text)?);
    }
    let batch: Vec<(Forecast, &[[f64; 2]])> = sets.iter().zip(&items).map(|(p, it)| (Forecast::from(p), it.gt)).collect();
    report(&batch, params_m, flops_g)
}

/// Loads a checkpoint for `cfg`, rejecting dimension mismatches.
pub fn load_checkpoint(cfg: &ModelConfig, path: &Path) -> Result<(Model, ParamStore)> {
    let store = ParamStore::load(path)?;
    let model = Model::for_checkpoint(cfg, &store)?;
    Ok((model, store))
}

/// Trains and writes `checkpoint.bin`, `config.json`, `training_log.csv`
/// and `epochs.csv` under `out`.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<crate::train::TrainOutput> {
    let (tr, val) = cfg.load_data()?;
    let result = train(cfg, &tr, &val)?;
    create_dir(out)?;
    result.best.save(&out.join(CHECKPOINT_FILE))?;
    write(&out.join(CONFIG_FILE), cfg.to_json())?;
    write(&out.join("training_log.csv"), result.log.to_csv())?;
    write(&out.join("epochs.csv"), result.epochs_csv())?;
    Ok(result)
}

/// Evaluates a checkpoint on the validation split and writes the outputs.
pub fn run_evaluate(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<MetricReport> {
    let (model, store) = load_checkpoint(&cfg.model, checkpoint)?;
    let (_, val) = cfg.load_data()?;
    let eval = evaluate(&Trained { model: &model, store: &store }, &val, cfg.execution)?;
    create_dir(out)?;
    eval.write(out)?;
    Ok(eval.report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub block: BlockKind,
    pub joint: bool,
    pub params: usize,
    pub report: MetricReport,
}

pub const ABLATION_HEADER: &str = "block,joint,params,minFDE_6,minADE_6,minFDE_1,minADE_1";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:?},{:?},{:?},{:?}",
            r.block.as_str(),
            if r.joint { "on" } else { "off" },
            r.params,
            r.report.k6.min_fde,
            r.report.k6.min_ade,
            r.report.k1.min_fde,
            r.report.k1.min_ade
        );
    }
    s
}

/// Trains and evaluates every block kind with and without joint encoding on
/// shared data and seed.
pub fn ablate(cfg: &RunConfig, train_set: &Dataset, val_set: &Dataset) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for block in BlockKind::ALL {
        for joint in [true, false] {
            let mut c = cfg.clone();
            c.model.block = block;
            c.model.joint = joint;
            let out = train(&c, train_set, val_set)?;
            let model = Model::for_checkpoint(&c.model, &out.best)?;
            let eval = evaluate(&Trained { model: &model, store: &out.best }, val_set, c.execution)?;
            rows.push(AblationRow {
                block,
                joint,
                params: out.best.num_scalars(),
                report: eval.report,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub len: usize,
    pub block: BlockKind,
    pub median_ns: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingResult {
    pub rows: Vec<TimingRow>,
    /// Log-log slope of SSM time over all lengths.
    pub ssm_slope: f64,
    /// Log-log slope of attention time over lengths ≥ 512 (all lengths when
    /// fewer than two qualify).
    pub attention_slope: f64,
}

impl ScalingResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("L,block_kind,median_ns,flops\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.1},{}", r.len, r.block.as_str(), r.median_ns, r.flops);
        }
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall time of one block forward over a single length-`len` sequence.
pub fn time_block(kind: BlockKind, dims: BlockDims, len: usize, reps: usize, min_sample_ns: u64) -> Result<f64> {
    let mut pb = ParamBuilder::new(1);
    let block = Block::new(&mut pb, "bench", kind, dims)?;
    let store = pb.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
    let x = Tensor::uniform(&[1, len, dims.d], 1.0, &mut rng);
    let run = || -> Result<()> {
        let mut cx = Ctx::new(&store, false);
        let v = cx.g.constant(x.clone());
        let y = block.forward(&mut cx, v)?;
        std::hint::black_box(cx.g.value(y));
        Ok(())
    };
    let t = Instant::now();
    run()?;
    let once = t.elapsed().as_nanos().max(1) as u64;
    let inner = min_sample_ns.div_ceil(once).max(1);
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        for _ in 0..inner {
            run()?;
        }
        samples.push(t.elapsed().as_nanos() as f64 / inner as f64);
    }
    Ok(median(&mut samples))
}

/// Times the selective SSM block against the attention block at equal width.
pub fn benchmark_scaling(cfg: &RunConfig) -> Result<ScalingResult> {
    cfg.validate()?;
    let dims = BlockDims::from_config(&cfg.model);
    let lens = &cfg.bench.lengths;
    if lens.len() < 2 {
        return Err(Error::Config("need at least two lengths to fit a slope".into()));
    }
    let mut rows = Vec::new();
    for &len in lens {
        for kind in [BlockKind::Tamba, BlockKind::Attention] {
            rows.push(TimingRow {
                len,
                block: kind,
                median_ns: time_block(kind, dims, len, cfg.bench.reps, cfg.bench.min_sample_ns)?,
                flops: block_flops(kind, dims, len),
            });
        }
    }
    let pts = |kind, min_len| -> Vec<(f64, f64)> {
        rows.iter()
            .filter(|r| r.block == kind && r.len >= min_len)
            .map(|r| (r.len as f64, r.median_ns))
            .collect()
    };
    let mut att = pts(BlockKind::Attention, 512);
    if att.len() < 2 {
        att = pts(BlockKind::Attention, 0);
    }
    Ok(ScalingResult {
        ssm_slope: log_log_slope(&pts(BlockKind::Tamba, 0)),
        attention_slope: log_log_slope(&att),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct ManifestEntry {
    file: String,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct Manifest<'a> {
    count: usize,
    spec: &'a GeneratorSpec,
    files: Vec<ManifestEntry>,
}

/// Writes `n` labeled scenes plus `manifest.json` into `out`. Scene `i` uses
/// `seeds(i)`.
pub fn generate_with(spec: &GeneratorSpec, n: usize, out: &Path, seeds: impl Fn(usize) -> u64) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut files = Vec::with_capacity(n);
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let seed = seeds(i);
        let name = format!("scene{i:05}.json");
        let path = out.join(&name);
        generate_labeled(seed, spec)?.save(&path)?;
        files.push(ManifestEntry { file: name, seed });
        paths.push(path);
    }
    let manifest = Manifest { count: n, spec, files };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out.join("manifest.json"), text + "\n")?;
    Ok(paths)
}

pub fn generate(spec: &GeneratorSpec, n: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    generate_with(spec, n, out, |i| scene_seed(seed, Split::Train, i))
}

/// Writes the run's synthetic splits to `out/train` and `out/val`, matching
/// what the in-memory synthetic source would produce.
pub fn export_splits(cfg: &RunConfig, out: &Path) -> Result<()> {
    let crate::train::DataSource::Synthetic { spec, train, val } = &cfg.data else {
        return Err(Error::Config("generate needs a synthetic data source".into()));
    };
    generate_with(spec, *train, &out.join("train"), |i| scene_seed(cfg.seed, Split::Train, i))?;
    generate_with(spec, *val, &out.join("val"), |i| scene_seed(cfg.seed, Split::Val, i))?;
    Ok(())
}
