//! Motion-forecasting metrics over multi-modal predictions.

use crate::config::ModelConfig;
use crate::decoder::PredictionSet;
use crate::error::{Error, Result};
use crate::model::{Model, ScenarioSize};
use crate::params::{ParamBuilder, ParamStore};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Final-step error above this many meters counts as a miss.
pub const MISS_THRESHOLD: f64 = 2.0;

/// Borrowed view of `K` trajectories of equal length and their weights.
#[derive(Clone, Copy, Debug)]
pub struct Forecast<'a> {
    /// Mode-major waypoints, `K × T'`.
    pub traj: &'a [[f64; 2]],
    pub pi: &'a [f64],
}

impl<'a> Forecast<'a> {
    pub fn new(traj: &'a [[f64; 2]], pi: &'a [f64]) -> Result<Self> {
        if pi.is_empty() || traj.len() % pi.len() != 0 || traj.is_empty() {
            return Err(Error::Contract(format!(
                "{} waypoints do not split into {} modes",
                traj.len(),
                pi.len()
            )));
        }
        Ok(Self { traj, pi })
    }

    pub fn modes(&self) -> usize {
        self.pi.len()
    }

    pub fn steps(&self) -> usize {
        self.traj.len() / self.pi.len()
    }

    pub fn mode(&self, k: usize) -> &'a [[f64; 2]] {
        let t = self.steps();
        &self.traj[k * t..(k + 1) * t]
    }
}

impl<'a> From<&'a PredictionSet> for Forecast<'a> {
    fn from(p: &'a PredictionSet) -> Self {
        Self { traj: &p.mu, pi: &p.pi }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Indices of the `k` most probable modes; ties keep the lower index.
pub fn top_k(pi: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > pi.len() {
        return Err(Error::Contract(format!("K = {k} with {} modes available", pi.len())));
    }
    let mut idx: Vec<usize> = (0..pi.len()).collect();
    idx.sort_by(|&a, &b| pi[b].total_cmp(&pi[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

fn check_gt(f: &Forecast, gt: &[[f64; 2]]) -> Result<()> {
    if gt.len() != f.steps() {
        return Err(Error::Contract(format!(
            "ground truth has {} steps, predictions {}",
            gt.len(),
            f.steps()
        )));
    }
    Ok(())
}

fn ade(traj: &[[f64; 2]], gt: &[[f64; 2]]) -> f64 {
    traj.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum::<f64>() / gt.len() as f64
}

/// `(mode, error)` of the best final waypoint among the top `k`.
fn best_final(f: &Forecast, gt: &[[f64; 2]], k: usize) -> Result<(usize, f64)> {
    check_gt(f, gt)?;
    let last = gt.len() - 1;
    let mut best = (usize::MAX, f64::INFINITY);
    for m in top_k(f.pi, k)? {
        let e = dist(f.mode(m)[last], gt[last]);
        if e < best.1 || (e == best.1 && m < best.0) {
            best = (m, e);
        }
    }
    Ok(best)
}

pub fn min_ade(f: &Forecast, gt: &[[f64; 2]], k: usize) -> Result<f64> {
    check_gt(f, gt)?;
    Ok(top_k(f.pi, k)?
        .into_iter()
        .map(|m| ade(f.mode(m), gt))
        .fold(f64::INFINITY, f64::min))
}

pub fn min_fde(f: &Forecast, gt: &[[f64; 2]], k: usize) -> Result<f64> {
    Ok(best_final(f, gt, k)?.1)
}

/// `minFDE + (1 - π̂)²`, with π̂ the weight of the best-final mode.
pub fn b_min_fde(f: &Forecast, gt: &[[f64; 2]], k: usize) -> Result<f64> {
    let (m, e) = best_final(f, gt, k)?;
    Ok(e + (1.0 - f.pi[m]).powi(2))
}

pub fn miss_rate(batch: &[(Forecast, &[[f64; 2]])], k: usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("miss rate of an empty batch".into()));
    }
    let mut misses = 0usize;
    for (f, gt) in batch {
        if best_final(f, gt, k)?.1 > MISS_THRESHOLD {
            misses += 1;
        }
    }
    Ok(misses as f64 / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    #[serde(rename = "minADE")]
    pub min_ade: f64,
    #[serde(rename = "minFDE")]
    pub min_fde: f64,
    pub b_min_fde: f64,
    #[serde(rename = "MR")]
    pub mr: f64,
}

#[allow(non_snake_case)]
mod keys {
    use super::KMetrics;
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub(super) struct Wire {
        pub K6: Wire1,
        pub K1: Wire1,
        pub params_M: f64,
        pub flops_G: f64,
        pub n_targets: usize,
    }

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub(super) struct Wire1 {
        pub minADE: f64,
        pub minFDE: f64,
        pub b_minFDE: f64,
        pub MR: f64,
    }

    impl From<KMetrics> for Wire1 {
        fn from(m: KMetrics) -> Self {
            Self {
                minADE: m.min_ade,
                minFDE: m.min_fde,
                b_minFDE: m.b_min_fde,
                MR: m.mr,
            }
        }
    }

    impl From<Wire1> for KMetrics {
        fn from(w: Wire1) -> Self {
            Self {
                min_ade: w.minADE,
                min_fde: w.minFDE,
                b_min_fde: w.b_minFDE,
                mr: w.MR,
            }
        }
    }
}

/// Dataset-level evaluation at K = 6 and K = 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub k6: KMetrics,
    pub k1: KMetrics,
    pub params_m: f64,
    pub flops_g: f64,
    pub n_targets: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(keys::Wire {
            K6: self.k6.into(),
            K1: self.k1.into(),
            params_M: self.params_m,
            flops_G: self.flops_g,
            n_targets: self.n_targets,
        })
        .expect("plain numbers serialize")
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("plain numbers serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: keys::Wire = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: "metric report".into(),
            message: e.to_string(),
        })?;
        Ok(Self {
            k6: w.K6.into(),
            k1: w.K1.into(),
            params_m: w.params_M,
            flops_g: w.flops_G,
            n_targets: w.n_targets,
        })
    }
}

/// Averages per-target metrics at one K over a batch.
pub fn aggregate(batch: &[(Forecast, &[[f64; 2]])], k: usize) -> Result<KMetrics> {
    let mr = miss_rate(batch, k)?;
    let n = batch.len() as f64;
    let mut m = KMetrics { mr, ..KMetrics::default() };
    for (f, gt) in batch {
        m.min_ade += min_ade(f, gt, k)? / n;
        m.min_fde += min_fde(f, gt, k)? / n;
        m.b_min_fde += b_min_fde(f, gt, k)? / n;
    }
    Ok(m)
}

/// Full report; parameter and FLOP counts are supplied by the caller.
pub fn report(batch: &[(Forecast, &[[f64; 2]])], params_m: f64, flops_g: f64) -> Result<MetricReport> {
    Ok(MetricReport {
        k6: aggregate(batch, 6)?,
        k1: aggregate(batch, 1)?,
        params_m,
        flops_g,
        n_targets: batch.len(),
    })
}

/// Parameter count in millions.
pub fn count_params(store: &ParamStore) -> f64 {
    store.num_scalars() as f64 / 1e6
}

/// Analytic forward cost of one target, in GigaOps.
pub fn estimate_flops(cfg: &ModelConfig, size: &ScenarioSize) -> Result<f64> {
    let model = Model::declare(&mut ParamBuilder::new(0), cfg)?;
    Ok(model.flops(size) as f64 / 1e9)
}
