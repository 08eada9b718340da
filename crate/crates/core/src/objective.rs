//! Training losses: winner-takes-all proposal MSE, Laplace NLL of the winning
//! refined mode, and the mixture classification NLL with stopped location and
//! scale.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::Ctx;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WinnerCriterion {
    #[default]
    MinAde,
    MinFde,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Classification weight.
    pub lambda: f64,
    pub winner: WinnerCriterion,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            winner: WinnerCriterion::MinAde,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Index of the mode closest to `gt`; ties go to the lowest index.
/// `modes` is `[K, T', 2]`.
pub fn winner_takes_all(modes: &Tensor, gt: &[[f64; 2]], criterion: WinnerCriterion) -> Result<usize> {
    let s = modes.shape();
    if s.len() != 3 || s[2] != 2 || s[1] != gt.len() || s[0] == 0 {
        return Err(Error::Dimension(format!(
            "winner selection: modes {s:?} vs {} ground-truth steps",
            gt.len()
        )));
    }
    let t = s[1];
    let mut best = (0, f64::INFINITY);
    for k in 0..s[0] {
        let dist = |i: usize| {
            let p = &modes.data()[(k * t + i) * 2..(k * t + i) * 2 + 2];
            (p[0] - gt[i][0]).hypot(p[1] - gt[i][1])
        };
        let c = match criterion {
            WinnerCriterion::MinAde => (0..t).map(dist).sum::<f64>() / t as f64,
            WinnerCriterion::MinFde => dist(t - 1),
        };
        if c < best.1 {
            best = (k, c);
        }
    }
    Ok(best.0)
}

fn gt_tensor(gt: &[[f64; 2]]) -> Tensor {
    Tensor::new(vec![gt.len(), 2], gt.iter().flatten().copied().collect()).expect("gt shape")
}

fn mode(cx: &mut Ctx, x: Var, k: usize) -> Result<Var> {
    let s = cx.g.shape(x).to_vec();
    let m = cx.g.slice_rows(x, k, 1)?;
    cx.g.reshape(m, &s[1..])
}

/// Mean squared error of mode `k` over all steps and both coordinates.
pub fn proposal_loss(cx: &mut Ctx, proposals: Var, gt: &[[f64; 2]], k: usize) -> Result<Var> {
    let p = mode(cx, proposals, k)?;
    let g = cx.g.constant(gt_tensor(gt));
    let e = cx.g.sub(p, g)?;
    let e = cx.g.square(e)?;
    cx.g.mean(e)
}

/// Per-step terms `log(2b) + |gt − μ| / b` for `μ, b [.., T', 2]` against `gt`
/// broadcast over leading axes; shape matches `μ`.
fn laplace_terms(cx: &mut Ctx, gt: &[[f64; 2]], mu: Var, b: Var) -> Result<Var> {
    let shape = cx.g.shape(mu).to_vec();
    let reps = cx.g.value(mu).len() / (2 * gt.len()).max(1);
    let flat: Vec<f64> = (0..reps).flat_map(|_| gt.iter().flatten().copied()).collect();
    let g = cx.g.constant(Tensor::new(shape, flat)?);
    let e = cx.g.sub(g, mu)?;
    let e = cx.g.abs(e)?;
    let inv = cx.g.recip(b)?;
    let ratio = cx.g.mul(e, inv)?;
    let two_b = cx.g.scale(b, 2.0)?;
    let lg = cx.g.log(two_b)?;
    cx.g.add(lg, ratio)
}

/// Laplace negative log-likelihood of the winner mode: summed over the two
/// coordinates, averaged over steps.
pub fn laplace_nll(cx: &mut Ctx, gt: &[[f64; 2]], mu: Var, b: Var, k: usize) -> Result<Var> {
    if cx.g.value(b).data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Contract("Laplace scale must be positive".into()));
    }
    let m = mode(cx, mu, k)?;
    let s = mode(cx, b, k)?;
    let terms = laplace_terms(cx, gt, m, s)?;
    let total = cx.g.sum(terms)?;
    cx.g.scale(total, 1.0 / gt.len() as f64)
}

/// Mixture NLL `−log Σ_k π_k exp(−NLL_k)` with `NLL_k` on the same scale as
/// [`laplace_nll`]. Location and scale enter through stop-gradient, so only
/// `log_pi` receives gradient.
pub fn classification_loss(cx: &mut Ctx, log_pi: Var, gt: &[[f64; 2]], mu: Var, b: Var) -> Result<Var> {
    let k = cx.g.shape(mu)[0];
    let mu = cx.g.stop_gradient(mu)?;
    let b = cx.g.stop_gradient(b)?;
    let terms = laplace_terms(cx, gt, mu, b)?;
    let per_mode = cx.g.reshape(terms, &[k, 2 * gt.len()])?;
    let nll = cx.g.sum_last(per_mode)?;
    let nll = cx.g.scale(nll, -1.0 / gt.len() as f64)?;
    let logits = cx.g.add(log_pi, nll)?;
    let lse = cx.g.logsumexp_last(logits)?;
    cx.g.scale(lse, -1.0)
}

/// Scalar losses for one target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub proposal: f64,
    pub refine: f64,
    pub cls: f64,
    pub total: f64,
    pub winner: usize,
}

/// Graph handles of one target's losses.
#[derive(Clone, Copy, Debug)]
pub struct TargetLoss {
    pub proposal: Var,
    pub refine: Var,
    pub cls: Var,
    pub total: Var,
    pub winner: usize,
}

impl TargetLoss {
    pub fn report(&self, cx: &Ctx) -> LossReport {
        let v = |x: Var| cx.g.value(x).item();
        LossReport {
            proposal: v(self.proposal),
            refine: v(self.refine),
            cls: v(self.cls),
            total: v(self.total),
            winner: self.winner,
        }
    }
}

/// All three losses of one target with `L = L_proposal + L_refine + λ·L_cls`.
pub fn target_loss(
    cx: &mut Ctx,
    out: &crate::decoder::TargetOutput,
    gt: &[[f64; 2]],
    cfg: &LossConfig,
) -> Result<TargetLoss> {
    let winner = winner_takes_all(cx.g.value(out.proposals), gt, cfg.winner)?;
    let proposal = proposal_loss(cx, out.proposals, gt, winner)?;
    let refine = laplace_nll(cx, gt, out.mu, out.b, winner)?;
    let cls = classification_loss(cx, out.log_pi, gt, out.mu, out.b)?;
    let a = cx.g.add(proposal, refine)?;
    let c = cx.g.scale(cls, cfg.lambda)?;
    let total = cx.g.add(a, c)?;
    Ok(TargetLoss {
        proposal,
        refine,
        cls,
        total,
        winner,
    })
}

/// Batch mean of per-target reports.
pub fn total_loss(reports: &[LossReport], lambda: f64) -> Result<LossReport> {
    if reports.is_empty() {
        return Err(Error::Contract("total loss of an empty batch".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let (p, r, c) = (mean(|r| r.proposal), mean(|r| r.refine), mean(|r| r.cls));
    Ok(LossReport {
        proposal: p,
        refine: r,
        cls: c,
        total: p + r + lambda * c,
        winner: reports[0].winner,
    })
}

/// Rows for the training log, `epoch,step,L_proposal,L_refine,L_cls,L_total,lr`.
#[derive(Clone, Debug, Default)]
pub struct TrainingLog {
    rows: Vec<(usize, usize, LossReport, f64)>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,step,L_proposal,L_refine,L_cls,L_total,lr";

    pub fn push(&mut self, epoch: usize, step: usize, r: LossReport, lr: f64) {
        self.rows.push((epoch, step, r, lr));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for (e, st, r, lr) in &self.rows {
            let _ = writeln!(
                s,
                "{e},{st},{:?},{:?},{:?},{:?},{:?}",
                r.proposal, r.refine, r.cls, r.total, lr
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn modes(k: usize, t: usize, f: impl Fn(usize, usize) -> [f64; 2]) -> Tensor {
        let mut data = Vec::with_capacity(k * t * 2);
        for m in 0..k {
            for i in 0..t {
                data.extend(f(m, i));
            }
        }
        Tensor::new(vec![k, t, 2], data).unwrap()
    }

    #[test]
    fn winner_examples() {
        let gt = vec![[0.0, 0.0]; 4];
        let one = modes(1, 4, |_, _| [5.0, 5.0]);
        assert_eq!(winner_takes_all(&one, &gt, WinnerCriterion::MinAde).unwrap(), 0);
        let two = modes(2, 4, |m, _| [2.0 - m as f64, 0.0]);
        assert_eq!(winner_takes_all(&two, &gt, WinnerCriterion::MinAde).unwrap(), 1);
        let tie = modes(3, 4, |m, _| [if m == 0 { 3.0 } else { 1.0 }, 0.0]);
        assert_eq!(winner_takes_all(&tie, &gt, WinnerCriterion::MinFde).unwrap(), 1);
    }

    #[test]
    fn proposal_loss_examples() {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store, false);
        let gt: Vec<[f64; 2]> = (0..5).map(|i| [i as f64, 0.5]).collect();
        let p = modes(2, 5, |m, i| [i as f64 + m as f64, 0.5]);
        let pv = cx.g.leaf(p, true);
        let l0 = proposal_loss(&mut cx, pv, &gt, 0).unwrap();
        assert_eq!(cx.g.value(l0).item(), 0.0);
        let l1 = proposal_loss(&mut cx, pv, &gt, 1).unwrap();
        assert_eq!(cx.g.value(l1).item(), 0.5);
        cx.g.backward(l1).unwrap();
        let g = cx.g.grad(pv).unwrap();
        assert!(g.data()[..10].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplace_closed_forms() {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store, false);
        let gt = vec![[1.0, 2.0]; 3];
        let mu = cx.g.constant(modes(1, 3, |_, _| [1.0, 2.0]));
        let b = cx.g.constant(Tensor::full(&[1, 3, 2], 0.5));
        let l = laplace_nll(&mut cx, &gt, mu, b, 0).unwrap();
        assert_eq!(cx.g.value(l).item(), 0.0);
        let mu = cx.g.constant(modes(1, 3, |_, _| [0.0, 1.0]));
        let b = cx.g.constant(Tensor::full(&[1, 3, 2], 1.0));
        let l = laplace_nll(&mut cx, &gt, mu, b, 0).unwrap();
        // two coordinates each log 2 + 1
        assert!((cx.g.value(l).item() - 2.0 * (2f64.ln() + 1.0)).abs() < 1e-15);
        let bad = cx.g.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(laplace_nll(&mut cx, &gt, mu, bad, 0).is_err());
    }

    /// Direct density evaluation, independent of the graph.
    fn mixture_direct(pi: &[f64], gt: &[[f64; 2]], mu: &Tensor, b: &Tensor) -> f64 {
        let t = gt.len();
        let mut dens = 0.0;
        for (k, &p) in pi.iter().enumerate() {
            let mut logd = 0.0;
            for (i, g) in gt.iter().enumerate() {
                for c in 0..2 {
                    let m = mu.at(&[k, i, c]);
                    let s = b.at(&[k, i, c]);
                    logd += (1.0 / (2.0 * s) * (-(g[c] - m).abs() / s).exp()).ln();
                }
            }
            dens += p * (logd / t as f64).exp();
        }
        -dens.ln()
    }

    #[test]
    fn mixture_matches_direct_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (k, t) = (rng.gen_range(1..7), rng.gen_range(1..10));
            let gt: Vec<[f64; 2]> = (0..t).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
            let mu = Tensor::uniform(&[k, t, 2], 2.0, &mut rng);
            let b = Tensor::uniform(&[k, t, 2], 0.5, &mut rng).map(|v| v + 0.8);
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let pi: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            let store = ParamStore::new();
            let mut cx = Ctx::new(&store, false);
            let lp = cx.g.constant(Tensor::from_vec(pi.iter().map(|p| p.ln()).collect()));
            let (m, s) = (cx.g.constant(mu.clone()), cx.g.constant(b.clone()));
            let l = classification_loss(&mut cx, lp, &gt, m, s).unwrap();
            let want = mixture_direct(&pi, &gt, &mu, &b);
            assert!((cx.g.value(l).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_identities_and_stopped_gradients() {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store, false);
        let gt = vec![[0.3, -0.2], [0.5, 0.1]];
        let single = modes(1, 2, |_, i| [0.1 * i as f64, 0.0]);
        let scale = Tensor::full(&[1, 2, 2], 0.7);
        let mu = cx.g.leaf(single.clone(), true);
        let b = cx.g.leaf(scale.clone(), true);
        let lp = cx.g.leaf(Tensor::from_vec(vec![0.0]), true);
        let cls = classification_loss(&mut cx, lp, &gt, mu, b).unwrap();
        let nll = laplace_nll(&mut cx, &gt, mu, b, 0).unwrap();
        assert!((cx.g.value(cls).item() - cx.g.value(nll).item()).abs() < 1e-15);
        cx.g.backward(cls).unwrap();
        assert!(cx.g.grad(mu).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(cx.g.grad(b).unwrap().data().iter().all(|&v| v == 0.0));
        assert_ne!(cx.g.grad(lp).unwrap().data()[0], 0.0);

        let two = modes(2, 2, |_, i| [0.1 * i as f64, 0.0]);
        let mu2 = cx.g.constant(two);
        let b2 = cx.g.constant(Tensor::full(&[2, 2, 2], 0.7));
        let half = cx.g.constant(Tensor::from_vec(vec![0.5f64.ln(); 2]));
        let cls2 = classification_loss(&mut cx, half, &gt, mu2, b2).unwrap();
        assert!((cx.g.value(cls2).item() - cx.g.value(nll).item()).abs() < 1e-12);
    }

    #[test]
    fn laplace_minimized_at_absolute_error() {
        let gt = vec![[1.0, 0.0]];
        let f = |bv: f64| {
            let store = ParamStore::new();
            let mut cx = Ctx::new(&store, false);
            let mu = cx.g.constant(modes(1, 1, |_, _| [0.4, 0.0]));
            let b = cx.g.constant(Tensor::new(vec![1, 1, 2], vec![bv, 1.0]).unwrap());
            let l = laplace_nll(&mut cx, &gt, mu, b, 0).unwrap();
            cx.g.value(l).item()
        };
        let h = 1e-4;
        assert!(f(0.6) < f(0.6 - h) && f(0.6) < f(0.6 + h));
        assert!(f(0.5) > f(0.5 + h));
        assert!(f(0.7) > f(0.7 - h));
    }

    #[test]
    fn batch_total_and_csv() {
        let r = |p, rf, c| LossReport {
            proposal: p,
            refine: rf,
            cls: c,
            total: 0.0,
            winner: 0,
        };
        let t = total_loss(&[r(1.0, 2.0, 3.0)], 0.5).unwrap();
        assert_eq!(t.total, 4.5);
        let t = total_loss(&[r(1.0, 2.0, 3.0), r(3.0, 0.0, 1.0)], 0.0).unwrap();
        assert_eq!(t.total, 3.0);
        assert!(total_loss(&[], 1.0).is_err());
        let mut log = TrainingLog::default();
        log.push(0, 3, r(1.0, 2.0, 3.0), 1e-3);
        assert_eq!(log.to_csv(), format!("{}\n0,3,1.0,2.0,3.0,0.0,0.001\n", TrainingLog::HEADER));
    }
}
