// Acceptance suite. Runs every criterion in one sequential test so the timing
// benchmark is not disturbed by sibling tests, and prints one line per
// criterion:
//
//     cargo test -p tamba-core --test acceptance -- --nocapture

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};
use tamba_core::block::{block_flops, BlockDims};
use tamba_core::config::{BlockKind, ModelConfig};
use tamba_core::embedding::AGENT_RAW;
use tamba_core::gradcheck::{check_params, GradCheckOptions};
use tamba_core::harness::{self, benchmark_scaling};
use tamba_core::metrics::{b_min_fde, min_ade, min_fde, miss_rate, Forecast};
use tamba_core::model::{Model, ScenarioSize};
use tamba_core::objective::{classification_loss, laplace_nll, proposal_loss, LossConfig};
use tamba_core::scenario::{Category, FrameTransform, Scenario};
use tamba_core::synth::{generate_labeled, GeneratorSpec, Motif};
use tamba_core::train::{train, BenchConfig, DataSource, RunConfig};
use tamba_core::{Ctx, Graph, ParamStore, Tensor};

// ---- pinned tolerances and budgets -----------------------------------------

const SCAN_TOL: f64 = 1e-12;
const SCAN_INSTANCES: usize = 200;
const SCAN_BUDGET: Duration = Duration::from_secs(10);
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-3;
const FD_SAMPLES_PER_TENSOR: usize = 8;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const METRIC_TOL: f64 = 1e-12;
const METRIC_SETS: usize = 1000;
const NLL_TOL: f64 = 1e-12;
const SSM_SLOPE: (f64, f64) = (0.8, 1.3);
const ATTENTION_SLOPE_MIN: f64 = 1.7;
const BENCH_BUDGET: Duration = Duration::from_secs(300);
const SMOKE_IMPROVEMENT: f64 = 0.5;
const SMOKE_BUDGET: Duration = Duration::from_secs(1200);
const EQUIVARIANCE_TOL: f64 = 1e-6;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn tiny(modes: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        m: 8,
        p: 8,
        n_state: 4,
        d_ff: 16,
        depth: 1,
        modes,
        observed: 6,
        future: 5,
        scorer_hidden: 6,
        max_len: 16,
        ..ModelConfig::default()
    }
}

fn tiny_spec() -> GeneratorSpec {
    GeneratorSpec {
        observed: 6,
        future: 5,
        ..GeneratorSpec::default()
    }
}

// ---- 1 ---------------------------------------------------------------------

fn naive_scan(u: &[f64], a: &[f64], b: &[f64], c: &[f64], d: &[f64], len: usize, n: usize, m: usize, p: usize) -> Vec<f64> {
    let mut h = vec![0.0; n];
    let mut y = Vec::with_capacity(len * p);
    for t in 0..len {
        let ut = &u[t * m..(t + 1) * m];
        for o in 0..p {
            let mut acc = 0.0;
            for i in 0..n {
                acc += c[t * p * n + o * n + i] * h[i];
            }
            for j in 0..m {
                acc += d[t * p * m + o * m + j] * ut[j];
            }
            y.push(acc);
        }
        h = (0..n)
            .map(|i| a[t * n + i] * h[i] + (0..m).map(|j| b[t * n * m + i * m + j] * ut[j]).sum::<f64>())
            .collect();
    }
    y
}

fn scan_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..SCAN_INSTANCES {
        let (len, n, m, p) = (
            rng.gen_range(1..=64),
            rng.gen_range(1..=8),
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
        );
        let mut draw = |w: usize, lo: f64, hi: f64| -> Vec<f64> { (0..len * w).map(|_| rng.gen_range(lo..hi)).collect() };
        let (u, a, b, c, d) = (draw(m, -1.0, 1.0), draw(n, 0.0, 1.0), draw(n * m, -1.0, 1.0), draw(p * n, -1.0, 1.0), draw(p * m, -1.0, 1.0));
        let mut g = Graph::new();
        let t = |v: &Vec<f64>, w: usize| Tensor::new(vec![1, len, w], v.clone()).unwrap();
        let vars = [t(&u, m), t(&a, n), t(&b, n * m), t(&c, p * n), t(&d, p * m)].map(|x| g.constant(x));
        let h0 = g.constant(Tensor::zeros(&[1, n]));
        let y = g
            .selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], h0, n, p)
            .map_err(|e| e.to_string())?;
        let want = naive_scan(&u, &a, &b, &c, &d, len, n, m, p);
        for (x, w) in g.value(y).data().iter().zip(&want) {
            worst = worst.max((x - w).abs());
        }
    }
    let took = start.elapsed();
    ensure(worst <= SCAN_TOL, format!("max |Δ| = {worst:e} > {SCAN_TOL:e}"))?;
    ensure(took < SCAN_BUDGET, format!("took {took:?}"))?;
    Ok(format!("{SCAN_INSTANCES} instances, max |Δ| = {worst:.1e} (tol {SCAN_TOL:e}), {took:.1?}"))
}

// ---- 2 ---------------------------------------------------------------------

/// Ego vehicle plus a crossing pedestrian; one lane and one traffic light.
fn two_by_two() -> Scenario {
    let spec = GeneratorSpec {
        motifs: vec![Motif::PedestrianCrossing],
        extra_vehicles: 0,
        ..tiny_spec()
    };
    let mut s = generate_labeled(7, &spec).unwrap();
    s.agents.retain(|a| a.id == "ego" || a.category == Category::Pedestrian);
    let lane = s.map.iter().position(|p| p.category == Category::Lane).unwrap();
    let light = s.map.iter().position(|p| p.category == Category::TrafficLight).unwrap();
    s.map = vec![s.map[lane].clone(), s.map[light].clone()];
    s.target_ids = vec!["ego".into()];
    s.validate().unwrap();
    assert_eq!((s.agents.len(), s.map.len()), (2, 2));
    s
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let sc = two_by_two();
    let gt = sc.ground_truth.as_ref().unwrap()["ego"].clone();
    let opts = GradCheckOptions {
        h: FD_STEP,
        tol: FD_REL_TOL,
        floor: FD_FLOOR,
        max_per_input: Some(FD_SAMPLES_PER_TENSOR),
        seed: 3,
    };
    let mut worst = 0.0f64;
    let mut tensors = 0;
    for block in BlockKind::ALL {
        for joint in [true, false] {
            let cfg = ModelConfig { block, joint, ..tiny(3) };
            let (model, mut store) = Model::build(&cfg, 11).map_err(|e| e.to_string())?;
            // move off the initial point: the zeroed refinement head would
            // otherwise hide every gradient behind it
            let mut rng = ChaCha8Rng::seed_from_u64(29);
            for t in store.tensors_mut() {
                for v in t.data_mut() {
                    *v += rng.gen_range(-0.1..0.1);
                }
            }
            let rep = check_params(
                &store,
                |cx| Ok(model.target_loss(cx, &sc, "ego", &gt, &LossConfig::default())?.total),
                &opts,
            )
            .map_err(|e| e.to_string())?;
            if !rep.passed {
                let (i, e) = rep
                    .max_rel_error
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap();
                return Err(format!("{block:?}/joint={joint}: {} rel err {e:e}", store.name(store.ids().nth(i).unwrap())));
            }
            worst = worst.max(rep.worst());
            tensors += store.len();
        }
    }
    let took = start.elapsed();
    ensure(took < GRAD_BUDGET, format!("took {took:?}"))?;
    Ok(format!(
        "L_total w.r.t. {tensors} parameter tensors over 6 variants (stopped values held fixed), worst rel err {worst:.1e} (h {FD_STEP:e}, tol {FD_REL_TOL:e}), {took:.1?}"
    ))
}

// ---- 3 ---------------------------------------------------------------------

fn zero_under(store: &ParamStore, grads: &[Tensor], prefix: &str) -> Result<usize, String> {
    let mut n = 0;
    for id in store.ids() {
        if store.name(id).starts_with(prefix) {
            if grads[id.index()].data().iter().any(|&v| v != 0.0) {
                return Err(format!("{} has a non-zero gradient", store.name(id)));
            }
            n += 1;
        }
    }
    ensure(n > 0, format!("no parameters under {prefix}"))?;
    Ok(n)
}

fn stop_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // direct: μ and b as leaves
    for _ in 0..50 {
        let (k, t) = (rng.gen_range(1..7), rng.gen_range(1..10));
        let mut g = Graph::new();
        let mu = g.leaf(Tensor::uniform(&[k, t, 2], 3.0, &mut rng), true);
        let b = g.leaf(Tensor::uniform(&[k, t, 2], 0.4, &mut rng).map(|v| v + 0.5), true);
        let lp = g.leaf(Tensor::uniform(&[k], 1.0, &mut rng), true);
        let gt: Vec<[f64; 2]> = (0..t).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
        let store = ParamStore::new();
        let mut cx = Ctx::from_parts(&store, g, &[]).map_err(|e| e.to_string())?;
        let l = classification_loss(&mut cx, lp, &gt, mu, b).map_err(|e| e.to_string())?;
        cx.g.backward(l).map_err(|e| e.to_string())?;
        ensure(
            cx.g.grad(mu).unwrap().max_abs() == 0.0 && cx.g.grad(b).unwrap().max_abs() == 0.0,
            "L_cls reached μ or b",
        )?;
        ensure(cx.g.grad(lp).unwrap().max_abs() > 0.0, "L_cls did not reach log π")?;
    }
    // end to end: refinement head under L_cls, proposal generator under L_refine
    let (mut n_cls, mut n_ref) = (0, 0);
    for seed in 0..4 {
        let (model, store) = Model::build(&tiny(3), seed).map_err(|e| e.to_string())?;
        let sc = generate_labeled(seed, &tiny_spec()).map_err(|e| e.to_string())?;
        let gt = sc.ground_truth.as_ref().unwrap()["ego"].clone();
        let grads_of = |pick: fn(&tamba_core::objective::TargetLoss) -> tamba_core::Var| -> Result<Vec<Tensor>, String> {
            let mut cx = Ctx::new(&store, true);
            let l = model
                .target_loss(&mut cx, &sc, "ego", &gt, &LossConfig::default())
                .map_err(|e| e.to_string())?;
            cx.backward(pick(&l)).map_err(|e| e.to_string())
        };
        n_cls = zero_under(&store, &grads_of(|l| l.cls)?, "refine.")?;
        n_ref = zero_under(&store, &grads_of(|l| l.refine)?, "decoder.")?;
    }
    Ok(format!(
        "∂L_cls/∂μ = ∂L_cls/∂b = 0 on 50 random instances; {n_cls} refine tensors exact-zero under L_cls; {n_ref} proposal tensors exact-zero under L_refine"
    ))
}

// ---- 4 ---------------------------------------------------------------------

fn wta_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let (k, t) = (rng.gen_range(2..7), rng.gen_range(1..10));
        let winner = rng.gen_range(0..k);
        let mut g = Graph::new();
        let prop = g.leaf(Tensor::uniform(&[k, t, 2], 3.0, &mut rng), true);
        let mu = g.leaf(Tensor::uniform(&[k, t, 2], 3.0, &mut rng), true);
        let b = g.leaf(Tensor::uniform(&[k, t, 2], 0.4, &mut rng).map(|v| v + 0.5), true);
        let gt: Vec<[f64; 2]> = (0..t).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
        let store = ParamStore::new();
        let mut cx = Ctx::from_parts(&store, g, &[]).map_err(|e| e.to_string())?;
        let lp = proposal_loss(&mut cx, prop, &gt, winner).map_err(|e| e.to_string())?;
        let lr = laplace_nll(&mut cx, &gt, mu, b, winner).map_err(|e| e.to_string())?;
        for (loss, v) in [(lp, prop), (lr, mu), (lr, b)] {
            cx.g.backward(loss).map_err(|e| e.to_string())?;
            let grad = cx.g.grad(v).unwrap();
            for m in 0..k {
                let row = &grad.data()[m * t * 2..(m + 1) * t * 2];
                let zero = row.iter().all(|&x| x == 0.0);
                ensure(if m == winner { !zero } else { zero }, format!("mode {m} (winner {winner}) zero={zero}"))?;
            }
        }
    }
    Ok("non-winner gradients exactly zero under L_proposal and L_refine on 200 random instances".into())
}

// ---- 5 ---------------------------------------------------------------------

struct Brute {
    ade: f64,
    fde: f64,
    bfde: f64,
    miss: bool,
}

/// Exhaustive evaluation over an explicitly enumerated top-K set.
fn brute(traj: &[Vec<[f64; 2]>], pi: &[f64], gt: &[[f64; 2]], k: usize) -> Brute {
    let mut order: Vec<usize> = (0..pi.len()).collect();
    // selection sort on (π desc, index asc)
    for i in 0..order.len() {
        let mut best = i;
        for j in i + 1..order.len() {
            let (a, b) = (order[j], order[best]);
            if pi[a] > pi[b] || (pi[a] == pi[b] && a < b) {
                best = j;
            }
        }
        order.swap(i, best);
    }
    let chosen = &order[..k];
    let err = |m: usize, t: usize| ((traj[m][t][0] - gt[t][0]).powi(2) + (traj[m][t][1] - gt[t][1]).powi(2)).sqrt();
    let last = gt.len() - 1;
    let mut ade = f64::INFINITY;
    let mut fde = f64::INFINITY;
    let mut arg = usize::MAX;
    for &m in chosen {
        let a = (0..gt.len()).map(|t| err(m, t)).sum::<f64>() / gt.len() as f64;
        ade = ade.min(a);
        let f = err(m, last);
        if f < fde || (f == fde && m < arg) {
            fde = f;
            arg = m;
        }
    }
    Brute {
        ade,
        fde,
        bfde: fde + (1.0 - pi[arg]) * (1.0 - pi[arg]),
        miss: fde > 2.0,
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut sets: Vec<(Vec<[f64; 2]>, Vec<f64>, Vec<[f64; 2]>)> = Vec::new();
    for _ in 0..METRIC_SETS {
        let t = rng.gen_range(1..15);
        let modes = 6;
        let traj: Vec<Vec<[f64; 2]>> = (0..modes)
            .map(|_| (0..t).map(|_| [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)]).collect())
            .collect();
        let mut pi: Vec<f64> = (0..modes).map(|_| rng.gen_range(0.0..1.0)).collect();
        if rng.gen_bool(0.2) {
            pi[1] = pi[0];
        }
        let s: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= s);
        let gt: Vec<[f64; 2]> = (0..t).map(|_| [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)]).collect();
        let flat: Vec<[f64; 2]> = traj.concat();
        let f = Forecast::new(&flat, &pi).unwrap();
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for k in 1..=modes {
            let b = brute(&traj, &pi, &gt, k);
            let got = (
                min_ade(&f, &gt, k).unwrap(),
                min_fde(&f, &gt, k).unwrap(),
                b_min_fde(&f, &gt, k).unwrap(),
            );
            worst = worst.max((got.0 - b.ade).abs()).max((got.1 - b.fde).abs()).max((got.2 - b.bfde).abs());
            ensure(got.0 <= prev.0 && got.1 <= prev.1, format!("not monotone in K at K={k}"))?;
            prev = (got.0, got.1);
        }
        sets.push((flat, pi, gt));
    }
    let batch: Vec<(Forecast, &[[f64; 2]])> = sets.iter().map(|(f, p, g)| (Forecast::new(f, p).unwrap(), &g[..])).collect();
    let mut mr = Vec::new();
    for k in [1, 6] {
        let got = miss_rate(&batch, k).unwrap();
        let want = sets
            .iter()
            .filter(|(f, p, g)| {
                let traj: Vec<Vec<[f64; 2]>> = f.chunks(g.len()).map(|c| c.to_vec()).collect();
                brute(&traj, p, g, k).miss
            })
            .count() as f64
            / sets.len() as f64;
        worst = worst.max((got - want).abs());
        mr.push(got);
    }
    ensure(worst <= METRIC_TOL, format!("max |Δ| = {worst:e}"))?;
    ensure(mr[0] >= mr[1], "MR_1 < MR_6")?;
    Ok(format!(
        "{METRIC_SETS} sets × K ∈ 1..=6, max |Δ| = {worst:.1e} (tol {METRIC_TOL:e}); monotone in K; MR_1 {:.3} ≥ MR_6 {:.3}",
        mr[0], mr[1]
    ))
}

// ---- 6 ---------------------------------------------------------------------

fn laplace_closed_form() -> Outcome {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // gt = μ, b = 1/2: every ln(2b) + |Δ|/b term vanishes
    let t = 7;
    let gt: Vec<[f64; 2]> = (0..t).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
    let mut cx = Ctx::new(&store, false);
    let mu = cx.g.constant(Tensor::new(vec![1, t, 2], gt.iter().flatten().copied().collect()).unwrap());
    let b = cx.g.constant(Tensor::full(&[1, t, 2], 0.5));
    let l = laplace_nll(&mut cx, &gt, mu, b, 0).map_err(|e| e.to_string())?;
    let zero = cx.g.value(l).item();
    ensure(zero == 0.0, format!("NLL at gt = μ, b = 0.5 is {zero:e}"))?;

    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (k, t) = (rng.gen_range(1..7), rng.gen_range(1..10));
        let mu_t = Tensor::uniform(&[k, t, 2], 2.0, &mut rng);
        let b_t = Tensor::uniform(&[k, t, 2], 0.5, &mut rng).map(|v| v + 0.8);
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
        let log_pi: Vec<f64> = logits.iter().map(|v| v - lse).collect();
        let gt: Vec<[f64; 2]> = (0..t).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let mut cx = Ctx::new(&store, false);
        let (mu, b) = (cx.g.constant(mu_t.clone()), cx.g.constant(b_t.clone()));
        let lp = cx.g.constant(Tensor::from_vec(log_pi.clone()));
        let l = classification_loss(&mut cx, lp, &gt, mu, b).map_err(|e| e.to_string())?;
        // direct density: Σ_k π_k Π_{t,c} Laplace(gt; μ, b)^{1/T}
        let mut mix = 0.0;
        for m in 0..k {
            let mut dens = 1.0;
            for (s, g) in gt.iter().enumerate() {
                for c in 0..2 {
                    let (mv, bv) = (mu_t.at(&[m, s, c]), b_t.at(&[m, s, c]));
                    dens *= ((-(g[c] - mv).abs() / bv).exp() / (2.0 * bv)).powf(1.0 / t as f64);
                }
            }
            mix += log_pi[m].exp() * dens;
        }
        ensure(mix > 1e-200, "direct density underflowed")?;
        worst = worst.max((cx.g.value(l).item() + mix.ln()).abs());
    }
    ensure(worst <= NLL_TOL, format!("max |Δ| = {worst:e}"))?;
    Ok(format!("NLL(gt = μ, b = 0.5) = 0; mixture log-sum-exp vs direct density max |Δ| = {worst:.1e} over 500 cases (tol {NLL_TOL:e})"))
}

// ---- 7 ---------------------------------------------------------------------

fn complexity() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig {
        bench: BenchConfig::default(),
        ..RunConfig::default()
    };
    let r = benchmark_scaling(&cfg).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    for row in &r.rows {
        let want = block_flops(row.block, BlockDims::from_config(&cfg.model), row.len);
        ensure(row.flops == want, "FLOP column disagrees with the estimator")?;
    }
    ensure(
        (SSM_SLOPE.0..=SSM_SLOPE.1).contains(&r.ssm_slope),
        format!("SSM slope {:.3}", r.ssm_slope),
    )?;
    ensure(
        r.attention_slope >= ATTENTION_SLOPE_MIN,
        format!("attention slope {:.3}", r.attention_slope),
    )?;
    ensure(took < BENCH_BUDGET, format!("took {took:?}"))?;
    Ok(format!(
        "L ∈ {:?}: SSM slope {:.3} ∈ [{}, {}], attention slope (L ≥ 512) {:.3} ≥ {ATTENTION_SLOPE_MIN}, {took:.1?}",
        cfg.bench.lengths, r.ssm_slope, SSM_SLOPE.0, SSM_SLOPE.1, r.attention_slope
    ))
}

// ---- 8 ---------------------------------------------------------------------

fn flop_estimator() -> Outcome {
    let mut checked = 0;
    for block in BlockKind::ALL {
        for joint in [true, false] {
            let cfg = ModelConfig { block, joint, ..tiny(3) };
            let (model, store) = Model::build(&cfg, 1).map_err(|e| e.to_string())?;
            for seed in 0..5 {
                let sc = generate_labeled(seed, &tiny_spec()).map_err(|e| e.to_string())?;
                for target in &sc.target_ids {
                    let mut cx = Ctx::new(&store, false);
                    model.forward_target(&mut cx, &sc, target).map_err(|e| e.to_string())?;
                    let (got, want) = (cx.g.flops(), model.flops(&ScenarioSize::of(&sc)));
                    ensure(got == want, format!("{block:?}: instrumented {got} vs estimate {want}"))?;
                    checked += 1;
                }
            }
        }
    }
    let dims = BlockDims::from_config(&ModelConfig::default());
    let f = |k, l| block_flops(k, dims, l) as f64;
    // L-dependent terms: linear part is f(L) for SSM; quadratic part isolated by
    // second differences for attention
    let ssm = f(BlockKind::Tamba, 512) / f(BlockKind::Tamba, 256);
    let quad = |l| f(BlockKind::Attention, l) - 2.0 * f(BlockKind::Attention, l / 2);
    let att = quad(1024) / quad(512);
    ensure(ssm == 2.0, format!("SSM ratio {ssm}"))?;
    ensure(att == 4.0, format!("attention quadratic-term ratio {att}"))?;
    Ok(format!("{checked} forward passes exact; L→2L: SSM ×{ssm}, attention L² term ×{att}"))
}

// ---- 9 ---------------------------------------------------------------------

fn desk_config() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            d: 16,
            m: 16,
            p: 16,
            n_state: 4,
            d_ff: 32,
            depth: 1,
            scorer_hidden: 16,
            ..ModelConfig::default()
        },
        data: DataSource::Synthetic {
            spec: GeneratorSpec::constant_velocity(),
            train: 512,
            val: 128,
        },
        epochs: 20,
        batch_size: 16,
        ..RunConfig::default()
    }
}

fn learning_smoke() -> Outcome {
    let start = Instant::now();
    let cfg = desk_config();
    let (tr, val) = cfg.load_data().map_err(|e| e.to_string())?;
    let items = val.items();
    let baseline = items
        .iter()
        .map(|it| {
            let p = val.scenarios[it.scene].agent(&it.target).unwrap().last().position;
            it.gt.iter().map(|g| (g[0] - p[0]).hypot(g[1] - p[1])).sum::<f64>() / it.gt.len() as f64
        })
        .sum::<f64>()
        / items.len() as f64;
    let out = train(&cfg, &tr, &val).map_err(|e| e.to_string())?;
    let model = Model::for_checkpoint(&cfg.model, &out.best).map_err(|e| e.to_string())?;
    let eval = harness::evaluate(&harness::Trained { model: &model, store: &out.best }, &val, cfg.execution)
        .map_err(|e| e.to_string())?;
    let got = eval.report.k6.min_ade;
    let took = start.elapsed();
    ensure(got <= (1.0 - SMOKE_IMPROVEMENT) * baseline, format!("minADE_6 {got:.3} vs baseline {baseline:.3}"))?;
    ensure(took < SMOKE_BUDGET, format!("took {took:?}"))?;
    Ok(format!(
        "512 scenes × 20 epochs: val minADE_6 {got:.3} vs constant-position {baseline:.3} ({:.0}% lower), {took:.1?}",
        100.0 * (1.0 - got / baseline)
    ))
}

// ---- 10 --------------------------------------------------------------------

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

/// Mixer parameters of one encoder block; norms and feed-forward are shared
/// by all kinds.
fn mixer_params(kind: BlockKind, c: &ModelConfig) -> usize {
    let (d, m, p, n, w) = (c.d, c.m, c.p, c.n_state, c.conv_width);
    match kind {
        BlockKind::Attention => 3 * linear(d, m) + linear(m, d),
        BlockKind::Mamba => linear(d, m) + w * m + m + n + n * m + p * n + p * m + linear(p, d),
        BlockKind::Tamba => {
            linear(d, m) + w * m + m + linear(m, n) + linear(m, n * m) + linear(m, p * n) + linear(m, p * m) + linear(p, d)
        }
    }
}

/// Joint minus separate: one shared embedder plus the fusion layer replace two
/// per-category embedders.
fn joint_delta(c: &ModelConfig) -> i64 {
    let d = c.d;
    let embedder = linear(AGENT_RAW, d) + 2 * d + linear(d, d) + 2 * d;
    let fusion = linear(2 * d, d) + 2 * d;
    fusion as i64 - embedder as i64
}

fn ablation_protocol() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig {
        model: tiny(6),
        data: DataSource::Synthetic {
            spec: tiny_spec(),
            train: 8,
            val: 4,
        },
        epochs: 1,
        batch_size: 4,
        ..RunConfig::default()
    };
    let (tr, val) = cfg.load_data().map_err(|e| e.to_string())?;
    let rows = harness::ablate(&cfg, &tr, &val).map_err(|e| e.to_string())?;
    let csv = harness::ablation_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    ensure(lines.len() == 7, "expected header + 6 rows")?;
    let metric_cols: Vec<&str> = lines[0].split(',').filter(|h| h.starts_with("min")).collect();
    ensure(metric_cols == ["minFDE_6", "minADE_6", "minFDE_1", "minADE_1"], "metric columns")?;
    for l in &lines[1..] {
        let vals: Vec<f64> = l.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
        ensure(vals.len() == 4 && vals.iter().all(|v| v.is_finite()), format!("bad row {l}"))?;
    }
    let params = |b: BlockKind, j: bool| rows.iter().find(|r| r.block == b && r.joint == j).unwrap().params as i64;
    let blocks = 3 * cfg.model.depth as i64;
    for j in [true, false] {
        for (a, b) in [(BlockKind::Tamba, BlockKind::Mamba), (BlockKind::Tamba, BlockKind::Attention)] {
            let want = blocks * (mixer_params(a, &cfg.model) as i64 - mixer_params(b, &cfg.model) as i64);
            let got = params(a, j) - params(b, j);
            ensure(got == want, format!("{a:?} - {b:?}: {got} vs documented {want}"))?;
        }
    }
    for b in BlockKind::ALL {
        let got = params(b, true) - params(b, false);
        ensure(got == joint_delta(&cfg.model), format!("{b:?} joint delta {got}"))?;
    }
    Ok(format!(
        "3×2 grid complete, 4 metric columns per cell; block deltas = 3·depth × mixer delta, joint delta = {} exactly, {:.1?}",
        joint_delta(&cfg.model),
        start.elapsed()
    ))
}

// ---- 11 --------------------------------------------------------------------

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let cfg = RunConfig {
        model: tiny(6),
        data: DataSource::Synthetic {
            spec: tiny_spec(),
            train: 12,
            val: 4,
        },
        epochs: 2,
        batch_size: 4,
        seed: 21,
        ..RunConfig::default()
    };
    let run = || -> Result<Vec<(String, Vec<u8>)>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let e = |e: tamba_core::Error| e.to_string();
        harness::run_train(&cfg, dir.path()).map_err(e)?;
        harness::run_evaluate(&cfg, &dir.path().join(harness::CHECKPOINT_FILE), dir.path()).map_err(e)?;
        harness::export_splits(&cfg, &dir.path().join("scenes")).map_err(e)?;
        Ok(files(dir.path()))
    };
    let (a, b) = (run()?, run()?);
    ensure(a.len() == b.len(), "different file sets")?;
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        ensure(na == nb && ba == bb, format!("{na} differs"))?;
    }
    Ok(format!("two runs wrote {} byte-identical files (checkpoint, logs, report, predictions, scenes)", a.len()))
}

// ---- 12 --------------------------------------------------------------------

fn equivariance() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut cases = 0;
    for block in BlockKind::ALL {
        let cfg = ModelConfig { block, ..tiny(6) };
        let (model, store) = Model::build(&cfg, 4).map_err(|e| e.to_string())?;
        for seed in 0..6 {
            let sc = generate_labeled(seed, &tiny_spec()).map_err(|e| e.to_string())?;
            let tf = FrameTransform {
                origin: [rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)],
                heading: rng.gen_range(-3.1..3.1),
            };
            let moved = sc.transformed(&tf);
            for target in &sc.target_ids {
                let a = model.predict(&store, &sc, target).map_err(|e| e.to_string())?;
                let b = model.predict(&store, &moved, target).map_err(|e| e.to_string())?;
                for (p, q) in a.mu.iter().chain(&a.proposals).zip(b.mu.iter().chain(&b.proposals)) {
                    let p = tf.apply_point(*p);
                    worst = worst.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs());
                }
                for (x, y) in a.pi.iter().chain(a.b.iter().flatten()).zip(b.pi.iter().chain(b.b.iter().flatten())) {
                    worst = worst.max((x - y).abs());
                }
                cases += 1;
            }
        }
    }
    ensure(worst <= EQUIVARIANCE_TOL, format!("max deviation {worst:e}"))?;
    Ok(format!("{cases} targets under random rigid motions: max deviation {worst:.1e} (tol {EQUIVARIANCE_TOL:e})"))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("scan oracle", scan_oracle),
        ("gradient suite", gradient_suite),
        ("stop-gradient contracts", stop_gradients),
        ("winner-takes-all contract", wta_contract),
        ("metric oracle", metric_oracle),
        ("Laplace NLL closed form", laplace_closed_form),
        ("complexity claim", complexity),
        ("FLOP estimator", flop_estimator),
        ("learning smoke test", learning_smoke),
        ("ablation protocol", ablation_protocol),
        ("determinism", determinism),
        ("equivariance", equivariance),
    ];
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_deref().is_some_and(|o| o.split(',').all(|x| x.trim() != n.to_string())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(msg) => println!("PASS {n:>2} {name}: {msg}"),
            Err(msg) => {
                println!("FAIL {n:>2} {name}: {msg}");
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
