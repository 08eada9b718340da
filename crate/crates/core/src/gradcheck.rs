//! Central finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor: error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            max_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per input, in input order.
    pub max_rel_error: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    Ok(g.value(out).item())
}

/// Analytic gradients of `f` at `inputs`, via the tape.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let value = g.value(out).item();
    let grads = vars.iter().map(|&v| g.grad(v).expect("leaf grad")).collect();
    Ok((value, grads))
}

/// Compares tape gradients of a scalar function against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if opts.h <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let (v1, analytic) = analytic_grads(&f, inputs)?;
    let v2 = eval(&f, inputs)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {v1} vs {v2}"
        )));
    }
    let numeric = numeric_grads(&f, inputs, &analytic, opts)?;
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    for (idx, checks) in numeric.iter().enumerate() {
        let worst = checks
            .iter()
            .map(|&(j, n)| rel_error(analytic[idx].data()[j], n, opts.floor))
            .fold(0.0, f64::max);
        max_rel_error.push(worst);
    }
    let passed = max_rel_error.iter().all(|&e| e < opts.tol);
    Ok(GradCheckReport {
        max_rel_error,
        analytic,
        tol: opts.tol,
        passed,
    })
}

/// Checks supplied analytic gradients (possibly wrong) against central
/// differences of `f`.
pub fn check_against<F>(
    f: F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let numeric = numeric_grads(&f, inputs, analytic, opts)?;
    let max_rel_error: Vec<f64> = numeric
        .iter()
        .enumerate()
        .map(|(idx, checks)| {
            checks
                .iter()
                .map(|&(j, n)| rel_error(analytic[idx].data()[j], n, opts.floor))
                .fold(0.0, f64::max)
        })
        .collect();
    let passed = max_rel_error.iter().all(|&e| e < opts.tol);
    Ok(GradCheckReport {
        max_rel_error,
        analytic: analytic.to_vec(),
        tol: opts.tol,
        passed,
    })
}

fn numeric_grads<F>(
    f: &F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<Vec<Vec<(usize, f64)>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for idx in 0..inputs.len() {
        let n = inputs[idx].len();
        debug_assert_eq!(analytic[idx].len(), n);
        let picks: Vec<usize> = match opts.max_per_input {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut checks = Vec::with_capacity(picks.len());
        for j in picks {
            let x0 = work[idx].data()[j];
            work[idx].data_mut()[j] = x0 + opts.h;
            let fp = eval(f, &work)?;
            work[idx].data_mut()[j] = x0 - opts.h;
            let fm = eval(f, &work)?;
            work[idx].data_mut()[j] = x0;
            checks.push((j, (fp - fm) / (2.0 * opts.h)));
        }
        out.push(checks);
    }
    Ok(out)
}

/// Gradient check of a parameterised forward pass with respect to every
/// tensor in `store`. Outputs of `stop_gradient` are frozen at their values at
/// the unperturbed point, so the differences see the same function the tape
/// differentiates.
pub fn check_params<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let run = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let tape = std::mem::take(g);
        let mut cx = Ctx::from_parts(store, tape, vars)?;
        let out = f(&mut cx);
        *g = cx.g;
        out
    };
    let mut base = Graph::new();
    base.record_stop_values();
    let vars: Vec<Var> = inputs.iter().map(|t| base.constant(t.clone())).collect();
    run(&mut base, &vars)?;
    let frozen = base.take_stop_values();
    grad_check(
        |g: &mut Graph, vars: &[Var]| {
            g.freeze_stop_values(frozen.clone());
            run(g, vars)
        },
        &inputs,
        opts,
    )
}
