//! Policy optimizers: direct and iterative amortization, plus gradient-ascent
//! and cross-entropy baselines, all maximizing `J(lambda; s)`.
//!
//! Every optimizer works on a batch of states at once. `lambda` rows are laid
//! out as `[mu, log sigma]`, each `|A|` wide.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Graph, ParamStore, Var};
use crate::distributions::{PolicyParams, Squash, LOG_SIGMA_MAX, LOG_SIGMA_MIN};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, CsvTable};
use crate::networks::{DirectPolicyNet, IterativePolicyNet};
use crate::objective::{j_and_grad_batch, j_batch, objective_on_graph, sample_noise, ActionValue, ObjectiveConfig};
use crate::tensor::Tensor;

/// Iterative amortization settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterOptConfig {
    pub n_iterations: usize,
    /// Samples per inner gradient estimate.
    pub n_action_samples: usize,
}

impl Default for IterOptConfig {
    fn default() -> Self {
        IterOptConfig {
            n_iterations: 5,
            n_action_samples: 10,
        }
    }
}

impl IterOptConfig {
    pub fn with_iterations(self, n_iterations: usize) -> Self {
        IterOptConfig { n_iterations, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 || self.n_action_samples == 0 {
            return Err(Error::Config("iterative.n_iterations and iterative.n_action_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// `mu = 0, sigma = 1` for every row.
pub fn initial_lambdas(rows: usize, action_dim: usize) -> Tensor {
    Tensor::zeros(&[rows, 2 * action_dim])
}

/// `omega * lambda + (1 - omega) * delta`, elementwise.
pub fn gated_update_flat(lambda: &[f64], omega: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    if lambda.len() != omega.len() || lambda.len() != delta.len() {
        return Err(Error::InvalidArgument(format!(
            "gated update lengths differ: lambda {}, omega {}, delta {}",
            lambda.len(),
            omega.len(),
            delta.len()
        )));
    }
    Ok(lambda
        .iter()
        .zip(omega)
        .zip(delta)
        .map(|((&l, &w), &d)| {
            let v = w * l + (1.0 - w) * d;
            // rounding may push the sum a hair outside its endpoints
            v.clamp(l.min(d), l.max(d))
        })
        .collect())
}

/// Gated update in `(mu, log sigma)` space.
pub fn gated_update(lambda: &PolicyParams, omega: &[f64], delta: &[f64]) -> Result<PolicyParams> {
    PolicyParams::from_flat(&gated_update_flat(&lambda.to_flat(), omega, delta)?)
}

pub fn gated_update_on_graph(g: &mut Graph, lambda: Var, omega: Var, delta: Var) -> Result<Var> {
    let kept = g.mul(omega, lambda)?;
    let neg = g.neg(omega)?;
    let rest = g.add_scalar(neg, 1.0)?;
    let moved = g.mul(rest, delta)?;
    g.add(kept, moved)
}

/// Per-iteration distribution parameters and objective values for a batch.
///
/// Entry 0 is the starting point, before any update; entry `k` follows the
/// `k`-th update. Objective values use one fixed noise draw per call, so
/// entries are comparable with each other.
#[derive(Clone, Debug, Default)]
pub struct OptimizeTrace {
    pub lambdas: Vec<Tensor>,
    /// `j[k][i]`: objective of state `i` after `k` updates.
    pub j: Vec<Vec<f64>>,
    pub wall_ns: Vec<u64>,
}

impl OptimizeTrace {
    fn push(&mut self, lambdas: Tensor, j: Vec<f64>, started: Instant) -> Result<()> {
        if let Some(bad) = j.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "objective of state {bad} at iteration {}",
                self.j.len()
            )));
        }
        self.lambdas.push(lambdas);
        self.j.push(j);
        self.wall_ns.push(started.elapsed().as_nanos() as u64);
        Ok(())
    }

    /// Number of recorded entries.
    pub fn len(&self) -> usize {
        self.j.len()
    }

    pub fn is_empty(&self) -> bool {
        self.j.is_empty()
    }

    pub fn final_lambdas(&self) -> &Tensor {
        self.lambdas.last().expect("trace is never empty")
    }

    pub fn final_params(&self, state: usize) -> Result<PolicyParams> {
        PolicyParams::from_flat(self.final_lambdas().row_slice(state))
    }

    pub fn curve(&self, state: usize) -> Vec<f64> {
        self.j.iter().map(|row| row[state]).collect()
    }

    pub fn best_so_far(&self, state: usize) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.curve(state)
            .into_iter()
            .map(|v| {
                best = best.max(v);
                best
            })
            .collect()
    }

    /// Mean over states at each entry.
    pub fn mean_curve(&self) -> Vec<f64> {
        self.j.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect()
    }

    /// Mean over states of the best-so-far value at each entry.
    pub fn mean_best_curve(&self) -> Vec<f64> {
        let rows = self.j.first().map_or(0, Vec::len);
        let per_state: Vec<Vec<f64>> = (0..rows).map(|i| self.best_so_far(i)).collect();
        (0..self.len())
            .map(|k| per_state.iter().map(|c| c[k]).sum::<f64>() / rows as f64)
            .collect()
    }

    /// Mean `J_last - J_first` over states.
    pub fn mean_improvement(&self) -> f64 {
        let c = self.mean_curve();
        c.last().copied().unwrap_or(0.0) - c.first().copied().unwrap_or(0.0)
    }

    /// CSV with columns `iteration, mean_J, mean_best_J, wall_clock_ns`.
    /// Iteration 0 is the starting point.
    pub fn to_csv(&self, with_wall_clock: bool) -> Result<CsvTable> {
        let mut t = CsvTable::new(&["iteration", "mean_J", "mean_best_J", "wall_clock_ns"])?;
        for (k, (m, b)) in self.mean_curve().iter().zip(self.mean_best_curve()).enumerate() {
            let wall = if with_wall_clock { self.wall_ns[k] } else { 0 };
            t.row(&[k.to_string(), fmt_f64(*m), fmt_f64(b), wall.to_string()])?;
        }
        Ok(t)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, with_wall_clock: bool) -> Result<()> {
        self.to_csv(with_wall_clock)?.write(path)
    }
}

/// Evaluates trace entries under one fixed noise draw.
struct Scorer<'a> {
    q: &'a dyn ActionValue,
    states: &'a Tensor,
    noise: Tensor,
    alpha: f64,
    beta: f64,
    squash: Squash,
}

impl<'a> Scorer<'a> {
    fn new(q: &'a dyn ActionValue, states: &'a Tensor, obj: &ObjectiveConfig, rng: &mut impl Rng) -> Self {
        Scorer {
            q,
            states,
            noise: obj.noise(rng, states.rows(), q.action_dim()),
            alpha: obj.alpha,
            beta: obj.beta_act,
            squash: obj.squash,
        }
    }

    fn score(&self, lambdas: &Tensor) -> Result<Vec<f64>> {
        j_batch(self.q, self.states, lambdas, &self.noise, self.alpha, self.beta, self.squash)
    }
}

fn check_lambdas(lambdas: &Tensor, what: &str) -> Result<()> {
    if !lambdas.all_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// `lambda = f(s)` for every row of `states`.
pub fn direct_lambdas(net: &DirectPolicyNet, states: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    g.freeze(&net.store);
    let s = g.input(states.clone());
    let pv = net.forward(&mut g, s)?;
    Tensor::concat_cols(&[g.value(pv.mu), g.value(pv.log_sigma)])
}

/// One forward pass; the trace holds a single entry.
pub fn optimize_direct(
    net: &DirectPolicyNet,
    states: &Tensor,
    q: &dyn ActionValue,
    obj: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<OptimizeTrace> {
    let started = Instant::now();
    let scorer = Scorer::new(q, states, obj, rng);
    let lam = direct_lambdas(net, states)?;
    let mut trace = OptimizeTrace::default();
    let j = scorer.score(&lam)?;
    trace.push(lam, j, started)?;
    Ok(trace)
}

/// `(delta, omega)` for a batch, with the network frozen.
fn iterative_step_values(
    net: &IterativePolicyNet,
    states: &Tensor,
    lambdas: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    g.freeze(&net.store);
    let s = g.input(states.clone());
    let l = g.input(lambdas.clone());
    let gr = g.input(grad.clone());
    let u = net.forward(&mut g, s, l, gr)?;
    Ok((g.value(u.delta).clone(), g.value(u.omega).clone()))
}

/// Iterative amortization from `mu = 0, sigma = 1`, with `beta_act` pessimism.
pub fn optimize_iterative(
    net: &IterativePolicyNet,
    states: &Tensor,
    q: &dyn ActionValue,
    cfg: &IterOptConfig,
    obj: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<OptimizeTrace> {
    let lam0 = initial_lambdas(states.rows(), net.action_dim);
    optimize_iterative_from(net, states, lam0, q, cfg, obj, rng)
}

/// As [`optimize_iterative`] from an explicit starting point.
pub fn optimize_iterative_from(
    net: &IterativePolicyNet,
    states: &Tensor,
    lambda0: Tensor,
    q: &dyn ActionValue,
    cfg: &IterOptConfig,
    obj: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<OptimizeTrace> {
    cfg.validate()?;
    let started = Instant::now();
    let scorer = Scorer::new(q, states, obj, rng);
    let adim = net.action_dim;
    let mut trace = OptimizeTrace::default();
    let mut lam = lambda0;
    trace.push(lam.clone(), scorer.score(&lam)?, started)?;
    for k in 0..cfg.n_iterations {
        let noise = sample_noise(rng, cfg.n_action_samples, states.rows(), adim);
        let (_, grad) = j_and_grad_batch(q, states, &lam, &noise, obj.alpha, obj.beta_act, obj.squash)?;
        let (delta, omega) = iterative_step_values(net, states, &lam, &grad)?;
        let next = gated_update_flat(lam.data(), omega.data(), delta.data())?;
        lam = Tensor::matrix(states.rows(), 2 * adim, next)?;
        check_lambdas(&lam, &format!("lambda at iteration {}", k + 1))?;
        trace.push(lam.clone(), scorer.score(&lam)?, started)?;
    }
    Ok(trace)
}

/// Final `lambda` of an iterative run without per-iteration scoring.
#[allow(clippy::too_many_arguments)]
pub fn iterative_lambdas(
    net: &IterativePolicyNet,
    states: &Tensor,
    q: &dyn ActionValue,
    cfg: &IterOptConfig,
    alpha: f64,
    beta: f64,
    squash: Squash,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let adim = net.action_dim;
    let mut lam = initial_lambdas(states.rows(), adim);
    for k in 0..cfg.n_iterations {
        let noise = sample_noise(rng, cfg.n_action_samples, states.rows(), adim);
        let (_, grad) = j_and_grad_batch(q, states, &lam, &noise, alpha, beta, squash)?;
        let (delta, omega) = iterative_step_values(net, states, &lam, &grad)?;
        let next = gated_update_flat(lam.data(), omega.data(), delta.data())?;
        lam = Tensor::matrix(states.rows(), 2 * adim, next)?;
        check_lambdas(&lam, &format!("lambda at iteration {}", k + 1))?;
    }
    Ok(lam)
}

/// Gradient ascent on `J` with Adam over `(mu, log sigma)`; fresh noise each step.
#[allow(clippy::too_many_arguments)]
pub fn optimize_adam(
    lambda0: &Tensor,
    states: &Tensor,
    q: &dyn ActionValue,
    obj: &ObjectiveConfig,
    steps: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<OptimizeTrace> {
    if steps == 0 {
        return Err(Error::InvalidArgument("optimize_adam needs at least one step".into()));
    }
    let started = Instant::now();
    let scorer = Scorer::new(q, states, obj, rng);
    let adim = lambda0.cols() / 2;
    let mut store = ParamStore::new();
    let idx = store.add("lambda", lambda0.clone())?;
    let adam = AdamConfig::with_lr(lr);
    let mut trace = OptimizeTrace::default();
    trace.push(lambda0.clone(), scorer.score(lambda0)?, started)?;
    for step in 0..steps {
        let noise = obj.noise(rng, states.rows(), adim);
        let (_, grad) = j_and_grad_batch(q, states, store.value(idx), &noise, obj.alpha, obj.beta_act, obj.squash)?;
        // ascent: descend on -J
        let neg = grad.map(|g| -g);
        let mut gg = Graph::new();
        let p = gg.param(&store, idx);
        let w = gg.input(neg);
        let prod = gg.mul(p, w)?;
        let lin = gg.sum(prod)?;
        gg.backward(lin)?.accumulate_into(&mut store);
        store.adam_step(&adam)?;
        let lam = store.value_mut(idx);
        if lam.max_abs() > 1e6 || !lam.all_finite() {
            return Err(Error::Divergence(format!("gradient ascent diverged at step {}", step + 1)));
        }
        clamp_log_sigma(lam, adim);
        let snapshot = lam.clone();
        let j = scorer.score(&snapshot)?;
        trace.push(snapshot, j, started)?;
    }
    Ok(trace)
}

fn clamp_log_sigma(lambdas: &mut Tensor, adim: usize) {
    let cols = 2 * adim;
    for (i, v) in lambdas.data_mut().iter_mut().enumerate() {
        if i % cols >= adim {
            *v = v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        }
    }
}

/// Cross-entropy method settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub steps: usize,
    pub population: usize,
    pub elite: usize,
    /// Interpolation factor toward the elite fit.
    pub step_size: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            steps: 50,
            population: 100,
            elite: 10,
            step_size: 0.01,
        }
    }
}

/// Floor on the standard deviation of an elite fit.
pub const CEM_SIGMA_FLOOR: f64 = 1e-3;

/// Elite mean and population standard deviation per dimension, in `(mu, log sigma)` form.
pub fn fit_elite(samples: &[&[f64]]) -> Vec<f64> {
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mut mu = vec![0.0; d];
    for s in samples {
        for (m, x) in mu.iter_mut().zip(s.iter()) {
            *m += x / n;
        }
    }
    let mut ls = vec![0.0; d];
    for (j, l) in ls.iter_mut().enumerate() {
        let var = samples.iter().map(|s| (s[j] - mu[j]).powi(2)).sum::<f64>() / n;
        *l = var.sqrt().max(CEM_SIGMA_FLOOR).ln();
    }
    mu.extend(ls);
    mu
}

/// Cross-entropy method: rank sampled actions by pessimistic `Q` minus the
/// temperature-weighted log-ratio, fit the elite set in pre-squash space and
/// move `lambda` a fraction `step_size` toward that fit.
pub fn optimize_cem(
    lambda0: &Tensor,
    states: &Tensor,
    q: &dyn ActionValue,
    obj: &ObjectiveConfig,
    cem: &CemConfig,
    rng: &mut impl Rng,
) -> Result<OptimizeTrace> {
    if cem.elite == 0 || cem.elite > cem.population {
        return Err(Error::InvalidArgument(format!(
            "cem elite {} must be in 1..={}",
            cem.elite, cem.population
        )));
    }
    let started = Instant::now();
    let scorer = Scorer::new(q, states, obj, rng);
    let rows = states.rows();
    let adim = lambda0.cols() / 2;
    let mut lam = lambda0.clone();
    let mut trace = OptimizeTrace::default();
    trace.push(lam.clone(), scorer.score(&lam)?, started)?;
    for _ in 0..cem.steps {
        let noise = sample_noise(rng, cem.population, rows, adim);
        let mut g = Graph::new();
        q.freeze(&mut g);
        let s = g.input(states.clone());
        let mu = g.input(lam.slice_cols(0, adim));
        let ls = g.input(lam.slice_cols(adim, adim));
        let o = objective_on_graph(&mut g, q, s, mu, ls, &noise, obj.alpha, obj.beta_act, obj.squash)?;
        let scores = g.value(o.per_sample).clone();
        let u = g.value(o.samples.u).clone();
        let mut next = Vec::with_capacity(lam.len());
        for i in 0..rows {
            let mut order: Vec<usize> = (0..cem.population).collect();
            order.sort_by(|&a, &b| scores.get(b, i).total_cmp(&scores.get(a, i)));
            let elite: Vec<&[f64]> = order[..cem.elite].iter().map(|&k| u.row_slice(k * rows + i)).collect();
            let fit = fit_elite(&elite);
            let cur = lam.row_slice(i);
            next.extend(cur.iter().zip(&fit).map(|(c, f)| c + cem.step_size * (f - c)));
        }
        lam = Tensor::matrix(rows, 2 * adim, next)?;
        check_lambdas(&lam, "cem lambda")?;
        trace.push(lam.clone(), scorer.score(&lam)?, started)?;
    }
    Ok(trace)
}

/// Iterative unroll recorded on a graph so the final `lambda` is
/// differentiable in the network parameters. Inner gradients enter as
/// constants.
pub struct Unroll {
    /// `[rows, 2|A|]` after the last update.
    pub lambda: Var,
    /// Inner estimate of `J` at the start point, per state.
    pub j_start: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn unroll_on_graph(
    g: &mut Graph,
    net: &IterativePolicyNet,
    q: &dyn ActionValue,
    s: Var,
    cfg: &IterOptConfig,
    alpha: f64,
    beta: f64,
    squash: Squash,
    rng: &mut impl Rng,
) -> Result<Unroll> {
    let states = g.value(s).clone();
    let rows = states.rows();
    let adim = net.action_dim;
    let mut lam = g.input(initial_lambdas(rows, adim));
    let mut j_start = Vec::new();
    for k in 0..cfg.n_iterations {
        let noise = sample_noise(rng, cfg.n_action_samples, rows, adim);
        let (j, grad) = j_and_grad_batch(q, &states, g.value(lam), &noise, alpha, beta, squash)?;
        if k == 0 {
            j_start = j;
        }
        let grad = g.input(grad);
        let u = net.forward(g, s, lam, grad)?;
        lam = gated_update_on_graph(g, lam, u.omega, u.delta)?;
        check_lambdas(g.value(lam), &format!("lambda at iteration {}", k + 1))?;
    }
    Ok(Unroll { lambda: lam, j_start })
}

/// Result of one amortized-optimizer training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitStats {
    /// Mean objective of the trained output under the loss noise.
    pub mean_j: f64,
    /// Mean improvement over the starting distribution (iterative only).
    pub improvement: f64,
    /// Mean action-space entropy estimate of the output, `-E log pi`.
    pub entropy: f64,
}

fn finish_fit(
    g: &mut Graph,
    store: &mut ParamStore,
    obj: crate::objective::ObjectiveVars,
    adam: &AdamConfig,
) -> Result<(f64, f64)> {
    let mean_j = g.mean(obj.j)?;
    let loss = g.neg(mean_j)?;
    let value = g.value(mean_j).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("policy objective".into()));
    }
    let entropy = -g.value(obj.samples.log_prob).data().iter().sum::<f64>() / g.value(obj.samples.log_prob).len() as f64;
    g.backward(loss)?.accumulate_into(store);
    store.adam_step(adam)?;
    Ok((value, entropy))
}

/// One Adam step of a direct network on `-mean_s J(f(s))`.
#[allow(clippy::too_many_arguments)]
pub fn fit_direct_step(
    net: &mut DirectPolicyNet,
    q: &dyn ActionValue,
    states: &Tensor,
    n_samples: usize,
    alpha: f64,
    beta: f64,
    squash: Squash,
    adam: &AdamConfig,
    rng: &mut impl Rng,
) -> Result<FitStats> {
    let mut g = Graph::new();
    q.freeze(&mut g);
    let s = g.input(states.clone());
    let pv = net.forward(&mut g, s)?;
    let noise = sample_noise(rng, n_samples, states.rows(), net.action_dim);
    let obj = objective_on_graph(&mut g, q, s, pv.mu, pv.log_sigma, &noise, alpha, beta, squash)?;
    let (mean_j, entropy) = finish_fit(&mut g, &mut net.store, obj, adam)?;
    Ok(FitStats {
        mean_j,
        improvement: 0.0,
        entropy,
    })
}

/// One Adam step of an iterative network through the full unroll.
#[allow(clippy::too_many_arguments)]
pub fn fit_iterative_step(
    net: &mut IterativePolicyNet,
    q: &dyn ActionValue,
    states: &Tensor,
    cfg: &IterOptConfig,
    alpha: f64,
    beta: f64,
    squash: Squash,
    adam: &AdamConfig,
    rng: &mut impl Rng,
) -> Result<FitStats> {
    let mut g = Graph::new();
    q.freeze(&mut g);
    let s = g.input(states.clone());
    let un = unroll_on_graph(&mut g, net, q, s, cfg, alpha, beta, squash, rng)?;
    let adim = net.action_dim;
    let mu = g.slice_cols(un.lambda, 0, adim)?;
    let ls = g.slice_cols(un.lambda, adim, adim)?;
    let noise = sample_noise(rng, cfg.n_action_samples, states.rows(), adim);
    let obj = objective_on_graph(&mut g, q, s, mu, ls, &noise, alpha, beta, squash)?;
    let start = un.j_start.iter().sum::<f64>() / un.j_start.len() as f64;
    let (mean_j, entropy) = finish_fit(&mut g, &mut net.store, obj, adam)?;
    Ok(FitStats {
        mean_j,
        improvement: mean_j - start,
        entropy,
    })
}
