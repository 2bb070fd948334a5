//! Diagnostics on frozen agents: amortization gap, value bias, mode
//! analysis, optimizer comparison and objective slices. Every report is a
//! pure function of the agent and a seed, and exports CSV.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::distributions::{PolicyParams, Squash};
use crate::envs::{EnvKind, EnvState, Policy};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic, CsvTable};
use crate::objective::{j_batch, sample_noise_antithetic, ActionValue, ObjectiveConfig};
use crate::optimizers::{initial_lambdas, optimize_adam, optimize_cem, CemConfig, IterOptConfig, OptimizeTrace};
use crate::plot;
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::training::{Agent, AgentPolicy, PolicyOptimizer};

/// An optimizer in a comparison run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareOptimizer {
    /// The agent's own policy optimizer.
    #[serde(alias = "iterative", alias = "direct")]
    Amortized,
    Adam,
    Cem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// States per diagnostic, drawn from fresh episodes of the current policy.
    pub n_states: usize,
    pub gap_lr: f64,
    pub gap_steps: usize,
    /// Iterations of an iterative optimizer at evaluation; training value when absent.
    pub eval_iterations: Option<usize>,
    pub compare_optimizers: Vec<CompareOptimizer>,
    pub compare_iterative_iterations: usize,
    pub adam_lr: f64,
    pub adam_iterations: usize,
    pub cem: CemConfig,
    pub mode_runs: usize,
    pub mode_bins: usize,
    pub bias_pairs: usize,
    pub bias_mc_samples: usize,
    pub slice_grid: usize,
    pub slice_dims: [usize; 2],
    /// Half-width of the slice grid over each mean coordinate.
    pub slice_range: f64,
    pub record_wall_clock: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_states: 100,
            gap_lr: 5e-3,
            gap_steps: 100,
            eval_iterations: None,
            compare_optimizers: vec![CompareOptimizer::Amortized, CompareOptimizer::Adam, CompareOptimizer::Cem],
            compare_iterative_iterations: 10,
            adam_lr: 0.01,
            adam_iterations: 50,
            cem: CemConfig::default(),
            mode_runs: 10,
            mode_bins: 20,
            bias_pairs: 100,
            bias_mc_samples: 100,
            slice_grid: 41,
            slice_dims: [0, 1],
            slice_range: 2.0,
            record_wall_clock: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slice_dims[0] == self.slice_dims[1] {
            return Err(Error::Config(format!(
                "eval.slice_dims must name two different action dimensions, got {:?}",
                self.slice_dims
            )));
        }
        let counts = [
            ("n_states", self.n_states),
            ("mode_runs", self.mode_runs),
            ("mode_bins", self.mode_bins),
            ("bias_pairs", self.bias_pairs),
            ("bias_mc_samples", self.bias_mc_samples),
            ("slice_grid", self.slice_grid),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("eval.{name} must be at least 1")));
        }
        if !(self.gap_lr > 0.0 && self.adam_lr > 0.0 && self.slice_range > 0.0) {
            return Err(Error::Config("eval.gap_lr, eval.adam_lr and eval.slice_range must be positive".into()));
        }
        if matches!(self.eval_iterations, Some(0)) {
            return Err(Error::Config("eval.eval_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Environment states with their observations stacked row-wise.
#[derive(Clone, Debug)]
pub struct StateSample {
    pub states: Vec<EnvState>,
    pub obs: Tensor,
}

/// `n` states spread evenly over fresh episodes of the agent's
/// exploration policy.
pub fn collect_states(agent: &Agent, cfg: &RunConfig, n: usize, rng: &mut impl Rng) -> Result<StateSample> {
    let env = agent.env;
    let horizon = env.spec().horizon;
    let episodes = n.div_ceil(horizon).max(1);
    let mut visited = Vec::with_capacity(episodes * horizon);
    for _ in 0..episodes {
        let mut state = env.reset(rng);
        loop {
            let obs = env.observe(&state);
            let a = agent.act(&obs, cfg, false, rng)?;
            let r = env.step(&state, &a.action)?;
            visited.push(state);
            if r.done {
                break;
            }
            state = r.next;
        }
    }
    let states: Vec<EnvState> = (0..n).map(|i| visited[i * visited.len() / n].clone()).collect();
    let obs = Tensor::from_rows(&states.iter().map(|s| env.observe(s)).collect::<Vec<_>>())?;
    Ok(StateSample { states, obs })
}

/// Amortized versus per-state optimized objective.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapReport {
    pub j_amortized: Vec<f64>,
    pub j_optimized: Vec<f64>,
    pub gap: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub optimizer: String,
    pub iterations: usize,
    pub lr: f64,
    pub steps: usize,
    /// Coordinates the refining optimizer moves in.
    pub parameterization: String,
}

impl GapReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut t = CsvTable::new(&["state", "J_amortized", "J_optimized", "gap"])?;
        for i in 0..self.gap.len() {
            t.row(&[i.to_string(), fmt_f64(self.j_amortized[i]), fmt_f64(self.j_optimized[i]), fmt_f64(self.gap[i])])?;
        }
        t.into_bytes()
    }
}

/// Refines `lambdas` with Adam and reports the best-so-far improvement,
/// both ends measured under the same noise.
pub fn gap_from_lambdas(
    lambdas: &Tensor,
    states: &Tensor,
    q: &dyn ActionValue,
    obj: &ObjectiveConfig,
    lr: f64,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<GapReport> {
    let trace = optimize_adam(lambdas, states, q, obj, steps, lr, rng)?;
    let j_amortized = trace.j[0].clone();
    let j_optimized: Vec<f64> = (0..states.rows()).map(|i| *trace.best_so_far(i).last().unwrap_or(&f64::NAN)).collect();
    let gap: Vec<f64> = j_optimized.iter().zip(&j_amortized).map(|(o, a)| o - a).collect();
    let (mean, std) = mean_std(&gap);
    Ok(GapReport {
        j_amortized,
        j_optimized,
        gap,
        mean,
        std,
        optimizer: String::new(),
        iterations: 0,
        lr,
        steps,
        parameterization: "mu, log sigma".into(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn amortization_gap(
    policy: &PolicyOptimizer,
    q: &dyn ActionValue,
    states: &Tensor,
    iter: &IterOptConfig,
    obj: &ObjectiveConfig,
    lr: f64,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<GapReport> {
    let trace = policy.optimize(states, q, iter, obj, rng)?;
    let mut report = gap_from_lambdas(trace.final_lambdas(), states, q, obj, lr, steps, rng)?;
    report.optimizer = policy.kind().name().to_string();
    report.iterations = trace.len() - 1;
    Ok(report)
}

/// Critic estimates against Monte-Carlo soft returns.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasReport {
    pub q_estimate: Vec<f64>,
    pub mc_return: Vec<f64>,
    pub mc_se: Vec<f64>,
    pub bias: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl BiasReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut t = CsvTable::new(&["pair", "Q_estimate", "mc_return", "mc_se", "bias"])?;
        for i in 0..self.bias.len() {
            t.row(&[
                i.to_string(),
                fmt_f64(self.q_estimate[i]),
                fmt_f64(self.mc_return[i]),
                fmt_f64(self.mc_se[i]),
                fmt_f64(self.bias[i]),
            ])?;
        }
        t.into_bytes()
    }
}

/// `Q_pess(s, a; beta = 1) - MC(s, a)` per pair; the Monte-Carlo return
/// follows `policy` after the first action.
#[allow(clippy::too_many_arguments)]
pub fn value_bias(
    env: EnvKind,
    q: &dyn ActionValue,
    policy: &mut dyn Policy,
    pairs: &[(EnvState, Vec<f64>)],
    gamma: f64,
    alpha: f64,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<BiasReport> {
    let mut r = BiasReport {
        q_estimate: vec![],
        mc_return: vec![],
        mc_se: vec![],
        bias: vec![],
        mean: 0.0,
        std: 0.0,
    };
    for (state, action) in pairs {
        let qh = q.q_value(&env.observe(state), action, 1.0)?;
        let (mc, se) = crate::envs::mc_return(env, policy, state, action, gamma, alpha, n_mc, rng)?;
        r.q_estimate.push(qh);
        r.mc_return.push(mc);
        r.mc_se.push(se);
        r.bias.push(qh - mc);
    }
    (r.mean, r.std) = mean_std(&r.bias);
    Ok(r)
}

/// Pairwise distances between tanh-transformed means of repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeReport {
    /// `distances[state][i][j]`, a full symmetric matrix per state.
    pub distances: Vec<Vec<Vec<f64>>>,
    pub max_per_state: Vec<f64>,
    /// `(lower, upper, count)` over pairs `i < j`.
    pub histogram: Vec<(f64, f64, usize)>,
    pub max_observed: f64,
    /// `2 sqrt(|A|)`.
    pub bound: f64,
}

impl ModeReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut t = CsvTable::new(&["state", "run_i", "run_j", "distance"])?;
        for (s, m) in self.distances.iter().enumerate() {
            for i in 0..m.len() {
                for j in i + 1..m.len() {
                    t.row(&[s.to_string(), i.to_string(), j.to_string(), fmt_f64(m[i][j])])?;
                }
            }
        }
        t.into_bytes()
    }

    pub fn histogram_csv(&self) -> Result<Vec<u8>> {
        let mut t = CsvTable::new(&["lower", "upper", "count"])?;
        for (lo, hi, c) in &self.histogram {
            t.row(&[fmt_f64(*lo), fmt_f64(*hi), c.to_string()])?;
        }
        t.into_bytes()
    }
}

pub fn pairwise_distances(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|p| {
            points
                .iter()
                .map(|q| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn mode_analysis(
    policy: &PolicyOptimizer,
    q: &dyn ActionValue,
    states: &Tensor,
    iter: &IterOptConfig,
    obj: &ObjectiveConfig,
    n_runs: usize,
    bins: usize,
    rng: &mut impl Rng,
) -> Result<ModeReport> {
    let adim = policy.action_dim();
    let rows = states.rows();
    let mut means: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n_runs); rows];
    for _ in 0..n_runs {
        let trace = policy.optimize(states, q, iter, obj, rng)?;
        for (i, m) in means.iter_mut().enumerate() {
            m.push(trace.final_params(i)?.mean_action(Squash::Tanh));
        }
    }
    let distances: Vec<Vec<Vec<f64>>> = means.iter().map(|m| pairwise_distances(m)).collect();
    let max_per_state: Vec<f64> = distances
        .iter()
        .map(|m| m.iter().flatten().fold(0.0f64, |a, &b| a.max(b)))
        .collect();
    let bound = 2.0 * (adim as f64).sqrt();
    let width = bound / bins as f64;
    let mut histogram: Vec<(f64, f64, usize)> = (0..bins).map(|b| (b as f64 * width, (b + 1) as f64 * width, 0)).collect();
    for m in &distances {
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                let b = ((m[i][j] / width) as usize).min(bins - 1);
                histogram[b].2 += 1;
            }
        }
    }
    Ok(ModeReport {
        max_observed: max_per_state.iter().fold(0.0f64, |a, &b| a.max(b)),
        distances,
        max_per_state,
        histogram,
        bound,
    })
}

/// `J` over a grid of two mean coordinates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SliceReport {
    pub dims: [usize; 2],
    /// Coordinates of `mu[dims[0]]` (columns).
    pub xs: Vec<f64>,
    /// Coordinates of `mu[dims[1]]` (rows).
    pub ys: Vec<f64>,
    /// `j[r][c]` at `(xs[c], ys[r])`.
    pub j: Vec<Vec<f64>>,
}

impl SliceReport {
    /// Header row of x coordinates; each row starts with its y coordinate.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut header = vec![format!("mu{}\\mu{}", self.dims[1], self.dims[0])];
        header.extend(self.xs.iter().map(|x| fmt_f64(*x)));
        let mut t = CsvTable::new(&header)?;
        for (y, row) in self.ys.iter().zip(&self.j) {
            let mut fields = vec![fmt_f64(*y)];
            fields.extend(row.iter().map(|v| fmt_f64(*v)));
            t.row(&fields)?;
        }
        t.into_bytes()
    }

    pub fn to_svg(&self) -> String {
        plot::heatmap(
            "objective slice",
            &format!("mu[{}]", self.dims[0]),
            &format!("mu[{}]", self.dims[1]),
            &self.xs,
            &self.ys,
            &self.j,
        )
    }

    /// Grid cell with the largest `J`, as `(row, column)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for (r, row) in self.j.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v > best.2 {
                    best = (r, c, v);
                }
            }
        }
        (best.0, best.1)
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Evaluates `J` with every other component of `base` held fixed. All
/// cells share one antithetic noise draw.
#[allow(clippy::too_many_arguments)]
pub fn objective_slice_2d(
    q: &dyn ActionValue,
    state: &[f64],
    base: &PolicyParams,
    dims: [usize; 2],
    n: usize,
    range: f64,
    obj: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<SliceReport> {
    let adim = base.action_dim();
    if dims[0] == dims[1] || dims[0] >= adim || dims[1] >= adim {
        return Err(Error::InvalidArgument(format!(
            "slice dims {dims:?} must be distinct and below |A| = {adim}"
        )));
    }
    let coords = linspace(-range, range, n);
    let noise = sample_noise_antithetic(rng, obj.n_action_samples, 1, adim);
    // the same draw for every cell of a row, laid out sample-major
    let mut tiled = Vec::with_capacity(obj.n_action_samples * n * adim);
    for k in 0..obj.n_action_samples {
        for _ in 0..n {
            tiled.extend_from_slice(noise.row_slice(k));
        }
    }
    let tiled = Tensor::matrix(obj.n_action_samples * n, adim, tiled)?;
    let states = Tensor::from_rows(&vec![state.to_vec(); n])?;
    let mut j = Vec::with_capacity(n);
    for &y in &coords {
        let lam_rows: Vec<Vec<f64>> = coords
            .iter()
            .map(|&x| {
                let mut p = base.clone();
                p.mu[dims[0]] = x;
                p.mu[dims[1]] = y;
                p.to_flat()
            })
            .collect();
        let lam = Tensor::from_rows(&lam_rows)?;
        j.push(j_batch(q, &states, &lam, &tiled, obj.alpha, obj.beta_act, obj.squash)?);
    }
    Ok(SliceReport {
        dims,
        xs: coords.clone(),
        ys: coords,
        j,
    })
}

/// Mean objective curve of one optimizer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curve {
    pub name: String,
    pub mean_j: Vec<f64>,
    pub mean_best_j: Vec<f64>,
    pub wall_ns: Vec<u64>,
}

impl Curve {
    fn from_trace(name: String, t: &OptimizeTrace, wall: bool) -> Self {
        Curve {
            name,
            mean_j: t.mean_curve(),
            mean_best_j: t.mean_best_curve(),
            wall_ns: if wall { t.wall_ns.clone() } else { vec![0; t.len()] },
        }
    }

    /// First iteration whose best-so-far mean reaches `level`.
    pub fn iterations_to_reach(&self, level: f64) -> Option<usize> {
        self.mean_best_j.iter().position(|&v| v >= level)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub curves: Vec<Curve>,
}

impl ComparisonReport {
    pub fn curve(&self, name: &str) -> Option<&Curve> {
        self.curves.iter().find(|c| c.name == name)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut t = CsvTable::new(&["optimizer", "iteration", "mean_J", "mean_best_J", "wall_clock_ns"])?;
        for c in &self.curves {
            for k in 0..c.mean_j.len() {
                t.row(&[
                    c.name.clone(),
                    k.to_string(),
                    fmt_f64(c.mean_j[k]),
                    fmt_f64(c.mean_best_j[k]),
                    c.wall_ns[k].to_string(),
                ])?;
            }
        }
        t.into_bytes()
    }

    pub fn to_svg(&self) -> String {
        let series: Vec<(String, Vec<f64>)> = self.curves.iter().map(|c| (c.name.clone(), c.mean_j.clone())).collect();
        plot::line_chart("optimizer comparison", "iteration", "mean J", &series)
    }
}

/// Settings of one comparison entry.
#[derive(Clone, Copy, Debug)]
pub enum Contender<'a> {
    Amortized(&'a PolicyOptimizer, IterOptConfig),
    Adam { lr: f64, steps: usize },
    Cem(CemConfig),
}

/// Runs every contender from `mu = 0, sigma = 1` on the same states. Each
/// one draws from a fresh copy of the same generator, so identical
/// contenders produce identical curves and all share the iteration-0 score.
pub fn optimizer_comparison(
    contenders: &[(String, Contender<'_>)],
    q: &dyn ActionValue,
    states: &Tensor,
    obj: &ObjectiveConfig,
    rng_template: &ChaCha8Rng,
    record_wall_clock: bool,
) -> Result<ComparisonReport> {
    let lam0 = initial_lambdas(states.rows(), q.action_dim());
    let mut curves = Vec::with_capacity(contenders.len());
    for (name, c) in contenders {
        let mut rng = rng_template.clone();
        let trace = match c {
            Contender::Amortized(p, iter) => p.optimize(states, q, iter, obj, &mut rng)?,
            Contender::Adam { lr, steps } => optimize_adam(&lam0, states, q, obj, *steps, *lr, &mut rng)?,
            Contender::Cem(cem) => optimize_cem(&lam0, states, q, obj, cem, &mut rng)?,
        };
        curves.push(Curve::from_trace(name.clone(), &trace, record_wall_clock));
    }
    Ok(ComparisonReport { curves })
}

/// Which diagnostic to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalKind {
    Gap,
    Bias,
    Modes,
    Compare,
    Slice,
}

impl EvalKind {
    pub fn name(self) -> &'static str {
        match self {
            EvalKind::Gap => "gap",
            EvalKind::Bias => "bias",
            EvalKind::Modes => "modes",
            EvalKind::Compare => "compare",
            EvalKind::Slice => "slice",
        }
    }
}

/// A frozen agent with the settings its diagnostics run under.
pub struct Diagnostics<'a> {
    pub agent: &'a Agent,
    pub cfg: &'a RunConfig,
    pub eval: &'a EvalConfig,
    pub seed: u64,
}

impl Diagnostics<'_> {
    fn rng(&self, kind: EvalKind) -> ChaCha8Rng {
        substream(self.seed, &format!("eval-{}", kind.name()))
    }

    fn objective(&self) -> ObjectiveConfig {
        self.agent.objective(&self.cfg.objective)
    }

    fn iter_cfg(&self) -> IterOptConfig {
        match self.eval.eval_iterations {
            Some(k) => self.cfg.iterative.with_iterations(k),
            None => self.cfg.iterative,
        }
    }

    fn with_value<T>(&self, rng: &mut ChaCha8Rng, f: impl FnOnce(&dyn ActionValue, &mut ChaCha8Rng) -> Result<T>) -> Result<T> {
        let seed = rng.random();
        self.agent.with_value(&self.cfg.model_based, self.cfg.train.gamma, seed, |q| f(q, rng))
    }

    pub fn states(&self, rng: &mut ChaCha8Rng, n: usize) -> Result<StateSample> {
        collect_states(self.agent, self.cfg, n, rng)
    }

    pub fn gap(&self) -> Result<GapReport> {
        let mut rng = self.rng(EvalKind::Gap);
        let states = self.states(&mut rng, self.eval.n_states)?;
        let obj = self.objective();
        let iter = self.iter_cfg();
        self.with_value(&mut rng, |q, rng| {
            amortization_gap(&self.agent.policy, q, &states.obs, &iter, &obj, self.eval.gap_lr, self.eval.gap_steps, rng)
        })
    }

    pub fn bias(&self) -> Result<BiasReport> {
        let mut rng = self.rng(EvalKind::Bias);
        let states = self.states(&mut rng, self.eval.bias_pairs)?;
        let mut pairs = Vec::with_capacity(states.states.len());
        for s in &states.states {
            let a = self.agent.act(&self.agent.env.observe(s), self.cfg, false, &mut rng)?;
            pairs.push((s.clone(), a.action));
        }
        let mut policy = AgentPolicy {
            agent: self.agent,
            cfg: self.cfg,
        };
        value_bias(
            self.agent.env,
            &self.agent.critics,
            &mut policy,
            &pairs,
            self.cfg.train.gamma,
            self.agent.alpha(),
            self.eval.bias_mc_samples,
            &mut rng,
        )
    }

    pub fn modes(&self) -> Result<ModeReport> {
        let mut rng = self.rng(EvalKind::Modes);
        let states = self.states(&mut rng, self.eval.n_states)?;
        let obj = self.objective();
        let iter = self.iter_cfg();
        self.with_value(&mut rng, |q, rng| {
            mode_analysis(&self.agent.policy, q, &states.obs, &iter, &obj, self.eval.mode_runs, self.eval.mode_bins, rng)
        })
    }

    pub fn compare(&self) -> Result<ComparisonReport> {
        let mut rng = self.rng(EvalKind::Compare);
        let states = self.states(&mut rng, self.eval.n_states)?;
        let obj = self.objective();
        let iter = self.cfg.iterative.with_iterations(self.eval.compare_iterative_iterations);
        let contenders: Vec<(String, Contender<'_>)> = self
            .eval
            .compare_optimizers
            .iter()
            .map(|c| match c {
                CompareOptimizer::Amortized => (
                    self.agent.policy.kind().name().to_string(),
                    Contender::Amortized(&self.agent.policy, iter),
                ),
                CompareOptimizer::Adam => (
                    "adam".to_string(),
                    Contender::Adam {
                        lr: self.eval.adam_lr,
                        steps: self.eval.adam_iterations,
                    },
                ),
                CompareOptimizer::Cem => ("cem".to_string(), Contender::Cem(self.eval.cem)),
            })
            .collect();
        self.with_value(&mut rng, |q, rng| {
            optimizer_comparison(&contenders, q, &states.obs, &obj, rng, self.eval.record_wall_clock)
        })
    }

    pub fn slice(&self) -> Result<SliceReport> {
        let mut rng = self.rng(EvalKind::Slice);
        let states = self.states(&mut rng, 1)?;
        let obj = self.objective();
        let s = states.obs.row_slice(0).to_vec();
        let base = self.agent.act(&s, self.cfg, true, &mut rng)?.params;
        self.with_value(&mut rng, |q, rng| {
            objective_slice_2d(q, &s, &base, self.eval.slice_dims, self.eval.slice_grid, self.eval.slice_range, &obj, rng)
        })
    }

    /// Runs `kind` and writes its files into `dir`; returns the paths written.
    pub fn write(&self, kind: EvalKind, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        match kind {
            EvalKind::Gap => {
                let r = self.gap()?;
                files.push(("gap.csv".into(), r.to_csv()?));
                files.push(("gap_summary.json".into(), json(&GapSummary::from(&r))?));
            }
            EvalKind::Bias => {
                let r = self.bias()?;
                files.push(("bias.csv".into(), r.to_csv()?));
                files.push(("bias_summary.json".into(), json(&MeanStd { mean: r.mean, std: r.std })?));
            }
            EvalKind::Modes => {
                let r = self.modes()?;
                files.push(("modes.csv".into(), r.to_csv()?));
                files.push(("modes_histogram.csv".into(), r.histogram_csv()?));
                files.push((
                    "modes_summary.json".into(),
                    json(&ModeSummary {
                        max_observed: r.max_observed,
                        bound: r.bound,
                        states: r.max_per_state.len(),
                    })?,
                ));
            }
            EvalKind::Compare => {
                let r = self.compare()?;
                files.push(("compare.csv".into(), r.to_csv()?));
                files.push(("compare.svg".into(), r.to_svg().into_bytes()));
            }
            EvalKind::Slice => {
                let r = self.slice()?;
                files.push(("slice.csv".into(), r.to_csv()?));
                files.push(("slice.svg".into(), r.to_svg().into_bytes()));
            }
        }
        let mut written = Vec::with_capacity(files.len());
        for (name, bytes) in files {
            let p = dir.join(name);
            write_atomic(&p, &bytes)?;
            written.push(p);
        }
        Ok(written)
    }
}

#[derive(Serialize)]
struct MeanStd {
    mean: f64,
    std: f64,
}

#[derive(Serialize)]
struct GapSummary {
    mean: f64,
    std: f64,
    optimizer: String,
    iterations: usize,
    lr: f64,
    steps: usize,
    parameterization: String,
}

impl From<&GapReport> for GapSummary {
    fn from(r: &GapReport) -> Self {
        GapSummary {
            mean: r.mean,
            std: r.std,
            optimizer: r.optimizer.clone(),
            iterations: r.iterations,
            lr: r.lr,
            steps: r.steps,
            parameterization: r.parameterization.clone(),
        }
    }
}

#[derive(Serialize)]
struct ModeSummary {
    max_observed: f64,
    bound: f64,
    states: usize,
}

fn json(v: &impl Serialize) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::MlpShape;
    use crate::objective::surfaces::{Bumps, Quadratic};
    use crate::objective::AffineValue;
    use crate::training::OptimizerKind;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn identity_obj(alpha: f64) -> ObjectiveConfig {
        ObjectiveConfig {
            alpha,
            n_action_samples: 10,
            antithetic: true,
            squash: Squash::Identity,
            ..ObjectiveConfig::default()
        }
    }

    #[test]
    fn gap_is_tiny_at_an_optimum() {
        let q = Quadratic::fixed(vec![0.3, -0.2], 1);
        let states = Tensor::row(vec![0.0]);
        // optimum of the identity-squash quadratic: mean at the target, sigma -> 0 for tiny alpha
        let lam = Tensor::row(vec![0.3, -0.2, -6.0, -6.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = gap_from_lambdas(&lam, &states, &q, &identity_obj(1e-6), 5e-3, 100, &mut rng).unwrap();
        assert!(r.mean >= 0.0 && r.mean < 1e-3, "{r:?}");
    }

    #[test]
    fn gaps_are_never_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let policy = PolicyOptimizer::new(OptimizerKind::Direct, 1, 2, MlpShape { hidden: 8, layers: 1 }, &mut rng).unwrap();
        let q = Bumps {
            centres: vec![vec![0.6, 0.6], vec![-0.6, -0.6]],
            heights: vec![1.0, 1.0],
            width: 0.08,
            state_dim: 1,
        };
        let states = Tensor::from_rows(&(0..20).map(|i| vec![i as f64 * 0.1]).collect::<Vec<_>>()).unwrap();
        let obj = ObjectiveConfig {
            alpha: 0.05,
            ..ObjectiveConfig::default()
        };
        let r = amortization_gap(&policy, &q, &states, &IterOptConfig::default(), &obj, 5e-3, 30, &mut rng).unwrap();
        assert!(r.gap.iter().all(|&g| g >= 0.0));
        assert_eq!(r.gap.len(), 20);
    }

    #[test]
    fn bias_shifts_exactly_with_additive_critic_offset() {
        let env = EnvKind::MultiModalBandit;
        let q = Quadratic::fixed(vec![0.1, 0.2], 1);
        let pairs: Vec<(EnvState, Vec<f64>)> = (0..5)
            .map(|i| (env.reset_seeded(i), vec![0.1 * i as f64, -0.05 * i as f64]))
            .collect();
        let mut policy = crate::envs::UniformPolicy { action_dim: 2 };
        let base = value_bias(env, &q, &mut policy, &pairs, 0.99, 0.2, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for c in [0.5, -2.0, 3.25] {
            let shifted = AffineValue {
                inner: &q,
                scale: 1.0,
                offset: c,
            };
            let r = value_bias(env, &shifted, &mut policy, &pairs, 0.99, 0.2, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            for (a, b) in r.bias.iter().zip(&base.bias) {
                assert!((a - b - c).abs() < 1e-12);
            }
            assert!((r.mean - base.mean - c).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_is_small_for_an_exact_critic_on_the_bandit() {
        struct Exact;
        impl ActionValue for Exact {
            fn state_dim(&self) -> usize {
                1
            }
            fn action_dim(&self) -> usize {
                2
            }
            fn q_graph(&self, _: &mut crate::autodiff::Graph, _: crate::autodiff::Var, _: crate::autodiff::Var, _: f64) -> Result<crate::autodiff::Var> {
                unreachable!()
            }
            fn q_value(&self, _s: &[f64], a: &[f64], _b: f64) -> Result<f64> {
                Ok(crate::envs::bandit_reward(a))
            }
        }
        let env = EnvKind::MultiModalBandit;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<(EnvState, Vec<f64>)> = (0..100)
            .map(|_| (env.reset(&mut rng), vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        let mut policy = crate::envs::UniformPolicy { action_dim: 2 };
        let r = value_bias(env, &Exact, &mut policy, &pairs, 0.99, 0.3, 100, &mut rng).unwrap();
        assert!(r.mean.abs() < 0.05);
    }

    #[test]
    fn direct_modes_are_degenerate_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = PolicyOptimizer::new(OptimizerKind::Direct, 1, 2, MlpShape { hidden: 8, layers: 1 }, &mut rng).unwrap();
        let q = Quadratic::fixed(vec![0.1, 0.2], 1);
        let states = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let r = mode_analysis(&policy, &q, &states, &IterOptConfig::default(), &ObjectiveConfig::default(), 10, 20, &mut rng).unwrap();
        assert_eq!(r.max_observed, 0.0);
        assert!((r.bound - 2.0 * 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.histogram.iter().map(|h| h.2).sum::<usize>(), 2 * 45);
    }

    #[test]
    fn iterative_mode_distances_respect_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let policy = PolicyOptimizer::new(OptimizerKind::Iterative, 1, 2, MlpShape { hidden: 8, layers: 1 }, &mut rng).unwrap();
        let q = Bumps {
            centres: vec![vec![0.6, 0.6], vec![-0.6, -0.6]],
            heights: vec![1.0, 1.0],
            width: 0.08,
            state_dim: 1,
        };
        let states = Tensor::from_rows(&[vec![0.0], vec![0.5]]).unwrap();
        let r = mode_analysis(&policy, &q, &states, &IterOptConfig::default(), &ObjectiveConfig::default(), 10, 20, &mut rng).unwrap();
        for m in &r.distances {
            for i in 0..m.len() {
                assert_eq!(m[i][i], 0.0);
                for j in 0..m.len() {
                    assert_eq!(m[i][j], m[j][i]);
                    assert!(m[i][j] <= r.bound);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn pairwise_distances_are_symmetric_and_bounded(
            pts in prop::collection::vec(prop::collection::vec(-1.0f64..=1.0, 3), 1..8)
        ) {
            let d = pairwise_distances(&pts);
            for i in 0..pts.len() {
                prop_assert_eq!(d[i][i], 0.0);
                for j in 0..pts.len() {
                    prop_assert_eq!(d[i][j], d[j][i]);
                    prop_assert!(d[i][j] <= 2.0 * 3f64.sqrt() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn symmetric_slice_is_exactly_symmetric() {
        let q = Bumps {
            centres: vec![vec![0.6, 0.6], vec![-0.6, -0.6]],
            heights: vec![1.0, 1.0],
            width: 0.08,
            state_dim: 1,
        };
        let obj = ObjectiveConfig {
            alpha: 0.1,
            ..ObjectiveConfig::default()
        };
        let base = PolicyParams::from_flat(&[0.0, 0.0, -1.0, -1.0]).unwrap();
        let n = 11;
        let r = objective_slice_2d(&q, &[0.0], &base, [0, 1], n, 1.5, &obj, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(r.j.len(), n);
        assert!(r.j.iter().all(|row| row.len() == n));
        for a in 0..n {
            for b in 0..n {
                let d = (r.j[a][b] - r.j[n - 1 - a][n - 1 - b]).abs();
                assert!(d < 1e-12, "{a},{b}: {d}");
            }
        }
        let csv = String::from_utf8(r.to_csv().unwrap()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), n + 1);
        assert!(lines.iter().all(|l| l.split(',').count() == n + 1));
    }

    #[test]
    fn slice_argmax_on_convex_surface() {
        let target = vec![0.4, -0.8];
        let q = Quadratic::fixed(target.clone(), 1);
        let obj = identity_obj(1e-6);
        let base = PolicyParams::from_flat(&[0.0, 0.0, -8.0, -8.0]).unwrap();
        let r = objective_slice_2d(&q, &[0.0], &base, [0, 1], 21, 1.0, &obj, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let (row, col) = r.argmax();
        let nearest = |v: f64| (0..21).min_by(|&a, &b| (r.xs[a] - v).abs().total_cmp(&(r.xs[b] - v).abs())).unwrap();
        assert_eq!((row, col), (nearest(target[1]), nearest(target[0])));
    }

    #[test]
    fn slice_rejects_equal_dims() {
        let q = Quadratic::fixed(vec![0.0, 0.0], 1);
        let base = PolicyParams::standard(2);
        let e = objective_slice_2d(&q, &[0.0], &base, [0, 0], 5, 1.0, &ObjectiveConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(e.unwrap_err().exit_code(), 2);
        let cfg = EvalConfig {
            slice_dims: [1, 1],
            ..EvalConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn comparison_shares_iteration_zero_and_repeats_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let policy = PolicyOptimizer::new(OptimizerKind::Iterative, 1, 2, MlpShape { hidden: 8, layers: 1 }, &mut rng).unwrap();
        let q = Quadratic::fixed(vec![0.3, 0.1], 1);
        let states = Tensor::from_rows(&[vec![0.0], vec![0.2], vec![-0.4]]).unwrap();
        let it = IterOptConfig::default();
        let contenders = vec![
            ("iterative".to_string(), Contender::Amortized(&policy, it)),
            ("adam".to_string(), Contender::Adam { lr: 0.01, steps: 20 }),
            ("adam_again".to_string(), Contender::Adam { lr: 0.01, steps: 20 }),
            (
                "cem".to_string(),
                Contender::Cem(CemConfig {
                    steps: 5,
                    ..CemConfig::default()
                }),
            ),
        ];
        let template = ChaCha8Rng::seed_from_u64(10);
        let r = optimizer_comparison(&contenders, &q, &states, &ObjectiveConfig::default(), &template, false).unwrap();
        assert_eq!(r.curves.len(), 4);
        let j0 = r.curves[0].mean_j[0];
        assert!(r.curves.iter().all(|c| c.mean_j[0] == j0));
        assert_eq!(r.curves[1].mean_j, r.curves[2].mean_j);
        assert!(r.curves.iter().all(|c| c.wall_ns.iter().all(|&w| w == 0)));
        let csv = String::from_utf8(r.to_csv().unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 1 + 6 + 21 + 21 + 6);
        assert!(r.to_svg().contains("<polyline"));
    }
}
