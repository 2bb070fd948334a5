//! Soft actor-critic training with either amortized policy optimizer:
//! replay, pessimistic critic targets, policy and temperature updates,
//! target tracking, metric logging and checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Graph, ParamStore};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::distributions::{log_prob, noise_tensor, sample_reparam, standard_normal, PolicyParams, Squash};
use crate::envs::{EnvKind, Policy, Transition};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, CsvTable};
use crate::model_based::{distill_rollout_policy, model_update, MBConfig, ModelBatch, ModelPair, RetraceValue};
use crate::networks::{DirectPolicyNet, IterativePolicyNet, MlpShape, QArch};
use crate::objective::{objective_on_graph, ActionValue, ObjectiveConfig, QEnsemble, QSet, Temperature};
use crate::optimizers::{
    direct_lambdas, fit_direct_step, fit_iterative_step, iterative_lambdas, optimize_direct, optimize_iterative,
    FitStats, IterOptConfig, OptimizeTrace,
};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Fixed-capacity ring buffer of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            items: Vec::new(),
            head: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<&Transition>> {
        if self.items.is_empty() {
            return Err(Error::InvalidArgument("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }

    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> Result<Batch> {
        Batch::from_transitions(&self.sample(n, rng)?)
    }
}

/// Column-stacked transitions.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Tensor,
    pub actions: Tensor,
    /// `[n, 1]`
    pub rewards: Tensor,
    pub next_obs: Tensor,
    /// `[n, 1]`, zero where the episode ended.
    pub not_done: Tensor,
}

impl Batch {
    pub fn from_transitions(items: &[&Transition]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        let n = items.len();
        let stack = |f: &dyn Fn(&Transition) -> &Vec<f64>| {
            Tensor::from_rows(&items.iter().map(|t| f(t).clone()).collect::<Vec<_>>())
        };
        Ok(Batch {
            obs: stack(&|t| &t.obs)?,
            actions: stack(&|t| &t.action)?,
            rewards: Tensor::matrix(n, 1, items.iter().map(|t| t.reward).collect())?,
            next_obs: stack(&|t| &t.next_obs)?,
            not_done: Tensor::matrix(n, 1, items.iter().map(|t| if t.done { 0.0 } else { 1.0 }).collect())?,
        })
    }

    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn model_batch(&self) -> ModelBatch<'_> {
        ModelBatch {
            obs: &self.obs,
            actions: &self.actions,
            rewards: &self.rewards,
            next_obs: &self.next_obs,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Direct,
    Iterative,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Direct => "direct",
            OptimizerKind::Iterative => "iterative",
        }
    }
}

/// Training-loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch: usize,
    pub initial_random_steps: usize,
    pub updates_per_env_step: usize,
    pub replay_capacity: usize,
    pub optimizer: OptimizerKind,
    pub q_arch: QArch,
    pub q_members: usize,
    pub policy_hidden: usize,
    pub policy_layers: usize,
    /// Defaults to the architecture's own width and depth when absent.
    pub q_hidden: Option<usize>,
    pub q_layers: Option<usize>,
    pub autotune_alpha: bool,
    pub alpha_lr: f64,
    /// Defaults to `-|A|`.
    pub target_entropy: Option<f64>,
    pub log_every: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub checkpoint_every: usize,
    /// Record elapsed time in metrics; off keeps logs bitwise reproducible.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 100_000,
            gamma: 0.99,
            tau: 5e-3,
            lr: 3e-4,
            batch: 256,
            initial_random_steps: 5000,
            updates_per_env_step: 1,
            replay_capacity: 1_000_000,
            optimizer: OptimizerKind::Direct,
            q_arch: QArch::A,
            q_members: 2,
            policy_hidden: MlpShape::POLICY.hidden,
            policy_layers: MlpShape::POLICY.layers,
            q_hidden: None,
            q_layers: None,
            autotune_alpha: true,
            alpha_lr: 3e-4,
            target_entropy: None,
            log_every: 100,
            eval_every: 5000,
            eval_episodes: 10,
            checkpoint_every: 5000,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("total_steps", self.total_steps),
            ("batch", self.batch),
            ("replay_capacity", self.replay_capacity),
            ("policy_hidden", self.policy_hidden),
            ("policy_layers", self.policy_layers),
            ("log_every", self.log_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("train.{name} must be at least 1")));
        }
        if self.q_members < 2 {
            return Err(Error::Config("train.q_members must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("train.gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("train.tau must lie in [0, 1], got {}", self.tau)));
        }
        if !(self.lr > 0.0) || !(self.alpha_lr > 0.0) {
            return Err(Error::Config("train.lr and train.alpha_lr must be positive".into()));
        }
        if matches!(self.q_hidden, Some(0)) || matches!(self.q_layers, Some(0)) {
            return Err(Error::Config("train.q_hidden and train.q_layers must be positive".into()));
        }
        Ok(())
    }

    pub fn policy_shape(&self) -> MlpShape {
        MlpShape {
            hidden: self.policy_hidden,
            layers: self.policy_layers,
        }
    }

    pub fn q_shape(&self) -> MlpShape {
        let base = match self.q_arch {
            QArch::A => MlpShape::Q_A,
            QArch::B => MlpShape::Q_B,
        };
        MlpShape {
            hidden: self.q_hidden.unwrap_or(base.hidden),
            layers: self.q_layers.unwrap_or(base.layers),
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

/// The amortized policy optimizer of an agent.
#[derive(Clone, Debug)]
pub enum PolicyOptimizer {
    Direct(DirectPolicyNet),
    Iterative(IterativePolicyNet),
}

impl PolicyOptimizer {
    pub fn new(kind: OptimizerKind, state_dim: usize, action_dim: usize, shape: MlpShape, rng: &mut impl Rng) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::Direct => PolicyOptimizer::Direct(DirectPolicyNet::new(state_dim, action_dim, shape, rng)?),
            OptimizerKind::Iterative => {
                PolicyOptimizer::Iterative(IterativePolicyNet::new(state_dim, action_dim, shape, rng)?)
            }
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            PolicyOptimizer::Direct(_) => OptimizerKind::Direct,
            PolicyOptimizer::Iterative(_) => OptimizerKind::Iterative,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            PolicyOptimizer::Direct(n) => n.action_dim,
            PolicyOptimizer::Iterative(n) => n.action_dim,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            PolicyOptimizer::Direct(n) => &n.store,
            PolicyOptimizer::Iterative(n) => &n.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            PolicyOptimizer::Direct(n) => &mut n.store,
            PolicyOptimizer::Iterative(n) => &mut n.store,
        }
    }

    /// Optimizes `J` for each state with `beta_act`, scoring every entry.
    pub fn optimize(
        &self,
        states: &Tensor,
        q: &dyn ActionValue,
        iter: &IterOptConfig,
        obj: &ObjectiveConfig,
        rng: &mut impl Rng,
    ) -> Result<OptimizeTrace> {
        match self {
            PolicyOptimizer::Direct(n) => optimize_direct(n, states, q, obj, rng),
            PolicyOptimizer::Iterative(n) => optimize_iterative(n, states, q, iter, obj, rng),
        }
    }

    /// Output `lambda` per state without scoring.
    #[allow(clippy::too_many_arguments)]
    pub fn lambdas(
        &self,
        states: &Tensor,
        q: &dyn ActionValue,
        iter: &IterOptConfig,
        alpha: f64,
        beta: f64,
        squash: Squash,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        match self {
            PolicyOptimizer::Direct(n) => direct_lambdas(n, states),
            PolicyOptimizer::Iterative(n) => iterative_lambdas(n, states, q, iter, alpha, beta, squash, rng),
        }
    }
}

/// Learned models plus, for iterative agents, the distilled rollout policy.
#[derive(Clone, Debug)]
pub struct MbStack {
    pub models: ModelPair,
    pub rollout: Option<DirectPolicyNet>,
}

/// Everything a trained run consists of.
#[derive(Clone, Debug)]
pub struct Agent {
    pub env: EnvKind,
    pub policy: PolicyOptimizer,
    pub critics: QEnsemble,
    pub temperature: Temperature,
    pub mb: Option<MbStack>,
}

impl Agent {
    /// Fresh networks for `cfg`, initialized from the `init` substream.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let env = cfg.env_kind()?;
        let spec = env.spec();
        let t = &cfg.train;
        let mut rng = substream(cfg.seed, "init");
        let policy = PolicyOptimizer::new(t.optimizer, spec.state_dim, spec.action_dim, t.policy_shape(), &mut rng)?;
        let critics = QEnsemble::new(spec.state_dim, spec.action_dim, t.q_arch, t.q_shape(), t.q_members, &mut rng)?;
        let target = t.target_entropy.unwrap_or(-(spec.action_dim as f64));
        let temperature = Temperature::new(cfg.objective.alpha, t.alpha_lr, target)?;
        let mut agent = Agent {
            env,
            policy,
            critics,
            temperature,
            mb: None,
        };
        if cfg.model_based.enabled {
            agent.attach_models(cfg, &mut rng)?;
        }
        Ok(agent)
    }

    /// Adds untrained models (and a rollout network for iterative agents).
    pub fn attach_models(&mut self, cfg: &RunConfig, rng: &mut impl Rng) -> Result<()> {
        let spec = self.env.spec();
        let models = ModelPair::new(spec.state_dim, spec.action_dim, cfg.model_based.model_shape(), rng)?;
        let rollout = match self.policy.kind() {
            OptimizerKind::Direct => None,
            OptimizerKind::Iterative => Some(DirectPolicyNet::new(
                spec.state_dim,
                spec.action_dim,
                cfg.train.policy_shape(),
                rng,
            )?),
        };
        self.mb = Some(MbStack { models, rollout });
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.temperature.alpha()
    }

    pub fn action_dim(&self) -> usize {
        self.policy.action_dim()
    }

    /// Objective settings with the current temperature.
    pub fn objective(&self, cfg: &ObjectiveConfig) -> ObjectiveConfig {
        ObjectiveConfig {
            alpha: self.alpha(),
            ..cfg.clone()
        }
    }

    /// Rollout policy for model-based values: the direct policy itself, or
    /// the distilled network of an iterative agent.
    pub fn rollout_net(&self) -> Option<&DirectPolicyNet> {
        match (&self.policy, &self.mb) {
            (PolicyOptimizer::Direct(n), Some(_)) => Some(n),
            (PolicyOptimizer::Iterative(_), Some(mb)) => mb.rollout.as_ref(),
            _ => None,
        }
    }

    /// Runs `f` with the agent's value estimate: Retrace over the models
    /// when present, the live critics otherwise.
    pub fn with_value<T>(
        &self,
        mb: &MBConfig,
        gamma: f64,
        seed: u64,
        f: impl FnOnce(&dyn ActionValue) -> Result<T>,
    ) -> Result<T> {
        match (&self.mb, self.rollout_net()) {
            (Some(stack), Some(rollout)) => {
                let rv = RetraceValue::new(&self.critics, &stack.models, rollout, mb, gamma, self.alpha(), seed);
                f(&rv)
            }
            _ => f(&self.critics),
        }
    }

    /// Chooses an action for one observation. `deterministic` returns
    /// `tanh(mu)`; otherwise one sample is drawn.
    pub fn act(&self, obs: &[f64], cfg: &RunConfig, deterministic: bool, rng: &mut impl Rng) -> Result<ActOutcome> {
        let states = Tensor::row(obs.to_vec());
        let obj = self.objective(&cfg.objective);
        let (params, improvement) = match &self.policy {
            PolicyOptimizer::Direct(n) => (PolicyParams::from_flat(direct_lambdas(n, &states)?.row_slice(0))?, None),
            PolicyOptimizer::Iterative(_) => {
                let seed = rng.random();
                let trace = self.with_value(&cfg.model_based, cfg.train.gamma, seed, |q| {
                    self.policy.optimize(&states, q, &cfg.iterative, &obj, rng)
                })?;
                (trace.final_params(0)?, Some(trace.mean_improvement()))
            }
        };
        let action = if deterministic {
            params.mean_action(Squash::Tanh)
        } else {
            let noise = standard_normal(rng, params.action_dim());
            sample_reparam(&params, &noise, Squash::Tanh)?.a
        };
        Ok(ActOutcome {
            action: action.into_iter().map(|a| a.clamp(-1.0, 1.0)).collect(),
            params,
            improvement,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutcome {
    pub action: Vec<f64>,
    pub params: PolicyParams,
    /// `J_K - J_0` of the iterative run that produced `params`.
    pub improvement: Option<f64>,
}

/// The agent's exploration policy, for Monte-Carlo returns.
pub struct AgentPolicy<'a> {
    pub agent: &'a Agent,
    pub cfg: &'a RunConfig,
}

impl Policy for AgentPolicy<'_> {
    fn sample(&mut self, obs: &[f64], rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64)> {
        let mut rng = rng;
        let out = self.agent.act(obs, self.cfg, true, &mut rng)?;
        let noise = standard_normal(rng, out.params.action_dim());
        let s = sample_reparam(&out.params, &noise, Squash::Tanh)?;
        let lp = log_prob(&out.params, &s, Squash::Tanh)?;
        Ok((s.a.into_iter().map(|a| a.clamp(-1.0, 1.0)).collect(), lp))
    }
}

/// Settings shared by target computation.
#[derive(Clone, Copy, Debug)]
pub struct TargetParams {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub iter: IterOptConfig,
    pub squash: Squash,
}

/// `y = r + gamma (1 - done) (Q_target(s', a') - alpha (log pi(a'|s') + |A| log 2))`
/// with `a'` one reparameterized sample from the policy at `s'`. The
/// policy optimizer itself runs against `live_q`.
pub fn critic_targets(
    batch: &Batch,
    policy: &PolicyOptimizer,
    live_q: &dyn ActionValue,
    target_q: &dyn ActionValue,
    p: &TargetParams,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let n = batch.len();
    if p.gamma == 0.0 || batch.not_done.data().iter().all(|&d| d == 0.0) {
        return Ok(batch.rewards.clone());
    }
    let lam = policy.lambdas(&batch.next_obs, live_q, &p.iter, p.alpha, p.beta, p.squash, rng)?;
    let adim = policy.action_dim();
    let noise = noise_tensor(rng, n, adim);
    let mut g = Graph::new();
    target_q.freeze(&mut g);
    let s2 = g.input(batch.next_obs.clone());
    let mu = g.input(lam.slice_cols(0, adim));
    let ls = g.input(lam.slice_cols(adim, adim));
    let o = objective_on_graph(&mut g, target_q, s2, mu, ls, &noise, p.alpha, p.beta, p.squash)?;
    let v = g.value(o.per_sample).data();
    let y: Vec<f64> = (0..n)
        .map(|i| batch.rewards.get(i, 0) + p.gamma * batch.not_done.get(i, 0) * v[i])
        .collect();
    if y.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("critic target".into()));
    }
    Tensor::matrix(n, 1, y)
}

/// One Adam step per live critic on `sum_i mean (Q_i(s, a) - y)^2`.
pub fn fit_critics(ens: &mut QEnsemble, batch: &Batch, y: &Tensor, adam: &AdamConfig) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.input(batch.obs.clone());
    let a = g.input(batch.actions.clone());
    let yv = g.input(y.clone());
    let mut total = None;
    for net in &ens.nets {
        let q = net.forward(&mut g, s, a)?;
        let d = g.sub(q, yv)?;
        let d2 = g.square(d)?;
        let m = g.mean(d2)?;
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?;
    let loss = g.value(total).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite("critic loss".into()));
    }
    let grads = g.backward(total)?;
    for net in &mut ens.nets {
        grads.accumulate_into(&mut net.store);
        net.store.adam_step(adam)?;
    }
    Ok(loss)
}

/// Critic targets from the target networks, then one step on each live critic.
pub fn critic_update(
    batch: &Batch,
    ens: &mut QEnsemble,
    policy: &PolicyOptimizer,
    p: &TargetParams,
    adam: &AdamConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let y = critic_targets(batch, policy, &*ens, &ens.targets(), p, rng)?;
    fit_critics(ens, batch, &y, adam)
}

/// One Adam step of the policy optimizer on `-mean_s J(lambda(s))`.
#[allow(clippy::too_many_arguments)]
pub fn policy_update(
    states: &Tensor,
    policy: &mut PolicyOptimizer,
    q: &dyn ActionValue,
    iter: &IterOptConfig,
    n_samples: usize,
    alpha: f64,
    beta: f64,
    squash: Squash,
    adam: &AdamConfig,
    rng: &mut impl Rng,
) -> Result<FitStats> {
    match policy {
        PolicyOptimizer::Direct(n) => fit_direct_step(n, q, states, n_samples, alpha, beta, squash, adam, rng),
        PolicyOptimizer::Iterative(n) => fit_iterative_step(n, q, states, iter, alpha, beta, squash, adam, rng),
    }
}

/// `target <- (1 - tau) target + tau live`.
pub fn polyak_update(ens: &mut QEnsemble, tau: f64) -> Result<()> {
    ens.polyak(tau)
}

/// Losses and diagnostics of one gradient update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub q_loss: f64,
    pub policy_loss: f64,
    pub improvement: f64,
    pub entropy: f64,
    pub alpha: f64,
    pub model_nll: Option<(f64, f64)>,
    pub distill_kl: Option<f64>,
}

impl Agent {
    /// Critic, policy, temperature, target and (if present) model updates
    /// on one batch.
    pub fn update(&mut self, batch: &Batch, cfg: &RunConfig, rng: &mut impl Rng) -> Result<UpdateStats> {
        let t = &cfg.train;
        let obj = &cfg.objective;
        let adam = t.adam();
        let alpha = self.alpha();
        let tp = TargetParams {
            gamma: t.gamma,
            alpha,
            beta: obj.beta_train,
            iter: cfg.iterative,
            squash: Squash::Tanh,
        };
        let mbc = &cfg.model_based;

        // A direct agent rolls out its own policy; freeze a copy for this step.
        let snapshot = match (&self.policy, &self.mb) {
            (PolicyOptimizer::Direct(n), Some(_)) => Some(n.clone()),
            _ => None,
        };
        let rollout = snapshot
            .as_ref()
            .or_else(|| self.mb.as_ref().and_then(|m| m.rollout.as_ref()));

        let y = match (&self.mb, rollout) {
            (Some(stack), Some(r)) if mbc.mb_value_targets => {
                let target = QSet(&self.critics.targets);
                let rv = RetraceValue::new(&target, &stack.models, r, mbc, t.gamma, alpha, rng.random());
                critic_targets(batch, &self.policy, &self.critics, &rv, &tp, rng)?
            }
            _ => critic_targets(batch, &self.policy, &self.critics, &self.critics.targets(), &tp, rng)?,
        };
        let q_loss = fit_critics(&mut self.critics, batch, &y, &adam)?;

        let fit = match (&self.mb, rollout) {
            (Some(stack), Some(r)) => {
                let rv = RetraceValue::new(&self.critics, &stack.models, r, mbc, t.gamma, alpha, rng.random());
                policy_update(&batch.obs, &mut self.policy, &rv, &cfg.iterative, obj.n_action_samples, alpha, obj.beta_train, Squash::Tanh, &adam, rng)?
            }
            _ => policy_update(
                &batch.obs,
                &mut self.policy,
                &self.critics,
                &cfg.iterative,
                obj.n_action_samples,
                alpha,
                obj.beta_train,
                Squash::Tanh,
                &adam,
                rng,
            )?,
        };
        if t.autotune_alpha {
            self.temperature.update(fit.entropy)?;
        }
        polyak_update(&mut self.critics, t.tau)?;

        let mut stats = UpdateStats {
            q_loss,
            policy_loss: -fit.mean_j,
            improvement: fit.improvement,
            entropy: fit.entropy,
            alpha: self.alpha(),
            model_nll: None,
            distill_kl: None,
        };
        if self.mb.is_some() {
            stats.model_nll = Some(self.model_step(batch, &adam)?);
            stats.distill_kl = self.distill_step(batch, cfg, &adam, rng)?;
        }
        Ok(stats)
    }

    fn model_step(&mut self, batch: &Batch, adam: &AdamConfig) -> Result<(f64, f64)> {
        let stack = self.mb.as_mut().ok_or_else(|| Error::InvalidArgument("agent has no models".into()))?;
        model_update(&batch.model_batch(), &mut stack.models, adam)
    }

    fn distill_step(&mut self, batch: &Batch, cfg: &RunConfig, adam: &AdamConfig, rng: &mut impl Rng) -> Result<Option<f64>> {
        let PolicyOptimizer::Iterative(net) = &self.policy else {
            return Ok(None);
        };
        let alpha = self.alpha();
        let lam = iterative_lambdas(
            net,
            &batch.obs,
            &self.critics,
            &cfg.iterative,
            alpha,
            cfg.objective.beta_train,
            Squash::Tanh,
            rng,
        )?;
        let Some(rollout) = self.mb.as_mut().and_then(|m| m.rollout.as_mut()) else {
            return Ok(None);
        };
        distill_rollout_policy(rollout, &lam, &batch.obs, adam).map(Some)
    }
}

/// One row of `metrics.csv`, aggregated over a logging window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub episode_return: Option<f64>,
    pub j_improvement: Option<f64>,
    pub alpha: f64,
    pub q_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub wall_clock_ns: u64,
    pub model_nll_dyn: Option<f64>,
    pub model_nll_rew: Option<f64>,
    pub distill_kl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub step: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub episodes: usize,
}

/// Everything `train` produces.
#[derive(Debug)]
pub struct RunArtifacts {
    pub agent: Agent,
    pub replay: ReplayBuffer,
    pub metrics: Vec<MetricsRow>,
    pub evals: Vec<EvalRow>,
    pub episode_returns: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// `metrics.csv` contents. Model columns appear only for model-based runs.
pub fn metrics_csv(rows: &[MetricsRow], model_based: bool) -> Result<Vec<u8>> {
    let mut header = vec!["step", "episode_return", "J_improvement", "alpha", "q_loss", "policy_loss", "wall_clock_ns"];
    if model_based {
        header.extend(["model_nll_dyn", "model_nll_rew", "distill_kl"]);
    }
    let mut t = CsvTable::new(&header)?;
    for r in rows {
        let mut fields = vec![
            r.step.to_string(),
            opt(r.episode_return),
            opt(r.j_improvement),
            fmt_f64(r.alpha),
            opt(r.q_loss),
            opt(r.policy_loss),
            r.wall_clock_ns.to_string(),
        ];
        if model_based {
            fields.extend([opt(r.model_nll_dyn), opt(r.model_nll_rew), opt(r.distill_kl)]);
        }
        t.row(&fields)?;
    }
    t.into_bytes()
}

pub fn eval_csv(rows: &[EvalRow]) -> Result<Vec<u8>> {
    let mut t = CsvTable::new(&["step", "mean_return", "std_return", "episodes"])?;
    for r in rows {
        t.row(&[r.step.to_string(), fmt_f64(r.mean_return), fmt_f64(r.std_return), r.episodes.to_string()])?;
    }
    t.into_bytes()
}

/// Returns of `episodes` deterministic episodes (`tanh(mu)` actions).
pub fn evaluate_returns(agent: &Agent, cfg: &RunConfig, episodes: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let env = agent.env;
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset(rng);
        let mut total = 0.0;
        loop {
            let obs = env.observe(&state);
            let a = agent.act(&obs, cfg, true, rng)?;
            let r = env.step(&state, &a.action)?;
            total += r.reward;
            if r.done {
                break;
            }
            state = r.next;
        }
        out.push(total);
    }
    Ok(out)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[derive(Default)]
struct Window {
    returns: Vec<f64>,
    improvements: Vec<f64>,
    q_loss: Vec<f64>,
    policy_loss: Vec<f64>,
    nll_dyn: Vec<f64>,
    nll_rew: Vec<f64>,
    kl: Vec<f64>,
}

fn mean_opt(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

struct Outputs<'a> {
    dir: Option<&'a Path>,
    cfg: &'a RunConfig,
}

impl Outputs<'_> {
    fn flush(&self, metrics: &[MetricsRow], evals: &[EvalRow]) -> Result<()> {
        if let Some(dir) = self.dir {
            crate::io::write_atomic(dir.join("metrics.csv"), &metrics_csv(metrics, self.cfg.model_based.enabled)?)?;
            crate::io::write_atomic(dir.join("eval.csv"), &eval_csv(evals)?)?;
        }
        Ok(())
    }

    fn checkpoint(&self, agent: &Agent, step: usize, name: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = self.dir else { return Ok(None) };
        let path = dir.join("checkpoints").join(name);
        checkpoint::save(&path, agent, self.cfg, step)?;
        Ok(Some(path))
    }
}

/// Name of the checkpoint written at `step`.
pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:08}.ckpt")
}

/// Runs a full training job. With `out_dir`, writes `config.toml`,
/// `metrics.csv`, `eval.csv` and `checkpoints/`; a non-finite value aborts
/// the run after saving an `abort` checkpoint and `abort.txt`.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        crate::io::write_atomic(dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    }
    let out = Outputs { dir: out_dir, cfg };
    let mut run = Run::new(cfg)?;
    let result = run.execute(&out);
    match result {
        Ok(()) => Ok(run.finish()),
        Err(e @ (Error::NonFinite(_) | Error::Divergence(_))) => {
            let msg = format!("numerical failure at step {}: {e}", run.step);
            if let Some(dir) = out_dir {
                out.flush(&run.metrics, &run.evals)?;
                out.checkpoint(&run.agent, run.step, "abort.ckpt")?;
                crate::io::write_atomic(dir.join("abort.txt"), format!("{msg}\n").as_bytes())?;
            }
            Err(Error::NonFinite(msg))
        }
        Err(e) => Err(e),
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    agent: Agent,
    replay: ReplayBuffer,
    metrics: Vec<MetricsRow>,
    evals: Vec<EvalRow>,
    episode_returns: Vec<f64>,
    checkpoints: Vec<PathBuf>,
    step: usize,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self> {
        Ok(Run {
            cfg,
            agent: Agent::new(cfg)?,
            replay: ReplayBuffer::new(cfg.train.replay_capacity)?,
            metrics: Vec::new(),
            evals: Vec::new(),
            episode_returns: Vec::new(),
            checkpoints: Vec::new(),
            step: 0,
        })
    }

    fn finish(self) -> RunArtifacts {
        RunArtifacts {
            agent: self.agent,
            replay: self.replay,
            metrics: self.metrics,
            evals: self.evals,
            episode_returns: self.episode_returns,
            checkpoints: self.checkpoints,
        }
    }

    fn evaluate(&mut self, rng: &mut impl Rng) -> Result<()> {
        let n = self.cfg.train.eval_episodes;
        if n == 0 {
            return Ok(());
        }
        let returns = evaluate_returns(&self.agent, self.cfg, n, rng)?;
        let (mean_return, std_return) = mean_std(&returns);
        self.evals.push(EvalRow {
            step: self.step,
            mean_return,
            std_return,
            episodes: n,
        });
        Ok(())
    }

    fn execute(&mut self, out: &Outputs<'_>) -> Result<()> {
        let cfg = self.cfg;
        let t = &cfg.train;
        let env = self.agent.env;
        let adim = env.spec().action_dim;
        let started = Instant::now();
        let mut env_rng = substream(cfg.seed, "env");
        let mut explore_rng = substream(cfg.seed, "explore");
        let mut replay_rng = substream(cfg.seed, "replay");
        let mut update_rng = substream(cfg.seed, "update");
        let mut eval_rng = substream(cfg.seed, "eval");

        let mut state = env.reset(&mut env_rng);
        let mut episode_return = 0.0;
        let mut window = Window::default();
        let mut pretrained = false;

        for step in 1..=t.total_steps {
            self.step = step;
            let obs = env.observe(&state);
            let action = if step <= t.initial_random_steps {
                (0..adim).map(|_| explore_rng.random_range(-1.0..=1.0)).collect()
            } else {
                let a = self.agent.act(&obs, cfg, false, &mut explore_rng)?;
                if let Some(d) = a.improvement {
                    window.improvements.push(d);
                }
                a.action
            };
            let r = env.step(&state, &action)?;
            episode_return += r.reward;
            self.replay.push(Transition {
                state: state.clone(),
                obs,
                action,
                reward: r.reward,
                next_obs: r.next_obs.clone(),
                done: r.done,
            });
            if r.done {
                window.returns.push(episode_return);
                self.episode_returns.push(episode_return);
                episode_return = 0.0;
                state = env.reset(&mut env_rng);
            } else {
                state = r.next;
            }

            if step >= t.initial_random_steps && self.replay.len() >= t.batch.min(self.replay.len()) {
                if !pretrained && cfg.model_based.enabled {
                    for _ in 0..cfg.model_based.pretrain_updates {
                        let b = self.replay.sample_batch(t.batch, &mut replay_rng)?;
                        self.agent.model_step(&b, &t.adam())?;
                    }
                }
                pretrained = true;
                for _ in 0..t.updates_per_env_step {
                    let b = self.replay.sample_batch(t.batch, &mut replay_rng)?;
                    let s = self.agent.update(&b, cfg, &mut update_rng)?;
                    window.q_loss.push(s.q_loss);
                    window.policy_loss.push(s.policy_loss);
                    if let Some((d, rw)) = s.model_nll {
                        window.nll_dyn.push(d);
                        window.nll_rew.push(rw);
                    }
                    if let Some(kl) = s.distill_kl {
                        window.kl.push(kl);
                    }
                }
            }

            if step % t.log_every == 0 || step == t.total_steps {
                let w = std::mem::take(&mut window);
                self.metrics.push(MetricsRow {
                    step,
                    episode_return: mean_opt(&w.returns),
                    j_improvement: mean_opt(&w.improvements),
                    alpha: self.agent.alpha(),
                    q_loss: mean_opt(&w.q_loss),
                    policy_loss: mean_opt(&w.policy_loss),
                    wall_clock_ns: if t.record_wall_clock {
                        started.elapsed().as_nanos() as u64
                    } else {
                        0
                    },
                    model_nll_dyn: mean_opt(&w.nll_dyn),
                    model_nll_rew: mean_opt(&w.nll_rew),
                    distill_kl: mean_opt(&w.kl),
                });
            }
            let final_step = step == t.total_steps;
            if (t.eval_every > 0 && step % t.eval_every == 0) || final_step {
                self.evaluate(&mut eval_rng)?;
            }
            if (t.checkpoint_every > 0 && step % t.checkpoint_every == 0) || final_step {
                out.flush(&self.metrics, &self.evals)?;
                if let Some(p) = out.checkpoint(&self.agent, step, &checkpoint_name(step))? {
                    self.checkpoints.push(p);
                }
            }
        }
        Ok(())
    }
}
