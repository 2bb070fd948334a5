//! Learned dynamics and reward models, Retrace value expansion over short
//! model rollouts, and distillation of a rollout policy.

use std::cell::RefCell;
use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Graph, Var};
use crate::distributions::{noise_tensor, sample_on_graph, gaussian_kl_on_graph, Squash};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::training::{Agent, MbStack};
use crate::networks::{DirectPolicyNet, DynamicsNet, GaussianVars, MlpShape, RewardNet};
use crate::objective::ActionValue;
use crate::tensor::Tensor;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MBConfig {
    /// Train models alongside the agent and use model-based values.
    pub enabled: bool,
    pub horizon: usize,
    pub retrace_lambda: f64,
    pub pretrain_updates: usize,
    pub mb_value_targets: bool,
    pub model_hidden: usize,
    pub model_layers: usize,
}

impl Default for MBConfig {
    fn default() -> Self {
        MBConfig {
            enabled: false,
            horizon: 2,
            retrace_lambda: 0.9,
            pretrain_updates: 1000,
            mb_value_targets: true,
            model_hidden: MlpShape::MODEL.hidden,
            model_layers: MlpShape::MODEL.layers,
        }
    }
}

impl MBConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.retrace_lambda) {
            return Err(Error::Config(format!(
                "model_based.retrace_lambda must lie in [0, 1], got {}",
                self.retrace_lambda
            )));
        }
        if self.model_hidden == 0 || self.model_layers == 0 {
            return Err(Error::Config("model_based.model_hidden and model_layers must be positive".into()));
        }
        Ok(())
    }

    pub fn model_shape(&self) -> MlpShape {
        MlpShape {
            hidden: self.model_hidden,
            layers: self.model_layers,
        }
    }
}

/// Dynamics and reward networks trained on replay data.
#[derive(Clone, Debug)]
pub struct ModelPair {
    pub dynamics: DynamicsNet,
    pub reward: RewardNet,
}

impl ModelPair {
    pub fn new(state_dim: usize, action_dim: usize, shape: MlpShape, rng: &mut impl Rng) -> Result<Self> {
        Ok(ModelPair {
            dynamics: DynamicsNet::new(state_dim, action_dim, shape, rng)?,
            reward: RewardNet::new(state_dim, action_dim, shape, rng)?,
        })
    }

    pub fn freeze(&self, g: &mut Graph) {
        g.freeze(&self.dynamics.store);
        g.freeze(&self.reward.store);
    }
}

/// Mean over rows of the per-row Gaussian negative log-likelihood,
/// summed over dimensions.
pub fn gaussian_nll_on_graph(g: &mut Graph, pred: GaussianVars, target: Var) -> Result<Var> {
    let diff = g.sub(target, pred.mean)?;
    let neg_ls = g.neg(pred.log_std)?;
    let inv_std = g.exp(neg_ls)?;
    let z = g.mul(diff, inv_std)?;
    let z2 = g.square(z)?;
    let half = g.scale(z2, 0.5)?;
    let per = g.add(half, pred.log_std)?;
    let per = g.add_scalar(per, HALF_LN_2PI)?;
    let rows = g.sum_cols(per)?;
    g.mean(rows)
}

/// Supervised batch for model fitting.
pub struct ModelBatch<'a> {
    pub obs: &'a Tensor,
    pub actions: &'a Tensor,
    pub rewards: &'a Tensor,
    pub next_obs: &'a Tensor,
}

/// One Adam step on each model's likelihood. Returns the pre-step NLLs.
pub fn model_update(batch: &ModelBatch<'_>, models: &mut ModelPair, adam: &AdamConfig) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let s = g.input(batch.obs.clone());
    let a = g.input(batch.actions.clone());
    let s2 = g.input(batch.next_obs.clone());
    let r = g.input(batch.rewards.clone());
    let dyn_pred = models.dynamics.forward(&mut g, s, a)?;
    let nll_dyn = gaussian_nll_on_graph(&mut g, dyn_pred, s2)?;
    let rew_pred = models.reward.forward(&mut g, s, a)?;
    let nll_rew = gaussian_nll_on_graph(&mut g, rew_pred, r)?;
    let (d, rw) = (g.value(nll_dyn).item(), g.value(nll_rew).item());
    if !d.is_finite() || !rw.is_finite() {
        return Err(Error::NonFinite(format!("model likelihood (dynamics {d}, reward {rw})")));
    }
    let total = g.add(nll_dyn, nll_rew)?;
    let grads = g.backward(total)?;
    grads.accumulate_into(&mut models.dynamics.store);
    grads.accumulate_into(&mut models.reward.store);
    models.dynamics.store.adam_step(adam)?;
    models.reward.store.adam_step(adam)?;
    Ok((d, rw))
}

/// `sum_k (gamma lambda)^k delta_k`.
pub fn retrace_correction(deltas: &[f64], gamma: f64, lambda: f64) -> f64 {
    let mut coef = 1.0;
    let mut total = 0.0;
    for d in deltas {
        total += coef * d;
        coef *= gamma * lambda;
    }
    total
}

/// `q0 + retrace_correction(deltas)`.
pub fn retrace_sum(q0: f64, deltas: &[f64], gamma: f64, lambda: f64) -> f64 {
    q0 + retrace_correction(deltas, gamma, lambda)
}

/// Value-level view of a model rollout, used for exact reference checks.
pub trait RolloutModel {
    fn step(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, f64);
    fn q(&self, s: &[f64], a: &[f64]) -> f64;
    /// Rollout action at `s` and the soft value `V(s)` it implies.
    fn act(&self, s: &[f64]) -> (Vec<f64>, f64);
}

/// Retrace estimate of `Q(s, a)` from one deterministic rollout of
/// `horizon + 1` model steps.
pub fn retrace_q(model: &dyn RolloutModel, s: &[f64], a: &[f64], horizon: usize, gamma: f64, lambda: f64) -> f64 {
    let q0 = model.q(s, a);
    let mut deltas = Vec::with_capacity(horizon + 1);
    let (mut s_k, mut a_k, mut q_k) = (s.to_vec(), a.to_vec(), q0);
    for _ in 0..=horizon {
        let (s_next, r) = model.step(&s_k, &a_k);
        let (a_next, v_next) = model.act(&s_next);
        deltas.push(r + gamma * v_next - q_k);
        q_k = model.q(&s_next, &a_next);
        s_k = s_next;
        a_k = a_next;
    }
    retrace_sum(q0, &deltas, gamma, lambda)
}

/// Retrace over learned models as a differentiable action-value.
///
/// Rollout actions come from `rollout` with one reparameterized sample per
/// step. Noise is drawn from an internal generator so repeated calls on the
/// same seed are reproducible.
pub struct RetraceValue<'a> {
    pub q: &'a dyn ActionValue,
    pub models: &'a ModelPair,
    pub rollout: &'a DirectPolicyNet,
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub squash: Squash,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a> RetraceValue<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        q: &'a dyn ActionValue,
        models: &'a ModelPair,
        rollout: &'a DirectPolicyNet,
        cfg: &MBConfig,
        gamma: f64,
        alpha: f64,
        seed: u64,
    ) -> Self {
        RetraceValue {
            q,
            models,
            rollout,
            horizon: cfg.horizon,
            gamma,
            lambda: cfg.retrace_lambda,
            alpha,
            squash: Squash::Tanh,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// `(a', V(s'))` for a batch of rollout states.
    fn soft_value(&self, g: &mut Graph, s: Var, beta: f64) -> Result<(Var, Var)> {
        let rows = g.value(s).rows();
        let adim = self.rollout.action_dim;
        let pv = self.rollout.forward(g, s)?;
        let noise = noise_tensor(&mut *self.rng.borrow_mut(), rows, adim);
        let sample = sample_on_graph(g, pv.mu, pv.log_sigma, &noise, self.squash)?;
        let q = self.q.q_graph(g, s, sample.a, beta)?;
        let kl = g.add_scalar(sample.log_prob, adim as f64 * LN_2)?;
        let kl = g.scale(kl, self.alpha)?;
        let v = g.sub(q, kl)?;
        Ok((sample.a, v))
    }
}

impl ActionValue for RetraceValue<'_> {
    fn state_dim(&self) -> usize {
        self.q.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.q.action_dim()
    }

    fn q_graph(&self, g: &mut Graph, s: Var, a: Var, beta: f64) -> Result<Var> {
        let q0 = self.q.q_graph(g, s, a, beta)?;
        let (mut s_k, mut a_k, mut q_k) = (s, a, q0);
        let mut total = q0;
        let mut coef = 1.0;
        for _ in 0..=self.horizon {
            let r = self.models.reward.forward(g, s_k, a_k)?.mean;
            let s_next = self.models.dynamics.forward(g, s_k, a_k)?.mean;
            let (a_next, v_next) = self.soft_value(g, s_next, beta)?;
            let boot = g.scale(v_next, self.gamma)?;
            let delta = g.add(r, boot)?;
            let delta = g.sub(delta, q_k)?;
            let term = g.scale(delta, coef)?;
            total = g.add(total, term)?;
            coef *= self.gamma * self.lambda;
            q_k = self.q.q_graph(g, s_next, a_next, beta)?;
            s_k = s_next;
            a_k = a_next;
        }
        Ok(total)
    }

    fn freeze(&self, g: &mut Graph) {
        self.q.freeze(g);
        self.models.freeze(g);
        g.freeze(&self.rollout.store);
    }
}

/// One Adam step of the rollout network on the mean of
/// `KL(pi_iterative || pi_rollout)`, closed form before squashing.
/// Returns the pre-step KL.
pub fn distill_rollout_policy(
    rollout: &mut DirectPolicyNet,
    target_lambdas: &Tensor,
    states: &Tensor,
    adam: &AdamConfig,
) -> Result<f64> {
    let adim = rollout.action_dim;
    if target_lambdas.cols() != 2 * adim || target_lambdas.rows() != states.rows() {
        return Err(Error::InvalidArgument(format!(
            "distillation targets {:?} do not match {} states with {adim} action dims",
            target_lambdas.shape(),
            states.rows()
        )));
    }
    let mut g = Graph::new();
    let s = g.input(states.clone());
    let mu_p = g.input(target_lambdas.slice_cols(0, adim));
    let ls_p = g.input(target_lambdas.slice_cols(adim, adim));
    let pv = rollout.forward(&mut g, s)?;
    let kl = gaussian_kl_on_graph(&mut g, mu_p, ls_p, pv.mu, pv.log_sigma)?;
    let loss = g.mean(kl)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("distillation KL".into()));
    }
    g.backward(loss)?.accumulate_into(&mut rollout.store);
    rollout.store.adam_step(adam)?;
    Ok(value)
}

/// Outcome of handing a model-free agent's optimizer a model-based value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferReport {
    pub env: String,
    pub optimizer: String,
    pub objective_independent: bool,
    pub pre_returns: Vec<f64>,
    pub post_returns: Vec<f64>,
    /// Mean per-step `J_K - J_0` under each value estimate; `None` for a
    /// direct optimizer, which never evaluates the objective.
    pub pre_mean_improvement: Option<f64>,
    pub post_mean_improvement: Option<f64>,
    pub actions_identical: bool,
}

impl TransferReport {
    pub fn pre_mean_return(&self) -> f64 {
        mean(&self.pre_returns)
    }

    pub fn post_mean_return(&self) -> f64 {
        mean(&self.post_returns)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut t = crate::io::CsvTable::new(&["episode", "pre_return", "post_return"])?;
        for (i, (a, b)) in self.pre_returns.iter().zip(&self.post_returns).enumerate() {
            t.row(&[i.to_string(), crate::io::fmt_f64(*a), crate::io::fmt_f64(*b)])?;
        }
        t.into_bytes()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

struct EpisodeLog {
    returns: Vec<f64>,
    actions: Vec<Vec<f64>>,
    improvements: Vec<f64>,
}

fn run_episodes(agent: &Agent, cfg: &RunConfig, episodes: usize, seed: u64) -> Result<EpisodeLog> {
    let mut rng = crate::rng::substream(seed, "transfer");
    let env = agent.env;
    let mut log = EpisodeLog {
        returns: Vec::with_capacity(episodes),
        actions: Vec::new(),
        improvements: Vec::new(),
    };
    for _ in 0..episodes {
        let mut state = env.reset(&mut rng);
        let mut total = 0.0;
        loop {
            let out = agent.act(&env.observe(&state), cfg, true, &mut rng)?;
            log.improvements.extend(out.improvement);
            let r = env.step(&state, &out.action)?;
            log.actions.push(out.action);
            total += r.reward;
            if r.done {
                break;
            }
            state = r.next;
        }
        log.returns.push(total);
    }
    Ok(log)
}

/// Runs the same deterministic episodes twice: once with `mf` as trained,
/// once with `mf`'s optimizer plugged into `mb`'s value estimate (Retrace
/// over `mb`'s models when it has them). No weights are updated.
pub fn transfer_eval(
    mf: &Agent,
    mf_cfg: &RunConfig,
    mb: &Agent,
    mb_cfg: &RunConfig,
    episodes: usize,
    seed: u64,
) -> Result<TransferReport> {
    if mf.env != mb.env {
        return Err(Error::Incompatible(format!(
            "model-free checkpoint is for {} but the model-based stack is for {}",
            mf.env.name(),
            mb.env.name()
        )));
    }
    if mf.action_dim() != mb.action_dim() {
        return Err(Error::Incompatible("action dimensions differ between checkpoints".into()));
    }
    let hybrid_mb = mb.mb.as_ref().map(|stack| MbStack {
        models: stack.models.clone(),
        rollout: mb.rollout_net().cloned(),
    });
    let hybrid = Agent {
        env: mf.env,
        policy: mf.policy.clone(),
        critics: mb.critics.clone(),
        temperature: mf.temperature.clone(),
        mb: hybrid_mb,
    };
    let mut hybrid_cfg = mf_cfg.clone();
    hybrid_cfg.model_based = mb_cfg.model_based.clone();
    hybrid_cfg.model_based.enabled = hybrid.mb.is_some();

    let pre = run_episodes(mf, mf_cfg, episodes, seed)?;
    let post = run_episodes(&hybrid, &hybrid_cfg, episodes, seed)?;
    let improvement = |xs: &[f64]| (!xs.is_empty()).then(|| mean(xs));
    Ok(TransferReport {
        env: mf.env.name().to_string(),
        optimizer: mf.policy.kind().name().to_string(),
        objective_independent: crate::checkpoint::objective_independent(mf),
        actions_identical: pre.actions.len() == post.actions.len()
            && pre
                .actions
                .iter()
                .flatten()
                .zip(post.actions.iter().flatten())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
        pre_mean_improvement: improvement(&pre.improvements),
        post_mean_improvement: improvement(&post.improvements),
        pre_returns: pre.returns,
        post_returns: post.returns,
    })
}
