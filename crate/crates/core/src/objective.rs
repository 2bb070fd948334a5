//! The variational objective `J(lambda; s) = E_pi[Q(s, a)] - alpha KL(pi || U)`,
//! pessimistic ensemble estimates and temperature adaptation.

use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Graph, ParamStore, Var};
use crate::distributions::{noise_tensor, sample_on_graph, PolicyParams, SampleVars, Squash};
use crate::error::{Error, Result};
use crate::networks::{MlpShape, QArch, QNet};
use crate::tensor::Tensor;

/// Temperature, pessimism and sampling settings of the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Initial temperature; adapted during training.
    pub alpha: f64,
    /// Pessimism while acting and evaluating.
    pub beta_act: f64,
    /// Pessimism for critic targets and policy training.
    pub beta_train: f64,
    pub n_action_samples: usize,
    /// Pair every noise draw with its negation.
    pub antithetic: bool,
    #[serde(skip)]
    pub squash: Squash,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            alpha: 1.0,
            beta_act: 1.0,
            beta_train: 1.0,
            n_action_samples: 10,
            antithetic: false,
            squash: Squash::Tanh,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("objective.alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta_act >= 0.0 && self.beta_train >= 0.0) {
            return Err(Error::Config("objective.beta_act and objective.beta_train must be non-negative".into()));
        }
        if self.n_action_samples == 0 {
            return Err(Error::Config("objective.n_action_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// `[n_action_samples * rows, |A|]` noise honouring `antithetic`.
    pub fn noise(&self, rng: &mut impl Rng, rows: usize, action_dim: usize) -> Tensor {
        if self.antithetic {
            sample_noise_antithetic(rng, self.n_action_samples, rows, action_dim)
        } else {
            sample_noise(rng, self.n_action_samples, rows, action_dim)
        }
    }
}

/// `mean(qs) - beta * std(qs)` with the population standard deviation.
pub fn pessimistic_q(qs: &[f64], beta: f64) -> Result<f64> {
    if qs.is_empty() {
        return Err(Error::InvalidArgument("pessimistic_q needs at least one value".into()));
    }
    if let [a, b] = qs {
        // mean - beta * |a - b| / 2 rewritten around the minimum so beta = 1 is exact
        let (lo, hi) = if a <= b { (*a, *b) } else { (*b, *a) };
        return Ok(lo + (1.0 - beta) * 0.5 * (hi - lo));
    }
    let n = qs.len() as f64;
    let mean = qs.iter().sum::<f64>() / n;
    let var = qs.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / n;
    Ok(mean - beta * var.sqrt())
}

/// Graph form of [`pessimistic_q`] over per-member `[rows, 1]` values.
pub fn pessimistic_on_graph(g: &mut Graph, qs: &[Var], beta: f64) -> Result<Var> {
    match qs {
        [] => Err(Error::InvalidArgument("pessimistic_q needs at least one value".into())),
        [q] => Ok(*q),
        [a, b] => {
            let sum = g.add(*a, *b)?;
            let mean = g.scale(sum, 0.5)?;
            let diff = g.sub(*a, *b)?;
            let spread = g.abs(diff)?;
            let penalty = g.scale(spread, 0.5 * beta)?;
            g.sub(mean, penalty)
        }
        _ => {
            let all = g.concat(qs)?;
            let n = qs.len() as f64;
            let total = g.sum_cols(all)?;
            let mean = g.scale(total, 1.0 / n)?;
            let centered = g.sub(all, mean)?;
            let sq = g.square(centered)?;
            let ss = g.sum_cols(sq)?;
            let var = g.scale(ss, 1.0 / n)?;
            // offset keeps the derivative finite when all members agree
            let var = g.add_scalar(var, 1e-12)?;
            let std = g.sqrt(var)?;
            let penalty = g.scale(std, beta)?;
            g.sub(mean, penalty)
        }
    }
}

/// Anything that scores batches of state-action pairs on a graph.
pub trait ActionValue {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;

    /// Pessimistic values `[rows, 1]` for `s: [rows, |S|]`, `a: [rows, |A|]`.
    fn q_graph(&self, g: &mut Graph, s: Var, a: Var, beta: f64) -> Result<Var>;

    /// Marks every parameter store as constant on `g`.
    fn freeze(&self, _g: &mut Graph) {}

    fn q_value(&self, s: &[f64], a: &[f64], beta: f64) -> Result<f64> {
        let mut g = Graph::new();
        self.freeze(&mut g);
        let sv = g.input(Tensor::row(s.to_vec()));
        let av = g.input(Tensor::row(a.to_vec()));
        let q = self.q_graph(&mut g, sv, av, beta)?;
        Ok(g.value(q).item())
    }
}

impl ActionValue for [QNet] {
    fn state_dim(&self) -> usize {
        self[0].state_dim
    }

    fn action_dim(&self) -> usize {
        self[0].action_dim
    }

    fn q_graph(&self, g: &mut Graph, s: Var, a: Var, beta: f64) -> Result<Var> {
        let qs = self.iter().map(|net| net.forward(g, s, a)).collect::<Result<Vec<_>>>()?;
        pessimistic_on_graph(g, &qs, beta)
    }

    fn freeze(&self, g: &mut Graph) {
        for net in self {
            g.freeze(&net.store);
        }
    }
}

/// A borrowed set of Q-networks scored together, such as the target copies.
#[derive(Clone, Copy)]
pub struct QSet<'a>(pub &'a [QNet]);

impl ActionValue for QSet<'_> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.0.action_dim()
    }

    fn q_graph(&self, g: &mut Graph, s: Var, a: Var, beta: f64) -> Result<Var> {
        self.0.q_graph(g, s, a, beta)
    }

    fn freeze(&self, g: &mut Graph) {
        self.0.freeze(g)
    }
}

/// Live Q-networks and their slowly tracking target copies.
#[derive(Clone, Debug)]
pub struct QEnsemble {
    pub nets: Vec<QNet>,
    pub targets: Vec<QNet>,
}

impl QEnsemble {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        arch: QArch,
        shape: MlpShape,
        members: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if members == 0 {
            return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
        }
        let nets = (0..members)
            .map(|_| QNet::new(state_dim, action_dim, arch, shape, rng))
            .collect::<Result<Vec<_>>>()?;
        let targets = nets.clone();
        Ok(QEnsemble { nets, targets })
    }

    pub fn targets(&self) -> QSet<'_> {
        QSet(&self.targets)
    }

    /// `target <- (1 - tau) target + tau live`.
    pub fn polyak(&mut self, tau: f64) -> Result<()> {
        for (t, l) in self.targets.iter_mut().zip(&self.nets) {
            t.store.polyak_from(&l.store, tau)?;
        }
        Ok(())
    }

    pub fn q_members(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.nets.iter().map(|n| n.q_forward(s, a)).collect()
    }
}

impl ActionValue for QEnsemble {
    fn state_dim(&self) -> usize {
        self.nets.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.nets.action_dim()
    }

    fn q_graph(&self, g: &mut Graph, s: Var, a: Var, beta: f64) -> Result<Var> {
        self.nets.q_graph(g, s, a, beta)
    }

    fn freeze(&self, g: &mut Graph) {
        self.nets.freeze(g)
    }
}

/// `scale * inner + offset`, for perturbation experiments.
pub struct AffineValue<'a> {
    pub inner: &'a dyn ActionValue,
    pub scale: f64,
    pub offset: f64,
}

impl ActionValue for AffineValue<'_> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }

    fn q_graph(&self, g: &mut Graph, s: Var, a: Var, beta: f64) -> Result<Var> {
        let q = self.inner.q_graph(g, s, a, beta)?;
        let q = g.scale(q, self.scale)?;
        g.add_scalar(q, self.offset)
    }

    fn freeze(&self, g: &mut Graph) {
        self.inner.freeze(g)
    }
}

/// Analytic action-value surfaces for testing optimizers.
pub mod surfaces {
    use super::*;

    /// `Q(s, a) = -scale * |a - (target + gain * s)|^2`.
    ///
    /// With `gain = 0` the surface ignores the state. With `gain != 0`
    /// the state and action dimensions must agree.
    #[derive(Clone, Debug)]
    pub struct Quadratic {
        pub target: Vec<f64>,
        pub gain: f64,
        pub scale: f64,
        pub state_dim: usize,
    }

    impl Quadratic {
        pub fn fixed(target: Vec<f64>, state_dim: usize) -> Self {
            Quadratic {
                target,
                gain: 0.0,
                scale: 1.0,
                state_dim,
            }
        }

        pub fn argmax(&self, s: &[f64]) -> Vec<f64> {
            self.target
                .iter()
                .enumerate()
                .map(|(i, t)| t + self.gain * s.get(i).copied().unwrap_or(0.0))
                .collect()
        }
    }

    impl ActionValue for Quadratic {
        fn state_dim(&self) -> usize {
            self.state_dim
        }

        fn action_dim(&self) -> usize {
            self.target.len()
        }

        fn q_graph(&self, g: &mut Graph, s: Var, a: Var, _beta: f64) -> Result<Var> {
            let t = g.input(Tensor::row(self.target.clone()));
            let centre = if self.gain != 0.0 {
                let shifted = g.scale(s, self.gain)?;
                g.add(shifted, t)?
            } else {
                t
            };
            let d = g.sub(a, centre)?;
            let d2 = g.square(d)?;
            let ss = g.sum_cols(d2)?;
            g.scale(ss, -self.scale)
        }
    }

    /// Sum of isotropic Gaussian bumps `h_k exp(-|a - c_k|^2 / width)`.
    #[derive(Clone, Debug)]
    pub struct Bumps {
        pub centres: Vec<Vec<f64>>,
        pub heights: Vec<f64>,
        pub width: f64,
        pub state_dim: usize,
    }

    impl Bumps {
        pub fn value(&self, a: &[f64]) -> f64 {
            self.centres
                .iter()
                .zip(&self.heights)
                .map(|(c, h)| {
                    let d2: f64 = c.iter().zip(a).map(|(ci, ai)| (ai - ci) * (ai - ci)).sum();
                    h * (-d2 / self.width).exp()
                })
                .sum()
        }
    }

    impl ActionValue for Bumps {
        fn state_dim(&self) -> usize {
            self.state_dim
        }

        fn action_dim(&self) -> usize {
            self.centres[0].len()
        }

        fn q_graph(&self, g: &mut Graph, _s: Var, a: Var, _beta: f64) -> Result<Var> {
            let mut total: Option<Var> = None;
            for (c, h) in self.centres.iter().zip(&self.heights) {
                let cv = g.input(Tensor::row(c.clone()));
                let d = g.sub(a, cv)?;
                let d2 = g.square(d)?;
                let ss = g.sum_cols(d2)?;
                let e = g.scale(ss, -1.0 / self.width)?;
                let e = g.exp(e)?;
                let term = g.scale(e, *h)?;
                total = Some(match total {
                    Some(t) => g.add(t, term)?,
                    None => term,
                });
            }
            total.ok_or_else(|| Error::InvalidArgument("bump surface has no bumps".into()))
        }
    }
    /// Mirrored bumps at `+c` and `-c` with heights `1 + s_0` and `1 - s_0`.
    ///
    /// A one-dimensional state vanishes under layer normalization, so an
    /// iterative optimizer trained on this family can only tell the better
    /// bump from its gradient estimates.
    #[derive(Clone, Debug)]
    pub struct TiltedPair {
        pub centre: Vec<f64>,
        pub width: f64,
    }

    impl ActionValue for TiltedPair {
        fn state_dim(&self) -> usize {
            1
        }

        fn action_dim(&self) -> usize {
            self.centre.len()
        }

        fn q_graph(&self, g: &mut Graph, s: Var, a: Var, _beta: f64) -> Result<Var> {
            let mut total: Option<Var> = None;
            for sign in [1.0, -1.0] {
                let cv = g.input(Tensor::row(self.centre.iter().map(|c| sign * c).collect()));
                let d = g.sub(a, cv)?;
                let d2 = g.square(d)?;
                let ss = g.sum_cols(d2)?;
                let e = g.scale(ss, -1.0 / self.width)?;
                let e = g.exp(e)?;
                let h = g.scale(s, sign)?;
                let h = g.add_scalar(h, 1.0)?;
                let term = g.mul(e, h)?;
                total = Some(match total {
                    Some(t) => g.add(t, term)?,
                    None => term,
                });
            }
            Ok(total.expect("two bumps"))
        }
    }
}

/// `[n_samples * rows, |A|]` standard-normal noise laid out sample-major.
pub fn sample_noise(rng: &mut impl Rng, n_samples: usize, rows: usize, action_dim: usize) -> Tensor {
    noise_tensor(rng, n_samples * rows, action_dim)
}

/// Like [`sample_noise`], with sample `k + n/2` the negation of sample `k`.
/// An odd final sample is zero.
pub fn sample_noise_antithetic(rng: &mut impl Rng, n_samples: usize, rows: usize, action_dim: usize) -> Tensor {
    let half = n_samples / 2;
    let base = noise_tensor(rng, half * rows, action_dim);
    let mut data = base.data().to_vec();
    data.extend(base.data().iter().map(|x| -x));
    data.resize(n_samples * rows * action_dim, 0.0);
    Tensor::matrix(n_samples * rows, action_dim, data).expect("sized")
}

/// Graph nodes of a batched objective evaluation.
pub struct ObjectiveVars {
    /// Per-state objective `[1, rows]`.
    pub j: Var,
    /// Per-sample contributions `[n_samples, rows]`.
    pub per_sample: Var,
    pub samples: SampleVars,
}

/// Builds `J` for a batch of states on `g`.
///
/// `s` is `[rows, |S|]`; `mu` and `log_sigma` are `[rows, |A|]`; `noise`
/// is `[n * rows, |A|]` where row `k * rows + i` is sample `k` of state `i`.
#[allow(clippy::too_many_arguments)]
pub fn objective_on_graph(
    g: &mut Graph,
    q: &dyn ActionValue,
    s: Var,
    mu: Var,
    log_sigma: Var,
    noise: &Tensor,
    alpha: f64,
    beta: f64,
    squash: Squash,
) -> Result<ObjectiveVars> {
    let (rows, adim) = g
        .value(mu)
        .dims2()
        .ok_or_else(|| Error::Tensor("mu must be rank 2".into()))?;
    if rows == 0 || noise.cols() != adim || noise.rows() % rows != 0 || noise.rows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "noise shape {:?} does not fit {rows} states with {adim} action dims",
            noise.shape()
        )));
    }
    let n = noise.rows() / rows;
    let mu_r = g.repeat_rows(mu, n)?;
    let ls_r = g.repeat_rows(log_sigma, n)?;
    let s_r = g.repeat_rows(s, n)?;
    let samples = sample_on_graph(g, mu_r, ls_r, noise, squash)?;
    let qv = q.q_graph(g, s_r, samples.a, beta)?;
    let kl = g.add_scalar(samples.log_prob, adim as f64 * LN_2)?;
    let kl = g.scale(kl, alpha)?;
    let per = g.sub(qv, kl)?;
    let per_sample = g.reshape(per, n, rows)?;
    let j = g.mean_rows(per_sample)?;
    Ok(ObjectiveVars { j, per_sample, samples })
}

fn split_lambda(lambdas: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = lambdas.cols();
    if c % 2 != 0 || c == 0 {
        return Err(Error::InvalidArgument(format!("lambda rows need 2|A| entries, got {c}")));
    }
    Ok((lambdas.slice_cols(0, c / 2), lambdas.slice_cols(c / 2, c / 2)))
}

/// Per-state `J` and its gradient with respect to `[mu, log sigma]`.
///
/// `states` is `[rows, |S|]`, `lambdas` is `[rows, 2|A|]`.
pub fn j_and_grad_batch(
    q: &dyn ActionValue,
    states: &Tensor,
    lambdas: &Tensor,
    noise: &Tensor,
    alpha: f64,
    beta: f64,
    squash: Squash,
) -> Result<(Vec<f64>, Tensor)> {
    let (mu_t, ls_t) = split_lambda(lambdas)?;
    let mut g = Graph::new();
    q.freeze(&mut g);
    let s = g.input(states.clone());
    let mu = g.leaf(mu_t);
    let ls = g.leaf(ls_t);
    let obj = objective_on_graph(&mut g, q, s, mu, ls, noise, alpha, beta, squash)?;
    let total = g.sum(obj.j)?;
    let grads = g.backward(total)?;
    let gm = grads.get_or_zeros(&g, mu);
    let gl = grads.get_or_zeros(&g, ls);
    Ok((g.value(obj.j).data().to_vec(), Tensor::concat_cols(&[&gm, &gl])?))
}

/// Per-state `J` without gradients.
pub fn j_batch(
    q: &dyn ActionValue,
    states: &Tensor,
    lambdas: &Tensor,
    noise: &Tensor,
    alpha: f64,
    beta: f64,
    squash: Squash,
) -> Result<Vec<f64>> {
    let (mu_t, ls_t) = split_lambda(lambdas)?;
    let mut g = Graph::new();
    q.freeze(&mut g);
    let s = g.input(states.clone());
    let mu = g.input(mu_t);
    let ls = g.input(ls_t);
    let obj = objective_on_graph(&mut g, q, s, mu, ls, noise, alpha, beta, squash)?;
    Ok(g.value(obj.j).data().to_vec())
}

fn check_noise(cfg: &ObjectiveConfig, noise: &Tensor) -> Result<()> {
    if noise.rows() != cfg.n_action_samples {
        return Err(Error::InvalidArgument(format!(
            "expected {} noise rows, got {}",
            cfg.n_action_samples,
            noise.rows()
        )));
    }
    Ok(())
}

/// Monte-Carlo `J(lambda; s)` with `beta_act` pessimism. `noise` is `[n, |A|]`.
pub fn estimate_j(
    lambda: &PolicyParams,
    s: &[f64],
    q: &dyn ActionValue,
    cfg: &ObjectiveConfig,
    noise: &Tensor,
) -> Result<f64> {
    check_noise(cfg, noise)?;
    let lam = Tensor::row(lambda.to_flat());
    let j = j_batch(q, &Tensor::row(s.to_vec()), &lam, noise, cfg.alpha, cfg.beta_act, cfg.squash)?;
    Ok(j[0])
}

/// Per-sample terms whose mean is [`estimate_j`].
pub fn j_samples(
    lambda: &PolicyParams,
    s: &[f64],
    q: &dyn ActionValue,
    cfg: &ObjectiveConfig,
    noise: &Tensor,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    q.freeze(&mut g);
    let sv = g.input(Tensor::row(s.to_vec()));
    let mu = g.input(Tensor::row(lambda.mu.clone()));
    let ls = g.input(Tensor::row(lambda.log_sigma()));
    let obj = objective_on_graph(&mut g, q, sv, mu, ls, noise, cfg.alpha, cfg.beta_act, cfg.squash)?;
    Ok(g.value(obj.per_sample).data().to_vec())
}

/// `dJ / d[mu, log sigma]` under fixed noise.
pub fn grad_lambda_j(
    lambda: &PolicyParams,
    s: &[f64],
    q: &dyn ActionValue,
    cfg: &ObjectiveConfig,
    noise: &Tensor,
) -> Result<Vec<f64>> {
    check_noise(cfg, noise)?;
    let lam = Tensor::row(lambda.to_flat());
    let (_, grad) = j_and_grad_batch(q, &Tensor::row(s.to_vec()), &lam, noise, cfg.alpha, cfg.beta_act, cfg.squash)?;
    Ok(grad.into_data())
}

/// Log-parameterized temperature adapted toward an entropy target.
#[derive(Clone, Debug)]
pub struct Temperature {
    pub store: ParamStore,
    adam: AdamConfig,
    pub target_entropy: f64,
}

impl Temperature {
    pub fn new(alpha: f64, lr: f64, target_entropy: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        let mut store = ParamStore::new();
        store.add("log_alpha", Tensor::scalar(alpha.ln()))?;
        Ok(Temperature {
            store,
            adam: AdamConfig::with_lr(lr),
            target_entropy,
        })
    }

    /// Default target `-|A|`.
    pub fn for_action_dim(alpha: f64, lr: f64, action_dim: usize) -> Result<Self> {
        Self::new(alpha, lr, -(action_dim as f64))
    }

    pub fn log_alpha(&self) -> f64 {
        self.store.value(0).item()
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha().exp()
    }

    /// One Adam step on `log_alpha * (entropy - target)`; returns the new alpha.
    pub fn update(&mut self, entropy_estimate: f64) -> Result<f64> {
        if !entropy_estimate.is_finite() {
            return Err(Error::NonFinite("entropy estimate".into()));
        }
        let mut g = Graph::new();
        let la = g.param(&self.store, 0);
        let loss = g.scale(la, entropy_estimate - self.target_entropy)?;
        g.backward(loss)?.accumulate_into(&mut self.store);
        self.store.adam_step(&self.adam)?;
        Ok(self.alpha())
    }
}
