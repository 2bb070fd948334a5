//! Tanh-squashed diagonal Gaussian policies.
//!
//! Parameters are held pre-squash as `(mu, sigma)`. Actions are
//! `a = tanh(mu + sigma * noise)`, so every sample lies strictly inside
//! `(-1, 1)`. The prior is uniform on `[-1, 1]^|A|`, whose log-density is
//! `-|A| log 2`.

use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_SIGMA_MIN: f64 = -20.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Whether actions pass through `tanh`.
///
/// `Identity` exists so closed-form Gaussian expectations are available in
/// tests; training always squashes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Squash {
    #[default]
    Tanh,
    Identity,
}

/// Diagonal Gaussian parameters for one state, pre-squash.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PolicyParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::InvalidArgument(format!(
                "mu has {} entries, sigma {}",
                mu.len(),
                sigma.len()
            )));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("sigma must be positive and finite, got {s}")));
        }
        Ok(PolicyParams { mu, sigma })
    }

    /// `mu = 0`, `sigma = 1`.
    pub fn standard(action_dim: usize) -> Self {
        PolicyParams {
            mu: vec![0.0; action_dim],
            sigma: vec![1.0; action_dim],
        }
    }

    pub fn from_log_sigma(mu: Vec<f64>, log_sigma: &[f64]) -> Result<Self> {
        Self::new(mu, log_sigma.iter().map(|l| l.exp()).collect())
    }

    /// Inverse of [`PolicyParams::to_flat`].
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::InvalidArgument("flat parameter vector has odd length".into()));
        }
        let a = flat.len() / 2;
        Self::from_log_sigma(flat[..a].to_vec(), &flat[a..])
    }

    pub fn action_dim(&self) -> usize {
        self.mu.len()
    }

    pub fn log_sigma(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| s.ln()).collect()
    }

    /// `[mu, log sigma]`, the space optimizers work in.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.mu.clone();
        v.extend(self.log_sigma());
        v
    }

    /// Deterministic action `tanh(mu)`.
    pub fn mean_action(&self, squash: Squash) -> Vec<f64> {
        self.mu.iter().map(|&m| squash_value(m, squash)).collect()
    }
}

/// One reparameterized draw.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSample {
    pub a: Vec<f64>,
    pub u: Vec<f64>,
    pub noise: Vec<f64>,
}

fn squash_value(u: f64, squash: Squash) -> f64 {
    match squash {
        Squash::Tanh => u.tanh(),
        Squash::Identity => u,
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(1 - tanh(u)^2)` in a form that stays finite for large `|u|`.
pub fn log_squash_jacobian(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

pub fn sample_reparam(lambda: &PolicyParams, noise: &[f64], squash: Squash) -> Result<ActionSample> {
    if noise.len() != lambda.action_dim() {
        return Err(Error::InvalidArgument(format!(
            "noise has {} entries for a {}-dimensional action",
            noise.len(),
            lambda.action_dim()
        )));
    }
    let u: Vec<f64> = lambda
        .mu
        .iter()
        .zip(&lambda.sigma)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect();
    let a = u.iter().map(|&x| squash_value(x, squash)).collect();
    Ok(ActionSample {
        a,
        u,
        noise: noise.to_vec(),
    })
}

/// Log-density of `sample.a` (density over the squashed action).
pub fn log_prob(lambda: &PolicyParams, sample: &ActionSample, squash: Squash) -> Result<f64> {
    let mut total = 0.0;
    for ((&m, &s), &u) in lambda.mu.iter().zip(&lambda.sigma).zip(&sample.u) {
        if s <= 0.0 {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {s}")));
        }
        let z = (u - m) / s;
        total += -0.5 * z * z - s.ln() - HALF_LN_2PI;
        if squash == Squash::Tanh {
            total -= log_squash_jacobian(u);
        }
    }
    Ok(total)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `[rows, cols]` tensor of standard-normal draws.
pub fn noise_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, standard_normal(rng, rows * cols)).expect("sized")
}

/// Monte-Carlo `KL(pi || U(-1,1)^|A|) = E[log pi(a)] + |A| log 2`.
pub fn kl_to_uniform<R: Rng + ?Sized>(lambda: &PolicyParams, n_samples: usize, rng: &mut R) -> Result<f64> {
    let (mean, _) = kl_to_uniform_with_se(lambda, n_samples, rng)?;
    Ok(mean)
}

/// As [`kl_to_uniform`], also returning the Monte-Carlo standard error.
pub fn kl_to_uniform_with_se<R: Rng + ?Sized>(
    lambda: &PolicyParams,
    n_samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let d = lambda.action_dim();
    let mut vals = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let noise = standard_normal(rng, d);
        let s = sample_reparam(lambda, &noise, Squash::Tanh)?;
        vals.push(log_prob(lambda, &s, Squash::Tanh)? + d as f64 * LN_2);
    }
    Ok(mean_and_se(&vals))
}

pub(crate) fn mean_and_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Closed-form `KL(p || q)` between diagonal Gaussians, pre-squash.
pub fn gaussian_kl(p: &PolicyParams, q: &PolicyParams) -> f64 {
    p.mu
        .iter()
        .zip(&p.sigma)
        .zip(q.mu.iter().zip(&q.sigma))
        .map(|((mp, sp), (mq, sq))| (sq / sp).ln() + (sp * sp + (mp - mq) * (mp - mq)) / (2.0 * sq * sq) - 0.5)
        .sum()
}

/// Graph nodes of a batch of reparameterized samples.
pub struct SampleVars {
    pub u: Var,
    pub a: Var,
    /// Per-row log-density `[rows, 1]`.
    pub log_prob: Var,
}

/// Reparameterized samples and their log-densities on a graph.
///
/// `mu` and `log_sigma` are `[rows, |A|]`; `noise` is a constant of the same
/// shape.
pub fn sample_on_graph(g: &mut Graph, mu: Var, log_sigma: Var, noise: &Tensor, squash: Squash) -> Result<SampleVars> {
    let eps = g.input(noise.clone());
    let sigma = g.exp(log_sigma)?;
    let spread = g.mul(sigma, eps)?;
    let u = g.add(mu, spread)?;
    let a = match squash {
        Squash::Tanh => g.tanh(u)?,
        Squash::Identity => u,
    };
    // log N(u; mu, sigma) with (u - mu) / sigma == noise
    let quad = noise.map(|e| -0.5 * e * e - HALF_LN_2PI);
    let quad = g.input(quad);
    let per_dim = g.sub(quad, log_sigma)?;
    let per_dim = match squash {
        Squash::Tanh => {
            let two_u = g.scale(u, -2.0)?;
            let sp = g.softplus(two_u)?;
            let inner = g.add(u, sp)?;
            let inner = g.add_scalar(inner, -LN_2)?;
            // subtracting log(1 - tanh^2) = 2 (ln2 - u - softplus(-2u))
            let corr = g.scale(inner, 2.0)?;
            g.add(per_dim, corr)?
        }
        Squash::Identity => per_dim,
    };
    let log_prob = g.sum_cols(per_dim)?;
    Ok(SampleVars { u, a, log_prob })
}

/// Per-row closed-form Gaussian KL on a graph, `[rows, 1]`.
pub fn gaussian_kl_on_graph(g: &mut Graph, mu_p: Var, ls_p: Var, mu_q: Var, ls_q: Var) -> Result<Var> {
    let log_ratio = g.sub(ls_q, ls_p)?;
    let var_p = {
        let two = g.scale(ls_p, 2.0)?;
        g.exp(two)?
    };
    let diff = g.sub(mu_p, mu_q)?;
    let diff2 = g.square(diff)?;
    let num = g.add(var_p, diff2)?;
    let var_q2 = {
        let two = g.scale(ls_q, 2.0)?;
        let v = g.exp(two)?;
        g.scale(v, 2.0)?
    };
    let frac = g.div(num, var_q2)?;
    let per_dim = g.add(log_ratio, frac)?;
    let per_dim = g.add_scalar(per_dim, -0.5)?;
    g.sum_cols(per_dim)
}

/// Density of a 1-D squashed Gaussian evaluated in action space. Test oracle.
#[cfg(test)]
pub(crate) fn squashed_density_1d(mu: f64, sigma: f64, a: f64) -> f64 {
    let u = a.atanh();
    let z = (u - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()) / (1.0 - a * a)
}
